#include "recipe/fft.hpp"

#include <cmath>

namespace recipe::numerics {

namespace {

using cd = std::complex<double>;

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Iterative radix-2, used directly for power-of-two lengths and as the
// convolution engine inside Bluestein.
void fft_pow2(std::vector<cd>& a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const cd wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cd w(1.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                cd u = a[i + j];
                cd v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

void fft_dispatch(std::vector<cd>& a, bool inverse);

// Chirp-z transform for lengths with large prime factors.
void fft_bluestein(std::vector<cd>& a, bool inverse) {
    const std::size_t n = a.size();
    const double sign = inverse ? 1.0 : -1.0;
    std::vector<cd> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        // k^2 mod 2n keeps the phase argument small for long inputs
        const std::size_t k2 = (k * k) % (2 * n);
        const double ang = sign * M_PI * static_cast<double>(k2) / static_cast<double>(n);
        chirp[k] = cd(std::cos(ang), std::sin(ang));
    }
    const std::size_t m = next_pow2(2 * n - 1);
    std::vector<cd> u(m, cd(0.0)), v(m, cd(0.0));
    for (std::size_t k = 0; k < n; ++k) u[k] = a[k] * chirp[k];
    v[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) {
        v[k] = std::conj(chirp[k]);
        v[m - k] = std::conj(chirp[k]);
    }
    fft_pow2(u, false);
    fft_pow2(v, false);
    for (std::size_t k = 0; k < m; ++k) u[k] *= v[k];
    fft_pow2(u, true);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t k = 0; k < n; ++k) a[k] = u[k] * inv_m * chirp[k];
}

// Recursive Cooley-Tukey over small radices.
void fft_mixed(std::vector<cd>& a, bool inverse, std::size_t radix) {
    const std::size_t n = a.size();
    const std::size_t m = n / radix;
    std::vector<std::vector<cd>> sub(radix, std::vector<cd>(m));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t r = 0; r < radix; ++r) sub[r][i] = a[i * radix + r];
    }
    for (std::size_t r = 0; r < radix; ++r) fft_dispatch(sub[r], inverse);

    const double sign = inverse ? 1.0 : -1.0;
    std::vector<cd> root(n);
    for (std::size_t t = 0; t < n; ++t) {
        const double ang = sign * 2.0 * M_PI * static_cast<double>(t) / static_cast<double>(n);
        root[t] = cd(std::cos(ang), std::sin(ang));
    }
    for (std::size_t k = 0; k < n; ++k) {
        cd acc(0.0);
        for (std::size_t r = 0; r < radix; ++r) {
            acc += sub[r][k % m] * root[(r * k) % n];
        }
        a[k] = acc;
    }
}

void fft_dispatch(std::vector<cd>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n <= 1) return;
    if ((n & (n - 1)) == 0) {
        fft_pow2(a, inverse);
        return;
    }
    for (std::size_t radix : {2, 3, 5}) {
        if (n % radix == 0) {
            fft_mixed(a, inverse, radix);
            return;
        }
    }
    fft_bluestein(a, inverse);
}

}  // namespace

void fft(std::vector<cd>& a, bool inverse) {
    fft_dispatch(a, inverse);
    if (inverse) {
        const double inv_n = 1.0 / static_cast<double>(a.size());
        for (cd& x : a) x *= inv_n;
    }
}

ComplexSpectrum rfft(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n < 2) throw InvalidInputError("rfft requires length >= 2");
    std::vector<cd> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = cd(x[i], 0.0);
    fft(a, false);
    ComplexSpectrum s;
    s.origin_length = n;
    s.bins.assign(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(rfft_bins(n)));
    // mathematically exact zeros for a real signal
    s.bins.front() = cd(s.bins.front().real(), 0.0);
    if (n % 2 == 0) s.bins.back() = cd(s.bins.back().real(), 0.0);
    return s;
}

std::vector<double> irfft(const ComplexSpectrum& s, std::size_t out_length) {
    if (out_length < 2 || s.bins.size() != rfft_bins(out_length)) {
        throw InvalidInputError("irfft bin count does not match output length");
    }
    const std::size_t n = out_length;
    std::vector<cd> a(n);
    const std::size_t k_top = s.bins.size() - 1;
    a[0] = s.bins[0];
    for (std::size_t k = 1; k <= k_top; ++k) {
        a[k] = s.bins[k];
        if (n - k > k_top) a[n - k] = std::conj(s.bins[k]);
    }
    fft(a, true);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i].real();
    return out;
}

}  // namespace recipe::numerics
