#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "recipe/errors.hpp"

namespace recipe::numerics {

// One-sided spectrum of a real signal: floor(L/2)+1 non-negative-frequency
// bins of the unnormalized DFT, plus the time-domain length it came from.
struct ComplexSpectrum {
    std::vector<std::complex<double>> bins;
    std::size_t origin_length = 0;
};

// In-place complex FFT for arbitrary lengths: recursive mixed radix over
// factors {2,3,5} with a Bluestein chirp-z fallback for other factors.
// The inverse applies the 1/N normalization.
void fft(std::vector<std::complex<double>>& a, bool inverse);

// Forward one-sided transform of a real signal of length >= 2.
ComplexSpectrum rfft(std::span<const double> x);

// Inverse one-sided transform; requires bins.size() == floor(out_length/2)+1.
// Defined as the real part of the inverse DFT of the Hermitian extension, so
// imaginary components of the DC and Nyquist bins have no effect.
std::vector<double> irfft(const ComplexSpectrum& s, std::size_t out_length);

inline std::size_t rfft_bins(std::size_t length) { return length / 2 + 1; }

}  // namespace recipe::numerics
