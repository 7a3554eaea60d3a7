#include "recipe/tape.hpp"

#include <algorithm>
#include <cmath>

#include "recipe/errors.hpp"
#include "recipe/fft.hpp"

namespace recipe::numerics {

Activation activation_from_name(std::string_view name) {
    if (name == "identity" || name == "linear") return Activation::Identity;
    if (name == "relu") return Activation::Relu;
    if (name == "tanh") return Activation::Tanh;
    if (name == "sigmoid") return Activation::Sigmoid;
    throw InvalidInputError("unknown activation: " + std::string(name));
}

std::string_view activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Sigmoid: return "sigmoid";
    }
    return "identity";
}

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InvalidInputError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
    }
}

}  // namespace

std::vector<double>& Tape::grad_buf(VarId id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

const std::vector<double>& Tape::grad(VarId id) const {
    static const std::vector<double> empty;
    const Node& n = node(id);
    return n.grad.empty() ? empty : n.grad;
}

VarId Tape::push(Tensor value, bool requires_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

bool Tape::any_requires(std::span<const VarId> ids) const {
    for (VarId id : ids) {
        if (node(id).requires_grad) return true;
    }
    return false;
}

VarId Tape::leaf(Tensor value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

VarId Tape::add(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check_same_shape(ta, tb, "add");
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
    VarId id = push(std::move(out), any_requires(std::array{a, b}), nullptr);
    node(id).back = [this, id, a, b] {
        const auto& g = node(id).grad;
        if (node(a).requires_grad) {
            auto& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (node(b).requires_grad) {
            auto& gb = grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    };
    return id;
}

VarId Tape::sub(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check_same_shape(ta, tb, "sub");
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
    VarId id = push(std::move(out), any_requires(std::array{a, b}), nullptr);
    node(id).back = [this, id, a, b] {
        const auto& g = node(id).grad;
        if (node(a).requires_grad) {
            auto& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (node(b).requires_grad) {
            auto& gb = grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    };
    return id;
}

VarId Tape::mul(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check_same_shape(ta, tb, "mul");
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
    VarId id = push(std::move(out), any_requires(std::array{a, b}), nullptr);
    node(id).back = [this, id, a, b] {
        const auto& g = node(id).grad;
        const Tensor& ta = node(a).value;
        const Tensor& tb = node(b).value;
        if (node(a).requires_grad) {
            auto& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * tb[i];
        }
        if (node(b).requires_grad) {
            auto& gb = grad_buf(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ta[i];
        }
    };
    return id;
}

VarId Tape::scale(VarId a, double s) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * s;
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, s] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    };
    return id;
}

VarId Tape::add_scalar(VarId a, double s) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + s;
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
    return id;
}

VarId Tape::activation(VarId a, Activation f) {
    if (f == Activation::Identity) return a;
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    switch (f) {
        case Activation::Relu:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
            break;
        case Activation::Tanh:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(ta[i]);
            break;
        case Activation::Sigmoid:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
            break;
        case Activation::Identity: break;
    }
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, f] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        const Tensor& y = node(id).value;
        const Tensor& x = node(a).value;
        auto& ga = grad_buf(a);
        switch (f) {
            case Activation::Relu:
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
                break;
            case Activation::Tanh:
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
                break;
            case Activation::Sigmoid:
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            case Activation::Identity: break;
        }
    };
    return id;
}

VarId Tape::dropout(VarId a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw InvalidInputError("dropout rate must be < 1");
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    auto mask = std::make_shared<std::vector<double>>(ta.size());
    const double keep = 1.0 - p;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
        out[i] = ta[i] * (*mask)[i];
    }
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, mask] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
    };
    return id;
}

namespace {

struct MatDims {
    std::size_t batch;  // product of leading axes of a
    std::size_t m, k, n;
    bool shared_b;  // b is rank-2, shared across the batch
};

MatDims matmul_dims(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) throw InvalidInputError("matmul requires rank >= 2");
    MatDims d;
    d.m = a.extent(a.rank() - 2);
    d.k = a.extent(a.rank() - 1);
    d.batch = a.size() / (d.m * d.k);
    if (b.rank() == 2) {
        d.shared_b = true;
        if (b.extent(0) != d.k) throw InvalidInputError("matmul: inner extents differ");
        d.n = b.extent(1);
    } else {
        d.shared_b = false;
        if (b.rank() != a.rank()) throw InvalidInputError("matmul: rank mismatch for batched operands");
        for (std::size_t i = 0; i + 2 < a.rank(); ++i) {
            if (a.extent(i) != b.extent(i)) throw InvalidInputError("matmul: leading extents differ");
        }
        if (b.extent(b.rank() - 2) != d.k) throw InvalidInputError("matmul: inner extents differ");
        d.n = b.extent(b.rank() - 1);
    }
    return d;
}

}  // namespace

VarId Tape::matmul(VarId a, VarId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    const MatDims d = matmul_dims(ta, tb);
    Shape out_shape(ta.shape().begin(), ta.shape().end() - 1);
    out_shape.push_back(d.n);
    Tensor out(std::move(out_shape));
    const double* ap = ta.data();
    const double* bp = tb.data();
    double* op = out.data();
    for (std::size_t t = 0; t < d.batch; ++t) {
        const double* A = ap + t * d.m * d.k;
        const double* B = d.shared_b ? bp : bp + t * d.k * d.n;
        double* C = op + t * d.m * d.n;
        for (std::size_t i = 0; i < d.m; ++i) {
            for (std::size_t kk = 0; kk < d.k; ++kk) {
                const double av = A[i * d.k + kk];
                if (av == 0.0) continue;
                const double* Br = B + kk * d.n;
                double* Cr = C + i * d.n;
                for (std::size_t j = 0; j < d.n; ++j) Cr[j] += av * Br[j];
            }
        }
    }
    VarId id = push(std::move(out), any_requires(std::array{a, b}), nullptr);
    node(id).back = [this, id, a, b, d] {
        const auto& g = node(id).grad;
        const Tensor& ta = node(a).value;
        const Tensor& tb = node(b).value;
        if (node(a).requires_grad) {
            auto& ga = grad_buf(a);
            for (std::size_t t = 0; t < d.batch; ++t) {
                const double* G = g.data() + t * d.m * d.n;
                const double* B = d.shared_b ? tb.data() : tb.data() + t * d.k * d.n;
                double* GA = ga.data() + t * d.m * d.k;
                for (std::size_t i = 0; i < d.m; ++i) {
                    for (std::size_t j = 0; j < d.n; ++j) {
                        const double gv = G[i * d.n + j];
                        if (gv == 0.0) continue;
                        for (std::size_t kk = 0; kk < d.k; ++kk) GA[i * d.k + kk] += gv * B[kk * d.n + j];
                    }
                }
            }
        }
        if (node(b).requires_grad) {
            auto& gb = grad_buf(b);
            for (std::size_t t = 0; t < d.batch; ++t) {
                const double* G = g.data() + t * d.m * d.n;
                const double* A = ta.data() + t * d.m * d.k;
                double* GB = d.shared_b ? gb.data() : gb.data() + t * d.k * d.n;
                for (std::size_t i = 0; i < d.m; ++i) {
                    for (std::size_t kk = 0; kk < d.k; ++kk) {
                        const double av = A[i * d.k + kk];
                        if (av == 0.0) continue;
                        const double* Gr = G + i * d.n;
                        double* GBr = GB + kk * d.n;
                        for (std::size_t j = 0; j < d.n; ++j) GBr[j] += av * Gr[j];
                    }
                }
            }
        }
    };
    return id;
}

VarId Tape::add_bias(VarId x, VarId bias) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(bias);
    if (tb.rank() != 1 || tb.extent(0) != tx.extent(tx.rank() - 1)) {
        throw InvalidInputError("add_bias: bias extent must match last axis");
    }
    const std::size_t n = tb.extent(0);
    const std::size_t rows = tx.size() / n;
    Tensor out(tx.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = tx[r * n + j] + tb[j];
    }
    VarId id = push(std::move(out), any_requires(std::array{x, bias}), nullptr);
    node(id).back = [this, id, x, bias, rows, n] {
        const auto& g = node(id).grad;
        if (node(x).requires_grad) {
            auto& gx = grad_buf(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (node(bias).requires_grad) {
            auto& gb = grad_buf(bias);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
        }
    };
    return id;
}

namespace {

std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

}  // namespace

VarId Tape::permute(VarId a, std::vector<std::size_t> axes) {
    const Tensor& ta = value(a);
    if (axes.size() != ta.rank()) throw InvalidInputError("permute: axis count mismatch");
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = ta.extent(axes[i]);
    const auto in_strides = row_major_strides(ta.shape());
    // stride in the input for each output axis
    std::vector<std::size_t> map_strides(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) map_strides[i] = in_strides[axes[i]];

    Tensor out(out_shape);
    const std::size_t total = out.size();
    std::vector<std::size_t> idx(axes.size(), 0);
    for (std::size_t o = 0; o < total; ++o) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < axes.size(); ++i) src += idx[i] * map_strides[i];
        out[o] = ta[src];
        for (std::size_t i = axes.size(); i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, out_shape, map_strides] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        auto& ga = grad_buf(a);
        std::vector<std::size_t> idx(out_shape.size(), 0);
        for (std::size_t o = 0; o < g.size(); ++o) {
            std::size_t src = 0;
            for (std::size_t i = 0; i < out_shape.size(); ++i) src += idx[i] * map_strides[i];
            ga[src] += g[o];
            for (std::size_t i = out_shape.size(); i-- > 0;) {
                if (++idx[i] < out_shape[i]) break;
                idx[i] = 0;
            }
        }
    };
    return id;
}

VarId Tape::reshape(VarId a, Shape shape) {
    const Tensor& ta = value(a);
    if (numel(shape) != ta.size()) throw InvalidInputError("reshape: element count mismatch");
    Tensor out(std::move(shape), ta.values());
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
    return id;
}

VarId Tape::slice(VarId a, std::size_t axis, std::size_t start, std::size_t len) {
    const Tensor& ta = value(a);
    if (axis >= ta.rank() || start + len > ta.extent(axis)) throw InvalidInputError("slice: out of range");
    Shape out_shape = ta.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ta.extent(i);
    for (std::size_t i = axis + 1; i < ta.rank(); ++i) inner *= ta.extent(i);
    const std::size_t ext = ta.extent(axis);
    Tensor out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < len; ++j) {
            const double* src = ta.data() + (o * ext + start + j) * inner;
            double* dst = out.data() + (o * len + j) * inner;
            std::copy(src, src + inner, dst);
        }
    }
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, outer, inner, ext, start, len] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        auto& ga = grad_buf(a);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < len; ++j) {
                const double* src = g.data() + (o * len + j) * inner;
                double* dst = ga.data() + (o * ext + start + j) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
    };
    return id;
}

VarId Tape::concat(std::span<const VarId> parts, std::size_t axis) {
    if (parts.empty()) throw InvalidInputError("concat: no parts");
    const Tensor& first = value(parts[0]);
    Shape out_shape = first.shape();
    std::size_t total_ext = 0;
    for (VarId p : parts) {
        const Tensor& tp = value(p);
        if (tp.rank() != first.rank()) throw InvalidInputError("concat: rank mismatch");
        for (std::size_t i = 0; i < tp.rank(); ++i) {
            if (i != axis && tp.extent(i) != first.extent(i)) throw InvalidInputError("concat: extent mismatch");
        }
        total_ext += tp.extent(axis);
    }
    out_shape[axis] = total_ext;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

    Tensor out(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (VarId p : parts) {
        offsets.push_back(off);
        const Tensor& tp = value(p);
        const std::size_t ext = tp.extent(axis);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = tp.data() + o * ext * inner;
            double* dst = out.data() + (o * total_ext + off) * inner;
            std::copy(src, src + ext * inner, dst);
        }
        off += ext;
    }
    std::vector<VarId> part_ids(parts.begin(), parts.end());
    VarId id = push(std::move(out), any_requires(parts), nullptr);
    node(id).back = [this, id, part_ids, offsets, outer, inner, total_ext] {
        const auto& g = node(id).grad;
        for (std::size_t pi = 0; pi < part_ids.size(); ++pi) {
            VarId p = part_ids[pi];
            if (!node(p).requires_grad) continue;
            auto& gp = grad_buf(p);
            const std::size_t ext = node(p).value.extent(
                node(p).value.rank() - (node(p).value.rank() - 0) + 0);  // replaced below
            (void)ext;
            const std::size_t part_ext = gp.size() / (outer * inner);
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = g.data() + (o * total_ext + offsets[pi]) * inner;
                double* dst = gp.data() + o * part_ext * inner;
                for (std::size_t i = 0; i < part_ext * inner; ++i) dst[i] += src[i];
            }
        }
    };
    return id;
}

VarId Tape::softmax_last(VarId a) {
    const Tensor& ta = value(a);
    const std::size_t n = ta.extent(ta.rank() - 1);
    const std::size_t rows = ta.size() / n;
    Tensor out(ta.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = ta.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, rows, n] {
        if (!node(a).requires_grad) return;
        const auto& g = node(id).grad;
        const Tensor& y = node(id).value;
        auto& ga = grad_buf(a);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data() + r * n;
            const double* gr = g.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
            double* gar = ga.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
        }
    };
    return id;
}

VarId Tape::layer_norm(VarId x, VarId gamma, VarId beta, double eps) {
    const Tensor& tx = value(x);
    const std::size_t n = tx.extent(tx.rank() - 1);
    const Tensor& tg = value(gamma);
    const Tensor& tb = value(beta);
    if (tg.size() != n || tb.size() != n) throw InvalidInputError("layer_norm: parameter extent mismatch");
    const std::size_t rows = tx.size() / n;
    Tensor out(tx.shape());
    auto xhat = std::make_shared<std::vector<double>>(tx.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = tx.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double xh = (xr[j] - mean) * is;
            (*xhat)[r * n + j] = xh;
            out[r * n + j] = tg[j] * xh + tb[j];
        }
    }
    VarId id = push(std::move(out), any_requires(std::array{x, gamma, beta}), nullptr);
    node(id).back = [this, id, x, gamma, beta, rows, n, xhat, inv_std] {
        const auto& g = node(id).grad;
        const Tensor& tg = node(gamma).value;
        if (node(gamma).requires_grad) {
            auto& gg = grad_buf(gamma);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
            }
        }
        if (node(beta).requires_grad) {
            auto& gb = grad_buf(beta);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
        }
        if (node(x).requires_grad) {
            auto& gx = grad_buf(x);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * n;
                const double* xh = xhat->data() + r * n;
                double mean_gh = 0.0, mean_ghx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gh = gr[j] * tg[j];
                    mean_gh += gh;
                    mean_ghx += gh * xh[j];
                }
                mean_gh /= static_cast<double>(n);
                mean_ghx /= static_cast<double>(n);
                const double is = (*inv_std)[r];
                for (std::size_t j = 0; j < n; ++j) {
                    const double gh = gr[j] * tg[j];
                    gx[r * n + j] += (gh - mean_gh - xh[j] * mean_ghx) * is;
                }
            }
        }
    };
    return id;
}

VarId Tape::mean_all(VarId a) {
    const Tensor& ta = value(a);
    double sum = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i) sum += ta[i];
    const double inv_n = 1.0 / static_cast<double>(ta.size());
    Tensor out(Shape{1});
    out[0] = sum * inv_n;
    VarId id = push(std::move(out), node(a).requires_grad, nullptr);
    node(id).back = [this, id, a, inv_n] {
        if (!node(a).requires_grad) return;
        const double g = node(id).grad[0];
        auto& ga = grad_buf(a);
        for (double& v : ga) v += g * inv_n;
    };
    return id;
}

VarId Tape::mse_loss(VarId pred, VarId target) {
    const Tensor& tp = value(pred);
    const Tensor& tt = value(target);
    check_same_shape(tp, tt, "mse_loss");
    double sum = 0.0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        const double d = tp[i] - tt[i];
        sum += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(tp.size());
    Tensor out(Shape{1});
    out[0] = sum * inv_n;
    VarId id = push(std::move(out), any_requires(std::array{pred, target}), nullptr);
    node(id).back = [this, id, pred, target, inv_n] {
        const double g = node(id).grad[0];
        const Tensor& tp = node(pred).value;
        const Tensor& tt = node(target).value;
        if (node(pred).requires_grad) {
            auto& gp = grad_buf(pred);
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * 2.0 * (tp[i] - tt[i]) * inv_n;
        }
        if (node(target).requires_grad) {
            auto& gt = grad_buf(target);
            for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= g * 2.0 * (tp[i] - tt[i]) * inv_n;
        }
    };
    return id;
}

VarId Tape::scale_shift(VarId y, VarId scale, VarId shift) {
    const Tensor& ty = value(y);
    const Tensor& ts = value(scale);
    const Tensor& tf = value(shift);
    if (ty.rank() != 3 || ts.rank() != 2 || tf.rank() != 2) throw InvalidInputError("scale_shift: rank mismatch");
    const std::size_t B = ty.extent(0), H = ty.extent(1), D = ty.extent(2);
    if (ts.extent(0) != B || ts.extent(1) != D || tf.extent(0) != B || tf.extent(1) != D) {
        throw InvalidInputError("scale_shift: per-sample stats shape mismatch");
    }
    Tensor out(ty.shape());
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t d = 0; d < D; ++d) {
                out[(b * H + h) * D + d] = ty[(b * H + h) * D + d] * ts[b * D + d] + tf[b * D + d];
            }
        }
    }
    VarId id = push(std::move(out), any_requires(std::array{y, scale, shift}), nullptr);
    node(id).back = [this, id, y, scale, shift, B, H, D] {
        const auto& g = node(id).grad;
        const Tensor& ty = node(y).value;
        const Tensor& ts = node(scale).value;
        if (node(y).requires_grad) {
            auto& gy = grad_buf(y);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t d = 0; d < D; ++d)
                        gy[(b * H + h) * D + d] += g[(b * H + h) * D + d] * ts[b * D + d];
        }
        if (node(scale).requires_grad) {
            auto& gs = grad_buf(scale);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t d = 0; d < D; ++d)
                        gs[b * D + d] += g[(b * H + h) * D + d] * ty[(b * H + h) * D + d];
        }
        if (node(shift).requires_grad) {
            auto& gf = grad_buf(shift);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t d = 0; d < D; ++d) gf[b * D + d] += g[(b * H + h) * D + d];
        }
    };
    return id;
}

VarId Tape::conv1d_circular(VarId x, VarId w, VarId b) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    const Tensor& tb = value(b);
    if (tx.rank() != 3 || tw.rank() != 3) throw InvalidInputError("conv1d_circular: rank mismatch");
    const std::size_t B = tx.extent(0), L = tx.extent(1), D = tx.extent(2);
    const std::size_t H = tw.extent(0), k = tw.extent(2);
    if (tw.extent(1) != D || tb.size() != H || k % 2 == 0) {
        throw InvalidInputError("conv1d_circular: weight shape mismatch or even kernel");
    }
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out(Shape{B, L, H});
    for (std::size_t bb = 0; bb < B; ++bb) {
        for (std::size_t t = 0; t < L; ++t) {
            for (std::size_t h = 0; h < H; ++h) {
                double acc = tb[h];
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t src =
                        static_cast<std::size_t>((static_cast<std::ptrdiff_t>(t + L + j) - pad) % static_cast<std::ptrdiff_t>(L));
                    for (std::size_t d = 0; d < D; ++d) {
                        acc += tw[(h * D + d) * k + j] * tx[(bb * L + src) * D + d];
                    }
                }
                out[(bb * L + t) * H + h] = acc;
            }
        }
    }
    VarId id = push(std::move(out), any_requires(std::array{x, w, b}), nullptr);
    node(id).back = [this, id, x, w, b, B, L, D, H, k, pad] {
        const auto& g = node(id).grad;
        const Tensor& tx = node(x).value;
        const Tensor& tw = node(w).value;
        const bool need_x = node(x).requires_grad;
        const bool need_w = node(w).requires_grad;
        const bool need_b = node(b).requires_grad;
        auto* gx = need_x ? &grad_buf(x) : nullptr;
        auto* gw = need_w ? &grad_buf(w) : nullptr;
        auto* gb = need_b ? &grad_buf(b) : nullptr;
        for (std::size_t bb = 0; bb < B; ++bb) {
            for (std::size_t t = 0; t < L; ++t) {
                for (std::size_t h = 0; h < H; ++h) {
                    const double gv = g[(bb * L + t) * H + h];
                    if (gv == 0.0) continue;
                    if (need_b) (*gb)[h] += gv;
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t src = static_cast<std::size_t>(
                            (static_cast<std::ptrdiff_t>(t + L + j) - pad) % static_cast<std::ptrdiff_t>(L));
                        for (std::size_t d = 0; d < D; ++d) {
                            if (need_w) (*gw)[(h * D + d) * k + j] += gv * tx[(bb * L + src) * D + d];
                            if (need_x) (*gx)[(bb * L + src) * D + d] += gv * tw[(h * D + d) * k + j];
                        }
                    }
                }
            }
        }
    };
    return id;
}

VarId Tape::patch_conv(VarId x, VarId w, VarId b, std::size_t stride) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    const Tensor& tb = value(b);
    if (tx.rank() != 2 || tw.rank() != 2 || stride == 0) throw InvalidInputError("patch_conv: bad operands");
    const std::size_t N = tx.extent(0), L = tx.extent(1);
    const std::size_t H = tw.extent(0), plen = tw.extent(1);
    if (tb.size() != H || plen > L) throw InvalidInputError("patch_conv: patch length exceeds series length");
    // right padding with `stride` copies of the final value gives
    // floor((L - plen)/stride) + 2 patch positions
    const std::size_t P = (L - plen) / stride + 2;
    Tensor out(Shape{N, H, P});
    auto padded_at = [&](std::size_t n, std::size_t pos) {
        return pos < L ? tx[n * L + pos] : tx[n * L + (L - 1)];
    };
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t p = 0; p < P; ++p) {
                double acc = tb[h];
                for (std::size_t j = 0; j < plen; ++j) acc += tw[h * plen + j] * padded_at(n, p * stride + j);
                out[(n * H + h) * P + p] = acc;
            }
        }
    }
    VarId id = push(std::move(out), any_requires(std::array{x, w, b}), nullptr);
    node(id).back = [this, id, x, w, b, N, L, H, plen, P, stride] {
        const auto& g = node(id).grad;
        const Tensor& tx = node(x).value;
        const Tensor& tw = node(w).value;
        const bool need_x = node(x).requires_grad;
        const bool need_w = node(w).requires_grad;
        const bool need_b = node(b).requires_grad;
        auto* gx = need_x ? &grad_buf(x) : nullptr;
        auto* gw = need_w ? &grad_buf(w) : nullptr;
        auto* gb = need_b ? &grad_buf(b) : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t p = 0; p < P; ++p) {
                    const double gv = g[(n * H + h) * P + p];
                    if (gv == 0.0) continue;
                    if (need_b) (*gb)[h] += gv;
                    for (std::size_t j = 0; j < plen; ++j) {
                        const std::size_t pos = p * stride + j;
                        const std::size_t src = pos < L ? pos : L - 1;
                        if (need_w) (*gw)[h * plen + j] += gv * (pos < L ? tx[n * L + pos] : tx[n * L + (L - 1)]);
                        if (need_x) (*gx)[n * L + src] += gv;
                    }
                }
            }
        }
    };
    return id;
}

namespace {

void check_spectral_input(const Tensor& t, const char* op) {
    if (t.rank() != 3) throw InvalidInputError(std::string(op) + ": expected rank-3 [B,L,D]");
    if (t.extent(1) < 2) throw InvalidInputError(std::string(op) + ": time axis must have length >= 2");
}

}  // namespace

VarId Tape::rfft_real(VarId x) {
    const Tensor& tx = value(x);
    check_spectral_input(tx, "rfft_real");
    const std::size_t B = tx.extent(0), L = tx.extent(1), D = tx.extent(2);
    const std::size_t K = rfft_bins(L);
    Tensor out(Shape{B, K, D});
    std::vector<double> chan(L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t t = 0; t < L; ++t) chan[t] = tx[(b * L + t) * D + d];
            ComplexSpectrum s = rfft(chan);
            for (std::size_t k = 0; k < K; ++k) out[(b * K + k) * D + d] = s.bins[k].real();
        }
    }
    VarId id = push(std::move(out), node(x).requires_grad, nullptr);
    node(id).back = [this, id, x, B, L, D, K] {
        if (!node(x).requires_grad) return;
        const auto& g = node(id).grad;
        auto& gx = grad_buf(x);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t t = 0; t < L; ++t) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double gv = g[(b * K + k) * D + d];
                        if (gv == 0.0) continue;
                        acc += gv * std::cos(2.0 * M_PI * static_cast<double>(k * t % L) / static_cast<double>(L));
                    }
                    gx[(b * L + t) * D + d] += acc;
                }
            }
        }
    };
    return id;
}

VarId Tape::rfft_imag(VarId x) {
    const Tensor& tx = value(x);
    check_spectral_input(tx, "rfft_imag");
    const std::size_t B = tx.extent(0), L = tx.extent(1), D = tx.extent(2);
    const std::size_t K = rfft_bins(L);
    Tensor out(Shape{B, K, D});
    std::vector<double> chan(L);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t t = 0; t < L; ++t) chan[t] = tx[(b * L + t) * D + d];
            ComplexSpectrum s = rfft(chan);
            for (std::size_t k = 0; k < K; ++k) out[(b * K + k) * D + d] = s.bins[k].imag();
        }
    }
    VarId id = push(std::move(out), node(x).requires_grad, nullptr);
    node(id).back = [this, id, x, B, L, D, K] {
        if (!node(x).requires_grad) return;
        const auto& g = node(id).grad;
        auto& gx = grad_buf(x);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t t = 0; t < L; ++t) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double gv = g[(b * K + k) * D + d];
                        if (gv == 0.0) continue;
                        acc -= gv * std::sin(2.0 * M_PI * static_cast<double>(k * t % L) / static_cast<double>(L));
                    }
                    gx[(b * L + t) * D + d] += acc;
                }
            }
        }
    };
    return id;
}

VarId Tape::irfft(VarId re, VarId im, std::size_t out_length) {
    const Tensor& tr = value(re);
    const Tensor& ti = value(im);
    check_same_shape(tr, ti, "irfft");
    if (tr.rank() != 3) throw InvalidInputError("irfft: expected rank-3 [B,K,D]");
    const std::size_t B = tr.extent(0), K = tr.extent(1), D = tr.extent(2);
    if (K != rfft_bins(out_length)) throw InvalidInputError("irfft bin count does not match output length");
    const std::size_t L = out_length;
    Tensor out(Shape{B, L, D});
    ComplexSpectrum s;
    s.origin_length = L;
    s.bins.resize(K);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t k = 0; k < K; ++k) {
                s.bins[k] = std::complex<double>(tr[(b * K + k) * D + d], ti[(b * K + k) * D + d]);
            }
            std::vector<double> y = numerics::irfft(s, L);
            for (std::size_t t = 0; t < L; ++t) out[(b * L + t) * D + d] = y[t];
        }
    }
    VarId id = push(std::move(out), any_requires(std::array{re, im}), nullptr);
    node(id).back = [this, id, re, im, B, K, D, L] {
        const auto& g = node(id).grad;
        const bool need_re = node(re).requires_grad;
        const bool need_im = node(im).requires_grad;
        auto* gre = need_re ? &grad_buf(re) : nullptr;
        auto* gim = need_im ? &grad_buf(im) : nullptr;
        const double inv_l = 1.0 / static_cast<double>(L);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t k = 0; k < K; ++k) {
                    // symmetry weight: paired conjugate bins double the
                    // contribution of interior bins
                    const bool interior = k > 0 && !(L % 2 == 0 && k == K - 1);
                    const double wk = interior ? 2.0 : 1.0;
                    double acc_re = 0.0, acc_im = 0.0;
                    for (std::size_t t = 0; t < L; ++t) {
                        const double gv = g[(b * L + t) * D + d];
                        if (gv == 0.0) continue;
                        const double ang = 2.0 * M_PI * static_cast<double>(k * t % L) / static_cast<double>(L);
                        acc_re += gv * std::cos(ang);
                        acc_im -= gv * std::sin(ang);
                    }
                    if (need_re) (*gre)[(b * K + k) * D + d] += wk * inv_l * acc_re;
                    // DC and Nyquist imaginary parts do not reach the output
                    if (need_im && interior) (*gim)[(b * K + k) * D + d] += wk * inv_l * acc_im;
                }
            }
        }
    };
    return id;
}

void Tape::backward(VarId root) {
    Node& r = node(root);
    if (r.value.size() != 1) throw InvalidInputError("backward: root must be scalar");
    if (!std::isfinite(r.value[0])) throw NumericalError("backward: non-finite loss value");
    grad_buf(root)[0] += 1.0;
    for (std::size_t i = static_cast<std::size_t>(root) + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.back) continue;
        n.back();
    }
}

double grad_check(const ScalarGraphFn& f, const Tensor& x, double step) {
    if (step <= 0.0) throw InvalidInputError("grad_check: step must be positive");
    auto eval = [&](const Tensor& point) {
        Tape tape;
        VarId xv = tape.leaf(point, false);
        VarId y = f(tape, xv);
        const Tensor& v = tape.value(y);
        if (v.size() != 1) throw InvalidInputError("grad_check: f must be scalar-valued");
        if (!std::isfinite(v[0])) throw NumericalError("grad_check: non-finite function value");
        return v[0];
    };

    Tape tape;
    VarId xv = tape.leaf(x, true);
    VarId y = f(tape, xv);
    if (tape.value(y).size() != 1) throw InvalidInputError("grad_check: f must be scalar-valued");
    if (!std::isfinite(tape.value(y)[0])) throw NumericalError("grad_check: non-finite function value");
    tape.backward(y);
    std::vector<double> analytic(x.size(), 0.0);
    if (!tape.grad(xv).empty()) analytic = tape.grad(xv);

    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        const double fp = eval(probe);
        probe[i] = orig - step;
        const double fm = eval(probe);
        probe[i] = orig;
        const double central = (fp - fm) / (2.0 * step);
        const double disc = std::abs(analytic[i] - central) / (std::abs(central) + 1e-8);
        worst = std::max(worst, disc);
    }
    return worst;
}

}  // namespace recipe::numerics
