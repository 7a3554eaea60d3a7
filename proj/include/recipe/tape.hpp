#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "recipe/rng.hpp"
#include "recipe/tensor.hpp"

namespace recipe::numerics {

enum class Activation { Identity, Relu, Tanh, Sigmoid };

Activation activation_from_name(std::string_view name);
std::string_view activation_name(Activation a);

using VarId = int;

// Append-only reverse-mode tape. Nodes are immutable once recorded; the
// evaluation order is the topological order, so backward is a single reverse
// sweep. A tape is confined to one execution stream.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    VarId leaf(Tensor value, bool requires_grad = false);

    const Tensor& value(VarId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    // Valid after backward(); zero-filled if the node was never reached.
    const std::vector<double>& grad(VarId id) const;
    std::size_t size() const { return nodes_.size(); }

    // element-wise
    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId mul(VarId a, VarId b);
    VarId scale(VarId a, double s);
    VarId add_scalar(VarId a, double s);
    VarId activation(VarId a, Activation f);
    VarId dropout(VarId a, double p, Rng& rng);

    // linear algebra; b may be rank-2 (shared across leading axes of a) or
    // have identical leading axes
    VarId matmul(VarId a, VarId b);
    VarId add_bias(VarId x, VarId bias);  // bias extent == last axis of x

    // structure
    VarId permute(VarId a, std::vector<std::size_t> axes);
    VarId reshape(VarId a, Shape shape);
    VarId slice(VarId a, std::size_t axis, std::size_t start, std::size_t len);
    VarId concat(std::span<const VarId> parts, std::size_t axis);

    // normalization / attention
    VarId softmax_last(VarId a);
    VarId layer_norm(VarId x, VarId gamma, VarId beta, double eps);

    // reductions
    VarId mean_all(VarId a);
    VarId mse_loss(VarId pred, VarId target);

    // y[b,h,d] * scale[b,d] + shift[b,d]; used by instance denormalization
    VarId scale_shift(VarId y, VarId scale, VarId shift);

    // convolutions used by the embeddings
    // x [B,L,D], w [H,D,k] odd k, circular time padding -> [B,L,H]
    VarId conv1d_circular(VarId x, VarId w, VarId b);
    // x [N,L], right-replicate padded by `stride`, w [H,plen] -> [N,H,P]
    VarId patch_conv(VarId x, VarId w, VarId b, std::size_t stride);

    // spectral ops over axis 1 of a rank-3 tensor [B,L,D]
    VarId rfft_real(VarId x);  // -> [B,K,D]
    VarId rfft_imag(VarId x);  // -> [B,K,D]
    VarId irfft(VarId re, VarId im, std::size_t out_length);  // -> [B,out,D]

    // Seeds d(root)/d(root)=1 and sweeps the tape in reverse. root must be a
    // scalar (size 1).
    void backward(VarId root);

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::function<void()> back;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;

    Node& node(VarId id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(VarId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::vector<double>& grad_buf(VarId id);
    VarId push(Tensor value, bool requires_grad, std::function<void()> back);
    bool any_requires(std::span<const VarId> ids) const;
};

// Max over coordinates of |analytic - central difference| /
// (|central difference| + 1e-8) for a scalar-valued graph built by f.
using ScalarGraphFn = std::function<VarId(Tape&, VarId)>;
double grad_check(const ScalarGraphFn& f, const Tensor& x, double step);

}  // namespace recipe::numerics
