#ifndef AAI_AUTOGRAD_HPP
#define AAI_AUTOGRAD_HPP

#include <functional>
#include <memory>
#include <vector>

#include "aai/tensor.hpp"

// Minimal reverse-mode differentiation over Tensor values. A Var is a handle to
// a node of a dynamically built graph; backward() walks the graph in reverse
// topological order. Nodes that do not depend on any requires_grad leaf store
// no backward closure, so inference-only graphs cost nothing extra.
namespace aai::ad {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backward;

    // Zero-initialized on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    // Gradient accumulated by the last backward(); zeros when none reached this node.
    Tensor grad() const;

    Node* get() const { return node_.get(); }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

// Builds a result node. `make_backward` is only invoked when some input
// requires a gradient; it receives the result node and returns the closure.
Var make_result(Tensor value, std::vector<Var> inputs, const std::function<std::function<void()>(Node* self)>& make_backward);

// Seeds d(root)/d(root) = 1 for a scalar root and propagates.
void backward(const Var& root);

// Elementwise and shape ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);
Var silu(const Var& a);

// 2-D matrix products: matmul is [m×k]·[k×n]; matmul_nt is [m×k]·[n×k]ᵀ.
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// x [B×in], w [out×in], optional bias [out].
Var linear(const Var& x, const Var& w, const Var& bias = Var());

// x [B×C×H×W], w [O×C×k×k], bias [O]; square kernel, zero padding.
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);

// x [B×C×H×W] plus per-sample per-channel offsets cb [B×C].
Var add_channel_bias(const Var& x, const Var& cb);

Var upsample_nearest2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);

// Row-wise L2 normalization of [B×d].
Var l2_normalize_rows(const Var& x);

// Mean over rows of −log softmax(S_i)[i] for square logits S. With
// exclude_positive the denominator sums only the off-diagonal terms.
Var cross_entropy_diag(const Var& logits, bool exclude_positive = false);

// Mean over rows of KL(q_i ‖ softmax(S_i)); q is a constant (no gradient).
Var kl_rows_from_logits(const Tensor& q, const Var& logits);

// Mean squared error against a constant target.
Var mse(const Var& pred, const Tensor& target);

}  // namespace aai::ad

#endif  // AAI_AUTOGRAD_HPP
