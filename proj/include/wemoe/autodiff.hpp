#pragma once

#include "wemoe/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace wemoe::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape * tape = nullptr;
    std::uint32_t id = 0;

    const Tensor & value() const;
    const Shape & shape() const { return value().shape(); }
};

// Gradient of a scalar loss with respect to the requires-grad leaves of a tape.
class Gradients {
public:
    // Zero tensor for leaves the loss does not reach.
    Tensor of(Var leaf) const;
    bool contains(Var leaf) const { return grads_.count(leaf.id) != 0; }

private:
    friend class Tape;
    std::unordered_map<std::uint32_t, Tensor> grads_;
    std::unordered_map<std::uint32_t, Shape> leaf_shapes_;
};

// Append-only record of one forward pass. Single-threaded; one backward per tape.
class Tape {
public:
    // Receives the upstream gradient of the node and accumulates into operands via grad_buffer().
    using BackwardFn = std::function<void(Tape &, std::span<const double>)>;

    Tape() = default;
    Tape(const Tape &) = delete;
    Tape & operator=(const Tape &) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value, bool requires_grad = true);

    // Records an operation result. Rounds to the active precision and applies finite checks.
    Var record(std::string_view op, Shape shape, std::vector<double> data, std::vector<std::uint32_t> parents,
               BackwardFn backward);

    const Tensor & value(std::uint32_t id) const { return nodes_[id].value; }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Zero-initialized on first touch. Only valid inside a backward rule for a requires-grad node.
    std::span<double> grad_buffer(std::uint32_t id);

    Gradients backward(Var loss);

private:
    struct Node {
        Tensor value;
        std::vector<std::uint32_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool is_leaf = false;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool consumed_ = false;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// x[m×n] + b[n] broadcast over rows.
Var add_bias(Var x, Var b);
Var relu(Var x);
// tanh approximation
Var gelu(Var x);
Var softmax_lastdim(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
// Column means of x[m×n] as a rank-1 [n] tensor.
Var mean_rows(Var x);
Var sum(Var x);
// Scalar element x[i] as shape [1].
Var element(Var x, std::size_t i);
// s[1] * x
Var scale_by(Var s, Var x);

// base + sum_i lambda[i] * deltas[i]; the deltas are constants.
Var weighted_sum(Var base, std::span<const Tensor * const> deltas, Var lambda);
// Same with sparse deltas over base's shape.
Var sparse_weighted_sum(Var base, std::span<const SparseTensor * const> deltas, Var lambda);
// x[m×k] times a constant sparse [k×n] matrix.
Var sparse_matmul(Var x, const SparseTensor & s);

// Mean over rows of -sum_c p log max(p, clamp). Rows must be probability vectors.
Var entropy_mean(Var probs, double clamp = 1e-12);
// Mean cross-entropy of logits[B×C] against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate of x.
Tensor finite_diff_grad(const std::function<double(const Tensor &)> & f, const Tensor & x, double h);

} // namespace wemoe::ad
