#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "emargin/tensor.hpp"

namespace emargin::ad {

enum class EwKind { add, sub, mul, div };
enum class ReduceKind { sum, mean };
enum class BatchNormMode { train, eval };

// Running statistics mutated by train-mode batchnorm.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;

    static BatchNormState fresh(std::size_t channels);
};

class Graph;

// Gradients of one backward pass, keyed by leaf tensor.
class GradientMap {
public:
    bool contains(const Tensor& leaf) const;
    Tensor at(const Tensor& leaf) const;  // ContractError if absent

private:
    friend class Graph;
    std::unordered_map<const detail::TensorImpl*, Tensor> by_impl_;
};

// Tape of recorded operations. Rebuilt each forward pass; append order is the
// topological order (inputs always precede their consumers), and backward
// visits each node exactly once in reverse append order.
class Graph {
public:
    Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Seeds the root with adjoint 1, sweeps the tape once in reverse, and
    // writes dL/dleaf into every requires_grad leaf (overwriting any previous
    // gradient). Fan-out accumulates additively within the sweep.
    GradientMap backward(const Tensor& root);

    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t id() const { return id_; }

    // --- op implementation hooks -------------------------------------------
    // Returns the node id of `t` in this graph, registering a leaf on first
    // use of a requires_grad tensor. Constants yield -1 (no gradient flows).
    int track(const Tensor& t);
    // Records an operation node and returns its output tensor.
    Tensor record(std::string kind, std::vector<int> parents, Shape out_shape,
                  std::vector<double> out_data,
                  std::function<void(Graph&, const std::vector<double>&)> backprop);
    // Adds a contribution to a node's adjoint buffer; no-op for id -1.
    void accumulate(int node, const std::vector<double>& contribution);
    void accumulate(int node, const double* contribution, std::size_t n);
    const std::vector<double>& adjoint_of(int node) const;

private:
    struct Node {
        std::string kind;
        std::vector<int> parents;
        std::size_t out_size = 0;
        std::function<void(Graph&, const std::vector<double>&)> backprop;
        std::shared_ptr<detail::TensorImpl> leaf;  // set for leaf nodes only
    };

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> adjoints_;  // empty vector = untouched
};

// ---------------------------------------------------------------------------
// Differentiable operations. Every op records onto `g` when any input is
// tracked; pure constants stay off the tape.
// ---------------------------------------------------------------------------

// Standard matrix product, 2-D x 2-D.
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);

// Elementwise arithmetic; shapes must match or one operand must be a single
// element (broadcast to the other's shape).
Tensor elementwise(Graph& g, const Tensor& a, const Tensor& b, EwKind kind);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor divide(Graph& g, const Tensor& a, const Tensor& b);

// max(0, x); subgradient at exactly 0 is 0.
Tensor relu(Graph& g, const Tensor& a);
// Same kernel as relu under a distinct name so the margin hinge is an
// explicit node in recorded graphs.
Tensor clamp_floor_zero(Graph& g, const Tensor& a);

// Elementwise square root; inputs must be >= 0.
Tensor sqrt(Graph& g, const Tensor& a);

// Sum or mean over all elements (axis unset) or along one axis.
Tensor reduce(Graph& g, const Tensor& a, ReduceKind kind,
              std::optional<std::size_t> axis = std::nullopt);

// log(sum(exp(.))) along an axis, max-subtracted so magnitudes up to ~1e308
// stay finite.
Tensor log_sum_exp(Graph& g, const Tensor& a, std::size_t axis);

// Per-channel normalization over the leading axis of an N x C input. Train
// mode normalizes by batch statistics (population variance) and folds them
// into `state` with `momentum`; eval mode normalizes by `state`.
Tensor batchnorm(Graph& g, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, BatchNormMode mode, double momentum, double epsilon);

// Same data, new extents. Element count must be preserved.
Tensor reshape(Graph& g, const Tensor& a, Shape shape);

// 2-D transpose.
Tensor transpose(Graph& g, const Tensor& a);

// Subtensor at `index` along the first axis (rank reduced by one).
Tensor select_front(Graph& g, const Tensor& a, std::size_t index);

// ---------------------------------------------------------------------------
// Gradient checking harness. Runs `f` once on a tracked copy of `x` for the
// analytic gradient, then probes f's value with central differences; returns
// the max over coordinates of |analytic - central| / max(1, |analytic|).
// Central differences use the forward pass only, so the check is independent
// of the backward implementation it verifies. A non-finite value of f raises
// NumericError naming the coordinate.
// ---------------------------------------------------------------------------
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h);

// Thread cap for row-parallel kernels, from EMARGIN_THREADS (default 1).
int kernel_threads();

}  // namespace emargin::ad
