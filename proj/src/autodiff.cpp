#include "emargin/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <limits>
#include <thread>

#include "emargin/errors.hpp"

namespace emargin::ad {

namespace {

std::atomic<std::uint64_t> g_graph_counter{1};

double apply_ew(EwKind kind, double x, double y) {
    switch (kind) {
        case EwKind::add: return x + y;
        case EwKind::sub: return x - y;
        case EwKind::mul: return x * y;
        case EwKind::div: return x / y;
    }
    return 0.0;
}

const char* ew_name(EwKind kind) {
    switch (kind) {
        case EwKind::add: return "add";
        case EwKind::sub: return "sub";
        case EwKind::mul: return "mul";
        case EwKind::div: return "div";
    }
    return "?";
}

// Decomposes a shape around `axis` into (outer, extent, inner) strides for
// row-major iteration.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) {
        s.outer *= shape[i];
    }
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) {
            out.push_back(shape[i]);
        }
    }
    return out;
}

void run_row_parallel(std::size_t rows, const std::function<void(std::size_t, std::size_t)>& body) {
    const int threads = kernel_threads();
    if (threads <= 1 || rows < 2 * static_cast<std::size_t>(threads)) {
        body(0, rows);
        return;
    }
    // Fixed row partition; every output row is produced by one sequential
    // loop, so results are bit-identical for any thread count.
    std::vector<std::thread> pool;
    const std::size_t per = (rows + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::size_t lo = std::min(rows, per * static_cast<std::size_t>(t));
        const std::size_t hi = std::min(rows, lo + per);
        if (lo < hi) {
            pool.emplace_back(body, lo, hi);
        }
    }
    for (auto& th : pool) {
        th.join();
    }
}

}  // namespace

int kernel_threads() {
    static const int cached = [] {
        const char* raw = std::getenv("EMARGIN_THREADS");
        if (raw == nullptr) {
            return 1;
        }
        const long parsed = std::strtol(raw, nullptr, 10);
        return static_cast<int>(std::clamp(parsed, 1L, 64L));
    }();
    return cached;
}

BatchNormState BatchNormState::fresh(std::size_t channels) {
    BatchNormState state;
    state.running_mean.assign(channels, 0.0);
    state.running_var.assign(channels, 1.0);
    return state;
}

// --------------------------------------------------------------------------
// Graph
// --------------------------------------------------------------------------

Graph::Graph() : id_(g_graph_counter.fetch_add(1)) {}

int Graph::track(const Tensor& t) {
    if (!t.defined()) {
        throw ContractError("op input is a default-constructed tensor");
    }
    auto& impl = *t.impl_;
    if (impl.graph_id == id_ && impl.node >= 0) {
        return impl.node;
    }
    if (!impl.requires_grad) {
        return -1;
    }
    Node leaf;
    leaf.kind = "leaf";
    leaf.out_size = shape_size(impl.shape);
    leaf.leaf = t.impl_;
    nodes_.push_back(std::move(leaf));
    impl.graph_id = id_;
    impl.node = static_cast<int>(nodes_.size()) - 1;
    return impl.node;
}

Tensor Graph::record(std::string kind, std::vector<int> parents, Shape out_shape,
                     std::vector<double> out_data,
                     std::function<void(Graph&, const std::vector<double>&)> backprop) {
    const bool tracked = std::any_of(parents.begin(), parents.end(), [](int p) { return p >= 0; });
    Tensor out = Tensor::from_data(std::move(out_shape), std::move(out_data), false);
    if (!tracked) {
        return out;  // pure constants stay off the tape
    }
    Node node;
    node.kind = std::move(kind);
    node.parents = std::move(parents);
    node.out_size = out.size();
    node.backprop = std::move(backprop);
    nodes_.push_back(std::move(node));
    out.impl_->graph_id = id_;
    out.impl_->node = static_cast<int>(nodes_.size()) - 1;
    return out;
}

void Graph::accumulate(int node, const double* contribution, std::size_t n) {
    if (node < 0) {
        return;
    }
    auto& buffer = adjoints_[static_cast<std::size_t>(node)];
    if (buffer.empty()) {
        buffer.assign(nodes_[static_cast<std::size_t>(node)].out_size, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        buffer[i] += contribution[i];
    }
}

void Graph::accumulate(int node, const std::vector<double>& contribution) {
    accumulate(node, contribution.data(), contribution.size());
}

const std::vector<double>& Graph::adjoint_of(int node) const {
    return adjoints_.at(static_cast<std::size_t>(node));
}

GradientMap Graph::backward(const Tensor& root) {
    if (!root.defined() || root.impl_->graph_id != id_ || root.impl_->node < 0) {
        throw ContractError("backward root does not belong to this graph");
    }
    if (root.size() != 1) {
        throw ContractError("backward root must be scalar, got shape " + shape_str(root.shape()));
    }
    adjoints_.assign(nodes_.size(), {});
    adjoints_[static_cast<std::size_t>(root.impl_->node)] = {1.0};

    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (adjoints_[i].empty()) {
            continue;
        }
        if (nodes_[i].backprop) {
            nodes_[i].backprop(*this, adjoints_[i]);
        }
    }

    GradientMap map;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].leaf) {
            continue;
        }
        auto& impl = *nodes_[i].leaf;
        std::vector<double> grad = adjoints_[i].empty()
                                       ? std::vector<double>(nodes_[i].out_size, 0.0)
                                       : adjoints_[i];
        impl.grad = std::make_shared<std::vector<double>>(grad);
        map.by_impl_[nodes_[i].leaf.get()] =
            Tensor::from_data(impl.shape, std::move(grad), false);
    }
    return map;
}

bool GradientMap::contains(const Tensor& leaf) const {
    return leaf.defined() && by_impl_.count(leaf.impl_.get()) > 0;
}

Tensor GradientMap::at(const Tensor& leaf) const {
    if (!contains(leaf)) {
        throw ContractError("no gradient recorded for this tensor (not a leaf of the graph)");
    }
    return by_impl_.at(leaf.impl_.get());
}

// --------------------------------------------------------------------------
// matmul
// --------------------------------------------------------------------------

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + " do not agree");
    }
    const std::size_t m = a.shape()[0];
    const std::size_t k = a.shape()[1];
    const std::size_t n = b.shape()[1];
    const auto a_data = a.shared_data();
    const auto b_data = b.shared_data();

    std::vector<double> out(m * n, 0.0);
    run_row_parallel(m, [&](std::size_t lo, std::size_t hi) {
        const double* av = a_data->data();
        const double* bv = b_data->data();
        for (std::size_t i = lo; i < hi; ++i) {
            double* out_row = out.data() + i * n;
            for (std::size_t t = 0; t < k; ++t) {
                const double aik = av[i * k + t];
                if (aik == 0.0) {
                    continue;
                }
                const double* b_row = bv + t * n;
                for (std::size_t j = 0; j < n; ++j) {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
    });

    const int pa = g.track(a);
    const int pb = g.track(b);
    return g.record(
        "matmul", {pa, pb}, Shape{m, n}, std::move(out),
        [pa, pb, a_data, b_data, m, k, n](Graph& graph, const std::vector<double>& grad) {
            if (pa >= 0) {
                // dA = dC . B^T
                std::vector<double> da(m * k, 0.0);
                const double* bv = b_data->data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        const double* g_row = grad.data() + i * n;
                        const double* b_row = bv + t * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += g_row[j] * b_row[j];
                        }
                        da[i * k + t] = acc;
                    }
                }
                graph.accumulate(pa, da);
            }
            if (pb >= 0) {
                // dB = A^T . dC
                std::vector<double> db(k * n, 0.0);
                const double* av = a_data->data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* g_row = grad.data() + i * n;
                    for (std::size_t t = 0; t < k; ++t) {
                        const double ait = av[i * k + t];
                        if (ait == 0.0) {
                            continue;
                        }
                        double* db_row = db.data() + t * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            db_row[j] += ait * g_row[j];
                        }
                    }
                }
                graph.accumulate(pb, db);
            }
        });
}

// --------------------------------------------------------------------------
// elementwise
// --------------------------------------------------------------------------

Tensor elementwise(Graph& g, const Tensor& a, const Tensor& b, EwKind kind) {
    const bool a_single = a.size() == 1;
    const bool b_single = b.size() == 1;
    if (a.shape() != b.shape() && !a_single && !b_single) {
        throw DimensionError(std::string("elementwise ") + ew_name(kind) + " shapes " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                             " are incompatible");
    }
    const Shape out_shape = a_single && !b_single ? b.shape() : a.shape();
    const std::size_t n = shape_size(out_shape);
    const auto a_data = a.shared_data();
    const auto b_data = b.shared_data();

    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = apply_ew(kind, (*a_data)[a_single ? 0 : i], (*b_data)[b_single ? 0 : i]);
    }

    const int pa = g.track(a);
    const int pb = g.track(b);
    return g.record(
        ew_name(kind), {pa, pb}, out_shape, std::move(out),
        [pa, pb, a_data, b_data, a_single, b_single, kind, n](Graph& graph,
                                                              const std::vector<double>& grad) {
            // Zero upstream entries contribute exactly zero, so a non-finite
            // forward value (e.g. division by zero) on a zero-gradient path
            // never poisons the backward pass with NaN.
            if (pa >= 0) {
                std::vector<double> da(a_single ? 1 : n, 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    const double gi = grad[i];
                    if (gi == 0.0) {
                        continue;
                    }
                    double partial = 0.0;
                    switch (kind) {
                        case EwKind::add:
                        case EwKind::sub: partial = gi; break;
                        case EwKind::mul: partial = gi * (*b_data)[b_single ? 0 : i]; break;
                        case EwKind::div: partial = gi / (*b_data)[b_single ? 0 : i]; break;
                    }
                    da[a_single ? 0 : i] += partial;
                }
                graph.accumulate(pa, da);
            }
            if (pb >= 0) {
                std::vector<double> db(b_single ? 1 : n, 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    const double gi = grad[i];
                    if (gi == 0.0) {
                        continue;
                    }
                    const double av = (*a_data)[a_single ? 0 : i];
                    const double bv = (*b_data)[b_single ? 0 : i];
                    double partial = 0.0;
                    switch (kind) {
                        case EwKind::add: partial = gi; break;
                        case EwKind::sub: partial = -gi; break;
                        case EwKind::mul: partial = gi * av; break;
                        case EwKind::div: partial = -gi * av / (bv * bv); break;
                    }
                    db[b_single ? 0 : i] += partial;
                }
                graph.accumulate(pb, db);
            }
        });
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) { return elementwise(g, a, b, EwKind::add); }
Tensor sub(Graph& g, const Tensor& a, const Tensor& b) { return elementwise(g, a, b, EwKind::sub); }
Tensor mul(Graph& g, const Tensor& a, const Tensor& b) { return elementwise(g, a, b, EwKind::mul); }
Tensor divide(Graph& g, const Tensor& a, const Tensor& b) {
    return elementwise(g, a, b, EwKind::div);
}

// --------------------------------------------------------------------------
// relu / clamp_floor_zero / sqrt
// --------------------------------------------------------------------------

namespace {

Tensor rectify(Graph& g, const Tensor& a, const char* kind) {
    const std::size_t n = a.size();
    const auto a_data = a.shared_data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (*a_data)[i] > 0.0 ? (*a_data)[i] : 0.0;
    }
    const int pa = g.track(a);
    return g.record(kind, {pa}, a.shape(), std::move(out),
                    [pa, a_data, n](Graph& graph, const std::vector<double>& grad) {
                        std::vector<double> da(n, 0.0);
                        for (std::size_t i = 0; i < n; ++i) {
                            // subgradient at exactly 0 is 0
                            da[i] = (*a_data)[i] > 0.0 ? grad[i] : 0.0;
                        }
                        graph.accumulate(pa, da);
                    });
}

}  // namespace

Tensor relu(Graph& g, const Tensor& a) { return rectify(g, a, "relu"); }

Tensor clamp_floor_zero(Graph& g, const Tensor& a) { return rectify(g, a, "clamp_floor_zero"); }

Tensor sqrt(Graph& g, const Tensor& a) {
    const std::size_t n = a.size();
    const auto a_data = a.shared_data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        if ((*a_data)[i] < 0.0) {
            throw DomainError("sqrt of negative value at flat index " + std::to_string(i));
        }
        out[i] = std::sqrt((*a_data)[i]);
    }
    const int pa = g.track(a);
    std::vector<double> saved = out;
    return g.record("sqrt", {pa}, a.shape(), std::move(out),
                    [pa, saved = std::move(saved), n](Graph& graph,
                                                      const std::vector<double>& grad) {
                        std::vector<double> da(n, 0.0);
                        for (std::size_t i = 0; i < n; ++i) {
                            if (grad[i] == 0.0 || saved[i] == 0.0) {
                                continue;  // bounded convention at the origin
                            }
                            da[i] = grad[i] * 0.5 / saved[i];
                        }
                        graph.accumulate(pa, da);
                    });
}

// --------------------------------------------------------------------------
// reduce
// --------------------------------------------------------------------------

Tensor reduce(Graph& g, const Tensor& a, ReduceKind kind, std::optional<std::size_t> axis) {
    const auto a_data = a.shared_data();
    const std::size_t n = a.size();
    const int pa = g.track(a);

    if (!axis.has_value()) {
        if (kind == ReduceKind::mean && n == 0) {
            throw DomainError("mean of an empty tensor");
        }
        double total = 0.0;
        for (double v : *a_data) {
            total += v;
        }
        const double scale = kind == ReduceKind::mean ? 1.0 / static_cast<double>(n) : 1.0;
        return g.record(kind == ReduceKind::sum ? "sum" : "mean", {pa}, Shape{},
                        {total * scale},
                        [pa, n, scale](Graph& graph, const std::vector<double>& grad) {
                            graph.accumulate(pa, std::vector<double>(n, grad[0] * scale));
                        });
    }

    if (*axis >= a.rank()) {
        throw DimensionError("reduce axis " + std::to_string(*axis) +
                             " out of range for shape " + shape_str(a.shape()));
    }
    const AxisSplit s = split_axis(a.shape(), *axis);
    if (kind == ReduceKind::mean && s.extent == 0) {
        throw DomainError("mean over an empty axis");
    }
    const double scale = kind == ReduceKind::mean ? 1.0 / static_cast<double>(s.extent) : 1.0;
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t e = 0; e < s.extent; ++e) {
            const double* in_row = a_data->data() + (o * s.extent + e) * s.inner;
            double* out_row = out.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                out_row[i] += in_row[i];
            }
        }
    }
    if (kind == ReduceKind::mean) {
        for (double& v : out) {
            v *= scale;
        }
    }
    return g.record(kind == ReduceKind::sum ? "sum_axis" : "mean_axis", {pa},
                    drop_axis(a.shape(), *axis), std::move(out),
                    [pa, s, n, scale](Graph& graph, const std::vector<double>& grad) {
                        std::vector<double> da(n, 0.0);
                        for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t e = 0; e < s.extent; ++e) {
                                double* da_row = da.data() + (o * s.extent + e) * s.inner;
                                const double* g_row = grad.data() + o * s.inner;
                                for (std::size_t i = 0; i < s.inner; ++i) {
                                    da_row[i] = g_row[i] * scale;
                                }
                            }
                        }
                        graph.accumulate(pa, da);
                    });
}

// --------------------------------------------------------------------------
// log_sum_exp
// --------------------------------------------------------------------------

Tensor log_sum_exp(Graph& g, const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) {
        throw DimensionError("log_sum_exp axis " + std::to_string(axis) +
                             " out of range for shape " + shape_str(a.shape()));
    }
    const AxisSplit s = split_axis(a.shape(), axis);
    if (s.extent == 0) {
        throw DomainError("log_sum_exp over an empty axis");
    }
    const auto a_data = a.shared_data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < s.extent; ++e) {
                peak = std::max(peak, (*a_data)[(o * s.extent + e) * s.inner + i]);
            }
            double acc = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) {
                acc += std::exp((*a_data)[(o * s.extent + e) * s.inner + i] - peak);
            }
            out[o * s.inner + i] = peak + std::log(acc);
        }
    }
    const int pa = g.track(a);
    std::vector<double> saved = out;
    return g.record(
        "log_sum_exp", {pa}, drop_axis(a.shape(), axis), std::move(out),
        [pa, a_data, s, saved = std::move(saved)](Graph& graph, const std::vector<double>& grad) {
            std::vector<double> da(a_data->size(), 0.0);
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const double gi = grad[o * s.inner + i];
                    if (gi == 0.0) {
                        continue;
                    }
                    const double lse = saved[o * s.inner + i];
                    for (std::size_t e = 0; e < s.extent; ++e) {
                        const std::size_t idx = (o * s.extent + e) * s.inner + i;
                        da[idx] = gi * std::exp((*a_data)[idx] - lse);
                    }
                }
            }
            graph.accumulate(pa, da);
        });
}

// --------------------------------------------------------------------------
// batchnorm
// --------------------------------------------------------------------------

Tensor batchnorm(Graph& g, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, BatchNormMode mode, double momentum, double epsilon) {
    if (a.rank() != 2) {
        throw DimensionError("batchnorm expects a 2-D input, got " + shape_str(a.shape()));
    }
    const std::size_t rows = a.shape()[0];
    const std::size_t cols = a.shape()[1];
    if (gamma.size() != cols || beta.size() != cols || state.running_mean.size() != cols ||
        state.running_var.size() != cols) {
        throw DimensionError("batchnorm parameter sizes do not match " + std::to_string(cols) +
                             " channels");
    }
    if (mode == BatchNormMode::train && rows < 2) {
        throw DomainError("batchnorm train mode needs at least 2 rows, got " +
                          std::to_string(rows));
    }
    const auto a_data = a.shared_data();
    const auto gamma_data = gamma.shared_data();
    const auto beta_data = beta.shared_data();

    std::vector<double> mean(cols, 0.0);
    std::vector<double> var(cols, 0.0);
    if (mode == BatchNormMode::train) {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < cols; ++c) {
                mean[c] += (*a_data)[i * cols + c];
            }
        }
        for (double& m : mean) {
            m /= static_cast<double>(rows);
        }
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = (*a_data)[i * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        for (double& v : var) {
            v /= static_cast<double>(rows);  // population variance
        }
        for (std::size_t c = 0; c < cols; ++c) {
            state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * mean[c];
            state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * var[c];
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    std::vector<double> inv_std(cols);
    for (std::size_t c = 0; c < cols; ++c) {
        inv_std[c] = 1.0 / std::sqrt(var[c] + epsilon);
    }
    std::vector<double> normalized(rows * cols);
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < cols; ++c) {
            const double xhat = ((*a_data)[i * cols + c] - mean[c]) * inv_std[c];
            normalized[i * cols + c] = xhat;
            out[i * cols + c] = (*gamma_data)[c] * xhat + (*beta_data)[c];
        }
    }

    const int pa = g.track(a);
    const int pg = g.track(gamma);
    const int pb = g.track(beta);
    const bool train = mode == BatchNormMode::train;
    return g.record(
        "batchnorm", {pa, pg, pb}, a.shape(), std::move(out),
        [pa, pg, pb, gamma_data, normalized = std::move(normalized),
         inv_std = std::move(inv_std), rows, cols, train](Graph& graph,
                                                          const std::vector<double>& grad) {
            if (pg >= 0) {
                std::vector<double> dgamma(cols, 0.0);
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        dgamma[c] += grad[i * cols + c] * normalized[i * cols + c];
                    }
                }
                graph.accumulate(pg, dgamma);
            }
            if (pb >= 0) {
                std::vector<double> dbeta(cols, 0.0);
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        dbeta[c] += grad[i * cols + c];
                    }
                }
                graph.accumulate(pb, dbeta);
            }
            if (pa >= 0) {
                std::vector<double> da(rows * cols, 0.0);
                if (train) {
                    // Full backward through the batch statistics.
                    std::vector<double> g_mean(cols, 0.0);
                    std::vector<double> gx_mean(cols, 0.0);
                    for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t c = 0; c < cols; ++c) {
                            g_mean[c] += grad[i * cols + c];
                            gx_mean[c] += grad[i * cols + c] * normalized[i * cols + c];
                        }
                    }
                    for (std::size_t c = 0; c < cols; ++c) {
                        g_mean[c] /= static_cast<double>(rows);
                        gx_mean[c] /= static_cast<double>(rows);
                    }
                    for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t idx = i * cols + c;
                            da[idx] = (*gamma_data)[c] * inv_std[c] *
                                      (grad[idx] - g_mean[c] - normalized[idx] * gx_mean[c]);
                        }
                    }
                } else {
                    for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t c = 0; c < cols; ++c) {
                            const std::size_t idx = i * cols + c;
                            da[idx] = grad[idx] * (*gamma_data)[c] * inv_std[c];
                        }
                    }
                }
                graph.accumulate(pa, da);
            }
        });
}

// --------------------------------------------------------------------------
// reshape / transpose / select_front
// --------------------------------------------------------------------------

Tensor reshape(Graph& g, const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw DimensionError("reshape of " + shape_str(a.shape()) + " to " + shape_str(shape) +
                             " changes the element count");
    }
    const int pa = g.track(a);
    std::vector<double> out = a.data();
    return g.record("reshape", {pa}, std::move(shape), std::move(out),
                    [pa](Graph& graph, const std::vector<double>& grad) {
                        graph.accumulate(pa, grad);
                    });
}

Tensor transpose(Graph& g, const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError("transpose expects a 2-D input, got " + shape_str(a.shape()));
    }
    const std::size_t rows = a.shape()[0];
    const std::size_t cols = a.shape()[1];
    const auto a_data = a.shared_data();
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = (*a_data)[i * cols + j];
        }
    }
    const int pa = g.track(a);
    return g.record("transpose", {pa}, Shape{cols, rows}, std::move(out),
                    [pa, rows, cols](Graph& graph, const std::vector<double>& grad) {
                        std::vector<double> da(rows * cols);
                        for (std::size_t i = 0; i < rows; ++i) {
                            for (std::size_t j = 0; j < cols; ++j) {
                                da[i * cols + j] = grad[j * rows + i];
                            }
                        }
                        graph.accumulate(pa, da);
                    });
}

Tensor select_front(Graph& g, const Tensor& a, std::size_t index) {
    if (a.rank() < 1) {
        throw DimensionError("select_front needs rank >= 1");
    }
    if (index >= a.shape()[0]) {
        throw ContractError("select_front index " + std::to_string(index) +
                            " out of range for shape " + shape_str(a.shape()));
    }
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    const std::size_t chunk = shape_size(out_shape);
    const std::size_t total = a.size();
    const auto a_data = a.shared_data();
    std::vector<double> out(a_data->begin() + static_cast<std::ptrdiff_t>(index * chunk),
                            a_data->begin() + static_cast<std::ptrdiff_t>((index + 1) * chunk));
    const int pa = g.track(a);
    return g.record("select_front", {pa}, std::move(out_shape), std::move(out),
                    [pa, index, chunk, total](Graph& graph, const std::vector<double>& grad) {
                        std::vector<double> da(total, 0.0);
                        std::copy(grad.begin(), grad.end(),
                                  da.begin() + static_cast<std::ptrdiff_t>(index * chunk));
                        graph.accumulate(pa, da);
                    });
}

// --------------------------------------------------------------------------
// finite differences
// --------------------------------------------------------------------------

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
    Tensor probe = Tensor::from_data(x.shape(), x.data(), true);
    Graph graph;
    Tensor value = f(graph, probe);
    if (value.size() != 1) {
        throw ContractError("finite_diff_check expects a scalar-valued function");
    }
    if (!std::isfinite(value.scalar_value())) {
        throw NumericError("finite_diff_check: non-finite value at the base point");
    }
    const GradientMap grads = graph.backward(value);
    const Tensor analytic = grads.at(probe);

    auto evaluate = [&](std::vector<double> data, std::size_t coord) {
        Graph local;
        const Tensor shifted = Tensor::from_data(x.shape(), std::move(data), false);
        const double y = f(local, shifted).scalar_value();
        if (!std::isfinite(y)) {
            throw NumericError("finite_diff_check: non-finite value at coordinate " +
                               std::to_string(coord));
        }
        return y;
    };

    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::vector<double> plus = x.data();
        std::vector<double> minus = x.data();
        plus[i] += h;
        minus[i] -= h;
        const double central = (evaluate(std::move(plus), i) - evaluate(std::move(minus), i)) /
                               (2.0 * h);
        const double a = analytic.value_at(i);
        const double err = std::abs(a - central) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace emargin::ad
