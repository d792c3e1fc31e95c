#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace emargin::ad {

class Graph;
class GradientMap;

// Row-major extents; rank 0 denotes a scalar.
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Shared backing store. The value (shape + data) is immutable after
// construction; the autograd fields (grad, graph tag, node id) are the only
// mutable state and are owned by the Graph machinery.
struct TensorImpl {
    Shape shape;
    std::shared_ptr<const std::vector<double>> data;
    bool requires_grad = false;

    std::shared_ptr<std::vector<double>> grad;  // written by Graph::backward
    std::uint64_t graph_id = 0;                 // generation tag of `node`
    int node = -1;                              // handle into the active graph
};

}  // namespace detail

// Dense n-dimensional f64 value with an optional gradient slot. Copies share
// the backing store; the value itself never changes after creation.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    bool is_scalar() const { return size() == 1; }

    const std::vector<double>& data() const;
    // Aliased handle to the immutable backing store (kernels keep it alive in
    // their backward closures).
    std::shared_ptr<const std::vector<double>> shared_data() const;
    double value_at(std::size_t flat_index) const;
    double value_at(std::initializer_list<std::size_t> index) const;
    double scalar_value() const;  // requires size() == 1

    bool requires_grad() const;

    // Gradient written by the most recent backward pass, empty if none.
    bool has_grad() const;
    Tensor grad() const;
    void clear_grad() const;

protected:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    friend class Graph;
    friend class GradientMap;

    std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace emargin::ad
