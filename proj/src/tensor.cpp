#include "emargin/tensor.hpp"

#include <numeric>
#include <sstream>

#include "emargin/errors.hpp"

namespace emargin::ad {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) {
        n *= extent;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << "]";
    return out.str();
}

namespace {

Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
    if (data.size() != shape_size(shape)) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::make_shared<const std::vector<double>>(std::move(data));
    impl->requires_grad = requires_grad;
    struct Access : Tensor {
        explicit Access(std::shared_ptr<detail::TensorImpl> i) : Tensor(std::move(i)) {}
    };
    return Access(std::move(impl));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> data(shape_size(shape), 0.0);
    return make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(shape_size(shape), value);
    return make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return make(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return make(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!impl_) {
        throw ContractError("use of default-constructed tensor");
    }
    return impl_->shape;
}

std::size_t Tensor::size() const {
    return shape_size(shape());
}

const std::vector<double>& Tensor::data() const {
    if (!impl_) {
        throw ContractError("use of default-constructed tensor");
    }
    return *impl_->data;
}

std::shared_ptr<const std::vector<double>> Tensor::shared_data() const {
    if (!impl_) {
        throw ContractError("use of default-constructed tensor");
    }
    return impl_->data;
}

double Tensor::value_at(std::size_t flat_index) const {
    const auto& values = data();
    if (flat_index >= values.size()) {
        throw ContractError("flat index " + std::to_string(flat_index) +
                            " out of range for shape " + shape_str(shape()));
    }
    return values[flat_index];
}

double Tensor::value_at(std::initializer_list<std::size_t> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) {
        throw ContractError("index rank " + std::to_string(index.size()) +
                            " does not match shape " + shape_str(s));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= s[axis]) {
            throw ContractError("index out of range for shape " + shape_str(s));
        }
        flat = flat * s[axis] + i;
        ++axis;
    }
    return (*impl_->data)[flat];
}

double Tensor::scalar_value() const {
    if (size() != 1) {
        throw ContractError("scalar_value on tensor of shape " + shape_str(shape()));
    }
    return (*impl_->data)[0];
}

bool Tensor::requires_grad() const {
    return impl_ && impl_->requires_grad;
}

bool Tensor::has_grad() const {
    return impl_ && impl_->grad != nullptr;
}

Tensor Tensor::grad() const {
    if (!has_grad()) {
        throw ContractError("tensor has no gradient");
    }
    return from_data(impl_->shape, *impl_->grad, false);
}

void Tensor::clear_grad() const {
    if (impl_) {
        impl_->grad.reset();
    }
}

}  // namespace emargin::ad
