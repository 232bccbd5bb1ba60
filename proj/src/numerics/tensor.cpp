#include "kt/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "kt/error.hpp"

namespace kt {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

double* TensorStorage::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
}

void check_finite(std::span<const double> values, const std::string& what) {
    // A value is NaN or infinite exactly when its exponent bits are all set.
    // The integer reduction vectorises; the slow scan only runs on failure.
    constexpr std::uint64_t kExponent = 0x7ff0000000000000ULL;
    std::uint64_t bad = 0;
    for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
    if (!bad) return;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError("non-finite value " + std::to_string(values[i]) + " at index " +
                               std::to_string(i) + " in " + what);
        }
    }
}

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_size(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto p = std::make_shared<TensorStorage>();
    p->shape = std::move(shape);
    p->data = std::move(values);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = shape_size(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), false);
}

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_size(shape);
    return make_tensor(std::move(shape), std::vector<double>(n, value), false);
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    check_finite(values, "Tensor::from");
    return make_tensor(std::move(shape), std::move(values), false);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values, std::string name) {
    check_finite(values, name.empty() ? "parameter" : name);
    auto t = make_tensor(std::move(shape), std::move(values), true);
    t.p_->name = std::move(name);
    return t;
}

const Shape& Tensor::shape() const { return p_->shape; }

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= p_->shape.size()) {
        throw DimensionError("dimension " + std::to_string(i) + " out of range for shape " +
                             shape_str(p_->shape));
    }
    return p_->shape[i];
}

std::span<double> Tensor::data() { return p_->data; }
std::span<const double> Tensor::data() const { return p_->data; }

double Tensor::item() const {
    if (p_->data.size() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_str(p_->shape));
    }
    return p_->data[0];
}

bool Tensor::requires_grad() const { return p_->requires_grad; }
void Tensor::set_requires_grad(bool on) { p_->requires_grad = on; }
bool Tensor::has_grad() const { return !p_->grad.empty(); }
std::span<const double> Tensor::grad() const { return p_->grad; }
std::span<double> Tensor::grad() { return p_->grad; }
void Tensor::zero_grad() { p_->grad.clear(); }

const std::string& Tensor::name() const { return p_->name; }
void Tensor::set_name(std::string name) { p_->name = std::move(name); }

Tensor Tensor::clone() const {
    auto t = make_tensor(p_->shape, p_->data, false);
    t.p_->name = p_->name;
    return t;
}

}  // namespace kt
