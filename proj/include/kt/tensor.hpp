#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage behind a Tensor handle. The tape keeps these alive for the
// duration of a backward pass.
struct TensorStorage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::string name;

    // Returns the gradient buffer, allocating zeros on first use.
    double* grad_buffer();
};

/// Dense row-major array of 64-bit floats with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() for
/// an independent copy. Every operation that produces a Tensor checks that
/// the result is finite and throws NumericError otherwise.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    // Leaf tensor that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values, std::string name = {});

    bool defined() const noexcept { return static_cast<bool>(p_); }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t size() const { return data().size(); }

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    // Zero-length when no gradient has been accumulated.
    std::span<const double> grad() const;
    std::span<double> grad();
    void zero_grad();

    const std::string& name() const;
    void set_name(std::string name);

    // Independent copy of the data, not attached to any tape.
    Tensor clone() const;

    const std::shared_ptr<TensorStorage>& storage() const { return p_; }

private:
    explicit Tensor(std::shared_ptr<TensorStorage> p) : p_(std::move(p)) {}
    friend Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);

    std::shared_ptr<TensorStorage> p_;
};

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);

// Throws NumericError naming `what` when any value is NaN or infinite.
void check_finite(std::span<const double> values, const std::string& what);

}  // namespace kt
