#pragma once

// Dense row-major tensor with reverse-mode differentiation.
//
// Values are held as double regardless of dtype; a float32 tensor has every
// stored value rounded to float precision, so it behaves (and serializes)
// exactly like a float buffer. Ops record a backward closure on their output
// when grad mode is on and any input requires grad; backward() walks the
// recorded graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pvilab {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);
const char* dtype_name(DType dtype);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TensorImpl;

// Backward closure: reads out.grad and accumulates into the inputs' grads.
using BackwardFn = std::function<void(TensorImpl& out)>;

struct GradNode {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn fn;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f32;
    std::vector<double> data;
    std::vector<double> grad;  // empty until populated
    bool requires_grad = false;
    std::unique_ptr<GradNode> node;  // null for leaves

    void round_to_dtype();
    void ensure_grad();
    bool is_leaf() const { return node == nullptr; }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dtype = DType::f32, bool requires_grad = false);
    static Tensor full(Shape shape, double value, DType dtype = DType::f32);
    static Tensor from(Shape shape, std::vector<double> values, DType dtype = DType::f32,
                       bool requires_grad = false);
    static Tensor scalar(double value, DType dtype = DType::f32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl().shape; }
    std::size_t rank() const { return impl().shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl().data.size(); }
    DType dtype() const { return impl().dtype; }

    std::span<const double> data() const { return impl().data; }
    // Direct write access; only legal on leaves (no recorded history).
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat) const { return impl().data[flat]; }

    bool requires_grad() const { return impl().requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !impl().grad.empty(); }
    std::span<const double> grad() const { return impl().grad; }
    // Adds `values` into the grad slot (allocating it when absent).
    void accumulate_grad(std::span<const double> values);
    void zero_grad() { impl().grad.clear(); }

    // Fresh leaf with the same values and no history.
    Tensor detach() const;
    Tensor to(DType dtype) const;

    TensorImpl& impl() const;
    const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Populates grads of every requires_grad leaf reachable from `loss`.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording for its lifetime (per thread).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

// Builds an op result; records `fn` only when grad mode is on and an input
// requires grad.
Tensor make_result(Shape shape, DType dtype, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn fn);

DType promote(DType a, DType b);

}  // namespace detail

}  // namespace pvilab
