#include "pvilab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace pvilab {

namespace {

thread_local bool t_grad_enabled = true;

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

void TensorImpl::round_to_dtype() {
    if (dtype != DType::f32) return;
    for (auto& v : data) v = static_cast<double>(static_cast<float>(v));
}

void TensorImpl::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    auto t = zeros(std::move(shape), dtype);
    std::fill(t.impl().data.begin(), t.impl().data.end(), value);
    t.impl().round_to_dtype();
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, DType dtype, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->dtype = dtype;
    impl->requires_grad = requires_grad;
    impl->round_to_dtype();
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dtype) { return from({1}, {value}, dtype); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
    }
    return shape()[axis];
}

std::span<double> Tensor::mutable_data() {
    if (!impl().is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
    return impl().data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    }
    return impl().data[0];
}

void Tensor::set_requires_grad(bool on) {
    if (!impl().is_leaf()) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
    impl().requires_grad = on;
}

void Tensor::accumulate_grad(std::span<const double> values) {
    auto& t = impl();
    if (values.size() != t.data.size()) {
        throw ShapeError("grad of size " + std::to_string(values.size()) +
                         " does not fit tensor " + shape_str(t.shape));
    }
    t.ensure_grad();
    for (std::size_t i = 0; i < values.size(); ++i) t.grad[i] += values[i];
}

Tensor Tensor::detach() const {
    return from(shape(), impl().data, dtype());
}

Tensor Tensor::to(DType target) const {
    return from(shape(), impl().data, target, false);
}

TensorImpl& Tensor::impl() const {
    if (!impl_) throw std::logic_error("use of an undefined tensor");
    return *impl_;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    TensorImpl* root = &loss.impl();
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->node && next < node->node->inputs.size()) {
            TensorImpl* child = node->node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    for (auto& g : root->grad) g += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (!t->node) continue;
        if (!t->grad.empty()) t->node->fn(*t);
        // Intermediate grads are not needed once propagated.
        if (t != root) std::vector<double>().swap(t->grad);
    }
}

namespace detail {

DType promote(DType a, DType b) { return (a == DType::f64 || b == DType::f64) ? DType::f64 : DType::f32; }

Tensor make_result(Shape shape, DType dtype, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->dtype = dtype;
    impl->round_to_dtype();
#ifndef NDEBUG
    for (double v : impl->data) {
        if (!std::isfinite(v)) throw std::runtime_error("non-finite value produced by forward op");
    }
#endif
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        impl->requires_grad = true;
        impl->node = std::make_unique<GradNode>();
        for (auto& in : inputs) impl->node->inputs.push_back(in.shared());
        impl->node->fn = std::move(fn);
    }
    return Tensor(std::move(impl));
}

}  // namespace detail

}  // namespace pvilab
