#pragma once

// Differentiable ops over pvilab::Tensor. Every op validates shapes and
// throws ShapeError naming the offending shapes.

#include <cstddef>
#include <vector>

#include "pvilab/tensor.hpp"

namespace pvilab {

// Elementwise with numpy-style broadcasting (trailing-aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// [m,k]x[k,n] or batched [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., in] * w[in, out] (+ bias[out]). `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor softmax_lastdim(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-6;
// Normalizes each last-dim row to zero mean and unit (population) variance.
Tensor layernorm(const Tensor& x, double eps = kLayerNormEps);

// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

// mean((a - b)^2) over all elements; scalar of shape [1].
Tensor mean_sq_error(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
// Mean over `axis`, keeping it with extent 1.
Tensor mean_axis(const Tensor& x, std::size_t axis);

// Multi-head scaled dot-product attention without masking.
// q: [B, M, D], k and v: [B, S, D], S >= 1, D divisible by heads.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

}  // namespace pvilab
