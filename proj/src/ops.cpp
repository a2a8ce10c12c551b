#include "pvilab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace pvilab {

using detail::make_result;
using detail::promote;

namespace {

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a, const Tensor& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

// Flat index maps from the broadcast output into each operand.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> ia;
    std::vector<std::size_t> ib;
    bool same = false;
};

Broadcast broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
    Broadcast bc;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) {
        bc.out = sa;
        bc.same = true;
        return bc;
    }
    const std::size_t rank = std::max(sa.size(), sb.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(sa.begin(), sa.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - sa.size()));
    std::copy(sb.begin(), sb.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - sb.size()));
    bc.out.resize(rank);
    for (std::size_t d = 0; d < rank; ++d) {
        if (pa[d] == pb[d] || pb[d] == 1) {
            bc.out[d] = pa[d];
        } else if (pa[d] == 1) {
            bc.out[d] = pb[d];
        } else {
            shape_fail(op, a, b);
        }
    }
    auto strides = [&](const Shape& p) {
        std::vector<std::size_t> st(rank, 0);
        std::size_t acc = 1;
        for (std::size_t d = rank; d-- > 0;) {
            st[d] = (p[d] == 1) ? 0 : acc;
            acc *= p[d];
        }
        return st;
    };
    const auto sta = strides(pa);
    const auto stb = strides(pb);
    const std::size_t n = shape_numel(bc.out);
    bc.ia.resize(n);
    bc.ib.resize(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
        bc.ia[i] = oa;
        bc.ib[i] = ob;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += sta[d];
            ob += stb[d];
            if (idx[d] < bc.out[d]) break;
            oa -= sta[d] * idx[d];
            ob -= stb[d] * idx[d];
            idx[d] = 0;
        }
    }
    return bc;
}

enum class Binary { add, sub, mul };

Tensor binary(Binary kind, const char* name, const Tensor& a, const Tensor& b) {
    auto bc = broadcast(name, a, b);
    const std::size_t n = shape_numel(bc.out);
    const auto& da = a.impl().data;
    const auto& db = b.impl().data;
    std::vector<double> out(n);
    auto ia = [&](std::size_t i) { return bc.same ? i : bc.ia[i]; };
    auto ib = [&](std::size_t i) { return bc.same ? i : bc.ib[i]; };
    for (std::size_t i = 0; i < n; ++i) {
        const double x = da[ia(i)], y = db[ib(i)];
        out[i] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
    }
    auto shared_bc = std::make_shared<Broadcast>(std::move(bc));
    Shape shape = shared_bc->out;
    return make_result(
        std::move(shape), promote(a.dtype(), b.dtype()), std::move(out), {a, b},
        [kind, shared_bc](TensorImpl& o) {
            auto& A = *o.node->inputs[0];
            auto& B = *o.node->inputs[1];
            const auto& bc = *shared_bc;
            const std::size_t n = o.grad.size();
            if (A.requires_grad) {
                A.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = bc.same ? i : bc.ia[i];
                    const std::size_t k = bc.same ? i : bc.ib[i];
                    A.grad[j] += kind == Binary::mul ? o.grad[i] * B.data[k] : o.grad[i];
                }
            }
            if (B.requires_grad) {
                B.ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t j = bc.same ? i : bc.ia[i];
                    const std::size_t k = bc.same ? i : bc.ib[i];
                    B.grad[k] += kind == Binary::mul   ? o.grad[i] * A.data[j]
                                 : kind == Binary::sub ? -o.grad[i]
                                                       : o.grad[i];
                }
            }
        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, "mul", a, b); }

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    return make_result(a.shape(), a.dtype(), std::move(out), {a}, [factor](TensorImpl& o) {
        auto& A = *o.node->inputs[0];
        A.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) A.grad[i] += factor * o.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const bool batched = a.rank() == 3 && b.rank() == 3;
    if (!(batched || (a.rank() == 2 && b.rank() == 2))) shape_fail("matmul", a, b);
    const std::size_t batch = batched ? a.dim(0) : 1;
    const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t k2 = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != k2 || (batched && b.dim(0) != batch)) shape_fail("matmul", a, b);

    const auto& da = a.impl().data;
    const auto& db = b.impl().data;
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* A = da.data() + bi * m * k;
        const double* B = db.data() + bi * k * n;
        double* C = out.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double x = A[i * k + p];
                for (std::size_t j = 0; j < n; ++j) C[i * n + j] += x * B[p * n + j];
            }
        }
    }
    Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
    return make_result(std::move(shape), promote(a.dtype(), b.dtype()), std::move(out), {a, b},
                       [batch, m, k, n](TensorImpl& o) {
                           auto& A = *o.node->inputs[0];
                           auto& B = *o.node->inputs[1];
                           if (A.requires_grad) A.ensure_grad();
                           if (B.requires_grad) B.ensure_grad();
                           for (std::size_t bi = 0; bi < batch; ++bi) {
                               const double* G = o.grad.data() + bi * m * n;
                               const double* Ad = A.data.data() + bi * m * k;
                               const double* Bd = B.data.data() + bi * k * n;
                               for (std::size_t i = 0; i < m; ++i) {
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double acc = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) {
                                           acc += G[i * n + j] * Bd[p * n + j];
                                       }
                                       if (A.requires_grad) A.grad[bi * m * k + i * k + p] += acc;
                                       if (B.requires_grad) {
                                           const double x = Ad[i * k + p];
                                           double* gb = B.grad.data() + bi * k * n + p * n;
                                           for (std::size_t j = 0; j < n; ++j) gb[j] += x * G[i * n + j];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() < 1 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0)) {
        shape_fail("linear", x, w);
    }
    const std::size_t in = w.dim(0), outd = w.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) shape_fail("linear(bias)", w, bias);
    const std::size_t rows = x.numel() / in;
    const auto& dx = x.impl().data;
    const auto& dw = w.impl().data;
    std::vector<double> out(rows * outd, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double* y = out.data() + r * outd;
        if (bias.defined()) {
            const auto& db = bias.impl().data;
            std::copy(db.begin(), db.end(), y);
        }
        const double* xr = dx.data() + r * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = xr[i];
            if (xv == 0.0) continue;
            const double* wr = dw.data() + i * outd;
            for (std::size_t o = 0; o < outd; ++o) y[o] += xv * wr[o];
        }
    }
    Shape shape = x.shape();
    shape.back() = outd;
    DType dt = promote(x.dtype(), w.dtype());
    std::vector<Tensor> inputs{x, w};
    const bool has_bias = bias.defined();
    if (has_bias) {
        dt = promote(dt, bias.dtype());
        inputs.push_back(bias);
    }
    return make_result(std::move(shape), dt, std::move(out), std::move(inputs),
                       [rows, in, outd, has_bias](TensorImpl& o) {
                           auto& X = *o.node->inputs[0];
                           auto& W = *o.node->inputs[1];
                           const double* G = o.grad.data();
                           if (X.requires_grad) {
                               X.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const double* g = G + r * outd;
                                   double* gx = X.grad.data() + r * in;
                                   for (std::size_t i = 0; i < in; ++i) {
                                       const double* wr = W.data.data() + i * outd;
                                       double acc = 0.0;
                                       for (std::size_t k = 0; k < outd; ++k) acc += g[k] * wr[k];
                                       gx[i] += acc;
                                   }
                               }
                           }
                           if (W.requires_grad) {
                               W.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const double* g = G + r * outd;
                                   const double* xr = X.data.data() + r * in;
                                   for (std::size_t i = 0; i < in; ++i) {
                                       const double xv = xr[i];
                                       if (xv == 0.0) continue;
                                       double* gw = W.grad.data() + i * outd;
                                       for (std::size_t k = 0; k < outd; ++k) gw[k] += xv * g[k];
                                   }
                               }
                           }
                           if (has_bias && o.node->inputs[2]->requires_grad) {
                               auto& Bv = *o.node->inputs[2];
                               Bv.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t k = 0; k < outd; ++k) Bv.grad[k] += G[r * outd + k];
                               }
                           }
                       });
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax_lastdim: rank-0 input");
    const std::size_t width = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / width;
    const auto& d = x.impl().data;
    std::vector<double> out(d.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = d.data() + r * width;
        double* y = out.data() + r * width;
        const double mx = *std::max_element(in, in + width);
        double z = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
            y[i] = std::exp(in[i] - mx);
            z += y[i];
        }
        for (std::size_t i = 0; i < width; ++i) y[i] /= z;
    }
    auto probs = std::make_shared<std::vector<double>>(out);
    return make_result(x.shape(), x.dtype(), std::move(out), {x}, [rows, width, probs](TensorImpl& o) {
        auto& X = *o.node->inputs[0];
        X.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* p = probs->data() + r * width;
            const double* g = o.grad.data() + r * width;
            double dot = 0.0;
            for (std::size_t i = 0; i < width; ++i) dot += p[i] * g[i];
            for (std::size_t i = 0; i < width; ++i) X.grad[r * width + i] += p[i] * (g[i] - dot);
        }
    });
}

Tensor layernorm(const Tensor& x, double eps) {
    if (x.rank() < 1) throw ShapeError("layernorm: rank-0 input");
    const std::size_t width = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / width;
    const auto& d = x.impl().data;
    std::vector<double> out(d.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = d.data() + r * width;
        double mean = 0.0;
        for (std::size_t i = 0; i < width; ++i) mean += in[i];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t i = 0; i < width; ++i) var += (in[i] - mean) * (in[i] - mean);
        var /= static_cast<double>(width);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t i = 0; i < width; ++i) out[r * width + i] = (in[i] - mean) * is;
    }
    auto normed = std::make_shared<std::vector<double>>(out);
    return make_result(x.shape(), x.dtype(), std::move(out), {x},
                       [rows, width, inv_std, normed](TensorImpl& o) {
                           auto& X = *o.node->inputs[0];
                           X.ensure_grad();
                           const double n = static_cast<double>(width);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* g = o.grad.data() + r * width;
                               const double* y = normed->data() + r * width;
                               double gs = 0.0, gy = 0.0;
                               for (std::size_t i = 0; i < width; ++i) {
                                   gs += g[i];
                                   gy += g[i] * y[i];
                               }
                               const double is = (*inv_std)[r];
                               for (std::size_t i = 0; i < width; ++i) {
                                   X.grad[r * width + i] += is * (g[i] - gs / n - y[i] * gy / n);
                               }
                           }
                       });
}

Tensor gelu(const Tensor& x) {
    const auto& d = x.impl().data;
    std::vector<double> out(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        out[i] = 0.5 * d[i] * (1.0 + std::erf(d[i] / std::numbers::sqrt2));
    }
    return make_result(x.shape(), x.dtype(), std::move(out), {x}, [](TensorImpl& o) {
        auto& X = *o.node->inputs[0];
        X.ensure_grad();
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const double v = X.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            X.grad[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor mean_sq_error(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("mean_sq_error", a, b);
    const auto& da = a.impl().data;
    const auto& db = b.impl().data;
    const double n = static_cast<double>(da.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < da.size(); ++i) acc += (da[i] - db[i]) * (da[i] - db[i]);
    return make_result({1}, promote(a.dtype(), b.dtype()), {acc / n}, {a, b}, [n](TensorImpl& o) {
        auto& A = *o.node->inputs[0];
        auto& B = *o.node->inputs[1];
        const double g = o.grad[0] * 2.0 / n;
        if (A.requires_grad) A.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        for (std::size_t i = 0; i < A.data.size(); ++i) {
            const double diff = A.data[i] - B.data[i];
            if (A.requires_grad) A.grad[i] += g * diff;
            if (B.requires_grad) B.grad[i] -= g * diff;
        }
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_result({1}, x.dtype(), {acc}, {x}, [](TensorImpl& o) {
        auto& X = *o.node->inputs[0];
        X.ensure_grad();
        for (auto& g : X.grad) g += o.grad[0];
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    std::size_t total = 0;
    DType dt = parts.front().dtype();
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        if (!ok) shape_fail("concat", parts.front(), p);
        total += s[axis];
        dt = promote(dt, p.dtype());
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
    Shape shape = ref;
    shape[axis] = total;
    std::vector<double> out(shape_numel(shape));
    std::vector<std::size_t> extents;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[axis];
        extents.push_back(len);
        const auto& d = p.impl().data;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(d.data() + o * len * inner, len * inner,
                        out.data() + (o * total + offset) * inner);
        }
        offset += len;
    }
    return make_result(std::move(shape), dt, std::move(out), parts,
                       [outer, inner, total, extents](TensorImpl& o) {
                           std::size_t offset = 0;
                           for (std::size_t pi = 0; pi < extents.size(); ++pi) {
                               auto& P = *o.node->inputs[pi];
                               const std::size_t len = extents[pi];
                               if (P.requires_grad) {
                                   P.ensure_grad();
                                   for (std::size_t q = 0; q < outer; ++q) {
                                       const double* g = o.grad.data() + (q * total + offset) * inner;
                                       double* gp = P.grad.data() + q * len * inner;
                                       for (std::size_t i = 0; i < len * inner; ++i) gp[i] += g[i];
                                   }
                               }
                               offset += len;
                           }
                       });
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
    return concat(parts, parts.front().rank() - 1);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const Shape& s = x.shape();
    if (axis >= s.size() || start + length > s[axis] || length == 0) {
        throw ShapeError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t full = s[axis];
    Shape shape = s;
    shape[axis] = length;
    std::vector<double> out(shape_numel(shape));
    const auto& d = x.impl().data;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(d.data() + (o * full + start) * inner, length * inner,
                    out.data() + o * length * inner);
    }
    return make_result(std::move(shape), x.dtype(), std::move(out), {x},
                       [outer, inner, full, start, length](TensorImpl& o) {
                           auto& X = *o.node->inputs[0];
                           X.ensure_grad();
                           for (std::size_t q = 0; q < outer; ++q) {
                               const double* g = o.grad.data() + q * length * inner;
                               double* gx = X.grad.data() + (q * full + start) * inner;
                               for (std::size_t i = 0; i < length * inner; ++i) gx[i] += g[i];
                           }
                       });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_result(std::move(shape), x.dtype(), std::move(out), {x}, [](TensorImpl& o) {
        auto& X = *o.node->inputs[0];
        X.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) X.grad[i] += o.grad[i];
    });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw ShapeError("mean_axis: axis out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t len = s[axis];
    Shape shape = s;
    shape[axis] = 1;
    std::vector<double> out(outer * inner, 0.0);
    const auto& d = x.impl().data;
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
            const double* src = d.data() + (o * len + l) * inner;
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += src[i];
        }
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= inv;
    }
    return make_result(std::move(shape), x.dtype(), std::move(out), {x},
                       [outer, inner, len, inv](TensorImpl& o) {
                           auto& X = *o.node->inputs[0];
                           X.ensure_grad();
                           for (std::size_t q = 0; q < outer; ++q) {
                               for (std::size_t l = 0; l < len; ++l) {
                                   double* gx = X.grad.data() + (q * len + l) * inner;
                                   for (std::size_t i = 0; i < inner; ++i) gx[i] += inv * o.grad[q * inner + i];
                               }
                           }
                       });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
        q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
        throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    const std::size_t B = q.dim(0), M = q.dim(1), S = k.dim(1), D = q.dim(2);
    if (S == 0) throw ShapeError("attention: empty key/value sequence");
    if (heads == 0 || D % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(D) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    const std::size_t dh = D / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& Q = q.impl().data;
    const auto& K = k.impl().data;
    const auto& V = v.impl().data;
    auto probs = std::make_shared<std::vector<double>>(B * heads * M * S);
    std::vector<double> out(B * M * D, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < M; ++i) {
                double* p = probs->data() + ((b * heads + h) * M + i) * S;
                const double* qi = Q.data() + (b * M + i) * D + h * dh;
                double mx = -1e300;
                for (std::size_t j = 0; j < S; ++j) {
                    const double* kj = K.data() + (b * S + j) * D + h * dh;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    p[j] = s * sc;
                    mx = std::max(mx, p[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < S; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    z += p[j];
                }
                double* oi = out.data() + (b * M + i) * D + h * dh;
                for (std::size_t j = 0; j < S; ++j) {
                    p[j] /= z;
                    const double* vj = V.data() + (b * S + j) * D + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
                }
            }
        }
    }
    const DType dt = promote(promote(q.dtype(), k.dtype()), v.dtype());
    return make_result({B, M, D}, dt, std::move(out), {q, k, v},
                       [B, M, S, D, heads, dh, sc, probs](TensorImpl& o) {
                           auto& Qt = *o.node->inputs[0];
                           auto& Kt = *o.node->inputs[1];
                           auto& Vt = *o.node->inputs[2];
                           if (Qt.requires_grad) Qt.ensure_grad();
                           if (Kt.requires_grad) Kt.ensure_grad();
                           if (Vt.requires_grad) Vt.ensure_grad();
                           std::vector<double> dp(S);
                           for (std::size_t b = 0; b < B; ++b) {
                               for (std::size_t h = 0; h < heads; ++h) {
                                   for (std::size_t i = 0; i < M; ++i) {
                                       const double* p = probs->data() + ((b * heads + h) * M + i) * S;
                                       const double* g = o.grad.data() + (b * M + i) * D + h * dh;
                                       double dot = 0.0;
                                       for (std::size_t j = 0; j < S; ++j) {
                                           const double* vj = Vt.data.data() + (b * S + j) * D + h * dh;
                                           double s = 0.0;
                                           for (std::size_t c = 0; c < dh; ++c) s += g[c] * vj[c];
                                           dp[j] = s;
                                           dot += s * p[j];
                                           if (Vt.requires_grad) {
                                               double* gv = Vt.grad.data() + (b * S + j) * D + h * dh;
                                               for (std::size_t c = 0; c < dh; ++c) gv[c] += p[j] * g[c];
                                           }
                                       }
                                       const double* qi = Qt.data.data() + (b * M + i) * D + h * dh;
                                       for (std::size_t j = 0; j < S; ++j) {
                                           const double ds = p[j] * (dp[j] - dot) * sc;
                                           if (ds == 0.0) continue;
                                           const double* kj = Kt.data.data() + (b * S + j) * D + h * dh;
                                           if (Qt.requires_grad) {
                                               double* gq = Qt.grad.data() + (b * M + i) * D + h * dh;
                                               for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * kj[c];
                                           }
                                           if (Kt.requires_grad) {
                                               double* gk = Kt.grad.data() + (b * S + j) * D + h * dh;
                                               for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * qi[c];
                                           }
                                       }
                                   }
                               }
                           }
                       });
}

}  // namespace pvilab
