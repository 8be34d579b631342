#include "aunet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

namespace aunet::ops {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

bool recording(std::initializer_list<const Tensor*> ins) {
    if (!Graph::active()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

void record(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> ins, std::function<void()> fn) {
    out.impl->requires_grad = true;
    Graph::active()->record(TapeNode{std::move(fn), std::move(ins), out.impl});
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* ctx) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(ctx) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_defined(const Tensor& t, const char* ctx) {
    if (!t.defined()) throw UsageError(std::string(ctx) + ": undefined tensor operand");
}

// indices of the k largest of vals[0], vals[stride], ..., ties toward lower index
std::vector<int> topk_indices(const double* vals, int n, int stride, int k) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int i, int j) {
        double vi = vals[static_cast<std::size_t>(i) * stride];
        double vj = vals[static_cast<std::size_t>(j) * stride];
        return vi > vj || (vi == vj && i < j);
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

struct AxisSpan {
    std::int64_t outer, n, inner;
};

AxisSpan axis_span(const Shape& s, int axis) {
    AxisSpan sp{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (recording({&a, &b})) {
        auto ai = a.impl, bi = b.impl, oi = out.impl;
        record(out, {ai, bi}, [ai, bi, oi] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (ai->requires_grad) {
                auto& ga = adjoint_buffer(*ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = adjoint_buffer(*bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (recording({&a, &b})) {
        auto ai = a.impl, bi = b.impl, oi = out.impl;
        record(out, {ai, bi}, [ai, bi, oi] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (ai->requires_grad) {
                auto& ga = adjoint_buffer(*ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = adjoint_buffer(*bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (recording({&a, &b})) {
        auto ai = a.impl, bi = b.impl, oi = out.impl;
        record(out, {ai, bi}, [ai, bi, oi] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (ai->requires_grad) {
                auto& ga = adjoint_buffer(*ai);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = adjoint_buffer(*bi);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    check_defined(a, "add_scalar");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] + s;
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->adjoint[i];
        });
    }
    return out;
}

Tensor rsub_scalar(double s, const Tensor& a) {
    check_defined(a, "rsub_scalar");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = s - a.data()[i];
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] -= oi->adjoint[i];
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    check_defined(a, "scale");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] * s;
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, s] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->adjoint[i] * s;
        });
    }
    return out;
}

Tensor neg(const Tensor& a) {
    return scale(a, -1.0);
}

Tensor sigmoid(const Tensor& a) {
    check_defined(a, "sigmoid");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                double s = oi->data[i];
                ga[i] += oi->adjoint[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    check_defined(a, "gelu");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        double x = a.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                double x = ai->data[i];
                double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ga[i] += oi->adjoint[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

Tensor log(const Tensor& a) {
    check_defined(a, "log");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        if (a.data()[i] <= 0.0) throw UsageError("log: non-positive input");
        out.data()[i] = std::log(a.data()[i]);
    }
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->adjoint[i] / ai->data[i];
        });
    }
    return out;
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    check_defined(a, "clamp");
    if (lo > hi) throw UsageError("clamp: lo > hi");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = std::min(std::max(a.data()[i], lo), hi);
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, lo, hi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                double x = ai->data[i];
                if (x > lo && x < hi) ga[i] += oi->adjoint[i];
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check_defined(x, "layer_norm");
    check_defined(gamma, "layer_norm");
    check_defined(beta, "layer_norm");
    const int d = x.dim(x.ndim() - 1);
    if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d)
        throw DimensionError("layer_norm: scale/shift must be [" + std::to_string(d) + "]");
    const std::int64_t lanes = x.numel() / d;

    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<double> inv_std(static_cast<std::size_t>(lanes));
    for (std::int64_t l = 0; l < lanes; ++l) {
        const double* xp = x.data().data() + l * d;
        double mu = 0.0;
        for (int i = 0; i < d; ++i) mu += xp[i];
        mu /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (xp[i] - mu) * (xp[i] - mu);
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(l)] = is;
        for (int i = 0; i < d; ++i) {
            double xh = (xp[i] - mu) * is;
            xhat[static_cast<std::size_t>(l * d + i)] = xh;
            out.data()[static_cast<std::size_t>(l * d + i)] = gamma.data()[static_cast<std::size_t>(i)] * xh + beta.data()[static_cast<std::size_t>(i)];
        }
    }
    if (recording({&x, &gamma, &beta})) {
        auto xi = x.impl, gi = gamma.impl, bi = beta.impl, oi = out.impl;
        record(out, {xi, gi, bi},
               [xi, gi, bi, oi, d, lanes, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                   if (oi->adjoint.empty()) return;
                   const auto& g = oi->adjoint;
                   for (std::int64_t l = 0; l < lanes; ++l) {
                       const double* gp = g.data() + l * d;
                       const double* xh = xhat.data() + l * d;
                       if (gi->requires_grad) {
                           auto& gg = adjoint_buffer(*gi);
                           for (int i = 0; i < d; ++i) gg[static_cast<std::size_t>(i)] += gp[i] * xh[i];
                       }
                       if (bi->requires_grad) {
                           auto& gb = adjoint_buffer(*bi);
                           for (int i = 0; i < d; ++i) gb[static_cast<std::size_t>(i)] += gp[i];
                       }
                       if (xi->requires_grad) {
                           auto& gx = adjoint_buffer(*xi);
                           double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                           for (int i = 0; i < d; ++i) {
                               double dxh = gp[i] * gi->data[static_cast<std::size_t>(i)];
                               mean_dxhat += dxh;
                               mean_dxhat_xhat += dxh * xh[i];
                           }
                           mean_dxhat /= d;
                           mean_dxhat_xhat /= d;
                           double is = inv_std[static_cast<std::size_t>(l)];
                           for (int i = 0; i < d; ++i) {
                               double dxh = gp[i] * gi->data[static_cast<std::size_t>(i)];
                               gx[static_cast<std::size_t>(l * d + i)] += is * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
                           }
                       }
                   }
               });
    }
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    check_defined(x, "softmax");
    if (axis < 0 || axis >= x.ndim())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
    const AxisSpan sp = axis_span(x.shape(), axis);

    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
            const auto at = [&](std::int64_t i) { return static_cast<std::size_t>((o * sp.n + i) * sp.inner + in); };
            double mx = x.data()[at(0)];
            for (std::int64_t i = 1; i < sp.n; ++i) mx = std::max(mx, x.data()[at(i)]);
            double denom = 0.0;
            for (std::int64_t i = 0; i < sp.n; ++i) {
                double e = std::exp(x.data()[at(i)] - mx);
                out.data()[at(i)] = e;
                denom += e;
            }
            for (std::int64_t i = 0; i < sp.n; ++i) out.data()[at(i)] /= denom;
        }
    }
    if (recording({&x})) {
        auto xi = x.impl, oi = out.impl;
        record(out, {xi}, [xi, oi, sp] {
            if (oi->adjoint.empty()) return;
            auto& gx = adjoint_buffer(*xi);
            const auto& g = oi->adjoint;
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                for (std::int64_t in = 0; in < sp.inner; ++in) {
                    const auto at = [&](std::int64_t i) { return static_cast<std::size_t>((o * sp.n + i) * sp.inner + in); };
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < sp.n; ++i) dot += g[at(i)] * oi->data[at(i)];
                    for (std::int64_t i = 0; i < sp.n; ++i) gx[at(i)] += oi->data[at(i)] * (g[at(i)] - dot);
                }
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();
    for (int i = 0; i < m; ++i) {
        for (int l = 0; l < k; ++l) {
            const double av = ap[i * k + l];
            if (av == 0.0) continue;
            const double* brow = bp + static_cast<std::size_t>(l) * n;
            double* orow = op + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (recording({&a, &b})) {
        auto ai = a.impl, bi = b.impl, oi = out.impl;
        record(out, {ai, bi}, [ai, bi, oi, m, k, n] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (ai->requires_grad) {
                auto& ga = adjoint_buffer(*ai);
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        double acc = 0.0;
                        const double* grow = g.data() + static_cast<std::size_t>(i) * n;
                        const double* brow = bi->data.data() + static_cast<std::size_t>(l) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<std::size_t>(i) * k + l] += acc;
                    }
            }
            if (bi->requires_grad) {
                auto& gb = adjoint_buffer(*bi);
                for (int i = 0; i < m; ++i) {
                    const double* arow = ai->data.data() + static_cast<std::size_t>(i) * k;
                    const double* grow = g.data() + static_cast<std::size_t>(i) * n;
                    for (int l = 0; l < k; ++l) {
                        const double av = arow[l];
                        if (av == 0.0) continue;
                        double* gbrow = gb.data() + static_cast<std::size_t>(l) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    check_defined(a, "transpose");
    if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, m, n] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[static_cast<std::size_t>(i) * n + j] += oi->adjoint[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape s) {
    check_defined(a, "reshape");
    if (numel_of(s) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
    Tensor out = Tensor::from(std::move(s), a.data());
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->adjoint[i];
        });
    }
    return out;
}

Tensor narrow(const Tensor& a, int axis, int start, int len) {
    check_defined(a, "narrow");
    if (axis < 0 || axis >= a.ndim()) throw DimensionError("narrow: bad axis");
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw DimensionError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") exceeds dim " + std::to_string(a.dim(axis)));
    const AxisSpan sp = axis_span(a.shape(), axis);
    Shape os = a.shape();
    os[static_cast<std::size_t>(axis)] = len;
    Tensor out = Tensor::zeros(os);
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (int i = 0; i < len; ++i) {
            const double* src = a.data().data() + ((o * sp.n) + start + i) * sp.inner;
            double* dst = out.data().data() + ((o * len) + i) * sp.inner;
            std::copy(src, src + sp.inner, dst);
        }
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, sp, start, len] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (int i = 0; i < len; ++i) {
                    const double* src = oi->adjoint.data() + ((o * len) + i) * sp.inner;
                    double* dst = ga.data() + ((o * sp.n) + start + i) * sp.inner;
                    for (std::int64_t t = 0; t < sp.inner; ++t) dst[t] += src[t];
                }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw UsageError("concat: no operands");
    for (const Tensor& p : parts) check_defined(p, "concat");
    const int nd = parts[0].ndim();
    if (axis < 0 || axis >= nd) throw DimensionError("concat: bad axis");
    Shape os = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != nd) throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && p.dim(i) != os[static_cast<std::size_t>(i)])
                throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(os));
        total += p.dim(axis);
    }
    os[static_cast<std::size_t>(axis)] = total;
    Tensor out = Tensor::zeros(os);
    const AxisSpan sp = axis_span(os, axis);

    bool rec = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) rec = true;
    rec = rec && Graph::active() != nullptr;

    std::vector<int> offsets;
    int off = 0;
    for (const Tensor& p : parts) {
        const int len = p.dim(axis);
        for (std::int64_t o = 0; o < sp.outer; ++o)
            for (int i = 0; i < len; ++i) {
                const double* src = p.data().data() + ((o * len) + i) * sp.inner;
                double* dst = out.data().data() + ((o * sp.n) + off + i) * sp.inner;
                std::copy(src, src + sp.inner, dst);
            }
        offsets.push_back(off);
        off += len;
    }
    if (rec) {
        std::vector<std::shared_ptr<TensorImpl>> ins;
        for (const Tensor& p : parts) ins.push_back(p.impl);
        auto oi = out.impl;
        auto parts_impl = ins;
        record(out, std::move(ins), [parts_impl, oi, sp, offsets] {
            if (oi->adjoint.empty()) return;
            for (std::size_t pidx = 0; pidx < parts_impl.size(); ++pidx) {
                auto& pi = parts_impl[pidx];
                if (!pi->requires_grad) continue;
                auto& gp = adjoint_buffer(*pi);
                const int len = static_cast<int>(pi->data.size() / (sp.outer * sp.inner));
                for (std::int64_t o = 0; o < sp.outer; ++o)
                    for (int i = 0; i < len; ++i) {
                        const double* src = oi->adjoint.data() + ((o * sp.n) + offsets[pidx] + i) * sp.inner;
                        double* dst = gp.data() + ((o * len) + i) * sp.inner;
                        for (std::int64_t t = 0; t < sp.inner; ++t) dst[t] += src[t];
                    }
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (double& v : ga) v += oi->adjoint[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(acc * inv_n);
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, inv_n] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (double& v : ga) v += oi->adjoint[0] * inv_n;
        });
    }
    return out;
}

Tensor mean_spatial(const Tensor& a) {
    check_defined(a, "mean_spatial");
    if (a.ndim() != 3) throw DimensionError("mean_spatial: expected [C,H,W], got " + shape_str(a.shape()));
    const int c = a.dim(0), hw = a.dim(1) * a.dim(2);
    const double inv = 1.0 / hw;
    Tensor out = Tensor::zeros({c});
    for (int i = 0; i < c; ++i) {
        double acc = 0.0;
        const double* p = a.data().data() + static_cast<std::size_t>(i) * hw;
        for (int t = 0; t < hw; ++t) acc += p[t];
        out.data()[static_cast<std::size_t>(i)] = acc * inv;
    }
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, c, hw, inv] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (int i = 0; i < c; ++i) {
                double g = oi->adjoint[static_cast<std::size_t>(i)] * inv;
                double* p = ga.data() + static_cast<std::size_t>(i) * hw;
                for (int t = 0; t < hw; ++t) p[t] += g;
            }
        });
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    check_defined(x, "conv2d");
    check_defined(w, "conv2d");
    if (x.ndim() != 3 || w.ndim() != 4)
        throw DimensionError("conv2d: expected x[C,H,W], w[Co,Ci,kh,kw], got " + shape_str(x.shape()) + ", " + shape_str(w.shape()));
    if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be >=1, padding >=0");
    const int ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci) throw DimensionError("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " + std::to_string(ci));
    const int oh_num = h + 2 * padding - kh;
    const int ow_num = ww + 2 * padding - kw;
    if (oh_num < 0 || ow_num < 0 || oh_num % stride != 0 || ow_num % stride != 0)
        throw ConfigError("conv2d: output size is not a positive integer for input " + shape_str(x.shape()) +
                          ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                          ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
    const int oh = oh_num / stride + 1, ow = ow_num / stride + 1;

    Tensor out = Tensor::zeros({co, oh, ow});
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    double* op = out.data().data();
    for (int c = 0; c < co; ++c)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= h) continue;
                        const double* xrow = xp + (static_cast<std::size_t>(ic) * h + iy) * ww;
                        const double* wrow = wp + ((static_cast<std::size_t>(c) * ci + ic) * kh + ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - padding;
                            if (ix < 0 || ix >= ww) continue;
                            acc += xrow[ix] * wrow[kx];
                        }
                    }
                op[(static_cast<std::size_t>(c) * oh + oy) * ow + ox] = acc;
            }
    if (recording({&x, &w})) {
        auto xi = x.impl, wi = w.impl, oi = out.impl;
        record(out, {xi, wi}, [xi, wi, oi, ci, h, ww, co, kh, kw, oh, ow, stride, padding] {
            if (oi->adjoint.empty()) return;
            const bool need_x = xi->requires_grad;
            const bool need_w = wi->requires_grad;
            double* gx = need_x ? adjoint_buffer(*xi).data() : nullptr;
            double* gw = need_w ? adjoint_buffer(*wi).data() : nullptr;
            const double* g = oi->adjoint.data();
            for (int c = 0; c < co; ++c)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const double go = g[(static_cast<std::size_t>(c) * oh + oy) * ow + ox];
                        if (go == 0.0) continue;
                        for (int ic = 0; ic < ci; ++ic)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= h) continue;
                                const std::size_t xbase = (static_cast<std::size_t>(ic) * h + iy) * ww;
                                const std::size_t wbase = ((static_cast<std::size_t>(c) * ci + ic) * kh + ky) * kw;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * stride + kx - padding;
                                    if (ix < 0 || ix >= ww) continue;
                                    if (need_x) gx[xbase + ix] += go * wi->data[wbase + kx];
                                    if (need_w) gw[wbase + kx] += go * xi->data[xbase + ix];
                                }
                            }
                    }
        });
    }
    return out;
}

Tensor bias_chw(const Tensor& x, const Tensor& b) {
    check_defined(x, "bias_chw");
    check_defined(b, "bias_chw");
    if (x.ndim() != 3 || b.ndim() != 1 || b.dim(0) != x.dim(0))
        throw DimensionError("bias_chw: expected x[C,H,W] + b[C], got " + shape_str(x.shape()) + ", " + shape_str(b.shape()));
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < c; ++i) {
        const double bv = b.data()[static_cast<std::size_t>(i)];
        const double* xp = x.data().data() + static_cast<std::size_t>(i) * hw;
        double* op = out.data().data() + static_cast<std::size_t>(i) * hw;
        for (int t = 0; t < hw; ++t) op[t] = xp[t] + bv;
    }
    if (recording({&x, &b})) {
        auto xi = x.impl, bi = b.impl, oi = out.impl;
        record(out, {xi, bi}, [xi, bi, oi, c, hw] {
            if (oi->adjoint.empty()) return;
            const double* g = oi->adjoint.data();
            if (xi->requires_grad) {
                auto& gx = adjoint_buffer(*xi);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = adjoint_buffer(*bi);
                for (int i = 0; i < c; ++i) {
                    double acc = 0.0;
                    const double* gp = g + static_cast<std::size_t>(i) * hw;
                    for (int t = 0; t < hw; ++t) acc += gp[t];
                    gb[static_cast<std::size_t>(i)] += acc;
                }
            }
        });
    }
    return out;
}

Tensor max_pool2d(const Tensor& x, int window, int stride) {
    check_defined(x, "max_pool2d");
    if (x.ndim() != 3) throw DimensionError("max_pool2d: expected [C,H,W], got " + shape_str(x.shape()));
    if (window != stride) throw ConfigError("max_pool2d: only non-overlapping pooling (window == stride) is supported");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % stride != 0 || w % stride != 0)
        throw ConfigError("max_pool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by stride " + std::to_string(stride));
    const int oh = h / stride, ow = w / stride;
    Tensor out = Tensor::zeros({c, oh, ow});
    std::vector<std::int32_t> argmax(static_cast<std::size_t>(c) * oh * ow);
    for (int ic = 0; ic < c; ++ic)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::int32_t best_idx = -1;
                for (int ky = 0; ky < window; ++ky)
                    for (int kx = 0; kx < window; ++kx) {
                        const int iy = oy * stride + ky, ix = ox * stride + kx;
                        const std::size_t idx = (static_cast<std::size_t>(ic) * h + iy) * w + ix;
                        // strict > keeps the first (row-major) position on ties
                        if (x.data()[idx] > best) {
                            best = x.data()[idx];
                            best_idx = static_cast<std::int32_t>(idx);
                        }
                    }
                const std::size_t oidx = (static_cast<std::size_t>(ic) * oh + oy) * ow + ox;
                out.data()[oidx] = best;
                argmax[oidx] = best_idx;
            }
    if (recording({&x})) {
        auto xi = x.impl, oi = out.impl;
        record(out, {xi}, [xi, oi, argmax = std::move(argmax)] {
            if (oi->adjoint.empty()) return;
            auto& gx = adjoint_buffer(*xi);
            for (std::size_t i = 0; i < argmax.size(); ++i) gx[static_cast<std::size_t>(argmax[i])] += oi->adjoint[i];
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    check_defined(x, "add_rowvec");
    check_defined(b, "add_rowvec");
    if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.dim(1))
        throw DimensionError("add_rowvec: expected [N,D] + [D], got " + shape_str(x.shape()) + ", " + shape_str(b.shape()));
    const int n = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.data()[static_cast<std::size_t>(i) * d + j] = x.data()[static_cast<std::size_t>(i) * d + j] + b.data()[static_cast<std::size_t>(j)];
    if (recording({&x, &b})) {
        auto xi = x.impl, bi = b.impl, oi = out.impl;
        record(out, {xi, bi}, [xi, bi, oi, n, d] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (xi->requires_grad) {
                auto& gx = adjoint_buffer(*xi);
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
            }
            if (bi->requires_grad) {
                auto& gb = adjoint_buffer(*bi);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * d + j];
            }
        });
    }
    return out;
}

Tensor mul_chan(const Tensor& x, const Tensor& m) {
    check_defined(x, "mul_chan");
    check_defined(m, "mul_chan");
    if (x.ndim() != 3 || m.ndim() != 3 || m.dim(0) != 1 || m.dim(1) != x.dim(1) || m.dim(2) != x.dim(2))
        throw DimensionError("mul_chan: expected x[C,H,W] * m[1,H,W], got " + shape_str(x.shape()) + ", " + shape_str(m.shape()));
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < c; ++i)
        for (int t = 0; t < hw; ++t)
            out.data()[static_cast<std::size_t>(i) * hw + t] = x.data()[static_cast<std::size_t>(i) * hw + t] * m.data()[static_cast<std::size_t>(t)];
    if (recording({&x, &m})) {
        auto xi = x.impl, mi = m.impl, oi = out.impl;
        record(out, {xi, mi}, [xi, mi, oi, c, hw] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (xi->requires_grad) {
                auto& gx = adjoint_buffer(*xi);
                for (int i = 0; i < c; ++i)
                    for (int t = 0; t < hw; ++t) gx[static_cast<std::size_t>(i) * hw + t] += g[static_cast<std::size_t>(i) * hw + t] * mi->data[static_cast<std::size_t>(t)];
            }
            if (mi->requires_grad) {
                auto& gm = adjoint_buffer(*mi);
                for (int i = 0; i < c; ++i)
                    for (int t = 0; t < hw; ++t) gm[static_cast<std::size_t>(t)] += g[static_cast<std::size_t>(i) * hw + t] * xi->data[static_cast<std::size_t>(i) * hw + t];
            }
        });
    }
    return out;
}

Tensor detach(const Tensor& a) {
    check_defined(a, "detach");
    Tensor out = Tensor::from(a.shape(), a.data());
    out.impl->requires_grad = false;
    return out;
}

namespace {

Tensor keep_topk_impl(const Tensor& a, int keep, bool per_row) {
    const char* ctx = per_row ? "keep_topk_rows" : "keep_topk_cols";
    if (a.ndim() != 2) throw DimensionError(std::string(ctx) + ": expected 2-D tensor, got " + shape_str(a.shape()));
    const int n = a.dim(0), m = a.dim(1);
    const int lane_len = per_row ? m : n;
    if (keep < 1 || keep > lane_len) throw ConfigError(std::string(ctx) + ": keep " + std::to_string(keep) + " out of range [1," + std::to_string(lane_len) + "]");
    const int lanes = per_row ? n : m;
    const int stride = per_row ? 1 : m;

    Tensor out = Tensor::zeros(a.shape());
    std::vector<std::uint8_t> mask(a.data().size(), 0);
    for (int l = 0; l < lanes; ++l) {
        const std::size_t base = per_row ? static_cast<std::size_t>(l) * m : static_cast<std::size_t>(l);
        auto idx = topk_indices(a.data().data() + base, lane_len, stride, keep);
        for (int i : idx) {
            const std::size_t pos = base + static_cast<std::size_t>(i) * stride;
            out.data()[pos] = a.data()[pos];
            mask[pos] = 1;
        }
    }
    if (recording({&a})) {
        auto ai = a.impl, oi = out.impl;
        record(out, {ai}, [ai, oi, mask = std::move(mask)] {
            if (oi->adjoint.empty()) return;
            auto& ga = adjoint_buffer(*ai);
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (mask[i]) ga[i] += oi->adjoint[i];
        });
    }
    return out;
}

}  // namespace

Tensor keep_topk_rows(const Tensor& a, int keep) {
    check_defined(a, "keep_topk_rows");
    return keep_topk_impl(a, keep, true);
}

Tensor keep_topk_cols(const Tensor& a, int keep) {
    check_defined(a, "keep_topk_cols");
    return keep_topk_impl(a, keep, false);
}

Tensor col_mask_mul(const Tensor& a, const Tensor& m) {
    check_defined(a, "col_mask_mul");
    check_defined(m, "col_mask_mul");
    if (a.ndim() != 2 || m.ndim() != 1 || m.dim(0) != a.dim(1))
        throw DimensionError("col_mask_mul: expected [N,M] * [M], got " + shape_str(a.shape()) + ", " + shape_str(m.shape()));
    const int n = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros(a.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < cols; ++j)
            out.data()[static_cast<std::size_t>(i) * cols + j] = a.data()[static_cast<std::size_t>(i) * cols + j] * m.data()[static_cast<std::size_t>(j)];
    if (recording({&a, &m})) {
        auto ai = a.impl, mi = m.impl, oi = out.impl;
        record(out, {ai, mi}, [ai, mi, oi, n, cols] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (ai->requires_grad) {
                auto& ga = adjoint_buffer(*ai);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < cols; ++j) ga[static_cast<std::size_t>(i) * cols + j] += g[static_cast<std::size_t>(i) * cols + j] * mi->data[static_cast<std::size_t>(j)];
            }
            if (mi->requires_grad) {
                auto& gm = adjoint_buffer(*mi);
                for (int j = 0; j < cols; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) acc += g[static_cast<std::size_t>(i) * cols + j] * ai->data[static_cast<std::size_t>(i) * cols + j];
                    gm[static_cast<std::size_t>(j)] += acc;
                }
            }
        });
    }
    return out;
}

Tensor col_mask_ste(const Tensor& a, const Tensor& logits) {
    check_defined(a, "col_mask_ste");
    check_defined(logits, "col_mask_ste");
    if (a.ndim() != 2 || logits.ndim() != 1 || logits.dim(0) != a.dim(1))
        throw DimensionError("col_mask_ste: expected [N,M] with logits [M], got " + shape_str(a.shape()) + ", " + shape_str(logits.shape()));
    const int n = a.dim(0), cols = a.dim(1);
    std::vector<double> sig(static_cast<std::size_t>(cols));
    std::vector<double> hard(static_cast<std::size_t>(cols));
    for (int j = 0; j < cols; ++j) {
        sig[static_cast<std::size_t>(j)] = 1.0 / (1.0 + std::exp(-logits.data()[static_cast<std::size_t>(j)]));
        hard[static_cast<std::size_t>(j)] = sig[static_cast<std::size_t>(j)] > 0.5 ? 1.0 : 0.0;
    }
    Tensor out = Tensor::zeros(a.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < cols; ++j)
            out.data()[static_cast<std::size_t>(i) * cols + j] = hard[static_cast<std::size_t>(j)] * a.data()[static_cast<std::size_t>(i) * cols + j];
    if (recording({&a, &logits})) {
        auto ai = a.impl, li = logits.impl, oi = out.impl;
        record(out, {ai, li}, [ai, li, oi, n, cols, sig = std::move(sig), hard = std::move(hard)] {
            if (oi->adjoint.empty()) return;
            const auto& g = oi->adjoint;
            if (ai->requires_grad) {
                auto& ga = adjoint_buffer(*ai);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < cols; ++j) ga[static_cast<std::size_t>(i) * cols + j] += g[static_cast<std::size_t>(i) * cols + j] * hard[static_cast<std::size_t>(j)];
            }
            if (li->requires_grad) {
                // straight-through: d(mask_j) treated as d(sigmoid(logit_j))
                auto& gl = adjoint_buffer(*li);
                for (int j = 0; j < cols; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) acc += g[static_cast<std::size_t>(i) * cols + j] * ai->data[static_cast<std::size_t>(i) * cols + j];
                    const double s = sig[static_cast<std::size_t>(j)];
                    gl[static_cast<std::size_t>(j)] += acc * s * (1.0 - s);
                }
            }
        });
    }
    return out;
}

Tensor topk_col_sum(const Tensor& p, int k) {
    check_defined(p, "topk_col_sum");
    if (p.ndim() != 2) throw DimensionError("topk_col_sum: expected 2-D tensor, got " + shape_str(p.shape()));
    const int n = p.dim(0), m = p.dim(1);
    if (k < 1 || k > n) throw ConfigError("topk_col_sum: k " + std::to_string(k) + " out of range [1," + std::to_string(n) + "]");
    Tensor out = Tensor::zeros({m});
    std::vector<std::int32_t> sel(static_cast<std::size_t>(m) * k);
    for (int j = 0; j < m; ++j) {
        auto idx = topk_indices(p.data().data() + j, n, m, k);
        double acc = 0.0;
        for (int t = 0; t < k; ++t) {
            acc += p.data()[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)]) * m + j];
            sel[static_cast<std::size_t>(j) * k + t] = idx[static_cast<std::size_t>(t)];
        }
        out.data()[static_cast<std::size_t>(j)] = acc;
    }
    if (recording({&p})) {
        auto pi = p.impl, oi = out.impl;
        record(out, {pi}, [pi, oi, m, k, sel = std::move(sel)] {
            if (oi->adjoint.empty()) return;
            auto& gp = adjoint_buffer(*pi);
            for (int j = 0; j < m; ++j) {
                const double g = oi->adjoint[static_cast<std::size_t>(j)];
                for (int t = 0; t < k; ++t) gp[static_cast<std::size_t>(sel[static_cast<std::size_t>(j) * k + t]) * m + j] += g;
            }
        });
    }
    return out;
}

}  // namespace aunet::ops
