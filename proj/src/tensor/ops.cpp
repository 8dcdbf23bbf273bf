#include "npm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "blas.hpp"
#include "parallel.hpp"

namespace npm {

namespace {

template <typename T>
using Tensor_ = BasicTensor<T>;

template <typename T>
Tape<T>& tape() {
    return *Tape<T>::active();
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;
    bool same = false;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    auto in_strides = contiguous_strides(in);
    std::size_t offset = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        strides[offset + i] = in[i] == 1 ? 0 : in_strides[i];
    }
    return strides;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    BroadcastPlan p;
    p.out = broadcast_shapes(a, b);
    p.same = a == b;
    if (!p.same) {
        p.stride_a = aligned_strides(a, p.out);
        p.stride_b = aligned_strides(b, p.out);
    }
    return p;
}

/// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
    const std::size_t n = numel(p.out);
    if (p.same) {
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
        return;
    }
    const std::size_t rank = p.out.size();
    std::vector<std::size_t> ctr(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
        fn(o, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            ++ctr[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (ctr[d] < p.out[d]) break;
            ia -= p.stride_a[d] * p.out[d];
            ib -= p.stride_b[d] * p.out[d];
            ctr[d] = 0;
        }
    }
}

template <typename T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_derivative(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
    return cdf + x * pdf;
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

/// Unary map with derivative expressed through input and output values.
template <typename T, typename F, typename D>
Tensor_<T> unary(std::string_view name, const Tensor_<T>& x, F&& f, D&& dfdx) {
    auto xs = x.data();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
    Tensor_<T> y(x.shape(), std::move(out));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        auto yn = y.node();
        tape<T>().record(name, y, [xn, yn, dfdx](std::span<const T> g) {
            if (!xn->requires_grad) return;
            T* gx = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xn->data[i], yn->data[i]);
        });
    }
    return y;
}

struct Axis3 {
    std::size_t outer, n, inner;
};

Axis3 split_axis(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
    }
    Axis3 r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary elementwise

namespace {

template <typename T>
Tensor_<T> binary(ElementwiseKind kind, const Tensor_<T>& a, const Tensor_<T>& b) {
    auto plan = plan_broadcast(a.shape(), b.shape());
    auto as = a.data();
    auto bs = b.data();
    std::vector<T> out(numel(plan.out));
    switch (kind) {
        case ElementwiseKind::add:
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = as[i] + bs[j]; });
            break;
        case ElementwiseKind::sub:
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = as[i] - bs[j]; });
            break;
        case ElementwiseKind::mul:
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = as[i] * bs[j]; });
            break;
        case ElementwiseKind::div:
            for (auto v : bs) {
                if (v == T(0)) throw DomainError("division by zero in elementwise div");
            }
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = as[i] / bs[j]; });
            break;
        default:
            throw Error("not a binary elementwise kind");
    }
    Tensor_<T> y(plan.out, std::move(out));
    if (Tape<T>::should_record({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        static constexpr std::string_view names[] = {"add", "sub", "mul", "div"};
        tape<T>().record(names[static_cast<int>(kind)], y, [an, bn, plan, kind](std::span<const T> g) {
            T* ga = an->requires_grad ? an->grad_buffer() : nullptr;
            T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
            const auto& av = an->data;
            const auto& bv = bn->data;
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                switch (kind) {
                    case ElementwiseKind::add:
                        if (ga) ga[i] += g[o];
                        if (gb) gb[j] += g[o];
                        break;
                    case ElementwiseKind::sub:
                        if (ga) ga[i] += g[o];
                        if (gb) gb[j] -= g[o];
                        break;
                    case ElementwiseKind::mul:
                        if (ga) ga[i] += g[o] * bv[j];
                        if (gb) gb[j] += g[o] * av[i];
                        break;
                    default:
                        if (ga) ga[i] += g[o] / bv[j];
                        if (gb) gb[j] -= g[o] * av[i] / (bv[j] * bv[j]);
                        break;
                }
            });
        });
    }
    return y;
}

}  // namespace

template <typename T>
Tensor_<T> elementwise(ElementwiseKind kind, const Tensor_<T>& a, const std::optional<Tensor_<T>>& b) {
    switch (kind) {
        case ElementwiseKind::add:
        case ElementwiseKind::sub:
        case ElementwiseKind::mul:
        case ElementwiseKind::div:
            if (!b) throw ShapeError("binary elementwise op requires a second operand");
            return binary(kind, a, *b);
        case ElementwiseKind::exp:
            return npm::exp(a);
        case ElementwiseKind::log:
            return npm::log(a);
        case ElementwiseKind::gelu:
            return npm::gelu(a);
        case ElementwiseKind::sigmoid:
            return npm::sigmoid(a);
    }
    throw Error("unknown elementwise kind");
}

template <typename T>
Tensor_<T> add(const Tensor_<T>& a, const Tensor_<T>& b) { return binary(ElementwiseKind::add, a, b); }
template <typename T>
Tensor_<T> sub(const Tensor_<T>& a, const Tensor_<T>& b) { return binary(ElementwiseKind::sub, a, b); }
template <typename T>
Tensor_<T> mul(const Tensor_<T>& a, const Tensor_<T>& b) { return binary(ElementwiseKind::mul, a, b); }
template <typename T>
Tensor_<T> div(const Tensor_<T>& a, const Tensor_<T>& b) { return binary(ElementwiseKind::div, a, b); }

// ---------------------------------------------------------------------------
// Unary elementwise

template <typename T>
Tensor_<T> exp(const Tensor_<T>& x) {
    return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor_<T> log(const Tensor_<T>& x) {
    for (auto v : x.data()) {
        if (!(v > T(0))) throw DomainError("log of non-positive value " + std::to_string(v));
    }
    return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor_<T> gelu(const Tensor_<T>& x) {
    return unary<T>("gelu", x, [](T v) { return gelu_scalar(v); }, [](T v, T) { return gelu_derivative(v); });
}

template <typename T>
Tensor_<T> sigmoid(const Tensor_<T>& x) {
    return unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor_<T> neg(const Tensor_<T>& x) {
    return unary<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor_<T> scale(const Tensor_<T>& x, T factor) {
    return unary<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor_<T> add_scalar(const Tensor_<T>& x, T value) {
    return unary<T>("add_scalar", x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor_<T> square(const Tensor_<T>& x) {
    return unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor_<T> clamp(const Tensor_<T>& x, T lo, T hi) {
    if (lo > hi) throw ConfigError("clamp bounds inverted");
    return unary<T>(
        "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Matmul

namespace {

}  // namespace

template <typename T>
Tensor_<T> matmul(const Tensor_<T>& a, const Tensor_<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects 2-D operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    detail::gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(), n);
    Tensor_<T> y(Shape{m, n}, std::move(out));
    if (Tape<T>::should_record({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        tape<T>().record("matmul", y, [an, bn, m, k, n](std::span<const T> g) {
            if (an->requires_grad) {  // g[m x n] * b^T
                detail::gemm(false, true, m, k, n, T(1), g.data(), n, bn->data.data(), n, T(1), an->grad_buffer(), k);
            }
            if (bn->requires_grad) {  // a^T * g
                detail::gemm(true, false, k, n, m, T(1), an->data.data(), k, g.data(), n, T(1), bn->grad_buffer(), n);
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolution

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                               std::size_t dilation) {
    if (stride == 0 || dilation == 0 || kernel == 0) {
        throw ConfigError("convolution stride, dilation and kernel must be positive");
    }
    const long long span = static_cast<long long>(dilation) * (static_cast<long long>(kernel) - 1) + 1;
    const long long avail = static_cast<long long>(in) + 2 * static_cast<long long>(pad) - span;
    if (avail < 0) {
        throw ConfigError("convolution leaves no output: input extent " + std::to_string(in) + ", padding " +
                          std::to_string(pad) + ", kernel " + std::to_string(kernel) + ", dilation " +
                          std::to_string(dilation));
    }
    return static_cast<std::size_t>(avail) / stride + 1;
}

namespace {

struct ConvGeom {
    std::size_t n, c, h, w;       // input
    std::size_t o, kh, kw;        // kernel
    std::size_t ho, wo;           // output
    std::size_t groups, cg, og;   // channels per group (in/out)
    Conv2dOptions opt;

    /// Range of output columns whose input column ow*stride + off is in bounds.
    std::pair<std::size_t, std::size_t> col_range(long long off) const {
        const long long sw = static_cast<long long>(opt.stride[1]);
        long long lo = off >= 0 ? 0 : (-off + sw - 1) / sw;
        long long hi_excl = (static_cast<long long>(w) - 1 - off);
        hi_excl = hi_excl < 0 ? 0 : hi_excl / sw + 1;
        hi_excl = std::min<long long>(hi_excl, static_cast<long long>(wo));
        if (lo > hi_excl) lo = hi_excl;
        return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi_excl)};
    }
};

/// Visits every (output row, input row, column range, column offset) pair
/// touched by kernel tap (ki, kj).
template <typename Fn>
void for_each_tap_row(const ConvGeom& g, std::size_t ki, std::size_t kj, Fn&& fn) {
    const long long off_c = static_cast<long long>(kj * g.opt.dilation[1]) - static_cast<long long>(g.opt.padding[1]);
    auto [lo, hi] = g.col_range(off_c);
    if (lo >= hi) return;
    for (std::size_t oh = 0; oh < g.ho; ++oh) {
        const long long ih = static_cast<long long>(oh * g.opt.stride[0] + ki * g.opt.dilation[0]) -
                             static_cast<long long>(g.opt.padding[0]);
        if (ih < 0 || ih >= static_cast<long long>(g.h)) continue;
        fn(oh, static_cast<std::size_t>(ih), lo, hi, off_c);
    }
}

bool is_pointwise(const ConvGeom& g) {
    return g.kh == 1 && g.kw == 1 && g.opt.stride[0] == 1 && g.opt.stride[1] == 1 && g.opt.padding[0] == 0 &&
           g.opt.padding[1] == 0;
}

// cols[(c, ki, kj) x (oh, ow)] = x[c, oh*s + ki*d - p, ow*s + kj*d - p], zero outside.
template <typename T>
void im2col(const ConvGeom& g, const T* xin, T* cols) {
    const std::size_t hw = g.ho * g.wo, sw = g.opt.stride[1];
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
                std::fill(row, row + hw, T(0));
                const T* plane = xin + c * g.h * g.w;
                for_each_tap_row(g, ki, kj, [&](std::size_t oh, std::size_t ih, std::size_t lo, std::size_t hi,
                                                long long off) {
                    const T* xrow = plane + ih * g.w;
                    T* r = row + oh * g.wo;
                    for (std::size_t ow = lo; ow < hi; ++ow) r[ow] = xrow[static_cast<long long>(ow * sw) + off];
                });
            }
}

template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* gx) {
    const std::size_t hw = g.ho * g.wo, sw = g.opt.stride[1];
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
                T* plane = gx + c * g.h * g.w;
                for_each_tap_row(g, ki, kj, [&](std::size_t oh, std::size_t ih, std::size_t lo, std::size_t hi,
                                                long long off) {
                    T* xrow = plane + ih * g.w;
                    const T* r = row + oh * g.wo;
                    for (std::size_t ow = lo; ow < hi; ++ow) xrow[static_cast<long long>(ow * sw) + off] += r[ow];
                });
            }
}

template <typename T>
void conv_bias_grad(const ConvGeom& g, const T* gs, T* gb) {
    for (std::size_t ni = 0; ni < g.n; ++ni)
        for (std::size_t oc = 0; oc < g.o; ++oc) {
            const T* gp = gs + (ni * g.o + oc) * g.ho * g.wo;
            T acc = 0;
            for (std::size_t i = 0; i < g.ho * g.wo; ++i) acc += gp[i];
            gb[oc] += acc;
        }
}

// Dense (groups == 1) convolution as one GEMM per sample.
template <typename T>
Tensor_<T> conv2d_gemm(const Tensor_<T>& x, const Tensor_<T>& weight, const Tensor_<T>& bias, const ConvGeom& g) {
    const std::size_t hw = g.ho * g.wo, ckk = g.c * g.kh * g.kw, in_plane = g.c * g.h * g.w;
    const bool pw = is_pointwise(g);
    std::vector<T> out(g.n * g.o * hw);
    std::vector<T> cols(pw ? 0 : ckk * hw);
    const T* xs = x.data().data();
    const T* ws = weight.data().data();
    for (std::size_t ni = 0; ni < g.n; ++ni) {
        T* yo = out.data() + ni * g.o * hw;
        T beta = T(0);
        if (bias.valid()) {
            const T* bs = bias.data().data();
            for (std::size_t oc = 0; oc < g.o; ++oc) std::fill(yo + oc * hw, yo + (oc + 1) * hw, bs[oc]);
            beta = T(1);
        }
        const T* src = xs + ni * in_plane;
        if (!pw) {
            im2col(g, src, cols.data());
            src = cols.data();
        }
        detail::gemm(false, false, g.o, hw, ckk, T(1), ws, ckk, src, hw, beta, yo, hw);
    }
    Tensor_<T> y(Shape{g.n, g.o, g.ho, g.wo}, std::move(out));
    if (Tape<T>::should_record({&x, &weight, &bias})) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.valid() ? bias.node() : nullptr;
        tape<T>().record("conv2d", y, [xn, wn, bn, g, pw, hw, ckk, in_plane](std::span<const T> gout) {
            if (bn && bn->requires_grad) conv_bias_grad(g, gout.data(), bn->grad_buffer());
            std::vector<T> buf(pw ? 0 : ckk * hw);
            for (std::size_t ni = 0; ni < g.n; ++ni) {
                const T* go = gout.data() + ni * g.o * hw;
                if (wn->requires_grad) {
                    const T* src = xn->data.data() + ni * in_plane;
                    if (!pw) {
                        im2col(g, src, buf.data());
                        src = buf.data();
                    }
                    detail::gemm(false, true, g.o, ckk, hw, T(1), go, hw, src, hw, T(1), wn->grad_buffer(), ckk);
                }
                if (xn->requires_grad) {
                    T* gx = xn->grad_buffer() + ni * in_plane;
                    if (pw) {
                        detail::gemm(true, false, ckk, hw, g.o, T(1), wn->data.data(), ckk, go, hw, T(1), gx, hw);
                    } else {
                        detail::gemm(true, false, ckk, hw, g.o, T(1), wn->data.data(), ckk, go, hw, T(0),
                                     buf.data(), hw);
                        col2im(g, buf.data(), gx);
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace

template <typename T>
Tensor_<T> conv2d(const Tensor_<T>& x, const Tensor_<T>& weight, const Tensor_<T>& bias,
                  const Conv2dOptions& options) {
    if (x.rank() != 4 || weight.rank() != 4) {
        throw ShapeError("conv2d expects 4-D input and weight, got " + to_string(x.shape()) + " and " +
                         to_string(weight.shape()));
    }
    ConvGeom g{};
    g.opt = options;
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.o = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.groups = options.groups;
    if (g.groups == 0 || g.c % g.groups != 0 || g.o % g.groups != 0) {
        throw ConfigError("conv2d: channels " + std::to_string(g.c) + " -> " + std::to_string(g.o) +
                          " not divisible by groups " + std::to_string(g.groups));
    }
    g.cg = g.c / g.groups;
    g.og = g.o / g.groups;
    if (weight.dim(1) != g.cg) {
        throw ShapeError("conv2d weight " + to_string(weight.shape()) + " does not match input " +
                         to_string(x.shape()) + " with groups " + std::to_string(g.groups));
    }
    if (bias.valid() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
        throw ShapeError("conv2d bias " + to_string(bias.shape()) + " does not match " + std::to_string(g.o) +
                         " output channels");
    }
    g.ho = conv_output_extent(g.h, g.kh, options.stride[0], options.padding[0], options.dilation[0]);
    g.wo = conv_output_extent(g.w, g.kw, options.stride[1], options.padding[1], options.dilation[1]);
    if (g.groups == 1) return conv2d_gemm(x, weight, bias, g);

    const std::size_t sw = options.stride[1];
    std::vector<T> out(g.n * g.o * g.ho * g.wo, T(0));
    const T* xs = x.data().data();
    const T* ws = weight.data().data();
    const T* bs = bias.valid() ? bias.data().data() : nullptr;

    detail::parallel_for(g.n * g.o, [&](std::size_t idx) {
        const std::size_t ni = idx / g.o, oc = idx % g.o;
        const std::size_t grp = oc / g.og;
        T* plane = out.data() + idx * g.ho * g.wo;
        if (bs) std::fill(plane, plane + g.ho * g.wo, bs[oc]);
        for (std::size_t ci = 0; ci < g.cg; ++ci) {
            const std::size_t c = grp * g.cg + ci;
            const T* xin = xs + (ni * g.c + c) * g.h * g.w;
            const T* wk = ws + (oc * g.cg + ci) * g.kh * g.kw;
            for (std::size_t ki = 0; ki < g.kh; ++ki)
                for (std::size_t kj = 0; kj < g.kw; ++kj) {
                    const T wv = wk[ki * g.kw + kj];
                    if (wv == T(0)) continue;
                    for_each_tap_row(g, ki, kj, [&](std::size_t oh, std::size_t ih, std::size_t lo, std::size_t hi,
                                                    long long off) {
                        T* orow = plane + oh * g.wo;
                        const T* xrow = xin + ih * g.w;
                        if (sw == 1) {
                            const T* src = xrow + off;
                            for (std::size_t ow = lo; ow < hi; ++ow) orow[ow] += wv * src[ow];
                        } else {
                            for (std::size_t ow = lo; ow < hi; ++ow)
                                orow[ow] += wv * xrow[static_cast<long long>(ow * sw) + off];
                        }
                    });
                }
        }
    });

    Tensor_<T> y(Shape{g.n, g.o, g.ho, g.wo}, std::move(out));
    if (Tape<T>::should_record({&x, &weight, &bias})) {
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.valid() ? bias.node() : nullptr;
        tape<T>().record("conv2d", y, [xn, wn, bn, g](std::span<const T> gout) {
            const std::size_t sw = g.opt.stride[1];
            const T* gs = gout.data();
            if (bn && bn->requires_grad) {
                T* gb = bn->grad_buffer();
                for (std::size_t ni = 0; ni < g.n; ++ni)
                    for (std::size_t oc = 0; oc < g.o; ++oc) {
                        const T* gp = gs + (ni * g.o + oc) * g.ho * g.wo;
                        T acc = 0;
                        for (std::size_t i = 0; i < g.ho * g.wo; ++i) acc += gp[i];
                        gb[oc] += acc;
                    }
            }
            if (wn->requires_grad) {
                T* gw = wn->grad_buffer();
                const T* xs = xn->data.data();
                detail::parallel_for(g.o, [&](std::size_t oc) {
                    const std::size_t grp = oc / g.og;
                    for (std::size_t ni = 0; ni < g.n; ++ni) {
                        const T* gp = gs + (ni * g.o + oc) * g.ho * g.wo;
                        for (std::size_t ci = 0; ci < g.cg; ++ci) {
                            const T* xin = xs + (ni * g.c + grp * g.cg + ci) * g.h * g.w;
                            T* gk = gw + (oc * g.cg + ci) * g.kh * g.kw;
                            for (std::size_t ki = 0; ki < g.kh; ++ki)
                                for (std::size_t kj = 0; kj < g.kw; ++kj) {
                                    T acc = 0;
                                    for_each_tap_row(g, ki, kj,
                                                     [&](std::size_t oh, std::size_t ih, std::size_t lo,
                                                         std::size_t hi, long long off) {
                                                         const T* grow = gp + oh * g.wo;
                                                         const T* xrow = xin + ih * g.w;
                                                         for (std::size_t ow = lo; ow < hi; ++ow)
                                                             acc += grow[ow] *
                                                                    xrow[static_cast<long long>(ow * sw) + off];
                                                     });
                                    gk[ki * g.kw + kj] += acc;
                                }
                        }
                    }
                });
            }
            if (xn->requires_grad) {
                T* gx = xn->grad_buffer();
                const T* ws = wn->data.data();
                detail::parallel_for(g.n * g.c, [&](std::size_t idx) {
                    const std::size_t ni = idx / g.c, c = idx % g.c;
                    const std::size_t grp = c / g.cg, ci = c % g.cg;
                    T* gxin = gx + idx * g.h * g.w;
                    for (std::size_t oo = 0; oo < g.og; ++oo) {
                        const std::size_t oc = grp * g.og + oo;
                        const T* gp = gs + (ni * g.o + oc) * g.ho * g.wo;
                        const T* wk = ws + (oc * g.cg + ci) * g.kh * g.kw;
                        for (std::size_t ki = 0; ki < g.kh; ++ki)
                            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                                const T wv = wk[ki * g.kw + kj];
                                if (wv == T(0)) continue;
                                for_each_tap_row(g, ki, kj,
                                                 [&](std::size_t oh, std::size_t ih, std::size_t lo, std::size_t hi,
                                                     long long off) {
                                                     const T* grow = gp + oh * g.wo;
                                                     T* xrow = gxin + ih * g.w;
                                                     for (std::size_t ow = lo; ow < hi; ++ow)
                                                         xrow[static_cast<long long>(ow * sw) + off] +=
                                                             wv * grow[ow];
                                                 });
                            }
                    }
                });
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor_<T> reduce(ReduceKind kind, const Tensor_<T>& x, std::vector<std::size_t> axes, bool keepdims) {
    if (axes.empty()) throw ShapeError("reduce: empty axis list");
    const auto& s = x.shape();
    std::vector<bool> reduced(s.size(), false);
    for (auto a : axes) {
        if (a >= s.size()) {
            throw ShapeError("reduce: axis " + std::to_string(a) + " out of range for " + to_string(s));
        }
        if (reduced[a]) throw ShapeError("reduce: duplicate axis " + std::to_string(a));
        reduced[a] = true;
    }
    Shape out_shape, kept_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        kept_shape.push_back(reduced[i] ? 1 : s[i]);
        if (!reduced[i]) out_shape.push_back(s[i]);
        else if (keepdims) out_shape.push_back(1);
    }
    if (out_shape.empty()) out_shape = {1};

    // Map every input element to its output slot through broadcast strides.
    BroadcastPlan plan;
    plan.out = s;
    plan.stride_a = aligned_strides(kept_shape, s);
    plan.stride_b = plan.stride_a;
    const std::size_t n_out = numel(kept_shape);
    const std::size_t group = x.numel() / n_out;
    auto xs = x.data();

    std::vector<T> out(n_out, kind == ReduceKind::max ? -std::numeric_limits<T>::infinity() : T(0));
    std::vector<std::size_t> arg;
    if (kind == ReduceKind::max) arg.assign(n_out, 0);
    for_each_broadcast(plan, [&](std::size_t i, std::size_t o, std::size_t) {
        if (kind == ReduceKind::max) {
            if (xs[i] > out[o]) {
                out[o] = xs[i];
                arg[o] = i;
            }
        } else {
            out[o] += xs[i];
        }
    });
    if (kind == ReduceKind::mean) {
        for (auto& v : out) v /= static_cast<T>(group);
    }
    Tensor_<T> y(out_shape, std::move(out));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        static constexpr std::string_view names[] = {"sum", "mean", "max"};
        tape<T>().record(names[static_cast<int>(kind)], y,
                         [xn, plan, kind, arg = std::move(arg), group](std::span<const T> g) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->grad_buffer();
                             if (kind == ReduceKind::max) {
                                 for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
                                 return;
                             }
                             const T f = kind == ReduceKind::mean ? T(1) / static_cast<T>(group) : T(1);
                             for_each_broadcast(plan, [&](std::size_t i, std::size_t o, std::size_t) {
                                 gx[i] += g[o] * f;
                             });
                         });
    }
    return y;
}

template <typename T>
Tensor_<T> sum(const Tensor_<T>& x) {
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return reduce(ReduceKind::sum, x, axes);
}

template <typename T>
Tensor_<T> mean(const Tensor_<T>& x) {
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), 0);
    return reduce(ReduceKind::mean, x, axes);
}

// ---------------------------------------------------------------------------
// Softmax

namespace {

template <typename T>
Tensor_<T> softmax_impl(const Tensor_<T>& x, std::size_t axis, bool log_form) {
    const Axis3 ax = split_axis(x.shape(), axis);
    auto xs = x.data();
    std::vector<T> out(xs.size());
    std::vector<T> probs;  // softmax values, needed by the log-form backward
    if (log_form) probs.resize(xs.size());
    for (std::size_t a = 0; a < ax.outer; ++a)
        for (std::size_t c = 0; c < ax.inner; ++c) {
            const std::size_t base = a * ax.n * ax.inner + c;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < ax.n; ++i) mx = std::max(mx, xs[base + i * ax.inner]);
            T z = 0;
            for (std::size_t i = 0; i < ax.n; ++i) z += std::exp(xs[base + i * ax.inner] - mx);
            const T logz = std::log(z);
            for (std::size_t i = 0; i < ax.n; ++i) {
                const std::size_t k = base + i * ax.inner;
                const T shifted = xs[k] - mx;
                if (log_form) {
                    out[k] = shifted - logz;
                    probs[k] = std::exp(out[k]);
                } else {
                    out[k] = std::exp(shifted) / z;
                }
            }
        }
    Tensor_<T> y(x.shape(), std::move(out));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        auto yn = y.node();
        tape<T>().record(log_form ? "log_softmax" : "softmax", y,
                         [xn, yn, ax, log_form, probs = std::move(probs)](std::span<const T> g) {
                             if (!xn->requires_grad) return;
                             T* gx = xn->grad_buffer();
                             const auto& ys = yn->data;
                             for (std::size_t a = 0; a < ax.outer; ++a)
                                 for (std::size_t c = 0; c < ax.inner; ++c) {
                                     const std::size_t base = a * ax.n * ax.inner + c;
                                     T dot = 0;
                                     for (std::size_t i = 0; i < ax.n; ++i) {
                                         const std::size_t k = base + i * ax.inner;
                                         dot += log_form ? g[k] : g[k] * ys[k];
                                     }
                                     for (std::size_t i = 0; i < ax.n; ++i) {
                                         const std::size_t k = base + i * ax.inner;
                                         gx[k] += log_form ? g[k] - probs[k] * dot : ys[k] * (g[k] - dot);
                                     }
                                 }
                         });
    }
    return y;
}

}  // namespace

template <typename T>
Tensor_<T> softmax(const Tensor_<T>& x, std::size_t axis) {
    return softmax_impl(x, axis, false);
}

template <typename T>
Tensor_<T> log_softmax(const Tensor_<T>& x, std::size_t axis) {
    return softmax_impl(x, axis, true);
}

// ---------------------------------------------------------------------------
// Layout ops

template <typename T>
Tensor_<T> reshape(const Tensor_<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape " + to_string(x.shape()) + " to " + to_string(shape) + " changes element count");
    }
    Tensor_<T> y(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        tape<T>().record("reshape", y, [xn](std::span<const T> g) {
            if (!xn->requires_grad) return;
            T* gx = xn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return y;
}

template <typename T>
Tensor_<T> permute(const Tensor_<T>& x, const std::vector<std::size_t>& order) {
    const auto& s = x.shape();
    if (order.size() != s.size()) throw ShapeError("permute: order rank differs from " + to_string(s));
    std::vector<bool> seen(s.size(), false);
    Shape out_shape(s.size());
    auto in_strides = contiguous_strides(s);
    BroadcastPlan plan;
    plan.stride_a.resize(s.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] >= s.size() || seen[order[i]]) throw ShapeError("permute: invalid axis order");
        seen[order[i]] = true;
        out_shape[i] = s[order[i]];
        plan.stride_a[i] = in_strides[order[i]];
    }
    plan.out = out_shape;
    plan.stride_b = plan.stride_a;
    auto xs = x.data();
    std::vector<T> out(xs.size());
    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xs[i]; });
    Tensor_<T> y(out_shape, std::move(out));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        tape<T>().record("permute", y, [xn, plan](std::span<const T> g) {
            if (!xn->requires_grad) return;
            T* gx = xn->grad_buffer();
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
        });
    }
    return y;
}

template <typename T>
Tensor_<T> slice(const Tensor_<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Axis3 ax = split_axis(x.shape(), axis);
    if (begin >= end || end > ax.n) {
        throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
    }
    const std::size_t len = end - begin;
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    auto xs = x.data();
    std::vector<T> out(ax.outer * len * ax.inner);
    for (std::size_t a = 0; a < ax.outer; ++a)
        std::copy_n(xs.begin() + (a * ax.n + begin) * ax.inner, len * ax.inner, out.begin() + a * len * ax.inner);
    Tensor_<T> y(out_shape, std::move(out));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        tape<T>().record("slice", y, [xn, ax, begin, len](std::span<const T> g) {
            if (!xn->requires_grad) return;
            T* gx = xn->grad_buffer();
            for (std::size_t a = 0; a < ax.outer; ++a)
                for (std::size_t i = 0; i < len * ax.inner; ++i) gx[(a * ax.n + begin) * ax.inner + i] += g[a * len * ax.inner + i];
        });
    }
    return y;
}

template <typename T>
Tensor_<T> concat(const std::vector<Tensor_<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(first));
        out_shape[axis] += s[axis];
    }
    const Axis3 out_ax = split_axis(out_shape, axis);
    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t n = p.dim(axis);
        auto ps = p.data();
        for (std::size_t a = 0; a < out_ax.outer; ++a)
            std::copy_n(ps.begin() + a * n * out_ax.inner, n * out_ax.inner,
                        out.begin() + (a * out_ax.n + off) * out_ax.inner);
        offsets.push_back(off);
        off += n;
    }
    Tensor_<T> y(out_shape, std::move(out));
    if (Tape<T>::should_record(std::span<const Tensor_<T>>(parts))) {
        std::vector<detail::NodePtr<T>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        tape<T>().record("concat", y, [nodes, offsets, out_ax, axis](std::span<const T> g) {
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (!nodes[k]->requires_grad) continue;
                const std::size_t n = nodes[k]->shape[axis];
                T* gp = nodes[k]->grad_buffer();
                for (std::size_t a = 0; a < out_ax.outer; ++a)
                    for (std::size_t i = 0; i < n * out_ax.inner; ++i)
                        gp[a * n * out_ax.inner + i] += g[(a * out_ax.n + offsets[k]) * out_ax.inner + i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor_<T> upsample_nearest(const Tensor_<T>& x, std::size_t factor) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest expects 4-D input, got " + to_string(x.shape()));
    if (factor == 0) throw ConfigError("upsample factor must be positive");
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = h * factor, wo = w * factor;
    auto xs = x.data();
    std::vector<T> out(planes * ho * wo);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j)
                out[(p * ho + i) * wo + j] = xs[(p * h + i / factor) * w + j / factor];
    Tensor_<T> y(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out));
    if (Tape<T>::should_record({&x})) {
        auto xn = x.node();
        tape<T>().record("upsample_nearest", y, [xn, planes, h, w, factor](std::span<const T> g) {
            if (!xn->requires_grad) return;
            T* gx = xn->grad_buffer();
            const std::size_t ho = h * factor, wo = w * factor;
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t i = 0; i < ho; ++i)
                    for (std::size_t j = 0; j < wo; ++j)
                        gx[(p * h + i / factor) * w + j / factor] += g[(p * ho + i) * wo + j];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Group normalization

template <typename T>
Tensor_<T> group_norm(const Tensor_<T>& x, std::size_t groups, const Tensor_<T>& gamma, const Tensor_<T>& beta,
                      T eps) {
    if (x.rank() < 2) throw ShapeError("group_norm expects [N x C x ...], got " + to_string(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t spatial = x.numel() / (n * c);
    if (groups == 0 || c % groups != 0) {
        throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
    }
    if (gamma.numel() != c || beta.numel() != c) {
        throw ShapeError("group_norm: affine parameters " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match " + std::to_string(c) + " channels");
    }
    const std::size_t cpg = c / groups;
    const std::size_t m = cpg * spatial;
    auto xs = x.data();
    auto gs = gamma.data();
    auto bs = beta.data();
    std::vector<T> xhat(xs.size());
    std::vector<T> inv_std(n * groups);
    std::vector<T> out(xs.size());
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (ni * c + gi * cpg) * spatial;
            T mu = 0;
            for (std::size_t i = 0; i < m; ++i) mu += xs[base + i];
            mu /= static_cast<T>(m);
            T var = 0;
            for (std::size_t i = 0; i < m; ++i) var += (xs[base + i] - mu) * (xs[base + i] - mu);
            var /= static_cast<T>(m);
            const T inv = T(1) / std::sqrt(var + eps);
            inv_std[ni * groups + gi] = inv;
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t ch = gi * cpg + i / spatial;
                const T xh = (xs[base + i] - mu) * inv;
                xhat[base + i] = xh;
                out[base + i] = xh * gs[ch] + bs[ch];
            }
        }
    Tensor_<T> y(x.shape(), std::move(out));
    if (Tape<T>::should_record({&x, &gamma, &beta})) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        tape<T>().record("group_norm", y,
                         [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, groups, cpg, spatial,
                          m](std::span<const T> g) {
                             T* ggam = gn->requires_grad ? gn->grad_buffer() : nullptr;
                             T* gbet = bn->requires_grad ? bn->grad_buffer() : nullptr;
                             T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
                             const auto& gam = gn->data;
                             for (std::size_t ni = 0; ni < n; ++ni)
                                 for (std::size_t gi = 0; gi < groups; ++gi) {
                                     const std::size_t base = (ni * c + gi * cpg) * spatial;
                                     T sum_gxh = 0, sum_gxh_xh = 0;
                                     for (std::size_t i = 0; i < m; ++i) {
                                         const std::size_t ch = gi * cpg + i / spatial;
                                         const T gv = g[base + i];
                                         if (ggam) ggam[ch] += gv * xhat[base + i];
                                         if (gbet) gbet[ch] += gv;
                                         const T gxh = gv * gam[ch];
                                         sum_gxh += gxh;
                                         sum_gxh_xh += gxh * xhat[base + i];
                                     }
                                     if (!gx) continue;
                                     const T inv = inv_std[ni * groups + gi];
                                     const T mm = static_cast<T>(m);
                                     for (std::size_t i = 0; i < m; ++i) {
                                         const std::size_t ch = gi * cpg + i / spatial;
                                         const T gxh = g[base + i] * gam[ch];
                                         gx[base + i] += inv / mm * (mm * gxh - sum_gxh - xhat[base + i] * sum_gxh_xh);
                                     }
                                 }
                         });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Finite differences

Tensor64 finite_diff_grad(const std::function<double(const Tensor64&)>& f, const Tensor64& x, double step) {
    Tensor64 probe = x.detach();
    std::vector<double> grad(x.numel());
    auto values = probe.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        const double h = step * std::max(1.0, std::abs(orig));
        values[i] = orig + h;
        const double up = f(probe);
        values[i] = orig - h;
        const double down = f(probe);
        values[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return Tensor64(x.shape(), std::move(grad));
}

// ---------------------------------------------------------------------------
// Instantiations

#define NPM_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor_<T> elementwise<T>(ElementwiseKind, const Tensor_<T>&, const std::optional<Tensor_<T>>&);  \
    template Tensor_<T> add<T>(const Tensor_<T>&, const Tensor_<T>&);                                         \
    template Tensor_<T> sub<T>(const Tensor_<T>&, const Tensor_<T>&);                                         \
    template Tensor_<T> mul<T>(const Tensor_<T>&, const Tensor_<T>&);                                         \
    template Tensor_<T> div<T>(const Tensor_<T>&, const Tensor_<T>&);                                         \
    template Tensor_<T> exp<T>(const Tensor_<T>&);                                                            \
    template Tensor_<T> log<T>(const Tensor_<T>&);                                                            \
    template Tensor_<T> gelu<T>(const Tensor_<T>&);                                                           \
    template Tensor_<T> sigmoid<T>(const Tensor_<T>&);                                                        \
    template Tensor_<T> neg<T>(const Tensor_<T>&);                                                            \
    template Tensor_<T> scale<T>(const Tensor_<T>&, T);                                                       \
    template Tensor_<T> add_scalar<T>(const Tensor_<T>&, T);                                                  \
    template Tensor_<T> square<T>(const Tensor_<T>&);                                                         \
    template Tensor_<T> clamp<T>(const Tensor_<T>&, T, T);                                                    \
    template Tensor_<T> matmul<T>(const Tensor_<T>&, const Tensor_<T>&);                                      \
    template Tensor_<T> conv2d<T>(const Tensor_<T>&, const Tensor_<T>&, const Tensor_<T>&, const Conv2dOptions&); \
    template Tensor_<T> reduce<T>(ReduceKind, const Tensor_<T>&, std::vector<std::size_t>, bool);             \
    template Tensor_<T> sum<T>(const Tensor_<T>&);                                                            \
    template Tensor_<T> mean<T>(const Tensor_<T>&);                                                           \
    template Tensor_<T> softmax<T>(const Tensor_<T>&, std::size_t);                                           \
    template Tensor_<T> log_softmax<T>(const Tensor_<T>&, std::size_t);                                       \
    template Tensor_<T> reshape<T>(const Tensor_<T>&, Shape);                                                 \
    template Tensor_<T> permute<T>(const Tensor_<T>&, const std::vector<std::size_t>&);                       \
    template Tensor_<T> slice<T>(const Tensor_<T>&, std::size_t, std::size_t, std::size_t);                   \
    template Tensor_<T> concat<T>(const std::vector<Tensor_<T>>&, std::size_t);                               \
    template Tensor_<T> upsample_nearest<T>(const Tensor_<T>&, std::size_t);                                  \
    template Tensor_<T> group_norm<T>(const Tensor_<T>&, std::size_t, const Tensor_<T>&, const Tensor_<T>&, T);

NPM_INSTANTIATE_OPS(float)
NPM_INSTANTIATE_OPS(double)

#undef NPM_INSTANTIATE_OPS

}  // namespace npm
