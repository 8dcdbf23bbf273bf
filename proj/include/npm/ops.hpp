#pragma once

// Differentiable tensor operations. Every op records itself on the active
// tape when one of its inputs requires gradients.

#include <array>
#include <functional>
#include <optional>
#include <vector>

#include "npm/tensor.hpp"

namespace npm {

enum class ElementwiseKind { add, sub, mul, div, exp, log, gelu, sigmoid };
enum class ReduceKind { sum, mean, max };

/// Numpy-style broadcast of two shapes (trailing axes aligned).
Shape broadcast_shapes(const Shape& a, const Shape& b);

template <typename T>
BasicTensor<T> elementwise(ElementwiseKind kind, const BasicTensor<T>& a,
                           const std::optional<BasicTensor<T>>& b = std::nullopt);

template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// Throws DomainError when any divisor is exactly zero.
template <typename T> BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> exp(const BasicTensor<T>& x);
/// Throws DomainError on non-positive input.
template <typename T> BasicTensor<T> log(const BasicTensor<T>& x);
/// Exact erf formulation: x * Phi(x).
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& x);

template <typename T> BasicTensor<T> neg(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);
template <typename T> BasicTensor<T> square(const BasicTensor<T>& x);
/// Gradient passes where lo <= x <= hi and is zero elsewhere.
template <typename T> BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi);

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }

/// [m x k] * [k x n] -> [m x n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

struct Conv2dOptions {
    std::array<std::size_t, 2> stride{1, 1};
    std::array<std::size_t, 2> padding{0, 0};
    std::array<std::size_t, 2> dilation{1, 1};
    std::size_t groups = 1;
};

/// Output extent of a convolution along one axis; throws ConfigError when the
/// configuration leaves no valid output position.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                               std::size_t dilation);

/// x [N x C x H x W], weight [O x C/groups x kh x kw], bias [O] or null.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      const Conv2dOptions& options = {});

template <typename T>
BasicTensor<T> reduce(ReduceKind kind, const BasicTensor<T>& x, std::vector<std::size_t> axes,
                      bool keepdims = false);
/// Reductions over every axis; result has shape [1].
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);

/// Max-shifted softmax along `axis`.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
template <typename T> BasicTensor<T> log_softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& order);
/// Elements [begin, end) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

/// Nearest-neighbour upsampling of the two trailing axes of a 4-D tensor.
template <typename T> BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::size_t factor);

/// Group normalization of [N x C x H x W]; gamma and beta have shape [C].
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

/// Central-difference gradient of a scalar function. Step per coordinate is
/// `step * max(1, |x_i|)`.
Tensor64 finite_diff_grad(const std::function<double(const Tensor64&)>& f, const Tensor64& x,
                          double step = 1e-5);

}  // namespace npm
