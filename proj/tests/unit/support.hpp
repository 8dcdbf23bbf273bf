#pragma once

// Shared test helpers: random tensors, naive reference kernels and
// backward-vs-finite-difference comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "npm/layers.hpp"
#include "npm/ops.hpp"
#include "npm/tensor.hpp"

namespace npm::test {

inline Tensor64 random64(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return Tensor64(shape, std::move(v));
}

inline Tensor random32(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    return random64(shape, seed, lo, hi).cast<float>();
}

/// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
/// turning finite-difference noise into large ratios.
inline double rel_error(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between tape gradients and central differences of
/// `f` with respect to every tensor in `inputs`.
inline double grad_check(const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                         std::vector<Tensor64> inputs, double step = 1e-6) {
    std::vector<Tensor64> leaves;
    for (auto& x : inputs) leaves.push_back(x.detach().set_requires_grad());
    std::vector<Tensor64> grads;
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        const auto loss = f(leaves);
        tape.backward(loss);
        for (auto& l : leaves) grads.push_back(l.grad());
    }
    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto probe = [&](const Tensor64& x) {
            auto args = inputs;
            args[i] = x;
            return f(args).item();
        };
        const auto numeric = finite_diff_grad(probe, inputs[i], step);
        for (std::size_t k = 0; k < numeric.numel(); ++k) {
            worst = std::max(worst, rel_error(grads[i][k], numeric[k]));
        }
    }
    return worst;
}

/// Same comparison for every parameter of a set; at most `per_tensor`
/// evenly spaced entries of each parameter are probed.
inline double param_grad_check(ParameterSet<double>& params, const std::function<Tensor64()>& loss_fn,
                               std::size_t per_tensor = 6, double step = 1e-6) {
    params.zero_grad();
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        const auto loss = loss_fn();
        tape.backward(loss);
    }
    double worst = 0;
    for (const auto& [path, p] : params) {
        const auto g = p.grad();
        auto values = const_cast<Tensor64&>(p).mutable_data();
        const std::size_t stride = std::max<std::size_t>(1, values.size() / per_tensor);
        for (std::size_t i = 0; i < values.size(); i += stride) {
            const double orig = values[i];
            const double h = step * std::max(1.0, std::abs(orig));
            values[i] = orig + h;
            const double up = loss_fn().item();
            values[i] = orig - h;
            const double down = loss_fn().item();
            values[i] = orig;
            worst = std::max(worst, rel_error(g[i], (up - down) / (2 * h)));
        }
    }
    params.zero_grad();
    return worst;
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
inline Tensor64 probe_sum(const Tensor64& y, std::uint64_t seed = 99) {
    return sum(mul(y, random64(y.shape(), seed)));
}

/// Direct-summation convolution used as an oracle for conv2d.
inline std::vector<double> conv_reference(const Tensor64& x, const Tensor64& w, const Tensor64* bias,
                                          const Conv2dOptions& o) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t oc = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::size_t og = oc / o.groups;
    const std::size_t ho = (h + 2 * o.padding[0] - o.dilation[0] * (kh - 1) - 1) / o.stride[0] + 1;
    const std::size_t wo = (wd + 2 * o.padding[1] - o.dilation[1] * (kw - 1) - 1) / o.stride[1] + 1;
    std::vector<double> out(n * oc * ho * wo, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t f = 0; f < oc; ++f)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xo = 0; xo < wo; ++xo) {
                    double acc = bias ? (*bias)[f] : 0.0;
                    const std::size_t g = f / og;
                    for (std::size_t ci = 0; ci < cg; ++ci)
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) {
                                const long iy = long(y * o.stride[0] + i * o.dilation[0]) - long(o.padding[0]);
                                const long ix = long(xo * o.stride[1] + j * o.dilation[1]) - long(o.padding[1]);
                                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                                acc += x[((b * c + g * cg + ci) * h + iy) * wd + ix] *
                                       w[((f * cg + ci) * kh + i) * kw + j];
                            }
                    out[((b * oc + f) * ho + y) * wo + xo] = acc;
                }
    (void)c;
    return out;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("npm_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace npm::test
