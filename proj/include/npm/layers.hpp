#pragma once

// Neural building blocks. Every layer registers its parameters in a
// ParameterSet under a hierarchical path and keeps shared handles to them,
// so optimizer updates and checkpoint loads through the set are visible to
// the layer.

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "npm/checkpoint.hpp"
#include "npm/ops.hpp"
#include "npm/tensor.hpp"

namespace npm {

using Rng = std::mt19937_64;

template <typename T>
class ParameterSet {
public:
    using Entry = std::pair<std::string, BasicTensor<T>>;

    /// Registers a trainable tensor; throws ConfigError on a duplicate path.
    BasicTensor<T> add(std::string path, BasicTensor<T> value);
    /// Uniform(-bound, bound) initialisation.
    BasicTensor<T> add_uniform(std::string path, Shape shape, double bound, Rng& rng);
    BasicTensor<T> add_constant(std::string path, Shape shape, T value);

    bool contains(const std::string& path) const;
    const BasicTensor<T>& get(const std::string& path) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t total_count() const;
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();
    /// Overwrites every parameter with `value` (used for identity tests).
    void fill(T value);

    void save_to(Checkpoint& ckpt) const;
    /// Copies values of every registered path from `ckpt`; shapes must match.
    void load_from(const Checkpoint& ckpt);

private:
    std::vector<Entry> entries_;
};

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(ParameterSet<T>& ps, const std::string& path, std::size_t in, std::size_t out, Rng& rng);

    /// x [N x in] -> [N x out].
    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

    const BasicTensor<T>& weight() const { return weight_; }
    const BasicTensor<T>& bias() const { return bias_; }

private:
    BasicTensor<T> weight_;  // [in x out]
    BasicTensor<T> bias_;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParameterSet<T>& ps, const std::string& path, std::size_t in, std::size_t out, std::size_t kh,
           std::size_t kw, Conv2dOptions options, Rng& rng, bool with_bias = true);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

    const BasicTensor<T>& weight() const { return weight_; }
    const BasicTensor<T>& bias() const { return bias_; }
    const Conv2dOptions& options() const { return options_; }

private:
    BasicTensor<T> weight_;
    BasicTensor<T> bias_;
    Conv2dOptions options_;
};

/// Largest group count <= 8 that divides `channels`.
std::size_t default_norm_groups(std::size_t channels);

template <typename T>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(ParameterSet<T>& ps, const std::string& path, std::size_t channels, std::size_t groups);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

private:
    BasicTensor<T> gamma_, beta_;
    std::size_t groups_ = 1;
};

struct StBlockConfig {
    std::size_t time_steps = 6;
    std::size_t channels = 64;  // per time step
    std::size_t dw_kernel = 5;
    std::size_t dilated_kernel = 7;
    std::size_t dilation = 3;
    std::size_t temporal_kernel = 3;
    std::size_t ffn_hidden = 512;

    std::size_t stacked_channels() const { return time_steps * channels; }
    /// Extent covered by the dilated depthwise kernel.
    std::size_t dilated_span() const { return dilation * (dilated_kernel - 1) + 1; }
    /// Throws ConfigError on even kernels or a dilated span beyond `grid_extent`.
    void validate(std::size_t grid_extent) const;
};

/// Spatial large-kernel attention on [N x C x H x W]:
/// attn = pointwise(dilated_depthwise(depthwise(x))), out = attn * x.
template <typename T>
class LkaSpatial {
public:
    LkaSpatial() = default;
    LkaSpatial(ParameterSet<T>& ps, const std::string& path, std::size_t channels, const StBlockConfig& cfg,
               Rng& rng);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;
    BasicTensor<T> attention_map(const BasicTensor<T>& x) const;

    const Conv2d<T>& depthwise() const { return dw_; }
    const Conv2d<T>& dilated() const { return dw_dilated_; }
    const Conv2d<T>& pointwise() const { return pw_; }

private:
    std::size_t channels_ = 0;
    Conv2d<T> dw_, dw_dilated_, pw_;
};

/// Temporal large-kernel attention on [N x T x C x H x W]: a per-channel
/// 1-D convolution along time gives a gate multiplied into x.
template <typename T>
class TkaTemporal {
public:
    TkaTemporal() = default;
    TkaTemporal(ParameterSet<T>& ps, const std::string& path, std::size_t channels, std::size_t kernel, Rng& rng);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;
    BasicTensor<T> attention_map(const BasicTensor<T>& x) const;

    const Conv2d<T>& conv() const { return conv_; }

private:
    std::size_t channels_ = 0;
    std::size_t kernel_ = 3;
    Conv2d<T> conv_;  // weight [C x 1 x k x 1], groups = C
};

template <typename T>
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(ParameterSet<T>& ps, const std::string& path, std::size_t channels, std::size_t hidden, Rng& rng);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

private:
    Conv2d<T> fc1_, fc2_;
};

/// Spatio-temporal block on [N x T x C x H x W]: pre-normalised temporal
/// attention, spatial attention and feed-forward, each with its own residual.
template <typename T>
class StBlock {
public:
    StBlock() = default;
    StBlock(ParameterSet<T>& ps, const std::string& path, const StBlockConfig& cfg, Rng& rng);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

private:
    StBlockConfig cfg_;
    GroupNorm<T> norm_t_, norm_s_, norm_f_;
    TkaTemporal<T> tka_;
    LkaSpatial<T> lka_;
    FeedForward<T> ffn_;
};

/// Strided convolutional encoder. Stage 0 keeps resolution; odd stages
/// halve it, so `stages` stages downsample stages/2 times.
template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(ParameterSet<T>& ps, const std::string& path, std::size_t in_channels, std::size_t width,
            std::size_t stages, Rng& rng);

    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

    std::size_t downsamplings() const { return stages_ / 2; }
    std::size_t width() const { return width_; }
    /// Throws ConfigError unless height and width divide by 2^downsamplings.
    void check_extents(std::size_t height, std::size_t width) const;

private:
    std::size_t stages_ = 0, width_ = 0;
    std::vector<Conv2d<T>> convs_;
};

/// Mirror of Encoder: nearest-neighbour upsampling + 3x3 convolution where the
/// encoder strided, then a 1x1 head to `out_channels`.
template <typename T>
class Decoder {
public:
    Decoder() = default;
    Decoder(ParameterSet<T>& ps, const std::string& path, std::size_t width, std::size_t out_channels,
            std::size_t stages, Rng& rng);

    BasicTensor<T> operator()(const BasicTensor<T>& z) const;

private:
    std::size_t stages_ = 0;
    std::vector<Conv2d<T>> convs_;
    std::vector<bool> upsample_;
    Conv2d<T> head_;
};

}  // namespace npm
