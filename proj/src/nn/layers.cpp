#include "npm/layers.hpp"

#include <algorithm>
#include <cmath>

namespace npm {

// ---------------------------------------------------------------------------
// ParameterSet

template <typename T>
BasicTensor<T> ParameterSet<T>::add(std::string path, BasicTensor<T> value) {
    if (contains(path)) throw ConfigError("duplicate parameter path '" + path + "'");
    value.set_requires_grad(true);
    entries_.emplace_back(std::move(path), value);
    return value;
}

template <typename T>
BasicTensor<T> ParameterSet<T>::add_uniform(std::string path, Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng));
    return add(std::move(path), BasicTensor<T>(std::move(shape), std::move(values)));
}

template <typename T>
BasicTensor<T> ParameterSet<T>::add_constant(std::string path, Shape shape, T value) {
    return add(std::move(path), BasicTensor<T>(std::move(shape), value));
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& path) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.first == path; });
}

template <typename T>
const BasicTensor<T>& ParameterSet<T>::get(const std::string& path) const {
    for (const auto& e : entries_) {
        if (e.first == path) return e.second;
    }
    throw ConfigError("no parameter at path '" + path + "'");
}

template <typename T>
std::size_t ParameterSet<T>::total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
void ParameterSet<T>::fill(T value) {
    for (auto& e : entries_) {
        auto d = e.second.mutable_data();
        std::fill(d.begin(), d.end(), value);
    }
}

template <typename T>
void ParameterSet<T>::save_to(Checkpoint& ckpt) const {
    for (const auto& [path, tensor] : entries_) ckpt.add(path, tensor);
}

template <typename T>
void ParameterSet<T>::load_from(const Checkpoint& ckpt) {
    for (auto& [path, tensor] : entries_) {
        const auto& rec = ckpt.at(path);
        if (rec.shape != tensor.shape()) {
            throw ShapeError("checkpoint record '" + path + "' has shape " + to_string(rec.shape) + ", model expects " +
                             to_string(tensor.shape()));
        }
        auto d = tensor.mutable_data();
        std::copy(rec.values.begin(), rec.values.end(), d.begin());
    }
}

// ---------------------------------------------------------------------------
// Linear / Conv2d / GroupNorm

template <typename T>
Linear<T>::Linear(ParameterSet<T>& ps, const std::string& path, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = ps.add_uniform(path + ".weight", {in, out}, bound, rng);
    bias_ = ps.add_uniform(path + ".bias", {out}, bound, rng);
}

template <typename T>
BasicTensor<T> Linear<T>::operator()(const BasicTensor<T>& x) const {
    return add(matmul(x, weight_), bias_);
}

template <typename T>
Conv2d<T>::Conv2d(ParameterSet<T>& ps, const std::string& path, std::size_t in, std::size_t out, std::size_t kh,
                  std::size_t kw, Conv2dOptions options, Rng& rng, bool with_bias)
    : options_(options) {
    if (options.groups == 0 || in % options.groups != 0 || out % options.groups != 0) {
        throw ConfigError("conv '" + path + "': channels not divisible by groups");
    }
    const std::size_t fan_in = in / options.groups * kh * kw;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    weight_ = ps.add_uniform(path + ".weight", {out, in / options.groups, kh, kw}, bound, rng);
    if (with_bias) bias_ = ps.add_uniform(path + ".bias", {out}, bound, rng);
}

template <typename T>
BasicTensor<T> Conv2d<T>::operator()(const BasicTensor<T>& x) const {
    return conv2d(x, weight_, bias_, options_);
}

std::size_t default_norm_groups(std::size_t channels) {
    for (std::size_t g = 8; g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

template <typename T>
GroupNorm<T>::GroupNorm(ParameterSet<T>& ps, const std::string& path, std::size_t channels, std::size_t groups)
    : groups_(groups) {
    if (groups == 0 || channels % groups != 0) {
        throw ConfigError("norm '" + path + "': " + std::to_string(channels) + " channels not divisible into " +
                          std::to_string(groups) + " groups");
    }
    gamma_ = ps.add_constant(path + ".gamma", {channels}, T(1));
    beta_ = ps.add_constant(path + ".beta", {channels}, T(0));
}

template <typename T>
BasicTensor<T> GroupNorm<T>::operator()(const BasicTensor<T>& x) const {
    return group_norm(x, groups_, gamma_, beta_);
}

// ---------------------------------------------------------------------------
// Attention blocks

void StBlockConfig::validate(std::size_t grid_extent) const {
    if (dw_kernel % 2 == 0 || dilated_kernel % 2 == 0 || temporal_kernel % 2 == 0) {
        throw ConfigError("ST-Block kernels must have odd sizes");
    }
    if (time_steps == 0 || channels == 0 || ffn_hidden == 0 || dilation == 0) {
        throw ConfigError("ST-Block extents must be positive");
    }
    if (dilated_span() > grid_extent) {
        throw ConfigError("dilated kernel span " + std::to_string(dilated_span()) + " exceeds latent grid extent " +
                          std::to_string(grid_extent));
    }
}

template <typename T>
LkaSpatial<T>::LkaSpatial(ParameterSet<T>& ps, const std::string& path, std::size_t channels,
                          const StBlockConfig& cfg, Rng& rng)
    : channels_(channels) {
    Conv2dOptions dw;
    dw.groups = channels;
    dw.padding = {cfg.dw_kernel / 2, cfg.dw_kernel / 2};
    dw_ = Conv2d<T>(ps, path + ".dw", channels, channels, cfg.dw_kernel, cfg.dw_kernel, dw, rng);
    Conv2dOptions dil;
    dil.groups = channels;
    dil.dilation = {cfg.dilation, cfg.dilation};
    dil.padding = {cfg.dilation * (cfg.dilated_kernel / 2), cfg.dilation * (cfg.dilated_kernel / 2)};
    dw_dilated_ = Conv2d<T>(ps, path + ".dw_dilated", channels, channels, cfg.dilated_kernel, cfg.dilated_kernel,
                            dil, rng);
    pw_ = Conv2d<T>(ps, path + ".pw", channels, channels, 1, 1, {}, rng);
}

template <typename T>
BasicTensor<T> LkaSpatial<T>::attention_map(const BasicTensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != channels_) {
        throw ShapeError("spatial attention expects [N x " + std::to_string(channels_) + " x H x W], got " +
                         to_string(x.shape()));
    }
    return pw_(dw_dilated_(dw_(x)));
}

template <typename T>
BasicTensor<T> LkaSpatial<T>::operator()(const BasicTensor<T>& x) const {
    return mul(attention_map(x), x);
}

template <typename T>
TkaTemporal<T>::TkaTemporal(ParameterSet<T>& ps, const std::string& path, std::size_t channels, std::size_t kernel,
                            Rng& rng)
    : channels_(channels), kernel_(kernel) {
    if (kernel % 2 == 0) throw ConfigError("temporal kernel size must be odd");
    Conv2dOptions opt;
    opt.groups = channels;
    opt.padding = {kernel / 2, 0};
    conv_ = Conv2d<T>(ps, path + ".conv", channels, channels, kernel, 1, opt, rng);
}

template <typename T>
BasicTensor<T> TkaTemporal<T>::attention_map(const BasicTensor<T>& x) const {
    if (x.rank() != 5 || x.dim(2) != channels_) {
        throw ShapeError("temporal attention expects [N x T x " + std::to_string(channels_) + " x H x W], got " +
                         to_string(x.shape()));
    }
    const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2), h = x.dim(3), w = x.dim(4);
    if (t + 2 * (kernel_ / 2) < kernel_) {
        throw ConfigError("time extent " + std::to_string(t) + " too short for temporal kernel " +
                          std::to_string(kernel_));
    }
    auto by_channel = reshape(permute(x, {0, 2, 1, 3, 4}), {n, c, t, h * w});
    auto gate = conv_(by_channel);
    return permute(reshape(gate, {n, c, t, h, w}), {0, 2, 1, 3, 4});
}

template <typename T>
BasicTensor<T> TkaTemporal<T>::operator()(const BasicTensor<T>& x) const {
    return mul(attention_map(x), x);
}

template <typename T>
FeedForward<T>::FeedForward(ParameterSet<T>& ps, const std::string& path, std::size_t channels, std::size_t hidden,
                            Rng& rng)
    : fc1_(ps, path + ".fc1", channels, hidden, 1, 1, {}, rng), fc2_(ps, path + ".fc2", hidden, channels, 1, 1, {}, rng) {}

template <typename T>
BasicTensor<T> FeedForward<T>::operator()(const BasicTensor<T>& x) const {
    return fc2_(gelu(fc1_(x)));
}

template <typename T>
StBlock<T>::StBlock(ParameterSet<T>& ps, const std::string& path, const StBlockConfig& cfg, Rng& rng) : cfg_(cfg) {
    const std::size_t stacked = cfg.stacked_channels();
    const std::size_t groups = default_norm_groups(stacked);
    norm_t_ = GroupNorm<T>(ps, path + ".norm_t", stacked, groups);
    tka_ = TkaTemporal<T>(ps, path + ".tka", cfg.channels, cfg.temporal_kernel, rng);
    norm_s_ = GroupNorm<T>(ps, path + ".norm_s", stacked, groups);
    lka_ = LkaSpatial<T>(ps, path + ".lka", stacked, cfg, rng);
    norm_f_ = GroupNorm<T>(ps, path + ".norm_f", stacked, groups);
    ffn_ = FeedForward<T>(ps, path + ".ffn", stacked, cfg.ffn_hidden, rng);
}

template <typename T>
BasicTensor<T> StBlock<T>::operator()(const BasicTensor<T>& x) const {
    if (x.rank() != 5 || x.dim(1) != cfg_.time_steps || x.dim(2) != cfg_.channels) {
        throw ShapeError("ST-Block expects [N x " + std::to_string(cfg_.time_steps) + " x " +
                         std::to_string(cfg_.channels) + " x H x W], got " + to_string(x.shape()));
    }
    const Shape five = x.shape();
    const Shape four{x.dim(0), cfg_.stacked_channels(), x.dim(3), x.dim(4)};
    auto flat = reshape(x, four);
    auto temporal = reshape(tka_(reshape(norm_t_(flat), five)), four);
    auto x1 = add(flat, temporal);
    auto x2 = add(x1, lka_(norm_s_(x1)));
    auto x3 = add(x2, ffn_(norm_f_(x2)));
    return reshape(x3, five);
}

// ---------------------------------------------------------------------------
// Encoder / decoder

template <typename T>
Encoder<T>::Encoder(ParameterSet<T>& ps, const std::string& path, std::size_t in_channels, std::size_t width,
                    std::size_t stages, Rng& rng)
    : stages_(stages), width_(width) {
    if (stages == 0) throw ConfigError("encoder needs at least one stage");
    for (std::size_t i = 0; i < stages; ++i) {
        Conv2dOptions opt;
        opt.padding = {1, 1};
        if (i % 2 == 1) opt.stride = {2, 2};
        convs_.emplace_back(ps, path + "." + std::to_string(i) + ".conv", i == 0 ? in_channels : width, width, 3, 3, opt,
                            rng);
    }
}

template <typename T>
void Encoder<T>::check_extents(std::size_t height, std::size_t width) const {
    const std::size_t factor = std::size_t{1} << downsamplings();
    if (height % factor != 0 || width % factor != 0) {
        throw ConfigError("grid " + std::to_string(height) + "x" + std::to_string(width) + " must be divisible by " +
                          std::to_string(factor) + " for " + std::to_string(downsamplings()) + " downsampling stages");
    }
}

template <typename T>
BasicTensor<T> Encoder<T>::operator()(const BasicTensor<T>& x) const {
    if (x.rank() != 4) throw ShapeError("encoder expects [N x C x H x W], got " + to_string(x.shape()));
    check_extents(x.dim(2), x.dim(3));
    auto h = x;
    for (const auto& conv : convs_) h = gelu(conv(h));
    return h;
}

template <typename T>
Decoder<T>::Decoder(ParameterSet<T>& ps, const std::string& path, std::size_t width, std::size_t out_channels,
                    std::size_t stages, Rng& rng)
    : stages_(stages) {
    if (stages == 0) throw ConfigError("decoder needs at least one stage");
    for (std::size_t k = 0; k < stages; ++k) {
        const std::size_t mirrored = stages - 1 - k;
        Conv2dOptions opt;
        opt.padding = {1, 1};
        convs_.emplace_back(ps, path + "." + std::to_string(k) + ".conv", width, width, 3, 3, opt, rng);
        upsample_.push_back(mirrored % 2 == 1);
    }
    head_ = Conv2d<T>(ps, path + ".head", width, out_channels, 1, 1, {}, rng);
}

template <typename T>
BasicTensor<T> Decoder<T>::operator()(const BasicTensor<T>& z) const {
    auto h = z;
    for (std::size_t k = 0; k < convs_.size(); ++k) {
        if (upsample_[k]) h = upsample_nearest(h, 2);
        h = gelu(convs_[k](h));
    }
    return head_(h);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class LkaSpatial<float>;
template class LkaSpatial<double>;
template class TkaTemporal<float>;
template class TkaTemporal<double>;
template class FeedForward<float>;
template class FeedForward<double>;
template class StBlock<float>;
template class StBlock<double>;
template class Encoder<float>;
template class Encoder<double>;
template class Decoder<float>;
template class Decoder<double>;

}  // namespace npm
