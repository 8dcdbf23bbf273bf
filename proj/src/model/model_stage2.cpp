#include "npm/model_stage2.hpp"

#include <algorithm>
#include <cmath>

namespace npm {

void S2rConfig::validate() const {
    if (sat_channels == 0 || base_width == 0) throw ConfigError("stage-2 channel counts must be positive");
    if (disc_depth == 0) throw ConfigError("discriminator needs at least one strided layer");
    if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
    if (!(rate_max > 0)) throw ConfigError("rate_max must be positive");
    if (!(lr > 0) || !(disc_lr > 0)) throw ConfigError("stage-2 learning rates must be positive");
}

void S2rConfig::save_to(Checkpoint& ckpt) const {
    ckpt.add_scalar("meta.stage2.sat_channels", static_cast<float>(sat_channels));
    ckpt.add_scalar("meta.stage2.use_dem", use_dem ? 1.0f : 0.0f);
    ckpt.add_scalar("meta.stage2.base_width", static_cast<float>(base_width));
    ckpt.add_scalar("meta.stage2.depth", static_cast<float>(depth));
    ckpt.add_scalar("meta.stage2.disc_depth", static_cast<float>(disc_depth));
    ckpt.add_scalar("meta.stage2.rate_max", static_cast<float>(rate_max));
}

double S2rConfig::to_network(double rate) const {
    return std::log1p(std::clamp(rate, 0.0, rate_max)) / std::log1p(rate_max);
}

double S2rConfig::from_network(double value) const {
    return std::clamp(std::expm1(value * std::log1p(rate_max)), 0.0, rate_max);
}

S2rConfig S2rConfig::load_from(const Checkpoint& ckpt) {
    S2rConfig c;
    c.sat_channels = static_cast<std::size_t>(ckpt.scalar("meta.stage2.sat_channels"));
    c.use_dem = ckpt.scalar("meta.stage2.use_dem") != 0.0f;
    c.base_width = static_cast<std::size_t>(ckpt.scalar("meta.stage2.base_width"));
    c.depth = static_cast<std::size_t>(ckpt.scalar("meta.stage2.depth"));
    c.disc_depth = static_cast<std::size_t>(ckpt.scalar("meta.stage2.disc_depth"));
    c.rate_max = ckpt.scalar("meta.stage2.rate_max");
    return c;
}

namespace {

// Initial generator logit: sigmoid(-3) is about 0.05.
constexpr double kHeadBias = -3.0;

Conv2dOptions same3x3(std::size_t stride = 1) {
    Conv2dOptions o;
    o.padding = {1, 1};
    o.stride = {stride, stride};
    return o;
}

}  // namespace

template <typename T>
Generator<T>::Generator(ParameterSet<T>& ps, const std::string& path, const S2rConfig& cfg, Rng& rng)
    : depth_(cfg.depth) {
    const std::size_t w = cfg.base_width;
    stem_ = Conv2d<T>(ps, path + ".stem", cfg.input_channels(), w, 3, 3, same3x3(), rng);
    for (std::size_t l = 1; l <= depth_; ++l) {
        const std::size_t lo = w << (l - 1), hi = w << l;
        const std::string p = path + ".down." + std::to_string(l);
        down_.emplace_back(ps, p + ".conv", lo, hi, 3, 3, same3x3(2), rng);
        down_mix_.emplace_back(ps, p + ".mix", hi, hi, 3, 3, same3x3(), rng);
    }
    for (std::size_t l = depth_; l >= 1; --l) {
        const std::size_t lo = w << (l - 1), hi = w << l;
        const std::string p = path + ".up." + std::to_string(l);
        up_.emplace_back(ps, p + ".conv", hi, lo, 3, 3, same3x3(), rng);
        merge_.emplace_back(ps, p + ".merge", 2 * lo, lo, 3, 3, same3x3(), rng);
    }
    head_ = Conv2d<T>(ps, path + ".head", w, 1, 1, 1, {}, rng);
    const_cast<BasicTensor<T>&>(head_.bias()).mutable_data()[0] = T(kHeadBias);
}

template <typename T>
BasicTensor<T> Generator<T>::operator()(const BasicTensor<T>& x) const {
    if (x.rank() != 4) throw ShapeError("generator expects [N x C x H x W], got " + to_string(x.shape()));
    const std::size_t factor = std::size_t{1} << depth_;
    if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
        throw ConfigError("generator grid must be divisible by " + std::to_string(factor));
    }
    std::vector<BasicTensor<T>> skips{gelu(stem_(x))};
    for (std::size_t l = 0; l < depth_; ++l) skips.push_back(gelu(down_mix_[l](gelu(down_[l](skips.back())))));
    auto h = skips.back();
    for (std::size_t k = 0; k < depth_; ++k) {
        const std::size_t level = depth_ - 1 - k;  // skip index to merge with
        h = gelu(up_[k](upsample_nearest(h, 2)));
        h = gelu(merge_[k](concat(std::vector<BasicTensor<T>>{h, skips[level]}, 1)));
    }
    return sigmoid(head_(h));
}

template <typename T>
Discriminator<T>::Discriminator(ParameterSet<T>& ps, const std::string& path, const S2rConfig& cfg, Rng& rng) {
    std::size_t in = 1 + cfg.input_channels();
    for (std::size_t d = 0; d < cfg.disc_depth; ++d) {
        const std::size_t out = cfg.base_width << d;
        convs_.emplace_back(ps, path + "." + std::to_string(d) + ".conv", in, out, 3, 3, same3x3(2), rng);
        in = out;
    }
    head_ = Conv2d<T>(ps, path + ".head", in, 1, 1, 1, {}, rng);
}

template <typename T>
BasicTensor<T> Discriminator<T>::operator()(const BasicTensor<T>& radar, const BasicTensor<T>& condition) const {
    if (radar.rank() != 4 || condition.rank() != 4 || radar.dim(0) != condition.dim(0) ||
        radar.dim(2) != condition.dim(2) || radar.dim(3) != condition.dim(3) || radar.dim(1) != 1) {
        throw ShapeError("discriminator inputs " + to_string(radar.shape()) + " and " + to_string(condition.shape()) +
                         " are inconsistent");
    }
    auto h = concat(std::vector<BasicTensor<T>>{radar, condition}, 1);
    for (const auto& c : convs_) h = gelu(c(h));
    return sigmoid(head_(h));
}

template <typename T>
S2rModel<T>::S2rModel(const S2rConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    generator_ = Generator<T>(gen_params_, "stage2.generator", cfg_, rng);
    discriminator_ = Discriminator<T>(disc_params_, "stage2.discriminator", cfg_, rng);
}

template <typename T>
BasicTensor<T> S2rModel<T>::condition(const BasicTensor<T>& sat, const BasicTensor<T>& dem) const {
    BasicTensor<T> s = sat.rank() == 3 ? reshape(sat, {1, sat.dim(0), sat.dim(1), sat.dim(2)}) : sat;
    if (s.rank() != 4 || s.dim(1) != cfg_.sat_channels) {
        throw ShapeError("satellite frame must have " + std::to_string(cfg_.sat_channels) + " channels, got " +
                         to_string(sat.shape()));
    }
    if (!cfg_.use_dem) return s;
    const std::size_t n = s.dim(0), h = s.dim(2), w = s.dim(3);
    if (dem.numel() == h * w) {
        auto d = reshape(dem, {1, 1, h, w});
        std::vector<BasicTensor<T>> parts{s};
        for (std::size_t i = 0; i < n; ++i) parts.push_back(d);
        if (n == 1) return concat(parts, 1);
        std::vector<BasicTensor<T>> dems(parts.begin() + 1, parts.end());
        return concat(std::vector<BasicTensor<T>>{s, concat(dems, 0)}, 1);
    }
    if (dem.rank() == 4 && dem.dim(0) == n && dem.dim(1) == 1 && dem.dim(2) == h && dem.dim(3) == w) {
        return concat(std::vector<BasicTensor<T>>{s, dem}, 1);
    }
    throw ShapeError("DEM " + to_string(dem.shape()) + " does not match satellite frames " + to_string(s.shape()));
}

template <typename T>
RadarFramePred S2rModel<T>::generate(const BasicTensor<T>& sat, const BasicTensor<T>& dem) const {
    auto norm = generator_(condition(sat, dem));
    const std::size_t h = norm.dim(2), w = norm.dim(3);
    std::vector<float> rate(h * w);
    auto v = norm.data();
    for (std::size_t i = 0; i < rate.size(); ++i) {
        rate[i] = static_cast<float>(cfg_.from_network(static_cast<double>(v[i])));
    }
    return RadarFramePred{Tensor(Shape{1, h, w}, std::move(rate)), 0};
}

template <typename T>
BasicTensor<T> S2rModel<T>::discriminate(const BasicTensor<T>& radar, const BasicTensor<T>& sat,
                                         const BasicTensor<T>& dem) const {
    auto cond = condition(sat, dem);
    auto r = radar.rank() == 3 ? reshape(radar, {1, radar.dim(0), radar.dim(1), radar.dim(2)}) : radar;
    return discriminator_(r, cond);
}

template <typename T>
Checkpoint S2rModel<T>::to_checkpoint() const {
    Checkpoint ckpt;
    cfg_.save_to(ckpt);
    gen_params_.save_to(ckpt);
    disc_params_.save_to(ckpt);
    return ckpt;
}

template <typename T>
S2rModel<T> S2rModel<T>::from_checkpoint(const Checkpoint& ckpt) {
    S2rModel model(S2rConfig::load_from(ckpt), 0);
    model.gen_params_.load_from(ckpt);
    model.disc_params_.load_from(ckpt);
    return model;
}

template <typename T>
std::pair<LossReport<T>, LossReport<T>> s2r_train_step(S2rModel<T>& model, const S2rBatch<T>& batch, double lambda,
                                                       AdamW<T>& gen_opt, AdamW<T>& disc_opt, double gen_lr,
                                                       double disc_lr) {
    LossReport<T> disc_report;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        auto fake = model.generator()(batch.condition).detach();
        auto real_scores = model.discriminator()(batch.radar, batch.condition);
        auto fake_scores = model.discriminator()(fake, batch.condition);
        disc_report.total = discriminator_loss(real_scores, fake_scores);
        disc_report.total_value = disc_report.total.item();
        disc_report.adversarial = disc_report.total_value;
        if (!std::isfinite(disc_report.total_value)) throw DivergenceError("non-finite discriminator loss");
        tape.backward(disc_report.total);
        check_finite_gradients(model.disc_params());
        model.gen_params().zero_grad();
        disc_opt.step(disc_lr);
    }
    LossReport<T> gen_report;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        auto fake = model.generator()(batch.condition);
        auto scores = model.discriminator()(fake, batch.condition);
        gen_report = generator_loss(fake, batch.radar, scores, lambda);
        if (!std::isfinite(gen_report.total_value)) throw DivergenceError("non-finite generator loss");
        tape.backward(gen_report.total);
        check_finite_gradients(model.gen_params());
        model.disc_params().zero_grad();
        gen_opt.step(gen_lr);
    }
    return {gen_report, disc_report};
}

template <typename T>
std::vector<RadarFramePred> translate_frames(const S2rModel<T>& stage2, const BasicTensor<T>& frames,
                                             const BasicTensor<T>& dem) {
    if (frames.rank() != 4) throw ShapeError("frames must be [F x C x H x W], got " + to_string(frames.shape()));
    const std::size_t f = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    auto norm = stage2.generator()(stage2.condition(frames, dem));
    std::vector<RadarFramePred> out;
    auto v = norm.data();
    for (std::size_t i = 0; i < f; ++i) {
        std::vector<float> rate(h * w);
        for (std::size_t p = 0; p < h * w; ++p) {
            rate[p] = static_cast<float>(stage2.config().from_network(static_cast<double>(v[i * h * w + p])));
        }
        out.push_back(RadarFramePred{Tensor(Shape{1, h, w}, std::move(rate)), static_cast<int>(i + 1)});
    }
    return out;
}

template <typename T>
std::vector<RadarFramePred> pipeline_predict(const NpmModel<T>& stage1, const S2rModel<T>& stage2,
                                             const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                                             const TimeStamp& stamp, std::size_t horizon,
                                             const std::optional<BasicTensor<T>>& oracle_future) {
    BasicTensor<T> frames;
    if (oracle_future) {
        frames = *oracle_future;
    } else if (horizon == 0 || horizon == stage1.config().T_out) {
        frames = stage1.forward(inputs, dem, stamp);
    } else {
        frames = rollout(stage1, inputs, dem, stamp, horizon);
    }
    return translate_frames(stage2, frames, dem);
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template class S2rModel<float>;
template class S2rModel<double>;

#define NPM_INSTANTIATE_STAGE2(T)                                                                                  \
    template std::pair<LossReport<T>, LossReport<T>> s2r_train_step<T>(S2rModel<T>&, const S2rBatch<T>&, double,  \
                                                                       AdamW<T>&, AdamW<T>&, double, double);     \
    template std::vector<RadarFramePred> translate_frames<T>(const S2rModel<T>&, const BasicTensor<T>&,           \
                                                             const BasicTensor<T>&);                              \
    template std::vector<RadarFramePred> pipeline_predict<T>(const NpmModel<T>&, const S2rModel<T>&,              \
                                                             const BasicTensor<T>&, const BasicTensor<T>&,        \
                                                             const TimeStamp&, std::size_t,                       \
                                                             const std::optional<BasicTensor<T>>&);

NPM_INSTANTIATE_STAGE2(float)
NPM_INSTANTIATE_STAGE2(double)

}  // namespace npm
