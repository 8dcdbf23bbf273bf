#include "npm/model_stage1.hpp"

#include <cmath>

namespace npm {

// ---------------------------------------------------------------------------
// Configuration

NpmConfig NpmConfig::desk() {
    NpmConfig c;
    c.enc_channels = 16;
    c.st_channels = 128;
    c.dw_kernel = 3;
    c.dilated_kernel = 5;
    c.dilation = 2;
    c.crop = 48;
    c.lr = 2e-3;
    c.lr_floor = 1e-5;
    c.total_steps = 4000;
    return c;
}

StBlockConfig NpmConfig::st_block() const {
    StBlockConfig s;
    s.time_steps = T;
    s.channels = enc_channels;
    s.dw_kernel = dw_kernel;
    s.dilated_kernel = dilated_kernel;
    s.dilation = dilation;
    s.temporal_kernel = temporal_kernel;
    s.ffn_hidden = st_channels;
    return s;
}

void NpmConfig::validate() const {
    if (T == 0 || T_out == 0) throw ConfigError("input and output frame counts must be positive");
    if (sat_channels == 0) throw ConfigError("at least one satellite channel is required");
    if (enc_dec_stages == 0) throw ConfigError("encoder/decoder needs at least one stage");
    if (enc_channels == 0 || st_channels == 0) throw ConfigError("channel widths must be positive");
    if (!(alpha >= 0)) throw ConfigError("alpha must be non-negative");
    if (!(lr > 0) || !(lr_floor >= 0) || lr_floor > lr) throw ConfigError("learning rate must satisfy 0 <= floor <= lr");
    if (use_time_embedding && (pe_dim == 0 || pe_dim % 2 != 0)) throw ConfigError("pe_dim must be even and positive");
    if (dw_kernel % 2 == 0 || dilated_kernel % 2 == 0 || temporal_kernel % 2 == 0 || dilation == 0) {
        throw ConfigError("attention kernels must be odd and dilation positive");
    }
    const std::size_t factor = std::size_t{1} << (enc_dec_stages / 2);
    if (crop % factor != 0) {
        throw ConfigError("crop " + std::to_string(crop) + " must be divisible by " + std::to_string(factor));
    }
}

namespace {

struct MetaField {
    const char* name;
    std::size_t NpmConfig::*field;
};

constexpr MetaField kMetaFields[] = {
    {"T", &NpmConfig::T},
    {"T_out", &NpmConfig::T_out},
    {"sat_channels", &NpmConfig::sat_channels},
    {"enc_dec_stages", &NpmConfig::enc_dec_stages},
    {"st_blocks", &NpmConfig::st_blocks},
    {"enc_channels", &NpmConfig::enc_channels},
    {"st_channels", &NpmConfig::st_channels},
    {"pe_dim", &NpmConfig::pe_dim},
    {"dw_kernel", &NpmConfig::dw_kernel},
    {"dilated_kernel", &NpmConfig::dilated_kernel},
    {"dilation", &NpmConfig::dilation},
    {"temporal_kernel", &NpmConfig::temporal_kernel},
};

}  // namespace

void NpmConfig::save_to(Checkpoint& ckpt) const {
    for (const auto& f : kMetaFields) ckpt.add_scalar(std::string("meta.stage1.") + f.name, static_cast<float>(this->*f.field));
    ckpt.add_scalar("meta.stage1.use_dem", use_dem ? 1.0f : 0.0f);
    ckpt.add_scalar("meta.stage1.use_time_embedding", use_time_embedding ? 1.0f : 0.0f);
}

NpmConfig NpmConfig::load_from(const Checkpoint& ckpt) {
    NpmConfig c;
    for (const auto& f : kMetaFields) c.*f.field = static_cast<std::size_t>(ckpt.scalar(std::string("meta.stage1.") + f.name));
    c.use_dem = ckpt.scalar("meta.stage1.use_dem") != 0.0f;
    c.use_time_embedding = ckpt.scalar("meta.stage1.use_time_embedding") != 0.0f;
    c.crop = std::size_t{1} << (c.enc_dec_stages / 2);
    return c;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
NpmModel<T>::NpmModel(const NpmConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    encoder_ = Encoder<T>(params_, "stage1.encoder", cfg.input_channels(), cfg.enc_channels, cfg.enc_dec_stages, rng);
    if (cfg.use_time_embedding) {
        embedding_ = TimeEmbedding<T>(params_, "stage1.time_embed", cfg.pe_dim, cfg.latent_channels(), rng);
    }
    for (std::size_t b = 0; b < cfg.st_blocks; ++b) {
        blocks_.emplace_back(params_, "stage1.translator." + std::to_string(b), cfg.st_block(), rng);
    }
    if (cfg.T != cfg.T_out) {
        out_proj_ = Conv2d<T>(params_, "stage1.translator.out_proj", cfg.latent_channels(), cfg.T_out * cfg.enc_channels,
                              1, 1, {}, rng);
    }
    decoder_ = Decoder<T>(params_, "stage1.decoder", cfg.enc_channels, cfg.sat_channels, cfg.enc_dec_stages, rng);
}

template <typename T>
BasicTensor<T> NpmModel<T>::forward_batch(const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                                          const std::vector<TimeStamp>& stamps) const {
    if (inputs.rank() != 5 || inputs.dim(1) != cfg_.T || inputs.dim(2) != cfg_.sat_channels) {
        throw ShapeError("stage-1 inputs must be [N x " + std::to_string(cfg_.T) + " x " +
                         std::to_string(cfg_.sat_channels) + " x H x W], got " + to_string(inputs.shape()));
    }
    const std::size_t n = inputs.dim(0), h = inputs.dim(3), w = inputs.dim(4);
    if (stamps.size() != n) throw ShapeError("one timestamp per batch element is required");
    encoder_.check_extents(h, w);

    BasicTensor<T> frames = inputs;
    if (cfg_.use_dem) {
        if (dem.rank() != 4 || dem.dim(0) != n || dem.dim(1) != 1 || dem.dim(2) != h || dem.dim(3) != w) {
            throw ShapeError("DEM must be [N x 1 x H x W] matching the inputs, got " + to_string(dem.shape()));
        }
        // replicate the terrain channel across the input frames
        std::vector<BasicTensor<T>> per_frame(cfg_.T, reshape(dem, {n, 1, 1, h, w}));
        frames = concat(std::vector<BasicTensor<T>>{inputs, concat(per_frame, 1)}, 2);
    }
    const std::size_t cin = cfg_.input_channels();
    auto latent = encoder_(reshape(frames, {n * cfg_.T, cin, h, w}));
    const std::size_t lh = latent.dim(2), lw = latent.dim(3);
    if (cfg_.st_blocks > 0) cfg_.st_block().validate(std::max(lh, lw));
    const std::size_t ce = cfg_.enc_channels;
    auto stacked = reshape(latent, {n, cfg_.T * ce, lh, lw});
    if (cfg_.use_time_embedding) stacked = inject_condition(stacked, embedding_(stamps));

    auto z = reshape(stacked, {n, cfg_.T, ce, lh, lw});
    for (const auto& block : blocks_) z = block(z);
    auto translated = reshape(z, {n, cfg_.T * ce, lh, lw});
    if (cfg_.T != cfg_.T_out) translated = out_proj_(translated);

    auto decoded = decoder_(reshape(translated, {n * cfg_.T_out, ce, lh, lw}));
    return reshape(decoded, {n, cfg_.T_out, cfg_.sat_channels, h, w});
}

template <typename T>
BasicTensor<T> NpmModel<T>::forward(const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                                    const TimeStamp& stamp) const {
    if (inputs.rank() != 4) throw ShapeError("stage-1 inputs must be [T x C x H x W], got " + to_string(inputs.shape()));
    const std::size_t h = inputs.dim(2), w = inputs.dim(3);
    auto batched_in = reshape(inputs, {1, inputs.dim(0), inputs.dim(1), h, w});
    BasicTensor<T> batched_dem = dem;
    if (cfg_.use_dem) {
        if (dem.numel() != h * w) throw ShapeError("DEM " + to_string(dem.shape()) + " does not match the input grid");
        batched_dem = reshape(dem, {1, 1, h, w});
    }
    auto out = forward_batch(batched_in, batched_dem, {stamp});
    return reshape(out, {cfg_.T_out, cfg_.sat_channels, h, w});
}

template <typename T>
Checkpoint NpmModel<T>::to_checkpoint() const {
    Checkpoint ckpt;
    cfg_.save_to(ckpt);
    params_.save_to(ckpt);
    return ckpt;
}

template <typename T>
NpmModel<T> NpmModel<T>::from_checkpoint(const Checkpoint& ckpt) {
    NpmModel model(NpmConfig::load_from(ckpt), 0);
    model.params_.load_from(ckpt);
    return model;
}

// ---------------------------------------------------------------------------
// Training and inference helpers

template <typename T>
StackedBatch<T> stack_batches(std::span<const ForecastBatch> batches) {
    if (batches.empty()) throw ShapeError("empty batch list");
    std::vector<BasicTensor<T>> xs, ys, ds;
    StackedBatch<T> out;
    for (const auto& b : batches) {
        const auto& xi = b.inputs.shape();
        const auto& yi = b.targets.shape();
        xs.push_back(reshape(b.inputs.template cast<T>(), {1, xi[0], xi[1], xi[2], xi[3]}));
        ys.push_back(reshape(b.targets.template cast<T>(), {1, yi[0], yi[1], yi[2], yi[3]}));
        ds.push_back(reshape(b.dem.template cast<T>(), {1, 1, xi[2], xi[3]}));
        out.stamps.push_back(b.timestamp);
    }
    out.inputs = concat(xs, 0);
    out.targets = concat(ys, 0);
    out.dem = concat(ds, 0);
    return out;
}

template <typename T>
LossReport<T> train_step(NpmModel<T>& model, std::span<const ForecastBatch> batches, AdamW<T>& optimizer, double lr,
                         double alpha) {
    auto batch = stack_batches<T>(batches);
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    auto pred = model.forward_batch(batch.inputs, batch.dem, batch.stamps);
    auto report = stage1_loss(pred, batch.targets, alpha);
    if (!std::isfinite(report.total_value)) {
        tape.backward(report.total);
        check_finite_gradients(model.params());
        throw DivergenceError("non-finite stage-1 loss");
    }
    tape.backward(report.total);
    check_finite_gradients(model.params());
    optimizer.step(lr);
    return report;
}

template <typename T>
BasicTensor<T> rollout(const NpmModel<T>& model, const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                       const TimeStamp& stamp, std::size_t horizon,
                       const std::function<void(std::size_t, const BasicTensor<T>&)>& on_window) {
    if (horizon == 0) throw ConfigError("rollout horizon must be a positive number of frames");
    const auto& cfg = model.config();
    std::vector<BasicTensor<T>> produced;
    std::size_t have = 0;
    BasicTensor<T> window = inputs;
    TimeStamp now = stamp;
    for (std::size_t k = 0; have < horizon; ++k) {
        if (on_window) on_window(k, window);
        auto pred = model.forward(window, dem, now);
        produced.push_back(pred);
        have += cfg.T_out;
        if (have >= horizon) break;
        auto all = concat(std::vector<BasicTensor<T>>{window, pred}, 0);
        window = slice(all, 0, all.dim(0) - cfg.T, all.dim(0));
        now = now.advanced(static_cast<int>(cfg.T_out));
    }
    auto frames = produced.size() == 1 ? produced.front() : concat(produced, 0);
    return frames.dim(0) == horizon ? frames : slice(frames, 0, 0, horizon);
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> counterfactual_day(const NpmModel<T>& model, const BasicTensor<T>& inputs,
                                                             const BasicTensor<T>& dem, const TimeStamp& stamp,
                                                             const TimeStamp& alt_stamp) {
    TimeStamp::make(stamp.day, stamp.hour);
    TimeStamp::make(alt_stamp.day, alt_stamp.hour);
    return {model.forward(inputs, dem, stamp), model.forward(inputs, dem, alt_stamp)};
}

template class NpmModel<float>;
template class NpmModel<double>;

#define NPM_INSTANTIATE_STAGE1(T)                                                                                   \
    template StackedBatch<T> stack_batches<T>(std::span<const ForecastBatch>);                                    \
    template LossReport<T> train_step<T>(NpmModel<T>&, std::span<const ForecastBatch>, AdamW<T>&, double, double); \
    template BasicTensor<T> rollout<T>(const NpmModel<T>&, const BasicTensor<T>&, const BasicTensor<T>&,           \
                                       const TimeStamp&, std::size_t,                                              \
                                       const std::function<void(std::size_t, const BasicTensor<T>&)>&);            \
    template std::pair<BasicTensor<T>, BasicTensor<T>> counterfactual_day<T>(                                      \
        const NpmModel<T>&, const BasicTensor<T>&, const BasicTensor<T>&, const TimeStamp&, const TimeStamp&);

NPM_INSTANTIATE_STAGE1(float)
NPM_INSTANTIATE_STAGE1(double)

}  // namespace npm
