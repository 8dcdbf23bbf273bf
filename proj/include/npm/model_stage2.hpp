#pragma once

// Satellite-to-radar translation: a skip-connected convolutional generator
// mapping one normalised satellite frame (+ DEM) to a rain-rate map, and a
// conditional patch discriminator scoring (radar, satellite) pairs.

#include <optional>
#include <utility>
#include <vector>

#include "npm/layers.hpp"
#include "npm/losses.hpp"
#include "npm/model_stage1.hpp"
#include "npm/optim.hpp"

namespace npm {

struct S2rConfig {
    std::size_t sat_channels = 3;
    bool use_dem = true;
    std::size_t base_width = 16;
    /// Number of downsampling levels in the generator.
    std::size_t depth = 1;
    /// Number of stride-2 convolutions in the discriminator.
    std::size_t disc_depth = 2;
    double lambda = 0.01;
    double rate_max = 100.0;
    double lr = 1e-4;
    double disc_lr = 1e-4;
    double lr_floor = 0.0;
    std::size_t total_steps = 10000;

    std::size_t input_channels() const { return sat_channels + (use_dem ? 1 : 0); }
    /// Rain rate in mm/h to network units: log1p(r) / log1p(rate_max), with r
    /// clamped to [0, rate_max].
    double to_network(double rate) const;
    /// Inverse of to_network, clamped to [0, rate_max].
    double from_network(double value) const;
    void validate() const;

    void save_to(Checkpoint& ckpt) const;
    static S2rConfig load_from(const Checkpoint& ckpt);
};

/// A translated frame: rain rate in mm/h, clamped to [0, rate_max].
struct RadarFramePred {
    Tensor rate;  // [1 x H x W]
    int lead_hours = 0;
};

template <typename T>
class Generator {
public:
    Generator() = default;
    Generator(ParameterSet<T>& ps, const std::string& path, const S2rConfig& cfg, Rng& rng);

    /// x [N x Cin x H x W] -> normalised rain rate [N x 1 x H x W] in (0, 1).
    BasicTensor<T> operator()(const BasicTensor<T>& x) const;

private:
    std::size_t depth_ = 0;
    Conv2d<T> stem_;
    std::vector<Conv2d<T>> down_, down_mix_, up_, merge_;
    Conv2d<T> head_;
};

template <typename T>
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(ParameterSet<T>& ps, const std::string& path, const S2rConfig& cfg, Rng& rng);

    /// radar [N x 1 x H x W], condition [N x Cin x H x W] -> patch scores in (0, 1).
    BasicTensor<T> operator()(const BasicTensor<T>& radar, const BasicTensor<T>& condition) const;

private:
    std::vector<Conv2d<T>> convs_;
    Conv2d<T> head_;
};

template <typename T>
class S2rModel {
public:
    S2rModel(const S2rConfig& cfg, std::uint64_t seed);

    S2rModel(const S2rModel&) = delete;
    S2rModel& operator=(const S2rModel&) = delete;
    S2rModel(S2rModel&&) = default;
    S2rModel& operator=(S2rModel&&) = default;

    /// Builds the generator input: satellite channels plus DEM when enabled.
    /// sat [N x C x H x W] (or [C x H x W]), dem [N x 1 x H x W] (or [1 x H x W]).
    BasicTensor<T> condition(const BasicTensor<T>& sat, const BasicTensor<T>& dem) const;

    /// Single frame: sat [C x H x W], dem [1 x H x W] -> rain rate in mm/h.
    RadarFramePred generate(const BasicTensor<T>& sat, const BasicTensor<T>& dem) const;
    /// Score map for a radar frame [1 x H x W] given its satellite frame.
    BasicTensor<T> discriminate(const BasicTensor<T>& radar, const BasicTensor<T>& sat,
                                const BasicTensor<T>& dem) const;

    const Generator<T>& generator() const { return generator_; }
    const Discriminator<T>& discriminator() const { return discriminator_; }
    ParameterSet<T>& gen_params() { return gen_params_; }
    ParameterSet<T>& disc_params() { return disc_params_; }
    const ParameterSet<T>& gen_params() const { return gen_params_; }
    const ParameterSet<T>& disc_params() const { return disc_params_; }
    const S2rConfig& config() const { return cfg_; }

    Checkpoint to_checkpoint() const;
    static S2rModel from_checkpoint(const Checkpoint& ckpt);

private:
    S2rConfig cfg_;
    ParameterSet<T> gen_params_, disc_params_;
    Generator<T> generator_;
    Discriminator<T> discriminator_;
};

/// Paired training samples: generator input and normalised radar target.
template <typename T>
struct S2rBatch {
    BasicTensor<T> condition;  // [N x Cin x H x W]
    BasicTensor<T> radar;      // [N x 1 x H x W]
};

/// One discriminator update (generated frames detached) followed by one
/// generator update on mse + lambda * mean(log(1 - D(G(x)))).
template <typename T>
std::pair<LossReport<T>, LossReport<T>> s2r_train_step(S2rModel<T>& model, const S2rBatch<T>& batch, double lambda,
                                                       AdamW<T>& gen_opt, AdamW<T>& disc_opt, double gen_lr,
                                                       double disc_lr);

/// Stage-1 forecast followed by per-frame translation. With `oracle_future`
/// ([T_out x C x H x W] observed frames) stage 2 sees the observations
/// instead of the forecast. `horizon` > T_out uses autoregressive rollout.
template <typename T>
std::vector<RadarFramePred> pipeline_predict(const NpmModel<T>& stage1, const S2rModel<T>& stage2,
                                             const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                                             const TimeStamp& stamp, std::size_t horizon = 0,
                                             const std::optional<BasicTensor<T>>& oracle_future = std::nullopt);

/// Translates every frame of [F x C x H x W] independently.
template <typename T>
std::vector<RadarFramePred> translate_frames(const S2rModel<T>& stage2, const BasicTensor<T>& frames,
                                             const BasicTensor<T>& dem);

}  // namespace npm
