#pragma once

// Satellite prediction model: past satellite frames + DEM + timestamp ->
// future satellite frames. Frames are encoded independently (time folded
// into the batch), the time-stacked latent receives the timestamp condition
// and passes through the ST-Block translator, and each output frame is
// decoded back to the input resolution.

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "npm/batch.hpp"
#include "npm/embedding.hpp"
#include "npm/layers.hpp"
#include "npm/losses.hpp"
#include "npm/optim.hpp"

namespace npm {

struct NpmConfig {
    std::size_t T = 6;
    std::size_t T_out = 6;
    std::size_t sat_channels = 3;
    bool use_dem = true;
    std::size_t enc_dec_stages = 4;
    std::size_t st_blocks = 3;
    std::size_t enc_channels = 64;
    /// Hidden width of each ST-Block feed-forward.
    std::size_t st_channels = 512;
    double alpha = 0.1;
    double lr = 1e-4;
    double lr_floor = 0.0;
    std::size_t total_steps = 10000;
    std::size_t crop = 768;
    bool use_time_embedding = true;
    std::size_t pe_dim = 32;
    std::size_t dw_kernel = 5;
    std::size_t dilated_kernel = 7;
    std::size_t dilation = 3;
    std::size_t temporal_kernel = 3;

    /// Configuration sized for a 64x64 grid on a single CPU core.
    static NpmConfig desk();

    std::size_t input_channels() const { return sat_channels + (use_dem ? 1 : 0); }
    std::size_t latent_channels() const { return T * enc_channels; }
    StBlockConfig st_block() const;
    CosineSchedule schedule() const { return {lr, lr_floor, total_steps}; }

    /// Throws ConfigError on inconsistent extents.
    void validate() const;

    /// Architecture fields as "meta.stage1.*" checkpoint records.
    void save_to(Checkpoint& ckpt) const;
    static NpmConfig load_from(const Checkpoint& ckpt);
};

template <typename T>
class NpmModel {
public:
    NpmModel(const NpmConfig& cfg, std::uint64_t seed);

    NpmModel(const NpmModel&) = delete;
    NpmModel& operator=(const NpmModel&) = delete;
    NpmModel(NpmModel&&) = default;
    NpmModel& operator=(NpmModel&&) = default;

    /// inputs [T x C x H x W], dem [1 x H x W] -> [T_out x C x H x W].
    BasicTensor<T> forward(const BasicTensor<T>& inputs, const BasicTensor<T>& dem, const TimeStamp& stamp) const;
    /// inputs [N x T x C x H x W], dem [N x 1 x H x W] -> [N x T_out x C x H x W].
    BasicTensor<T> forward_batch(const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                                 const std::vector<TimeStamp>& stamps) const;

    const NpmConfig& config() const { return cfg_; }
    ParameterSet<T>& params() { return params_; }
    const ParameterSet<T>& params() const { return params_; }
    const TimeEmbedding<T>& time_embedding() const { return embedding_; }

    /// Parameters plus architecture records.
    Checkpoint to_checkpoint() const;
    static NpmModel from_checkpoint(const Checkpoint& ckpt);

private:
    NpmConfig cfg_;
    ParameterSet<T> params_;
    Encoder<T> encoder_;
    TimeEmbedding<T> embedding_;
    std::vector<StBlock<T>> blocks_;
    Conv2d<T> out_proj_;  // only when T != T_out
    Decoder<T> decoder_;
};

/// Stacks windows into [N x ...] tensors of the model's scalar type.
template <typename T>
struct StackedBatch {
    BasicTensor<T> inputs, targets, dem;
    std::vector<TimeStamp> stamps;
};

template <typename T>
StackedBatch<T> stack_batches(std::span<const ForecastBatch> batches);

/// One optimisation step on `batches`: loss = mse + alpha * consistency,
/// backward, finite-gradient check, AdamW update at `lr`.
template <typename T>
LossReport<T> train_step(NpmModel<T>& model, std::span<const ForecastBatch> batches, AdamW<T>& optimizer,
                         double lr, double alpha);

/// Autoregressive forecast of `horizon` frames. Later windows take the most
/// recent T frames (observed or predicted) as input and advance the
/// timestamp by T_out hours. `on_window` sees each window's input.
template <typename T>
BasicTensor<T> rollout(const NpmModel<T>& model, const BasicTensor<T>& inputs, const BasicTensor<T>& dem,
                       const TimeStamp& stamp, std::size_t horizon,
                       const std::function<void(std::size_t, const BasicTensor<T>&)>& on_window = {});

/// Two forwards differing only in the timestamp condition.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> counterfactual_day(const NpmModel<T>& model, const BasicTensor<T>& inputs,
                                                             const BasicTensor<T>& dem, const TimeStamp& stamp,
                                                             const TimeStamp& alt_stamp);

}  // namespace npm
