#pragma once

// Training loops and pipeline evaluation over a manifest. Samples are drawn
// by a producer thread into a bounded queue; sample k is drawn from a
// generator derived from (seed, k), so a resumed run sees the same data as
// an uninterrupted one.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "npm/data.hpp"
#include "npm/metrics.hpp"
#include "npm/model_stage1.hpp"
#include "npm/model_stage2.hpp"

namespace npm {

/// Blocking single-producer queue carrying values or the producer's failure.
template <typename V>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

    /// Returns false once close() was called.
    bool push(V value) {
        std::unique_lock lock(mu_);
        not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) return false;
        items_.emplace_back(std::move(value));
        not_empty_.notify_one();
        return true;
    }
    void fail(std::exception_ptr e) {
        std::lock_guard lock(mu_);
        error_ = e;
        not_empty_.notify_all();
    }
    /// Rethrows the producer's exception.
    V pop() {
        std::unique_lock lock(mu_);
        not_empty_.wait(lock, [&] { return !items_.empty() || error_; });
        if (items_.empty()) std::rethrow_exception(error_);
        V v = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return v;
    }
    void close() {
        std::lock_guard lock(mu_);
        closed_ = true;
        not_full_.notify_all();
    }

private:
    std::size_t capacity_;
    std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<V> items_;
    std::exception_ptr error_;
    bool closed_ = false;
};

struct TrainOptions {
    std::filesystem::path out_dir;
    std::size_t steps = 2000;
    std::size_t batch = 4;
    std::uint64_t seed = 1;
    std::optional<MonthWeights> month_weights;
    /// The checkpoint file is rewritten every this many steps and at the end.
    std::size_t checkpoint_every = 250;
    std::optional<std::filesystem::path> resume;
    std::size_t queue_capacity = 8;
    /// Stage 2 crop; stage 1 uses its config's crop.
    std::size_t crop = 32;
    /// Called after every step with the log row just written.
    std::function<void(const std::string&)> on_log;
};

struct TrainSummary {
    std::filesystem::path checkpoint;
    std::filesystem::path log;
    std::size_t first_step = 0;  // steps already done when the run started
    std::size_t last_step = 0;
    double first_loss = 0, last_loss = 0;
};

/// Log columns: step,lr,mse,reg,total. Writes "<out>/stage1.ckpt" and
/// "<out>/stage1_log.csv". Throws DivergenceError on non-finite losses.
TrainSummary train_stage1(const Manifest& manifest, const NpmConfig& cfg, const TrainOptions& options);

/// Log columns: step,lr,mse,adv,total,disc. Writes "<out>/stage2.ckpt" and
/// "<out>/stage2_log.csv". Trains on observed satellite/radar pairs.
TrainSummary train_stage2(const Manifest& manifest, const S2rConfig& cfg, const TrainOptions& options);

/// Stage-1 sample: a season-aware window, randomly cropped.
ForecastBatch draw_stage1_sample(const Manifest& manifest, const SeasonAwareSampler& sampler, std::size_t T,
                                 std::size_t T_out, std::size_t crop, std::uint64_t seed, std::size_t k);
/// Stage-2 micro-batch built from single observed frames.
S2rBatch<float> draw_stage2_batch(const Manifest& manifest, const SeasonAwareSampler& sampler, const S2rConfig& cfg,
                                  std::size_t batch, std::size_t crop, std::uint64_t seed, std::size_t k);

/// Generator input for one observed record: normalised satellite channels
/// plus DEM, [Cin x H x W], and the radar frame in mm/h, [1 x H x W].
std::pair<Tensor, Tensor> load_pair(const Manifest& manifest, std::size_t index, const Tensor& dem);

/// Most-frequent-class forecast per (month, hour of day, pixel) over one
/// split: a pixel is an event at a threshold when more than half of the
/// matching records reach it.
class Climatology {
public:
    Climatology(const Manifest& manifest, Split split, std::vector<double> thresholds = kDefaultThresholds);
    /// Rain field [1 x H x W] holding, per pixel, the largest threshold whose
    /// event is the majority class (0 when none is). Thresholding it
    /// reproduces the majority class at every threshold.
    Tensor field(int month, int hour) const;

private:
    std::size_t h_ = 0, w_ = 0;
    std::vector<double> thresholds_;
    std::vector<std::vector<std::uint32_t>> events_;  // [cell][threshold * H * W + pixel]
    std::vector<std::uint32_t> count_;
};

struct EvalOptions {
    std::vector<double> thresholds = kDefaultThresholds;
    /// Hours between successive forecast issue times.
    std::size_t stride = 1;
    /// Forecast length; 0 means T_out.
    std::size_t horizon = 0;
    /// Feed observed satellite frames to stage 2 instead of the forecast.
    bool oracle_input = false;
    bool climatology = false;
    bool persistence = false;
    /// 0 evaluates every window.
    std::size_t max_windows = 0;
    Split split = Split::test;
};

struct EvalOutputs {
    EvalReport model;
    std::optional<EvalReport> climatology, persistence;
    std::size_t windows = 0;
    std::vector<std::size_t> issue_indices;
};

/// Issue records of `split` with a complete window, every `stride` hours.
std::vector<std::size_t> evaluation_windows(const Manifest& manifest, Split split, std::size_t T, std::size_t horizon,
                                            std::size_t stride, std::size_t max_windows = 0);

EvalOutputs evaluate_pipeline(const Manifest& manifest, const NpmModel<float>& stage1, const S2rModel<float>& stage2,
                              const EvalOptions& options);

/// "key=value" lines describing a run, sorted by key.
std::string run_manifest(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace npm
