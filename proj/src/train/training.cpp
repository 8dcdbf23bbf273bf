#include "npm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <thread>

#include "npm/rng.hpp"

namespace npm {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void save_atomically(const Checkpoint& ckpt, const std::filesystem::path& path) {
    auto tmp = path;
    tmp += ".tmp";
    ckpt.save(tmp);
    std::filesystem::rename(tmp, path);
}

class LogFile {
public:
    LogFile(const std::filesystem::path& path, const std::string& header, bool append) {
        const bool fresh = !append || !std::filesystem::exists(path);
        out_.open(path, fresh ? std::ios::trunc : std::ios::app);
        if (!out_) throw IoError("cannot open log " + path.string());
        if (fresh) out_ << header << '\n';
    }
    void write(const std::string& row) {
        out_ << row << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

// Runs `make(k)` for k in [first, last) on a producer thread.
template <typename V, typename Make>
class Producer {
public:
    Producer(std::size_t first, std::size_t last, std::size_t capacity, Make make)
        : queue_(capacity), thread_([this, first, last, make = std::move(make)] {
              try {
                  for (std::size_t k = first; k < last; ++k) {
                      if (!queue_.push(make(k))) return;
                  }
              } catch (...) {
                  queue_.fail(std::current_exception());
              }
          }) {}
    ~Producer() {
        queue_.close();
        thread_.join();
    }
    V next() { return queue_.pop(); }

private:
    BoundedQueue<V> queue_;
    std::thread thread_;
};

}  // namespace

ForecastBatch draw_stage1_sample(const Manifest& manifest, const SeasonAwareSampler& sampler, std::size_t T,
                                 std::size_t T_out, std::size_t crop_size, std::uint64_t seed, std::size_t k) {
    auto rng = derive_rng(seed, k, 1);
    const std::size_t index = sampler.sample(rng);
    return random_crop(make_window(manifest, index, T, T_out), crop_size, rng);
}

std::pair<Tensor, Tensor> load_pair(const Manifest& manifest, std::size_t index, const Tensor& dem) {
    const auto f = read_frame(manifest.resolve(manifest.records.at(index).path));
    const std::size_t h = manifest.height, wd = manifest.width, plane = h * wd, c = kSatelliteTags.size();
    std::vector<float> sat((c + 1) * plane);
    for (std::size_t k = 0; k < c; ++k) {
        const auto raw = f.channel_tensor(kSatelliteTags[k]);
        auto norm = normalize(raw.data(), manifest.bounds_for(kSatelliteTags[k]));
        std::copy(norm.begin(), norm.end(), sat.begin() + k * plane);
    }
    std::copy(dem.data().begin(), dem.data().end(), sat.begin() + c * plane);
    return {Tensor({c + 1, h, wd}, std::move(sat)), f.channel_tensor(kTagRain)};
}

S2rBatch<float> draw_stage2_batch(const Manifest& manifest, const SeasonAwareSampler& sampler, const S2rConfig& cfg,
                                  std::size_t batch, std::size_t crop_size, std::uint64_t seed, std::size_t k) {
    const Tensor dem = load_dem(manifest);
    const std::size_t h = manifest.height, w = manifest.width;
    if (crop_size == 0 || crop_size > h || crop_size > w) throw ConfigError("stage-2 crop exceeds the grid");
    const std::size_t cin = cfg.input_channels(), plane = crop_size * crop_size;
    std::vector<float> cond(batch * cin * plane), radar(batch * plane);
    for (std::size_t j = 0; j < batch; ++j) {
        auto rng = derive_rng(seed, k * batch + j, 2);
        const std::size_t index = sampler.sample(rng);
        auto [input, rain] = load_pair(manifest, index, dem);
        const std::size_t top = std::uniform_int_distribution<std::size_t>(0, h - crop_size)(rng);
        const std::size_t left = std::uniform_int_distribution<std::size_t>(0, w - crop_size)(rng);
        auto ci = input.data();
        auto ri = rain.data();
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t y = 0; y < crop_size; ++y)
                for (std::size_t x = 0; x < crop_size; ++x)
                    cond[(j * cin + c) * plane + y * crop_size + x] = ci[(c * h + top + y) * w + left + x];
        for (std::size_t y = 0; y < crop_size; ++y)
            for (std::size_t x = 0; x < crop_size; ++x)
                radar[j * plane + y * crop_size + x] =
                    static_cast<float>(cfg.to_network(ri[(top + y) * w + left + x]));
    }
    return {Tensor({batch, cin, crop_size, crop_size}, std::move(cond)),
            Tensor({batch, 1, crop_size, crop_size}, std::move(radar))};
}

TrainSummary train_stage1(const Manifest& manifest, const NpmConfig& cfg, const TrainOptions& options) {
    cfg.validate();
    if (options.batch == 0) throw ConfigError("batch size must be positive");
    if (manifest.count(Split::train) == 0) throw ConfigError("manifest has no training records");
    std::filesystem::create_directories(options.out_dir);

    std::unique_ptr<NpmModel<float>> model;
    std::size_t step = 0;
    std::optional<Checkpoint> resumed;
    if (options.resume) {
        resumed = Checkpoint::load(*options.resume);
        model = std::make_unique<NpmModel<float>>(NpmModel<float>::from_checkpoint(*resumed));
        step = static_cast<std::size_t>(resumed->scalar("train.step"));
    } else {
        model = std::make_unique<NpmModel<float>>(cfg, options.seed);
    }
    AdamW<float> optimizer(model->params());
    if (resumed) optimizer.load_from(*resumed, "optim");

    const auto& mc = model->config();
    const SeasonAwareSampler sampler(manifest, Split::train, mc.T, mc.T_out, options.month_weights);
    const auto schedule = cfg.schedule();

    TrainSummary summary;
    summary.checkpoint = options.out_dir / "stage1.ckpt";
    summary.log = options.out_dir / "stage1_log.csv";
    summary.first_step = summary.last_step = step;
    LogFile log(summary.log, "step,lr,mse,reg,total", options.resume.has_value());

    auto save = [&] {
        Checkpoint ckpt = model->to_checkpoint();
        optimizer.save_to(ckpt, "optim");
        ckpt.add_scalar("train.step", static_cast<float>(step));
        save_atomically(ckpt, summary.checkpoint);
    };

    const std::size_t T = mc.T, T_out = mc.T_out, crop_size = cfg.crop, batch = options.batch;
    const auto seed = options.seed;
    auto make = [&manifest, &sampler, T, T_out, crop_size, batch, seed](std::size_t k) {
        std::vector<ForecastBatch> out;
        for (std::size_t j = 0; j < batch; ++j) {
            out.push_back(draw_stage1_sample(manifest, sampler, T, T_out, crop_size, seed, k * batch + j));
        }
        return out;
    };
    {
        Producer<std::vector<ForecastBatch>, decltype(make)> producer(step, options.steps, options.queue_capacity,
                                                                      make);
        while (step < options.steps) {
            const auto samples = producer.next();
            const double lr = schedule.lr(step);
            const auto report = train_step(*model, std::span<const ForecastBatch>(samples), optimizer, lr, cfg.alpha);
            ++step;
            const std::string row = std::to_string(step) + ',' + fmt(lr) + ',' + fmt(report.mse) + ',' +
                                    fmt(report.reg) + ',' + fmt(report.total_value);
            log.write(row);
            if (options.on_log) options.on_log(row);
            if (step == summary.first_step + 1) summary.first_loss = report.total_value;
            summary.last_loss = report.total_value;
            if (step % std::max<std::size_t>(options.checkpoint_every, 1) == 0 && step < options.steps) save();
        }
    }
    save();
    summary.last_step = step;
    return summary;
}

TrainSummary train_stage2(const Manifest& manifest, const S2rConfig& cfg, const TrainOptions& options) {
    cfg.validate();
    if (options.batch == 0) throw ConfigError("batch size must be positive");
    if (manifest.count(Split::train) == 0) throw ConfigError("manifest has no training records");
    std::filesystem::create_directories(options.out_dir);

    std::unique_ptr<S2rModel<float>> model;
    std::size_t step = 0;
    std::optional<Checkpoint> resumed;
    if (options.resume) {
        resumed = Checkpoint::load(*options.resume);
        model = std::make_unique<S2rModel<float>>(S2rModel<float>::from_checkpoint(*resumed));
        step = static_cast<std::size_t>(resumed->scalar("train.step"));
    } else {
        model = std::make_unique<S2rModel<float>>(cfg, options.seed);
    }
    AdamW<float> gen_opt(model->gen_params()), disc_opt(model->disc_params());
    if (resumed) {
        gen_opt.load_from(*resumed, "optim.gen");
        disc_opt.load_from(*resumed, "optim.disc");
    }
    const auto& mc = model->config();
    const SeasonAwareSampler sampler(manifest, Split::train, 1, 0, options.month_weights);
    const CosineSchedule schedule{cfg.lr, cfg.lr_floor, cfg.total_steps};

    TrainSummary summary;
    summary.checkpoint = options.out_dir / "stage2.ckpt";
    summary.log = options.out_dir / "stage2_log.csv";
    summary.first_step = summary.last_step = step;
    LogFile log(summary.log, "step,lr,mse,adv,total,disc", options.resume.has_value());

    auto save = [&] {
        Checkpoint ckpt = model->to_checkpoint();
        gen_opt.save_to(ckpt, "optim.gen");
        disc_opt.save_to(ckpt, "optim.disc");
        ckpt.add_scalar("train.step", static_cast<float>(step));
        save_atomically(ckpt, summary.checkpoint);
    };

    const std::size_t batch = options.batch, crop_size = options.crop;
    const auto seed = options.seed;
    auto make = [&manifest, &sampler, mc, batch, crop_size, seed](std::size_t k) {
        return draw_stage2_batch(manifest, sampler, mc, batch, crop_size, seed, k);
    };
    {
        Producer<S2rBatch<float>, decltype(make)> producer(step, options.steps, options.queue_capacity, make);
        while (step < options.steps) {
            const auto b = producer.next();
            const double lr = schedule.lr(step);
            const double disc_lr = lr * cfg.disc_lr / cfg.lr;
            const auto [gen, disc] = s2r_train_step(*model, b, cfg.lambda, gen_opt, disc_opt, lr, disc_lr);
            ++step;
            const std::string row = std::to_string(step) + ',' + fmt(lr) + ',' + fmt(gen.mse) + ',' +
                                    fmt(gen.adversarial) + ',' + fmt(gen.total_value) + ',' + fmt(disc.total_value);
            log.write(row);
            if (options.on_log) options.on_log(row);
            if (step == summary.first_step + 1) summary.first_loss = gen.total_value;
            summary.last_loss = gen.total_value;
            if (step % std::max<std::size_t>(options.checkpoint_every, 1) == 0 && step < options.steps) save();
        }
    }
    save();
    summary.last_step = step;
    return summary;
}

Climatology::Climatology(const Manifest& manifest, Split split, std::vector<double> thresholds)
    : h_(manifest.height), w_(manifest.width), thresholds_(std::move(thresholds)), events_(12 * 24), count_(12 * 24, 0) {
    std::sort(thresholds_.begin(), thresholds_.end());
    const std::size_t plane = h_ * w_;
    for (const auto& r : manifest.records) {
        if (r.split != split) continue;
        const auto f = read_frame(manifest.resolve(r.path));
        const auto rain_tensor = f.channel_tensor(kTagRain);
        auto rain = rain_tensor.data();
        const std::size_t cell = (r.month - 1) * 24 + r.hour;
        auto& ev = events_[cell];
        if (ev.empty()) ev.assign(thresholds_.size() * plane, 0);
        for (std::size_t k = 0; k < thresholds_.size(); ++k)
            for (std::size_t i = 0; i < plane; ++i) ev[k * plane + i] += rain[i] >= thresholds_[k];
        ++count_[cell];
    }
}

Tensor Climatology::field(int month, int hour) const {
    if (month < 1 || month > 12 || hour < 0 || hour > 23) throw ConfigError("calendar position out of range");
    const std::size_t cell = (month - 1) * 24 + hour, plane = h_ * w_;
    Tensor out({1, h_, w_});
    if (count_[cell] == 0) return out;
    auto d = out.mutable_data();
    for (std::size_t k = 0; k < thresholds_.size(); ++k)
        for (std::size_t i = 0; i < plane; ++i) {
            if (2 * events_[cell][k * plane + i] > count_[cell]) d[i] = static_cast<float>(thresholds_[k]);
        }
    return out;
}

std::vector<std::size_t> evaluation_windows(const Manifest& manifest, Split split, std::size_t T, std::size_t horizon,
                                            std::size_t stride, std::size_t max_windows) {
    if (stride == 0) throw ConfigError("evaluation stride must be positive");
    std::vector<std::size_t> out;
    std::size_t since = stride;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        if (manifest.records[i].split != split) continue;
        if (!manifest.valid_window(i, T, horizon)) continue;
        if (since < stride) {
            ++since;
            continue;
        }
        out.push_back(i);
        since = 1;
        if (max_windows && out.size() == max_windows) break;
    }
    return out;
}

EvalOutputs evaluate_pipeline(const Manifest& manifest, const NpmModel<float>& stage1, const S2rModel<float>& stage2,
                              const EvalOptions& options) {
    const std::size_t T = stage1.config().T;
    const std::size_t H = options.horizon ? options.horizon : stage1.config().T_out;
    EvalOutputs out;
    out.issue_indices = evaluation_windows(manifest, options.split, T, H, options.stride, options.max_windows);
    if (out.issue_indices.empty()) throw ConfigError("no complete evaluation window in the split");
    std::optional<Climatology> clim;
    if (options.climatology) {
        clim.emplace(manifest, Split::train, options.thresholds);
        out.climatology.emplace();
    }
    if (options.persistence) out.persistence.emplace();

    for (std::size_t i : out.issue_indices) {
        const auto w = make_window(manifest, i, T, H);
        std::optional<Tensor> oracle;
        if (options.oracle_input) oracle = w.targets;
        const auto preds = pipeline_predict(stage1, stage2, w.inputs, w.dem, w.timestamp, H, oracle);
        std::optional<Tensor> last_obs;
        if (options.persistence) last_obs = read_frame(manifest.resolve(manifest.records[i].path)).channel_tensor(kTagRain);
        const std::size_t plane = manifest.width * manifest.height;
        for (std::size_t l = 1; l <= H; ++l) {
            const auto& rec = manifest.records[i + l];
            const Tensor obs({1, manifest.height, manifest.width},
                             std::vector<float>(w.radar.data().begin() + (l - 1) * plane,
                                                w.radar.data().begin() + l * plane));
            ScoredFrame f{rec.iso, rec.month, static_cast<int>(l), preds[l - 1].rate};
            accumulate(out.model, f, obs, options.thresholds);
            if (clim) {
                f.rate = clim->field(rec.month, rec.hour);
                accumulate(*out.climatology, f, obs, options.thresholds);
            }
            if (last_obs) {
                f.rate = *last_obs;
                accumulate(*out.persistence, f, obs, options.thresholds);
            }
        }
        ++out.windows;
    }
    return out;
}

std::string run_manifest(const std::vector<std::pair<std::string, std::string>>& entries) {
    auto sorted = entries;
    std::sort(sorted.begin(), sorted.end());
    std::string out;
    for (const auto& [k, v] : sorted) out += k + '=' + v + '\n';
    return out;
}

}  // namespace npm
