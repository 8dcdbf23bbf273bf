#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "npm/checkpoint.hpp"
#include "npm/data.hpp"
#include "npm/error.hpp"
#include "npm/metrics.hpp"
#include "npm/model_stage1.hpp"
#include "npm/model_stage2.hpp"
#include "npm/quicklook.hpp"
#include "npm/synthetic.hpp"
#include "npm/training.hpp"

namespace npm::cli {
namespace fs = std::filesystem;

namespace {

struct GenArgs {
    std::string out;
    std::uint64_t seed = 1;
    std::size_t grid = 64;
    int years = 2;
    int test_years = -1;
    std::string start = "2021-01-01T00:00:00Z";
    bool rain_noise = false;
    bool force = false;
};

struct Stage1Args {
    std::string manifest, out, resume, month_weights;
    std::uint64_t seed = 1;
    std::size_t steps = 4000, batch = 4, crop = 48, checkpoint_every = 250, log_every = 100;
    double alpha = 0.1, lr = 2e-3, lr_floor = 1e-5;
    std::size_t T = 6, T_out = 6, stages = 4, blocks = 3, enc_channels = 16, st_channels = 128;
    bool no_embedding = false, no_dem = false;
};

struct Stage2Args {
    std::string manifest, out, resume, month_weights;
    std::uint64_t seed = 1;
    std::size_t steps = 2000, batch = 8, crop = 32, checkpoint_every = 250, log_every = 100;
    double lambda = 0.01, lr = 1e-3, disc_lr = 0, lr_floor = 1e-5, rate_max = 100;
    std::size_t base_width = 16, depth = 1, disc_depth = 2;
    bool no_dem = false;
};

struct PredictArgs {
    std::string manifest, stage1, stage2, timestamp, out;
    std::size_t horizon = 0;
};

struct EvalArgs {
    std::string manifest, stage1, stage2, out, split = "test";
    std::vector<double> thresholds = kDefaultThresholds;
    std::size_t horizon = 0, stride = 1, max_windows = 0;
    bool oracle_input = false, climatology = false, persistence = false;
};

struct CounterfactualArgs {
    std::string manifest, stage1, timestamp, alt_timestamp, out;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

void snapshot(const CLI::App& sub, const fs::path& dir) {
    fs::create_directories(dir);
    write_text(dir / "config.ini", "[" + sub.get_name() + "]\n" + sub.config_to_str(true, false));
}

std::int64_t timestamp_hours(const std::string& iso) {
    try {
        return parse_iso_hours(iso);
    } catch (const ParseError& e) {
        throw ConfigError("bad timestamp '" + iso + "': " + e.what());
    }
}

std::optional<MonthWeights> month_weights(const std::string& text) {
    if (text.empty()) return std::nullopt;
    MonthWeights w{};
    std::stringstream ss(text);
    std::string item;
    std::size_t n = 0;
    while (std::getline(ss, item, ',')) {
        if (n == 12) throw ConfigError("--month-weights takes 12 values");
        try {
            w[n++] = std::stod(item);
        } catch (const std::exception&) {
            throw ConfigError("bad month weight '" + item + "'");
        }
    }
    if (n != 12) throw ConfigError("--month-weights takes 12 values");
    return w;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string lead_name(std::size_t lead) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "lead%02zu", lead);
    return buf;
}

/// Index of the record at `iso` whose T-frame input window is complete;
/// otherwise a WindowError naming the nearest usable timestamps.
std::size_t input_window(const Manifest& m, const std::string& iso, std::size_t T) {
    const std::int64_t hours = timestamp_hours(iso);
    if (auto i = m.find(hours); i && m.valid_window(*i, T, 0)) return *i;
    std::vector<std::pair<std::int64_t, std::size_t>> near;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        if (m.valid_window(i, T, 0)) near.emplace_back(std::llabs(m.records[i].epoch_hours() - hours), i);
    }
    std::sort(near.begin(), near.end());
    std::string msg = "no complete " + std::to_string(T) + "-frame input window ending at " + iso;
    if (near.empty()) {
        msg += "; the manifest has no usable window";
    } else {
        msg += "; nearest valid timestamps:";
        for (std::size_t k = 0; k < std::min<std::size_t>(5, near.size()); ++k) msg += " " + m.records[near[k].second].iso;
    }
    throw WindowError(msg);
}

int cmd_gen_data(const CLI::App& sub, const GenArgs& a, std::ostream& out) {
    const fs::path dir(a.out);
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!a.force) throw ConfigError(dir.string() + " is not empty; pass --force to overwrite");
        fs::remove_all(dir);
    }
    SynthConfig cfg;
    cfg.seed = a.seed;
    cfg.grid = a.grid;
    cfg.years = a.years;
    cfg.test_years = a.test_years >= 0 ? a.test_years : (a.years > 1 ? 1 : 0);
    cfg.start = a.start;
    cfg.rain_noise = a.rain_noise;
    const Manifest m = generate_dataset(cfg, dir);
    snapshot(sub, dir);
    out << "manifest " << (dir / "manifest.txt").string() << "\n"
        << "records " << m.records.size() << " train " << m.count(Split::train) << " test " << m.count(Split::test)
        << "\n";
    return kExitOk;
}

std::function<void(const std::string&)> progress(std::ostream& out, std::size_t every) {
    return [&out, every, n = std::size_t{0}](const std::string& row) mutable {
        if (every > 0 && ++n % every == 0) out << row << "\n" << std::flush;
    };
}

int cmd_train_stage1(const CLI::App& sub, const Stage1Args& a, std::ostream& out) {
    const Manifest m = Manifest::load(a.manifest);
    NpmConfig cfg = NpmConfig::desk();
    cfg.T = a.T;
    cfg.T_out = a.T_out;
    cfg.enc_dec_stages = a.stages;
    cfg.st_blocks = a.blocks;
    cfg.enc_channels = a.enc_channels;
    cfg.st_channels = a.st_channels;
    cfg.use_time_embedding = !a.no_embedding;
    cfg.use_dem = !a.no_dem;
    cfg.alpha = a.alpha;
    cfg.lr = a.lr;
    cfg.lr_floor = a.lr_floor;
    cfg.crop = a.crop;
    cfg.total_steps = a.steps;
    TrainOptions o;
    o.out_dir = a.out;
    o.steps = a.steps;
    o.batch = a.batch;
    o.seed = a.seed;
    o.checkpoint_every = a.checkpoint_every;
    o.month_weights = month_weights(a.month_weights);
    if (!a.resume.empty()) o.resume = a.resume;
    o.on_log = progress(out, a.log_every);
    snapshot(sub, a.out);
    const auto s = train_stage1(m, cfg, o);
    out << "steps " << s.first_step << " -> " << s.last_step << " loss " << fmt(s.first_loss) << " -> "
        << fmt(s.last_loss) << "\n"
        << "checkpoint " << s.checkpoint.string() << "\n";
    return kExitOk;
}

int cmd_train_stage2(const CLI::App& sub, const Stage2Args& a, std::ostream& out) {
    const Manifest m = Manifest::load(a.manifest);
    S2rConfig cfg;
    cfg.use_dem = !a.no_dem;
    cfg.base_width = a.base_width;
    cfg.depth = a.depth;
    cfg.disc_depth = a.disc_depth;
    cfg.lambda = a.lambda;
    cfg.rate_max = a.rate_max;
    cfg.lr = a.lr;
    cfg.disc_lr = a.disc_lr > 0 ? a.disc_lr : a.lr;
    cfg.lr_floor = a.lr_floor;
    cfg.total_steps = a.steps;
    TrainOptions o;
    o.out_dir = a.out;
    o.steps = a.steps;
    o.batch = a.batch;
    o.crop = a.crop;
    o.seed = a.seed;
    o.checkpoint_every = a.checkpoint_every;
    o.month_weights = month_weights(a.month_weights);
    if (!a.resume.empty()) o.resume = a.resume;
    o.on_log = progress(out, a.log_every);
    snapshot(sub, a.out);
    const auto s = train_stage2(m, cfg, o);
    out << "steps " << s.first_step << " -> " << s.last_step << " loss " << fmt(s.first_loss) << " -> "
        << fmt(s.last_loss) << "\n"
        << "checkpoint " << s.checkpoint.string() << "\n";
    return kExitOk;
}

int cmd_predict(const CLI::App& sub, const PredictArgs& a, std::ostream& out) {
    const Manifest m = Manifest::load(a.manifest);
    const auto stage1 = NpmModel<float>::from_checkpoint(Checkpoint::load(a.stage1));
    const auto stage2 = S2rModel<float>::from_checkpoint(Checkpoint::load(a.stage2));
    const std::size_t index = input_window(m, a.timestamp, stage1.config().T);
    const auto w = make_window(m, index, stage1.config().T, 0);
    const auto preds = pipeline_predict(stage1, stage2, w.inputs, w.dem, w.timestamp, a.horizon);
    const fs::path dir(a.out);
    snapshot(sub, dir);
    const std::int64_t issue = m.records[index].epoch_hours();
    std::string index_csv = "lead_h,valid_time,frame,quicklook\n";
    for (const auto& p : preds) {
        const std::size_t lead = static_cast<std::size_t>(p.lead_hours);
        const std::string stem = "rain_" + lead_name(lead);
        write_frame(dir / (stem + ".npmf"), make_frame(p.rate, {std::string(kTagRainPred)}));
        write_rain_pgm(dir / (stem + ".pgm"), p.rate);
        const auto valid = record_at(issue + static_cast<std::int64_t>(lead) * m.interval_hours, Split::test, "");
        index_csv += std::to_string(lead) + "," + valid.iso + "," + stem + ".npmf," + stem + ".pgm\n";
    }
    write_text(dir / "predictions.csv", index_csv);
    out << "issued " << m.records[index].iso << ", " << preds.size() << " leads written to " << dir.string() << "\n";
    return kExitOk;
}

std::string mse_csv(const EvalReport& r) {
    std::string s = "lead_h,mse\n";
    for (const auto& [lead, sse] : r.sse) s += std::to_string(lead) + "," + fmt(r.mse(lead)) + "\n";
    return s;
}

int cmd_evaluate(const CLI::App& sub, const EvalArgs& a, std::ostream& out) {
    const Manifest m = Manifest::load(a.manifest);
    EvalOptions o;
    o.split = parse_split(a.split);
    if (m.count(o.split) == 0) throw ConfigError("the " + a.split + " split is empty");
    if (a.thresholds.empty()) throw ConfigError("--thresholds needs at least one value");
    const auto stage1 = NpmModel<float>::from_checkpoint(Checkpoint::load(a.stage1));
    const auto stage2 = S2rModel<float>::from_checkpoint(Checkpoint::load(a.stage2));
    o.thresholds = a.thresholds;
    o.horizon = a.horizon;
    o.stride = a.stride;
    o.max_windows = a.max_windows;
    o.oracle_input = a.oracle_input;
    o.climatology = a.climatology;
    o.persistence = a.persistence;
    const fs::path dir(a.out);
    snapshot(sub, dir);
    const auto r = evaluate_pipeline(m, stage1, stage2, o);
    write_text(dir / "metrics.csv", r.model.scores.to_csv());
    write_text(dir / "metrics_monthly.csv", monthly_summary_csv(r.model.scores));
    write_text(dir / "mse.csv", mse_csv(r.model));
    if (r.climatology) write_text(dir / "climatology_metrics.csv", r.climatology->scores.to_csv());
    if (r.persistence) write_text(dir / "persistence_metrics.csv", r.persistence->scores.to_csv());

    out << "windows " << r.windows << "\n";
    for (double th : o.thresholds) {
        out << "csi@" << fmt(th) << "mm lead1 model " << format_score(csi(r.model.scores.pooled(th, 1)));
        if (r.climatology) out << " climatology " << format_score(csi(r.climatology->scores.pooled(th, 1)));
        if (r.persistence) out << " persistence " << format_score(csi(r.persistence->scores.pooled(th, 1)));
        out << "\n";
    }
    return kExitOk;
}

int cmd_counterfactual(const CLI::App& sub, const CounterfactualArgs& a, std::ostream& out) {
    const Manifest m = Manifest::load(a.manifest);
    const auto stage1 = NpmModel<float>::from_checkpoint(Checkpoint::load(a.stage1));
    const std::size_t T = stage1.config().T, T_out = stage1.config().T_out;
    const std::size_t index = input_window(m, a.timestamp, T);
    const auto alt = record_at(timestamp_hours(a.alt_timestamp), Split::test, "").stamp();
    const auto w = make_window(m, index, T, 0);
    const auto [orig, swapped] = counterfactual_day(stage1, w.inputs, w.dem, w.timestamp, alt);
    const fs::path dir(a.out);
    snapshot(sub, dir);
    const std::size_t frame = orig.numel() / T_out, plane = m.width * m.height;
    auto po = orig.data();
    auto pa = swapped.data();
    std::string csv = "lead_h,mean_abs_diff\n";
    for (std::size_t l = 0; l < T_out; ++l) {
        double acc = 0;
        for (std::size_t i = 0; i < frame; ++i) acc += std::abs(double(po[l * frame + i]) - double(pa[l * frame + i]));
        csv += std::to_string(l + 1) + "," + fmt(acc / static_cast<double>(frame)) + "\n";
        const Shape s{1, m.height, m.width};
        const std::string lead = lead_name(l + 1);
        write_unit_pgm(dir / ("orig_" + lead + ".pgm"),
                       Tensor(s, std::vector<float>(po.begin() + l * frame, po.begin() + l * frame + plane)));
        write_unit_pgm(dir / ("alt_" + lead + ".pgm"),
                       Tensor(s, std::vector<float>(pa.begin() + l * frame, pa.begin() + l * frame + plane)));
    }
    write_text(dir / "counterfactual.csv", csv);
    out << "condition " << w.timestamp.to_string() << " vs " << alt.to_string() << "\n" << csv;
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Two-stage satellite-to-radar precipitation nowcasting", "npm"};
    app.set_config("--config", "", "INI/TOML file with one section per command; flags override it");
    app.require_subcommand(1);
    const CLI::Validator optional_file(
        [](std::string& v) { return v.empty() ? std::string() : CLI::ExistingFile(v); }, "FILE");

    GenArgs gen;
    auto* g = app.add_subcommand("gen-data", "Generate the synthetic dataset")->configurable();
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--seed", gen.seed)->capture_default_str();
    g->add_option("--grid", gen.grid, "Grid side in pixels")->capture_default_str();
    g->add_option("--years", gen.years)->capture_default_str();
    g->add_option("--test-years", gen.test_years, "Trailing test years (-1: 1 when years > 1)")->capture_default_str();
    g->add_option("--start", gen.start)->capture_default_str();
    g->add_flag("--rain-noise", gen.rain_noise, "Multiplicative noise on the rain law");
    g->add_flag("--force", gen.force, "Replace a non-empty output directory");

    Stage1Args s1;
    auto* t1 = app.add_subcommand("train-stage1", "Train the satellite forecaster")->configurable();
    t1->add_option("--manifest", s1.manifest)->required()->check(CLI::ExistingFile);
    t1->add_option("--out", s1.out)->required();
    t1->add_option("--seed", s1.seed)->capture_default_str();
    t1->add_option("--steps", s1.steps)->capture_default_str();
    t1->add_option("--batch", s1.batch)->capture_default_str();
    t1->add_option("--crop", s1.crop)->capture_default_str();
    t1->add_option("--alpha", s1.alpha, "Temporal-consistency weight")->capture_default_str();
    t1->add_option("--lr", s1.lr)->capture_default_str();
    t1->add_option("--lr-floor", s1.lr_floor)->capture_default_str();
    t1->add_option("--T", s1.T, "Input frames")->capture_default_str();
    t1->add_option("--T-out", s1.T_out, "Output frames")->capture_default_str();
    t1->add_option("--stages", s1.stages, "Encoder/decoder stages")->capture_default_str();
    t1->add_option("--blocks", s1.blocks, "ST-Blocks")->capture_default_str();
    t1->add_option("--enc-channels", s1.enc_channels)->capture_default_str();
    t1->add_option("--st-channels", s1.st_channels, "ST-Block feed-forward width")->capture_default_str();
    t1->add_flag("--no-embedding", s1.no_embedding, "Disable the day/hour embedding");
    t1->add_flag("--no-dem", s1.no_dem, "Do not feed the DEM");
    t1->add_option("--month-weights", s1.month_weights, "12 comma-separated sampling weights");
    t1->add_option("--checkpoint-every", s1.checkpoint_every)->capture_default_str();
    t1->add_option("--log-every", s1.log_every, "Print every n-th log row (0: never)")->capture_default_str();
    t1->add_option("--resume", s1.resume, "Checkpoint to continue from")->check(optional_file);

    Stage2Args s2;
    auto* t2 = app.add_subcommand("train-stage2", "Train the satellite-to-radar translator")->configurable();
    t2->add_option("--manifest", s2.manifest)->required()->check(CLI::ExistingFile);
    t2->add_option("--out", s2.out)->required();
    t2->add_option("--seed", s2.seed)->capture_default_str();
    t2->add_option("--steps", s2.steps)->capture_default_str();
    t2->add_option("--batch", s2.batch)->capture_default_str();
    t2->add_option("--crop", s2.crop)->capture_default_str();
    t2->add_option("--lambda", s2.lambda, "Adversarial weight")->capture_default_str();
    t2->add_option("--lr", s2.lr)->capture_default_str();
    t2->add_option("--disc-lr", s2.disc_lr, "Discriminator learning rate (0: same as --lr)")->capture_default_str();
    t2->add_option("--lr-floor", s2.lr_floor)->capture_default_str();
    t2->add_option("--rate-max", s2.rate_max, "Rain rate ceiling in mm/h")->capture_default_str();
    t2->add_option("--base-width", s2.base_width)->capture_default_str();
    t2->add_option("--depth", s2.depth, "Generator downsampling levels")->capture_default_str();
    t2->add_option("--disc-depth", s2.disc_depth)->capture_default_str();
    t2->add_flag("--no-dem", s2.no_dem, "Do not feed the DEM");
    t2->add_option("--month-weights", s2.month_weights, "12 comma-separated sampling weights");
    t2->add_option("--checkpoint-every", s2.checkpoint_every)->capture_default_str();
    t2->add_option("--log-every", s2.log_every)->capture_default_str();
    t2->add_option("--resume", s2.resume, "Checkpoint to continue from")->check(optional_file);

    PredictArgs pr;
    auto* p = app.add_subcommand("predict", "Forecast rain from one input window")->configurable();
    p->add_option("--manifest", pr.manifest)->required()->check(CLI::ExistingFile);
    p->add_option("--stage1", pr.stage1)->required()->check(CLI::ExistingFile);
    p->add_option("--stage2", pr.stage2)->required()->check(CLI::ExistingFile);
    p->add_option("--timestamp", pr.timestamp, "Last input frame, YYYY-MM-DDTHH")->required();
    p->add_option("--horizon", pr.horizon, "Lead hours (0: T_out)")->capture_default_str();
    p->add_option("--out", pr.out)->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("evaluate", "Score the pipeline over a split")->configurable();
    e->add_option("--manifest", ev.manifest)->required()->check(CLI::ExistingFile);
    e->add_option("--stage1", ev.stage1)->required()->check(CLI::ExistingFile);
    e->add_option("--stage2", ev.stage2)->required()->check(CLI::ExistingFile);
    e->add_option("--out", ev.out)->required();
    e->add_option("--thresholds", ev.thresholds, "mm/h")->delimiter(',')->capture_default_str();
    e->add_option("--horizon", ev.horizon)->capture_default_str();
    e->add_option("--eval-stride", ev.stride, "Hours between issue times")->capture_default_str();
    e->add_option("--max-windows", ev.max_windows, "0: all")->capture_default_str();
    e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    e->add_flag("--oracle-input", ev.oracle_input, "Translate observed satellite frames");
    e->add_flag("--climatology", ev.climatology, "Also score the climatology baseline");
    e->add_flag("--persistence", ev.persistence, "Also score persistence");

    CounterfactualArgs cf;
    auto* c = app.add_subcommand("counterfactual", "Compare forecasts under two calendar conditions")->configurable();
    c->add_option("--manifest", cf.manifest)->required()->check(CLI::ExistingFile);
    c->add_option("--stage1", cf.stage1)->required()->check(CLI::ExistingFile);
    c->add_option("--timestamp", cf.timestamp, "Input window")->required();
    c->add_option("--alt-timestamp", cf.alt_timestamp, "Calendar condition to swap in")->required();
    c->add_option("--out", cf.out)->required();

    std::vector<const char*> argv{"npm"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& ex) {
        app.exit(ex, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& ex) {
        app.exit(ex, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        app.exit(ex, out, err);
        return kExitUsage;
    }

    try {
        if (g->parsed()) return cmd_gen_data(*g, gen, out);
        if (t1->parsed()) return cmd_train_stage1(*t1, s1, out);
        if (t2->parsed()) return cmd_train_stage2(*t2, s2, out);
        if (p->parsed()) return cmd_predict(*p, pr, out);
        if (e->parsed()) return cmd_evaluate(*e, ev, out);
        if (c->parsed()) return cmd_counterfactual(*c, cf, out);
    } catch (const ConfigError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitUsage;
    } catch (const WindowError& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace npm::cli
