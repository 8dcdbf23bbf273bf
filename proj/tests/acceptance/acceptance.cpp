// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Criteria 7-9 generate the default two-year synthetic
// archive, train both stages through the CLI and score the held-out year.

#include <CLI11.hpp>

#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "commands.hpp"
#include "fixtures.hpp"
#include "npm/checkpoint.hpp"
#include "npm/data.hpp"
#include "npm/embedding.hpp"
#include "npm/losses.hpp"
#include "npm/metrics.hpp"
#include "npm/model_stage1.hpp"
#include "npm/model_stage2.hpp"
#include "npm/synthetic.hpp"
#include "npm/training.hpp"
#include "op_cases.hpp"
#include "support.hpp"

using namespace npm;
using namespace npm::test;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

// Upper 1% point of the chi-square distribution with 11 degrees of freedom.
constexpr double kChiSquare11At01 = 24.725;

Outcome gradients() {
    double ops = 0;
    std::string worst_op;
    for (const auto& c : differentiable_op_cases()) {
        const double e = grad_check(c.f, c.inputs);
        if (e > ops) ops = e, worst_op = c.name;
    }

    NpmModel<double> model(tiny(2, 2), 11);
    const auto w = blob_window(2, 2, 8, 0.5, {199, 15});
    const auto x = w.inputs.cast<double>(), dem = w.dem.cast<double>(), tg = w.targets.cast<double>();
    auto loss = [&](const Tensor64& in, const Tensor64& d) {
        return stage1_loss(model.forward(in, d, w.timestamp), tg, 0.1).total;
    };
    const double params = param_grad_check(model.params(), [&] { return loss(x, dem); }, SIZE_MAX);
    const double inputs = grad_check([&](const std::vector<Tensor64>& v) { return loss(v[0], v[1]); }, {x, dem});

    const double worst = std::max({ops, params, inputs});
    return {worst < 1e-4, "ops " + num(ops) + " (" + worst_op + "), model params " + num(params) + ", model inputs " +
                              num(inputs) + " over " + std::to_string(model.params().total_count()) + " parameters"};
}

Outcome contingency_oracle() {
    std::mt19937_64 rng(2024);
    std::size_t grids = 0, mismatches = 0;
    double score_gap = 0;
    auto compare = [&](std::optional<double> got, long double num_, long double den) {
        if (den == 0) {
            if (got) ++mismatches;
            return;
        }
        if (!got) {
            ++mismatches;
            return;
        }
        score_gap = std::max(score_gap, double(std::abs(static_cast<long double>(*got) - num_ / den)));
    };
    const std::array<float, 6> edges{0.0f, 1.0f, 4.0f, 8.0f, 0.999f, 7.5f};
    for (; grids < 1000; ++grids) {
        const std::size_t h = 1 + rng() % 12, w = 1 + rng() % 12;
        std::vector<float> p(h * w), o(h * w);
        const double wet = std::uniform_real_distribution<double>(0, 1)(rng);
        for (std::size_t i = 0; i < p.size(); ++i) {
            for (auto* v : {&p[i], &o[i]}) {
                if (std::uniform_real_distribution<double>(0, 1)(rng) > wet) *v = 0;
                else if (rng() % 4 == 0) *v = edges[rng() % edges.size()];
                else *v = float(std::uniform_real_distribution<double>(0, 12)(rng));
            }
        }
        std::vector<std::uint8_t> mask;
        if (rng() % 3 == 0) {
            mask.resize(p.size());
            for (auto& m : mask) m = rng() % 5 == 0;
        }
        const Tensor tp({1, h, w}, p), to({1, h, w}, o);
        for (double thr : kDefaultThresholds) {
            std::uint64_t a = 0, b = 0, c = 0, d = 0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (!mask.empty() && mask[i]) continue;
                const bool pe = p[i] >= thr, oe = o[i] >= thr;
                a += pe && oe;
                b += pe && !oe;
                c += !pe && oe;
                d += !pe && !oe;
            }
            const auto t = contingency(tp, to, thr, mask);
            if (t.tp != a || t.fp != b || t.fn != c || t.tn != d) ++mismatches;
            compare(csi(t), a, a + b + c);
            compare(pod(t), a, a + c);
            compare(far(t), b, a + b);
        }
    }
    return {mismatches == 0 && score_gap <= 1e-12, std::to_string(grids) + " grids, " + std::to_string(mismatches) +
                                                       " mismatches, largest score gap " + num(score_gap)};
}

double chi_square(const std::array<double, 12>& seen, const std::array<double, 12>& expected) {
    double x = 0;
    for (int k = 0; k < 12; ++k) x += (seen[k] - expected[k]) * (seen[k] - expected[k]) / expected[k];
    return x;
}

Outcome sampler_distribution() {
    const auto m = hourly_manifest("2021-01-01T00", 2 * 365 * 24);
    const std::size_t draws = 120000;
    std::mt19937_64 rng(7);

    SeasonAwareSampler uniform(m, Split::train, 6, 6);
    std::array<double, 12> seen{}, expected{};
    for (std::size_t k = 0; k < draws; ++k) seen[m.records[uniform.sample(rng)].month - 1] += 1;
    expected.fill(double(draws) / 12);
    const double flat = chi_square(seen, expected);

    MonthWeights weights;
    weights.fill(1.0);
    weights[6] = 3.0;
    SeasonAwareSampler skewed(m, Split::train, 6, 6, weights);
    seen.fill(0);
    for (std::size_t k = 0; k < draws; ++k) seen[m.records[skewed.sample(rng)].month - 1] += 1;
    for (int k = 0; k < 12; ++k) expected[k] = draws * weights[k] / 14.0;
    const double heavy = chi_square(seen, expected);

    return {flat < kChiSquare11At01 && heavy < kChiSquare11At01,
            "uniform chi2 " + num(flat) + ", July x3 chi2 " + num(heavy) + " (July share " +
                num(seen[6] / draws) + " vs " + num(3.0 / 14) + "), critical " + num(kChiSquare11At01)};
}

// KL between softmaxes of two difference vectors, in long double.
long double kl_scalar(const std::vector<long double>& dp, const std::vector<long double>& dq) {
    auto softmax = [](const std::vector<long double>& v) {
        const long double m = *std::max_element(v.begin(), v.end());
        std::vector<long double> e(v.size());
        long double z = 0;
        for (std::size_t i = 0; i < v.size(); ++i) z += e[i] = std::exp(v[i] - m);
        for (auto& x : e) x /= z;
        return e;
    };
    const auto p = softmax(dp), q = softmax(dq);
    long double kl = 0;
    for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
    return kl;
}

Outcome regulariser() {
    double self = 0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto a = random64({2 + s % 4, 1 + s % 3, 3, 2 + s % 2}, 500 + s, -3, 3);
        self = std::max(self, std::abs(temporal_consistency(a, a).item()));
    }
    double lowest = 1;
    for (std::uint64_t s = 0; s < 1000; ++s) {
        // Odd seeds: near-identical pairs.
        const auto p = random64({3, 2, 2, 2}, 2 * s + 1000, -2, 2);
        const auto noise = random64({3, 2, 2, 2}, 2 * s + 1001, -2, 2);
        const auto q = s % 2 ? add(p, scale(noise, 1e-7)) : noise;
        lowest = std::min(lowest, temporal_consistency(p, q).item());
    }
    // Two-frame sequences: frame 0 then frame 1, so the single difference is frame 1 - frame 0.
    const std::vector<std::pair<std::vector<double>, std::vector<double>>> cases{
        {{0, 0, 1, 0}, {0, 0, 0, 1}},
        {{1, 2, 3, 0.5, -1, 2}, {0, 0, 0, 1, 1, 1}},
        {{0.2, -0.4, 1.5, 0.0, 0.1, 0.3, -0.2, 0.9}, {0.5, 0.5, 0.5, 0.5, -1.0, 2.0, 0.0, 0.25}},
        {{3, 3, 3, 3, 3, 3}, {-2, 4, 0.5, 1, 1, 1}},
    };
    double gap = 0;
    for (const auto& [pv, qv] : cases) {
        const std::size_t half = pv.size() / 2;
        const Tensor64 p({2, 1, 1, half}, pv), q({2, 1, 1, half}, qv);
        std::vector<long double> dp(half), dq(half);
        for (std::size_t i = 0; i < half; ++i) {
            dp[i] = static_cast<long double>(pv[half + i]) - pv[i];
            dq[i] = static_cast<long double>(qv[half + i]) - qv[i];
        }
        gap = std::max(gap, double(std::abs(temporal_consistency(p, q).item() - kl_scalar(dp, dq))));
    }
    return {self <= 1e-9 && lowest >= -1e-7 && gap <= 1e-9,
            "self " + num(self) + ", lowest of 1000 " + num(lowest) + ", oracle gap " + num(gap)};
}

Outcome positional() {
    std::vector<std::vector<double>> codes;
    for (int d = 0; d < TimeStamp::kDays; ++d) codes.push_back(positional_encode(d, 32));
    double closest = 1e9, extreme = 0;
    for (std::size_t a = 0; a < codes.size(); ++a) {
        for (double v : codes[a]) extreme = std::max(extreme, std::abs(v));
        for (std::size_t b = a + 1; b < codes.size(); ++b) {
            double g = 0;
            for (std::size_t k = 0; k < 32; ++k) g = std::max(g, std::abs(codes[a][k] - codes[b][k]));
            closest = std::min(closest, g);
        }
    }
    double spot = 0;
    for (double x : {0.0, 1.0, 15.0, 23.0, 199.0, 365.0})
        for (std::size_t d : {8u, 32u, 64u}) {
            const auto v = positional_encode(x, d);
            for (std::size_t k = 0; k < d; ++k) {
                const long double freq = std::pow(10000.0L, static_cast<long double>(2 * (k / 2)) / d);
                const long double ref = k % 2 == 0 ? std::sin(x / freq) : std::cos(x / freq);
                spot = std::max(spot, double(std::abs(v[k] - ref)));
            }
        }
    return {closest > 1e-9 && extreme <= 1.0 && spot <= 1e-12,
            "closest pair " + num(closest) + ", max |value| " + num(extreme) + ", spot error " + num(spot)};
}

Outcome overfit() {
    auto cfg = tiny(3, 3);
    cfg.enc_channels = 8;
    cfg.st_channels = 16;
    cfg.crop = 16;
    NpmModel<float> s1(cfg, 13);
    AdamW<float> opt(s1.params());
    const std::vector<ForecastBatch> batch{blob_window(3, 3, 16, 0, {180, 12})};
    const double first1 = train_step<float>(s1, batch, opt, 3e-3, 0.1).total_value;
    double last1 = first1;
    for (int k = 0; k < 199; ++k) last1 = train_step<float>(s1, batch, opt, 3e-3, 0.1).total_value;

    S2rConfig c2;
    c2.base_width = 8;
    c2.depth = 1;
    c2.disc_depth = 1;
    S2rModel<double> s2(c2, 12);
    AdamW<double> g(s2.gen_params()), d(s2.disc_params());
    const auto b = paired_batch(2, 8, 13);
    const double first2 = s2r_train_step(s2, b, 0.01, g, d, 3e-3, 1e-3).first.mse;
    double last2 = first2;
    for (int k = 0; k < 199; ++k) last2 = s2r_train_step(s2, b, 0.01, g, d, 3e-3, 1e-3).first.mse;

    return {last1 < 0.1 * first1 && last2 < 0.1 * first2,
            "stage 1 " + num(first1) + " -> " + num(last1) + ", stage 2 mse " + num(first2) + " -> " + num(last2)};
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

Outcome round_trips(const fs::path& work) {
    std::mt19937_64 rng(10);
    const std::vector<std::string> tags{"IR105", "WV063", "WV073", "RRATE", "RRATE_PR", "DEM"};
    const auto dir = work / "round_trip";
    fs::create_directories(dir);
    std::size_t bad_frames = 0, bad_ckpts = 0;
    for (int k = 0; k < 100; ++k) {
        Frame f;
        f.width = 1 + rng() % 20;
        f.height = 1 + rng() % 20;
        for (const auto& t : tags)
            if (rng() % 2 || (f.tags.empty() && &t == &tags.back())) f.tags.push_back(t);
        std::uniform_real_distribution<float> u(0, 400);
        f.values.resize(f.tags.size() * f.width * f.height);
        for (auto& v : f.values) v = u(rng);
        const auto bytes = encode_frame(f);
        const auto back = decode_frame(bytes);
        write_frame(dir / "f.npmf", f);
        const auto disk = read_frame(dir / "f.npmf");
        if (!(back == f) || !same_bits(back.values, f.values) || encode_frame(back) != bytes || !(disk == f))
            ++bad_frames;

        Checkpoint c;
        for (std::size_t r = 0, n = 1 + rng() % 6; r < n; ++r) {
            Shape s;
            for (std::size_t a = 0, rank = 1 + rng() % 4; a < rank; ++a) s.push_back(1 + rng() % 5);
            c.add("layer" + std::to_string(r) + ".w", random32(s, rng(), -1e3, 1e3));
        }
        const auto cbytes = c.encode();
        const auto cback = Checkpoint::decode(cbytes);
        c.save(dir / "c.ckpt");
        bool ok = cback == c && cback.encode() == cbytes && Checkpoint::load(dir / "c.ckpt") == c;
        for (std::size_t r = 0; ok && r < c.records().size(); ++r)
            ok = same_bits(c.records()[r].values, cback.records()[r].values);
        if (!ok) ++bad_ckpts;
    }

    Manifest m;
    m.width = 64;
    m.height = 48;
    m.bounds = {{"IR105", 160.25, 320.5}, {"RRATE", 0, 100}, {"DEM", -12.125, 2000.0625}};
    m.dem_path = "static/dem.npmf";
    m.comments = {"synthetic archive", "seed 9"};
    std::int64_t t = parse_iso_hours("2020-02-27T22");
    for (int k = 0; k < 500; ++k) {
        t += 1 + (rng() % 10 == 0 ? std::int64_t(rng() % 48) : 0);
        m.records.push_back(record_at(t, k < 400 ? Split::train : Split::test, "frames/f" + std::to_string(k) + ".npmf"));
    }
    const auto text = m.serialize();
    const bool text_ok = Manifest::parse(text) == m && Manifest::parse(text).serialize() == text;
    m.save(dir / "manifest.txt");
    const bool disk_ok = Manifest::load(dir / "manifest.txt") == m;

    return {bad_frames == 0 && bad_ckpts == 0 && text_ok && disk_ok,
            "frames " + std::to_string(100 - bad_frames) + "/100, checkpoints " + std::to_string(100 - bad_ckpts) +
                "/100, manifest " + (text_ok && disk_ok ? "lossless" : "differs")};
}

// Default synthetic archive and both stages trained on it, built once for
// criteria 7-9.
struct Pipeline {
    fs::path root;
    Manifest manifest;
    std::optional<NpmModel<float>> stage1, plain;
    std::optional<S2rModel<float>> stage2;
    std::optional<EvalOutputs> with, without;
    std::size_t stride = 6;
};

void run_cli(const std::vector<std::string>& args) {
    std::cout << "  npm";
    for (const auto& a : args) std::cout << ' ' << a;
    std::cout << std::endl;
    std::ostringstream err;
    const int code = cli::run(args, std::cout, err);
    if (code != cli::kExitOk) throw std::runtime_error("command failed: " + err.str());
}

Pipeline& pipeline(const fs::path& work, bool reuse, std::size_t stride) {
    static std::optional<Pipeline> p;
    if (p) return *p;
    p.emplace();
    p->root = work;
    p->stride = stride;
    const auto ds = work / "ds", manifest = ds / "manifest.txt";
    const auto s1 = work / "s1" / "stage1.ckpt", s2 = work / "s2" / "stage2.ckpt";
    const auto s1_plain = work / "s1_noemb" / "stage1.ckpt";
    if (!reuse || !fs::exists(manifest)) run_cli({"gen-data", "--out", ds.string(), "--force"});
    if (!reuse || !fs::exists(s2))
        run_cli({"train-stage2", "--manifest", manifest.string(), "--out", (work / "s2").string(), "--log-every", "500"});
    if (!reuse || !fs::exists(s1))
        run_cli({"train-stage1", "--manifest", manifest.string(), "--out", (work / "s1").string(), "--log-every", "500"});
    if (!reuse || !fs::exists(s1_plain))
        run_cli({"train-stage1", "--manifest", manifest.string(), "--out", (work / "s1_noemb").string(),
                 "--no-embedding", "--log-every", "500"});

    p->manifest = Manifest::load(manifest);
    p->stage1.emplace(NpmModel<float>::from_checkpoint(Checkpoint::load(s1)));
    p->plain.emplace(NpmModel<float>::from_checkpoint(Checkpoint::load(s1_plain)));
    p->stage2.emplace(S2rModel<float>::from_checkpoint(Checkpoint::load(s2)));

    EvalOptions o;
    o.split = Split::test;
    o.stride = stride;
    o.climatology = true;
    p->with = evaluate_pipeline(p->manifest, *p->stage1, *p->stage2, o);
    o.climatology = false;
    p->without = evaluate_pipeline(p->manifest, *p->plain, *p->stage2, o);
    return *p;
}

std::optional<double> csi_at(const EvalReport& r, double thr, std::optional<int> lead) {
    return csi(r.scores.pooled(thr, lead));
}

std::string score(std::optional<double> v) { return v ? num(*v) : "undefined"; }

Outcome end_to_end(Pipeline& p) {
    const auto& model = p.with->model;
    const auto& clim = *p.with->climatology;
    const auto c1 = csi_at(model, 1, 1), c4 = csi_at(model, 4, 1), c8 = csi_at(model, 8, 1);
    const auto base = csi_at(clim, 1, 1);
    const bool beats = c1 && base && *c1 > *base;
    const bool monotone = c1 && c4 && c8 && *c1 >= *c4 && *c4 >= *c8;
    return {beats && monotone, std::to_string(p.with->windows) + " windows, lead 1 CSI 1/4/8 mm " +
                                   score(c1) + " / " + score(c4) + " / " + score(c8) +
                                   ", climatology 1 mm " + score(base)};
}

double frame_mse(std::span<const float> a, std::span<const float> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
    return s / double(a.size());
}

Outcome counterfactual(Pipeline& p) {
    const auto& m = p.manifest;
    const auto& model = *p.stage1;
    const std::size_t T = model.config().T, T_out = model.config().T_out;
    const SynthConfig synth;
    const int opposite = TimeStamp::kDays / 2 * 24;

    // Issue time on the peak-rain day of the held-out year.
    std::optional<std::size_t> peak;
    for (std::size_t i = 0; i < m.records.size() && !peak; ++i) {
        const auto& r = m.records[i];
        if (r.split == Split::test && r.doy == int(synth.peak_doy) && r.hour == int(synth.peak_hour) &&
            m.valid_window(i, T, T_out))
            peak = i;
    }
    if (!peak) return {false, "no held-out window on the peak day"};
    const auto w = make_window(m, *peak, T, T_out);
    const auto [orig, swapped] =
        counterfactual_day(model, w.inputs, w.dem, w.timestamp, w.timestamp.advanced(opposite));
    const std::size_t frame = orig.numel() / T_out;
    double smallest = 1e9;
    for (std::size_t l = 0; l < T_out; ++l) {
        double acc = 0;
        for (std::size_t i = 0; i < frame; ++i) acc += std::abs(double(orig[l * frame + i]) - swapped[l * frame + i]);
        smallest = std::min(smallest, acc / double(frame));
    }

    // Windows within 45 days of the peak are tallied separately for the report.
    std::size_t wins = 0, total = 0, peak_wins = 0, peak_total = 0;
    for (auto i : evaluation_windows(m, Split::test, T, T_out, p.stride)) {
        const auto win = make_window(m, i, T, T_out);
        const auto [right, wrong] =
            counterfactual_day(model, win.inputs, win.dem, win.timestamp, win.timestamp.advanced(opposite));
        const auto target = win.targets.data();
        const bool better = frame_mse(right.data(), target) < frame_mse(wrong.data(), target);
        wins += better;
        ++total;
        const double off = std::abs(m.records[i].doy - synth.peak_doy);
        if (std::min(off, 365 - off) <= 45) peak_wins += better, ++peak_total;
    }
    const double share = total ? double(wins) / double(total) : 0.0;
    return {smallest > 0 && share >= 0.9,
            "peak day " + w.timestamp.to_string() + ", smallest per-frame mean |diff| " + num(smallest) +
                ", correct condition better on " + std::to_string(wins) + "/" + std::to_string(total) +
                " held-out windows (" + std::to_string(peak_wins) + "/" + std::to_string(peak_total) +
                " within 45 days of the peak)"};
}

Outcome ablation(Pipeline& p) {
    const auto full = csi_at(p.with->model, 1, std::nullopt), bare = csi_at(p.without->model, 1, std::nullopt);
    const auto full1 = csi_at(p.with->model, 1, 1), bare1 = csi_at(p.without->model, 1, 1);
    return {full && bare && *full >= *bare, "CSI 1 mm over all leads: embedding " + score(full) +
                                                ", no embedding " + score(bare) + " (lead 1: " +
                                                score(full1) + " vs " + score(bare1) + ")"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app("Acceptance criteria");
    std::string work = (fs::temp_directory_path() / "npm_acceptance").string();
    bool reuse = false;
    std::vector<int> only;
    std::size_t stride = 6;
    app.add_option("--work", work, "Directory for the synthetic archive and trained models");
    app.add_flag("--reuse", reuse, "Keep an existing archive and checkpoints in --work");
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--eval-stride", stride, "Hours between evaluated issue times")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);
    if (!reuse) fs::remove_all(work);
    fs::create_directories(work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient integrity", gradients},
        {"contingency oracle", contingency_oracle},
        {"sampler distribution", sampler_distribution},
        {"regulariser properties", regulariser},
        {"positional encoding", positional},
        {"overfit smoke tests", overfit},
        {"synthetic end-to-end skill", [&] { return end_to_end(pipeline(work, reuse, stride)); }},
        {"day-embedding counterfactual", [&] { return counterfactual(pipeline(work, reuse, stride)); }},
        {"embedding ablation direction", [&] { return ablation(pipeline(work, reuse, stride)); }},
        {"format round trips", [&] { return round_trips(work); }},
    };

    bool all = true;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = int(k) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome r;
        try {
            r = criteria[k].second();
        } catch (const std::exception& e) {
            r = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        all = all && r.pass;
        std::cout << "criterion " << id << " " << criteria[k].first << ": " << (r.pass ? "PASS" : "FAIL") << " ("
                  << r.detail << "; " << num(secs) << " s)" << std::endl;
    }
    return all ? 0 : 1;
}
