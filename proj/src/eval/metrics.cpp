#include "npm/metrics.hpp"

#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

namespace npm {

ContingencyTable contingency(const Tensor& pred, const Tensor& obs, double threshold, std::span<const std::uint8_t> mask) {
    if (pred.numel() != obs.numel()) {
        throw ShapeError("prediction " + to_string(pred.shape()) + " and observation " + to_string(obs.shape()) +
                         " differ");
    }
    if (!mask.empty() && mask.size() != pred.numel()) throw ShapeError("mask size does not match the fields");
    if (!(threshold > 0)) throw ConfigError("threshold must be positive");
    ContingencyTable t;
    auto p = pred.data();
    auto o = obs.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!mask.empty() && mask[i]) continue;
        const bool fp_event = p[i] >= threshold, ob_event = o[i] >= threshold;
        if (fp_event && ob_event) {
            ++t.tp;
        } else if (fp_event) {
            ++t.fp;
        } else if (ob_event) {
            ++t.fn;
        } else {
            ++t.tn;
        }
    }
    return t;
}

std::optional<double> csi(const ContingencyTable& t) {
    const auto d = t.tp + t.fp + t.fn;
    if (d == 0) return std::nullopt;
    return static_cast<double>(t.tp) / static_cast<double>(d);
}

std::optional<double> pod(const ContingencyTable& t) {
    const auto d = t.tp + t.fn;
    if (d == 0) return std::nullopt;
    return static_cast<double>(t.tp) / static_cast<double>(d);
}

std::optional<double> far(const ContingencyTable& t) {
    const auto d = t.tp + t.fp;
    if (d == 0) return std::nullopt;
    return static_cast<double>(t.fp) / static_cast<double>(d);
}

std::string format_score(std::optional<double> s) {
    if (!s) return "";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, *s);
    return std::string(buf, r.ptr);
}

void ScoreBreakdown::merge(const ScoreBreakdown& other) {
    for (const auto& [k, t] : other.cells_) cells_[k] += t;
}

std::vector<double> ScoreBreakdown::thresholds() const {
    std::set<double> s;
    for (const auto& [k, t] : cells_) s.insert(k.threshold);
    return {s.begin(), s.end()};
}

std::vector<int> ScoreBreakdown::leads() const {
    std::set<int> s;
    for (const auto& [k, t] : cells_) s.insert(k.lead);
    return {s.begin(), s.end()};
}

std::vector<int> ScoreBreakdown::months() const {
    std::set<int> s;
    for (const auto& [k, t] : cells_) s.insert(k.month);
    return {s.begin(), s.end()};
}

ContingencyTable ScoreBreakdown::pooled(double threshold, std::optional<int> lead, std::optional<int> month) const {
    ContingencyTable out;
    for (const auto& [k, t] : cells_) {
        if (k.threshold != threshold) continue;
        if (lead && k.lead != *lead) continue;
        if (month && k.month != *month) continue;
        out += t;
    }
    return out;
}

namespace {

std::string row(const ContingencyTable& t) {
    return std::to_string(t.tp) + ',' + std::to_string(t.fp) + ',' + std::to_string(t.fn) + ',' +
           std::to_string(t.tn) + ',' + format_score(csi(t)) + ',' + format_score(pod(t)) + ',' + format_score(far(t));
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

template <typename V>
bool parse_num(const std::string& s, V& v) {
    if (s.empty()) return false;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    return r.ec == std::errc{} && r.ptr == s.data() + s.size();
}

}  // namespace

std::string ScoreBreakdown::to_csv() const {
    std::string out = "threshold_mm,lead_h,month,tp,fp,fn,tn,csi,pod,far\n";
    for (const auto& [k, t] : cells_) {
        out += format_score(k.threshold) + ',' + std::to_string(k.lead) + ',' + std::to_string(k.month) + ',' + row(t) +
               '\n';
    }
    return out;
}

ScoreBreakdown ScoreBreakdown::from_csv(std::string_view text) {
    ScoreBreakdown out;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "threshold_mm,lead_h,month,tp,fp,fn,tn,csi,pod,far") throw ParseError("bad CSV header", 1);
            continue;
        }
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != 10) throw ParseError("expected 10 fields, got " + std::to_string(f.size()), line_no);
        ScoreKey k;
        ContingencyTable t;
        if (!parse_num(f[0], k.threshold) || !parse_num(f[1], k.lead) || !parse_num(f[2], k.month) ||
            !parse_num(f[3], t.tp) || !parse_num(f[4], t.fp) || !parse_num(f[5], t.fn) || !parse_num(f[6], t.tn)) {
            throw ParseError("malformed CSV row", line_no);
        }
        const std::optional<double> expect[3] = {csi(t), pod(t), far(t)};
        for (int s = 0; s < 3; ++s) {
            if (f[7 + s] != format_score(expect[s])) throw ParseError("score disagrees with its counts", line_no);
        }
        if (out.cells_.count(k)) throw ParseError("duplicate cell", line_no);
        out.cells_[k] = t;
    }
    if (line_no == 0) throw ParseError("empty CSV", 0);
    return out;
}

std::string monthly_summary_csv(const ScoreBreakdown& scores) {
    std::string out = "month,threshold_mm,tp,fp,fn,tn,csi,pod,far\n";
    for (int m : scores.months()) {
        for (double th : scores.thresholds()) {
            out += std::to_string(m) + ',' + format_score(th) + ',' + row(scores.pooled(th, std::nullopt, m)) + '\n';
        }
    }
    return out;
}

double EvalReport::mse(int lead) const {
    auto it = pixels.find(lead);
    if (it == pixels.end() || it->second == 0) return std::nan("");
    return sse.at(lead) / static_cast<double>(it->second);
}

void accumulate(EvalReport& report, const ScoredFrame& prediction, const Tensor& observation,
                const std::vector<double>& thresholds, std::span<const std::uint8_t> mask) {
    for (double th : thresholds) {
        report.scores.add(ScoreKey{th, prediction.lead, prediction.month},
                          contingency(prediction.rate, observation, th, mask));
    }
    auto p = prediction.rate.data();
    auto o = observation.data();
    double sse = 0;
    std::uint64_t count = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!mask.empty() && mask[i]) continue;
        const double d = static_cast<double>(p[i]) - o[i];
        sse += d * d;
        ++count;
    }
    report.sse[prediction.lead] += sse;
    report.pixels[prediction.lead] += count;
}

EvalReport evaluate_run(const std::vector<ScoredFrame>& predictions, const ObservationLookup& observations,
                        const std::vector<double>& thresholds, std::span<const std::uint8_t> mask) {
    EvalReport report;
    for (const auto& p : predictions) {
        auto obs = observations(p);
        if (!obs) {
            report.skipped.push_back(p.valid_iso + " lead " + std::to_string(p.lead));
            continue;
        }
        accumulate(report, p, *obs, thresholds, mask);
    }
    return report;
}

}  // namespace npm
