#pragma once

// Categorical verification of rain-rate forecasts: contingency tables at
// rain-rate thresholds, CSI / POD / FAR, and pooled aggregation per
// (threshold, lead hour, calendar month).

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npm/tensor.hpp"

namespace npm {

inline const std::vector<double> kDefaultThresholds{1.0, 4.0, 8.0};

struct ContingencyTable {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ContingencyTable& operator+=(const ContingencyTable& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend ContingencyTable operator+(ContingencyTable a, const ContingencyTable& b) { return a += b; }
    bool operator==(const ContingencyTable&) const = default;
};

/// Event means value >= threshold. Pixels with a nonzero mask entry are
/// excluded. Throws ShapeError on mismatched extents, ConfigError for a
/// non-positive threshold.
ContingencyTable contingency(const Tensor& pred, const Tensor& obs, double threshold,
                             std::span<const std::uint8_t> mask = {});

/// Undefined (nullopt) when the denominator is zero.
std::optional<double> csi(const ContingencyTable& t);
std::optional<double> pod(const ContingencyTable& t);
std::optional<double> far(const ContingencyTable& t);

struct ScoreKey {
    double threshold = 0;
    int lead = 0;
    int month = 0;

    auto operator<=>(const ScoreKey&) const = default;
};

class ScoreBreakdown {
public:
    void add(const ScoreKey& key, const ContingencyTable& t) { cells_[key] += t; }
    void merge(const ScoreBreakdown& other);

    const std::map<ScoreKey, ContingencyTable>& cells() const { return cells_; }
    bool empty() const { return cells_.empty(); }

    std::vector<double> thresholds() const;
    std::vector<int> leads() const;
    std::vector<int> months() const;

    /// Counts summed over every cell matching the given fields.
    ContingencyTable pooled(double threshold, std::optional<int> lead = std::nullopt,
                            std::optional<int> month = std::nullopt) const;

    /// Header: threshold_mm,lead_h,month,tp,fp,fn,tn,csi,pod,far. Undefined
    /// scores are empty cells.
    std::string to_csv() const;
    /// Throws ParseError (line number as offset) on malformed rows or scores
    /// that disagree with their counts.
    static ScoreBreakdown from_csv(std::string_view text);

    bool operator==(const ScoreBreakdown&) const = default;

private:
    std::map<ScoreKey, ContingencyTable> cells_;
};

/// Per-month summary pooled over leads: month,threshold_mm,tp,fp,fn,tn,csi,pod,far.
std::string monthly_summary_csv(const ScoreBreakdown& scores);

struct ScoredFrame {
    std::string valid_iso;  // observation time
    int month = 0;
    int lead = 0;
    Tensor rate;  // [1 x H x W] or [H x W], mm/h
};

struct EvalReport {
    ScoreBreakdown scores;
    std::vector<std::string> skipped;  // predictions without an observation
    std::map<int, double> sse;         // per lead
    std::map<int, std::uint64_t> pixels;

    double mse(int lead) const;
};

using ObservationLookup = std::function<std::optional<Tensor>(const ScoredFrame&)>;

EvalReport evaluate_run(const std::vector<ScoredFrame>& predictions, const ObservationLookup& observations,
                        const std::vector<double>& thresholds = kDefaultThresholds,
                        std::span<const std::uint8_t> mask = {});

/// Adds one prediction/observation pair into `report`.
void accumulate(EvalReport& report, const ScoredFrame& prediction, const Tensor& observation,
                const std::vector<double>& thresholds, std::span<const std::uint8_t> mask = {});

std::string format_score(std::optional<double> s);

}  // namespace npm
