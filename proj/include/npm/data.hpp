#pragma once

// Dataset container: binary frame files, the text manifest indexing them,
// year/month partitioning, the season-aware window sampler, window assembly,
// cropping and normalisation.
//
// Frame file layout (little-endian):
//   "NPMFRM1\0"        8 bytes
//   width, height      u32, u32
//   channel count      u8
//   channel tags       count x 8 bytes, ASCII, NUL padded
//   payload            count x height x width x f32, channel-major, row-major

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npm/batch.hpp"
#include "npm/tensor.hpp"

namespace npm {

inline constexpr std::string_view kTagIr = "IR105";
inline constexpr std::string_view kTagWv063 = "WV063";
inline constexpr std::string_view kTagWv073 = "WV073";
inline constexpr std::string_view kTagRain = "RRATE";
inline constexpr std::string_view kTagRainPred = "RRATE_PR";
inline constexpr std::string_view kTagDem = "DEM";

/// Satellite channels in the order the models consume them.
inline const std::vector<std::string> kSatelliteTags{"IR105", "WV063", "WV073"};

bool is_known_tag(std::string_view tag);
bool is_rain_tag(std::string_view tag);

struct Frame {
    std::uint32_t width = 0, height = 0;
    std::vector<std::string> tags;
    std::vector<float> values;  // tags.size() x height x width

    std::size_t channels() const { return tags.size(); }
    /// Index of `tag`; throws ConfigError when absent.
    std::size_t channel(std::string_view tag) const;
    /// [C x H x W]
    Tensor tensor() const;
    /// [1 x H x W] for one channel.
    Tensor channel_tensor(std::string_view tag) const;

    bool operator==(const Frame&) const = default;
};

Frame make_frame(const Tensor& chw, std::vector<std::string> tags);

std::string encode_frame(const Frame& frame);
/// Throws ParseError (bad magic, truncation, unknown tag, trailing bytes)
/// and DomainError for negative rain rates.
Frame decode_frame(std::string_view bytes);
void write_frame(const std::filesystem::path& path, const Frame& frame);
Frame read_frame(const std::filesystem::path& path);

enum class Split { train, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct ChannelBounds {
    std::string tag;
    double min = 0, max = 1;

    bool operator==(const ChannelBounds&) const = default;
};

struct ManifestRecord {
    std::string iso;  // "YYYY-MM-DDTHH:00:00Z"
    int year = 0, month = 0, doy = 0, hour = 0;  // doy is 1-based
    Split split = Split::train;
    std::string path;  // relative to the manifest directory

    /// Hours since 1970-01-01T00Z.
    std::int64_t epoch_hours() const;
    /// Zero-based day of year and hour.
    TimeStamp stamp() const { return TimeStamp{doy - 1, hour}; }

    bool operator==(const ManifestRecord&) const = default;
};

/// Parses "YYYY-MM-DDTHH[:MM[:SS]][Z]" into hours since the epoch.
std::int64_t parse_iso_hours(std::string_view iso);
/// Builds a record (calendar fields derived) for `epoch_hours`.
ManifestRecord record_at(std::int64_t epoch_hours, Split split, std::string path);

class Manifest {
public:
    std::uint32_t width = 0, height = 0;
    int interval_hours = 1;
    std::vector<ChannelBounds> bounds;
    std::string dem_path;
    std::vector<std::string> comments;
    std::vector<ManifestRecord> records;
    /// Directory that relative paths resolve against; not serialised.
    std::filesystem::path root;

    const ChannelBounds& bounds_for(std::string_view tag) const;
    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

    /// Record-level invariants: strictly increasing timestamps, consistent
    /// calendar fields, min < max for every channel.
    void validate() const;
    /// Every referenced file exists and parses with the manifest's grid.
    void validate_files() const;

    /// True when record i+1 follows record i by exactly one interval within
    /// the same split.
    bool contiguous(std::size_t i) const;
    /// Records index-T+1 .. index+T_out exist and are pairwise contiguous.
    bool valid_window(std::size_t index, std::size_t T, std::size_t T_out) const;
    std::size_t count(Split split) const;
    std::optional<std::size_t> find(std::int64_t epoch_hours) const;

    std::string serialize() const;
    /// Throws ParseError carrying the 1-based line number.
    static Manifest parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    /// Sets `root` to the file's directory and runs validate().
    static Manifest load(const std::filesystem::path& path);

    bool operator==(const Manifest& o) const {
        return width == o.width && height == o.height && interval_hours == o.interval_hours && bounds == o.bounds &&
               dem_path == o.dem_path && comments == o.comments && records == o.records;
    }
};

struct Subset {
    int year = 0, month = 0;
    std::vector<std::size_t> indices;
};

/// Records of `split` grouped by (year, month), in calendar order.
std::vector<Subset> partition_by_month(const Manifest& manifest, Split split);

using MonthWeights = std::array<double, 12>;

/// Month drawn by weight (uniform by default), then a (year, month) subset of
/// that month uniformly among those holding a valid window, then a record
/// uniform within the subset, redrawn until its window is contiguous.
class SeasonAwareSampler {
public:
    SeasonAwareSampler(const Manifest& manifest, Split split, std::size_t T, std::size_t T_out,
                       std::optional<MonthWeights> weights = std::nullopt);

    std::size_t sample(std::mt19937_64& rng) const;

    /// Normalised month probabilities.
    const MonthWeights& probabilities() const { return probs_; }
    const std::vector<Subset>& subsets() const { return subsets_; }

private:
    std::vector<Subset> subsets_;
    std::vector<char> valid_;  // per record
    std::array<std::vector<std::size_t>, 12> usable_;  // subset ids per month
    MonthWeights probs_{};
};

/// Loads frames index-T+1..index (inputs) and index+1..index+T_out (targets).
/// With T_out == 0 targets and radar stay empty. Throws WindowError for
/// out-of-range indices or gaps.
ForecastBatch make_window(const Manifest& manifest, std::size_t index, std::size_t T, std::size_t T_out);

/// Normalised DEM of the manifest, [1 x H x W].
Tensor load_dem(const Manifest& manifest);

/// Same size x size window applied to every frame, target, radar and DEM.
ForecastBatch random_crop(const ForecastBatch& batch, std::size_t size, std::mt19937_64& rng);
/// Crop at a fixed origin.
ForecastBatch crop(const ForecastBatch& batch, std::size_t size, std::size_t top, std::size_t left);

/// (x - min) / (max - min), elementwise.
std::vector<float> normalize(std::span<const float> values, const ChannelBounds& bounds);
std::vector<float> denormalize(std::span<const float> values, const ChannelBounds& bounds);

}  // namespace npm
