#include "npm/data.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "common/byteio.hpp"
#include "npm/ops.hpp"

namespace npm {

namespace {

constexpr std::string_view kFrameMagic{"NPMFRM1\0", 8};
constexpr std::string_view kManifestHeader = "# npm-manifest v1";

std::string pad_tag(std::string_view tag) {
    std::string out(tag);
    out.resize(8, '\0');
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

bool is_known_tag(std::string_view tag) {
    return tag == kTagIr || tag == kTagWv063 || tag == kTagWv073 || tag == kTagRain || tag == kTagRainPred ||
           tag == kTagDem;
}

bool is_rain_tag(std::string_view tag) { return tag == kTagRain || tag == kTagRainPred; }

std::size_t Frame::channel(std::string_view tag) const {
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (tags[i] == tag) return i;
    }
    throw ConfigError("frame has no channel '" + std::string(tag) + "'");
}

Tensor Frame::tensor() const { return Tensor({channels(), height, width}, values); }

Tensor Frame::channel_tensor(std::string_view tag) const {
    const std::size_t plane = std::size_t{width} * height, c = channel(tag);
    return Tensor({1, height, width}, std::vector<float>(values.begin() + c * plane, values.begin() + (c + 1) * plane));
}

Frame make_frame(const Tensor& chw, std::vector<std::string> tags) {
    if (chw.rank() != 3 || chw.dim(0) != tags.size()) {
        throw ShapeError("frame tensor " + to_string(chw.shape()) + " does not match " + std::to_string(tags.size()) +
                         " tags");
    }
    Frame f;
    f.height = static_cast<std::uint32_t>(chw.dim(1));
    f.width = static_cast<std::uint32_t>(chw.dim(2));
    f.tags = std::move(tags);
    f.values.assign(chw.data().begin(), chw.data().end());
    return f;
}

std::string encode_frame(const Frame& frame) {
    if (frame.channels() == 0 || frame.channels() > 255) throw ConfigError("frame needs 1..255 channels");
    if (frame.values.size() != frame.channels() * frame.width * frame.height) {
        throw ShapeError("frame payload holds " + std::to_string(frame.values.size()) + " values, expected " +
                         std::to_string(frame.channels() * frame.width * frame.height));
    }
    detail::ByteWriter w;
    w.bytes(kFrameMagic);
    w.u32(frame.width);
    w.u32(frame.height);
    w.u8(static_cast<std::uint8_t>(frame.channels()));
    for (const auto& t : frame.tags) {
        if (t.size() > 8 || !is_known_tag(t)) throw ConfigError("unsupported channel tag '" + t + "'");
        w.bytes(pad_tag(t));
    }
    for (float v : frame.values) w.f32(v);
    return w.take();
}

Frame decode_frame(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (r.bytes(8, "magic") != kFrameMagic) throw ParseError("bad frame magic", 0);
    Frame f;
    f.width = r.u32();
    f.height = r.u32();
    const std::size_t channels = r.u8();
    if (channels == 0) throw ParseError("frame declares no channels", r.offset() - 1);
    for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t at = r.offset();
        auto raw = r.bytes(8, "channel tag");
        std::string tag(raw.substr(0, raw.find('\0')));
        if (!is_known_tag(tag)) throw ParseError("unknown channel tag '" + tag + "'", at);
        f.tags.push_back(std::move(tag));
    }
    const std::size_t plane = std::size_t{f.width} * f.height;
    const std::size_t payload = channels * plane * 4;
    if (r.remaining() != payload) {
        throw ParseError("frame payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                             std::to_string(payload),
                         r.offset());
    }
    f.values.resize(channels * plane);
    for (auto& v : f.values) v = r.f32();
    for (std::size_t c = 0; c < channels; ++c) {
        if (!is_rain_tag(f.tags[c])) continue;
        for (std::size_t i = 0; i < plane; ++i) {
            const float v = f.values[c * plane + i];
            if (!(v >= 0.0f)) {
                throw DomainError("channel " + f.tags[c] + " holds invalid rain rate " + std::to_string(v) +
                                  " at pixel " + std::to_string(i));
            }
        }
    }
    return f;
}

void write_frame(const std::filesystem::path& path, const Frame& frame) {
    detail::write_file_bytes(path.string(), encode_frame(frame));
}

Frame read_frame(const std::filesystem::path& path) {
    const auto bytes = detail::read_file_bytes(path.string());
    try {
        return decode_frame(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + std::string(s) + "'");
}

std::int64_t parse_iso_hours(std::string_view iso) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    std::string buf(iso);
    const int n = std::sscanf(buf.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
    if (n < 4) throw ConfigError("malformed timestamp '" + buf + "'");
    if (mi != 0 || s != 0) throw ConfigError("timestamp '" + buf + "' is not on the hour");
    if (h < 0 || h > 23) throw ConfigError("hour out of range in '" + buf + "'");
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) throw ConfigError("invalid date in '" + buf + "'");
    return static_cast<std::int64_t>(std::chrono::sys_days{ymd}.time_since_epoch().count()) * 24 + h;
}

ManifestRecord record_at(std::int64_t epoch_hours, Split split, std::string path) {
    using namespace std::chrono;
    const auto days = static_cast<int>(epoch_hours >= 0 ? epoch_hours / 24 : (epoch_hours - 23) / 24);
    const int hour = static_cast<int>(epoch_hours - static_cast<std::int64_t>(days) * 24);
    const sys_days sd{std::chrono::days{days}};
    const year_month_day ymd{sd};
    const sys_days jan1{ymd.year() / January / 1};
    ManifestRecord r;
    r.year = static_cast<int>(ymd.year());
    r.month = static_cast<int>(static_cast<unsigned>(ymd.month()));
    r.doy = static_cast<int>((sd - jan1).count()) + 1;
    r.hour = hour;
    r.split = split;
    r.path = std::move(path);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:00:00Z", r.year, static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()), hour);
    r.iso = buf;
    return r;
}

std::int64_t ManifestRecord::epoch_hours() const { return parse_iso_hours(iso); }

const ChannelBounds& Manifest::bounds_for(std::string_view tag) const {
    for (const auto& b : bounds) {
        if (b.tag == tag) return b;
    }
    throw ConfigError("manifest has no bounds for channel '" + std::string(tag) + "'");
}

void Manifest::validate() const {
    if (width == 0 || height == 0) throw ConfigError("manifest grid must be non-empty");
    if (interval_hours <= 0) throw ConfigError("manifest interval must be positive");
    for (const auto& b : bounds) {
        if (!(b.min < b.max)) throw ConfigError("bounds for " + b.tag + " need min < max");
    }
    std::int64_t prev = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        const auto hours = r.epoch_hours();
        const auto expect = record_at(hours, r.split, r.path);
        if (expect.year != r.year || expect.month != r.month || expect.doy != r.doy || expect.hour != r.hour) {
            throw ConfigError("record " + std::to_string(i) + " (" + r.iso + ") has inconsistent calendar fields");
        }
        if (i > 0 && hours <= prev) {
            throw ConfigError("record " + std::to_string(i) + " (" + r.iso + ") is not after its predecessor");
        }
        prev = hours;
    }
}

void Manifest::validate_files() const {
    auto check = [&](const std::string& rel) {
        const auto f = read_frame(resolve(rel));
        if (f.width != width || f.height != height) {
            throw ConfigError(rel + " is " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                              ", manifest grid is " + std::to_string(width) + "x" + std::to_string(height));
        }
    };
    if (!dem_path.empty()) check(dem_path);
    for (const auto& r : records) check(r.path);
}

bool Manifest::contiguous(std::size_t i) const {
    if (i + 1 >= records.size()) return false;
    const auto& a = records[i];
    const auto& b = records[i + 1];
    return a.split == b.split && b.epoch_hours() - a.epoch_hours() == interval_hours;
}

bool Manifest::valid_window(std::size_t index, std::size_t T, std::size_t T_out) const {
    if (T == 0 || index + 1 < T || index + T_out >= records.size()) return false;
    for (std::size_t i = index + 1 - T; i < index + T_out; ++i) {
        if (!contiguous(i)) return false;
    }
    return true;
}

std::size_t Manifest::count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

std::optional<std::size_t> Manifest::find(std::int64_t hours) const {
    auto it = std::lower_bound(records.begin(), records.end(), hours,
                               [](const ManifestRecord& r, std::int64_t h) { return r.epoch_hours() < h; });
    if (it == records.end() || it->epoch_hours() != hours) return std::nullopt;
    return static_cast<std::size_t>(it - records.begin());
}

std::string Manifest::serialize() const {
    std::ostringstream os;
    os << kManifestHeader << '\n';
    for (const auto& c : comments) os << "comment " << c << '\n';
    os << "grid " << width << ' ' << height << '\n';
    os << "interval " << interval_hours << '\n';
    for (const auto& b : bounds) os << "bounds " << b.tag << ' ' << format_double(b.min) << ' ' << format_double(b.max) << '\n';
    if (!dem_path.empty()) os << "dem " << dem_path << '\n';
    for (const auto& r : records) {
        if (r.path.find_first_of(" \t\n") != std::string::npos) throw ConfigError("record path contains whitespace");
        os << "record " << r.iso << ' ' << r.year << ' ' << r.month << ' ' << r.doy << ' ' << r.hour << ' '
           << split_name(r.split) << ' ' << r.path << '\n';
    }
    return os.str();
}

Manifest Manifest::parse(std::string_view text) {
    Manifest m;
    std::size_t line_no = 0, pos = 0;
    bool header = false;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string line(text.substr(pos, end - pos));
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!header) {
            if (line != kManifestHeader) throw ParseError("missing manifest header", line_no);
            header = true;
            continue;
        }
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string key;
        is >> key;
        auto fail = [&](const std::string& what) { throw ParseError("manifest: " + what, line_no); };
        if (key == "comment") {
            m.comments.push_back(line.size() > 8 ? line.substr(8) : std::string());
        } else if (key == "grid") {
            if (!(is >> m.width >> m.height)) fail("bad grid line");
        } else if (key == "interval") {
            if (!(is >> m.interval_hours)) fail("bad interval line");
        } else if (key == "bounds") {
            ChannelBounds b;
            std::string lo, hi;
            if (!(is >> b.tag >> lo >> hi)) fail("bad bounds line");
            auto r1 = std::from_chars(lo.data(), lo.data() + lo.size(), b.min);
            auto r2 = std::from_chars(hi.data(), hi.data() + hi.size(), b.max);
            if (r1.ec != std::errc{} || r2.ec != std::errc{}) fail("bad bounds value");
            m.bounds.push_back(std::move(b));
        } else if (key == "dem") {
            if (!(is >> m.dem_path)) fail("bad dem line");
        } else if (key == "record") {
            ManifestRecord r;
            std::string split;
            if (!(is >> r.iso >> r.year >> r.month >> r.doy >> r.hour >> split >> r.path)) fail("bad record line");
            try {
                r.split = parse_split(split);
            } catch (const ConfigError& e) {
                fail(e.what());
            }
            m.records.push_back(std::move(r));
        } else {
            fail("unknown key '" + key + "'");
        }
        std::string extra;
        if (key != "comment" && (is >> extra)) fail("trailing field '" + extra + "'");
    }
    if (!header) throw ParseError("empty manifest", 0);
    return m;
}

void Manifest::save(const std::filesystem::path& path) const { detail::write_file_bytes(path.string(), serialize()); }

Manifest Manifest::load(const std::filesystem::path& path) {
    auto m = parse(detail::read_file_bytes(path.string()));
    m.root = path.parent_path();
    m.validate();
    return m;
}

std::vector<Subset> partition_by_month(const Manifest& manifest, Split split) {
    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        if (r.split == split) groups[{r.year, r.month}].push_back(i);
    }
    std::vector<Subset> out;
    for (auto& [key, idx] : groups) out.push_back(Subset{key.first, key.second, std::move(idx)});
    return out;
}

SeasonAwareSampler::SeasonAwareSampler(const Manifest& manifest, Split split, std::size_t T, std::size_t T_out,
                                       std::optional<MonthWeights> weights)
    : subsets_(partition_by_month(manifest, split)) {
    MonthWeights w;
    w.fill(1.0);
    if (weights) w = *weights;
    double total = 0;
    for (double x : w) {
        if (!(x >= 0)) throw ConfigError("month weights must be non-negative");
        total += x;
    }
    if (!(total > 0)) throw ConfigError("month weights sum to zero");
    const std::size_t n = manifest.records.size();
    std::vector<char> cont(n, 0);
    for (std::size_t i = 0; i + 1 < n; ++i) cont[i] = manifest.contiguous(i);
    // run[i]: contiguous links starting at i
    std::vector<std::size_t> run(n + 1, 0);
    for (std::size_t i = n; i-- > 0;) run[i] = cont[i] ? run[i + 1] + 1 : 0;
    valid_.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        valid_[i] = T > 0 && i + 1 >= T && run[i + 1 - T] >= T - 1 + T_out;
    }
    for (std::size_t s = 0; s < subsets_.size(); ++s) {
        const auto& idx = subsets_[s].indices;
        const bool any = std::any_of(idx.begin(), idx.end(), [&](std::size_t i) { return valid_[i] != 0; });
        if (any) usable_[subsets_[s].month - 1].push_back(s);
    }
    std::string missing;
    for (int m = 0; m < 12; ++m) {
        probs_[m] = w[m] / total;
        if (w[m] > 0 && usable_[m].empty()) missing += (missing.empty() ? "" : ", ") + std::to_string(m + 1);
    }
    if (!missing.empty()) {
        throw ConfigError("no valid " + std::to_string(T) + "+" + std::to_string(T_out) + " window in " +
                          std::string(split_name(split)) + " split for month(s) " + missing);
    }
}

std::size_t SeasonAwareSampler::sample(std::mt19937_64& rng) const {
    std::discrete_distribution<int> months(probs_.begin(), probs_.end());
    const auto& candidates = usable_[months(rng)];
    const auto& subset = subsets_[candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)]];
    std::uniform_int_distribution<std::size_t> pick(0, subset.indices.size() - 1);
    for (;;) {
        const std::size_t i = subset.indices[pick(rng)];
        if (valid_[i]) return i;
    }
}

namespace {

// Copies the satellite channels of `f` normalised into dst.
void load_satellite(const Manifest& m, const Frame& f, float* dst, const std::string& where) {
    const std::size_t plane = std::size_t{f.width} * f.height;
    for (std::size_t c = 0; c < kSatelliteTags.size(); ++c) {
        const auto& b = m.bounds_for(kSatelliteTags[c]);
        const std::size_t src = f.channel(kSatelliteTags[c]) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = f.values[src + i];
            if (!(v >= b.min && v <= b.max)) {
                throw DomainError(where + ": " + kSatelliteTags[c] + " value " + std::to_string(v) +
                                  " outside manifest bounds");
            }
            dst[c * plane + i] = static_cast<float>((v - b.min) / (b.max - b.min));
        }
    }
}

}  // namespace

Tensor load_dem(const Manifest& manifest) {
    if (manifest.dem_path.empty()) throw ConfigError("manifest has no DEM");
    const auto f = read_frame(manifest.resolve(manifest.dem_path));
    if (f.width != manifest.width || f.height != manifest.height) throw ShapeError("DEM grid differs from manifest");
    const auto& b = manifest.bounds_for(kTagDem);
    const auto raw = f.channel_tensor(kTagDem);
    auto vals = normalize(raw.data(), b);
    return Tensor({1, manifest.height, manifest.width}, std::move(vals));
}

ForecastBatch make_window(const Manifest& manifest, std::size_t index, std::size_t T, std::size_t T_out) {
    if (!manifest.valid_window(index, T, T_out)) {
        const std::string where = index < manifest.records.size() ? manifest.records[index].iso : "#" + std::to_string(index);
        throw WindowError("no contiguous " + std::to_string(T) + "+" + std::to_string(T_out) + " window ending at " +
                          where);
    }
    const std::size_t h = manifest.height, w = manifest.width, plane = h * w, c = kSatelliteTags.size();
    ForecastBatch b;
    b.inputs = Tensor({T, c, h, w});
    if (T_out > 0) {
        b.targets = Tensor({T_out, c, h, w});
        b.radar = Tensor({T_out, 1, h, w});
    }
    auto in = b.inputs.mutable_data();
    std::span<float> tg, rd;
    if (T_out > 0) {
        tg = b.targets.mutable_data();
        rd = b.radar.mutable_data();
    }
    for (std::size_t k = 0; k < T + T_out; ++k) {
        const auto& rec = manifest.records[index + 1 + k - T];
        const auto f = read_frame(manifest.resolve(rec.path));
        if (f.width != w || f.height != h) throw ShapeError(rec.path + " does not match the manifest grid");
        if (k < T) {
            load_satellite(manifest, f, in.data() + k * c * plane, rec.path);
        } else {
            load_satellite(manifest, f, tg.data() + (k - T) * c * plane, rec.path);
            const std::size_t src = f.channel(kTagRain) * plane;
            std::copy_n(f.values.begin() + src, plane, rd.data() + (k - T) * plane);
        }
    }
    b.dem = load_dem(manifest);
    b.timestamp = manifest.records[index].stamp();
    b.index = index;
    return b;
}

ForecastBatch crop(const ForecastBatch& batch, std::size_t size, std::size_t top, std::size_t left) {
    const std::size_t h = batch.dem.dim(1), w = batch.dem.dim(2);
    if (size == 0 || size > h || size > w) {
        throw ConfigError("crop size " + std::to_string(size) + " exceeds grid " + std::to_string(h) + "x" +
                          std::to_string(w));
    }
    if (top + size > h || left + size > w) throw ConfigError("crop window leaves the grid");
    auto cut = [&](const Tensor& t) {
        const std::size_t r = t.rank();
        return slice(slice(t, r - 2, top, top + size), r - 1, left, left + size);
    };
    ForecastBatch out = batch;
    out.inputs = cut(batch.inputs);
    out.targets = cut(batch.targets);
    out.radar = cut(batch.radar);
    out.dem = cut(batch.dem);
    return out;
}

ForecastBatch random_crop(const ForecastBatch& batch, std::size_t size, std::mt19937_64& rng) {
    const std::size_t h = batch.dem.dim(1), w = batch.dem.dim(2);
    if (size == 0 || size > h || size > w) {
        throw ConfigError("crop size " + std::to_string(size) + " exceeds grid " + std::to_string(h) + "x" +
                          std::to_string(w));
    }
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, h - size)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, w - size)(rng);
    return crop(batch, size, top, left);
}

std::vector<float> normalize(std::span<const float> values, const ChannelBounds& b) {
    if (!(b.min < b.max)) throw ConfigError("bounds for " + b.tag + " need min < max");
    std::vector<float> out(values.size());
    const double span = b.max - b.min;
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>((values[i] - b.min) / span);
    return out;
}

std::vector<float> denormalize(std::span<const float> values, const ChannelBounds& b) {
    if (!(b.min < b.max)) throw ConfigError("bounds for " + b.tag + " need min < max");
    std::vector<float> out(values.size());
    const double span = b.max - b.min;
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i] * span + b.min);
    return out;
}

}  // namespace npm
