#include "npm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "npm/rng.hpp"

namespace npm {

void SynthConfig::validate() const {
    if (grid < 8) throw ConfigError("synthetic grid must be at least 8");
    if (years < 1) throw ConfigError("synthetic archive needs at least one year");
    if (test_years < 0 || test_years > years) throw ConfigError("test_years must lie in [0, years]");
    if (interval_hours != 1) throw ConfigError("synthetic archive is hourly");
    if (blobs_max == 0 || blobs_min > blobs_max) throw ConfigError("blob count range is empty");
    if (!(radius_min > 0) || radius_min > radius_max) throw ConfigError("blob radius range is invalid");
    if (amp_min < 0 || amp_min > amp_max) throw ConfigError("blob amplitude range is invalid");
    if (life_min < 1 || life_min > life_max || dormant_max < 0) throw ConfigError("blob lifetime range is invalid");
    if (!(modulation >= 0 && modulation < 1)) throw ConfigError("seasonal modulation must lie in [0, 1)");
    if (!(diurnal_floor >= 0 && diurnal_floor <= 1) || !(diurnal_width > 0)) {
        throw ConfigError("diurnal window is invalid");
    }
    if (!(rain_p > 0) || !(rain_c >= 0)) throw ConfigError("rain law needs p > 0 and c >= 0");
    if (!(rain_threshold > ir_min && rain_threshold < ir_max)) {
        throw ConfigError("rain threshold lies outside the brightness-temperature bounds");
    }
    if (!(ir_min < ir_max) || !(tb_background > ir_min && tb_background < ir_max) || !(tb_per_depth > 0)) {
        throw ConfigError("infrared bounds are inconsistent");
    }
}

double SynthConfig::seasonal(double doy) const {
    return 1.0 + modulation * std::cos(2.0 * std::numbers::pi * (doy - peak_doy) / 365.0);
}

double SynthConfig::diurnal(double hour) const {
    double d = std::fabs(hour - peak_hour);
    d = std::min(d, 24.0 - d);
    return diurnal_floor + (1.0 - diurnal_floor) * std::exp(-(d / diurnal_width) * (d / diurnal_width));
}

double rain_rate(double tb, const SynthConfig& cfg) {
    const double cold = cfg.rain_threshold - tb;
    return cold > 0 ? cfg.rain_c * std::pow(cold, cfg.rain_p) : 0.0;
}

Tensor sat_to_radar_oracle(const Tensor& ir, const SynthConfig& cfg) {
    std::vector<float> out(ir.numel());
    auto v = ir.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(v[i] >= cfg.ir_min && v[i] <= cfg.ir_max)) {
            throw DomainError("brightness temperature " + std::to_string(v[i]) + " outside [" +
                              std::to_string(cfg.ir_min) + ", " + std::to_string(cfg.ir_max) + "]");
        }
        out[i] = static_cast<float>(rain_rate(v[i], cfg));
    }
    return Tensor(ir.shape(), std::move(out));
}

namespace {

struct Life {
    std::int64_t birth = 0;  // hour offset from the archive start
    int length = 0;
    double x = 0, y = 0;  // birth position
    double amp = 0, radius = 0;
};

double wrap(double v, double n) {
    v = std::fmod(v, n);
    return v < 0 ? v + n : v;
}

// Separable toroidal Gaussian blur.
std::vector<double> blur(const std::vector<double>& f, std::size_t n, double sigma) {
    const int r = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(2 * r + 1);
    double ks = 0;
    for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : k) x /= ks;
    std::vector<double> tmp(n * n, 0.0), out(n * n, 0.0);
    const int ni = static_cast<int>(n);
    for (int y = 0; y < ni; ++y)
        for (int x = 0; x < ni; ++x)
            for (int i = -r; i <= r; ++i) tmp[y * n + x] += k[i + r] * f[y * n + (x + i + 4 * ni) % ni];
    for (int y = 0; y < ni; ++y)
        for (int x = 0; x < ni; ++x)
            for (int i = -r; i <= r; ++i) out[y * n + x] += k[i + r] * tmp[((y + i + 4 * ni) % ni) * n + x];
    return out;
}

std::vector<float> make_dem(const SynthConfig& cfg) {
    const std::size_t n = cfg.grid;
    auto rng = derive_rng(cfg.seed, 0xDE, 0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> h(n * n, 0.0);
    for (int b = 0; b < 6; ++b) {
        const double cx = u(rng) * n, cy = u(rng) * n, s = (0.1 + 0.2 * u(rng)) * n, a = 0.3 + 0.7 * u(rng);
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                double dx = std::fabs(x - cx), dy = std::fabs(y - cy);
                dx = std::min(dx, n - dx);
                dy = std::min(dy, n - dy);
                h[y * n + x] += a * std::exp(-(dx * dx + dy * dy) / (2 * s * s));
            }
    }
    const double top = *std::max_element(h.begin(), h.end());
    std::vector<float> out(n * n);
    for (std::size_t i = 0; i < h.size(); ++i) out[i] = static_cast<float>(cfg.dem_max * 0.95 * h[i] / top);
    return out;
}

}  // namespace

Manifest generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    const std::size_t n = cfg.grid;
    const double scale = static_cast<double>(n) / 64.0;
    const std::int64_t start = parse_iso_hours(cfg.start);
    const int first_year = record_at(start, Split::train, "").year;

    // hour count spanning `years` calendar years from the start
    auto start_rec = record_at(start, Split::train, "");
    char end_iso[32];
    std::snprintf(end_iso, sizeof end_iso, "%04d%s", first_year + cfg.years, start_rec.iso.substr(4).c_str());
    const std::int64_t total = parse_iso_hours(end_iso) - start;
    char test_iso[32];
    std::snprintf(test_iso, sizeof test_iso, "%04d%s", first_year + cfg.years - cfg.test_years,
                  start_rec.iso.substr(4).c_str());
    const std::int64_t test_start = parse_iso_hours(test_iso) - start;

    // cumulative wind displacement, pixels, at the start of each hour
    std::vector<double> disp_x(total + 1, 0.0), disp_y(total + 1, 0.0);
    for (std::int64_t t = 0; t < total; ++t) {
        const auto rec = record_at(start + t, Split::train, "");
        const double heading = cfg.wind_heading + 2.0 * std::numbers::pi * (rec.doy - 1) / 365.0;
        disp_x[t + 1] = disp_x[t] + cfg.wind_speed * scale * std::cos(heading);
        disp_y[t + 1] = disp_y[t] + cfg.wind_speed * scale * std::sin(heading);
    }

    // blob lives per slot
    std::vector<std::vector<Life>> slots(cfg.blobs_max);
    for (std::size_t s = 0; s < cfg.blobs_max; ++s) {
        auto rng = derive_rng(cfg.seed, 0xB10B, s);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const bool always = s < cfg.blobs_min;
        std::int64_t t = -static_cast<std::int64_t>(u(rng) * cfg.life_max);
        while (t < total) {
            Life l;
            l.birth = t;
            l.length = cfg.life_min + static_cast<int>(u(rng) * (cfg.life_max - cfg.life_min + 1));
            l.x = u(rng) * n;
            l.y = u(rng) * n;
            l.amp = cfg.amp_min + u(rng) * (cfg.amp_max - cfg.amp_min);
            l.radius = (cfg.radius_min + u(rng) * (cfg.radius_max - cfg.radius_min)) * scale;
            slots[s].push_back(l);
            t += l.length;
            if (!always) t += static_cast<std::int64_t>(u(rng) * (cfg.dormant_max + 1));
        }
    }

    std::filesystem::create_directories(out_dir / "frames");
    Manifest m;
    m.width = m.height = static_cast<std::uint32_t>(n);
    m.interval_hours = cfg.interval_hours;
    m.bounds = {{"IR105", cfg.ir_min, cfg.ir_max},
                {"WV063", cfg.wv063_min, cfg.wv063_max},
                {"WV073", cfg.wv073_min, cfg.wv073_max},
                {"RRATE", 0.0, cfg.rain_max},
                {"DEM", 0.0, cfg.dem_max}};
    m.dem_path = "dem.npmf";
    m.comments.push_back("synthetic archive seed " + std::to_string(cfg.seed) + " grid " + std::to_string(n));
    m.root = out_dir;

    Frame dem;
    dem.width = dem.height = static_cast<std::uint32_t>(n);
    dem.tags = {std::string(kTagDem)};
    dem.values = make_dem(cfg);
    write_frame(out_dir / m.dem_path, dem);

    std::vector<std::size_t> cursor(cfg.blobs_max, 0);
    std::vector<double> depth(n * n);
    for (std::int64_t t = 0; t < total; ++t) {
        const Split split = t >= test_start && cfg.test_years > 0 ? Split::test : Split::train;
        auto rec = record_at(start + t, split, "");
        const double season = cfg.seasonal(rec.doy), day = cfg.diurnal(rec.hour);
        std::fill(depth.begin(), depth.end(), 0.0);
        for (std::size_t s = 0; s < cfg.blobs_max; ++s) {
            auto& lives = slots[s];
            auto& c = cursor[s];
            while (c < lives.size() && lives[c].birth + lives[c].length <= t) ++c;
            if (c >= lives.size() || lives[c].birth > t) continue;
            const Life& l = lives[c];
            const double age = static_cast<double>(t - l.birth) + 0.5;
            const double env = std::sin(std::numbers::pi * age / l.length);
            const std::int64_t b0 = std::max<std::int64_t>(l.birth, 0);
            const double cx = wrap(l.x + disp_x[t] - disp_x[b0], static_cast<double>(n));
            const double cy = wrap(l.y + disp_y[t] - disp_y[b0], static_cast<double>(n));
            const double a = l.amp * season * day * env, inv = 1.0 / (2 * l.radius * l.radius);
            for (std::size_t y = 0; y < n; ++y) {
                double dy = std::fabs(y - cy);
                dy = std::min(dy, n - dy);
                for (std::size_t x = 0; x < n; ++x) {
                    double dx = std::fabs(x - cx);
                    dx = std::min(dx, n - dx);
                    depth[y * n + x] += a * std::exp(-(dx * dx + dy * dy) * inv);
                }
            }
        }

        const auto wv_hi = blur(depth, n, 2.0 * scale);
        const auto wv_lo = blur(depth, n, 1.0 * scale);
        Frame f;
        f.width = f.height = static_cast<std::uint32_t>(n);
        f.tags = {"IR105", "WV063", "WV073", "RRATE"};
        f.values.resize(4 * n * n);
        auto noise_rng = derive_rng(cfg.seed, 0x7A1, static_cast<std::uint64_t>(t));
        std::normal_distribution<double> noise(0.0, 0.25);
        const std::size_t plane = n * n;
        const int shift = std::max(1, static_cast<int>(std::lround(scale)));
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) {
                const std::size_t i = y * n + x;
                const double tb = std::clamp(cfg.tb_background - cfg.tb_per_depth * depth[i], cfg.ir_min, cfg.ir_max);
                const std::size_t ys = (y + n - shift) % n, xs = (x + n - shift) % n;
                const double wv063 = std::clamp(250.0 - 45.0 * wv_hi[i], cfg.wv063_min, cfg.wv063_max);
                const double wv073 = std::clamp(265.0 - 50.0 * wv_lo[ys * n + xs], cfg.wv073_min, cfg.wv073_max);
                double rain = rain_rate(static_cast<float>(tb), cfg);
                if (cfg.rain_noise && rain > 0) rain *= std::exp(noise(noise_rng));
                f.values[i] = static_cast<float>(tb);
                f.values[plane + i] = static_cast<float>(wv063);
                f.values[2 * plane + i] = static_cast<float>(wv073);
                f.values[3 * plane + i] = static_cast<float>(std::min(rain, cfg.rain_max));
            }
        }
        char name[64];
        std::snprintf(name, sizeof name, "frames/%04d/%s.npmf", rec.year, rec.iso.substr(0, 13).c_str());
        std::filesystem::create_directories(out_dir / "frames" / std::to_string(rec.year));
        rec.path = name;
        write_frame(out_dir / rec.path, f);
        m.records.push_back(std::move(rec));
    }
    m.save(out_dir / "manifest.txt");
    return m;
}

}  // namespace npm
