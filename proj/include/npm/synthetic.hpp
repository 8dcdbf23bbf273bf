#pragma once

// Deterministic synthetic satellite/radar archive. Gaussian cloud blobs live
// in fixed slots with random lifetimes, drift with a wind whose direction
// turns with the day of year and wrap around the grid edges. Cloud depth is
// scaled by a seasonal sinusoid and a diurnal convection window; the
// satellite channels are smooth functionals of the depth field and rain
// follows an analytic law of the infrared brightness temperature alone.

#include <cstdint>
#include <filesystem>
#include <string>

#include "npm/data.hpp"

namespace npm {

struct SynthConfig {
    std::size_t grid = 64;
    std::string start = "2021-01-01T00:00:00Z";
    int years = 2;
    /// Trailing years tagged "test".
    int test_years = 1;
    int interval_hours = 1;

    std::size_t blobs_min = 6;  // slots that never go dormant
    std::size_t blobs_max = 14;
    double radius_min = 3.0, radius_max = 7.0;  // pixels on a 64-pixel grid
    double amp_min = 0.7, amp_max = 1.4;
    int life_min = 12, life_max = 48;  // hours
    int dormant_max = 24;

    double peak_doy = 200;
    double modulation = 0.5;
    double peak_hour = 15;
    double diurnal_width = 3;
    /// Diurnal factor outside the convection window; 1 disables the cycle.
    double diurnal_floor = 0.4;

    /// Wind speed in pixels per hour (64-pixel grid) and its heading at day
    /// one; the heading turns once per year.
    double wind_speed = 1.0;
    double wind_heading = 0.0;

    double tb_background = 290, tb_per_depth = 60;
    double rain_threshold = 235, rain_c = 0.05, rain_p = 1.5;
    bool rain_noise = false;

    double ir_min = 160, ir_max = 320;
    double wv063_min = 160, wv063_max = 300;
    double wv073_min = 160, wv073_max = 310;
    double rain_max = 100;
    double dem_max = 2000;

    std::uint64_t seed = 1;

    /// Throws ConfigError.
    void validate() const;

    /// Seasonal scale s(doy) with doy 1-based.
    double seasonal(double doy) const;
    /// Diurnal factor for an hour of day.
    double diurnal(double hour) const;
};

/// Writes frames, DEM and "manifest.txt" under out_dir and returns the
/// manifest (root set to out_dir).
Manifest generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// rate = c * max(0, threshold - Tb)^p per pixel. `ir` holds brightness
/// temperatures in kelvin, any shape. Throws DomainError outside [ir_min, ir_max].
Tensor sat_to_radar_oracle(const Tensor& ir, const SynthConfig& cfg);
double rain_rate(double tb, const SynthConfig& cfg);

}  // namespace npm
