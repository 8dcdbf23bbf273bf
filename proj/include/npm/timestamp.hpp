#pragma once

#include <compare>
#include <string>

namespace npm {

/// Calendar position fed to the day/hour encodings. `day` is the zero-based
/// day of year (0..365, leap day included), `hour` the hour of day (0..23).
struct TimeStamp {
    int day = 0;
    int hour = 0;

    static constexpr int kDays = 366;
    static constexpr int kHours = 24;

    /// Validating constructor; throws ConfigError outside the ranges above.
    static TimeStamp make(int day, int hour);

    /// Moves forward by `hours` (may be negative); day wraps 365 -> 0.
    TimeStamp advanced(int hours) const;

    std::string to_string() const;

    auto operator<=>(const TimeStamp&) const = default;
};

}  // namespace npm
