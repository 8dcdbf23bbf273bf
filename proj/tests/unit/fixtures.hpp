#pragma once

// Small deterministic inputs shared by the unit tests and the acceptance run.

#include <cmath>
#include <cstdint>
#include <vector>

#include "npm/batch.hpp"
#include "npm/data.hpp"
#include "npm/model_stage1.hpp"
#include "npm/model_stage2.hpp"
#include "support.hpp"

namespace npm::test {

inline NpmConfig tiny(std::size_t T = 2, std::size_t T_out = 2) {
    NpmConfig c;
    c.T = T;
    c.T_out = T_out;
    c.enc_dec_stages = 2;
    c.st_blocks = 1;
    c.enc_channels = 4;
    c.st_channels = 8;
    c.pe_dim = 8;
    c.dw_kernel = 3;
    c.dilated_kernel = 3;
    c.dilation = 1;
    c.crop = 8;
    return c;
}

// Smooth moving blobs; targets continue the input motion.
inline ForecastBatch blob_window(std::size_t T, std::size_t T_out, std::size_t grid, double phase, TimeStamp stamp) {
    const std::size_t C = 3, plane = grid * grid;
    auto frame = [&](double t, std::vector<float>& out) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < grid; ++y)
                for (std::size_t x = 0; x < grid; ++x) {
                    const double cx = grid * (0.3 + 0.05 * t) + phase, cy = grid * 0.5 + c;
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    out.push_back(static_cast<float>(0.2 + 0.6 * std::exp(-d2 / (2.0 * grid))));
                }
    };
    std::vector<float> in, tg, dem(plane, 0.5f);
    for (std::size_t t = 0; t < T; ++t) frame(double(t), in);
    for (std::size_t t = 0; t < T_out; ++t) frame(double(T + t), tg);
    ForecastBatch b;
    b.inputs = Tensor({T, C, grid, grid}, std::move(in));
    b.targets = Tensor({T_out, C, grid, grid}, std::move(tg));
    b.dem = Tensor({1, grid, grid}, std::move(dem));
    b.timestamp = stamp;
    return b;
}

// Rain where the first satellite channel is cold; a learnable pairing.
inline S2rBatch<double> paired_batch(std::size_t n, std::size_t grid, std::uint64_t seed) {
    const auto sat = random64({n, 4, grid, grid}, seed, 0, 1);
    std::vector<double> radar(n * grid * grid);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < grid * grid; ++p) {
            const double ir = sat[b * 4 * grid * grid + p];
            radar[b * grid * grid + p] = ir < 0.4 ? 0.5 * (0.4 - ir) / 0.4 + 0.1 : 0.0;
        }
    return {sat, Tensor64({n, 1, grid, grid}, std::move(radar))};
}

// Record list only; no frame files behind it.
inline Manifest hourly_manifest(const char* start, std::size_t hours, std::size_t test_from = SIZE_MAX) {
    Manifest m;
    m.width = m.height = 4;
    m.bounds = {{"IR105", 160, 320}};
    const auto t0 = parse_iso_hours(start);
    for (std::size_t h = 0; h < hours; ++h)
        m.records.push_back(record_at(t0 + std::int64_t(h), h >= test_from ? Split::test : Split::train,
                                      "f" + std::to_string(h) + ".npmf"));
    return m;
}

}  // namespace npm::test
