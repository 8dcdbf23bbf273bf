#pragma once

#include <cstddef>

#include "npm/tensor.hpp"
#include "npm/timestamp.hpp"

namespace npm {

/// One training/evaluation window. Satellite and DEM values are normalised to
/// [0, 1] by the manifest's channel bounds; radar stays in mm/h.
struct ForecastBatch {
    Tensor inputs;        // [T x C x H x W] satellite frames t-T+1..t
    Tensor targets;       // [T_out x C x H x W] satellite frames t+1..t+T_out
    Tensor dem;           // [1 x H x W]
    Tensor radar;         // [T_out x 1 x H x W] rain rate at the target frames
    TimeStamp timestamp;  // calendar position of the last input frame
    std::size_t index = 0;  // manifest record of the last input frame
};

}  // namespace npm
