#pragma once

// 8-bit binary PGM (P5) quicklooks.
//
// Rain rate maps to gray = round(255 * min(rate, 16) / 16): 0 mm/h is black,
// 16 mm/h and above is white. Normalised satellite fields map to
// gray = round(255 * clamp(v, 0, 1)).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "npm/tensor.hpp"

namespace npm {

std::uint8_t rain_to_gray(double rate);
std::uint8_t unit_to_gray(double v);

/// `field` is [H x W] or [1 x H x W].
std::string encode_pgm(const Tensor& field, std::uint8_t (*to_gray)(double));
void write_rain_pgm(const std::filesystem::path& path, const Tensor& rate);
void write_unit_pgm(const std::filesystem::path& path, const Tensor& field);

struct Pgm {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};
/// Reads a P5 image with maxval 255. Throws ParseError.
Pgm decode_pgm(const std::string& bytes);

}  // namespace npm
