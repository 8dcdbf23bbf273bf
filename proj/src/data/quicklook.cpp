#include "npm/quicklook.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "common/byteio.hpp"

namespace npm {

std::uint8_t rain_to_gray(double rate) {
    const double r = std::clamp(rate, 0.0, 16.0);
    return static_cast<std::uint8_t>(std::lround(255.0 * r / 16.0));
}

std::uint8_t unit_to_gray(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

std::string encode_pgm(const Tensor& field, std::uint8_t (*to_gray)(double)) {
    if (!(field.rank() == 2 || (field.rank() == 3 && field.dim(0) == 1))) {
        throw ShapeError("quicklook expects one plane, got " + to_string(field.shape()));
    }
    const std::size_t h = field.dim(field.rank() - 2), w = field.dim(field.rank() - 1);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (float v : field.data()) out.push_back(static_cast<char>(to_gray(v)));
    return out;
}

void write_rain_pgm(const std::filesystem::path& path, const Tensor& rate) {
    detail::write_file_bytes(path.string(), encode_pgm(rate, rain_to_gray));
}

void write_unit_pgm(const std::filesystem::path& path, const Tensor& field) {
    detail::write_file_bytes(path.string(), encode_pgm(field, unit_to_gray));
}

Pgm decode_pgm(const std::string& bytes) {
    std::istringstream is(bytes);
    std::string magic;
    int maxval = 0;
    Pgm p;
    if (!(is >> magic >> p.width >> p.height >> maxval) || magic != "P5" || maxval != 255) {
        throw ParseError("malformed PGM header", 0);
    }
    is.get();
    const auto offset = static_cast<std::size_t>(is.tellg());
    if (bytes.size() - offset != p.width * p.height) {
        throw ParseError("PGM payload is " + std::to_string(bytes.size() - offset) + " bytes, expected " +
                             std::to_string(p.width * p.height),
                         offset);
    }
    p.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
    return p;
}

}  // namespace npm
