#include "npm/checkpoint.hpp"

#include <algorithm>

#include "../common/byteio.hpp"

namespace npm {

namespace {
constexpr std::string_view kMagic = "NPMCKPT1";
}

void Checkpoint::add(std::string name, Shape shape, std::vector<float> values) {
    if (contains(name)) throw ConfigError("duplicate checkpoint record '" + name + "'");
    if (numel(shape) != values.size()) {
        throw ShapeError("checkpoint record '" + name + "' shape " + to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    records_.push_back({std::move(name), std::move(shape), std::move(values)});
}

bool Checkpoint::contains(std::string_view name) const {
    return std::any_of(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
}

const CheckpointRecord& Checkpoint::at(std::string_view name) const {
    for (const auto& r : records_) {
        if (r.name == name) return r;
    }
    throw ConfigError("checkpoint has no record '" + std::string(name) + "'");
}

float Checkpoint::scalar(std::string_view name) const {
    const auto& r = at(name);
    if (r.values.size() != 1) throw ShapeError("checkpoint record '" + r.name + "' is not a scalar");
    return r.values[0];
}

std::string Checkpoint::encode() const {
    detail::ByteWriter w;
    w.bytes(kMagic);
    w.u64(records_.size());
    for (const auto& r : records_) {
        w.u32(static_cast<std::uint32_t>(r.name.size()));
        w.bytes(r.name);
        w.u32(static_cast<std::uint32_t>(r.shape.size()));
        for (auto e : r.shape) w.u64(e);
        for (float v : r.values) w.f32(v);
    }
    return w.take();
}

Checkpoint Checkpoint::decode(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (r.bytes(kMagic.size(), "magic") != kMagic) throw ParseError("bad checkpoint magic", 0);
    const std::uint64_t count = r.u64();
    Checkpoint ckpt;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::size_t at = r.offset();
        const std::uint32_t name_len = r.u32();
        std::string name(r.bytes(name_len, "record name"));
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = r.u64();
            n *= e;
        }
        if (rank == 0 || n == 0) throw ParseError("checkpoint record '" + name + "' has empty shape", at);
        r.need(n * 4, "record payload");
        std::vector<float> values(n);
        for (auto& v : values) v = r.f32();
        if (ckpt.contains(name)) throw ParseError("duplicate checkpoint record '" + name + "'", at);
        ckpt.records_.push_back({std::move(name), std::move(shape), std::move(values)});
    }
    if (r.remaining() != 0) throw ParseError("trailing bytes after checkpoint records", r.offset());
    return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    detail::write_file_bytes(path.string(), encode());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    return decode(detail::read_file_bytes(path.string()));
}

}  // namespace npm
