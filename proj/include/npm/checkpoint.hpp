#pragma once

// Parameter checkpoint files.
//
// Layout (all integers little-endian):
//   "NPMCKPT1"                 8 bytes
//   record count               u64
//   per record:
//     name length              u32
//     name                     UTF-8 bytes
//     rank                     u32
//     extents                  rank x u64
//     payload                  product(extents) x f32

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "npm/tensor.hpp"

namespace npm {

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const CheckpointRecord&) const = default;
};

class Checkpoint {
public:
    void add(std::string name, Shape shape, std::vector<float> values);
    template <typename T>
    void add(std::string name, const BasicTensor<T>& tensor) {
        add(std::move(name), tensor.shape(), std::vector<float>(tensor.data().begin(), tensor.data().end()));
    }
    void add_scalar(std::string name, float value) { add(std::move(name), Shape{1}, {value}); }

    bool contains(std::string_view name) const;
    const CheckpointRecord& at(std::string_view name) const;
    float scalar(std::string_view name) const;
    template <typename T>
    BasicTensor<T> tensor(std::string_view name) const {
        const auto& r = at(name);
        return BasicTensor<T>(r.shape, std::vector<T>(r.values.begin(), r.values.end()));
    }

    const std::vector<CheckpointRecord>& records() const { return records_; }

    std::string encode() const;
    static Checkpoint decode(std::string_view bytes);

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

    bool operator==(const Checkpoint&) const = default;

private:
    std::vector<CheckpointRecord> records_;
};

}  // namespace npm
