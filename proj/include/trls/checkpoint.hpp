#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "trls/nn.hpp"

namespace trls::numeric {

// Flat name -> (shape, float32 values) container with a JSON manifest at
// <stem>.json and a little-endian float payload at <stem>.bin. Values are
// truncated to 32-bit on save; save/load round-trips are bit-exact at that
// precision.
struct Checkpoint {
    struct Entry {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };
    std::vector<Entry> entries;
    nlohmann::json meta;

    const Entry* find(const std::string& name) const;
};

void save_checkpoint(const std::string& stem, const std::vector<Parameter*>& params,
                     const std::vector<Buffer>& buffers, const nlohmann::json& meta);

Checkpoint load_checkpoint(const std::string& stem);

// Copies checkpoint values into params/buffers by name; throws on any
// missing name or shape mismatch.
void apply_checkpoint(const Checkpoint& ck, const std::vector<Parameter*>& params,
                      const std::vector<Buffer>& buffers);

// Raw little-endian float32 file helpers shared with the dataset format.
void write_f32_payload(const std::string& path, const std::vector<float>& data);
std::vector<float> read_f32_payload(const std::string& path, size_t expected_count);

}  // namespace trls::numeric
