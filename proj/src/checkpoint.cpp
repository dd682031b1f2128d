#include "trls/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace trls::numeric {

namespace {

uint32_t to_le(uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return __builtin_bswap32(v);
}

}  // namespace

void write_f32_payload(const std::string& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (float f : data) {
        uint32_t bits = to_le(std::bit_cast<uint32_t>(f));
        out.write(reinterpret_cast<const char*>(&bits), 4);
    }
    if (!out) throw std::runtime_error("write failed on '" + path + "'");
}

std::vector<float> read_f32_payload(const std::string& path, size_t expected_count) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    const auto bytes = static_cast<size_t>(in.tellg());
    if (bytes != expected_count * 4)
        throw std::runtime_error("payload '" + path + "' has " + std::to_string(bytes) +
                                 " bytes, manifest expects " + std::to_string(expected_count * 4));
    in.seekg(0);
    std::vector<float> data(expected_count);
    for (size_t i = 0; i < expected_count; ++i) {
        uint32_t bits = 0;
        in.read(reinterpret_cast<char*>(&bits), 4);
        data[i] = std::bit_cast<float>(to_le(bits));
    }
    if (!in) throw std::runtime_error("truncated payload '" + path + "'");
    return data;
}

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

void save_checkpoint(const std::string& stem, const std::vector<Parameter*>& params,
                     const std::vector<Buffer>& buffers, const nlohmann::json& meta) {
    nlohmann::json manifest;
    manifest["format"] = "trls-checkpoint-v1";
    manifest["payload"] = stem.substr(stem.find_last_of("/\\") + 1) + ".bin";
    manifest["meta"] = meta;

    std::vector<float> payload;
    nlohmann::json entries = nlohmann::json::array();
    auto append = [&](const std::string& name, const Shape& shape, const std::vector<double>& vals) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = shape;
        e["offset"] = payload.size();
        entries.push_back(std::move(e));
        for (double v : vals) payload.push_back(static_cast<float>(v));
    };
    for (const auto* p : params) append(p->name, p->tensor.shape(), p->tensor.values());
    for (const auto& b : buffers)
        append(b.name, {static_cast<int>(b.data->size())}, *b.data);
    manifest["entries"] = std::move(entries);
    manifest["count"] = payload.size();

    std::ofstream mf(stem + ".json", std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot open '" + stem + ".json' for writing");
    mf << manifest.dump(2) << "\n";
    write_f32_payload(stem + ".bin", payload);
}

Checkpoint load_checkpoint(const std::string& stem) {
    std::ifstream mf(stem + ".json");
    if (!mf) throw std::runtime_error("cannot open checkpoint manifest '" + stem + ".json'");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.value("format", "") != "trls-checkpoint-v1")
        throw std::runtime_error("'" + stem + ".json' is not a trls checkpoint manifest");
    const size_t count = manifest.at("count").get<size_t>();
    std::vector<float> payload = read_f32_payload(stem + ".bin", count);

    Checkpoint ck;
    ck.meta = manifest.value("meta", nlohmann::json::object());
    const auto& entries = manifest.at("entries");
    for (size_t i = 0; i < entries.size(); ++i) {
        Checkpoint::Entry e;
        e.name = entries[i].at("name").get<std::string>();
        e.shape = entries[i].at("shape").get<Shape>();
        const size_t offset = entries[i].at("offset").get<size_t>();
        const size_t n = static_cast<size_t>(shape_numel(e.shape));
        const size_t end = (i + 1 < entries.size()) ? entries[i + 1].at("offset").get<size_t>() : count;
        if (offset + n != end)
            throw std::runtime_error("checkpoint entry '" + e.name + "': shape wants " +
                                     std::to_string(n) + " floats but payload slot has " +
                                     std::to_string(end - offset));
        e.data.assign(payload.begin() + static_cast<long>(offset),
                      payload.begin() + static_cast<long>(offset + n));
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

void apply_checkpoint(const Checkpoint& ck, const std::vector<Parameter*>& params,
                      const std::vector<Buffer>& buffers) {
    auto fetch = [&](const std::string& name, size_t n) -> const Checkpoint::Entry& {
        const auto* e = ck.find(name);
        if (!e) throw std::runtime_error("checkpoint is missing entry '" + name + "'");
        if (e->data.size() != n)
            throw std::runtime_error("checkpoint entry '" + name + "' has " +
                                     std::to_string(e->data.size()) + " values, expected " +
                                     std::to_string(n));
        return *e;
    };
    for (auto* p : params) {
        auto& vals = p->tensor.values();
        const auto& e = fetch(p->name, vals.size());
        if (e.shape != p->tensor.shape())
            throw std::runtime_error("checkpoint entry '" + p->name + "' shape " +
                                     shape_str(e.shape) + " != parameter shape " +
                                     shape_str(p->tensor.shape()));
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(e.data[i]);
    }
    for (const auto& b : buffers) {
        const auto& e = fetch(b.name, b.data->size());
        for (size_t i = 0; i < b.data->size(); ++i) (*b.data)[i] = static_cast<double>(e.data[i]);
    }
}

}  // namespace trls::numeric
