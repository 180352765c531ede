#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "streamtts/errors.hpp"
#include "streamtts/params.hpp"

namespace streamtts {

// Checkpoint container: an 8-byte little-endian manifest length, a JSON
// manifest (format version, tensor names/shapes/dtypes, free-form meta),
// then the raw tensor payloads in manifest order. Payloads are written
// little-endian; this code assumes a little-endian host.
inline constexpr int kCheckpointVersion = 1;

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

template <typename T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& ps,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["meta"] = meta;
    auto tensors = nlohmann::json::array();
    for (int i = 0; i < ps.size(); ++i) {
        const auto& t = ps.at(i);
        tensors.push_back({{"name", ps.names()[i]},
                           {"shape", t.shape},
                           {"dtype", dtype_name<T>()},
                           {"bytes", t.numel() * static_cast<int64_t>(sizeof(T))}});
    }
    manifest["tensors"] = tensors;
    std::string mstr = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (int i = 0; i < ps.size(); ++i) {
        const auto& t = ps.at(i);
        f.write(reinterpret_cast<const char*>(t.v.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(T)));
    }
    if (!f) throw IoError("short write: " + path);
}

struct LoadedCheckpoint {
    nlohmann::json meta;
    // tensors land in the caller-chosen precision via load_checkpoint<T>
};

// Loads into precision T, casting payloads if the stored dtype differs
// (training checkpoints are f64; inference loads them as f32).
template <typename T>
ParameterStore<T> load_checkpoint(const std::string& path, nlohmann::json* meta_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint: " + path);
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (!f || mlen > (1ULL << 31)) throw ParseError("checkpoint: bad manifest length");
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), static_cast<std::streamsize>(mlen));
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mstr);
    } catch (const std::exception& e) {
        throw ParseError(std::string("checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format_version", -1) != kCheckpointVersion)
        throw ParseError("checkpoint: unsupported format version");
    if (meta_out) *meta_out = manifest.value("meta", nlohmann::json::object());

    ParameterStore<T> ps;
    for (const auto& te : manifest["tensors"]) {
        std::string name = te.at("name");
        Shape shape = te.at("shape").get<Shape>();
        std::string dtype = te.at("dtype");
        int64_t n = shape_numel(shape);
        if (dtype == "f64") {
            std::vector<double> buf(n);
            f.read(reinterpret_cast<char*>(buf.data()),
                   static_cast<std::streamsize>(n * sizeof(double)));
            std::vector<T> v(n);
            for (int64_t i = 0; i < n; ++i) v[i] = static_cast<T>(buf[i]);
            ps.add(name, Tensor<T>(shape, std::move(v)));
        } else if (dtype == "f32") {
            std::vector<float> buf(n);
            f.read(reinterpret_cast<char*>(buf.data()),
                   static_cast<std::streamsize>(n * sizeof(float)));
            std::vector<T> v(n);
            for (int64_t i = 0; i < n; ++i) v[i] = static_cast<T>(buf[i]);
            ps.add(name, Tensor<T>(shape, std::move(v)));
        } else {
            throw ParseError("checkpoint: unknown dtype " + dtype);
        }
        if (!f) throw ParseError("checkpoint: truncated payload for " + name);
    }
    return ps;
}

}  // namespace streamtts
