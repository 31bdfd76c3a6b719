#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mvdiff/common.hpp"
#include "mvdiff/params.hpp"

namespace mvdiff {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

// Checkpoint = JSON manifest (names, shapes, dtype, byte offsets, version)
// plus one raw little-endian blob. Round-trips are bit-exact.
inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

template <typename T>
void append_blob(std::ofstream& blob, const Tensor<T>& t, nlohmann::json& entry,
                 std::uint64_t& offset) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * sizeof(T);
    entry["offset"] = offset;
    entry["nbytes"] = nbytes;
    blob.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(nbytes));
    offset += nbytes;
}

template <typename T>
Tensor<T> read_blob(std::ifstream& blob, const nlohmann::json& entry) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor<T> t(shape);
    const std::uint64_t nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * sizeof(T))
        throw IoError("checkpoint: blob entry size mismatch for " +
                      entry.at("name").get<std::string>());
    blob.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    blob.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
    if (!blob) throw IoError("checkpoint: blob truncated");
    return t;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& prefix, const ParamStore<T>& store,
                     const nlohmann::json& meta, bool with_optimizer) {
    namespace fs = std::filesystem;
    const fs::path manifest_path = prefix + ".json";
    const fs::path blob_path = prefix + ".bin";
    if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());

    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    if (!blob) throw IoError("cannot write " + blob_path.string());

    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["code_version"] = kVersion;
    manifest["dtype"] = dtype_name<T>();
    manifest["with_optimizer"] = with_optimizer;
    manifest["meta"] = meta;
    auto& tensors = manifest["tensors"] = nlohmann::json::array();

    std::uint64_t offset = 0;
    for (const auto& [name, e] : store) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["kind"] = "param";
        entry["shape"] = e.value.shape();
        entry["step"] = e.step;
        detail::append_blob(blob, e.value, entry, offset);
        tensors.push_back(entry);
        if (with_optimizer) {
            for (const char* kind : {"adam_m", "adam_v"}) {
                nlohmann::json st;
                st["name"] = name;
                st["kind"] = kind;
                st["shape"] = e.value.shape();
                st["step"] = e.step;
                detail::append_blob(blob, std::string(kind) == "adam_m" ? e.m : e.v, st, offset);
                tensors.push_back(st);
            }
        }
    }
    blob.close();
    if (!blob) throw IoError("write failed: " + blob_path.string());

    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw IoError("cannot write " + manifest_path.string());
    mf << manifest.dump(2) << "\n";
    mf.close();
    if (!mf) throw IoError("write failed: " + manifest_path.string());
}

// Loads parameters (and optimizer state when present) into a fresh store;
// returns the manifest's meta block.
template <typename T>
nlohmann::json load_checkpoint(const std::string& prefix, ParamStore<T>& store) {
    const std::string manifest_path = prefix + ".json";
    const std::string blob_path = prefix + ".bin";
    std::ifstream mf(manifest_path);
    if (!mf) throw IoError("cannot open " + manifest_path);
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest parse error: " + std::string(e.what()));
    }
    if (!manifest.contains("format_version"))
        throw IoError("checkpoint manifest: missing format_version");
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw IoError("checkpoint manifest: unsupported format_version");
    if (manifest.at("dtype").get<std::string>() != dtype_name<T>())
        throw IoError("checkpoint dtype is " + manifest.at("dtype").get<std::string>() +
                      ", expected " + dtype_name<T>());

    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw IoError("cannot open " + blob_path);

    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string kind = entry.at("kind").get<std::string>();
        Tensor<T> t = detail::read_blob<T>(blob, entry);
        if (kind == "param") {
            store.add(name, std::move(t));
            store.entry(name).step = entry.value("step", std::int64_t{0});
        } else if (kind == "adam_m") {
            store.entry(name).m = std::move(t);
        } else if (kind == "adam_v") {
            store.entry(name).v = std::move(t);
        } else {
            throw IoError("checkpoint: unknown tensor kind '" + kind + "'");
        }
    }
    return manifest.value("meta", nlohmann::json::object());
}

}  // namespace mvdiff
