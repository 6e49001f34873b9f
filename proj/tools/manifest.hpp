#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bgformer::cli {

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

struct RunManifest {
    std::string command;
    std::uint64_t seed = 0;
    std::string config;               // key=value snapshot, may be empty
    std::vector<std::string> inputs;  // digested at write time
    std::vector<std::string> outputs; // declared artifact names
};

/// Writes manifest.json into `dir`. The timestamp honours SOURCE_DATE_EPOCH
/// so reruns can reproduce the file byte for byte.
void write_manifest(const std::string& dir, const RunManifest& m);

}  // namespace bgformer::cli
