#include "manifest.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "bgformer/tensor.hpp"

namespace bgformer::cli {

namespace {

constexpr const char* kArtifactVersion = "1.0.0";

std::string utc_timestamp() {
    std::time_t t = 0;
    if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) {
        t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
    } else {
        t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    }
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

}  // namespace

std::string sha256_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof buf);
        if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return hex.str();
}

void write_manifest(const std::string& dir, const RunManifest& m) {
    nlohmann::ordered_json j;
    j["artifact_version"] = kArtifactVersion;
    j["command"] = m.command;
    j["seed"] = m.seed;
    j["config"] = m.config;
    j["inputs"] = nlohmann::json::array();
    for (const auto& p : m.inputs) j["inputs"].push_back({{"path", p}, {"sha256", sha256_file(p)}});
    j["outputs"] = m.outputs;
    j["created_utc"] = utc_timestamp();
    const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error(ErrorKind::IoError, "cannot write " + path);
    os << j.dump(2) << '\n';
    if (!os) throw Error(ErrorKind::IoError, "write failed for " + path);
}

}  // namespace bgformer::cli
