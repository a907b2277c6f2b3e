#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace stealth {

// Error taxonomy. Every throw site uses the narrowest type that fits so
// callers (CLI, attack suite) can map failures to exit codes and per-image
// error records.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};

// FNV-1a, used for config hashes and filter fingerprints. Not cryptographic;
// we only need a stable identity on this machine and in artifact files.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

std::string hex64(uint64_t v);

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);
bool starts_with(const std::string& s, const std::string& prefix);

// Fixed formatting used by all CSV/TSV artifacts so reruns are byte-identical.
std::string fmt_fixed(double v, int decimals);

void ensure_dir(const std::filesystem::path& p);
std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, const std::string& content);

}  // namespace stealth
