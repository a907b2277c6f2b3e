#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stealth/tensor.hpp"

namespace stealth::weights {

// Single-file weight container: magic, version, architecture descriptor,
// shape table, then little-endian float32 blobs in table order. The
// descriptor is matched against the loading code's expectation so a file
// can never be poured into the wrong architecture.
struct WeightFile {
    std::string descriptor;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save(const std::filesystem::path& path, const std::string& descriptor,
          const std::vector<std::pair<std::string, Tensor>>& tensors);
WeightFile load(const std::filesystem::path& path);
// Loads and throws StateError unless the descriptor matches exactly.
WeightFile load_expect(const std::filesystem::path& path, const std::string& descriptor);

}  // namespace stealth::weights
