#include "stealth/weights_io.hpp"

#include <cstring>
#include <fstream>

#include "stealth/common.hpp"

namespace stealth::weights {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'W', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError("truncated weight file");
    return v;
}
std::string get_str(std::istream& is) {
    uint32_t n = get_u32(is);
    if (n > (1u << 20)) throw FormatError("weight file string too long");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw FormatError("truncated weight file");
    return s;
}

}  // namespace

const Tensor& WeightFile::get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw FormatError("weight file has no tensor " + name);
}

bool WeightFile::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void save(const std::filesystem::path& path, const std::string& descriptor,
          const std::vector<std::pair<std::string, Tensor>>& tensors) {
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_str(os, descriptor);
    put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_str(os, name);
        put_u32(os, static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) put_u32(os, static_cast<uint32_t>(t.dim(i)));
    }
    std::vector<float> buf;
    for (const auto& [name, t] : tensors) {
        buf.resize(t.numel());
        for (size_t i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw IoError("short write to " + path.string());
}

WeightFile load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(path.string() + " is not a weight container");
    uint32_t version = get_u32(is);
    if (version != kVersion)
        throw FormatError("unsupported weight container version " + std::to_string(version));
    WeightFile wf;
    wf.descriptor = get_str(is);
    uint32_t n = get_u32(is);
    std::vector<std::vector<int>> shapes(n);
    std::vector<std::string> names(n);
    for (uint32_t i = 0; i < n; ++i) {
        names[i] = get_str(is);
        uint32_t nd = get_u32(is);
        if (nd > 8) throw FormatError("weight tensor rank too large");
        shapes[i].resize(nd);
        for (uint32_t d = 0; d < nd; ++d) shapes[i][d] = static_cast<int>(get_u32(is));
    }
    std::vector<float> buf;
    for (uint32_t i = 0; i < n; ++i) {
        Tensor t(shapes[i]);
        buf.resize(t.numel());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) throw FormatError("truncated weight file " + path.string());
        for (size_t j = 0; j < t.numel(); ++j) t[j] = static_cast<double>(buf[j]);
        wf.tensors.emplace_back(names[i], std::move(t));
    }
    return wf;
}

WeightFile load_expect(const std::filesystem::path& path, const std::string& descriptor) {
    WeightFile wf = load(path);
    if (wf.descriptor != descriptor)
        throw StateError("weight container " + path.string() + " holds '" + wf.descriptor +
                         "', expected '" + descriptor + "'");
    return wf;
}

}  // namespace stealth::weights
