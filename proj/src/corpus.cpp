#include "stealth/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>

#include "stealth/common.hpp"

namespace stealth::corpus {

std::string to_string(Label l) { return l == Label::genuine ? "genuine" : "generated"; }
std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

Label label_from_string(const std::string& s) {
    if (s == "genuine") return Label::genuine;
    if (s == "generated") return Label::generated;
    throw FormatError("unknown label '" + s + "'");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw FormatError("unknown split '" + s + "'");
}

std::vector<ManifestRecord> CorpusManifest::select(Split split) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
        if (r.split == split) out.push_back(r);
    return out;
}

std::vector<ManifestRecord> CorpusManifest::select(Split split, Label label) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
        if (r.split == split && r.label == label) out.push_back(r);
    return out;
}

size_t CorpusManifest::count(Label label) const {
    size_t n = 0;
    for (const auto& r : records)
        if (r.label == label) ++n;
    return n;
}

// ------------------------------------------------------------------ image IO

Tensor load_tensor_image(const std::filesystem::path& path, int target_size) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw FormatError("cannot decode image " + path.string());
    if (target_size > 0 && (img.rows != target_size || img.cols != target_size))
        cv::resize(img, img, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    Tensor t({3, img.rows, img.cols});
    for (int i = 0; i < img.rows; ++i) {
        const cv::Vec3b* row = img.ptr<cv::Vec3b>(i);
        for (int j = 0; j < img.cols; ++j) {
            // OpenCV loads BGR; the tensor is RGB.
            t.at3(0, i, j) = row[j][2] / 255.0;
            t.at3(1, i, j) = row[j][1] / 255.0;
            t.at3(2, i, j) = row[j][0] / 255.0;
        }
    }
    return t;
}

void save_tensor_image(const std::filesystem::path& path, const Tensor& chw) {
    if (chw.ndim() != 3 || chw.dim(0) != 3) throw ShapeError("save_tensor_image expects [3,H,W]");
    int H = chw.dim(1), W = chw.dim(2);
    cv::Mat img(H, W, CV_8UC3);
    auto q = [](double v) {
        int iv = static_cast<int>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
        return static_cast<unsigned char>(iv);
    };
    for (int i = 0; i < H; ++i) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(i);
        for (int j = 0; j < W; ++j)
            row[j] = cv::Vec3b(q(chw.at3(2, i, j)), q(chw.at3(1, i, j)), q(chw.at3(0, i, j)));
    }
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    if (!cv::imwrite(path.string(), img))
        throw IoError("cannot write image " + path.string());
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    cv::Mat img(H, W, CV_64FC(C));
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < C; ++c)
                img.ptr<double>(i)[j * C + c] = chw.at3(c, i, j);
    cv::Mat out;
    cv::resize(img, out, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
    Tensor t({C, out_h, out_w});
    for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j)
            for (int c = 0; c < C; ++c) t.at3(c, i, j) = out.ptr<double>(i)[j * C + c];
    return t;
}

ImageExample load_image(const std::filesystem::path& path, int target_size) {
    ImageExample ex;
    ex.pixels = load_tensor_image(path, target_size);
    ex.id = path.stem().string();
    ex.source = "file";
    return ex;
}

ImageExample load_record(const CorpusManifest& m, const ManifestRecord& r, int target_size) {
    ImageExample ex;
    ex.pixels = load_tensor_image(m.root / r.path, target_size);
    ex.id = r.id;
    ex.label = r.label;
    ex.source = r.source;
    return ex;
}

std::vector<Tensor> load_pixels(const CorpusManifest& m, const std::vector<ManifestRecord>& recs,
                                int target_size) {
    std::vector<Tensor> out;
    out.reserve(recs.size());
    for (const auto& r : recs) out.push_back(load_tensor_image(m.root / r.path, target_size));
    return out;
}

// ------------------------------------------------------------------ manifest

void write_manifest(const CorpusManifest& m, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "# seed=" << m.seed << "\n";
    for (const auto& r : m.records)
        ss << r.id << '\t' << r.path << '\t' << to_string(r.label) << '\t' << r.source << '\t'
           << to_string(r.split) << '\n';
    write_text_file(path, ss.str());
}

CorpusManifest read_manifest(const std::filesystem::path& path) {
    CorpusManifest m;
    m.root = path.parent_path();
    std::string text = read_text_file(path);
    std::map<std::string, bool> seen;
    for (const auto& line : split(text, '\n')) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto eq = line.find("seed=");
            if (eq != std::string::npos) m.seed = std::stoull(line.substr(eq + 5));
            continue;
        }
        auto f = split(line, '\t');
        if (f.size() != 5) throw FormatError("bad manifest line: " + line);
        ManifestRecord r{f[0], f[1], label_from_string(f[2]), f[3], split_from_string(f[4])};
        if (seen.count(r.id)) throw FormatError("duplicate manifest id " + r.id);
        seen[r.id] = true;
        m.records.push_back(std::move(r));
    }
    return m;
}

// ----------------------------------------------------------------- synthesis

namespace {

void add_soft_shape(Tensor& img, Rng& rng) {
    int size = img.dim(1);
    double cx = rng.uniform(0.1, 0.9) * size;
    double cy = rng.uniform(0.1, 0.9) * size;
    double radius = rng.uniform(0.08, 0.35) * size;
    double softness = rng.uniform(0.8, 2.0);
    bool box = rng.uniform() < 0.4;
    double aspect = rng.uniform(0.6, 1.6);
    double angle = rng.uniform(0.0, 3.14159265);
    double ca = std::cos(angle), sa = std::sin(angle);
    std::array<double, 3> color = {rng.uniform(), rng.uniform(), rng.uniform()};
    double alpha_max = rng.uniform(0.4, 1.0);
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            double dx = j - cx, dy = i - cy;
            double d;
            if (box) {
                double u = std::fabs(dx * ca + dy * sa);
                double v = std::fabs(-dx * sa + dy * ca);
                d = std::max(u, v * aspect) - radius;
            } else {
                d = std::sqrt(dx * dx + dy * dy) - radius;
            }
            // Smooth edge over ~softness pixels gives an anti-aliased border.
            double a = alpha_max / (1.0 + std::exp(d / softness * 4.0));
            if (a < 1e-4) continue;
            for (int c = 0; c < 3; ++c)
                img.at3(c, i, j) = img.at3(c, i, j) * (1.0 - a) + color[c] * a;
        }
}

}  // namespace

Tensor synth_genuine_pixels(int size, double grain_low, double grain_high, Rng& rng) {
    Tensor img({3, size, size});

    // Multi-octave filtered noise with a random spectral slope: coarse octaves
    // dominate, which gives the 1/f-like falloff of natural photographs.
    double slope = rng.uniform(0.9, 1.6);
    double chroma = rng.uniform(0.1, 0.4);
    Tensor lum({1, size, size});
    std::vector<int> scales;
    for (int s = 4; s <= size; s *= 2) scales.push_back(s);
    for (size_t oi = 0; oi < scales.size(); ++oi) {
        int s = scales[oi];
        double w = std::pow(static_cast<double>(s) / size, slope);
        Tensor noise({1, s, s});
        for (size_t i = 0; i < noise.numel(); ++i) noise[i] = rng.gaussian();
        Tensor up = (s == size) ? noise : resize_bilinear(noise, size, size);
        for (size_t i = 0; i < lum.numel(); ++i) lum[i] += up[i] * w;
    }
    // Chroma fields at a coarse scale only; channels stay correlated.
    for (int c = 0; c < 3; ++c) {
        int s = std::max(4, size / 8);
        Tensor noise({1, s, s});
        for (size_t i = 0; i < noise.numel(); ++i) noise[i] = rng.gaussian();
        Tensor up = resize_bilinear(noise, size, size);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
                img.at3(c, i, j) = lum.at3(0, i, j) + chroma * up.at3(0, i, j);
    }

    // Linear gradient with a random direction, shared across channels.
    double gx = rng.uniform(-0.8, 0.8), gy = rng.uniform(-0.8, 0.8);
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            double g = gx * (static_cast<double>(j) / size - 0.5) +
                       gy * (static_cast<double>(i) / size - 0.5);
            for (int c = 0; c < 3; ++c) img.at3(c, i, j) += g;
        }

    // Normalize contrast per channel before compositing shapes.
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) mean += img.at3(c, i, j);
        mean /= size * size;
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j) {
                double d = img.at3(c, i, j) - mean;
                var += d * d;
            }
        double stddev = std::sqrt(var / (size * size));
        double scale = 0.16 / std::max(stddev, 1e-6);
        double offset = rng.uniform(0.35, 0.65);
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
                img.at3(c, i, j) = offset + (img.at3(c, i, j) - mean) * scale;
    }

    int n_shapes = static_cast<int>(rng.below(4));
    for (int k = 0; k < n_shapes; ++k) add_soft_shape(img, rng);

    // Film-grain floor: keeps genuine spectra from being unnaturally clean.
    double grain = rng.uniform(grain_low, grain_high);
    for (size_t i = 0; i < img.numel(); ++i) img[i] += grain * rng.gaussian();

    for (size_t i = 0; i < img.numel(); ++i) img[i] = std::min(1.0, std::max(0.0, img[i]));
    return img;
}

CorpusManifest synthesize_toy_corpus(const SynthConfig& cfg, const std::filesystem::path& root) {
    if (cfg.genuine_count < 2)
        throw ConfigError("corpus synthesis needs at least 2 genuine images, got " +
                          std::to_string(cfg.genuine_count));
    if (cfg.image_size < 16 || cfg.image_size % 8 != 0)
        throw ConfigError("image size must be a multiple of 8 and at least 16");
    ensure_dir(root / "genuine");
    CorpusManifest m;
    m.root = root;
    m.seed = cfg.seed;
    char name[64];
    for (int i = 0; i < cfg.genuine_count; ++i) {
        Rng rng(derive_seed(cfg.seed, "genuine", static_cast<uint64_t>(i)));
        Tensor img = synth_genuine_pixels(cfg.image_size, cfg.grain_low, cfg.grain_high, rng);
        std::snprintf(name, sizeof(name), "g_%06d", i);
        std::string rel = std::string("genuine/") + name + ".png";
        save_tensor_image(root / rel, img);
        m.records.push_back({name, rel, Label::genuine, "procedural", Split::train});
    }
    write_manifest(m, root / "manifest.tsv");
    return m;
}

// --------------------------------------------------------------------- split

CorpusManifest split_dataset(const CorpusManifest& manifest, const std::array<double, 3>& ratios,
                             uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::fabs(sum - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1, got " + std::to_string(sum));
    for (double r : ratios)
        if (r < 0) throw ConfigError("split ratios must be non-negative");

    CorpusManifest out = manifest;
    std::map<std::string, std::vector<size_t>> strata;
    for (size_t i = 0; i < out.records.size(); ++i)
        strata[to_string(out.records[i].label)].push_back(i);

    for (auto& [label, idx] : strata) {
        Rng rng(derive_seed(seed, "split/" + label));
        rng.shuffle(idx);
        size_t n = idx.size();
        // Largest-remainder apportionment; ties resolved in split order.
        std::array<size_t, 3> counts;
        std::array<double, 3> frac;
        size_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            double want = ratios[s] * static_cast<double>(n);
            counts[s] = static_cast<size_t>(std::floor(want));
            frac[s] = want - std::floor(want);
            assigned += counts[s];
        }
        while (assigned < n) {
            int best = 0;
            for (int s = 1; s < 3; ++s)
                if (frac[s] > frac[best]) best = s;
            ++counts[best];
            frac[best] = -1.0;
            ++assigned;
        }
        size_t pos = 0;
        for (int s = 0; s < 3; ++s)
            for (size_t k = 0; k < counts[s]; ++k)
                out.records[idx[pos++]].split = static_cast<Split>(s);
    }
    return out;
}

CorpusManifest merge_manifests(const CorpusManifest& a, const CorpusManifest& b) {
    if (a.root != b.root)
        throw ConfigError("cannot merge manifests with different roots: " + a.root.string() +
                          " vs " + b.root.string());
    CorpusManifest out = a;
    std::map<std::string, bool> ids;
    for (const auto& r : a.records) ids[r.id] = true;
    for (const auto& r : b.records) {
        if (ids.count(r.id)) throw ConfigError("duplicate id across manifests: " + r.id);
        out.records.push_back(r);
    }
    return out;
}

}  // namespace stealth::corpus
