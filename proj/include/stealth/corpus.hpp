#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace stealth::gen {
class VaeCodec;
class LatentDiffusionModel;
}  // namespace stealth::gen

namespace stealth::corpus {

enum class Label { genuine, generated };
enum class Split { train, val, test };

std::string to_string(Label l);
std::string to_string(Split s);
Label label_from_string(const std::string& s);
Split split_from_string(const std::string& s);

// A pixel image in [0,1], CHW layout.
struct ImageExample {
    Tensor pixels;  // [C,H,W]
    Label label = Label::genuine;
    std::string source;
    std::string id;

    int channels() const { return pixels.dim(0); }
    int height() const { return pixels.dim(1); }
    int width() const { return pixels.dim(2); }
};

struct ManifestRecord {
    std::string id;
    std::string path;  // relative to the corpus root
    Label label = Label::genuine;
    std::string source;
    Split split = Split::train;
};

struct CorpusManifest {
    std::filesystem::path root;
    std::vector<ManifestRecord> records;
    uint64_t seed = 0;

    std::vector<ManifestRecord> select(Split split) const;
    std::vector<ManifestRecord> select(Split split, Label label) const;
    size_t count(Label label) const;
};

struct SynthConfig {
    int image_size = 64;
    int genuine_count = 2000;
    uint64_t seed = 0;
    double grain_low = 0.015;   // per-image sensor-like noise stddev range
    double grain_high = 0.035;
};

// --- image file I/O (lossless 8-bit PNG) ---
Tensor load_tensor_image(const std::filesystem::path& path, int target_size);
void save_tensor_image(const std::filesystem::path& path, const Tensor& chw);
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);

ImageExample load_image(const std::filesystem::path& path, int target_size);
ImageExample load_record(const CorpusManifest& m, const ManifestRecord& r, int target_size);
std::vector<Tensor> load_pixels(const CorpusManifest& m, const std::vector<ManifestRecord>& recs,
                                int target_size);

// --- manifest I/O: "id<TAB>path<TAB>label<TAB>source<TAB>split" lines ---
void write_manifest(const CorpusManifest& m, const std::filesystem::path& path);
CorpusManifest read_manifest(const std::filesystem::path& path);

// Procedurally synthesizes the genuine corpus (filtered noise, gradients,
// composited soft shapes, film grain) and writes it plus a manifest under
// root. Bit-deterministic for a fixed seed.
CorpusManifest synthesize_toy_corpus(const SynthConfig& cfg, const std::filesystem::path& root);

// Single procedural image, exposed for tests and spectra studies.
Tensor synth_genuine_pixels(int size, double grain_low, double grain_high, Rng& rng);

// Samples `count` images from the trained diffusion model through the base
// VAE decoder and writes them under root/generated. Deterministic per seed.
CorpusManifest generate_fake_corpus(const gen::LatentDiffusionModel& ldm,
                                    const gen::VaeCodec& vae, int count, uint64_t seed,
                                    const std::filesystem::path& root);

// Stratified split by label with deterministic shuffling; ratios must sum
// to 1 within 1e-9.
CorpusManifest split_dataset(const CorpusManifest& manifest, const std::array<double, 3>& ratios,
                             uint64_t seed);

CorpusManifest merge_manifests(const CorpusManifest& a, const CorpusManifest& b);

}  // namespace stealth::corpus
