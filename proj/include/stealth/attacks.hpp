#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stealth/corpus.hpp"
#include "stealth/detectors.hpp"
#include "stealth/genmodels.hpp"

namespace stealth::attack {

struct PgdConfig {
    double epsilon = 8.0 / 255.0;
    double step_size = 2.0 / 255.0;
    int iterations = 30;

    void validate() const {
        if (epsilon < 0) throw ConfigError("attack epsilon must be >= 0");
        if (iterations < 0) throw ConfigError("attack iterations must be >= 0");
        if (iterations > 0 && step_size <= 0)
            throw ConfigError("attack step size must be positive");
    }
};

inline PgdConfig preprocess_defaults() { return {4.0 / 255.0, 1.0 / 255.0, 10}; }

// Loss and input-gradient source; lets tests plug closed-form models in
// place of a trained detector.
using LossGradFn = std::function<std::pair<double, Tensor>(const Tensor&)>;
LossGradFn detector_grad_fn(const detect::SurrogateDetector& detector, int y_true);

Tensor fgsm(const Tensor& image, const LossGradFn& grad_fn, double epsilon);
Tensor fgsm(const Tensor& image, const detect::SurrogateDetector& detector, double epsilon,
            int y_true = 1);
Tensor pgd(const Tensor& image, const LossGradFn& grad_fn, const PgdConfig& cfg);
Tensor pgd(const Tensor& image, const detect::SurrogateDetector& detector, const PgdConfig& cfg,
           int y_true = 1);
// PGD with the lighter budget that precedes the latent stage.
Tensor pgd_preprocess(const Tensor& image, const detect::SurrogateDetector& surrogate,
                      const PgdConfig& cfg = preprocess_defaults());

struct LatentAttackConfig {
    int diffusion_steps = 2;  // reverse hops per objective evaluation
    int iterations = 5;       // outer ascent steps on the noised latent
    double step_size = 0.05;  // RMS step length in latent units
    uint64_t seed = 0;
    PgdConfig preprocess = preprocess_defaults();

    void validate() const {
        if (diffusion_steps < 0) throw ConfigError("diffusion steps must be >= 0");
        if (iterations < 0) throw ConfigError("latent iterations must be >= 0");
        if (iterations > 0 && step_size <= 0) throw ConfigError("latent step must be positive");
        preprocess.validate();
    }
};

struct LatentAttackTrace {
    std::vector<double> surrogate_loss;  // loss before each step, then final
    Tensor preprocessed;
};

// Full latent-space attack: PGD-preprocess the image, encode, noise to the
// K'-th sub-schedule index, then ascend the surrogate loss through the
// denoise-and-decode chain by updating the noised latent.
Tensor latent_adversarial_optimize(const Tensor& image,
                                   const detect::SurrogateDetector& surrogate,
                                   const gen::VaeCodec& vae,
                                   const gen::LatentDiffusionModel& ldm,
                                   const gen::ControlVaeModel& cvae,
                                   const LatentAttackConfig& cfg,
                                   LatentAttackTrace* trace = nullptr);

// ------------------------------------------------------------------- suite

struct AttackSpec {
    std::string name;       // none | fgsm | pgd | stealth_pre | stealth
    std::string surrogate;  // detector id whose gradients drive the attack
    std::map<std::string, double> params;
};

// One spec per line: "<name> <surrogate> [key=value ...]"; '#' comments.
std::vector<AttackSpec> parse_attack_specs(const std::string& text);

struct ImageAttackOutcome {
    std::string id;
    std::string original_path;
    std::string adv_path;
    double psnr = 0.0;
    double ssim = 0.0;
    std::map<std::string, double> pre_prob;
    std::map<std::string, double> post_prob;
    std::map<std::string, bool> success;  // post-attack prediction is genuine
    std::string error;
};

struct AttackRunResult {
    std::string attack;
    std::string surrogate;
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    double seconds = 0.0;  // wall time; never persisted into artifacts
    std::vector<ImageAttackOutcome> images;
};

struct AttackContext {
    const corpus::CorpusManifest* manifest = nullptr;
    corpus::Split split = corpus::Split::test;
    int count = 0;  // images per run; 0 = every generated image in the split
    int image_size = 64;
    std::map<std::string, std::shared_ptr<detect::SurrogateDetector>> detectors;
    std::shared_ptr<gen::VaeCodec> vae;
    std::shared_ptr<gen::LatentDiffusionModel> ldm;
    std::shared_ptr<gen::ControlVaeModel> cvae;
    uint64_t seed = 0;
    std::filesystem::path run_dir;  // empty disables persistence
    PgdConfig pgd_defaults;
    LatentAttackConfig latent_defaults;
};

std::vector<AttackRunResult> run_attack_suite(const AttackContext& ctx,
                                              const std::vector<AttackSpec>& specs);

void save_attack_results(const AttackRunResult& r, const std::filesystem::path& path);
AttackRunResult load_attack_results(const std::filesystem::path& path);

}  // namespace stealth::attack
