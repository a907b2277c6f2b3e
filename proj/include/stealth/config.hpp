#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "stealth/common.hpp"

namespace stealth::cli {

// Whole-pipeline configuration. The file format is flat "key = value" lines
// with '#' comments; keys are dotted paths, values are numbers (plain or
// fractions like 8/255), strings, or comma lists. Unknown keys are rejected.
struct RunConfig {
    uint64_t seed = 42;
    std::filesystem::path run_dir = "runs/default";

    // corpus
    int image_size = 64;
    int genuine_count = 2000;
    int generated_count = 2000;
    std::array<double, 3> split_ratios = {0.8, 0.1, 0.1};
    double grain_low = 0.015;
    double grain_high = 0.035;

    // vae
    int vae_base_channels = 16;
    int vae_latent_channels = 4;
    int vae_epochs = 30;
    int vae_batch_size = 16;
    double vae_lr = 1e-3;
    double vae_kl_weight = 1e-4;

    // diffusion
    int diffusion_total_steps = 1000;
    int diffusion_ddim_steps = 20;
    int diffusion_hidden_channels = 64;
    int diffusion_epochs = 40;
    int diffusion_batch_size = 64;
    double diffusion_lr = 1e-3;

    // detectors
    double detector_lr = 2e-4;
    int detector_batch_size = 48;
    int detector_epochs = 10;
    std::vector<std::string> detector_archs = {"convnet_small", "convnet_deep",
                                               "attention_lite"};

    // spectral
    std::string filter_kind = "fixed_blur";  // or learned_denoiser
    int blur_size = 5;
    double blur_sigma = 1.0;
    int prototype_count = 1000;
    int denoiser_epochs = 2;
    double denoiser_lr = 1e-3;
    double denoiser_noise = 0.05;

    // control branch
    double cvae_alpha = 1.0;
    double cvae_beta = 1.0;
    double cvae_gamma = 10.0;
    int cvae_epochs = 12;
    int cvae_batch_size = 16;
    double cvae_lr = 1e-3;
    std::string perceptual_detector = "convnet_small";

    // attacks
    double attack_epsilon = 8.0 / 255.0;
    double attack_step = 2.0 / 255.0;
    int attack_iterations = 30;
    double pre_epsilon = 4.0 / 255.0;
    double pre_step = 1.0 / 255.0;
    int pre_iterations = 10;
    int latent_diffusion_steps = 2;
    int latent_iterations = 5;
    double latent_step = 0.05;
    int attack_count = 200;
    std::vector<std::string> attack_surrogates = {"convnet_small"};
    std::vector<std::string> attack_methods = {"none", "fgsm", "pgd", "stealth_pre", "stealth"};

    // report
    int reference_count = 200;

    // Canonical serialization (sorted keys) and its hash; stable under key
    // reordering in the source file.
    std::string canonical_text() const;
    uint64_t hash() const { return fnv1a64(canonical_text()); }
};

struct ConfigIssue {
    std::string key;
    std::string message;
};

// Parses and validates; collected issues describe every offending key.
RunConfig validate_config_text(const std::string& text, std::vector<ConfigIssue>& issues);
RunConfig validate_config(const std::filesystem::path& path, std::vector<ConfigIssue>& issues);
// Applies one "key=value" override on top of an existing config.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value,
                    std::vector<ConfigIssue>& issues);
// Re-checks cross-key constraints (run after applying overrides).
void validate_constraints(const RunConfig& cfg, std::vector<ConfigIssue>& issues);

}  // namespace stealth::cli
