#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stealth/autograd.hpp"
#include "stealth/corpus.hpp"
#include "stealth/nn.hpp"
#include "stealth/rng.hpp"
#include "stealth/spectral.hpp"

namespace stealth::detect {
class SurrogateDetector;
}

namespace stealth::gen {

// Latent z with its position on the diffusion schedule (0 = clean).
struct LatentState {
    Tensor z;  // [c,h,w]
    int t = 0;
};

// Cumulative signal-retention schedule: abar(t) in (0,1], non-increasing,
// abar(0) == 1, plus the evenly spaced sub-schedule used by the deterministic
// sampler.
struct DiffusionSchedule {
    int total_steps = 1000;
    std::vector<double> alpha_bar;  // alpha_bar[t], t = 0..N
    std::vector<int> ddim_indices;  // ascending, subset of 1..N, size K

    static DiffusionSchedule linear(int total_steps = 1000, int ddim_steps = 20);
    double abar(int t) const;
    int ddim_steps() const { return static_cast<int>(ddim_indices.size()); }
    void validate() const;
};

struct TrainVaeConfig {
    int epochs = 30;
    int batch_size = 16;
    double lr = 1e-3;
    double kl_weight = 1e-4;
    uint64_t seed = 0;
    std::filesystem::path curve_path;  // optional training-curve TSV
};

// Small convolutional VAE with pixel-shuffle upsampling. The decoder exposes
// post-activation feature taps at 1/2, 1/4 and 1/8 resolution; the control
// branch fuses into exactly these.
class VaeCodec {
   public:
    VaeCodec(int image_size, int base_channels, int latent_channels, uint64_t init_seed);
    VaeCodec(const VaeCodec&) = delete;
    VaeCodec& operator=(const VaeCodec&) = delete;

    struct EncodeOut {
        ad::Var mu, logvar;
    };
    EncodeOut encode_ad(const ad::Var& x) const;
    // Control branch features: encoder activations at 1/2, 1/4, 1/8.
    std::array<ad::Var, 3> encoder_taps_ad(const ad::Var& x) const;

    struct DecodeOut {
        ad::Var image;               // [N,3,H,W], clamped to [0,1]
        std::array<ad::Var, 3> taps;  // g1 (1/2), g2 (1/4), g3 (1/8)
    };
    // `fused` optionally adds a term to each tap before decoding continues.
    DecodeOut decode_ad(const ad::Var& z,
                        const std::function<ad::Var(int, const ad::Var&)>* fuse = nullptr) const;

    LatentState encode(const Tensor& image_chw) const;  // posterior mean, t = 0
    Tensor decode(const LatentState& state) const;
    std::pair<Tensor, std::array<Tensor, 3>> decode_with_taps(const LatentState& state) const;

    int image_size() const { return image_size_; }
    int latent_size() const { return image_size_ / 8; }
    int latent_channels() const { return latent_channels_; }
    int base_channels() const { return base_channels_; }
    std::array<int, 3> tap_channels() const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }
    uint64_t weights_hash() const { return params_.content_hash(); }

    std::string descriptor() const;
    void save(const std::filesystem::path& path) const;
    static std::shared_ptr<VaeCodec> load(const std::filesystem::path& path);

   private:
    int image_size_, base_channels_, latent_channels_;
    bool trained_ = false;
    nn::ParamSet params_;
    nn::Conv2d enc1_, enc2_, enc3_, enc4_, enc_mu_, enc_logvar_;
    nn::Conv2d dec_in_, up1_, up2_, up3_, head_;
    friend class ControlVaeModel;
};

std::shared_ptr<VaeCodec> train_vae(const corpus::CorpusManifest& manifest,
                                    const TrainVaeConfig& cfg, int image_size, int base_channels,
                                    int latent_channels);

struct TrainDiffusionConfig {
    int epochs = 40;
    int batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;
    std::filesystem::path curve_path;
};

// Noise-prediction network over latents with sinusoidal timestep embedding.
class LatentDiffusionModel {
   public:
    LatentDiffusionModel(int latent_channels, int latent_size, int hidden_channels,
                         DiffusionSchedule schedule, uint64_t init_seed);
    LatentDiffusionModel(const LatentDiffusionModel&) = delete;

    ad::Var predict_noise_ad(const ad::Var& z, const std::vector<int>& timesteps) const;
    Tensor predict_noise(const Tensor& z_chw, int t) const;
    // Reverse-process moments: mean and (scalar) stddev of p(z_{t-1} | z_t).
    std::pair<Tensor, double> reverse_moments(const Tensor& z_chw, int t) const;

    const DiffusionSchedule& schedule() const { return schedule_; }
    double latent_scale() const { return latent_scale_; }
    void set_latent_scale(double s) { latent_scale_ = s; }
    int latent_channels() const { return latent_channels_; }
    int latent_size() const { return latent_size_; }

    nn::ParamSet& params() { return params_; }
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    std::string descriptor() const;
    void save(const std::filesystem::path& path) const;
    static std::shared_ptr<LatentDiffusionModel> load(const std::filesystem::path& path);

   private:
    int latent_channels_, latent_size_, hidden_channels_;
    DiffusionSchedule schedule_;
    double latent_scale_ = 1.0;
    bool trained_ = false;
    nn::ParamSet params_;
    nn::Conv2d conv1_, conv2_, conv3_, conv4_;
    nn::Linear t_mlp1_, t_bias1_, t_bias2_;
};

std::shared_ptr<LatentDiffusionModel> train_latent_diffusion(
    const corpus::CorpusManifest& manifest, const VaeCodec& vae,
    const TrainDiffusionConfig& cfg, int hidden_channels, const DiffusionSchedule& schedule);

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps, eps ~ N(0, I) from `rng`.
LatentState forward_diffuse(const LatentState& z0, int t, const DiffusionSchedule& schedule,
                            Rng& rng);

// Deterministic reverse trajectory of `steps` sub-schedule hops ending at
// t = 0. The input must sit on the `steps`-th sub-schedule index.
LatentState ddim_denoise(const LatentState& z_t, int steps, const LatentDiffusionModel& model);
ad::Var ddim_denoise_ad(const ad::Var& z, int steps, const LatentDiffusionModel& model);

// Samples one image latent from pure noise through the full sub-schedule.
LatentState sample_latent(const LatentDiffusionModel& model, Rng& rng);

// Frozen VAE plus a trainable conditioning branch: a copy of the base
// encoder feeding three zero-initialized 1x1 fusion convolutions, one per
// decoder tap. At initialization the decode path is exactly the base VAE's.
class ControlVaeModel {
   public:
    explicit ControlVaeModel(std::shared_ptr<const VaeCodec> base);
    ControlVaeModel(const ControlVaeModel&) = delete;

    ad::Var decode_ad(const ad::Var& z, const ad::Var& condition) const;
    Tensor decode(const LatentState& state, const Tensor& condition_chw) const;

    const VaeCodec& base() const { return *base_; }
    std::shared_ptr<const VaeCodec> base_ptr() const { return base_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    std::string descriptor() const;
    void save(const std::filesystem::path& path) const;
    static std::shared_ptr<ControlVaeModel> load(const std::filesystem::path& path,
                                                 std::shared_ptr<const VaeCodec> base);

   private:
    std::shared_ptr<const VaeCodec> base_;
    bool trained_ = false;
    nn::ParamSet params_;
    nn::Conv2d ctrl1_, ctrl2_, ctrl3_;
    nn::Conv2d fuse1_, fuse2_, fuse3_;  // zero-initialized 1x1
};

struct CompositeLossWeights {
    double alpha = 1.0;  // reconstruction L1
    double beta = 1.0;   // perceptual
    double gamma = 10.0; // noise-prototype alignment

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0)
            throw ConfigError("loss weights must be non-negative");
        if (alpha == 0 && beta == 0 && gamma == 0)
            throw ConfigError("at least one loss weight must be positive");
    }
};

// Feature-space distance over the frozen convolutional trunk of a trained
// detector, averaged across trunk stages. Symmetric; zero iff the feature
// maps agree.
class PerceptualMetric {
   public:
    explicit PerceptualMetric(std::shared_ptr<const detect::SurrogateDetector> net)
        : net_(std::move(net)) {}
    double distance(const Tensor& x_chw, const Tensor& y_chw) const;
    ad::Var distance_ad(const ad::Var& x, const ad::Var& y) const;

   private:
    std::shared_ptr<const detect::SurrogateDetector> net_;
};

struct TrainControlVaeConfig {
    int epochs = 12;
    int batch_size = 16;
    double lr = 1e-3;
    uint64_t seed = 0;
    std::filesystem::path curve_path;
};

struct ControlVaeTrainStats {
    double initial_val_npl = 0.0;
    double final_val_npl = 0.0;
};

// Optimizes only the control branch and fusion convolutions against
// alpha*L1 + beta*perceptual + gamma*(prototype alignment), on genuine
// images. The prototype must have been built with `filter`.
ControlVaeTrainStats train_control_vae(ControlVaeModel& model,
                                       const corpus::CorpusManifest& manifest,
                                       const spectral::NoisePrototype& prototype,
                                       const spectral::DenoiserFilter& filter,
                                       const CompositeLossWeights& weights,
                                       const PerceptualMetric& perceptual,
                                       const TrainControlVaeConfig& cfg);

// Composite loss evaluated on a fixed pair, for tests and curve logging.
double composite_loss_value(const Tensor& x, const Tensor& x_r,
                            const spectral::NoisePrototype& prototype,
                            const spectral::DenoiserFilter& filter,
                            const CompositeLossWeights& weights,
                            const PerceptualMetric* perceptual);

}  // namespace stealth::gen
