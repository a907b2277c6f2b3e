#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stealth/autograd.hpp"
#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace stealth::spectral {

// Cos/sin DFT basis matrices for one plane size, shared by the plain and the
// autodiff spectrum paths so both use the identical convention.
struct DftBasis {
    Tensor cos_h, sin_h;  // [H,H]
    Tensor cos_w, sin_w;  // [W,W]
    static const DftBasis& get(int h, int w);
};

enum class FilterKind { fixed_blur, learned_denoiser };

// Constant-preserving denoising filter: a stack of shared per-channel
// kernels, each normalized to sum 1 and applied with replicate padding, so a
// constant image passes through unchanged and the residual isolates
// high-frequency structure. Differentiable end to end.
class DenoiserFilter {
   public:
    static DenoiserFilter fixed_blur(int ksize = 5, double sigma = 1.0);
    static DenoiserFilter learned(std::vector<Tensor> kernels);

    FilterKind kind() const { return kind_; }
    const std::vector<Tensor>& kernels() const { return kernels_; }
    bool differentiable() const { return true; }
    uint64_t fingerprint() const;

    Tensor apply(const Tensor& chw) const;        // [C,H,W] -> [C,H,W]
    ad::Var apply_ad(const ad::Var& nchw) const;  // [N,C,H,W] -> [N,C,H,W]

    void save(const std::filesystem::path& path) const;
    static DenoiserFilter load(const std::filesystem::path& path);

   private:
    DenoiserFilter(FilterKind kind, std::vector<Tensor> kernels);
    FilterKind kind_;
    std::vector<Tensor> kernels_;  // each [k,k], sum 1
};

// Trains the optional 3-layer linear denoiser on noisy/clean pairs drawn
// from the given images; kernels are re-normalized after every step so the
// constant-preservation invariant survives training.
DenoiserFilter train_learned_denoiser(const std::vector<Tensor>& images, int epochs, double lr,
                                      double noise_sigma, uint64_t seed);

struct NoiseResidual {
    Tensor values;  // [C,H,W], signed
    std::string source_id;
};

struct AmplitudeSpectrum {
    Tensor amplitudes;  // [C,H,W], non-negative, 1/(HW) normalization
};

struct NoisePrototype {
    AmplitudeSpectrum spectrum;
    int count = 0;  // number of residuals aggregated
    uint64_t filter_fingerprint = 0;
};

struct BatchSpectra {
    std::vector<AmplitudeSpectrum> spectra;
};

NoiseResidual noise_residual(const Tensor& image, const DenoiserFilter& filter,
                             const std::string& source_id = "");
AmplitudeSpectrum dft_amplitude(const Tensor& chw);
NoisePrototype noise_prototype(const std::vector<NoiseResidual>& residuals,
                               const DenoiserFilter& filter);
BatchSpectra batch_spectra(const std::vector<Tensor>& images, const DenoiserFilter& filter);
double npl_loss(const BatchSpectra& batch, const NoisePrototype& prototype);
double spectral_l2(const std::vector<Tensor>& corpus_a, const std::vector<Tensor>& corpus_b,
                   const DenoiserFilter& filter);

// Differentiable path used while training the spectral-alignment decoder:
// images [N,C,H,W] -> residual spectra -> summed per-image L2 distance to
// the prototype.
ad::Var residual_amplitude_ad(const ad::Var& images, const DenoiserFilter& filter);
ad::Var npl_loss_ad(const ad::Var& images, const DenoiserFilter& filter,
                    const NoisePrototype& prototype);

// Center-shifted grayscale rendering, optionally log-scaled.
void render_spectrum(const AmplitudeSpectrum& spectrum, bool log_scale,
                     const std::filesystem::path& path);

// Prototype container; loading checks the filter fingerprint.
void save_prototype(const NoisePrototype& p, const std::filesystem::path& path);
NoisePrototype load_prototype(const std::filesystem::path& path, uint64_t expected_fingerprint);

// Mean residual amplitude spectrum over a set of images.
AmplitudeSpectrum mean_residual_spectrum(const std::vector<Tensor>& images,
                                         const DenoiserFilter& filter);

}  // namespace stealth::spectral
