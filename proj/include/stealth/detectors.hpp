#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "stealth/autograd.hpp"
#include "stealth/corpus.hpp"
#include "stealth/nn.hpp"

namespace stealth::detect {

enum class Arch { convnet_small, convnet_deep, attention_lite };
std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);

// Binary genuine-vs-generated classifier. Output is P(generated); labels are
// generated -> 1, genuine -> 0. Inference is a pure function of (weights,
// image): no batch-coupled layers anywhere.
class SurrogateDetector {
   public:
    SurrogateDetector(Arch arch, int image_size, uint64_t init_seed);
    SurrogateDetector(const SurrogateDetector&) = delete;

    ad::Var logits_ad(const ad::Var& x) const;  // [N,3,S,S] -> [N,1]
    // Post-activation trunk stages, used as the perceptual feature stack.
    std::vector<ad::Var> trunk_features_ad(const ad::Var& x) const;

    std::vector<double> classify(const std::vector<Tensor>& images) const;
    double classify_one(const Tensor& image_chw) const;
    // Binary cross-entropy at y_true plus d(loss)/d(image).
    std::pair<double, Tensor> loss_and_input_gradient(const Tensor& image_chw, int y_true) const;

    void set_normalization(Tensor mean_c, Tensor std_c);
    const Tensor& norm_mean() const { return norm_mean_; }
    const Tensor& norm_std() const { return norm_std_; }

    Arch arch() const { return arch_; }
    std::string id() const { return to_string(arch_); }
    int image_size() const { return image_size_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    std::string descriptor() const;
    void save(const std::filesystem::path& path) const;
    static std::shared_ptr<SurrogateDetector> load(const std::filesystem::path& path);

   private:
    ad::Var normalize(const ad::Var& x) const;
    Arch arch_;
    int image_size_;
    bool trained_ = false;
    nn::ParamSet params_;
    std::vector<nn::Conv2d> convs_;
    nn::Conv2d attn_q_, attn_k_, attn_v_, attn_proj_, mlp1_, mlp2_;
    nn::Linear head_;
    Tensor norm_mean_, norm_std_;
};

ad::Var bce_with_logits(const ad::Var& logits, const Tensor& labels);

struct TrainDetectorConfig {
    double lr = 2e-4;
    int batch_size = 48;
    int epochs = 10;
    uint64_t seed = 0;
    std::filesystem::path curve_path;
};

std::shared_ptr<SurrogateDetector> train_detector(const corpus::CorpusManifest& manifest,
                                                  Arch arch, int image_size,
                                                  const TrainDetectorConfig& cfg);

struct DetectorReport {
    double accuracy = 0.0;
    double accuracy_genuine = 0.0;
    double accuracy_generated = 0.0;
    double threshold = 0.5;
    // positive class = generated
    int true_positive = 0, true_negative = 0, false_positive = 0, false_negative = 0;

    int total() const {
        return true_positive + true_negative + false_positive + false_negative;
    }
};

DetectorReport evaluate_detector(const SurrogateDetector& detector,
                                 const corpus::CorpusManifest& manifest, corpus::Split split);
DetectorReport evaluate_on(const SurrogateDetector& detector, const std::vector<Tensor>& images,
                           const std::vector<int>& labels);

void save_report(const DetectorReport& r, const std::filesystem::path& path);
DetectorReport load_report(const std::filesystem::path& path);

}  // namespace stealth::detect
