#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "stealth/attacks.hpp"
#include "stealth/config.hpp"
#include "stealth/corpus.hpp"
#include "stealth/detectors.hpp"
#include "stealth/evalreport.hpp"
#include "stealth/genmodels.hpp"
#include "stealth/spectral.hpp"

namespace stealth::cli {

constexpr const char* kToolVersion = "0.1.0";

// Stage completion ledger in the run directory; a stage is skipped when it
// already completed under the same config hash and its artifacts exist.
class RunState {
   public:
    static RunState load(const std::filesystem::path& run_dir);
    void save() const;
    bool is_done(const std::string& stage, uint64_t config_hash) const;
    void mark_done(const std::string& stage, uint64_t config_hash);

   private:
    std::filesystem::path path_;
    std::map<std::string, std::string> done_;  // stage -> config hash hex
};

struct RunPaths {
    std::filesystem::path run_dir, corpus_dir, manifest, models_dir, curves_dir, reports_dir;
    std::filesystem::path vae, ldm, controlvae, filter, prototype;
    std::filesystem::path detector(const std::string& arch) const {
        return models_dir / ("detector_" + arch + ".bin");
    }
    static RunPaths at(const std::filesystem::path& run_dir);
};

// Each stage checks its prerequisites, does its work, and records
// completion. `force` reruns even when already complete.
void stage_synth(const RunConfig& cfg, bool force = false);
void stage_train_vae(const RunConfig& cfg, bool force = false);
void stage_train_diffusion(const RunConfig& cfg, bool force = false);
void stage_train_detector(const RunConfig& cfg, const std::string& arch, bool force = false);
void stage_train_detectors(const RunConfig& cfg, bool force = false);
void stage_prototype(const RunConfig& cfg, bool force = false);
void stage_train_controlvae(const RunConfig& cfg, bool force = false);
void stage_attack(const RunConfig& cfg, bool force = false);
void stage_report(const RunConfig& cfg, bool force = false);
void run_all_stages(const RunConfig& cfg, bool force = false);

// Loaders over run artifacts (throw StateError naming the missing command).
corpus::CorpusManifest load_run_manifest(const RunConfig& cfg);
std::shared_ptr<gen::VaeCodec> load_vae(const RunConfig& cfg);
std::shared_ptr<gen::LatentDiffusionModel> load_ldm(const RunConfig& cfg);
std::shared_ptr<gen::ControlVaeModel> load_controlvae(const RunConfig& cfg);
std::shared_ptr<detect::SurrogateDetector> load_detector(const RunConfig& cfg,
                                                         const std::string& arch);
spectral::DenoiserFilter load_run_filter(const RunConfig& cfg);
spectral::NoisePrototype load_run_prototype(const RunConfig& cfg);

// Control-branch training statistics persisted by stage_train_controlvae.
struct ControlVaeStats {
    double initial_val_npl = 0.0;
    double final_val_npl = 0.0;
};
ControlVaeStats load_controlvae_stats(const RunConfig& cfg);

}  // namespace stealth::cli
