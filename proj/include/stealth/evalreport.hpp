#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stealth/attacks.hpp"
#include "stealth/metrics.hpp"
#include "stealth/spectral.hpp"

namespace stealth::report {

struct MetricRow {
    std::string attack;
    std::string source;  // surrogate used to build the attack
    std::string target;  // detector being evaluated
    double asr = 0.0;    // percent
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double spectral_l2 = 0.0;
};

// Percentage of adversarial images the target detector classifies genuine,
// over the images it correctly classified as generated before the attack.
double attack_success_rate(const attack::AttackRunResult& results, const std::string& target);

struct ReportContext {
    std::filesystem::path run_dir;
    const corpus::CorpusManifest* manifest = nullptr;
    std::vector<std::string> detector_ids;
    const spectral::DenoiserFilter* filter = nullptr;
    int image_size = 64;
    int reference_count = 200;  // genuine test images used as the spectral reference
};

struct ReportOutput {
    std::vector<MetricRow> rows;
    std::vector<std::string> gaps;  // missing artifacts, reported non-fatally
    std::filesystem::path csv_path;
};

ReportOutput build_report(const ReportContext& ctx,
                          const std::vector<attack::AttackRunResult>& results);

std::string metrics_csv(const std::vector<MetricRow>& rows);

}  // namespace stealth::report
