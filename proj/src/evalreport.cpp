#include "stealth/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace stealth::report {

double attack_success_rate(const attack::AttackRunResult& results, const std::string& target) {
    if (results.images.empty()) throw ConfigError("attack_success_rate: empty results");
    int denom = 0, hits = 0;
    for (const auto& img : results.images) {
        if (!img.error.empty()) continue;
        auto pre = img.pre_prob.find(target);
        auto suc = img.success.find(target);
        if (pre == img.pre_prob.end() || suc == img.success.end())
            throw ConfigError("attack results carry no probabilities for detector '" + target +
                              "'");
        // Only images the target correctly flagged as generated count: the
        // rate measures the attack, not the detector's clean mistakes.
        if (pre->second > 0.5) {
            ++denom;
            if (suc->second) ++hits;
        }
    }
    if (denom == 0) return 0.0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(denom);
}

namespace {

struct AdvImages {
    std::vector<Tensor> pixels;
    std::vector<std::string> missing;
};

AdvImages load_adv_images(const ReportContext& ctx, const attack::AttackRunResult& r) {
    AdvImages out;
    for (const auto& img : r.images) {
        if (!img.error.empty()) {
            out.missing.push_back(r.attack + "/" + r.surrogate + "/" + img.id + ": " + img.error);
            continue;
        }
        std::filesystem::path p = img.adv_path.empty()
                                      ? ctx.run_dir / "adv" / r.attack / r.surrogate /
                                            (img.id + ".png")
                                      : std::filesystem::path(img.adv_path);
        if (!std::filesystem::exists(p)) {
            out.missing.push_back(p.string() + ": missing adversarial image");
            continue;
        }
        out.pixels.push_back(corpus::load_tensor_image(p, ctx.image_size));
    }
    return out;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream ss;
    ss << "attack,source,target,asr,psnr,ssim,spectral_l2\n";
    for (const auto& r : rows)
        ss << r.attack << ',' << r.source << ',' << r.target << ',' << fmt_fixed(r.asr, 4) << ','
           << fmt_fixed(r.mean_psnr, 4) << ',' << fmt_fixed(r.mean_ssim, 4) << ','
           << fmt_fixed(r.spectral_l2, 4) << "\n";
    return ss.str();
}

ReportOutput build_report(const ReportContext& ctx,
                          const std::vector<attack::AttackRunResult>& results) {
    if (!ctx.manifest || !ctx.filter) throw ConfigError("report context is incomplete");
    ReportOutput out;

    // Genuine reference set for spectral distances.
    auto genuine_recs = ctx.manifest->select(corpus::Split::test, corpus::Label::genuine);
    if (ctx.reference_count > 0 &&
        genuine_recs.size() > static_cast<size_t>(ctx.reference_count))
        genuine_recs.resize(static_cast<size_t>(ctx.reference_count));
    std::vector<Tensor> genuine_ref;
    if (!genuine_recs.empty())
        genuine_ref = corpus::load_pixels(*ctx.manifest, genuine_recs, ctx.image_size);
    else
        out.gaps.push_back("no genuine test images for the spectral reference");

    std::filesystem::path spectra_dir = ctx.run_dir / "reports" / "spectra";
    ensure_dir(spectra_dir);
    if (!genuine_ref.empty())
        spectral::render_spectrum(spectral::mean_residual_spectrum(genuine_ref, *ctx.filter),
                                  true, spectra_dir / "genuine.png");

    // Deterministic row order: sorted by (attack, surrogate, target).
    std::vector<const attack::AttackRunResult*> ordered;
    for (const auto& r : results) ordered.push_back(&r);
    std::sort(ordered.begin(), ordered.end(),
              [](const attack::AttackRunResult* a, const attack::AttackRunResult* b) {
                  return std::tie(a->attack, a->surrogate) < std::tie(b->attack, b->surrogate);
              });
    std::vector<std::string> targets = ctx.detector_ids;
    std::sort(targets.begin(), targets.end());

    for (const auto* r : ordered) {
        AdvImages adv = load_adv_images(ctx, *r);
        for (const auto& m : adv.missing) out.gaps.push_back(m);
        double sl2 = 0.0;
        if (!adv.pixels.empty() && !genuine_ref.empty()) {
            sl2 = spectral::spectral_l2(adv.pixels, genuine_ref, *ctx.filter);
            spectral::render_spectrum(spectral::mean_residual_spectrum(adv.pixels, *ctx.filter),
                                      true,
                                      spectra_dir / (r->attack + "_" + r->surrogate + ".png"));
        }
        double sum_psnr = 0.0, sum_ssim = 0.0;
        int ok = 0;
        for (const auto& img : r->images) {
            if (!img.error.empty()) continue;
            sum_psnr += img.psnr;
            sum_ssim += img.ssim;
            ++ok;
        }
        for (const auto& target : targets) {
            MetricRow row;
            row.attack = r->attack;
            row.source = r->surrogate;
            row.target = target;
            row.asr = r->images.empty() ? 0.0 : attack_success_rate(*r, target);
            row.mean_psnr = ok ? sum_psnr / ok : 0.0;
            row.mean_ssim = ok ? sum_ssim / ok : 0.0;
            row.spectral_l2 = sl2;
            out.rows.push_back(std::move(row));
        }
    }

    ensure_dir(ctx.run_dir / "reports");
    out.csv_path = ctx.run_dir / "reports" / "metrics.csv";
    write_text_file(out.csv_path, metrics_csv(out.rows));

    std::ostringstream summary;
    summary << "rows=" << out.rows.size() << "\n";
    summary << "attacks=" << ordered.size() << "\n";
    for (const auto* r : ordered)
        summary << "attack " << r->attack << " surrogate=" << r->surrogate << " images="
                << r->images.size() << " config=" << hex64(r->config_hash) << "\n";
    if (out.gaps.empty()) {
        summary << "gaps=none\n";
    } else {
        summary << "gaps=" << out.gaps.size() << "\n";
        for (const auto& g : out.gaps) summary << "gap " << g << "\n";
    }
    write_text_file(ctx.run_dir / "reports" / "summary.txt", summary.str());
    return out;
}

}  // namespace stealth::report
