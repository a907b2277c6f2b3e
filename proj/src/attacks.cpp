#include "stealth/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "stealth/metrics.hpp"

namespace stealth::attack {

namespace {

// Projection onto the epsilon ball around the original, intersected with the
// pixel box. Checked after every iterate.
void clip_to_ball(Tensor& x, const Tensor& origin, double epsilon) {
    for (size_t i = 0; i < x.numel(); ++i) {
        double lo = std::max(0.0, origin[i] - epsilon);
        double hi = std::min(1.0, origin[i] + epsilon);
        x[i] = std::min(hi, std::max(lo, x[i]));
    }
}

void check_in_clip_set(const Tensor& x, const Tensor& origin, double epsilon) {
    for (size_t i = 0; i < x.numel(); ++i) {
        if (x[i] < -1e-12 || x[i] > 1.0 + 1e-12 ||
            std::fabs(x[i] - origin[i]) > epsilon + 1e-9)
            throw NumericError("attack iterate escaped the clip set");
    }
}

Tensor quantize_8bit(const Tensor& img) {
    Tensor q(img.shape());
    for (size_t i = 0; i < q.numel(); ++i) {
        double v = std::min(1.0, std::max(0.0, img[i]));
        q[i] = std::lround(v * 255.0) / 255.0;
    }
    return q;
}

}  // namespace

LossGradFn detector_grad_fn(const detect::SurrogateDetector& detector, int y_true) {
    return [&detector, y_true](const Tensor& image) {
        return detector.loss_and_input_gradient(image, y_true);
    };
}

Tensor fgsm(const Tensor& image, const LossGradFn& grad_fn, double epsilon) {
    if (epsilon < 0) throw ConfigError("attack epsilon must be >= 0");
    if (epsilon == 0) return image;
    PgdConfig cfg{epsilon, epsilon, 1};
    return pgd(image, grad_fn, cfg);
}

Tensor fgsm(const Tensor& image, const detect::SurrogateDetector& detector, double epsilon,
            int y_true) {
    return fgsm(image, detector_grad_fn(detector, y_true), epsilon);
}

Tensor pgd(const Tensor& image, const LossGradFn& grad_fn, const PgdConfig& cfg) {
    cfg.validate();
    Tensor x = image;
    for (int it = 0; it < cfg.iterations; ++it) {
        auto [loss, grad] = grad_fn(x);
        for (size_t i = 0; i < x.numel(); ++i) {
            double g = grad[i];
            x[i] += cfg.step_size * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
        }
        clip_to_ball(x, image, cfg.epsilon);
        check_in_clip_set(x, image, cfg.epsilon);
    }
    return x;
}

Tensor pgd(const Tensor& image, const detect::SurrogateDetector& detector, const PgdConfig& cfg,
           int y_true) {
    return pgd(image, detector_grad_fn(detector, y_true), cfg);
}

Tensor pgd_preprocess(const Tensor& image, const detect::SurrogateDetector& surrogate,
                      const PgdConfig& cfg) {
    return pgd(image, surrogate, cfg, /*y_true=*/1);
}

// -------------------------------------------------------------- latent attack

Tensor latent_adversarial_optimize(const Tensor& image,
                                   const detect::SurrogateDetector& surrogate,
                                   const gen::VaeCodec& vae,
                                   const gen::LatentDiffusionModel& ldm,
                                   const gen::ControlVaeModel& cvae,
                                   const LatentAttackConfig& cfg, LatentAttackTrace* trace) {
    cfg.validate();
    if (cvae.base().weights_hash() != vae.weights_hash())
        throw ConfigError("control branch was built on a different VAE than the one supplied");
    if (cfg.diffusion_steps > ldm.schedule().ddim_steps())
        throw ConfigError("diffusion steps exceed the sampler sub-schedule");
    if (ldm.latent_channels() != vae.latent_channels() || ldm.latent_size() != vae.latent_size())
        throw ConfigError("diffusion model latent shape does not match the VAE");
    if (!surrogate.trained() || !vae.trained() || !ldm.trained() || !cvae.trained())
        throw StateError("latent attack needs trained surrogate, VAE, diffusion and control models");

    const int S = vae.image_size();
    const int lc = vae.latent_channels(), ls = vae.latent_size();
    const double scale = ldm.latent_scale();

    Tensor x_pre = pgd_preprocess(image, surrogate, cfg.preprocess);
    if (trace) trace->preprocessed = x_pre;

    gen::LatentState z0 = vae.encode(x_pre);
    for (size_t i = 0; i < z0.z.numel(); ++i) z0.z[i] /= scale;

    gen::LatentState z_n = z0;
    if (cfg.diffusion_steps > 0) {
        int t = ldm.schedule().ddim_indices[cfg.diffusion_steps - 1];
        Rng rng(derive_seed(cfg.seed, "latent_attack_noise"));
        z_n = gen::forward_diffuse(z0, t, ldm.schedule(), rng);
    }

    Tensor cond = x_pre.reshaped({1, 3, S, S});
    Tensor label({1, 1});
    label[0] = 1.0;  // the attacked images are generated

    auto forward = [&](const Tensor& z_value, bool need_grad, Tensor* grad_out, Tensor* img_out) {
        ad::Var z = ad::Var::leaf(z_value.reshaped({1, lc, ls, ls}), need_grad);
        ad::Var denoised = gen::ddim_denoise_ad(z, cfg.diffusion_steps, ldm);
        ad::Var z_vae = ad::mul_scalar(denoised, scale);
        ad::Var adv = cvae.decode_ad(z_vae, ad::Var::constant(cond));
        ad::Var loss = detect::bce_with_logits(surrogate.logits_ad(adv), label);
        double lv = loss.value()[0];
        if (!std::isfinite(lv)) {
            std::ostringstream ss;
            ss << "latent attack objective is not finite (|z| max " << z_value.max()
               << ", min " << z_value.min() << ")";
            throw NumericError(ss.str());
        }
        if (need_grad) {
            ad::backward(loss);
            *grad_out = z.grad().reshaped(z_value.shape());
        }
        if (img_out) *img_out = adv.value().reshaped({3, S, S});
        return lv;
    };

    for (int it = 0; it < cfg.iterations; ++it) {
        Tensor grad;
        double loss = forward(z_n.z, true, &grad, nullptr);
        if (trace) trace->surrogate_loss.push_back(loss);
        // Ascent step of fixed RMS length: raw gradients vanish on a
        // confident surrogate, so the step is taken along the normalized
        // direction.
        double rms = 0.0;
        for (size_t i = 0; i < grad.numel(); ++i) rms += grad[i] * grad[i];
        rms = std::sqrt(rms / static_cast<double>(grad.numel()));
        if (rms > 1e-12)
            for (size_t i = 0; i < grad.numel(); ++i)
                z_n.z[i] += cfg.step_size * grad[i] / rms;
    }

    Tensor adv;
    double final_loss = forward(z_n.z, false, nullptr, &adv);
    if (trace) trace->surrogate_loss.push_back(final_loss);
    return adv;
}

// -------------------------------------------------------------------- suite

std::vector<AttackSpec> parse_attack_specs(const std::string& text) {
    std::vector<AttackSpec> specs;
    for (const auto& raw : split(text, '\n')) {
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        AttackSpec spec;
        if (!(ss >> spec.name >> spec.surrogate))
            throw FormatError("attack spec line needs '<name> <surrogate>': " + line);
        std::string kv;
        while (ss >> kv) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw FormatError("attack spec parameter must be key=value: " + kv);
            try {
                spec.params[kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
            } catch (const std::exception&) {
                throw FormatError("attack spec parameter is not numeric: " + kv);
            }
        }
        specs.push_back(std::move(spec));
    }
    return specs;
}

namespace {

double param_or(const AttackSpec& spec, const std::string& key, double fallback) {
    auto it = spec.params.find(key);
    return it == spec.params.end() ? fallback : it->second;
}

Tensor dispatch_attack(const AttackContext& ctx, const AttackSpec& spec,
                       const detect::SurrogateDetector& surrogate, const Tensor& image,
                       uint64_t image_seed) {
    if (spec.name == "none") return image;
    if (spec.name == "fgsm")
        return fgsm(image, surrogate, param_or(spec, "epsilon", ctx.pgd_defaults.epsilon));
    if (spec.name == "pgd") {
        PgdConfig cfg = ctx.pgd_defaults;
        cfg.epsilon = param_or(spec, "epsilon", cfg.epsilon);
        cfg.step_size = param_or(spec, "step", cfg.step_size);
        cfg.iterations = static_cast<int>(param_or(spec, "iterations", cfg.iterations));
        return pgd(image, surrogate, cfg);
    }
    if (spec.name == "stealth_pre") {
        PgdConfig cfg = ctx.latent_defaults.preprocess;
        cfg.epsilon = param_or(spec, "epsilon", cfg.epsilon);
        cfg.step_size = param_or(spec, "step", cfg.step_size);
        cfg.iterations = static_cast<int>(param_or(spec, "iterations", cfg.iterations));
        return pgd_preprocess(image, surrogate, cfg);
    }
    if (spec.name == "stealth") {
        if (!ctx.vae || !ctx.ldm || !ctx.cvae)
            throw StateError("stealth attack needs VAE, diffusion and control models in context");
        LatentAttackConfig cfg = ctx.latent_defaults;
        cfg.diffusion_steps =
            static_cast<int>(param_or(spec, "diffusion_steps", cfg.diffusion_steps));
        cfg.iterations = static_cast<int>(param_or(spec, "iterations", cfg.iterations));
        cfg.step_size = param_or(spec, "step", cfg.step_size);
        cfg.seed = image_seed;
        return latent_adversarial_optimize(image, surrogate, *ctx.vae, *ctx.ldm, *ctx.cvae, cfg);
    }
    throw ConfigError("unknown attack '" + spec.name + "'");
}

uint64_t spec_hash(const AttackSpec& spec, uint64_t suite_seed) {
    uint64_t h = fnv1a64(spec.name);
    h = fnv1a64(spec.surrogate, h);
    for (const auto& [k, v] : spec.params) {
        h = fnv1a64(k, h);
        h = fnv1a64(&v, sizeof(v), h);
    }
    return fnv1a64(&suite_seed, sizeof(suite_seed), h);
}

}  // namespace

std::vector<AttackRunResult> run_attack_suite(const AttackContext& ctx,
                                              const std::vector<AttackSpec>& specs) {
    if (!ctx.manifest) throw ConfigError("attack suite needs a manifest");
    auto recs = ctx.manifest->select(ctx.split, corpus::Label::generated);
    if (recs.empty() && !specs.empty())
        throw ConfigError("attack suite: no generated images in the requested split");
    if (ctx.count > 0 && recs.size() > static_cast<size_t>(ctx.count))
        recs.resize(static_cast<size_t>(ctx.count));

    std::vector<AttackRunResult> results;
    for (const auto& spec : specs) {
        auto det_it = ctx.detectors.find(spec.surrogate);
        if (det_it == ctx.detectors.end())
            throw ConfigError("attack surrogate '" + spec.surrogate + "' is not in the detector set");
        const detect::SurrogateDetector& surrogate = *det_it->second;

        AttackRunResult run;
        run.attack = spec.name;
        run.surrogate = spec.surrogate;
        run.seed = ctx.seed;
        run.config_hash = spec_hash(spec, ctx.seed);
        auto t0 = std::chrono::steady_clock::now();

        for (const auto& rec : recs) {
            ImageAttackOutcome out;
            out.id = rec.id;
            out.original_path = (ctx.manifest->root / rec.path).string();
            try {
                Tensor orig = corpus::load_tensor_image(ctx.manifest->root / rec.path,
                                                        ctx.image_size);
                uint64_t image_seed = derive_seed(ctx.seed, spec.name + "/" + rec.id);
                Tensor adv = dispatch_attack(ctx, spec, surrogate, orig, image_seed);
                // Stored artifacts are 8-bit; evaluate exactly what is stored.
                adv = quantize_8bit(adv);
                out.psnr = report::psnr(orig, adv);
                out.ssim = report::ssim(orig, adv);
                for (const auto& [id, det] : ctx.detectors) {
                    out.pre_prob[id] = det->classify_one(orig);
                    out.post_prob[id] = det->classify_one(adv);
                    out.success[id] = out.post_prob[id] <= 0.5;  // predicted genuine
                }
                if (!ctx.run_dir.empty()) {
                    std::filesystem::path dir =
                        ctx.run_dir / "adv" / spec.name / spec.surrogate;
                    std::filesystem::path file = dir / (rec.id + ".png");
                    corpus::save_tensor_image(file, adv);
                    out.adv_path = file.string();
                }
            } catch (const Error& e) {
                out.error = e.what();
            }
            run.images.push_back(std::move(out));
        }
        run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!ctx.run_dir.empty()) {
            std::filesystem::path dir = ctx.run_dir / "adv" / spec.name / spec.surrogate;
            ensure_dir(dir);
            save_attack_results(run, dir / "results.tsv");
        }
        results.push_back(std::move(run));
    }
    return results;
}

void save_attack_results(const AttackRunResult& r, const std::filesystem::path& path) {
    std::vector<std::string> det_ids;
    for (const auto& img : r.images) {
        for (const auto& [id, p] : img.pre_prob)
            if (std::find(det_ids.begin(), det_ids.end(), id) == det_ids.end())
                det_ids.push_back(id);
        break;
    }
    std::sort(det_ids.begin(), det_ids.end());
    std::ostringstream ss;
    ss << "# attack=" << r.attack << " surrogate=" << r.surrogate << " config="
       << hex64(r.config_hash) << " seed=" << r.seed << "\n";
    ss << "id\tpsnr\tssim";
    for (const auto& id : det_ids) ss << "\tpre_" << id << "\tpost_" << id << "\tsuccess_" << id;
    ss << "\terror\n";
    for (const auto& img : r.images) {
        ss << img.id << '\t' << fmt_fixed(img.psnr, 4) << '\t' << fmt_fixed(img.ssim, 6);
        for (const auto& id : det_ids) {
            if (img.error.empty()) {
                ss << '\t' << fmt_fixed(img.pre_prob.at(id), 6) << '\t'
                   << fmt_fixed(img.post_prob.at(id), 6) << '\t' << (img.success.at(id) ? 1 : 0);
            } else {
                ss << "\t\t\t";
            }
        }
        ss << '\t' << img.error << "\n";
    }
    write_text_file(path, ss.str());
}

AttackRunResult load_attack_results(const std::filesystem::path& path) {
    AttackRunResult r;
    std::vector<std::string> lines = split(read_text_file(path), '\n');
    std::vector<std::string> det_ids;
    bool have_header = false;
    for (const auto& line : lines) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ss(line.substr(1));
            std::string kv;
            while (ss >> kv) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) continue;
                std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
                if (k == "attack") r.attack = v;
                if (k == "surrogate") r.surrogate = v;
                if (k == "seed") r.seed = std::stoull(v);
                if (k == "config") r.config_hash = std::stoull(v, nullptr, 16);
            }
            continue;
        }
        auto f = split(line, '\t');
        if (!have_header) {
            for (size_t i = 3; i + 1 < f.size(); i += 3) {
                if (!starts_with(f[i], "pre_")) throw FormatError("bad results header: " + line);
                det_ids.push_back(f[i].substr(4));
            }
            have_header = true;
            continue;
        }
        if (f.size() != 4 + det_ids.size() * 3)
            throw FormatError("bad results row: " + line);
        ImageAttackOutcome img;
        img.id = f[0];
        img.error = f.back();
        if (img.error.empty()) {
            img.psnr = std::stod(f[1]);
            img.ssim = std::stod(f[2]);
            for (size_t d = 0; d < det_ids.size(); ++d) {
                img.pre_prob[det_ids[d]] = std::stod(f[3 + d * 3]);
                img.post_prob[det_ids[d]] = std::stod(f[4 + d * 3]);
                img.success[det_ids[d]] = f[5 + d * 3] == "1";
            }
        }
        r.images.push_back(std::move(img));
    }
    if (!have_header) throw FormatError("attack results file has no header: " + path.string());
    return r;
}

}  // namespace stealth::attack
