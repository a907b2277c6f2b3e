#include "stealth/config.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

namespace stealth::cli {

namespace {

double parse_number(const std::string& raw) {
    std::string s = trim(raw);
    auto slash = s.find('/');
    size_t pos = 0;
    if (slash != std::string::npos) {
        double num = std::stod(s.substr(0, slash), &pos);
        if (trim(s.substr(0, slash)).size() != pos) throw std::invalid_argument(s);
        size_t pos2 = 0;
        double den = std::stod(s.substr(slash + 1), &pos2);
        if (trim(s.substr(slash + 1)).size() != pos2 || den == 0)
            throw std::invalid_argument(s);
        return num / den;
    }
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
}

std::string fmt_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> parse_list(const std::string& raw) {
    std::vector<std::string> out;
    for (auto& item : split(raw, ',')) {
        std::string t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

// One schema entry per config key: parse/assign plus canonical rendering.
struct Field {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> render;
};

std::map<std::string, Field> build_schema() {
    std::map<std::string, Field> schema;
    auto num = [&schema](const std::string& key, double RunConfig::*member) {
        schema[key] = {[member](RunConfig& c, const std::string& v) { c.*member = parse_number(v); },
                       [member](const RunConfig& c) { return fmt_number(c.*member); }};
    };
    auto integer = [&schema](const std::string& key, int RunConfig::*member) {
        schema[key] = {[member, key](RunConfig& c, const std::string& v) {
                           double d = parse_number(v);
                           if (d != std::floor(d))
                               throw std::invalid_argument(key + " must be an integer");
                           c.*member = static_cast<int>(d);
                       },
                       [member](const RunConfig& c) { return std::to_string(c.*member); }};
    };
    auto str = [&schema](const std::string& key, std::string RunConfig::*member) {
        schema[key] = {[member](RunConfig& c, const std::string& v) { c.*member = trim(v); },
                       [member](const RunConfig& c) { return c.*member; }};
    };
    auto list = [&schema](const std::string& key, std::vector<std::string> RunConfig::*member) {
        schema[key] = {[member](RunConfig& c, const std::string& v) { c.*member = parse_list(v); },
                       [member](const RunConfig& c) { return join(c.*member); }};
    };

    schema["seed"] = {[](RunConfig& c, const std::string& v) {
                          double d = parse_number(v);
                          if (d < 0 || d != std::floor(d))
                              throw std::invalid_argument("seed must be a non-negative integer");
                          c.seed = static_cast<uint64_t>(d);
                      },
                      [](const RunConfig& c) { return std::to_string(c.seed); }};
    schema["run_dir"] = {[](RunConfig& c, const std::string& v) { c.run_dir = trim(v); },
                         [](const RunConfig& c) { return c.run_dir.string(); }};
    schema["corpus.split"] = {
        [](RunConfig& c, const std::string& v) {
            auto parts = parse_list(v);
            if (parts.size() != 3)
                throw std::invalid_argument("corpus.split needs three ratios");
            for (int i = 0; i < 3; ++i) c.split_ratios[i] = parse_number(parts[i]);
        },
        [](const RunConfig& c) {
            return fmt_number(c.split_ratios[0]) + "," + fmt_number(c.split_ratios[1]) + "," +
                   fmt_number(c.split_ratios[2]);
        }};

    integer("corpus.image_size", &RunConfig::image_size);
    integer("corpus.genuine_count", &RunConfig::genuine_count);
    integer("corpus.generated_count", &RunConfig::generated_count);
    num("corpus.grain_low", &RunConfig::grain_low);
    num("corpus.grain_high", &RunConfig::grain_high);

    integer("vae.base_channels", &RunConfig::vae_base_channels);
    integer("vae.latent_channels", &RunConfig::vae_latent_channels);
    integer("vae.epochs", &RunConfig::vae_epochs);
    integer("vae.batch_size", &RunConfig::vae_batch_size);
    num("vae.lr", &RunConfig::vae_lr);
    num("vae.kl_weight", &RunConfig::vae_kl_weight);

    integer("diffusion.total_steps", &RunConfig::diffusion_total_steps);
    integer("diffusion.ddim_steps", &RunConfig::diffusion_ddim_steps);
    integer("diffusion.hidden_channels", &RunConfig::diffusion_hidden_channels);
    integer("diffusion.epochs", &RunConfig::diffusion_epochs);
    integer("diffusion.batch_size", &RunConfig::diffusion_batch_size);
    num("diffusion.lr", &RunConfig::diffusion_lr);

    num("detector.lr", &RunConfig::detector_lr);
    integer("detector.batch_size", &RunConfig::detector_batch_size);
    integer("detector.epochs", &RunConfig::detector_epochs);
    list("detector.archs", &RunConfig::detector_archs);

    str("spectral.filter", &RunConfig::filter_kind);
    integer("spectral.blur_size", &RunConfig::blur_size);
    num("spectral.blur_sigma", &RunConfig::blur_sigma);
    integer("spectral.prototype_count", &RunConfig::prototype_count);
    integer("spectral.denoiser_epochs", &RunConfig::denoiser_epochs);
    num("spectral.denoiser_lr", &RunConfig::denoiser_lr);
    num("spectral.denoiser_noise", &RunConfig::denoiser_noise);

    num("controlvae.alpha", &RunConfig::cvae_alpha);
    num("controlvae.beta", &RunConfig::cvae_beta);
    num("controlvae.gamma", &RunConfig::cvae_gamma);
    integer("controlvae.epochs", &RunConfig::cvae_epochs);
    integer("controlvae.batch_size", &RunConfig::cvae_batch_size);
    num("controlvae.lr", &RunConfig::cvae_lr);
    str("controlvae.perceptual_detector", &RunConfig::perceptual_detector);

    num("attack.epsilon", &RunConfig::attack_epsilon);
    num("attack.step", &RunConfig::attack_step);
    integer("attack.iterations", &RunConfig::attack_iterations);
    num("attack.pre_epsilon", &RunConfig::pre_epsilon);
    num("attack.pre_step", &RunConfig::pre_step);
    integer("attack.pre_iterations", &RunConfig::pre_iterations);
    integer("attack.diffusion_steps", &RunConfig::latent_diffusion_steps);
    integer("attack.latent_iterations", &RunConfig::latent_iterations);
    num("attack.latent_step", &RunConfig::latent_step);
    integer("attack.count", &RunConfig::attack_count);
    list("attack.surrogates", &RunConfig::attack_surrogates);
    list("attack.methods", &RunConfig::attack_methods);

    integer("report.reference_count", &RunConfig::reference_count);
    return schema;
}

const std::map<std::string, Field>& schema() {
    static std::map<std::string, Field> s = build_schema();
    return s;
}

void check_constraints_impl(const RunConfig& c, std::vector<ConfigIssue>& issues) {
    auto bad = [&issues](const std::string& key, const std::string& msg) {
        issues.push_back({key, msg});
    };
    if (c.image_size < 16 || c.image_size % 8 != 0)
        bad("corpus.image_size", "must be a multiple of 8, at least 16");
    double rsum = c.split_ratios[0] + c.split_ratios[1] + c.split_ratios[2];
    if (std::fabs(rsum - 1.0) > 1e-9) bad("corpus.split", "ratios must sum to 1");
    for (double r : c.split_ratios)
        if (r < 0) bad("corpus.split", "ratios must be non-negative");
    if (c.grain_low < 0 || c.grain_high < c.grain_low)
        bad("corpus.grain_low", "grain range must satisfy 0 <= low <= high");
    if (c.vae_base_channels < 2 || c.vae_base_channels % 2 != 0)
        bad("vae.base_channels", "must be an even number, at least 2");
    if (c.vae_latent_channels < 1) bad("vae.latent_channels", "must be positive");
    if (c.vae_epochs < 0 || c.diffusion_epochs < 0 || c.detector_epochs < 0 || c.cvae_epochs < 0)
        bad("epochs", "epoch counts must be >= 0");
    if (c.vae_batch_size < 1 || c.diffusion_batch_size < 1 || c.detector_batch_size < 1 ||
        c.cvae_batch_size < 1)
        bad("batch_size", "batch sizes must be positive");
    if (c.diffusion_total_steps < 1 || c.diffusion_ddim_steps < 1 ||
        c.diffusion_ddim_steps > c.diffusion_total_steps ||
        c.diffusion_total_steps % c.diffusion_ddim_steps != 0)
        bad("diffusion.ddim_steps", "sub-schedule must evenly divide total_steps");
    if (c.filter_kind != "fixed_blur" && c.filter_kind != "learned_denoiser")
        bad("spectral.filter", "must be fixed_blur or learned_denoiser");
    if (c.blur_size < 3 || c.blur_size % 2 == 0)
        bad("spectral.blur_size", "must be an odd size >= 3");
    if (c.blur_sigma <= 0) bad("spectral.blur_sigma", "must be positive");
    if (c.prototype_count < 1) bad("spectral.prototype_count", "must be >= 1");
    if (c.cvae_alpha < 0 || c.cvae_beta < 0 || c.cvae_gamma < 0)
        bad("controlvae.alpha", "loss weights must be non-negative");
    if (c.cvae_alpha == 0 && c.cvae_beta == 0 && c.cvae_gamma == 0)
        bad("controlvae.alpha", "at least one loss weight must be positive");
    if (c.attack_epsilon < 0 || c.pre_epsilon < 0)
        bad("attack.epsilon", "epsilon must be >= 0");
    if (c.attack_iterations < 0 || c.pre_iterations < 0 || c.latent_iterations < 0)
        bad("attack.iterations", "iteration counts must be >= 0");
    if (c.attack_iterations > 0 && c.attack_step <= 0)
        bad("attack.step", "step must be positive");
    if (c.pre_iterations > 0 && c.pre_step <= 0) bad("attack.pre_step", "step must be positive");
    if (c.latent_diffusion_steps < 0 || c.latent_diffusion_steps > c.diffusion_ddim_steps)
        bad("attack.diffusion_steps", "must lie within the sampler sub-schedule");
    if (c.latent_iterations > 0 && c.latent_step <= 0)
        bad("attack.latent_step", "step must be positive");
    for (const auto& a : c.detector_archs)
        if (a != "convnet_small" && a != "convnet_deep" && a != "attention_lite")
            bad("detector.archs", "unknown architecture '" + a + "'");
    for (const auto& m : c.attack_methods)
        if (m != "none" && m != "fgsm" && m != "pgd" && m != "stealth" && m != "stealth_pre")
            bad("attack.methods", "unknown attack '" + m + "'");
    for (const auto& s : c.attack_surrogates)
        if (std::find(c.detector_archs.begin(), c.detector_archs.end(), s) ==
            c.detector_archs.end())
            bad("attack.surrogates", "surrogate '" + s + "' is not among detector.archs");
    if (std::find(c.detector_archs.begin(), c.detector_archs.end(), c.perceptual_detector) ==
        c.detector_archs.end())
        bad("controlvae.perceptual_detector", "'" + c.perceptual_detector +
                                                  "' is not among detector.archs");
}

}  // namespace

std::string RunConfig::canonical_text() const {
    std::ostringstream ss;
    for (const auto& [key, field] : schema()) ss << key << "=" << field.render(*this) << "\n";
    return ss.str();
}

RunConfig validate_config_text(const std::string& text, std::vector<ConfigIssue>& issues) {
    RunConfig cfg;
    int lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            issues.push_back({"line " + std::to_string(lineno), "expected key = value"});
            continue;
        }
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), issues);
    }
    validate_constraints(cfg, issues);
    return cfg;
}

RunConfig validate_config(const std::filesystem::path& path, std::vector<ConfigIssue>& issues) {
    return validate_config_text(read_text_file(path), issues);
}

void validate_constraints(const RunConfig& cfg, std::vector<ConfigIssue>& issues) {
    check_constraints_impl(cfg, issues);
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value,
                    std::vector<ConfigIssue>& issues) {
    auto it = schema().find(key);
    if (it == schema().end()) {
        issues.push_back({key, "unknown configuration key"});
        return;
    }
    try {
        it->second.set(cfg, value);
    } catch (const std::exception& e) {
        issues.push_back({key, std::string("invalid value '") + value + "': " + e.what()});
    }
}

}  // namespace stealth::cli
