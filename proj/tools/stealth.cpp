#include <CLI11.hpp>

#include <set>
#include <iostream>

#include "stealth/pipeline.hpp"

using namespace stealth;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string run_dir;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    bool force = false;
};

cli::RunConfig resolve_config(const GlobalArgs& args) {
    std::vector<cli::ConfigIssue> issues;
    cli::RunConfig cfg;
    if (!args.config_path.empty())
        cfg = cli::validate_config(args.config_path, issues);
    for (const auto& ov : args.overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos) {
            issues.push_back({ov, "override must be key=value"});
            continue;
        }
        cli::apply_override(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), issues);
    }
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    if (!args.run_dir.empty()) cfg.run_dir = args.run_dir;
    if (!args.overrides.empty() || args.config_path.empty())
        cli::validate_constraints(cfg, issues);
    if (!issues.empty()) {
        std::string msg = "configuration invalid:";
        std::set<std::string> seen;
        for (const auto& issue : issues) {
            std::string line = issue.key + ": " + issue.message;
            if (seen.insert(line).second) msg += "\n  " + line;
        }
        throw ConfigError(msg);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stealth: latent-space adversarial attacks on AI-image forensic detectors,\n"
                 "with spectral-fingerprint suppression and a full evaluation harness"};
    app.require_subcommand(1);
    app.fallthrough(true);  // global flags may follow the subcommand

    GlobalArgs args;
    app.add_option("--config", args.config_path, "configuration file (key = value lines)");
    app.add_option("--run-dir", args.run_dir, "run directory for all artifacts");
    app.add_option("--seed", args.seed, "master seed override");
    app.add_option("--override", args.overrides, "config override key=value (repeatable)");
    app.add_flag("--force", args.force, "rerun the stage even if already complete");

    std::string detector_arch;
    auto* synth = app.add_subcommand("synth", "synthesize the genuine toy corpus");
    auto* train_vae = app.add_subcommand("train-vae", "train the base VAE codec");
    auto* train_diff = app.add_subcommand(
        "train-diffusion", "train the latent diffusion model and sample the generated corpus");
    auto* train_det =
        app.add_subcommand("train-detector", "train surrogate forensic detectors");
    train_det->add_option("--arch", detector_arch,
                          "single architecture (default: all configured)");
    auto* prototype =
        app.add_subcommand("prototype", "build the denoiser filter and the noise prototype");
    auto* train_cvae = app.add_subcommand(
        "train-controlvae", "train the spectral-alignment control branch on the frozen VAE");
    auto* attack_cmd = app.add_subcommand("attack", "run the configured attack suite");
    auto* report_cmd = app.add_subcommand("report", "build CSV metrics and spectrum panels");
    auto* all_cmd = app.add_subcommand("all", "run every stage in dependency order");
    auto* validate_cmd =
        app.add_subcommand("validate", "validate the configuration and print it normalized");

    CLI11_PARSE(app, argc, argv);

    try {
        cli::RunConfig cfg = resolve_config(args);
        if (validate_cmd->parsed()) {
            std::cout << cfg.canonical_text();
            std::cout << "# config_hash=" << hex64(cfg.hash()) << "\n";
            return 0;
        }
        if (synth->parsed()) cli::stage_synth(cfg, args.force);
        if (train_vae->parsed()) cli::stage_train_vae(cfg, args.force);
        if (train_diff->parsed()) cli::stage_train_diffusion(cfg, args.force);
        if (train_det->parsed()) {
            if (detector_arch.empty())
                cli::stage_train_detectors(cfg, args.force);
            else
                cli::stage_train_detector(cfg, detector_arch, args.force);
        }
        if (prototype->parsed()) cli::stage_prototype(cfg, args.force);
        if (train_cvae->parsed()) cli::stage_train_controlvae(cfg, args.force);
        if (attack_cmd->parsed()) cli::stage_attack(cfg, args.force);
        if (report_cmd->parsed()) cli::stage_report(cfg, args.force);
        if (all_cmd->parsed()) cli::run_all_stages(cfg, args.force);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
