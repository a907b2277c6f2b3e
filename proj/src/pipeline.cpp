#include "stealth/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

namespace stealth::cli {

namespace {

struct StageTimer {
    std::string name;
    std::filesystem::path run_dir;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    StageTimer(std::string n, std::filesystem::path dir)
        : name(std::move(n)), run_dir(std::move(dir)) {
        std::cout << "[" << name << "] started\n";
    }
    ~StageTimer() {
        double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "[" << name << "] done in " << fmt_fixed(s, 1) << "s" << std::endl;
        try {
            ensure_dir(run_dir / "curves");
            std::ofstream out(run_dir / "curves" / "stage_timing.tsv", std::ios::app);
            out << name << "\t" << fmt_fixed(s, 3) << "\n";
        } catch (...) {
        }
    }
};

void require_file(const std::filesystem::path& p, const std::string& producing_command) {
    if (!std::filesystem::exists(p))
        throw StateError("missing artifact " + p.string() + "; run `stealth " +
                         producing_command + "` first");
}

corpus::SynthConfig synth_config(const RunConfig& cfg) {
    corpus::SynthConfig sc;
    sc.image_size = cfg.image_size;
    sc.genuine_count = cfg.genuine_count;
    sc.seed = derive_seed(cfg.seed, "corpus");
    sc.grain_low = cfg.grain_low;
    sc.grain_high = cfg.grain_high;
    return sc;
}

}  // namespace

RunPaths RunPaths::at(const std::filesystem::path& run_dir) {
    RunPaths p;
    p.run_dir = run_dir;
    p.corpus_dir = run_dir / "corpus";
    p.manifest = p.corpus_dir / "manifest.tsv";
    p.models_dir = run_dir / "models";
    p.curves_dir = run_dir / "curves";
    p.reports_dir = run_dir / "reports";
    p.vae = p.models_dir / "vae.bin";
    p.ldm = p.models_dir / "ldm.bin";
    p.controlvae = p.models_dir / "controlvae.bin";
    p.filter = p.models_dir / "filter.bin";
    p.prototype = p.models_dir / "prototype.bin";
    return p;
}

RunState RunState::load(const std::filesystem::path& run_dir) {
    RunState st;
    st.path_ = run_dir / "run_state.tsv";
    if (std::filesystem::exists(st.path_)) {
        for (const auto& line : split(read_text_file(st.path_), '\n')) {
            if (line.empty() || line[0] == '#') continue;
            auto f = split(line, '\t');
            if (f.size() != 3 || f[0] != "stage") throw FormatError("bad run state line: " + line);
            st.done_[f[1]] = f[2];
        }
    }
    return st;
}

void RunState::save() const {
    std::ostringstream ss;
    ss << "# tool_version=" << kToolVersion << "\n";
    for (const auto& [stage, hash] : done_) ss << "stage\t" << stage << "\t" << hash << "\n";
    write_text_file(path_, ss.str());
}

bool RunState::is_done(const std::string& stage, uint64_t config_hash) const {
    auto it = done_.find(stage);
    return it != done_.end() && it->second == hex64(config_hash);
}

void RunState::mark_done(const std::string& stage, uint64_t config_hash) {
    done_[stage] = hex64(config_hash);
}

// -------------------------------------------------------------------- loads

corpus::CorpusManifest load_run_manifest(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.manifest, "synth");
    return corpus::read_manifest(p.manifest);
}

std::shared_ptr<gen::VaeCodec> load_vae(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.vae, "train-vae");
    return gen::VaeCodec::load(p.vae);
}

std::shared_ptr<gen::LatentDiffusionModel> load_ldm(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.ldm, "train-diffusion");
    return gen::LatentDiffusionModel::load(p.ldm);
}

std::shared_ptr<gen::ControlVaeModel> load_controlvae(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.controlvae, "train-controlvae");
    return gen::ControlVaeModel::load(p.controlvae, load_vae(cfg));
}

std::shared_ptr<detect::SurrogateDetector> load_detector(const RunConfig& cfg,
                                                         const std::string& arch) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.detector(arch), "train-detector");
    return detect::SurrogateDetector::load(p.detector(arch));
}

spectral::DenoiserFilter load_run_filter(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.filter, "prototype");
    return spectral::DenoiserFilter::load(p.filter);
}

spectral::NoisePrototype load_run_prototype(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    require_file(p.prototype, "prototype");
    return spectral::load_prototype(p.prototype, load_run_filter(cfg).fingerprint());
}

ControlVaeStats load_controlvae_stats(const RunConfig& cfg) {
    RunPaths p = RunPaths::at(cfg.run_dir);
    std::filesystem::path f = p.curves_dir / "controlvae_stats.tsv";
    require_file(f, "train-controlvae");
    ControlVaeStats st;
    for (const auto& line : split(read_text_file(f), '\n')) {
        auto kv = split(line, '\t');
        if (kv.size() != 2) continue;
        if (kv[0] == "initial_val_npl") st.initial_val_npl = std::stod(kv[1]);
        if (kv[0] == "final_val_npl") st.final_val_npl = std::stod(kv[1]);
    }
    return st;
}

// ------------------------------------------------------------------- stages

void stage_synth(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    if (!force && state.is_done("synth", cfg.hash()) &&
        std::filesystem::exists(RunPaths::at(cfg.run_dir).manifest)) {
        std::cout << "[synth] already complete; skipping\n";
        return;
    }
    StageTimer timer("synth", cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    ensure_dir(p.run_dir);
    write_text_file(p.run_dir / "config.resolved", cfg.canonical_text());
    corpus::CorpusManifest m = corpus::synthesize_toy_corpus(synth_config(cfg), p.corpus_dir);
    m = corpus::split_dataset(m, cfg.split_ratios, derive_seed(cfg.seed, "split"));
    corpus::write_manifest(m, p.manifest);
    state.mark_done("synth", cfg.hash());
    state.save();
}

void stage_train_vae(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    if (!force && state.is_done("train_vae", cfg.hash()) && std::filesystem::exists(p.vae)) {
        std::cout << "[train_vae] already complete; skipping\n";
        return;
    }
    require_file(p.manifest, "synth");
    StageTimer timer("train_vae", cfg.run_dir);
    corpus::CorpusManifest m = corpus::read_manifest(p.manifest);
    gen::TrainVaeConfig tc;
    tc.epochs = cfg.vae_epochs;
    tc.batch_size = cfg.vae_batch_size;
    tc.lr = cfg.vae_lr;
    tc.kl_weight = cfg.vae_kl_weight;
    tc.seed = derive_seed(cfg.seed, "vae");
    ensure_dir(p.curves_dir);
    tc.curve_path = p.curves_dir / "vae.tsv";
    auto vae = gen::train_vae(m, tc, cfg.image_size, cfg.vae_base_channels,
                              cfg.vae_latent_channels);
    vae->save(p.vae);
    state.mark_done("train_vae", cfg.hash());
    state.save();
}

void stage_train_diffusion(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    if (!force && state.is_done("train_diffusion", cfg.hash()) &&
        std::filesystem::exists(p.ldm)) {
        std::cout << "[train_diffusion] already complete; skipping\n";
        return;
    }
    require_file(p.vae, "train-vae");
    StageTimer timer("train_diffusion", cfg.run_dir);
    corpus::CorpusManifest m = load_run_manifest(cfg);
    auto vae = gen::VaeCodec::load(p.vae);
    gen::TrainDiffusionConfig tc;
    tc.epochs = cfg.diffusion_epochs;
    tc.batch_size = cfg.diffusion_batch_size;
    tc.lr = cfg.diffusion_lr;
    tc.seed = derive_seed(cfg.seed, "diffusion");
    ensure_dir(p.curves_dir);
    tc.curve_path = p.curves_dir / "ldm.tsv";
    auto schedule =
        gen::DiffusionSchedule::linear(cfg.diffusion_total_steps, cfg.diffusion_ddim_steps);
    auto ldm = gen::train_latent_diffusion(m, *vae, tc, cfg.diffusion_hidden_channels, schedule);
    ldm->save(p.ldm);

    // The generated class: sample the trained model, split, and fold into the
    // run manifest.
    corpus::CorpusManifest fakes = corpus::generate_fake_corpus(
        *ldm, *vae, cfg.generated_count, derive_seed(cfg.seed, "fake_corpus"), p.corpus_dir);
    fakes = corpus::split_dataset(fakes, cfg.split_ratios, derive_seed(cfg.seed, "split"));
    corpus::CorpusManifest genuine_only;
    genuine_only.root = m.root;
    genuine_only.seed = m.seed;
    for (const auto& r : m.records)
        if (r.label == corpus::Label::genuine) genuine_only.records.push_back(r);
    corpus::CorpusManifest merged = corpus::merge_manifests(genuine_only, fakes);
    corpus::write_manifest(merged, p.manifest);
    state.mark_done("train_diffusion", cfg.hash());
    state.save();
}

void stage_train_detector(const RunConfig& cfg, const std::string& arch, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    std::string stage = "train_detector/" + arch;
    if (!force && state.is_done(stage, cfg.hash()) &&
        std::filesystem::exists(p.detector(arch))) {
        std::cout << "[" << stage << "] already complete; skipping\n";
        return;
    }
    require_file(p.ldm, "train-diffusion");
    StageTimer timer(stage, cfg.run_dir);
    corpus::CorpusManifest m = load_run_manifest(cfg);
    detect::TrainDetectorConfig tc;
    tc.lr = cfg.detector_lr;
    tc.batch_size = cfg.detector_batch_size;
    tc.epochs = cfg.detector_epochs;
    tc.seed = derive_seed(cfg.seed, "detector/" + arch);
    ensure_dir(p.curves_dir);
    tc.curve_path = p.curves_dir / ("detector_" + arch + ".tsv");
    auto det = detect::train_detector(m, detect::arch_from_string(arch), cfg.image_size, tc);
    det->save(p.detector(arch));
    ensure_dir(p.reports_dir);
    detect::save_report(detect::evaluate_detector(*det, m, corpus::Split::test),
                        p.reports_dir / ("detector_" + arch + ".txt"));
    state.mark_done(stage, cfg.hash());
    state.save();
}

void stage_train_detectors(const RunConfig& cfg, bool force) {
    for (const auto& arch : cfg.detector_archs) stage_train_detector(cfg, arch, force);
}

void stage_prototype(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    if (!force && state.is_done("prototype", cfg.hash()) &&
        std::filesystem::exists(p.prototype)) {
        std::cout << "[prototype] already complete; skipping\n";
        return;
    }
    require_file(p.manifest, "synth");
    StageTimer timer("prototype", cfg.run_dir);
    corpus::CorpusManifest m = load_run_manifest(cfg);
    auto recs = m.select(corpus::Split::train, corpus::Label::genuine);
    if (recs.size() > static_cast<size_t>(cfg.prototype_count))
        recs.resize(static_cast<size_t>(cfg.prototype_count));
    std::vector<Tensor> images = corpus::load_pixels(m, recs, cfg.image_size);

    spectral::DenoiserFilter filter =
        cfg.filter_kind == "fixed_blur"
            ? spectral::DenoiserFilter::fixed_blur(cfg.blur_size, cfg.blur_sigma)
            : spectral::train_learned_denoiser(images, cfg.denoiser_epochs, cfg.denoiser_lr,
                                               cfg.denoiser_noise,
                                               derive_seed(cfg.seed, "denoiser"));
    filter.save(p.filter);

    std::vector<spectral::NoiseResidual> residuals;
    residuals.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i)
        residuals.push_back(spectral::noise_residual(images[i], filter, recs[i].id));
    spectral::NoisePrototype proto = spectral::noise_prototype(residuals, filter);
    spectral::save_prototype(proto, p.prototype);
    ensure_dir(p.reports_dir / "spectra");
    spectral::render_spectrum(proto.spectrum, true, p.reports_dir / "spectra" / "prototype.png");
    state.mark_done("prototype", cfg.hash());
    state.save();
}

void stage_train_controlvae(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    if (!force && state.is_done("train_controlvae", cfg.hash()) &&
        std::filesystem::exists(p.controlvae)) {
        std::cout << "[train_controlvae] already complete; skipping\n";
        return;
    }
    require_file(p.vae, "train-vae");
    require_file(p.prototype, "prototype");
    require_file(p.detector(cfg.perceptual_detector), "train-detector");
    StageTimer timer("train_controlvae", cfg.run_dir);
    corpus::CorpusManifest m = load_run_manifest(cfg);
    auto vae = gen::VaeCodec::load(p.vae);
    spectral::DenoiserFilter filter = load_run_filter(cfg);
    spectral::NoisePrototype proto = load_run_prototype(cfg);
    auto perceptual_net = detect::SurrogateDetector::load(p.detector(cfg.perceptual_detector));
    gen::PerceptualMetric perceptual(perceptual_net);

    auto cvae = std::make_shared<gen::ControlVaeModel>(vae);
    gen::CompositeLossWeights weights{cfg.cvae_alpha, cfg.cvae_beta, cfg.cvae_gamma};
    gen::TrainControlVaeConfig tc;
    tc.epochs = cfg.cvae_epochs;
    tc.batch_size = cfg.cvae_batch_size;
    tc.lr = cfg.cvae_lr;
    tc.seed = derive_seed(cfg.seed, "controlvae");
    ensure_dir(p.curves_dir);
    tc.curve_path = p.curves_dir / "controlvae.tsv";
    gen::ControlVaeTrainStats stats =
        gen::train_control_vae(*cvae, m, proto, filter, weights, perceptual, tc);
    cvae->save(p.controlvae);
    std::ostringstream ss;
    ss << "initial_val_npl\t" << fmt_fixed(stats.initial_val_npl, 8) << "\n"
       << "final_val_npl\t" << fmt_fixed(stats.final_val_npl, 8) << "\n";
    write_text_file(p.curves_dir / "controlvae_stats.tsv", ss.str());
    state.mark_done("train_controlvae", cfg.hash());
    state.save();
}

namespace {

attack::AttackContext attack_context(const RunConfig& cfg, corpus::CorpusManifest& manifest) {
    attack::AttackContext ctx;
    ctx.manifest = &manifest;
    ctx.split = corpus::Split::test;
    ctx.count = cfg.attack_count;
    ctx.image_size = cfg.image_size;
    ctx.seed = derive_seed(cfg.seed, "attack");
    ctx.run_dir = cfg.run_dir;
    for (const auto& arch : cfg.detector_archs)
        ctx.detectors[arch] = load_detector(cfg, arch);
    ctx.vae = load_vae(cfg);
    ctx.ldm = load_ldm(cfg);
    ctx.cvae = load_controlvae(cfg);
    ctx.pgd_defaults = {cfg.attack_epsilon, cfg.attack_step, cfg.attack_iterations};
    ctx.latent_defaults.diffusion_steps = cfg.latent_diffusion_steps;
    ctx.latent_defaults.iterations = cfg.latent_iterations;
    ctx.latent_defaults.step_size = cfg.latent_step;
    ctx.latent_defaults.preprocess = {cfg.pre_epsilon, cfg.pre_step, cfg.pre_iterations};
    return ctx;
}

std::vector<attack::AttackSpec> config_attack_specs(const RunConfig& cfg) {
    std::vector<attack::AttackSpec> specs;
    for (const auto& method : cfg.attack_methods)
        for (const auto& surrogate : cfg.attack_surrogates)
            specs.push_back({method, surrogate, {}});
    return specs;
}

}  // namespace

void stage_attack(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    if (!force && state.is_done("attack", cfg.hash())) {
        std::cout << "[attack] already complete; skipping\n";
        return;
    }
    require_file(p.controlvae, "train-controlvae");
    for (const auto& arch : cfg.detector_archs) require_file(p.detector(arch), "train-detector");
    StageTimer timer("attack", cfg.run_dir);
    corpus::CorpusManifest m = load_run_manifest(cfg);
    attack::AttackContext ctx = attack_context(cfg, m);
    auto results = attack::run_attack_suite(ctx, config_attack_specs(cfg));
    std::ostringstream timing;
    timing << "attack\tsurrogate\timages\tseconds\n";
    for (const auto& r : results) {
        std::cout << "  attack " << r.attack << " (surrogate " << r.surrogate << "): "
                  << r.images.size() << " images in " << fmt_fixed(r.seconds, 1) << "s\n";
        timing << r.attack << '\t' << r.surrogate << '\t' << r.images.size() << '\t'
               << fmt_fixed(r.seconds, 3) << "\n";
    }
    ensure_dir(p.curves_dir);
    write_text_file(p.curves_dir / "attack_timing.tsv", timing.str());
    state.mark_done("attack", cfg.hash());
    state.save();
}

void stage_report(const RunConfig& cfg, bool force) {
    RunState state = RunState::load(cfg.run_dir);
    RunPaths p = RunPaths::at(cfg.run_dir);
    if (!force && state.is_done("report", cfg.hash()) &&
        std::filesystem::exists(p.reports_dir / "metrics.csv")) {
        std::cout << "[report] already complete; skipping\n";
        return;
    }
    // Reports are rebuilt from persisted attack artifacts only.
    bool any = false;
    for (const auto& method : cfg.attack_methods)
        for (const auto& surrogate : cfg.attack_surrogates)
            any |= std::filesystem::exists(p.run_dir / "adv" / method / surrogate /
                                           "results.tsv");
    if (!any)
        throw StateError("no attack results under " + (p.run_dir / "adv").string() +
                         "; run `stealth attack` first");
    StageTimer timer("report", cfg.run_dir);
    corpus::CorpusManifest m = load_run_manifest(cfg);
    spectral::DenoiserFilter filter = load_run_filter(cfg);

    std::vector<attack::AttackRunResult> results;
    for (const auto& method : cfg.attack_methods)
        for (const auto& surrogate : cfg.attack_surrogates) {
            std::filesystem::path f = p.run_dir / "adv" / method / surrogate / "results.tsv";
            if (std::filesystem::exists(f)) results.push_back(attack::load_attack_results(f));
        }

    report::ReportContext ctx;
    ctx.run_dir = cfg.run_dir;
    ctx.manifest = &m;
    ctx.detector_ids = cfg.detector_archs;
    ctx.filter = &filter;
    ctx.image_size = cfg.image_size;
    ctx.reference_count = cfg.reference_count;
    report::ReportOutput out = report::build_report(ctx, results);
    std::cout << "  wrote " << out.csv_path.string() << " (" << out.rows.size() << " rows, "
              << out.gaps.size() << " gaps)\n";
    state.mark_done("report", cfg.hash());
    state.save();
}

void run_all_stages(const RunConfig& cfg, bool force) {
    stage_synth(cfg, force);
    stage_train_vae(cfg, force);
    stage_train_diffusion(cfg, force);
    stage_train_detectors(cfg, force);
    stage_prototype(cfg, force);
    stage_train_controlvae(cfg, force);
    stage_attack(cfg, force);
    stage_report(cfg, force);
}

}  // namespace stealth::cli
