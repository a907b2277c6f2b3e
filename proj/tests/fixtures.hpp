#pragma once

#include <memory>

#include "stealth/attacks.hpp"
#include "stealth/corpus.hpp"
#include "stealth/detectors.hpp"
#include "stealth/genmodels.hpp"
#include "stealth/spectral.hpp"
#include "test_util.hpp"

namespace testutil {

using namespace stealth;

// One small trained stack shared across test cases: 32x32 corpus, tiny VAE,
// diffusion model, control branch and two detectors. Built once per binary.
struct TinyWorld {
    std::unique_ptr<TempDir> tmp;
    corpus::CorpusManifest manifest;
    std::shared_ptr<gen::VaeCodec> vae;
    std::shared_ptr<gen::LatentDiffusionModel> ldm;
    std::shared_ptr<gen::ControlVaeModel> cvae;
    std::shared_ptr<detect::SurrogateDetector> det_small;
    std::shared_ptr<detect::SurrogateDetector> det_deep;
    std::unique_ptr<spectral::DenoiserFilter> filter;
    std::unique_ptr<spectral::NoisePrototype> prototype;

    static const TinyWorld& get() {
        static TinyWorld world = build();
        return world;
    }

   private:
    static TinyWorld build() {
        TinyWorld w;
        w.tmp = std::make_unique<TempDir>("tiny_world");
        const int S = 32;

        corpus::SynthConfig sc;
        sc.image_size = S;
        sc.genuine_count = 48;
        sc.seed = 11;
        corpus::CorpusManifest genuine =
            corpus::synthesize_toy_corpus(sc, w.tmp->path / "corpus");
        genuine = corpus::split_dataset(genuine, {0.75, 0.125, 0.125}, 12);

        gen::TrainVaeConfig vc;
        vc.epochs = 12;
        vc.batch_size = 12;
        vc.lr = 2e-3;
        vc.seed = 13;
        w.vae = gen::train_vae(genuine, vc, S, 8, 4);

        gen::TrainDiffusionConfig dc;
        dc.epochs = 25;
        dc.batch_size = 24;
        dc.lr = 2e-3;
        dc.seed = 14;
        w.ldm = gen::train_latent_diffusion(genuine, *w.vae, dc, 48,
                                            gen::DiffusionSchedule::linear(1000, 20));

        corpus::CorpusManifest fakes =
            corpus::generate_fake_corpus(*w.ldm, *w.vae, 32, 15, w.tmp->path / "corpus");
        fakes = corpus::split_dataset(fakes, {0.75, 0.125, 0.125}, 12);
        w.manifest = corpus::merge_manifests(genuine, fakes);

        detect::TrainDetectorConfig tc;
        tc.epochs = 6;
        tc.batch_size = 16;
        tc.lr = 1e-3;
        tc.seed = 16;
        w.det_small = detect::train_detector(w.manifest, detect::Arch::convnet_small, S, tc);
        tc.seed = 17;
        w.det_deep = detect::train_detector(w.manifest, detect::Arch::convnet_deep, S, tc);

        w.filter = std::make_unique<spectral::DenoiserFilter>(
            spectral::DenoiserFilter::fixed_blur(5, 1.0));
        auto recs = w.manifest.select(corpus::Split::train, corpus::Label::genuine);
        std::vector<spectral::NoiseResidual> residuals;
        for (const auto& r : recs)
            residuals.push_back(spectral::noise_residual(
                corpus::load_tensor_image(w.manifest.root / r.path, S), *w.filter, r.id));
        w.prototype = std::make_unique<spectral::NoisePrototype>(
            spectral::noise_prototype(residuals, *w.filter));

        w.cvae = std::make_shared<gen::ControlVaeModel>(w.vae);
        gen::PerceptualMetric perceptual(w.det_small);
        gen::TrainControlVaeConfig cc;
        cc.epochs = 3;
        cc.batch_size = 12;
        cc.lr = 1e-3;
        cc.seed = 18;
        gen::train_control_vae(*w.cvae, w.manifest, *w.prototype, *w.filter, {1.0, 1.0, 10.0},
                               perceptual, cc);
        return w;
    }
};

}  // namespace testutil
