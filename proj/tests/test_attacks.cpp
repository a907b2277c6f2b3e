#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "stealth/attacks.hpp"
#include "test_util.hpp"

using namespace stealth;
using namespace stealth::attack;
using testutil::TempDir;
using testutil::TinyWorld;

TEST_CASE("fgsm with zero budget is the identity") {
    const TinyWorld& w = TinyWorld::get();
    Rng rng(41);
    Tensor x = testutil::random_uniform_tensor({3, 32, 32}, rng);
    Tensor adv = fgsm(x, *w.det_small, 0.0);
    CHECK(adv.max_abs_diff(x) == 0.0);
}

TEST_CASE("fgsm moves every pixel by epsilon times the gradient sign") {
    // closed-form linear surrogate: loss = <v, x>, gradient = v
    Rng rng(42);
    Tensor v = testutil::random_tensor({3, 8, 8}, rng);
    for (size_t i = 0; i < v.numel(); ++i)
        if (std::fabs(v[i]) < 0.05) v[i] = 0.1;  // keep signs unambiguous
    LossGradFn grad_fn = [&v](const Tensor& img) {
        double loss = 0.0;
        for (size_t i = 0; i < img.numel(); ++i) loss += v[i] * img[i];
        return std::make_pair(loss, v);
    };
    Tensor x = Tensor::full({3, 8, 8}, 0.5);  // interior: no box clipping
    double eps = 8.0 / 255.0;
    Tensor adv = fgsm(x, grad_fn, eps);
    for (size_t i = 0; i < x.numel(); ++i)
        CHECK(adv[i] == doctest::Approx(0.5 + eps * (v[i] > 0 ? 1 : -1)).epsilon(1e-12));
}

TEST_CASE("pgd with zero iterations is the identity") {
    const TinyWorld& w = TinyWorld::get();
    Rng rng(43);
    Tensor x = testutil::random_uniform_tensor({3, 32, 32}, rng);
    PgdConfig cfg{8.0 / 255.0, 2.0 / 255.0, 0};
    CHECK(pgd(x, *w.det_small, cfg).max_abs_diff(x) == 0.0);
}

TEST_CASE("one pgd iteration at full step reproduces fgsm exactly") {
    const TinyWorld& w = TinyWorld::get();
    auto recs = w.manifest.select(corpus::Split::test, corpus::Label::generated);
    Tensor x = corpus::load_tensor_image(w.manifest.root / recs[0].path, 32);
    double eps = 8.0 / 255.0;
    Tensor a = fgsm(x, *w.det_small, eps);
    Tensor b = pgd(x, *w.det_small, PgdConfig{eps, eps, 1});
    CHECK(a.max_abs_diff(b) == 0.0);
}

TEST_CASE("pgd iterates never leave the epsilon ball or the pixel box") {
    // random-gradient surrogate pushes in arbitrary directions
    Rng rng(44);
    LossGradFn grad_fn = [&rng](const Tensor& img) {
        Tensor g(img.shape());
        for (size_t i = 0; i < g.numel(); ++i) g[i] = rng.gaussian();
        return std::make_pair(0.0, g);
    };
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x = testutil::random_uniform_tensor({3, 8, 8}, rng);
        double eps = rng.uniform(0.0, 0.1);
        Tensor adv = pgd(x, grad_fn, PgdConfig{eps, eps / 2, 20});
        CHECK(adv.max_abs_diff(x) <= eps + 1e-9);
        CHECK(adv.min() >= 0.0);
        CHECK(adv.max() <= 1.0);
    }
}

TEST_CASE("preprocessing keeps its smaller budget and raises surrogate loss") {
    const TinyWorld& w = TinyWorld::get();
    auto recs = w.manifest.select(corpus::Split::test, corpus::Label::generated);
    REQUIRE(!recs.empty());
    int raised = 0, total = 0;
    for (size_t i = 0; i < std::min<size_t>(3, recs.size()); ++i) {
        Tensor x = corpus::load_tensor_image(w.manifest.root / recs[i].path, 32);
        Tensor pre = pgd_preprocess(x, *w.det_small);
        CHECK(pre.max_abs_diff(x) <= 4.0 / 255.0 + 1e-9);
        double before = w.det_small->loss_and_input_gradient(x, 1).first;
        double after = w.det_small->loss_and_input_gradient(pre, 1).first;
        raised += after >= before ? 1 : 0;
        ++total;
    }
    CHECK(raised == total);
}

TEST_CASE("latent attack contracts") {
    const TinyWorld& w = TinyWorld::get();
    auto recs = w.manifest.select(corpus::Split::test, corpus::Label::generated);
    REQUIRE(!recs.empty());
    Tensor x = corpus::load_tensor_image(w.manifest.root / recs[0].path, 32);

    SUBCASE("zero outer iterations reconstructs through the pipeline") {
        LatentAttackConfig cfg;
        cfg.iterations = 0;
        cfg.seed = 5;
        LatentAttackTrace trace;
        Tensor out =
            latent_adversarial_optimize(x, *w.det_small, *w.vae, *w.ldm, *w.cvae, cfg, &trace);
        // manual reconstruction of the same chain
        Tensor pre = trace.preprocessed;
        gen::LatentState z0 = w.vae->encode(pre);
        for (size_t i = 0; i < z0.z.numel(); ++i) z0.z[i] /= w.ldm->latent_scale();
        Rng rng(derive_seed(5, "latent_attack_noise"));
        gen::LatentState zn = gen::forward_diffuse(z0, w.ldm->schedule().ddim_indices[1],
                                                   w.ldm->schedule(), rng);
        gen::LatentState denoised = gen::ddim_denoise(zn, 2, *w.ldm);
        for (size_t i = 0; i < denoised.z.numel(); ++i) denoised.z[i] *= w.ldm->latent_scale();
        Tensor want = w.cvae->decode(denoised, pre);
        CHECK(out.max_abs_diff(want) < 1e-9);
        CHECK(out.min() >= 0.0);
        CHECK(out.max() <= 1.0);
    }
    SUBCASE("fixed seed gives identical adversarial images") {
        LatentAttackConfig cfg;
        cfg.seed = 6;
        Tensor a = latent_adversarial_optimize(x, *w.det_small, *w.vae, *w.ldm, *w.cvae, cfg);
        Tensor b = latent_adversarial_optimize(x, *w.det_small, *w.vae, *w.ldm, *w.cvae, cfg);
        CHECK(a.max_abs_diff(b) == 0.0);
    }
    SUBCASE("the surrogate objective does not decrease over the run") {
        LatentAttackConfig cfg;
        cfg.seed = 7;
        LatentAttackTrace trace;
        latent_adversarial_optimize(x, *w.det_small, *w.vae, *w.ldm, *w.cvae, cfg, &trace);
        REQUIRE(trace.surrogate_loss.size() == 6);  // T losses plus the final
        CHECK(trace.surrogate_loss.back() >= trace.surrogate_loss.front());
    }
    SUBCASE("a control branch from a different base is rejected") {
        TempDir tmp("latent_mismatch");
        corpus::SynthConfig sc;
        sc.image_size = 32;
        sc.genuine_count = 4;
        sc.seed = 123;
        corpus::CorpusManifest m2 = corpus::synthesize_toy_corpus(sc, tmp.path / "c");
        gen::TrainVaeConfig vc;
        vc.epochs = 1;
        vc.batch_size = 4;
        vc.seed = 124;
        auto other_vae = gen::train_vae(m2, vc, 32, 8, 4);
        gen::ControlVaeModel other_cvae(other_vae);
        LatentAttackConfig cfg;
        CHECK_THROWS_AS(latent_adversarial_optimize(x, *w.det_small, *w.vae, *w.ldm, other_cvae,
                                                    cfg),
                        ConfigError);
    }
}

TEST_CASE("attack spec parsing") {
    auto specs = parse_attack_specs(
        "# comment\n"
        "pgd convnet_small epsilon=0.05 iterations=3\n"
        "\n"
        "stealth convnet_deep\n");
    REQUIRE(specs.size() == 2);
    CHECK(specs[0].name == "pgd");
    CHECK(specs[0].surrogate == "convnet_small");
    CHECK(specs[0].params.at("epsilon") == doctest::Approx(0.05));
    CHECK(specs[0].params.at("iterations") == 3.0);
    CHECK(specs[1].params.empty());
    CHECK_THROWS_AS(parse_attack_specs("pgd\n"), FormatError);
    CHECK_THROWS_AS(parse_attack_specs("pgd s epsilon=abc\n"), FormatError);
}

TEST_CASE("attack suite") {
    const TinyWorld& w = TinyWorld::get();
    TempDir tmp("suite");
    AttackContext ctx;
    ctx.manifest = &w.manifest;
    ctx.split = corpus::Split::test;
    ctx.count = 3;
    ctx.image_size = 32;
    ctx.detectors["convnet_small"] = w.det_small;
    ctx.detectors["convnet_deep"] = w.det_deep;
    ctx.vae = w.vae;
    ctx.ldm = w.ldm;
    ctx.cvae = w.cvae;
    ctx.seed = 21;
    ctx.run_dir = tmp.path;
    ctx.pgd_defaults = {8.0 / 255.0, 2.0 / 255.0, 5};

    SUBCASE("empty spec list yields an empty result") {
        CHECK(run_attack_suite(ctx, {}).empty());
    }
    SUBCASE("identity attack success equals clean misclassification") {
        auto results = run_attack_suite(ctx, {{"none", "convnet_small", {}}});
        REQUIRE(results.size() == 1);
        REQUIRE(results[0].images.size() == 3);
        for (const auto& img : results[0].images) {
            REQUIRE(img.error.empty());
            for (const auto& [det, pre] : img.pre_prob) {
                // identity attack: post equals pre up to the 8-bit round trip
                CHECK(img.post_prob.at(det) == doctest::Approx(pre).epsilon(1e-9));
                CHECK(img.success.at(det) == (pre <= 0.5));
            }
            CHECK(img.psnr == 100.0);
            CHECK(img.ssim == 1.0);
        }
    }
    SUBCASE("grid over attacks and surrogates persists artifacts") {
        std::vector<AttackSpec> specs = {{"fgsm", "convnet_small", {}},
                                         {"pgd", "convnet_small", {{"iterations", 3}}},
                                         {"pgd", "convnet_deep", {{"iterations", 3}}}};
        auto results = run_attack_suite(ctx, specs);
        REQUIRE(results.size() == 3);
        for (const auto& r : results) {
            CHECK(r.images.size() == 3);
            for (const auto& img : r.images) {
                CHECK(img.error.empty());
                CHECK(std::filesystem::exists(img.adv_path));
                CHECK(img.pre_prob.size() == 2);
            }
            std::filesystem::path tsv =
                tmp.path / "adv" / r.attack / r.surrogate / "results.tsv";
            REQUIRE(std::filesystem::exists(tsv));
            AttackRunResult back = load_attack_results(tsv);
            CHECK(back.attack == r.attack);
            CHECK(back.surrogate == r.surrogate);
            REQUIRE(back.images.size() == 3);
            CHECK(back.images[0].pre_prob.at("convnet_small") ==
                  doctest::Approx(r.images[0].pre_prob.at("convnet_small")).epsilon(1e-5));
        }
        // adversarial images respect the pgd budget after quantization
        auto recs = w.manifest.select(corpus::Split::test, corpus::Label::generated);
        Tensor orig = corpus::load_tensor_image(w.manifest.root / recs[0].path, 32);
        Tensor adv = corpus::load_tensor_image(
            tmp.path / "adv" / "pgd" / "convnet_small" / (recs[0].id + ".png"), 32);
        CHECK(adv.max_abs_diff(orig) <= 8.0 / 255.0 + 1.0 / 255.0);
    }
    SUBCASE("unknown surrogate is a config error") {
        CHECK_THROWS_AS(run_attack_suite(ctx, {{"pgd", "missing", {}}}), ConfigError);
    }
    SUBCASE("per-image failures are recorded, the suite continues") {
        corpus::CorpusManifest broken = w.manifest;
        // point one test record at a missing file
        for (auto& r : broken.records)
            if (r.split == corpus::Split::test && r.label == corpus::Label::generated) {
                r.path = "generated/definitely_missing.png";
                break;
            }
        AttackContext bctx = ctx;
        bctx.manifest = &broken;
        auto results = run_attack_suite(bctx, {{"fgsm", "convnet_small", {}}});
        REQUIRE(results.size() == 1);
        int errors = 0, ok = 0;
        for (const auto& img : results[0].images) (img.error.empty() ? ok : errors)++;
        CHECK(errors == 1);
        CHECK(ok == 2);
    }
}
