#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "stealth/genmodels.hpp"
#include "stealth/metrics.hpp"
#include "stealth/weights_io.hpp"
#include "test_util.hpp"

using namespace stealth;
using namespace stealth::gen;
using testutil::TempDir;
using testutil::TinyWorld;

TEST_CASE("linear schedule satisfies its invariants") {
    DiffusionSchedule s = DiffusionSchedule::linear(1000, 20);
    CHECK(s.abar(0) == 1.0);
    CHECK(s.abar(1000) > 0.0);
    for (int t = 1; t <= 1000; ++t) CHECK(s.abar(t) <= s.abar(t - 1));
    REQUIRE(s.ddim_indices.size() == 20);
    CHECK(s.ddim_indices.front() == 50);
    CHECK(s.ddim_indices.back() == 1000);
    CHECK_THROWS_AS(DiffusionSchedule::linear(1000, 21), ConfigError);
    CHECK_THROWS_AS(DiffusionSchedule::linear(100, 200), ConfigError);
}

TEST_CASE("forward_diffuse boundary behavior") {
    // Handcrafted table exercises the boundary signal levels directly.
    DiffusionSchedule s;
    s.total_steps = 3;
    s.alpha_bar = {1.0, 1.0, 0.5, 0.0};
    s.ddim_indices = {1, 2, 3};

    LatentState z0;
    z0.z = Tensor({1, 2, 2}, {0.3, -0.7, 1.1, 0.0});
    Rng rng(5);
    LatentState z1 = forward_diffuse(z0, 1, s, rng);  // abar = 1: no noise
    CHECK(z1.t == 1);
    CHECK(z1.z.max_abs_diff(z0.z) == 0.0);

    // abar = 0: pure standard normal, independent of z0
    LatentState big;
    big.z = Tensor::full({1, 2, 2}, 1e6);
    Rng rng_a(6), rng_b(6);
    LatentState na = forward_diffuse(big, 3, s, rng_a);
    LatentState zb;
    zb.z = Tensor({1, 2, 2});
    LatentState nb = forward_diffuse(zb, 3, s, rng_b);
    CHECK(na.z.max_abs_diff(nb.z) == 0.0);  // same rng stream, no z0 leakage

    CHECK_THROWS_AS(forward_diffuse(z0, 0, s, rng), ConfigError);
    CHECK_THROWS_AS(forward_diffuse(z0, 4, s, rng), ConfigError);
}

TEST_CASE("forward_diffuse statistics match the schedule at 10k samples") {
    DiffusionSchedule s;
    s.total_steps = 1;
    s.alpha_bar = {1.0, 0.5};
    s.ddim_indices = {1};
    const double c = 1.3;
    LatentState z0;
    z0.z = Tensor::full({1, 1, 1}, c);
    Rng rng(7);
    const int n = 10000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        double v = forward_diffuse(z0, 1, s, rng).z[0];
        sum += v;
        sumsq += v * v;
    }
    double mean = sum / n;
    double var = sumsq / n - mean * mean;
    double want_mean = std::sqrt(0.5) * c, want_var = 0.5;
    double se_mean = std::sqrt(want_var / n);
    double se_var = want_var * std::sqrt(2.0 / (n - 1));
    CHECK(std::fabs(mean - want_mean) < 3 * se_mean);
    CHECK(std::fabs(var - want_var) < 3 * se_var);
}

TEST_CASE("vae encode/decode contracts") {
    const TinyWorld& w = TinyWorld::get();
    auto recs = w.manifest.select(corpus::Split::train, corpus::Label::genuine);
    Tensor img = corpus::load_tensor_image(w.manifest.root / recs[0].path, 32);

    LatentState z = w.vae->encode(img);
    CHECK(z.t == 0);
    CHECK(z.z.shape() == std::vector<int>{4, 4, 4});
    LatentState z2 = w.vae->encode(img);
    CHECK(z.z.max_abs_diff(z2.z) == 0.0);  // posterior mean, no sampling

    auto [recon, taps] = w.vae->decode_with_taps(z);
    CHECK(recon.shape() == std::vector<int>{3, 32, 32});
    CHECK(recon.min() >= 0.0);
    CHECK(recon.max() <= 1.0);
    CHECK(taps[0].shape() == std::vector<int>{8, 16, 16});   // 1/2 resolution
    CHECK(taps[1].shape() == std::vector<int>{16, 8, 8});    // 1/4
    CHECK(taps[2].shape() == std::vector<int>{32, 4, 4});    // 1/8

    CHECK_THROWS_AS(w.vae->encode(Tensor({3, 16, 16})), ShapeError);
    LatentState bad;
    bad.z = Tensor({4, 8, 8});
    CHECK_THROWS_AS(w.vae->decode(bad), ShapeError);
}

TEST_CASE("vae training overfits one image past 30 dB") {
    TempDir tmp("vae_overfit");
    corpus::SynthConfig sc;
    sc.image_size = 32;
    sc.genuine_count = 2;
    sc.seed = 77;
    corpus::CorpusManifest m = corpus::synthesize_toy_corpus(sc, tmp.path / "c");
    // both records stay in train; overfit them
    gen::TrainVaeConfig vc;
    vc.epochs = 600;
    vc.batch_size = 2;
    vc.lr = 2e-3;
    vc.kl_weight = 1e-6;
    vc.seed = 5;
    auto vae = train_vae(m, vc, 32, 8, 4);
    Tensor img = corpus::load_tensor_image(m.root / m.records[0].path, 32);
    double psnr = report::psnr(img, vae->decode(vae->encode(img)));
    CHECK(psnr > 30.0);
}

TEST_CASE("vae training is deterministic per seed") {
    TempDir tmp("vae_det");
    corpus::SynthConfig sc;
    sc.image_size = 32;
    sc.genuine_count = 6;
    sc.seed = 40;
    corpus::CorpusManifest m = corpus::synthesize_toy_corpus(sc, tmp.path / "c");
    gen::TrainVaeConfig vc;
    vc.epochs = 2;
    vc.batch_size = 4;
    vc.seed = 9;
    auto a = train_vae(m, vc, 32, 8, 4);
    auto b = train_vae(m, vc, 32, 8, 4);
    CHECK(a->weights_hash() == b->weights_hash());
}

TEST_CASE("ddim denoise contracts") {
    const TinyWorld& w = TinyWorld::get();
    const DiffusionSchedule& s = w.ldm->schedule();
    Rng rng(31);
    LatentState z0;
    z0.z = testutil::random_tensor({4, 4, 4}, rng);

    SUBCASE("zero steps returns the input unchanged") {
        LatentState out = ddim_denoise(z0, 0, *w.ldm);
        CHECK(out.z.max_abs_diff(z0.z) == 0.0);
        CHECK(out.t == z0.t);
    }
    SUBCASE("input must sit on the right sub-schedule index") {
        LatentState z;
        z.z = z0.z;
        z.t = 123;  // not an index
        CHECK_THROWS_AS(ddim_denoise(z, 2, *w.ldm), ConfigError);
        z.t = s.ddim_indices[4];
        CHECK_THROWS_AS(ddim_denoise(z, 2, *w.ldm), ConfigError);
    }
    SUBCASE("deterministic end to end") {
        Rng noise_rng_a(77), noise_rng_b(77);
        LatentState za = forward_diffuse(z0, s.ddim_indices[1], s, noise_rng_a);
        LatentState zb = forward_diffuse(z0, s.ddim_indices[1], s, noise_rng_b);
        LatentState da = ddim_denoise(za, 2, *w.ldm);
        LatentState db = ddim_denoise(zb, 2, *w.ldm);
        CHECK(da.t == 0);
        CHECK(da.z.max_abs_diff(db.z) == 0.0);
    }
    SUBCASE("denoising moves the latent back toward the clean point") {
        // scaled space: the model was trained on unit-scale latents
        auto recs = w.manifest.select(corpus::Split::train, corpus::Label::genuine);
        Tensor img = corpus::load_tensor_image(w.manifest.root / recs[0].path, 32);
        LatentState clean = w.vae->encode(img);
        for (size_t i = 0; i < clean.z.numel(); ++i) clean.z[i] /= w.ldm->latent_scale();
        Rng nrng(123);
        LatentState noised = forward_diffuse(clean, s.ddim_indices[1], s, nrng);
        LatentState denoised = ddim_denoise(noised, 2, *w.ldm);
        double d_noised = 0.0, d_denoised = 0.0;
        for (size_t i = 0; i < clean.z.numel(); ++i) {
            d_noised += (noised.z[i] - clean.z[i]) * (noised.z[i] - clean.z[i]);
            d_denoised += (denoised.z[i] - clean.z[i]) * (denoised.z[i] - clean.z[i]);
        }
        CHECK(d_denoised < d_noised);
    }
}

TEST_CASE("reverse moments are well-formed") {
    const TinyWorld& w = TinyWorld::get();
    Rng rng(33);
    Tensor z = testutil::random_tensor({4, 4, 4}, rng);
    auto [mean, sigma] = w.ldm->reverse_moments(z, w.ldm->schedule().ddim_indices[3]);
    CHECK(mean.same_shape(z));
    CHECK(mean.all_finite());
    CHECK(sigma >= 0.0);
    CHECK_THROWS_AS(w.ldm->reverse_moments(z, 0), ConfigError);
}

TEST_CASE("diffusion training reduces validation loss and is seeded") {
    TempDir tmp("ldm_curve");
    corpus::SynthConfig sc;
    sc.image_size = 32;
    sc.genuine_count = 16;
    sc.seed = 50;
    corpus::CorpusManifest m = corpus::synthesize_toy_corpus(sc, tmp.path / "c");
    gen::TrainVaeConfig vc;
    vc.epochs = 6;
    vc.batch_size = 8;
    vc.seed = 51;
    auto vae = train_vae(m, vc, 32, 8, 4);
    gen::TrainDiffusionConfig dc;
    dc.epochs = 10;
    dc.batch_size = 16;
    dc.seed = 52;
    dc.curve_path = tmp.path / "curve.tsv";
    auto ldm = train_latent_diffusion(m, *vae, dc, 32, DiffusionSchedule::linear(1000, 20));
    CHECK(ldm->trained());
    // parse the curve: val loss at the last epoch below the first
    auto lines = split(read_text_file(tmp.path / "curve.tsv"), '\n');
    REQUIRE(lines.size() >= 3);
    auto first = split(lines[1], '\t'), last = split(lines[lines.size() - 2], '\t');
    CHECK(std::stod(last[2]) < std::stod(first[2]));

    SUBCASE("sampling is deterministic per seed") {
        Rng a(9), b(9);
        LatentState sa = sample_latent(*ldm, a);
        LatentState sb = sample_latent(*ldm, b);
        CHECK(sa.z.max_abs_diff(sb.z) == 0.0);
    }
}

TEST_CASE("control branch init is an exact identity") {
    const TinyWorld& w = TinyWorld::get();
    ControlVaeModel fresh(w.vae);
    Rng rng(60);
    for (int rep = 0; rep < 5; ++rep) {
        LatentState z;
        z.z = testutil::random_tensor({4, 4, 4}, rng);
        Tensor cond = testutil::random_uniform_tensor({3, 32, 32}, rng);
        Tensor via_control = fresh.decode(z, cond);
        Tensor via_base = w.vae->decode(z);
        CHECK(via_control.max_abs_diff(via_base) <= 1e-6);
    }

    SUBCASE("fusion weights start exactly zero") {
        for (size_t i = 0; i < fresh.params().names().size(); ++i) {
            if (fresh.params().names()[i].rfind("fuse", 0) == 0) {
                const Tensor& t = fresh.params().vars()[i].value();
                CHECK(t.max() == 0.0);
                CHECK(t.min() == 0.0);
            }
        }
    }
    SUBCASE("perturbing one fusion weight changes the output") {
        ControlVaeModel probe(w.vae);
        for (size_t i = 0; i < probe.params().names().size(); ++i)
            if (probe.params().names()[i] == "fuse3.w") probe.params().vars()[i].value()[0] = 0.5;
        LatentState z;
        z.z = testutil::random_tensor({4, 4, 4}, rng);
        Tensor cond = testutil::random_uniform_tensor({3, 32, 32}, rng);
        CHECK(probe.decode(z, cond).max_abs_diff(w.vae->decode(z)) > 1e-6);
    }
}

TEST_CASE("full latent chain gradient matches central differences") {
    const TinyWorld& w = TinyWorld::get();
    Rng rng(61);
    Tensor z0 = testutil::random_tensor({1, 4, 4, 4}, rng);
    Tensor cond = testutil::random_uniform_tensor({1, 3, 32, 32}, rng);
    Tensor weights = testutil::random_tensor({1, 3, 32, 32}, rng);

    auto objective = [&](const Tensor& zv, bool with_grad, Tensor* grad) {
        ad::Var z = ad::Var::leaf(zv, with_grad);
        ad::Var denoised = ddim_denoise_ad(z, 2, *w.ldm);
        ad::Var img = w.cvae->decode_ad(ad::mul_scalar(denoised, w.ldm->latent_scale()),
                                        ad::Var::constant(cond));
        ad::Var loss = ad::sum_all(ad::mul_const(img, weights));
        if (with_grad) {
            ad::backward(loss);
            *grad = z.grad();
        }
        return loss.value()[0];
    };

    Tensor analytic;
    objective(z0, true, &analytic);
    Rng pick(62);
    const double h = 1e-3;
    for (int i = 0; i < 10; ++i) {
        size_t idx = pick.below(z0.numel());
        Tensor zp = z0;
        zp[idx] += h;
        double up = objective(zp, false, nullptr);
        zp[idx] -= 2 * h;
        double down = objective(zp, false, nullptr);
        double numeric = (up - down) / (2 * h);
        double denom = std::max(std::fabs(numeric), std::fabs(analytic[idx]));
        if (denom < 1e-10) continue;  // saturated pixel; both sides flat
        CHECK(std::fabs(numeric - analytic[idx]) / denom <= 1e-2);
    }
}

TEST_CASE("composite loss degenerates to mean absolute error at (1,0,0)") {
    const TinyWorld& w = TinyWorld::get();
    Rng rng(63);
    Tensor x = testutil::random_uniform_tensor({3, 32, 32}, rng);
    Tensor y = testutil::random_uniform_tensor({3, 32, 32}, rng);
    double mae = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) mae += std::fabs(x[i] - y[i]);
    mae /= static_cast<double>(x.numel());
    double loss = composite_loss_value(x, y, *w.prototype, *w.filter, {1.0, 0.0, 0.0}, nullptr);
    CHECK(loss == doctest::Approx(mae).epsilon(1e-12));
    CHECK_THROWS_AS(
        composite_loss_value(x, y, *w.prototype, *w.filter, {0.0, 0.0, 0.0}, nullptr),
        ConfigError);
}

TEST_CASE("control training rejects a mismatched prototype fingerprint") {
    const TinyWorld& w = TinyWorld::get();
    spectral::NoisePrototype bad = *w.prototype;
    bad.filter_fingerprint ^= 0xdeadbeefull;
    ControlVaeModel model(w.vae);
    gen::PerceptualMetric perceptual(w.det_small);
    gen::TrainControlVaeConfig cc;
    cc.epochs = 1;
    CHECK_THROWS_AS(train_control_vae(model, w.manifest, bad, *w.filter, {1, 1, 10}, perceptual,
                                      cc),
                    ConfigError);
}

TEST_CASE("control training leaves the frozen base untouched") {
    const TinyWorld& w = TinyWorld::get();
    uint64_t before = w.vae->weights_hash();
    ControlVaeModel model(w.vae);
    gen::PerceptualMetric perceptual(w.det_small);
    gen::TrainControlVaeConfig cc;
    cc.epochs = 1;
    cc.batch_size = 8;
    cc.seed = 71;
    train_control_vae(model, w.manifest, *w.prototype, *w.filter, {1, 0, 10}, perceptual, cc);
    CHECK(w.vae->weights_hash() == before);
    CHECK(model.trained());
}

TEST_CASE("perceptual distance is a symmetric premetric on features") {
    const TinyWorld& w = TinyWorld::get();
    gen::PerceptualMetric metric(w.det_small);
    Rng rng(72);
    Tensor x = testutil::random_uniform_tensor({3, 32, 32}, rng);
    Tensor y = testutil::random_uniform_tensor({3, 32, 32}, rng);
    CHECK(metric.distance(x, x) == 0.0);
    CHECK(metric.distance(x, y) == doctest::Approx(metric.distance(y, x)).epsilon(1e-12));
    CHECK(metric.distance(x, y) > 0.0);

    // heavier blur sits farther away than light blur
    auto blur_with = [&](const Tensor& img, int k) {
        spectral::DenoiserFilter f = spectral::DenoiserFilter::fixed_blur(k, k / 3.0);
        return f.apply(img);
    };
    auto recs = w.manifest.select(corpus::Split::train, corpus::Label::genuine);
    Tensor img = corpus::load_tensor_image(w.manifest.root / recs[0].path, 32);
    double light = metric.distance(img, blur_with(img, 3));
    double heavy = metric.distance(img, blur_with(img, 9));
    CHECK(heavy > light);
}

TEST_CASE("weight containers round-trip and reject wrong descriptors") {
    TempDir tmp("weights_io");
    const TinyWorld& w = TinyWorld::get();
    w.vae->save(tmp.path / "vae.bin");
    auto back = VaeCodec::load(tmp.path / "vae.bin");
    CHECK(back->trained());
    // float32 container: values match to f32 precision
    Rng rng(73);
    Tensor img = testutil::random_uniform_tensor({3, 32, 32}, rng);
    CHECK(back->encode(img).z.max_abs_diff(w.vae->encode(img).z) < 1e-5);

    w.ldm->save(tmp.path / "ldm.bin");
    auto ldm_back = LatentDiffusionModel::load(tmp.path / "ldm.bin");
    CHECK(ldm_back->latent_scale() == doctest::Approx(w.ldm->latent_scale()).epsilon(1e-6));

    CHECK_THROWS_AS(VaeCodec::load(tmp.path / "ldm.bin"), StateError);

    SUBCASE("control container is bound to its base VAE") {
        w.cvae->save(tmp.path / "cvae.bin");
        auto cv = ControlVaeModel::load(tmp.path / "cvae.bin", w.vae);
        CHECK(cv->trained());
        // a re-trained (different) base rejects the container
        corpus::SynthConfig sc;
        sc.image_size = 32;
        sc.genuine_count = 4;
        sc.seed = 99;
        corpus::CorpusManifest m2 = corpus::synthesize_toy_corpus(sc, tmp.path / "c2");
        gen::TrainVaeConfig vc;
        vc.epochs = 1;
        vc.batch_size = 4;
        vc.seed = 100;
        auto other_vae = train_vae(m2, vc, 32, 8, 4);
        CHECK_THROWS_AS(ControlVaeModel::load(tmp.path / "cvae.bin", other_vae), StateError);
    }
}
