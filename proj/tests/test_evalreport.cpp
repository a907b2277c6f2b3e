#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "stealth/evalreport.hpp"
#include "test_util.hpp"

using namespace stealth;
using namespace stealth::report;
using testutil::TempDir;
using testutil::TinyWorld;

TEST_CASE("psnr closed forms") {
    Tensor a = Tensor::full({3, 4, 4}, 0.0);
    Tensor b = Tensor::full({3, 4, 4}, 0.5);
    CHECK(psnr(a, a) == 100.0);
    CHECK(psnr(a, b) == doctest::Approx(6.0206).epsilon(1e-4));
    CHECK(psnr(a, b) == psnr(b, a));
    CHECK_THROWS_AS(psnr(a, Tensor({3, 2, 2})), ShapeError);
}

TEST_CASE("ssim identities and the constant-block oracle") {
    Rng rng(51);
    Tensor x = testutil::random_uniform_tensor({3, 16, 16}, rng);
    CHECK(ssim(x, x) == 1.0);
    Tensor y = testutil::random_uniform_tensor({3, 16, 16}, rng);
    CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));

    // constant 11x11 blocks: all variances vanish, the formula collapses to
    // (2*mx*my + C1) / (mx^2 + my^2 + C1)
    auto block_oracle = [](double cx, double cy) {
        const double c1 = 1e-4;
        return (2 * cx * cy + c1) / (cx * cx + cy * cy + c1);
    };
    for (double c : {0.0, 0.25, 0.5}) {
        Tensor bx = Tensor::full({1, 11, 11}, c);
        Tensor by = Tensor::full({1, 11, 11}, 1.0 - c);
        CHECK(ssim(bx, by) == doctest::Approx(block_oracle(c, 1.0 - c)).epsilon(1e-9));
    }
    CHECK_THROWS_AS(ssim(Tensor({1, 8, 8}), Tensor({1, 8, 8})), ShapeError);
}

namespace {

attack::AttackRunResult make_result(const std::vector<double>& pre,
                                    const std::vector<bool>& success) {
    attack::AttackRunResult r;
    r.attack = "pgd";
    r.surrogate = "convnet_small";
    for (size_t i = 0; i < pre.size(); ++i) {
        attack::ImageAttackOutcome img;
        img.id = "i" + std::to_string(i);
        img.pre_prob["det"] = pre[i];
        img.post_prob["det"] = success[i] ? 0.1 : 0.9;
        img.success["det"] = success[i];
        r.images.push_back(std::move(img));
    }
    return r;
}

}  // namespace

TEST_CASE("attack success rate arithmetic and permutation invariance") {
    // 4 correctly-detected images, 3 evade
    auto r = make_result({0.9, 0.8, 0.7, 0.6}, {true, true, true, false});
    CHECK(attack_success_rate(r, "det") == doctest::Approx(75.0));

    // all evade
    auto all = make_result({0.9, 0.9}, {true, true});
    CHECK(attack_success_rate(all, "det") == doctest::Approx(100.0));

    // originally misclassified images never enter the denominator
    auto mixed = make_result({0.9, 0.2, 0.8}, {false, true, true});
    CHECK(attack_success_rate(mixed, "det") == doctest::Approx(50.0));

    std::swap(r.images[0], r.images[3]);
    CHECK(attack_success_rate(r, "det") == doctest::Approx(75.0));

    attack::AttackRunResult empty;
    CHECK_THROWS_AS(attack_success_rate(empty, "det"), ConfigError);
    CHECK_THROWS_AS(attack_success_rate(r, "missing_target"), ConfigError);
}

TEST_CASE("metrics csv has the documented schema and fixed formatting") {
    std::vector<MetricRow> rows = {{"pgd", "convnet_small", "convnet_deep", 51.0, 33.817, 0.86,
                                    0.0253}};
    std::string csv = metrics_csv(rows);
    CHECK(csv == "attack,source,target,asr,psnr,ssim,spectral_l2\n"
                 "pgd,convnet_small,convnet_deep,51.0000,33.8170,0.8600,0.0253\n");
}

TEST_CASE("build_report produces grids, panels, and is idempotent") {
    const TinyWorld& w = TinyWorld::get();
    TempDir tmp("report");

    attack::AttackContext ctx;
    ctx.manifest = &w.manifest;
    ctx.split = corpus::Split::test;
    ctx.count = 2;
    ctx.image_size = 32;
    ctx.detectors["convnet_small"] = w.det_small;
    ctx.detectors["convnet_deep"] = w.det_deep;
    ctx.vae = w.vae;
    ctx.ldm = w.ldm;
    ctx.cvae = w.cvae;
    ctx.seed = 3;
    ctx.run_dir = tmp.path;
    ctx.pgd_defaults = {8.0 / 255.0, 2.0 / 255.0, 3};
    auto results = attack::run_attack_suite(
        ctx, {{"none", "convnet_small", {}}, {"pgd", "convnet_small", {}}});

    ReportContext rctx;
    rctx.run_dir = tmp.path;
    rctx.manifest = &w.manifest;
    rctx.detector_ids = {"convnet_small", "convnet_deep"};
    rctx.filter = w.filter.get();
    rctx.image_size = 32;
    rctx.reference_count = 4;

    SUBCASE("empty suite writes a header-only csv") {
        ReportOutput out = build_report(rctx, {});
        CHECK(read_text_file(out.csv_path) == "attack,source,target,asr,psnr,ssim,spectral_l2\n");
    }
    SUBCASE("one attack by one surrogate yields one row per target") {
        ReportOutput out = build_report(rctx, {results[1]});
        REQUIRE(out.rows.size() == 2);  // two targets
        CHECK(out.rows[0].attack == "pgd");
        CHECK(out.rows[0].target == "convnet_deep");
        CHECK(out.rows[1].target == "convnet_small");
        CHECK(out.rows[0].spectral_l2 > 0.0);
        CHECK(std::filesystem::exists(tmp.path / "reports" / "spectra" / "genuine.png"));
        CHECK(std::filesystem::exists(tmp.path / "reports" / "spectra" /
                                      "pgd_convnet_small.png"));
    }
    SUBCASE("rerunning over the same artifacts is byte-identical") {
        build_report(rctx, results);
        std::string first = read_text_file(tmp.path / "reports" / "metrics.csv");
        build_report(rctx, results);
        CHECK(read_text_file(tmp.path / "reports" / "metrics.csv") == first);
    }
    SUBCASE("missing artifacts are reported as gaps, not failures") {
        attack::AttackRunResult ghost;
        ghost.attack = "fgsm";
        ghost.surrogate = "convnet_small";
        attack::ImageAttackOutcome img;
        img.id = "nope";
        img.pre_prob["convnet_small"] = 0.9;
        img.post_prob["convnet_small"] = 0.9;
        img.success["convnet_small"] = false;
        img.pre_prob["convnet_deep"] = 0.9;
        img.post_prob["convnet_deep"] = 0.9;
        img.success["convnet_deep"] = false;
        ghost.images.push_back(img);
        ReportOutput out = build_report(rctx, {ghost});
        CHECK(!out.gaps.empty());
        CHECK(out.rows.size() == 2);
    }
}
