#include <doctest.h>

#include <cmath>
#include <complex>

#include "stealth/corpus.hpp"
#include "stealth/spectral.hpp"
#include "test_util.hpp"

using namespace stealth;
using namespace stealth::spectral;
using testutil::TempDir;

namespace {

// Direct O((HW)^2) double-summation DFT, independent of the production path.
Tensor brute_force_amplitude(const Tensor& chw) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor amp({C, H, W});
    const double tau = 2.0 * M_PI;
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < H; ++k)
            for (int l = 0; l < W; ++l) {
                std::complex<double> acc(0.0, 0.0);
                for (int x = 0; x < H; ++x)
                    for (int y = 0; y < W; ++y) {
                        double phase = -tau * (static_cast<double>(k) * x / H +
                                               static_cast<double>(l) * y / W);
                        acc += chw.at3(c, x, y) *
                               std::complex<double>(std::cos(phase), std::sin(phase));
                    }
                amp.at3(c, k, l) = std::abs(acc) / (static_cast<double>(H) * W);
            }
    return amp;
}

Tensor circular_shift(const Tensor& chw, int dy, int dx) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor out(chw.shape());
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
                out.at3(c, (i + dy) % H, (j + dx) % W) = chw.at3(c, i, j);
    return out;
}

}  // namespace

TEST_CASE("constant-preserving filters leave constants untouched") {
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    Tensor c = Tensor::full({3, 8, 8}, 0.42);
    Tensor out = blur.apply(c);
    CHECK(out.max_abs_diff(c) < 1e-12);
    NoiseResidual r = noise_residual(c, blur);
    CHECK(std::fabs(r.values.max()) < 1e-12);
    CHECK(std::fabs(r.values.min()) < 1e-12);
}

TEST_CASE("hot-pixel residual equals image minus direct box blur") {
    // 4x4 single-hot-pixel image under a 3x3 box filter, replicate padded.
    Tensor img({1, 4, 4});
    img.at3(0, 1, 2) = 1.0;
    Tensor box = Tensor::full({3, 3}, 1.0 / 9.0);
    DenoiserFilter filter = DenoiserFilter::learned({box});

    // direct convolution oracle with replicate padding
    auto at = [&](int i, int j) {
        i = std::min(3, std::max(0, i));
        j = std::min(3, std::max(0, j));
        return img.at3(0, i, j);
    };
    NoiseResidual r = noise_residual(img, filter);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double blur = 0.0;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) blur += at(i + di, j + dj) / 9.0;
            CHECK(r.values.at3(0, i, j) == doctest::Approx(img.at3(0, i, j) - blur).epsilon(1e-12));
        }
}

TEST_CASE("residual is linear in the image for a linear filter") {
    Rng rng(21);
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    Tensor x = testutil::random_tensor({3, 8, 8}, rng);
    NoiseResidual r1 = noise_residual(x, blur);
    Tensor x3(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) x3[i] = 3.0 * x[i];
    NoiseResidual r3 = noise_residual(x3, blur);
    for (size_t i = 0; i < r1.values.numel(); ++i)
        CHECK(r3.values[i] == doctest::Approx(3.0 * r1.values[i]).epsilon(1e-9));
}

TEST_CASE("dft amplitude of a constant image is DC only") {
    Tensor c = Tensor::full({3, 6, 6}, 0.31);
    AmplitudeSpectrum s = dft_amplitude(c);
    for (int ch = 0; ch < 3; ++ch) {
        CHECK(s.amplitudes.at3(ch, 0, 0) == doctest::Approx(0.31).epsilon(1e-12));
        for (int k = 0; k < 6; ++k)
            for (int l = 0; l < 6; ++l)
                if (k || l) CHECK(std::fabs(s.amplitudes.at3(ch, k, l)) < 1e-12);
    }
}

TEST_CASE("2x2 one-hot image yields amplitude 0.25 in all bins") {
    Tensor img({1, 2, 2});
    img.at3(0, 0, 0) = 1.0;
    AmplitudeSpectrum s = dft_amplitude(img);
    for (int k = 0; k < 2; ++k)
        for (int l = 0; l < 2; ++l)
            CHECK(s.amplitudes.at3(0, k, l) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("dft amplitude matches the brute-force oracle on random inputs") {
    Rng rng(22);
    for (int rep = 0; rep < 12; ++rep) {
        int h = 2 + static_cast<int>(rng.below(7));
        int w = 2 + static_cast<int>(rng.below(7));
        Tensor x = testutil::random_tensor({2, h, w}, rng);
        AmplitudeSpectrum got = dft_amplitude(x);
        Tensor want = brute_force_amplitude(x);
        CHECK(got.amplitudes.max_abs_diff(want) < 1e-9);
    }
}

TEST_CASE("circular shifts leave the amplitude spectrum unchanged") {
    Rng rng(23);
    Tensor x = testutil::random_tensor({1, 8, 8}, rng);
    AmplitudeSpectrum a = dft_amplitude(x);
    AmplitudeSpectrum b = dft_amplitude(circular_shift(x, 3, 5));
    CHECK(a.amplitudes.max_abs_diff(b.amplitudes) < 1e-9);
}

TEST_CASE("Parseval: sum of squared amplitudes times HW equals sum of squares") {
    Rng rng(24);
    Tensor x = testutil::random_tensor({3, 8, 8}, rng);
    AmplitudeSpectrum s = dft_amplitude(x);
    for (int c = 0; c < 3; ++c) {
        double amp2 = 0.0, sq = 0.0;
        for (int k = 0; k < 8; ++k)
            for (int l = 0; l < 8; ++l) {
                amp2 += s.amplitudes.at3(c, k, l) * s.amplitudes.at3(c, k, l);
                sq += x.at3(c, k, l) * x.at3(c, k, l);
            }
        CHECK(amp2 * 64.0 == doctest::Approx(sq).epsilon(1e-9));
    }
}

TEST_CASE("dft rejects non-finite input") {
    Tensor x({1, 2, 2});
    x[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(dft_amplitude(x), NumericError);
}

TEST_CASE("noise prototype conventions") {
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    Rng rng(25);

    SUBCASE("empty residual list is rejected") {
        CHECK_THROWS_AS(noise_prototype({}, blur), ConfigError);
    }
    SUBCASE("single residual equals its own amplitude") {
        NoiseResidual r{testutil::random_tensor({1, 4, 4}, rng), "a"};
        NoisePrototype p = noise_prototype({r}, blur);
        CHECK(p.count == 1);
        CHECK(p.filter_fingerprint == blur.fingerprint());
        CHECK(p.spectrum.amplitudes.max_abs_diff(dft_amplitude(r.values).amplitudes) < 1e-12);
    }
    SUBCASE("two residuals: amplitude of the mean via brute force") {
        NoiseResidual a{testutil::random_tensor({1, 2, 2}, rng), "a"};
        NoiseResidual b{testutil::random_tensor({1, 2, 2}, rng), "b"};
        Tensor mean({1, 2, 2});
        for (size_t i = 0; i < mean.numel(); ++i) mean[i] = 0.5 * (a.values[i] + b.values[i]);
        NoisePrototype p = noise_prototype({a, b}, blur);
        CHECK(p.count == 2);
        CHECK(p.spectrum.amplitudes.max_abs_diff(brute_force_amplitude(mean)) < 1e-9);
    }
    SUBCASE("mixed shapes are rejected") {
        NoiseResidual a{Tensor({1, 2, 2}), "a"};
        NoiseResidual b{Tensor({1, 4, 4}), "b"};
        CHECK_THROWS_AS(noise_prototype({a, b}, blur), ShapeError);
    }
    SUBCASE("amplitude-of-mean differs from mean-of-amplitudes") {
        // Same corpus fed as a batch: per-image amplitudes average differently
        // than the amplitude of the averaged residual (phases cancel).
        Tensor x1({1, 4, 4}), x2({1, 4, 4});
        x1.at3(0, 0, 0) = 1.0;
        x2.at3(0, 2, 2) = 1.0;  // shifted copy: same amplitudes, different phase
        NoisePrototype p = noise_prototype({{x1, "1"}, {x2, "2"}}, blur);
        BatchSpectra bs;
        bs.spectra = {dft_amplitude(x1), dft_amplitude(x2)};
        Tensor mean_amp(bs.spectra[0].amplitudes.shape());
        for (size_t i = 0; i < mean_amp.numel(); ++i)
            mean_amp[i] = 0.5 * (bs.spectra[0].amplitudes[i] + bs.spectra[1].amplitudes[i]);
        CHECK(p.spectrum.amplitudes.max_abs_diff(mean_amp) > 1e-3);
    }
}

TEST_CASE("batch spectra and the prototype alignment loss") {
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    Rng rng(26);

    SUBCASE("one constant image gives an all-zero spectrum") {
        BatchSpectra bs = batch_spectra({Tensor::full({1, 8, 8}, 0.6)}, blur);
        REQUIRE(bs.spectra.size() == 1);
        CHECK(bs.spectra[0].amplitudes.max() < 1e-12);
    }
    SUBCASE("batch order is preserved") {
        Tensor a = testutil::random_uniform_tensor({1, 8, 8}, rng);
        Tensor b = testutil::random_uniform_tensor({1, 8, 8}, rng);
        BatchSpectra bs = batch_spectra({a, b}, blur);
        CHECK(bs.spectra[0].amplitudes.max_abs_diff(
                  dft_amplitude(noise_residual(a, blur).values).amplitudes) < 1e-12);
        CHECK(bs.spectra[1].amplitudes.max_abs_diff(
                  dft_amplitude(noise_residual(b, blur).values).amplitudes) < 1e-12);
    }
    SUBCASE("loss is zero iff every spectrum equals the prototype") {
        NoisePrototype p;
        p.spectrum.amplitudes = testutil::random_uniform_tensor({1, 4, 4}, rng, 0.0, 1.0);
        p.count = 1;
        BatchSpectra bs;
        bs.spectra = {p.spectrum, p.spectrum};
        CHECK(npl_loss(bs, p) == 0.0);
        bs.spectra[1].amplitudes[5] += 0.25;
        CHECK(npl_loss(bs, p) > 0.0);
    }
    SUBCASE("one-hot difference gives exactly its magnitude") {
        NoisePrototype p;
        p.spectrum.amplitudes = Tensor({1, 2, 2});
        BatchSpectra bs;
        AmplitudeSpectrum s;
        s.amplitudes = Tensor({1, 2, 2});
        s.amplitudes[3] = 1.0;
        bs.spectra = {s};
        CHECK(npl_loss(bs, p) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("matches brute-force summed Frobenius norms") {
        NoisePrototype p;
        p.spectrum.amplitudes = testutil::random_uniform_tensor({2, 4, 4}, rng);
        BatchSpectra bs;
        double want = 0.0;
        for (int i = 0; i < 3; ++i) {
            AmplitudeSpectrum s;
            s.amplitudes = testutil::random_uniform_tensor({2, 4, 4}, rng);
            double ss = 0.0;
            for (size_t j = 0; j < s.amplitudes.numel(); ++j) {
                double d = p.spectrum.amplitudes[j] - s.amplitudes[j];
                ss += d * d;
            }
            want += std::sqrt(ss);
            bs.spectra.push_back(std::move(s));
        }
        CHECK(npl_loss(bs, p) == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("shape mismatch is rejected") {
        NoisePrototype p;
        p.spectrum.amplitudes = Tensor({1, 4, 4});
        BatchSpectra bs;
        bs.spectra.push_back(AmplitudeSpectrum{Tensor({1, 2, 2})});
        CHECK_THROWS_AS(npl_loss(bs, p), ShapeError);
    }
}

TEST_CASE("autodiff spectrum path agrees with the plain path") {
    Rng rng(27);
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    Tensor img = testutil::random_uniform_tensor({3, 8, 8}, rng);
    ad::Var batch = ad::Var::constant(img.reshaped({1, 3, 8, 8}));
    ad::Var amp = residual_amplitude_ad(batch, blur);
    Tensor want = dft_amplitude(noise_residual(img, blur).values).amplitudes;
    CHECK(amp.value().reshaped(want.shape()).max_abs_diff(want) < 1e-9);

    NoisePrototype p = noise_prototype({noise_residual(img, blur)}, blur);
    Tensor other = testutil::random_uniform_tensor({3, 8, 8}, rng);
    ad::Var loss = npl_loss_ad(ad::Var::constant(other.reshaped({1, 3, 8, 8})), blur, p);
    double want_loss = npl_loss(batch_spectra({other}, blur), p);
    CHECK(loss.value()[0] == doctest::Approx(want_loss).epsilon(1e-9));
}

TEST_CASE("npl autodiff gradient matches finite differences") {
    Rng rng(28);
    DenoiserFilter blur = DenoiserFilter::fixed_blur(3, 0.8);
    Tensor img = testutil::random_uniform_tensor({1, 6, 6}, rng, 0.2, 0.8);
    NoisePrototype p =
        noise_prototype({noise_residual(testutil::random_uniform_tensor({1, 6, 6}, rng), blur)},
                        blur);
    testutil::gradcheck(
        [&](const std::vector<ad::Var>& v) {
            return npl_loss_ad(ad::reshape(v[0], {1, 1, 6, 6}), blur, p);
        },
        {img}, 42, 1e-5, 1e-5);
}

TEST_CASE("spectral_l2 is a symmetric distance with zero self-distance") {
    Rng rng(29);
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    std::vector<Tensor> a, b;
    for (int i = 0; i < 3; ++i) {
        a.push_back(testutil::random_uniform_tensor({1, 8, 8}, rng));
        b.push_back(testutil::random_uniform_tensor({1, 8, 8}, rng));
    }
    CHECK(spectral_l2(a, a, blur) == 0.0);
    CHECK(spectral_l2(a, b, blur) == doctest::Approx(spectral_l2(b, a, blur)).epsilon(1e-12));
    CHECK(spectral_l2(a, b, blur) > 0.0);
    CHECK_THROWS_AS(spectral_l2({}, b, blur), ConfigError);

    SUBCASE("two singleton corpora against a hand oracle") {
        std::vector<Tensor> xa = {a[0]}, xb = {b[0]};
        Tensor sa = dft_amplitude(noise_residual(a[0], blur).values).amplitudes;
        Tensor sb = dft_amplitude(noise_residual(b[0], blur).values).amplitudes;
        double ss = 0.0;
        for (size_t i = 0; i < sa.numel(); ++i) {
            double d = sa[i] - sb[i];
            ss += d * d;
        }
        double want = std::sqrt(ss / static_cast<double>(sa.numel()));
        CHECK(spectral_l2(xa, xb, blur) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("spectrum rendering writes center-shifted panels") {
    TempDir tmp("render");
    SUBCASE("all-zero spectrum renders black") {
        AmplitudeSpectrum s{Tensor({3, 16, 16})};
        render_spectrum(s, false, tmp.path / "zero.png");
        Tensor img = stealth::corpus::load_tensor_image(tmp.path / "zero.png", 16);
        CHECK(img.max() == 0.0);
    }
    SUBCASE("DC-only spectrum renders one bright center pixel") {
        AmplitudeSpectrum s{Tensor({3, 16, 16})};
        for (int c = 0; c < 3; ++c) s.amplitudes.at3(c, 0, 0) = 1.0;
        render_spectrum(s, false, tmp.path / "dc.png");
        Tensor img = stealth::corpus::load_tensor_image(tmp.path / "dc.png", 16);
        CHECK(img.at3(0, 8, 8) == 1.0);
        double sum = img.sum();
        CHECK(sum == doctest::Approx(3.0));  // exactly the one pixel, all channels
    }
}

TEST_CASE("prototype container round-trips and enforces the fingerprint") {
    TempDir tmp("proto_io");
    Rng rng(30);
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    NoisePrototype p =
        noise_prototype({noise_residual(testutil::random_uniform_tensor({3, 8, 8}, rng), blur)},
                        blur);
    save_prototype(p, tmp.path / "p.bin");
    NoisePrototype back = load_prototype(tmp.path / "p.bin", blur.fingerprint());
    CHECK(back.count == 1);
    CHECK(back.filter_fingerprint == p.filter_fingerprint);
    CHECK(back.spectrum.amplitudes.max_abs_diff(p.spectrum.amplitudes) < 1e-6);

    DenoiserFilter other = DenoiserFilter::fixed_blur(3, 0.5);
    CHECK_THROWS_AS(load_prototype(tmp.path / "p.bin", other.fingerprint()), ConfigError);
}

TEST_CASE("filter containers round-trip with a stable fingerprint") {
    TempDir tmp("filter_io");
    DenoiserFilter blur = DenoiserFilter::fixed_blur(5, 1.0);
    blur.save(tmp.path / "f.bin");
    DenoiserFilter back = DenoiserFilter::load(tmp.path / "f.bin");
    CHECK(back.fingerprint() == blur.fingerprint());
    CHECK(back.kind() == FilterKind::fixed_blur);
}

TEST_CASE("learned denoiser keeps the constant-preservation invariant") {
    Rng rng(31);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 4; ++i)
        imgs.push_back(testutil::random_uniform_tensor({3, 16, 16}, rng, 0.2, 0.8));
    DenoiserFilter f = train_learned_denoiser(imgs, 2, 1e-3, 0.05, 5);
    CHECK(f.kind() == FilterKind::learned_denoiser);
    Tensor c = Tensor::full({3, 16, 16}, 0.55);
    CHECK(f.apply(c).max_abs_diff(c) < 1e-6);
    // it actually denoises: residual energy of a noisy constant shrinks
    Tensor noisy = c;
    for (size_t i = 0; i < noisy.numel(); ++i) noisy[i] += 0.05 * rng.gaussian();
    Tensor den = f.apply(noisy);
    double before = 0.0, after = 0.0;
    for (size_t i = 0; i < noisy.numel(); ++i) {
        before += (noisy[i] - c[i]) * (noisy[i] - c[i]);
        after += (den[i] - c[i]) * (den[i] - c[i]);
    }
    CHECK(after < before);
}
