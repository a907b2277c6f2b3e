#include "stealth/spectral.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <mutex>

#include "stealth/corpus.hpp"
#include "stealth/nn.hpp"
#include "stealth/weights_io.hpp"

namespace stealth::spectral {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMatMap = Eigen::Map<const RMat>;

const DftBasis& DftBasis::get(int h, int w) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, DftBasis> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find({h, w});
    if (it != cache.end()) return it->second;
    DftBasis b;
    b.cos_h = Tensor({h, h});
    b.sin_h = Tensor({h, h});
    b.cos_w = Tensor({w, w});
    b.sin_w = Tensor({w, w});
    const double tau = 6.283185307179586476925286766559;
    for (int k = 0; k < h; ++k)
        for (int x = 0; x < h; ++x) {
            double a = tau * k * x / h;
            b.cos_h.at2(k, x) = std::cos(a);
            b.sin_h.at2(k, x) = std::sin(a);
        }
    for (int l = 0; l < w; ++l)
        for (int y = 0; y < w; ++y) {
            double a = tau * l * y / w;
            b.cos_w.at2(l, y) = std::cos(a);
            b.sin_w.at2(l, y) = std::sin(a);
        }
    return cache.emplace(std::make_pair(h, w), std::move(b)).first->second;
}

// ------------------------------------------------------------------- filter

DenoiserFilter::DenoiserFilter(FilterKind kind, std::vector<Tensor> kernels)
    : kind_(kind), kernels_(std::move(kernels)) {
    if (kernels_.empty()) throw ConfigError("denoiser filter needs at least one kernel");
    for (auto& k : kernels_) {
        if (k.ndim() != 2 || k.dim(0) != k.dim(1) || k.dim(0) % 2 == 0)
            throw ShapeError("filter kernels must be odd square");
        double s = k.sum();
        if (std::fabs(s) < 1e-9) throw ConfigError("filter kernel sums to zero");
        for (size_t i = 0; i < k.numel(); ++i) k[i] /= s;  // constant preservation
    }
}

DenoiserFilter DenoiserFilter::fixed_blur(int ksize, double sigma) {
    Tensor k({ksize, ksize});
    int r = ksize / 2;
    for (int i = 0; i < ksize; ++i)
        for (int j = 0; j < ksize; ++j) {
            double di = i - r, dj = j - r;
            k.at2(i, j) = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
        }
    return DenoiserFilter(FilterKind::fixed_blur, {std::move(k)});
}

DenoiserFilter DenoiserFilter::learned(std::vector<Tensor> kernels) {
    return DenoiserFilter(FilterKind::learned_denoiser, std::move(kernels));
}

uint64_t DenoiserFilter::fingerprint() const {
    // Hashed over float32-cast kernels so the fingerprint is stable across a
    // save/load round trip of the f32 weight container.
    uint64_t h = fnv1a64(kind_ == FilterKind::fixed_blur ? "fixed_blur" : "learned_denoiser");
    for (const auto& k : kernels_) {
        std::vector<float> f(k.numel());
        for (size_t i = 0; i < k.numel(); ++i) f[i] = static_cast<float>(k[i]);
        h = fnv1a64(f.data(), f.size() * sizeof(float), h);
    }
    return h;
}

ad::Var DenoiserFilter::apply_ad(const ad::Var& nchw) const {
    ad::Var x = nchw;
    for (const auto& k : kernels_) {
        int p = k.dim(0) / 2;
        ad::Var kv = ad::Var::constant(k);
        x = ad::depthwise_conv_valid(ad::pad_replicate(x, p), kv);
    }
    return x;
}

Tensor DenoiserFilter::apply(const Tensor& chw) const {
    if (chw.ndim() != 3) throw ShapeError("filter expects [C,H,W]");
    Tensor batched = chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)});
    ad::Var out = apply_ad(ad::Var::constant(std::move(batched)));
    return out.value().reshaped(chw.shape());
}

void DenoiserFilter::save(const std::filesystem::path& path) const {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (size_t i = 0; i < kernels_.size(); ++i)
        tensors.emplace_back("kernel." + std::to_string(i), kernels_[i]);
    weights::save(path, kind_ == FilterKind::fixed_blur ? "filter/fixed_blur/v1"
                                                        : "filter/learned_denoiser/v1",
                  tensors);
}

DenoiserFilter DenoiserFilter::load(const std::filesystem::path& path) {
    weights::WeightFile wf = weights::load(path);
    FilterKind kind;
    if (wf.descriptor == "filter/fixed_blur/v1")
        kind = FilterKind::fixed_blur;
    else if (wf.descriptor == "filter/learned_denoiser/v1")
        kind = FilterKind::learned_denoiser;
    else
        throw StateError("not a filter container: " + wf.descriptor);
    std::vector<Tensor> kernels;
    for (auto& [name, t] : wf.tensors) kernels.push_back(t);
    return DenoiserFilter(kind, std::move(kernels));
}

DenoiserFilter train_learned_denoiser(const std::vector<Tensor>& images, int epochs, double lr,
                                      double noise_sigma, uint64_t seed) {
    if (images.empty()) throw ConfigError("learned denoiser needs training images");
    Rng rng(derive_seed(seed, "denoiser"));
    nn::ParamSet ps;
    std::vector<ad::Var> kernels;
    for (int i = 0; i < 3; ++i) {
        // Start from a mild blur; training sharpens it into a Wiener-like
        // low-pass. Layers stay linear so the stack remains a normalized
        // kernel cascade.
        Tensor k({5, 5});
        for (size_t j = 0; j < k.numel(); ++j) k[j] = 1.0 / 25.0 + 0.01 * rng.gaussian();
        kernels.push_back(ps.add("kernel." + std::to_string(i), std::move(k)));
    }
    auto renormalize = [&]() {
        for (auto& kv : kernels) {
            double s = kv.value().sum();
            for (size_t j = 0; j < kv.value().numel(); ++j) kv.value()[j] /= s;
        }
    };
    renormalize();
    nn::Adam opt(ps.vars(), lr);
    int C = images[0].dim(0), H = images[0].dim(1), W = images[0].dim(2);
    for (int e = 0; e < epochs; ++e) {
        for (size_t i = 0; i < images.size(); ++i) {
            Tensor noisy = images[i];
            for (size_t j = 0; j < noisy.numel(); ++j) noisy[j] += noise_sigma * rng.gaussian();
            ad::Var x = ad::Var::constant(noisy.reshaped({1, C, H, W}));
            for (auto& kv : kernels) x = ad::depthwise_conv_valid(ad::pad_replicate(x, 2), kv);
            ad::Var target = ad::Var::constant(images[i].reshaped({1, C, H, W}));
            ad::Var loss = ad::mean_all(ad::square(ad::sub(x, target)));
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
            renormalize();
        }
    }
    std::vector<Tensor> out;
    for (auto& kv : kernels) out.push_back(kv.value());
    return DenoiserFilter::learned(std::move(out));
}

// ------------------------------------------------------------------ spectra

NoiseResidual noise_residual(const Tensor& image, const DenoiserFilter& filter,
                             const std::string& source_id) {
    Tensor denoised = filter.apply(image);
    Tensor res(image.shape());
    for (size_t i = 0; i < res.numel(); ++i) res[i] = image[i] - denoised[i];
    return {std::move(res), source_id};
}

AmplitudeSpectrum dft_amplitude(const Tensor& chw) {
    if (chw.ndim() != 3) throw ShapeError("dft_amplitude expects [C,H,W]");
    if (!chw.all_finite()) throw NumericError("dft_amplitude input has non-finite values");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    const DftBasis& b = DftBasis::get(H, W);
    CMatMap Ch(b.cos_h.data(), H, H), Sh(b.sin_h.data(), H, H);
    CMatMap Cw(b.cos_w.data(), W, W), Sw(b.sin_w.data(), W, W);
    Tensor amp({C, H, W});
    double norm = 1.0 / (static_cast<double>(H) * W);
    for (int c = 0; c < C; ++c) {
        CMatMap X(chw.data() + static_cast<size_t>(c) * H * W, H, W);
        RMat cxc = Ch * X * Cw.transpose();
        RMat sxs = Sh * X * Sw.transpose();
        RMat cxs = Ch * X * Sw.transpose();
        RMat sxc = Sh * X * Cw.transpose();
        for (int k = 0; k < H; ++k)
            for (int l = 0; l < W; ++l) {
                double re = cxc(k, l) - sxs(k, l);
                double im = -(cxs(k, l) + sxc(k, l));
                amp.at3(c, k, l) = norm * std::sqrt(re * re + im * im);
            }
    }
    return {std::move(amp)};
}

NoisePrototype noise_prototype(const std::vector<NoiseResidual>& residuals,
                               const DenoiserFilter& filter) {
    if (residuals.empty()) throw ConfigError("noise prototype needs at least one residual");
    const Tensor& first = residuals[0].values;
    Tensor mean(first.shape());
    for (const auto& r : residuals) {
        if (!r.values.same_shape(first)) throw ShapeError("mixed residual shapes in prototype");
        for (size_t i = 0; i < mean.numel(); ++i) mean[i] += r.values[i];
    }
    double inv = 1.0 / static_cast<double>(residuals.size());
    for (size_t i = 0; i < mean.numel(); ++i) mean[i] *= inv;
    NoisePrototype p;
    p.spectrum = dft_amplitude(mean);
    p.count = static_cast<int>(residuals.size());
    p.filter_fingerprint = filter.fingerprint();
    return p;
}

BatchSpectra batch_spectra(const std::vector<Tensor>& images, const DenoiserFilter& filter) {
    if (images.empty()) throw ConfigError("batch_spectra needs at least one image");
    BatchSpectra out;
    out.spectra.reserve(images.size());
    for (const auto& img : images)
        out.spectra.push_back(dft_amplitude(noise_residual(img, filter).values));
    return out;
}

double npl_loss(const BatchSpectra& batch, const NoisePrototype& prototype) {
    double total = 0.0;
    for (const auto& s : batch.spectra) {
        if (!s.amplitudes.same_shape(prototype.spectrum.amplitudes))
            throw ShapeError("batch spectrum shape does not match prototype");
        double ss = 0.0;
        for (size_t i = 0; i < s.amplitudes.numel(); ++i) {
            double d = prototype.spectrum.amplitudes[i] - s.amplitudes[i];
            ss += d * d;
        }
        total += std::sqrt(ss);
    }
    return total;
}

AmplitudeSpectrum mean_residual_spectrum(const std::vector<Tensor>& images,
                                         const DenoiserFilter& filter) {
    if (images.empty()) throw ConfigError("mean_residual_spectrum needs images");
    Tensor acc;
    for (const auto& img : images) {
        AmplitudeSpectrum s = dft_amplitude(noise_residual(img, filter).values);
        if (acc.numel() == 0)
            acc = std::move(s.amplitudes);
        else {
            if (!acc.same_shape(s.amplitudes)) throw ShapeError("mixed image shapes");
            for (size_t i = 0; i < acc.numel(); ++i) acc[i] += s.amplitudes[i];
        }
    }
    double inv = 1.0 / static_cast<double>(images.size());
    for (size_t i = 0; i < acc.numel(); ++i) acc[i] *= inv;
    return {std::move(acc)};
}

double spectral_l2(const std::vector<Tensor>& corpus_a, const std::vector<Tensor>& corpus_b,
                   const DenoiserFilter& filter) {
    if (corpus_a.empty() || corpus_b.empty())
        throw ConfigError("spectral_l2 needs non-empty corpora");
    AmplitudeSpectrum ma = mean_residual_spectrum(corpus_a, filter);
    AmplitudeSpectrum mb = mean_residual_spectrum(corpus_b, filter);
    if (!ma.amplitudes.same_shape(mb.amplitudes)) throw ShapeError("corpora shapes differ");
    double ss = 0.0;
    for (size_t i = 0; i < ma.amplitudes.numel(); ++i) {
        double d = ma.amplitudes[i] - mb.amplitudes[i];
        ss += d * d;
    }
    return std::sqrt(ss / static_cast<double>(ma.amplitudes.numel()));
}

// ------------------------------------------------------------- autodiff path

ad::Var residual_amplitude_ad(const ad::Var& images, const DenoiserFilter& filter) {
    const Tensor& v = images.value();
    if (v.ndim() != 4) throw ShapeError("residual_amplitude_ad expects [N,C,H,W]");
    int H = v.dim(2), W = v.dim(3);
    ad::Var residual = ad::sub(images, filter.apply_ad(images));
    const DftBasis& b = DftBasis::get(H, W);
    ad::Var cx = ad::mat_left_const(b.cos_h, residual);
    ad::Var sx = ad::mat_left_const(b.sin_h, residual);
    ad::Var re = ad::sub(ad::mat_right_constT(cx, b.cos_w), ad::mat_right_constT(sx, b.sin_w));
    ad::Var im = ad::add(ad::mat_right_constT(cx, b.sin_w), ad::mat_right_constT(sx, b.cos_w));
    ad::Var mag = ad::sqrt(ad::add(ad::square(re), ad::square(im)));
    return ad::mul_scalar(mag, 1.0 / (static_cast<double>(H) * W));
}

ad::Var npl_loss_ad(const ad::Var& images, const DenoiserFilter& filter,
                    const NoisePrototype& prototype) {
    const Tensor& v = images.value();
    int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
    const Tensor& proto = prototype.spectrum.amplitudes;
    if (proto.dim(0) != C || proto.dim(1) != H || proto.dim(2) != W)
        throw ShapeError("prototype shape does not match images");
    ad::Var amp = residual_amplitude_ad(images, filter);
    Tensor tiled({N, C, H, W});
    for (int n = 0; n < N; ++n)
        std::copy(proto.data(), proto.data() + proto.numel(),
                  tiled.data() + static_cast<size_t>(n) * proto.numel());
    ad::Var diff = ad::sub(amp, ad::Var::constant(std::move(tiled)));
    return ad::sum_all(ad::sqrt(ad::sum_except_dim0(ad::square(diff))));
}

// ---------------------------------------------------------------- rendering

void render_spectrum(const AmplitudeSpectrum& spectrum, bool log_scale,
                     const std::filesystem::path& path) {
    const Tensor& a = spectrum.amplitudes;
    int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    Tensor gray({1, H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += a.at3(c, i, j);
            gray.at3(0, i, j) = s / C;
        }
    if (log_scale)
        for (size_t i = 0; i < gray.numel(); ++i) gray[i] = std::log1p(gray[i] * 1e3);
    double mx = gray.max();
    if (mx > 0)
        for (size_t i = 0; i < gray.numel(); ++i) gray[i] /= mx;
    // Center shift so the DC bin lands mid-image.
    Tensor shifted({3, H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            double v = gray.at3(0, (i + (H + 1) / 2) % H, (j + (W + 1) / 2) % W);
            for (int c = 0; c < 3; ++c) shifted.at3(c, i, j) = v;
        }
    corpus::save_tensor_image(path, shifted);
}

// ------------------------------------------------------------- prototype IO

void save_prototype(const NoisePrototype& p, const std::filesystem::path& path) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.emplace_back("amplitudes", p.spectrum.amplitudes);
    // Fingerprint stored byte-wise: every value must survive the container's
    // float32 round trip exactly.
    Tensor meta({9});
    meta[0] = static_cast<double>(p.count);
    for (int i = 0; i < 8; ++i)
        meta[1 + i] = static_cast<double>((p.filter_fingerprint >> (8 * i)) & 0xffu);
    tensors.emplace_back("meta", std::move(meta));
    weights::save(path, "noise_prototype/mean_residual_dft/v1", tensors);
}

NoisePrototype load_prototype(const std::filesystem::path& path, uint64_t expected_fingerprint) {
    weights::WeightFile wf =
        weights::load_expect(path, "noise_prototype/mean_residual_dft/v1");
    NoisePrototype p;
    p.spectrum.amplitudes = wf.get("amplitudes");
    const Tensor& meta = wf.get("meta");
    p.count = static_cast<int>(meta[0]);
    p.filter_fingerprint = 0;
    for (int i = 0; i < 8; ++i)
        p.filter_fingerprint |= static_cast<uint64_t>(meta[1 + i]) << (8 * i);
    if (p.filter_fingerprint != expected_fingerprint)
        throw ConfigError("prototype was built with a different filter (fingerprint " +
                          hex64(p.filter_fingerprint) + " vs expected " +
                          hex64(expected_fingerprint) + ")");
    return p;
}

}  // namespace stealth::spectral
