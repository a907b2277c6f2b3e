#include "stealth/genmodels.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stealth/detectors.hpp"
#include "stealth/weights_io.hpp"

namespace stealth::gen {

// ---------------------------------------------------------------- schedule

DiffusionSchedule DiffusionSchedule::linear(int total_steps, int ddim_steps) {
    if (total_steps < 1 || ddim_steps < 1 || ddim_steps > total_steps)
        throw ConfigError("invalid schedule sizes");
    if (total_steps % ddim_steps != 0)
        throw ConfigError("ddim steps must divide the total step count");
    DiffusionSchedule s;
    s.total_steps = total_steps;
    s.alpha_bar.resize(total_steps + 1);
    for (int t = 0; t <= total_steps; ++t)
        s.alpha_bar[t] = static_cast<double>(total_steps + 1 - t) / (total_steps + 1);
    int stride = total_steps / ddim_steps;
    for (int j = 1; j <= ddim_steps; ++j) s.ddim_indices.push_back(j * stride);
    s.validate();
    return s;
}

double DiffusionSchedule::abar(int t) const {
    if (t < 0 || t > total_steps) throw ConfigError("schedule index out of range");
    return alpha_bar[t];
}

void DiffusionSchedule::validate() const {
    if (static_cast<int>(alpha_bar.size()) != total_steps + 1)
        throw ConfigError("schedule table size mismatch");
    if (alpha_bar[0] != 1.0) throw ConfigError("abar(0) must be 1");
    for (int t = 1; t <= total_steps; ++t) {
        if (!(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0 && alpha_bar[t] <= alpha_bar[t - 1]))
            throw ConfigError("alpha_bar must be non-increasing within (0,1]");
    }
    int prev = 0;
    for (int idx : ddim_indices) {
        if (idx <= prev || idx > total_steps)
            throw ConfigError("ddim indices must be strictly increasing in 1..N");
        prev = idx;
    }
}

// --------------------------------------------------------------------- VAE

VaeCodec::VaeCodec(int image_size, int base_channels, int latent_channels, uint64_t init_seed)
    : image_size_(image_size), base_channels_(base_channels), latent_channels_(latent_channels) {
    if (image_size < 16 || image_size % 8 != 0)
        throw ConfigError("VAE image size must be a multiple of 8, at least 16");
    Rng rng(derive_seed(init_seed, "vae_init"));
    int C = base_channels;
    enc1_ = nn::Conv2d(params_, "enc1", 3, C, 3, 2, 1, rng);
    enc2_ = nn::Conv2d(params_, "enc2", C, 2 * C, 3, 2, 1, rng);
    enc3_ = nn::Conv2d(params_, "enc3", 2 * C, 4 * C, 3, 2, 1, rng);
    enc4_ = nn::Conv2d(params_, "enc4", 4 * C, 4 * C, 3, 1, 1, rng);
    enc_mu_ = nn::Conv2d(params_, "enc_mu", 4 * C, latent_channels, 1, 1, 0, rng);
    enc_logvar_ = nn::Conv2d(params_, "enc_logvar", 4 * C, latent_channels, 1, 1, 0, rng);
    dec_in_ = nn::Conv2d(params_, "dec_in", latent_channels, 4 * C, 3, 1, 1, rng);
    up1_ = nn::Conv2d(params_, "up1", 4 * C, 2 * C * 4, 3, 1, 1, rng);
    up2_ = nn::Conv2d(params_, "up2", 2 * C, C * 4, 3, 1, 1, rng);
    up3_ = nn::Conv2d(params_, "up3", C, (C / 2) * 4, 3, 1, 1, rng);
    head_ = nn::Conv2d(params_, "head", C / 2, 3, 3, 1, 1, rng);
    params_.set_trainable(false);
}

std::array<int, 3> VaeCodec::tap_channels() const {
    return {base_channels_, 2 * base_channels_, 4 * base_channels_};
}

VaeCodec::EncodeOut VaeCodec::encode_ad(const ad::Var& x) const {
    ad::Var f1 = ad::silu(enc1_(x));
    ad::Var f2 = ad::silu(enc2_(f1));
    ad::Var f3 = ad::silu(enc3_(f2));
    ad::Var h = ad::silu(enc4_(f3));
    return {enc_mu_(h), enc_logvar_(h)};
}

std::array<ad::Var, 3> VaeCodec::encoder_taps_ad(const ad::Var& x) const {
    ad::Var f1 = ad::silu(enc1_(x));
    ad::Var f2 = ad::silu(enc2_(f1));
    ad::Var f3 = ad::silu(enc3_(f2));
    return {f1, f2, f3};
}

VaeCodec::DecodeOut VaeCodec::decode_ad(
    const ad::Var& z, const std::function<ad::Var(int, const ad::Var&)>* fuse) const {
    ad::Var g3 = ad::silu(dec_in_(z));
    if (fuse) g3 = (*fuse)(2, g3);
    ad::Var g2 = ad::silu(ad::pixel_shuffle2(up1_(g3)));
    if (fuse) g2 = (*fuse)(1, g2);
    ad::Var g1 = ad::silu(ad::pixel_shuffle2(up2_(g2)));
    if (fuse) g1 = (*fuse)(0, g1);
    ad::Var h = ad::silu(ad::pixel_shuffle2(up3_(g1)));
    ad::Var img = ad::clamp01(ad::sigmoid(head_(h)));
    return {img, {g1, g2, g3}};
}

LatentState VaeCodec::encode(const Tensor& image_chw) const {
    if (image_chw.ndim() != 3 || image_chw.dim(0) != 3 || image_chw.dim(1) != image_size_ ||
        image_chw.dim(2) != image_size_)
        throw ShapeError("encode expects [3," + std::to_string(image_size_) + "," +
                         std::to_string(image_size_) + "], got " + image_chw.shape_str());
    ad::Var x = ad::Var::constant(image_chw.reshaped({1, 3, image_size_, image_size_}));
    EncodeOut out = encode_ad(x);
    return {out.mu.value().reshaped({latent_channels_, latent_size(), latent_size()}), 0};
}

Tensor VaeCodec::decode(const LatentState& state) const {
    return decode_with_taps(state).first;
}

std::pair<Tensor, std::array<Tensor, 3>> VaeCodec::decode_with_taps(const LatentState& state) const {
    int ls = latent_size();
    if (state.z.ndim() != 3 || state.z.dim(0) != latent_channels_ || state.z.dim(1) != ls ||
        state.z.dim(2) != ls)
        throw ShapeError("decode latent shape mismatch: " + state.z.shape_str());
    ad::Var z = ad::Var::constant(state.z.reshaped({1, latent_channels_, ls, ls}));
    DecodeOut out = decode_ad(z);
    Tensor img = out.image.value().reshaped({3, image_size_, image_size_});
    std::array<Tensor, 3> taps;
    for (int i = 0; i < 3; ++i) {
        const Tensor& t = out.taps[i].value();
        taps[i] = t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
    }
    return {std::move(img), std::move(taps)};
}

std::string VaeCodec::descriptor() const {
    std::ostringstream ss;
    ss << "vae/s" << image_size_ << "/c" << base_channels_ << "/l" << latent_channels_ << "/v1";
    return ss.str();
}

void VaeCodec::save(const std::filesystem::path& path) const {
    weights::save(path, descriptor(), params_.named_tensors());
}

std::shared_ptr<VaeCodec> VaeCodec::load(const std::filesystem::path& path) {
    weights::WeightFile wf = weights::load(path);
    int s = 0, c = 0, l = 0;
    if (std::sscanf(wf.descriptor.c_str(), "vae/s%d/c%d/l%d/v1", &s, &c, &l) != 3)
        throw StateError("not a VAE container: " + wf.descriptor);
    auto vae = std::make_shared<VaeCodec>(s, c, l, 0);
    vae->params_.load_named(wf.tensors);
    vae->trained_ = true;
    return vae;
}

namespace {

Tensor stack_images(const std::vector<Tensor>& images, const std::vector<size_t>& idx,
                    size_t begin, size_t end) {
    int C = images[0].dim(0), H = images[0].dim(1), W = images[0].dim(2);
    Tensor batch({static_cast<int>(end - begin), C, H, W});
    for (size_t i = begin; i < end; ++i)
        std::copy(images[idx[i]].data(), images[idx[i]].data() + images[idx[i]].numel(),
                  batch.data() + (i - begin) * images[idx[i]].numel());
    return batch;
}

double batch_psnr(const Tensor& a, const Tensor& b) {
    double mse = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

void dump_curve(const std::filesystem::path& path, const std::string& header,
                const std::vector<std::string>& rows) {
    if (path.empty()) return;
    std::ostringstream ss;
    ss << header << "\n";
    for (const auto& r : rows) ss << r << "\n";
    write_text_file(path, ss.str());
}

}  // namespace

std::shared_ptr<VaeCodec> train_vae(const corpus::CorpusManifest& manifest,
                                    const TrainVaeConfig& cfg, int image_size, int base_channels,
                                    int latent_channels) {
    auto train_recs = manifest.select(corpus::Split::train, corpus::Label::genuine);
    if (train_recs.empty()) throw ConfigError("VAE training needs a non-empty train split");
    auto val_recs = manifest.select(corpus::Split::val, corpus::Label::genuine);

    std::vector<Tensor> images = corpus::load_pixels(manifest, train_recs, image_size);
    std::vector<Tensor> val_images = corpus::load_pixels(manifest, val_recs, image_size);

    auto vae = std::make_shared<VaeCodec>(image_size, base_channels, latent_channels, cfg.seed);
    vae->params().set_trainable(true);
    nn::Adam opt(vae->params().vars(), cfg.lr);
    Rng rng(derive_seed(cfg.seed, "vae_train"));

    std::vector<size_t> idx(images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::string> curve;
    int ls = image_size / 8;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        double epoch_loss = 0.0;
        size_t batches = 0;
        for (size_t b = 0; b < idx.size(); b += cfg.batch_size) {
            size_t e = std::min(idx.size(), b + cfg.batch_size);
            Tensor batch = stack_images(images, idx, b, e);
            int N = batch.dim(0);
            ad::Var x = ad::Var::constant(std::move(batch));
            VaeCodec::EncodeOut enc = vae->encode_ad(x);
            Tensor noise({N, latent_channels, ls, ls});
            rng.fill_gaussian(noise.data(), noise.numel());
            ad::Var z = ad::add(enc.mu, ad::mul(ad::exp(ad::mul_scalar(enc.logvar, 0.5)),
                                                ad::Var::constant(std::move(noise))));
            ad::Var recon = vae->decode_ad(z).image;
            ad::Var l1 = ad::mean_all(ad::absval(ad::sub(recon, x)));
            // KL(q || N(0,1)) per latent element.
            ad::Var kl = ad::mul_scalar(
                ad::mean_all(ad::sub(ad::add(ad::square(enc.mu), ad::exp(enc.logvar)),
                                     ad::add_scalar(enc.logvar, 1.0))),
                0.5);
            ad::Var loss = ad::add(l1, ad::mul_scalar(kl, cfg.kl_weight));
            double lv = loss.value()[0];
            if (!std::isfinite(lv)) {
                dump_curve(cfg.curve_path, "epoch\tloss\tval_psnr", curve);
                throw TrainingError("VAE training diverged at epoch " + std::to_string(epoch) +
                                    (cfg.curve_path.empty()
                                         ? ""
                                         : "; curve dumped to " + cfg.curve_path.string()));
            }
            epoch_loss += lv;
            ++batches;
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
        }
        double val_psnr = 0.0;
        if (!val_images.empty()) {
            for (const auto& img : val_images)
                val_psnr += batch_psnr(img, vae->decode(vae->encode(img)));
            val_psnr /= static_cast<double>(val_images.size());
        }
        curve.push_back(std::to_string(epoch) + "\t" + fmt_fixed(epoch_loss / batches, 6) + "\t" +
                        fmt_fixed(val_psnr, 4));
    }
    dump_curve(cfg.curve_path, "epoch\tloss\tval_psnr", curve);
    vae->params().set_trainable(false);
    vae->mark_trained();
    return vae;
}

// --------------------------------------------------------------- diffusion

namespace {

constexpr int kTimeEmbedDim = 32;

Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int total_steps) {
    int N = static_cast<int>(timesteps.size());
    Tensor e({N, kTimeEmbedDim});
    int half = kTimeEmbedDim / 2;
    for (int n = 0; n < N; ++n) {
        double t = static_cast<double>(timesteps[n]) / total_steps;
        for (int j = 0; j < half; ++j) {
            double freq = std::pow(10000.0, -static_cast<double>(j) / half);
            e.at2(n, j) = std::sin(t * 1000.0 * freq);
            e.at2(n, half + j) = std::cos(t * 1000.0 * freq);
        }
    }
    return e;
}

}  // namespace

LatentDiffusionModel::LatentDiffusionModel(int latent_channels, int latent_size,
                                           int hidden_channels, DiffusionSchedule schedule,
                                           uint64_t init_seed)
    : latent_channels_(latent_channels),
      latent_size_(latent_size),
      hidden_channels_(hidden_channels),
      schedule_(std::move(schedule)) {
    schedule_.validate();
    Rng rng(derive_seed(init_seed, "ldm_init"));
    int H = hidden_channels;
    conv1_ = nn::Conv2d(params_, "conv1", latent_channels, H, 3, 1, 1, rng);
    conv2_ = nn::Conv2d(params_, "conv2", H, H, 3, 1, 1, rng);
    conv3_ = nn::Conv2d(params_, "conv3", H, H, 3, 1, 1, rng);
    conv4_ = nn::Conv2d(params_, "conv4", H, latent_channels, 3, 1, 1, rng);
    t_mlp1_ = nn::Linear(params_, "t_mlp1", kTimeEmbedDim, H, rng);
    t_bias1_ = nn::Linear(params_, "t_bias1", H, H, rng);
    t_bias2_ = nn::Linear(params_, "t_bias2", H, H, rng);
    params_.set_trainable(false);
}

ad::Var LatentDiffusionModel::predict_noise_ad(const ad::Var& z,
                                               const std::vector<int>& timesteps) const {
    const Tensor& v = z.value();
    if (v.ndim() != 4 || v.dim(1) != latent_channels_)
        throw ShapeError("predict_noise expects [N," + std::to_string(latent_channels_) + ",h,w]");
    if (static_cast<size_t>(v.dim(0)) != timesteps.size())
        throw ShapeError("timestep count does not match batch");
    ad::Var emb = ad::Var::constant(sinusoidal_embedding(timesteps, schedule_.total_steps));
    ad::Var t_hidden = ad::silu(t_mlp1_(emb));
    ad::Var h = ad::silu(ad::add_sample_channel_bias(conv1_(z), t_bias1_(t_hidden)));
    h = ad::silu(ad::add_sample_channel_bias(conv2_(h), t_bias2_(t_hidden)));
    h = ad::silu(conv3_(h));
    return conv4_(h);
}

Tensor LatentDiffusionModel::predict_noise(const Tensor& z_chw, int t) const {
    ad::Var z = ad::Var::constant(
        z_chw.reshaped({1, latent_channels_, z_chw.dim(1), z_chw.dim(2)}));
    return predict_noise_ad(z, {t}).value().reshaped(z_chw.shape());
}

std::pair<Tensor, double> LatentDiffusionModel::reverse_moments(const Tensor& z_chw, int t) const {
    if (t < 1 || t > schedule_.total_steps) throw ConfigError("reverse step out of range");
    Tensor eps = predict_noise(z_chw, t);
    double abar_t = schedule_.abar(t), abar_prev = schedule_.abar(t - 1);
    double alpha_t = abar_t / abar_prev;
    double beta_t = 1.0 - alpha_t;
    Tensor mean(z_chw.shape());
    double coef = beta_t / std::sqrt(1.0 - abar_t);
    double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_t);
    for (size_t i = 0; i < mean.numel(); ++i)
        mean[i] = inv_sqrt_alpha * (z_chw[i] - coef * eps[i]);
    double var = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t;
    return {std::move(mean), std::sqrt(std::max(0.0, var))};
}

std::string LatentDiffusionModel::descriptor() const {
    std::ostringstream ss;
    ss << "ldm/s" << latent_size_ << "/c" << latent_channels_ << "/h" << hidden_channels_ << "/N"
       << schedule_.total_steps << "/K" << schedule_.ddim_steps() << "/v1";
    return ss.str();
}

void LatentDiffusionModel::save(const std::filesystem::path& path) const {
    auto tensors = params_.named_tensors();
    tensors.emplace_back("latent_scale", Tensor({1}, {latent_scale_}));
    weights::save(path, descriptor(), tensors);
}

std::shared_ptr<LatentDiffusionModel> LatentDiffusionModel::load(
    const std::filesystem::path& path) {
    weights::WeightFile wf = weights::load(path);
    int s = 0, c = 0, h = 0, n = 0, k = 0;
    if (std::sscanf(wf.descriptor.c_str(), "ldm/s%d/c%d/h%d/N%d/K%d/v1", &s, &c, &h, &n, &k) != 5)
        throw StateError("not a diffusion container: " + wf.descriptor);
    auto ldm = std::make_shared<LatentDiffusionModel>(c, s, h, DiffusionSchedule::linear(n, k), 0);
    ldm->params_.load_named(wf.tensors);
    ldm->latent_scale_ = wf.get("latent_scale")[0];
    ldm->trained_ = true;
    return ldm;
}

std::shared_ptr<LatentDiffusionModel> train_latent_diffusion(
    const corpus::CorpusManifest& manifest, const VaeCodec& vae, const TrainDiffusionConfig& cfg,
    int hidden_channels, const DiffusionSchedule& schedule) {
    if (!vae.trained()) throw StateError("diffusion training needs a trained VAE");
    auto train_recs = manifest.select(corpus::Split::train, corpus::Label::genuine);
    if (train_recs.empty()) throw ConfigError("diffusion training needs a train split");

    // Latents are precomputed posterior means, then normalized to unit scale
    // so the noise schedule sees a consistent signal level.
    std::vector<Tensor> latents;
    latents.reserve(train_recs.size());
    for (const auto& r : train_recs)
        latents.push_back(
            vae.encode(corpus::load_tensor_image(manifest.root / r.path, vae.image_size())).z);
    double sq = 0.0;
    size_t count = 0;
    for (const auto& z : latents) {
        for (size_t i = 0; i < z.numel(); ++i) sq += z[i] * z[i];
        count += z.numel();
    }
    double scale = std::sqrt(sq / static_cast<double>(count));
    if (scale < 1e-9) throw TrainingError("degenerate VAE latents (zero scale)");
    for (auto& z : latents)
        for (size_t i = 0; i < z.numel(); ++i) z[i] /= scale;

    auto ldm = std::make_shared<LatentDiffusionModel>(vae.latent_channels(), vae.latent_size(),
                                                      hidden_channels, schedule, cfg.seed);
    ldm->set_latent_scale(scale);
    ldm->params().set_trainable(true);
    nn::Adam opt(ldm->params().vars(), cfg.lr);
    Rng rng(derive_seed(cfg.seed, "ldm_train"));

    int lc = vae.latent_channels(), ls = vae.latent_size();
    std::vector<size_t> idx(latents.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::string> curve;

    // Fixed validation batch for the train-effect check.
    size_t val_n = std::min<size_t>(32, latents.size());
    std::vector<std::string> rows;
    auto eval_val = [&]() {
        Rng vr(derive_seed(cfg.seed, "ldm_val"));
        double total = 0.0;
        for (size_t i = 0; i < val_n; ++i) {
            const Tensor& z0 = latents[i];
            int t = ldm->schedule().ddim_indices[vr.below(ldm->schedule().ddim_indices.size())];
            Tensor eps(z0.shape());
            vr.fill_gaussian(eps.data(), eps.numel());
            double a = std::sqrt(ldm->schedule().abar(t)), b = std::sqrt(1.0 - ldm->schedule().abar(t));
            Tensor zt(z0.shape());
            for (size_t j = 0; j < zt.numel(); ++j) zt[j] = a * z0[j] + b * eps[j];
            Tensor pred = ldm->predict_noise(zt, t);
            double mse = 0.0;
            for (size_t j = 0; j < pred.numel(); ++j) {
                double d = pred[j] - eps[j];
                mse += d * d;
            }
            total += mse / static_cast<double>(pred.numel());
        }
        return total / static_cast<double>(val_n);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        double epoch_loss = 0.0;
        size_t batches = 0;
        for (size_t b = 0; b < idx.size(); b += cfg.batch_size) {
            size_t e = std::min(idx.size(), b + cfg.batch_size);
            int N = static_cast<int>(e - b);
            Tensor zb({N, lc, ls, ls});
            Tensor eps({N, lc, ls, ls});
            std::vector<int> ts(N);
            for (int i = 0; i < N; ++i) {
                const Tensor& z0 = latents[idx[b + i]];
                ts[i] = ldm->schedule().ddim_indices[rng.below(ldm->schedule().ddim_indices.size())];
                double a = std::sqrt(ldm->schedule().abar(ts[i]));
                double s2 = std::sqrt(1.0 - ldm->schedule().abar(ts[i]));
                double* zp = zb.data() + static_cast<size_t>(i) * z0.numel();
                double* ep = eps.data() + static_cast<size_t>(i) * z0.numel();
                for (size_t j = 0; j < z0.numel(); ++j) {
                    ep[j] = rng.gaussian();
                    zp[j] = a * z0[j] + s2 * ep[j];
                }
            }
            ad::Var pred = ldm->predict_noise_ad(ad::Var::constant(std::move(zb)), ts);
            ad::Var loss = ad::mean_all(ad::square(ad::sub(pred, ad::Var::constant(std::move(eps)))));
            double lv = loss.value()[0];
            if (!std::isfinite(lv)) {
                dump_curve(cfg.curve_path, "epoch\tloss\tval_mse", curve);
                throw TrainingError("diffusion training diverged at epoch " +
                                    std::to_string(epoch));
            }
            epoch_loss += lv;
            ++batches;
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
        }
        curve.push_back(std::to_string(epoch) + "\t" + fmt_fixed(epoch_loss / batches, 6) + "\t" +
                        fmt_fixed(eval_val(), 6));
    }
    dump_curve(cfg.curve_path, "epoch\tloss\tval_mse", curve);
    ldm->params().set_trainable(false);
    ldm->mark_trained();
    return ldm;
}

// ---------------------------------------------------------- diffuse / denoise

LatentState forward_diffuse(const LatentState& z0, int t, const DiffusionSchedule& schedule,
                            Rng& rng) {
    if (t < 1 || t > schedule.total_steps)
        throw ConfigError("forward_diffuse step " + std::to_string(t) + " out of 1.." +
                          std::to_string(schedule.total_steps));
    double a = std::sqrt(schedule.abar(t));
    double s = std::sqrt(1.0 - schedule.abar(t));
    LatentState out;
    out.t = t;
    out.z = Tensor(z0.z.shape());
    for (size_t i = 0; i < out.z.numel(); ++i) out.z[i] = a * z0.z[i] + s * rng.gaussian();
    return out;
}

ad::Var ddim_denoise_ad(const ad::Var& z, int steps, const LatentDiffusionModel& model) {
    const DiffusionSchedule& s = model.schedule();
    if (steps < 0 || steps > s.ddim_steps())
        throw ConfigError("ddim steps " + std::to_string(steps) + " out of 0.." +
                          std::to_string(s.ddim_steps()));
    ad::Var cur = z;
    int N = z.value().dim(0);
    for (int j = steps; j >= 1; --j) {
        int t_cur = s.ddim_indices[j - 1];
        int t_prev = j > 1 ? s.ddim_indices[j - 2] : 0;
        std::vector<int> ts(N, t_cur);
        ad::Var eps = model.predict_noise_ad(cur, ts);
        double ac = s.abar(t_cur), ap = s.abar(t_prev);
        // z0_hat = (z - sqrt(1-ac) eps) / sqrt(ac); deterministic hop to t_prev.
        ad::Var z0hat = ad::mul_scalar(
            ad::sub(cur, ad::mul_scalar(eps, std::sqrt(1.0 - ac))), 1.0 / std::sqrt(ac));
        cur = ad::add(ad::mul_scalar(z0hat, std::sqrt(ap)),
                      ad::mul_scalar(eps, std::sqrt(1.0 - ap)));
    }
    return cur;
}

LatentState ddim_denoise(const LatentState& z_t, int steps, const LatentDiffusionModel& model) {
    if (!model.trained()) throw StateError("ddim_denoise needs a trained model");
    const DiffusionSchedule& s = model.schedule();
    if (steps == 0) return z_t;
    if (steps < 0 || steps > s.ddim_steps()) throw ConfigError("ddim step count out of range");
    if (z_t.t != s.ddim_indices[steps - 1])
        throw ConfigError("latent at t=" + std::to_string(z_t.t) +
                          " is not on the sub-schedule index for " + std::to_string(steps) +
                          " steps (expected t=" + std::to_string(s.ddim_indices[steps - 1]) + ")");
    ad::Var z = ad::Var::constant(
        z_t.z.reshaped({1, z_t.z.dim(0), z_t.z.dim(1), z_t.z.dim(2)}));
    ad::Var out = ddim_denoise_ad(z, steps, model);
    return {out.value().reshaped(z_t.z.shape()), 0};
}

LatentState sample_latent(const LatentDiffusionModel& model, Rng& rng) {
    int lc = model.latent_channels(), ls = model.latent_size();
    LatentState state;
    state.t = model.schedule().ddim_indices.back();
    state.z = Tensor({lc, ls, ls});
    rng.fill_gaussian(state.z.data(), state.z.numel());
    return ddim_denoise(state, model.schedule().ddim_steps(), model);
}

// -------------------------------------------------------------- Control-VAE

ControlVaeModel::ControlVaeModel(std::shared_ptr<const VaeCodec> base) : base_(std::move(base)) {
    if (!base_->trained()) throw StateError("control branch needs a trained base VAE");
    int C = base_->base_channels();
    Rng rng(1);  // overwritten below; the control branch starts as the base encoder
    ctrl1_ = nn::Conv2d(params_, "ctrl1", 3, C, 3, 2, 1, rng);
    ctrl2_ = nn::Conv2d(params_, "ctrl2", C, 2 * C, 3, 2, 1, rng);
    ctrl3_ = nn::Conv2d(params_, "ctrl3", 2 * C, 4 * C, 3, 2, 1, rng);
    ctrl1_.w.value() = base_->enc1_.w.value();
    ctrl1_.b.value() = base_->enc1_.b.value();
    ctrl2_.w.value() = base_->enc2_.w.value();
    ctrl2_.b.value() = base_->enc2_.b.value();
    ctrl3_.w.value() = base_->enc3_.w.value();
    ctrl3_.b.value() = base_->enc3_.b.value();
    auto tc = base_->tap_channels();
    fuse1_ = nn::Conv2d(params_, "fuse1", tc[0], tc[0], 1, 1, 0, rng, /*zero_init=*/true);
    fuse2_ = nn::Conv2d(params_, "fuse2", tc[1], tc[1], 1, 1, 0, rng, /*zero_init=*/true);
    fuse3_ = nn::Conv2d(params_, "fuse3", tc[2], tc[2], 1, 1, 0, rng, /*zero_init=*/true);
    params_.set_trainable(false);
}

ad::Var ControlVaeModel::decode_ad(const ad::Var& z, const ad::Var& condition) const {
    ad::Var f1 = ad::silu(ctrl1_(condition));
    ad::Var f2 = ad::silu(ctrl2_(f1));
    ad::Var f3 = ad::silu(ctrl3_(f2));
    const nn::Conv2d* fuses[3] = {&fuse1_, &fuse2_, &fuse3_};
    const ad::Var* feats[3] = {&f1, &f2, &f3};
    std::function<ad::Var(int, const ad::Var&)> fuse = [&](int i, const ad::Var& g) {
        return ad::add(g, (*fuses[i])(*feats[i]));
    };
    return base_->decode_ad(z, &fuse).image;
}

Tensor ControlVaeModel::decode(const LatentState& state, const Tensor& condition_chw) const {
    int ls = base_->latent_size();
    if (state.z.ndim() != 3 || state.z.dim(0) != base_->latent_channels() ||
        state.z.dim(1) != ls || state.z.dim(2) != ls)
        throw ShapeError("control decode latent shape mismatch: " + state.z.shape_str());
    if (condition_chw.ndim() != 3 || condition_chw.dim(1) != base_->image_size())
        throw ShapeError("condition image shape mismatch: " + condition_chw.shape_str());
    ad::Var z = ad::Var::constant(
        state.z.reshaped({1, base_->latent_channels(), ls, ls}));
    ad::Var cond = ad::Var::constant(
        condition_chw.reshaped({1, 3, base_->image_size(), base_->image_size()}));
    return decode_ad(z, cond).value().reshaped(
        {3, base_->image_size(), base_->image_size()});
}

std::string ControlVaeModel::descriptor() const {
    return "controlvae/" + base_->descriptor();
}

void ControlVaeModel::save(const std::filesystem::path& path) const {
    auto tensors = params_.named_tensors();
    Tensor bh({8});
    uint64_t h = base_->weights_hash();
    for (int i = 0; i < 8; ++i) bh[i] = static_cast<double>((h >> (8 * i)) & 0xffu);
    tensors.emplace_back("base_hash", std::move(bh));
    weights::save(path, descriptor(), tensors);
}

std::shared_ptr<ControlVaeModel> ControlVaeModel::load(const std::filesystem::path& path,
                                                       std::shared_ptr<const VaeCodec> base) {
    auto model = std::make_shared<ControlVaeModel>(base);
    weights::WeightFile wf = weights::load_expect(path, model->descriptor());
    const Tensor& bh = wf.get("base_hash");
    uint64_t h = 0;
    for (int i = 0; i < 8; ++i) h |= static_cast<uint64_t>(bh[i]) << (8 * i);
    if (h != base->weights_hash())
        throw StateError("control branch was trained against a different base VAE");
    model->params_.load_named(wf.tensors);
    model->trained_ = true;
    return model;
}

// --------------------------------------------------------------- perceptual

double PerceptualMetric::distance(const Tensor& x_chw, const Tensor& y_chw) const {
    ad::Var x = ad::Var::constant(x_chw.reshaped({1, x_chw.dim(0), x_chw.dim(1), x_chw.dim(2)}));
    ad::Var y = ad::Var::constant(y_chw.reshaped({1, y_chw.dim(0), y_chw.dim(1), y_chw.dim(2)}));
    return distance_ad(x, y).value()[0];
}

ad::Var PerceptualMetric::distance_ad(const ad::Var& x, const ad::Var& y) const {
    if (!x.value().same_shape(y.value())) throw ShapeError("perceptual distance shape mismatch");
    auto fx = net_->trunk_features_ad(x);
    auto fy = net_->trunk_features_ad(y);
    ad::Var total;
    for (size_t i = 0; i < fx.size(); ++i) {
        ad::Var d = ad::mean_all(ad::square(ad::sub(fx[i], fy[i])));
        total = total.valid() ? ad::add(total, d) : d;
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(fx.size()));
}

// ------------------------------------------------------- Control-VAE training

double composite_loss_value(const Tensor& x, const Tensor& x_r,
                            const spectral::NoisePrototype& prototype,
                            const spectral::DenoiserFilter& filter,
                            const CompositeLossWeights& weights,
                            const PerceptualMetric* perceptual) {
    weights.validate();
    double l1 = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) l1 += std::fabs(x[i] - x_r[i]);
    l1 /= static_cast<double>(x.numel());
    double perc = 0.0;
    if (weights.beta > 0) {
        if (!perceptual) throw ConfigError("beta > 0 requires a perceptual metric");
        perc = perceptual->distance(x, x_r);
    }
    double npl = 0.0;
    if (weights.gamma > 0)
        npl = spectral::npl_loss(spectral::batch_spectra({x_r}, filter), prototype);
    return weights.alpha * l1 + weights.beta * perc + weights.gamma * npl;
}

ControlVaeTrainStats train_control_vae(ControlVaeModel& model,
                                       const corpus::CorpusManifest& manifest,
                                       const spectral::NoisePrototype& prototype,
                                       const spectral::DenoiserFilter& filter,
                                       const CompositeLossWeights& weights,
                                       const PerceptualMetric& perceptual,
                                       const TrainControlVaeConfig& cfg) {
    weights.validate();
    if (prototype.filter_fingerprint != filter.fingerprint())
        throw ConfigError("prototype fingerprint does not match the training filter");
    auto train_recs = manifest.select(corpus::Split::train, corpus::Label::genuine);
    if (train_recs.empty()) throw ConfigError("control branch training needs genuine images");
    auto val_recs = manifest.select(corpus::Split::val, corpus::Label::genuine);
    int S = model.base().image_size();

    std::vector<Tensor> images = corpus::load_pixels(manifest, train_recs, S);
    std::vector<Tensor> val_images = corpus::load_pixels(manifest, val_recs, S);
    size_t val_n = std::min<size_t>(16, val_images.size());

    uint64_t base_hash_before = model.base().weights_hash();

    // Latent means are fixed inputs during this stage; only the control
    // branch learns.
    std::vector<Tensor> latents;
    latents.reserve(images.size());
    for (const auto& img : images) latents.push_back(model.base().encode(img).z);
    std::vector<Tensor> val_latents;
    for (size_t i = 0; i < val_n; ++i) val_latents.push_back(model.base().encode(val_images[i]).z);

    auto val_npl = [&]() {
        if (val_n == 0) return 0.0;
        std::vector<Tensor> recon;
        for (size_t i = 0; i < val_n; ++i)
            recon.push_back(model.decode({val_latents[i], 0}, val_images[i]));
        return spectral::npl_loss(spectral::batch_spectra(recon, filter), prototype) /
               static_cast<double>(val_n);
    };

    ControlVaeTrainStats stats;
    stats.initial_val_npl = val_npl();

    model.params().set_trainable(true);
    nn::Adam opt(model.params().vars(), cfg.lr);
    Rng rng(derive_seed(cfg.seed, "cvae_train"));
    std::vector<size_t> idx(images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::string> curve;
    int lc = model.base().latent_channels(), ls = model.base().latent_size();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        double sum_l1 = 0.0, sum_perc = 0.0, sum_npl = 0.0;
        size_t batches = 0;
        for (size_t b = 0; b < idx.size(); b += cfg.batch_size) {
            size_t e = std::min(idx.size(), b + cfg.batch_size);
            int N = static_cast<int>(e - b);
            Tensor xb({N, 3, S, S});
            Tensor zb({N, lc, ls, ls});
            for (int i = 0; i < N; ++i) {
                const Tensor& img = images[idx[b + i]];
                const Tensor& z = latents[idx[b + i]];
                std::copy(img.data(), img.data() + img.numel(),
                          xb.data() + static_cast<size_t>(i) * img.numel());
                std::copy(z.data(), z.data() + z.numel(),
                          zb.data() + static_cast<size_t>(i) * z.numel());
            }
            ad::Var x = ad::Var::constant(std::move(xb));
            ad::Var z = ad::Var::constant(std::move(zb));
            ad::Var recon = model.decode_ad(z, x);
            ad::Var l1 = ad::mean_all(ad::absval(ad::sub(recon, x)));
            ad::Var loss = ad::mul_scalar(l1, weights.alpha);
            double perc_v = 0.0;
            if (weights.beta > 0) {
                ad::Var perc = perceptual.distance_ad(recon, x);
                perc_v = perc.value()[0];
                loss = ad::add(loss, ad::mul_scalar(perc, weights.beta));
            }
            double npl_v = 0.0;
            if (weights.gamma > 0) {
                // Per-image mean of the summed batch distances keeps gamma
                // meaningful across batch sizes.
                ad::Var npl = ad::mul_scalar(spectral::npl_loss_ad(recon, filter, prototype),
                                             1.0 / N);
                npl_v = npl.value()[0];
                loss = ad::add(loss, ad::mul_scalar(npl, weights.gamma));
            }
            if (!std::isfinite(loss.value()[0])) {
                dump_curve(cfg.curve_path, "epoch\tl1\tperceptual\tnpl\tval_npl", curve);
                throw TrainingError("control branch training diverged at epoch " +
                                    std::to_string(epoch));
            }
            sum_l1 += l1.value()[0];
            sum_perc += perc_v;
            sum_npl += npl_v;
            ++batches;
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
        }
        curve.push_back(std::to_string(epoch) + "\t" + fmt_fixed(sum_l1 / batches, 6) + "\t" +
                        fmt_fixed(sum_perc / batches, 6) + "\t" + fmt_fixed(sum_npl / batches, 6) +
                        "\t" + fmt_fixed(val_npl(), 6));
    }
    model.params().set_trainable(false);
    stats.final_val_npl = val_npl();
    dump_curve(cfg.curve_path, "epoch\tl1\tperceptual\tnpl\tval_npl", curve);
    if (model.base().weights_hash() != base_hash_before)
        throw TrainingError("frozen base VAE weights changed during control training");
    model.mark_trained();
    return stats;
}

}  // namespace stealth::gen
