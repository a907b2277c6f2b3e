#include "stealth/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "stealth/weights_io.hpp"

namespace stealth::detect {

std::string to_string(Arch a) {
    switch (a) {
        case Arch::convnet_small: return "convnet_small";
        case Arch::convnet_deep: return "convnet_deep";
        default: return "attention_lite";
    }
}

Arch arch_from_string(const std::string& s) {
    if (s == "convnet_small") return Arch::convnet_small;
    if (s == "convnet_deep") return Arch::convnet_deep;
    if (s == "attention_lite") return Arch::attention_lite;
    throw ConfigError("unknown detector architecture '" + s + "'");
}

SurrogateDetector::SurrogateDetector(Arch arch, int image_size, uint64_t init_seed)
    : arch_(arch), image_size_(image_size) {
    Rng rng(derive_seed(init_seed, "detector_init/" + to_string(arch)));
    auto conv = [&](const std::string& name, int ci, int co, int k, int s, int p) {
        convs_.push_back(nn::Conv2d(params_, name, ci, co, k, s, p, rng));
    };
    switch (arch) {
        case Arch::convnet_small:
            conv("c1", 3, 16, 3, 2, 1);
            conv("c2", 16, 32, 3, 2, 1);
            conv("c3", 32, 64, 3, 2, 1);
            head_ = nn::Linear(params_, "head", 64, 1, rng);
            break;
        case Arch::convnet_deep:
            conv("c1", 3, 12, 3, 1, 1);
            conv("c2", 12, 24, 3, 2, 1);
            conv("c3", 24, 24, 3, 1, 1);
            conv("c4", 24, 48, 3, 2, 1);
            conv("c5", 48, 48, 3, 1, 1);
            conv("c6", 48, 64, 3, 2, 1);
            head_ = nn::Linear(params_, "head", 64, 1, rng);
            break;
        case Arch::attention_lite:
            conv("c1", 3, 16, 3, 2, 1);
            conv("c2", 16, 32, 3, 2, 1);
            conv("c3", 32, 48, 3, 2, 1);
            attn_q_ = nn::Conv2d(params_, "attn_q", 48, 48, 1, 1, 0, rng);
            attn_k_ = nn::Conv2d(params_, "attn_k", 48, 48, 1, 1, 0, rng);
            attn_v_ = nn::Conv2d(params_, "attn_v", 48, 48, 1, 1, 0, rng);
            attn_proj_ = nn::Conv2d(params_, "attn_proj", 48, 48, 1, 1, 0, rng);
            mlp1_ = nn::Conv2d(params_, "mlp1", 48, 96, 1, 1, 0, rng);
            mlp2_ = nn::Conv2d(params_, "mlp2", 96, 48, 1, 1, 0, rng);
            head_ = nn::Linear(params_, "head", 48, 1, rng);
            break;
    }
    norm_mean_ = Tensor({3});
    norm_std_ = Tensor::full({3}, 1.0);
    params_.set_trainable(false);
}

void SurrogateDetector::set_normalization(Tensor mean_c, Tensor std_c) {
    if (mean_c.numel() != 3 || std_c.numel() != 3)
        throw ShapeError("normalization stats must have 3 channels");
    for (size_t i = 0; i < std_c.numel(); ++i)
        if (std_c[i] <= 0) throw ConfigError("normalization stddev must be positive");
    norm_mean_ = std::move(mean_c);
    norm_std_ = std::move(std_c);
}

ad::Var SurrogateDetector::normalize(const ad::Var& x) const {
    Tensor scale({3}), shift({3});
    for (int c = 0; c < 3; ++c) {
        scale[c] = 1.0 / norm_std_[c];
        shift[c] = -norm_mean_[c] / norm_std_[c];
    }
    return ad::channel_affine(x, scale, shift);
}

std::vector<ad::Var> SurrogateDetector::trunk_features_ad(const ad::Var& x) const {
    const Tensor& v = x.value();
    if (v.ndim() != 4 || v.dim(1) != 3 || v.dim(2) != image_size_ || v.dim(3) != image_size_)
        throw ShapeError("detector expects [N,3," + std::to_string(image_size_) + "," +
                         std::to_string(image_size_) + "], got " + v.shape_str());
    std::vector<ad::Var> feats;
    ad::Var h = normalize(x);
    for (const auto& c : convs_) {
        h = ad::relu(c(h));
        feats.push_back(h);
    }
    if (arch_ == Arch::attention_lite) {
        int N = h.value().dim(0), C = h.value().dim(1);
        int hw = h.value().dim(2) * h.value().dim(3);
        auto flat = [&](const ad::Var& t) { return ad::reshape(t, {N, C, hw}); };
        ad::Var q = flat(attn_q_(h)), k = flat(attn_k_(h)), v2 = flat(attn_v_(h));
        ad::Var scores = ad::mul_scalar(ad::bmm(q, k, true, false), 1.0 / std::sqrt(1.0 * C));
        ad::Var attn = ad::softmax_lastdim(scores);         // [N,hw,hw], rows = queries
        ad::Var mixed = ad::bmm(v2, attn, false, true);     // [N,C,hw]
        ad::Var back = ad::reshape(mixed, h.value().shape());
        h = ad::add(h, attn_proj_(back));
        h = ad::add(h, mlp2_(ad::relu(mlp1_(h))));
        feats.push_back(h);
    }
    return feats;
}

ad::Var SurrogateDetector::logits_ad(const ad::Var& x) const {
    std::vector<ad::Var> feats = trunk_features_ad(x);
    return head_(ad::gap(feats.back()));
}

std::vector<double> SurrogateDetector::classify(const std::vector<Tensor>& images) const {
    std::vector<double> probs;
    probs.reserve(images.size());
    const int chunk = 32;
    for (size_t b = 0; b < images.size(); b += chunk) {
        size_t e = std::min(images.size(), b + chunk);
        int N = static_cast<int>(e - b);
        Tensor batch({N, 3, image_size_, image_size_});
        for (size_t i = b; i < e; ++i) {
            if (images[i].ndim() != 3 || images[i].dim(0) != 3 ||
                images[i].dim(1) != image_size_ || images[i].dim(2) != image_size_)
                throw ShapeError("classify image shape mismatch: " + images[i].shape_str());
            std::copy(images[i].data(), images[i].data() + images[i].numel(),
                      batch.data() + (i - b) * images[i].numel());
        }
        ad::Var logits = logits_ad(ad::Var::constant(std::move(batch)));
        for (int i = 0; i < N; ++i) probs.push_back(1.0 / (1.0 + std::exp(-logits.value()[i])));
    }
    return probs;
}

double SurrogateDetector::classify_one(const Tensor& image_chw) const {
    return classify({image_chw})[0];
}

std::pair<double, Tensor> SurrogateDetector::loss_and_input_gradient(const Tensor& image_chw,
                                                                     int y_true) const {
    ad::Var x = ad::Var::leaf(image_chw.reshaped({1, 3, image_size_, image_size_}), true);
    ad::Var logits = logits_ad(x);
    Tensor label({1, 1});
    label[0] = static_cast<double>(y_true);
    ad::Var loss = bce_with_logits(logits, label);
    double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw NumericError("detector loss is not finite");
    ad::backward(loss);
    return {lv, x.grad().reshaped(image_chw.shape())};
}

std::string SurrogateDetector::descriptor() const {
    return "detector/" + to_string(arch_) + "/s" + std::to_string(image_size_) + "/v1";
}

void SurrogateDetector::save(const std::filesystem::path& path) const {
    auto tensors = params_.named_tensors();
    tensors.emplace_back("norm.mean", norm_mean_);
    tensors.emplace_back("norm.std", norm_std_);
    weights::save(path, descriptor(), tensors);
}

std::shared_ptr<SurrogateDetector> SurrogateDetector::load(const std::filesystem::path& path) {
    weights::WeightFile wf = weights::load(path);
    char arch_buf[64];
    int s = 0;
    if (std::sscanf(wf.descriptor.c_str(), "detector/%63[^/]/s%d/v1", arch_buf, &s) != 2)
        throw StateError("not a detector container: " + wf.descriptor);
    auto det = std::make_shared<SurrogateDetector>(arch_from_string(arch_buf), s, 0);
    det->params_.load_named(wf.tensors);
    det->set_normalization(wf.get("norm.mean"), wf.get("norm.std"));
    det->trained_ = true;
    return det;
}

ad::Var bce_with_logits(const ad::Var& logits, const Tensor& labels) {
    if (!logits.value().same_shape(labels)) throw ShapeError("bce labels shape mismatch");
    return ad::mean_all(ad::sub(ad::softplus(logits), ad::mul_const(logits, labels)));
}

// ----------------------------------------------------------------- training

std::shared_ptr<SurrogateDetector> train_detector(const corpus::CorpusManifest& manifest,
                                                  Arch arch, int image_size,
                                                  const TrainDetectorConfig& cfg) {
    auto train_recs = manifest.select(corpus::Split::train);
    bool has_gen = false, has_fake = false;
    for (const auto& r : train_recs) {
        has_gen |= r.label == corpus::Label::genuine;
        has_fake |= r.label == corpus::Label::generated;
    }
    if (!has_gen || !has_fake)
        throw ConfigError("detector training needs both classes in the train split");

    std::vector<Tensor> images = corpus::load_pixels(manifest, train_recs, image_size);
    std::vector<int> labels(train_recs.size());
    for (size_t i = 0; i < train_recs.size(); ++i)
        labels[i] = train_recs[i].label == corpus::Label::generated ? 1 : 0;

    auto val_recs = manifest.select(corpus::Split::val);
    std::vector<Tensor> val_images = corpus::load_pixels(manifest, val_recs, image_size);
    std::vector<int> val_labels(val_recs.size());
    for (size_t i = 0; i < val_recs.size(); ++i)
        val_labels[i] = val_recs[i].label == corpus::Label::generated ? 1 : 0;

    auto det = std::make_shared<SurrogateDetector>(arch, image_size, cfg.seed);

    // Per-channel statistics of the train split travel with the weights so
    // attacks can differentiate through the same normalization.
    Tensor mean({3}), stddev({3});
    size_t per_channel = images.empty() ? 1 : images[0].numel() / 3;
    for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (const auto& img : images) {
            const double* p = img.data() + static_cast<size_t>(c) * per_channel;
            for (size_t i = 0; i < per_channel; ++i) s += p[i];
        }
        mean[c] = s / (static_cast<double>(images.size()) * per_channel);
        double v = 0.0;
        for (const auto& img : images) {
            const double* p = img.data() + static_cast<size_t>(c) * per_channel;
            for (size_t i = 0; i < per_channel; ++i) {
                double d = p[i] - mean[c];
                v += d * d;
            }
        }
        stddev[c] = std::max(1e-6, std::sqrt(v / (static_cast<double>(images.size()) * per_channel)));
    }
    det->set_normalization(mean, stddev);

    det->params().set_trainable(true);
    nn::Adam opt(det->params().vars(), cfg.lr);
    Rng rng(derive_seed(cfg.seed, "detector_train/" + to_string(arch)));
    std::vector<size_t> idx(images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    auto val_accuracy = [&]() {
        if (val_images.empty()) return 0.0;
        std::vector<double> probs = det->classify(val_images);
        int correct = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            int pred = probs[i] > 0.5 ? 1 : 0;
            if (pred == val_labels[i]) ++correct;
        }
        return static_cast<double>(correct) / static_cast<double>(probs.size());
    };

    double best_val = -1.0;
    std::vector<Tensor> best_params;
    std::vector<std::string> curve;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(idx);
        double epoch_loss = 0.0;
        size_t batches = 0;
        for (size_t b = 0; b < idx.size(); b += cfg.batch_size) {
            size_t e = std::min(idx.size(), b + cfg.batch_size);
            int N = static_cast<int>(e - b);
            Tensor batch({N, 3, image_size, image_size});
            Tensor y({N, 1});
            for (int i = 0; i < N; ++i) {
                const Tensor& img = images[idx[b + i]];
                std::copy(img.data(), img.data() + img.numel(),
                          batch.data() + static_cast<size_t>(i) * img.numel());
                y.at2(i, 0) = labels[idx[b + i]];
            }
            ad::Var logits = det->logits_ad(ad::Var::constant(std::move(batch)));
            ad::Var loss = bce_with_logits(logits, y);
            double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw TrainingError("detector training diverged at epoch " +
                                    std::to_string(epoch));
            epoch_loss += lv;
            ++batches;
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
        }
        double va = val_accuracy();
        curve.push_back(std::to_string(epoch) + "\t" + fmt_fixed(epoch_loss / batches, 6) + "\t" +
                        fmt_fixed(va, 4));
        if (va > best_val) {
            best_val = va;
            best_params.clear();
            for (const auto& v : det->params().vars()) best_params.push_back(v.value());
        }
    }
    // Checkpoint selection: best validation accuracy wins.
    if (!best_params.empty())
        for (size_t i = 0; i < best_params.size(); ++i)
            det->params().vars()[i].value() = best_params[i];
    det->params().set_trainable(false);
    if (!cfg.curve_path.empty()) {
        std::ostringstream ss;
        ss << "epoch\tloss\tval_acc\n";
        for (const auto& r : curve) ss << r << "\n";
        write_text_file(cfg.curve_path, ss.str());
    }
    det->mark_trained();
    return det;
}

// --------------------------------------------------------------- evaluation

DetectorReport evaluate_on(const SurrogateDetector& detector, const std::vector<Tensor>& images,
                           const std::vector<int>& labels) {
    if (images.empty()) throw ConfigError("evaluate_detector needs a non-empty split");
    if (images.size() != labels.size()) throw ShapeError("labels do not match images");
    DetectorReport r;
    std::vector<double> probs = detector.classify(images);
    for (size_t i = 0; i < probs.size(); ++i) {
        // Ties at the threshold predict genuine.
        int pred = probs[i] > r.threshold ? 1 : 0;
        if (labels[i] == 1)
            pred == 1 ? ++r.true_positive : ++r.false_negative;
        else
            pred == 0 ? ++r.true_negative : ++r.false_positive;
    }
    int n_gen = r.true_negative + r.false_positive;
    int n_fake = r.true_positive + r.false_negative;
    r.accuracy = static_cast<double>(r.true_positive + r.true_negative) / r.total();
    r.accuracy_genuine = n_gen ? static_cast<double>(r.true_negative) / n_gen : 0.0;
    r.accuracy_generated = n_fake ? static_cast<double>(r.true_positive) / n_fake : 0.0;
    return r;
}

DetectorReport evaluate_detector(const SurrogateDetector& detector,
                                 const corpus::CorpusManifest& manifest, corpus::Split split) {
    auto recs = manifest.select(split);
    if (recs.empty()) throw ConfigError("evaluate_detector: empty split");
    std::vector<Tensor> images = corpus::load_pixels(manifest, recs, detector.image_size());
    std::vector<int> labels(recs.size());
    for (size_t i = 0; i < recs.size(); ++i)
        labels[i] = recs[i].label == corpus::Label::generated ? 1 : 0;
    return evaluate_on(detector, images, labels);
}

void save_report(const DetectorReport& r, const std::filesystem::path& path) {
    std::ostringstream ss;
    ss << "accuracy=" << fmt_fixed(r.accuracy, 6) << "\n"
       << "accuracy_genuine=" << fmt_fixed(r.accuracy_genuine, 6) << "\n"
       << "accuracy_generated=" << fmt_fixed(r.accuracy_generated, 6) << "\n"
       << "threshold=" << fmt_fixed(r.threshold, 6) << "\n"
       << "true_positive=" << r.true_positive << "\n"
       << "true_negative=" << r.true_negative << "\n"
       << "false_positive=" << r.false_positive << "\n"
       << "false_negative=" << r.false_negative << "\n";
    write_text_file(path, ss.str());
}

DetectorReport load_report(const std::filesystem::path& path) {
    DetectorReport r;
    std::map<std::string, std::string> kv;
    for (const auto& line : split(read_text_file(path), '\n')) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("bad report line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    r.accuracy = std::stod(kv.at("accuracy"));
    r.accuracy_genuine = std::stod(kv.at("accuracy_genuine"));
    r.accuracy_generated = std::stod(kv.at("accuracy_generated"));
    r.threshold = std::stod(kv.at("threshold"));
    r.true_positive = std::stoi(kv.at("true_positive"));
    r.true_negative = std::stoi(kv.at("true_negative"));
    r.false_positive = std::stoi(kv.at("false_positive"));
    r.false_negative = std::stoi(kv.at("false_negative"));
    return r;
}

}  // namespace stealth::detect
