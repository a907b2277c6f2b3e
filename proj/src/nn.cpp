#include "stealth/nn.hpp"

#include <cmath>
#include <map>

namespace stealth::nn {

void ParamSet::load_named(const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : tensors) by_name[name] = &t;
    for (size_t i = 0; i < names_.size(); ++i) {
        auto it = by_name.find(names_[i]);
        if (it == by_name.end()) throw FormatError("weight file missing tensor " + names_[i]);
        if (!it->second->same_shape(vars_[i].value()))
            throw ShapeError("weight tensor " + names_[i] + " has shape " +
                             it->second->shape_str() + ", expected " +
                             vars_[i].value().shape_str());
        vars_[i].value() = *it->second;
        by_name.erase(it);
    }
    // Extra tensors are allowed (metadata like normalization stats).
}

Tensor he_normal(std::vector<int> shape, size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian() * stddev;
    return t;
}

Tensor gaussian_tensor(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian() * stddev;
    return t;
}

Conv2d::Conv2d(ParamSet& ps, const std::string& name, int cin, int cout, int k, int stride,
               int pad, Rng& rng, bool zero_init)
    : stride(stride), pad(pad) {
    Tensor wt = zero_init ? Tensor({cout, cin, k, k})
                          : he_normal({cout, cin, k, k}, static_cast<size_t>(cin) * k * k, rng);
    w = ps.add(name + ".w", std::move(wt));
    b = ps.add(name + ".b", Tensor({cout}));
}

Linear::Linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng) {
    w = ps.add(name + ".w", he_normal({out, in}, static_cast<size_t>(in), rng));
    b = ps.add(name + ".b", Tensor({out}));
}

void Adam::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto node = params_[i].node();
        if (!node->grad.same_shape(node->value)) continue;  // never touched this step
        Tensor& m = states_[i].m;
        Tensor& v = states_[i].v;
        for (size_t j = 0; j < node->value.numel(); ++j) {
            double g = node->grad[j];
            m[j] = b1_ * m[j] + (1.0 - b1_) * g;
            v[j] = b2_ * v[j] + (1.0 - b2_) * g * g;
            node->value[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
        }
    }
}

}  // namespace stealth::nn
