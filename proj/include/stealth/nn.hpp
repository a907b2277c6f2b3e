#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stealth/autograd.hpp"
#include "stealth/rng.hpp"

namespace stealth::nn {

// Named trainable leaves. Models register every parameter here so the
// optimizer, serialization, and freeze logic all see the same list.
class ParamSet {
   public:
    ad::Var add(const std::string& name, Tensor init) {
        ad::Var v = ad::Var::leaf(std::move(init), true);
        names_.push_back(name);
        vars_.push_back(v);
        return v;
    }
    void zero_grad() {
        for (auto& v : vars_) v.zero_grad();
    }
    void set_trainable(bool on) {
        for (auto& v : vars_) v.node()->requires_grad = on;
    }
    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& v : vars_) n += v.value().numel();
        return n;
    }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<ad::Var>& vars() const { return vars_; }
    std::vector<ad::Var>& vars() { return vars_; }

    std::vector<std::pair<std::string, Tensor>> named_tensors() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (size_t i = 0; i < vars_.size(); ++i) out.emplace_back(names_[i], vars_[i].value());
        return out;
    }
    // Fills values by name; every parameter must be present with its shape.
    void load_named(const std::vector<std::pair<std::string, Tensor>>& tensors);

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (size_t i = 0; i < vars_.size(); ++i) {
            h = fnv1a64(names_[i], h);
            h = fnv1a64(vars_[i].value().data(), vars_[i].value().numel() * sizeof(double), h);
        }
        return h;
    }

   private:
    std::vector<std::string> names_;
    std::vector<ad::Var> vars_;
};

Tensor he_normal(std::vector<int> shape, size_t fan_in, Rng& rng);
Tensor gaussian_tensor(std::vector<int> shape, double stddev, Rng& rng);

struct Conv2d {
    ad::Var w, b;
    int stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(ParamSet& ps, const std::string& name, int cin, int cout, int k, int stride, int pad,
           Rng& rng, bool zero_init = false);
    ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct Linear {
    ad::Var w, b;

    Linear() = default;
    Linear(ParamSet& ps, const std::string& name, int in, int out, Rng& rng);
    ad::Var operator()(const ad::Var& x) const { return ad::linear(x, w, b); }
};

class Adam {
   public:
    Adam(std::vector<ad::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            states_.push_back({Tensor(p.value().shape()), Tensor(p.value().shape())});
        }
    }
    void step();
    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }
    double lr() const { return lr_; }

   private:
    struct State {
        Tensor m, v;
    };
    std::vector<ad::Var> params_;
    std::vector<State> states_;
    double lr_, b1_, b2_, eps_;
    long long t_ = 0;
};

}  // namespace stealth::nn
