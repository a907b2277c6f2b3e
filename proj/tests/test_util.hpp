#pragma once

#include <doctest.h>

#include <filesystem>
#include <functional>
#include <vector>

#include "stealth/autograd.hpp"
#include "stealth/rng.hpp"
#include "stealth/tensor.hpp"

namespace testutil {

using stealth::Rng;
using stealth::Tensor;
namespace ad = stealth::ad;

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian() * scale;
    return t;
}

inline Tensor random_uniform_tensor(std::vector<int> shape, Rng& rng, double lo = 0.0,
                                    double hi = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Compares reverse-mode input gradients against central differences of a
// randomly weighted scalarization of the op output.
inline void gradcheck(const std::function<ad::Var(const std::vector<ad::Var>&)>& build,
                      std::vector<Tensor> inputs, uint64_t seed = 99, double h = 1e-5,
                      double tol = 1e-6) {
    Rng rng(seed);
    std::vector<ad::Var> vars;
    for (auto& t : inputs) vars.push_back(ad::Var::leaf(t, true));
    ad::Var out = build(vars);
    Tensor weights(out.value().shape());
    for (size_t i = 0; i < weights.numel(); ++i) weights[i] = rng.gaussian();
    ad::Var loss = ad::sum_all(ad::mul_const(out, weights));
    ad::backward(loss);

    auto loss_at = [&](const std::vector<Tensor>& xs) {
        std::vector<ad::Var> vs;
        for (const auto& t : xs) vs.push_back(ad::Var::constant(t));
        ad::Var o = build(vs);
        double s = 0.0;
        for (size_t i = 0; i < o.value().numel(); ++i) s += o.value()[i] * weights[i];
        return s;
    };

    for (size_t vi = 0; vi < inputs.size(); ++vi) {
        const Tensor& analytic = vars[vi].grad();
        REQUIRE(analytic.same_shape(inputs[vi]));
        // probe a subset of coordinates on large tensors
        size_t n = inputs[vi].numel();
        size_t stride = std::max<size_t>(1, n / 24);
        for (size_t i = 0; i < n; i += stride) {
            std::vector<Tensor> xs = inputs;
            xs[vi][i] += h;
            double up = loss_at(xs);
            xs[vi][i] -= 2 * h;
            double down = loss_at(xs);
            double numeric = (up - down) / (2 * h);
            double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic[i])});
            CHECK(std::fabs(numeric - analytic[i]) / denom < tol);
        }
    }
}

// Unique temp directory per test, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("stealth_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace testutil
