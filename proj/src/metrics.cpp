#include "stealth/metrics.hpp"

#include <cmath>
#include <vector>

#include "stealth/common.hpp"

namespace stealth::report {

double psnr(const Tensor& x, const Tensor& y) {
    if (!x.same_shape(y)) throw ShapeError("psnr shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) {
        double d = x[i] - y[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.numel());
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_window() {
    static std::vector<double> w = [] {
        std::vector<double> out(kWindow * kWindow);
        int r = kWindow / 2;
        double sum = 0.0;
        for (int i = 0; i < kWindow; ++i)
            for (int j = 0; j < kWindow; ++j) {
                double di = i - r, dj = j - r;
                out[i * kWindow + j] = std::exp(-(di * di + dj * dj) / (2 * kSigma * kSigma));
                sum += out[i * kWindow + j];
            }
        for (double& v : out) v /= sum;
        return out;
    }();
    return w;
}

}  // namespace

double ssim(const Tensor& x, const Tensor& y) {
    if (!x.same_shape(y)) throw ShapeError("ssim shape mismatch");
    if (x.ndim() != 3) throw ShapeError("ssim expects [C,H,W]");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (H < kWindow || W < kWindow)
        throw ShapeError("ssim needs images at least 11x11");
    const std::vector<double>& win = gaussian_window();
    int Ho = H - kWindow + 1, Wo = W - kWindow + 1;
    double total = 0.0;
    for (int c = 0; c < C; ++c) {
        const double* xp = x.data() + static_cast<size_t>(c) * H * W;
        const double* yp = y.data() + static_cast<size_t>(c) * H * W;
        double acc = 0.0;
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (int wi = 0; wi < kWindow; ++wi)
                    for (int wj = 0; wj < kWindow; ++wj) {
                        double wv = win[wi * kWindow + wj];
                        double xv = xp[(i + wi) * W + (j + wj)];
                        double yv = yp[(i + wi) * W + (j + wj)];
                        mx += wv * xv;
                        my += wv * yv;
                        xx += wv * xv * xv;
                        yy += wv * yv * yv;
                        xy += wv * xv * yv;
                    }
                double vx = xx - mx * mx;
                double vy = yy - my * my;
                double cov = xy - mx * my;
                double num = (2 * mx * my + kC1) * (2 * cov + kC2);
                double den = (mx * mx + my * my + kC1) * (vx + vy + kC2);
                acc += num / den;
            }
        total += acc / (static_cast<double>(Ho) * Wo);
    }
    return total / C;
}

}  // namespace stealth::report
