#pragma once

#include "stealth/tensor.hpp"

namespace stealth::report {

// 10*log10(1/MSE) over [0,1] images; identical images return the 100 dB cap
// so CSV cells stay finite.
double psnr(const Tensor& x, const Tensor& y);

// Single-scale SSIM: 11x11 Gaussian window, sigma 1.5, C1=(0.01)^2,
// C2=(0.03)^2 on [0,1] range, valid region, channel-averaged.
double ssim(const Tensor& x, const Tensor& y);

}  // namespace stealth::report
