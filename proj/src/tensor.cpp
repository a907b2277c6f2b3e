#include "stealth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace stealth {

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::min() const {
    double m = data_.empty() ? 0.0 : data_[0];
    for (double v : data_) m = std::min(m, v);
    return m;
}

double Tensor::max() const {
    double m = data_.empty() ? 0.0 : data_[0];
    for (double v : data_) m = std::max(m, v);
    return m;
}

double Tensor::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::max_abs_diff(const Tensor& o) const {
    if (!same_shape(o)) throw ShapeError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::fabs(data_[i] - o.data_[i]));
    return m;
}

uint64_t Tensor::content_hash() const {
    uint64_t h = fnv1a64(shape_.data(), shape_.size() * sizeof(int));
    return fnv1a64(data_.data(), data_.size() * sizeof(double), h);
}

std::string Tensor::shape_str() const {
    std::ostringstream ss;
    ss << "[";
    for (size_t i = 0; i < shape_.size(); ++i) ss << (i ? "x" : "") << shape_[i];
    ss << "]";
    return ss.str();
}

}  // namespace stealth
