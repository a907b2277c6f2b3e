#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "stealth/common.hpp"

namespace stealth {

// Dense row-major double tensor. Small and value-semantic; every model in
// this project is tiny enough that copies are not a concern.
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), 0.0);
    }
    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_)) throw ShapeError("tensor data/shape mismatch");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    size_t numel() const { return data_.size(); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // NCHW accessors for the common 4-d case.
    double& at4(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at4(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double& at3(int c, int h, int w) {
        return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }
    double at3(int c, int h, int w) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }
    double& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    double at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != data_.size()) throw ShapeError("reshape element count mismatch");
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const;
    double min() const;
    double max() const;
    double sum() const;
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }
    double max_abs_diff(const Tensor& o) const;
    uint64_t content_hash() const;

    std::string shape_str() const;

    static size_t numel_of(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= static_cast<size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

   private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

}  // namespace stealth
