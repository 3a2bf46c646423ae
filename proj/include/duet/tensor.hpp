#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "duet/errors.hpp"

namespace duet {

/// Dense row-major double tensor. Data-carrying constructors reject NaN/Inf.
class Tensor {
public:
    Tensor() = default;

    /// Zero-initialized tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != count(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape volume " + std::to_string(count(shape_)));
        check_finite();
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor row(std::vector<double> v) {
        std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i) { return data_[i]; }
    double at(std::size_t i) const { return data_[i]; }
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return rank() < 2 ? 1 : shape_[1]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Copy with a new shape over the same row-major data.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (count(shape) != data_.size())
            throw ShapeError("reshape volume mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    /// Copy of row i of a rank-2 tensor as a rank-1 tensor.
    Tensor row_copy(std::size_t i) const {
        std::size_t c = shape_[1];
        std::vector<double> v(data_.begin() + static_cast<std::ptrdiff_t>(i * c),
                              data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
        Tensor t;
        t.shape_ = {c};
        t.data_ = std::move(v);
        return t;
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator-=(const Tensor& o) {
        require_same_shape(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    /// this += s * o
    Tensor& axpy(double s, const Tensor& o) {
        require_same_shape(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
        return *this;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void check_finite() const {
        if (!all_finite()) throw NonFiniteError("tensor contains NaN or Inf");
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    void require_same_shape(const Tensor& o) const {
        if (shape_ != o.shape_) throw ShapeError("tensor shape mismatch");
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Named parameter (or gradient) collection. Ordered map so every iteration is deterministic.
using ParamMap = std::map<std::string, Tensor>;

/// Scalar value plus gradients keyed by parameter name.
struct GradPair {
    double value = 0.0;
    ParamMap grads;
};

inline std::string shape_string(const Tensor& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape()[i]);
    }
    return s + "]";
}

}  // namespace duet
