#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "duet/errors.hpp"
#include "duet/tensor.hpp"

namespace duet {

inline constexpr double kZeroVectorEps = 1e-12;

/// Neumaier compensated accumulator. Fixed left-to-right order plus error
/// compensation keeps short weighted sums correctly rounded.
class CompensatedSum {
public:
    void add(double x) {
        double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

/// Left-to-right dot product.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    return dot(a.data(), b.data(), a.size());
}

inline double norm2(const double* v, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i] * v[i];
    return std::sqrt(s);
}

inline double norm2(const Tensor& v) { return norm2(v.data(), v.size()); }

/// v / ||v||. Near-zero input (norm <= 1e-12) is rejected.
inline Tensor l2_normalize(const Tensor& v) {
    double n = norm2(v);
    if (!(n > kZeroVectorEps)) throw ZeroVectorError("cannot normalize near-zero vector");
    Tensor out = v;
    out *= 1.0 / n;
    return out;
}

/// Gradient of y = x/||x||: dx = (dy - y <dy,y>) / ||x||.
inline Tensor l2_normalize_backward(const Tensor& unit, double norm, const Tensor& dunit) {
    double proj = dot(dunit, unit);
    Tensor dx = dunit;
    dx.axpy(-proj, unit);
    dx *= 1.0 / norm;
    return dx;
}

/// N x M matrix of cosine similarities between rows of A and rows of B.
inline Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("cosine_similarity_matrix: need N x D and M x D inputs");
    std::size_t n = a.rows(), m = b.rows(), d = a.cols();
    std::vector<double> an(n), bn(m);
    for (std::size_t i = 0; i < n; ++i) {
        an[i] = norm2(a.data() + i * d, d);
        if (!(an[i] > kZeroVectorEps)) throw ZeroVectorError("zero row in first argument");
    }
    for (std::size_t j = 0; j < m; ++j) {
        bn[j] = norm2(b.data() + j * d, d);
        if (!(bn[j] > kZeroVectorEps)) throw ZeroVectorError("zero row in second argument");
    }
    Tensor s({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            s.at(i, j) = dot(a.data() + i * d, b.data() + j * d, d) / (an[i] * bn[j]);
    return s;
}

/// Stable log(sigmoid(x)); exact identity -log(1+exp(-x)) without overflow.
inline double log_sigmoid(double x) {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

inline Tensor log_sigmoid(const Tensor& t) {
    Tensor out = t;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = log_sigmoid(out[i]);
    return out;
}

/// Stable logistic function.
inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

/// softmax(scale * x) with max subtraction; sums left-to-right.
inline Tensor softmax_row(const Tensor& x, double scale = 1.0) {
    if (x.empty()) throw ShapeError("softmax_row: empty input");
    Tensor out = x;
    double m = scale * out[0];
    for (std::size_t i = 1; i < out.size(); ++i) m = std::max(m, scale * out[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(scale * out[i] - m);
        z += out[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= z;
    return out;
}

// -- dense matrix helpers (row-major, fixed loop order) --

/// C = A (n x k) * B (k x m)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: inner dimension mismatch " + shape_string(a) + " * " +
                         shape_string(b));
    std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor c({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
            c.at(i, j) = s;
        }
    return c;
}

/// C = A^T (k x n -> n x k transposed) * B; A is k x n, B is k x m, C is n x m.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
        throw ShapeError("matmul_tn: outer dimension mismatch");
    std::size_t k = a.rows(), n = a.cols(), m = b.cols();
    Tensor c({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(t, i) * b.at(t, j);
            c.at(i, j) = s;
        }
    return c;
}

/// C = A (n x k) * B^T (m x k transposed); C is n x m.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimension mismatch");
    std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Tensor c({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(j, t);
            c.at(i, j) = s;
        }
    return c;
}

/// u (n) outer v (m) -> n x m.
inline Tensor outer(const Tensor& u, const Tensor& v) {
    Tensor c({u.size(), v.size()});
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) c.at(i, j) = u[i] * v[j];
    return c;
}

/// y = x (n) * W (n x m) treating x as a row vector.
inline Tensor vecmat(const Tensor& x, const Tensor& w) {
    if (w.rank() != 2 || x.size() != w.rows()) throw ShapeError("vecmat: dimension mismatch");
    std::size_t n = w.rows(), m = w.cols();
    Tensor y({m});
    for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < n; ++t) s += x[t] * w.at(t, j);
        y[j] = s;
    }
    return y;
}

/// y = x (m) * W^T (n x m) -> n.
inline Tensor vecmat_t(const Tensor& x, const Tensor& w) {
    if (w.rank() != 2 || x.size() != w.cols()) throw ShapeError("vecmat_t: dimension mismatch");
    std::size_t n = w.rows(), m = w.cols();
    Tensor y({n});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t t = 0; t < m; ++t) s += w.at(i, t) * x[t];
        y[i] = s;
    }
    return y;
}

}  // namespace duet
