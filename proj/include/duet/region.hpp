#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "duet/encoder.hpp"
#include "duet/errors.hpp"
#include "duet/numerics.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Axis-aligned box in normalized [0,1] image coordinates.
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    void validate() const {
        if (!(0.0 <= x1 && x1 < x2 && x2 <= 1.0) || !(0.0 <= y1 && y1 < y2 && y2 <= 1.0))
            throw InvalidBoxError("box coordinates must satisfy 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1");
    }
};

struct Detection {
    Box box;
    double confidence = 0.0;  // must stay positive for multiplicative fusion
    std::size_t category = 0;
};

namespace detail {

/// One bilinear sample on an H x W grid at continuous patch coordinates
/// (u along width, v along height), clamped to the patch-center hull.
/// Returns the four (flat cell index, weight) taps.
struct BilinearTaps {
    std::size_t idx[4];
    double w[4];
};

inline BilinearTaps bilinear_taps(double u, double v, std::size_t h, std::size_t w) {
    u = std::min(std::max(u, 0.0), static_cast<double>(w - 1));
    v = std::min(std::max(v, 0.0), static_cast<double>(h - 1));
    std::size_t j0 = (w == 1) ? 0 : std::min(static_cast<std::size_t>(u), w - 2);
    std::size_t i0 = (h == 1) ? 0 : std::min(static_cast<std::size_t>(v), h - 2);
    double fx = u - static_cast<double>(j0);
    double fy = v - static_cast<double>(i0);
    std::size_t j1 = (w == 1) ? 0 : j0 + 1;
    std::size_t i1 = (h == 1) ? 0 : i0 + 1;
    BilinearTaps t;
    t.idx[0] = i0 * w + j0;
    t.idx[1] = i0 * w + j1;
    t.idx[2] = i1 * w + j0;
    t.idx[3] = i1 * w + j1;
    t.w[0] = (1.0 - fy) * (1.0 - fx);
    t.w[1] = (1.0 - fy) * fx;
    t.w[2] = fy * (1.0 - fx);
    t.w[3] = fy * fx;
    return t;
}

}  // namespace detail

/// RoIAlign: each output bin is the mean of samples_per_bin^2 bilinear samples
/// at regular offsets inside the bin. Patch (i,j) has its center at normalized
/// coordinates ((j+0.5)/W, (i+0.5)/H); samples outside the grid clamp to the edge.
inline Tensor roi_align(const FeatureGrid& grid, const Box& box, std::size_t out_h,
                        std::size_t out_w, std::size_t samples_per_bin = 2) {
    box.validate();
    if (grid.height == 0 || grid.width == 0) throw ShapeError("empty feature grid");
    if (out_h == 0 || out_w == 0 || samples_per_bin == 0)
        throw ShapeError("output bins and sample counts must be positive");
    std::size_t h = grid.height, w = grid.width, d = grid.features.dim(2);
    const double* f = grid.features.data();
    double bin_h = (box.y2 - box.y1) / static_cast<double>(out_h);
    double bin_w = (box.x2 - box.x1) / static_cast<double>(out_w);
    double denom = static_cast<double>(samples_per_bin * samples_per_bin);
    Tensor out({out_h, out_w, d});
    for (std::size_t bi = 0; bi < out_h; ++bi) {
        for (std::size_t bj = 0; bj < out_w; ++bj) {
            for (std::size_t si = 0; si < samples_per_bin; ++si) {
                for (std::size_t sj = 0; sj < samples_per_bin; ++sj) {
                    double y = box.y1 + (static_cast<double>(bi) +
                                         (static_cast<double>(si) + 0.5) /
                                             static_cast<double>(samples_per_bin)) *
                                            bin_h;
                    double x = box.x1 + (static_cast<double>(bj) +
                                         (static_cast<double>(sj) + 0.5) /
                                             static_cast<double>(samples_per_bin)) *
                                            bin_w;
                    auto taps = detail::bilinear_taps(x * static_cast<double>(w) - 0.5,
                                                      y * static_cast<double>(h) - 0.5, h, w);
                    for (std::size_t c = 0; c < d; ++c) {
                        double s = 0.0;
                        for (int t = 0; t < 4; ++t) s += taps.w[t] * f[taps.idx[t] * d + c];
                        out.at(bi, bj, c) += s / denom;
                    }
                }
            }
        }
    }
    return out;
}

/// Scatter counterpart of roi_align; accumulates into dgrid (H x W x D).
inline void roi_align_backward(std::size_t grid_h, std::size_t grid_w, const Box& box,
                               std::size_t out_h, std::size_t out_w,
                               std::size_t samples_per_bin, const Tensor& dout,
                               Tensor& dgrid) {
    std::size_t d = dgrid.dim(2);
    double bin_h = (box.y2 - box.y1) / static_cast<double>(out_h);
    double bin_w = (box.x2 - box.x1) / static_cast<double>(out_w);
    double denom = static_cast<double>(samples_per_bin * samples_per_bin);
    double* g = dgrid.data();
    for (std::size_t bi = 0; bi < out_h; ++bi) {
        for (std::size_t bj = 0; bj < out_w; ++bj) {
            for (std::size_t si = 0; si < samples_per_bin; ++si) {
                for (std::size_t sj = 0; sj < samples_per_bin; ++sj) {
                    double y = box.y1 + (static_cast<double>(bi) +
                                         (static_cast<double>(si) + 0.5) /
                                             static_cast<double>(samples_per_bin)) *
                                            bin_h;
                    double x = box.x1 + (static_cast<double>(bj) +
                                         (static_cast<double>(sj) + 0.5) /
                                             static_cast<double>(samples_per_bin)) *
                                            bin_w;
                    auto taps = detail::bilinear_taps(x * static_cast<double>(grid_w) - 0.5,
                                                      y * static_cast<double>(grid_h) - 0.5,
                                                      grid_h, grid_w);
                    for (std::size_t c = 0; c < d; ++c) {
                        double s = dout.at(bi, bj, c) / denom;
                        for (int t = 0; t < 4; ++t) g[taps.idx[t] * d + c] += taps.w[t] * s;
                    }
                }
            }
        }
    }
}

struct RegionEmbeddingCache {
    Box box;
    std::size_t grid_h = 0, grid_w = 0;
    Tensor pooled;  // D, pre-normalization
    double norm = 0.0;
    Tensor unit;  // D
};

/// Unit-norm region feature: 1x1 RoIAlign with 2x2 samples, then l2 normalization.
inline Tensor region_embedding(const FeatureGrid& grid, const Box& box,
                               RegionEmbeddingCache* cache = nullptr) {
    Tensor bins = roi_align(grid, box, 1, 1, 2);
    Tensor pooled = bins.reshaped({bins.dim(2)});
    double n = norm2(pooled);
    if (!(n > kZeroVectorEps)) throw ZeroVectorError("pooled region feature is near zero");
    Tensor unit = pooled;
    unit *= 1.0 / n;
    if (cache) *cache = RegionEmbeddingCache{box, grid.height, grid.width, pooled, n, unit};
    return unit;
}

/// Chains d(unit embedding) back to the feature grid.
inline void region_embedding_backward(const RegionEmbeddingCache& c, const Tensor& dunit,
                                      Tensor& dgrid) {
    Tensor dpooled = l2_normalize_backward(c.unit, c.norm, dunit);
    roi_align_backward(c.grid_h, c.grid_w, c.box, 1, 1, 2,
                       dpooled.reshaped({1, 1, dpooled.size()}), dgrid);
}

struct FusedScores {
    Tensor fused;        // C
    std::size_t argmax;  // lowest index wins exact ties
};

/// Training-free detection fusion: p = softmax(scale * sims),
/// fused_c = confidence_c^alpha * p_c^(1-alpha). alpha = 1 reproduces the
/// detector; alpha = 0.5 is the geometric mean.
inline FusedScores ovd_fuse(const Tensor& confidences, const Tensor& sims, double alpha = 0.5,
                            double scale = 10.0) {
    if (confidences.size() != sims.size() || confidences.empty())
        throw ShapeError("confidences and sims must be equal-length and nonempty");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ShapeError("alpha must lie in [0,1]");
    for (std::size_t c = 0; c < confidences.size(); ++c)
        if (!(confidences[c] > 0.0))
            throw InvalidConfidenceError("confidence must be positive for multiplicative fusion");
    Tensor p = softmax_row(sims, scale);
    FusedScores r;
    r.fused = Tensor({confidences.size()});
    r.argmax = 0;
    for (std::size_t c = 0; c < confidences.size(); ++c) {
        r.fused[c] = std::pow(confidences[c], alpha) * std::pow(p[c], 1.0 - alpha);
        if (r.fused[c] > r.fused[r.argmax]) r.argmax = c;
    }
    return r;
}

}  // namespace duet
