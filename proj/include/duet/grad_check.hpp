#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "duet/errors.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// A scalar function of named parameters that also reports its analytic gradient.
using GradFunction = std::function<GradPair(const ParamMap&)>;

struct FiniteDiffOptions {
    double step = 1e-5;
    /// Cap on probed coordinates per parameter; 0 means all. Coordinates are
    /// visited with a deterministic stride so large tensors get even coverage.
    std::size_t max_coords_per_param = 0;
};

/// Max over probed coordinates of |analytic - central difference| / max(1, |central difference|).
inline double finite_diff_check(const GradFunction& f, const ParamMap& params,
                                const FiniteDiffOptions& opts = {}) {
    GradPair base = f(params);
    if (!std::isfinite(base.value)) throw NonFiniteError("function value is not finite");
    double worst = 0.0;
    for (const auto& [name, p] : params) {
        auto it = base.grads.find(name);
        Tensor zero;
        const Tensor* analytic = nullptr;
        if (it != base.grads.end()) {
            if (!it->second.same_shape(p))
                throw ShapeError("gradient shape mismatch for parameter " + name);
            analytic = &it->second;
        } else {
            zero = Tensor(p.shape());
            analytic = &zero;
        }
        std::size_t n = p.size();
        std::size_t probes = opts.max_coords_per_param == 0
                                 ? n
                                 : std::min(n, opts.max_coords_per_param);
        std::size_t stride = probes == 0 ? 1 : std::max<std::size_t>(1, n / probes);
        ParamMap work = params;
        Tensor& wp = work[name];
        for (std::size_t pi = 0; pi < probes; ++pi) {
            std::size_t i = std::min(pi * stride, n - 1);
            double orig = wp[i];
            wp[i] = orig + opts.step;
            double up = f(work).value;
            wp[i] = orig - opts.step;
            double down = f(work).value;
            wp[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NonFiniteError("function value is not finite at probe point");
            double central = (up - down) / (2.0 * opts.step);
            double err = std::abs((*analytic)[i] - central) / std::max(1.0, std::abs(central));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace duet
