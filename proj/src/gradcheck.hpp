#pragma once

#include <algorithm>
#include <functional>

#include "rng.hpp"
#include "tensor.hpp"

namespace pinv {

struct GradCheckReport {
    double max_rel_err = 0;
    bool pass = false;
    std::size_t checked = 0;
};

// Central finite differences on a random subsample of coordinates of a
// deterministic scalar function. `fn` evaluates the function at the current
// parameter vector; `analytic` is the gradient under test, same length.
template <class T>
GradCheckReport gradient_check(const std::function<double(const Tensor<T>&)>& fn,
                               Tensor<T> params, const Tensor<T>& analytic, double tol,
                               std::size_t max_coords = 64, std::uint64_t seed = 1234,
                               double step = 1e-6) {
    if (tol <= 0) throw ContractError("gradient_check: tol must be positive");
    if (params.size() != analytic.size())
        throw ContractError("gradient_check: gradient length mismatch");
    Rng rng(seed);
    std::vector<std::size_t> idx(params.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    // Fisher-Yates prefix shuffle to pick the subsample.
    std::size_t n = std::min(max_coords, params.size());
    for (std::size_t i = 0; i < n; ++i)
        std::swap(idx[i], idx[i + rng.uniform_int(0, idx.size() - 1 - i)]);

    GradCheckReport rep;
    rep.checked = n;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = idx[k];
        const T orig = params[i];
        const double h = step * std::max(1.0, std::abs(static_cast<double>(orig)));
        params[i] = static_cast<T>(orig + h);
        double fp = fn(params);
        params[i] = static_cast<T>(orig - h);
        double fm = fn(params);
        params[i] = orig;
        const double fd = (fp - fm) / (2 * h);
        const double an = analytic[i];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - an) / denom);
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace pinv
