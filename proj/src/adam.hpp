#pragma once

#include <cmath>

#include "tensor.hpp"

namespace pinv {

// Adam with bias correction over a flat list of parameter tensors. Moments are
// zero-initialized on first use; step_count is incremented before correction.
template <class T>
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    std::vector<Tensor<T>> m, v;

    AdamState() = default;
    AdamState(double lr_, double b1, double b2, double e) : lr(lr_), beta1(b1), beta2(b2), eps(e) {
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0)
            throw ContractError("AdamState: invalid hyperparameters");
    }
};

// One update over params[i] with grads[i]. All tensors must shape-match their
// moments across calls.
template <class T>
void adam_step(AdamState<T>& st, const std::vector<Tensor<T>*>& params,
               const std::vector<const Tensor<T>*>& grads) {
    if (params.size() != grads.size()) throw ContractError("adam_step: param/grad count mismatch");
    for (const auto* g : grads)
        if (!g->all_finite()) throw NumericError("adam_step: non-finite gradient, step refused");
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.m[i] = Tensor<T>(params[i]->shape);
            st.v[i] = Tensor<T>(params[i]->shape);
        }
    }
    st.step_count += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, st.step_count);
    const double bc2 = 1.0 - std::pow(st.beta2, st.step_count);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        const Tensor<T>& g = *grads[i];
        if (!p.same_shape(g) || !p.same_shape(st.m[i]))
            throw ContractError("adam_step: shape mismatch at tensor " + std::to_string(i));
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            double mk = st.beta1 * st.m[i][k] + (1 - st.beta1) * gk;
            double vk = st.beta2 * st.v[i][k] + (1 - st.beta2) * gk * gk;
            st.m[i][k] = static_cast<T>(mk);
            st.v[i][k] = static_cast<T>(vk);
            p[k] -= static_cast<T>(st.lr * (mk / bc1) / (std::sqrt(vk / bc2) + st.eps));
        }
    }
}

}  // namespace pinv
