#pragma once

#include <vector>

#include "layers.hpp"

namespace pinv {

// A sequential stack of layers with caches for one backward pass.
template <class T>
struct Net {
    std::vector<Layer<T>> layers;

    Tensor<T> forward(const Tensor<T>& x, bool train,
                      std::vector<LayerCache<T>>* caches = nullptr) {
        if (caches) caches->resize(layers.size());
        Tensor<T> cur = x;
        for (std::size_t i = 0; i < layers.size(); ++i)
            cur = layer_forward(layers[i], cur, train, caches ? &(*caches)[i] : nullptr);
        return cur;
    }

    // Accumulates parameter gradients, returns gradient w.r.t. the input.
    Tensor<T> backward(const Tensor<T>& grad_out, const std::vector<LayerCache<T>>& caches) {
        Tensor<T> g = grad_out;
        for (std::size_t i = layers.size(); i-- > 0;) g = layer_backward(layers[i], caches[i], g);
        return g;
    }

    // Input gradient through the net linearized at fixed normalization stats
    // (accepts infer-mode caches; parameter gradients are not meaningful here).
    Tensor<T> backward_linearized(const Tensor<T>& grad_out,
                                  const std::vector<LayerCache<T>>& caches) {
        Tensor<T> g = grad_out;
        for (std::size_t i = layers.size(); i-- > 0;)
            g = layer_backward_linearized(layers[i], caches[i], g);
        return g;
    }

    template <class Fn>
    void visit(Fn&& fn) {
        for (auto& L : layers) visit_params(L, fn);
    }

    void zero_grads() {
        visit([](Tensor<T>&, Tensor<T>& g) { g.fill(T(0)); });
    }

    std::size_t param_count() {
        std::size_t n = 0;
        visit([&](Tensor<T>& p, Tensor<T>&) { n += p.size(); });
        return n;
    }

    void init(Rng& rng) {
        for (auto& L : layers) init_layer(L, rng);
    }
};

}  // namespace pinv
