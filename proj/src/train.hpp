#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "adam.hpp"
#include "datagen.hpp"
#include "paired.hpp"

namespace pinv {

enum class Coupling { None, DataSpace, ModelSpace, Both };

inline const char* coupling_name(Coupling c) {
    switch (c) {
        case Coupling::None: return "none";
        case Coupling::DataSpace: return "data_space";
        case Coupling::ModelSpace: return "model_space";
        case Coupling::Both: return "both";
    }
    return "?";
}

inline Coupling coupling_from_name(const std::string& s) {
    if (s == "none") return Coupling::None;
    if (s == "data_space") return Coupling::DataSpace;
    if (s == "model_space") return Coupling::ModelSpace;
    if (s == "both") return Coupling::Both;
    throw ContractError("unknown coupling '" + s + "'");
}

struct TrainConfig {
    std::size_t batch_size = 16;
    int epochs = 20;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    Coupling coupling = Coupling::Both;
    double w_b = 1, w_q = 1, w_s = 1;

    void validate() const {
        if (batch_size < 1 || epochs < 1 || lr <= 0)
            throw ContractError("TrainConfig: sizes and lr must be positive");
        if (w_b < 0 || w_q < 0 || w_s < 0 || (w_b == 0 && w_q == 0 && w_s == 0))
            throw ContractError("TrainConfig: weights must be >= 0 and not all zero");
    }
};

// Component values are the unweighted per-term means; total applies weights.
struct LossBreakdown {
    double ae_data = 0, ae_model = 0, s_data_space = 0, s_model_space = 0, total = 0;
};

namespace traindetail {

template <class T>
double half_sq_residual(const Tensor<T>& yhat, const Tensor<T>& y) {
    double s = 0;
    for (std::size_t i = 0; i < yhat.size(); ++i) {
        const double d = static_cast<double>(yhat[i]) - static_cast<double>(y[i]);
        s += d * d;
    }
    return 0.5 * s;
}

// (scale) * (yhat - y)
template <class T>
Tensor<T> residual_grad(const Tensor<T>& yhat, const Tensor<T>& y, double scale) {
    Tensor<T> g(yhat.shape);
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = static_cast<T>(scale * (static_cast<double>(yhat[i]) - static_cast<double>(y[i])));
    return g;
}

}  // namespace traindetail

// L = (1/2B) sum_i [ w_b||D_b(E_b(b_i)) - b_i||^2 + w_q||D_q(E_q(q_i)) - q_i||^2
//                    + w_s * S(q_i, b_i) ]
// with S the data-space term ||D_b(M E_q(q)) - b||^2, the model-space term
// ||D_q(M^dagger E_b(b)) - q||^2, or their sum. Everything is evaluated on
// standardized tensors. When `with_grads` is set the exact parameter gradients
// accumulate into the nets (zeroed first).
template <class T>
LossBreakdown batch_loss_and_grads(PairedModel<T>& m, const Tensor<T>& q_batch,
                                   const Tensor<T>& b_batch, const TrainConfig& cfg,
                                   bool with_grads = true, bool train_mode = true) {
    cfg.validate();
    if (q_batch.shape.empty() || q_batch.shape[0] == 0)
        throw ContractError("batch_loss_and_grads: empty batch");
    const std::size_t B = q_batch.shape[0];
    if (b_batch.shape[0] != B) throw ContractError("batch_loss_and_grads: batch size mismatch");
    if (!m.meta.identity_maps)
        throw ContractError("batch_loss_and_grads: training supports identity latent maps only");

    const bool want_data = cfg.coupling == Coupling::DataSpace || cfg.coupling == Coupling::Both;
    const bool want_model = cfg.coupling == Coupling::ModelSpace || cfg.coupling == Coupling::Both;

    Tensor<T> qn = m.normalize_model(q_batch);
    qn.shape = {B, 1, q_batch.shape[1], q_batch.shape[2]};
    Tensor<T> bn = m.normalize_data(b_batch);

    if (with_grads) {
        m.enc_model.zero_grads();
        m.dec_model.zero_grads();
        m.enc_data.zero_grads();
        m.dec_data.zero_grads();
    }

    std::vector<LayerCache<T>> ced1, cdd1, cem1, cdm1, cem2, cdd2, ced2, cdm2;
    auto cp = [&](std::vector<LayerCache<T>>& c) { return with_grads ? &c : nullptr; };

    Tensor<T> z_b1 = m.enc_data.forward(bn, train_mode, cp(ced1));
    Tensor<T> b_rec = m.dec_data.forward(z_b1, train_mode, cp(cdd1));
    Tensor<T> z_q1 = m.enc_model.forward(qn, train_mode, cp(cem1));
    Tensor<T> q_rec = m.dec_model.forward(z_q1, train_mode, cp(cdm1));

    LossBreakdown out;
    out.ae_data = traindetail::half_sq_residual(b_rec, bn) / B;
    out.ae_model = traindetail::half_sq_residual(q_rec, qn) / B;

    Tensor<T> b_sur, q_lfe;
    std::vector<LayerCache<T>>* cem2p = cp(cem2);
    if (want_data) {
        Tensor<T> z_q2 = m.enc_model.forward(qn, train_mode, cem2p);
        b_sur = m.dec_data.forward(z_q2, train_mode, cp(cdd2));
        out.s_data_space = traindetail::half_sq_residual(b_sur, bn) / B;
    }
    if (want_model) {
        Tensor<T> z_b2 = m.enc_data.forward(bn, train_mode, cp(ced2));
        q_lfe = m.dec_model.forward(z_b2, train_mode, cp(cdm2));
        out.s_model_space = traindetail::half_sq_residual(q_lfe, qn) / B;
    }
    out.total = cfg.w_b * out.ae_data + cfg.w_q * out.ae_model +
                cfg.w_s * (out.s_data_space + out.s_model_space);
    if (!std::isfinite(out.total))
        throw NumericError("batch_loss_and_grads: non-finite loss (ae_data=" +
                           std::to_string(out.ae_data) + ", ae_model=" +
                           std::to_string(out.ae_model) + ", s_data=" +
                           std::to_string(out.s_data_space) + ", s_model=" +
                           std::to_string(out.s_model_space) + ")");
    if (!with_grads) return out;

    const double ib = 1.0 / B;
    {
        Tensor<T> g = traindetail::residual_grad(b_rec, bn, cfg.w_b * ib);
        Tensor<T> gz = m.dec_data.backward(g, cdd1);
        m.enc_data.backward(gz, ced1);
    }
    {
        Tensor<T> g = traindetail::residual_grad(q_rec, qn, cfg.w_q * ib);
        Tensor<T> gz = m.dec_model.backward(g, cdm1);
        m.enc_model.backward(gz, cem1);
    }
    if (want_data) {
        Tensor<T> g = traindetail::residual_grad(b_sur, bn, cfg.w_s * ib);
        Tensor<T> gz = m.dec_data.backward(g, cdd2);
        m.enc_model.backward(gz, cem2);
    }
    if (want_model) {
        Tensor<T> g = traindetail::residual_grad(q_lfe, qn, cfg.w_s * ib);
        Tensor<T> gz = m.dec_model.backward(g, cdm2);
        m.enc_data.backward(gz, ced2);
    }
    return out;
}

struct EpochLog {
    int epoch = 0;
    LossBreakdown train;
    double val_total = 0;
    double val_lfe_err = 0;
};

struct ValSummary {
    LossBreakdown loss;
    double mean_rre = 0, mean_rma = 0, mean_lfe_err = 0;
    std::size_t n = 0;
};

// Deterministic infer-mode pass over the validation split: mean loss terms,
// RRE/RMA means (computed directly from the standardized forward passes), and
// mean relative model error of the likelihood-free estimate.
template <class T>
ValSummary evaluate_validation(PairedModel<T>& m, const PairedDataset<T>& ds,
                               const TrainConfig& cfg, std::size_t chunk = 16) {
    if (ds.size() == 0) throw ContractError("evaluate_validation: empty split");
    ValSummary s;
    s.n = ds.size();
    const std::size_t nz = ds.models.shape[1], nx = ds.models.shape[2];
    for (std::size_t lo = 0; lo < ds.size(); lo += chunk) {
        const std::size_t hi = std::min(ds.size(), lo + chunk);
        const std::size_t B = hi - lo;
        Tensor<T> qb({B, nz, nx});
        Tensor<T> bb({B, ds.data.shape[1], ds.data.shape[2], ds.data.shape[3]});
        std::copy(ds.models.data.begin() + lo * nz * nx, ds.models.data.begin() + hi * nz * nx,
                  qb.data.begin());
        const std::size_t dsz = bb.size() / B;
        std::copy(ds.data.data.begin() + lo * dsz, ds.data.data.begin() + hi * dsz,
                  bb.data.begin());
        LossBreakdown lb = batch_loss_and_grads(m, qb, bb, cfg, /*with_grads=*/false,
                                                /*train_mode=*/false);
        const double w = static_cast<double>(B) / ds.size();
        s.loss.ae_data += w * lb.ae_data;
        s.loss.ae_model += w * lb.ae_model;
        s.loss.s_data_space += w * lb.s_data_space;
        s.loss.s_model_space += w * lb.s_model_space;
        s.loss.total += w * lb.total;
        // per-sample metrics
        Tensor<T> qb4 = qb;
        qb4.shape = {B, 1, nz, nx};
        Tensor<T> q_hat = m.lfe(bb);
        Tensor<T> z_q = m.encode_model(qb4);
        Tensor<T> b_sur = m.decode_data(m.latent_map(z_q));
        Tensor<T> q_rt = m.decode_model(m.encode_model(q_hat));
        for (std::size_t i = 0; i < B; ++i) {
            double nb = 0, rb = 0, nq = 0, rq = 0, nqh = 0, rqh = 0;
            const std::size_t msz = nz * nx;
            for (std::size_t k = 0; k < dsz; ++k) {
                const double bv = bb[i * dsz + k];
                const double d = static_cast<double>(b_sur[i * dsz + k]) - bv;
                nb += bv * bv;
                rb += d * d;
            }
            for (std::size_t k = 0; k < msz; ++k) {
                const double qv = qb[i * msz + k];
                const double qh = q_hat[i * msz + k];
                const double d = qh - qv;
                nq += qv * qv;
                rq += d * d;
                const double drt = static_cast<double>(q_rt[i * msz + k]) - qh;
                nqh += qh * qh;
                rqh += drt * drt;
            }
            s.mean_rre += std::sqrt(rb / std::max(nb, 1e-300)) / ds.size();
            s.mean_lfe_err += std::sqrt(rq / std::max(nq, 1e-300)) / ds.size();
            s.mean_rma += std::sqrt(rqh / std::max(nqh, 1e-300)) / ds.size();
        }
    }
    return s;
}

template <class T>
struct TrainResult {
    PairedModel<T> model;  // best-validation parameters
    std::vector<EpochLog> log;
    bool diverged = false;
    double initial_total = 0;
};

// Shuffled minibatch Adam over the coupled loss; retains the parameters of
// the epoch with the lowest validation total. Aborts (diverged flag) when the
// train total exceeds 10x the initial total for 3 consecutive epochs.
template <class T>
TrainResult<T> train(const PairedDataset<T>& train_ds, const PairedDataset<T>& val_ds,
                     PairedModel<T> m, const TrainConfig& cfg) {
    cfg.validate();
    if (train_ds.size() < cfg.batch_size)
        throw ContractError("train: dataset smaller than batch_size");

    AdamState<T> opt;
    opt.lr = cfg.lr;
    auto collect = [&](std::vector<Tensor<T>*>& ps, std::vector<const Tensor<T>*>& gs) {
        ps.clear();
        gs.clear();
        auto grab = [&](Net<T>& net) {
            net.visit([&](Tensor<T>& p, Tensor<T>& g) {
                ps.push_back(&p);
                gs.push_back(&g);
            });
        };
        grab(m.enc_model);
        grab(m.dec_model);
        grab(m.enc_data);
        grab(m.dec_data);
    };

    TrainResult<T> out;
    const std::size_t N = train_ds.size();
    const std::size_t nz = train_ds.models.shape[1], nx = train_ds.models.shape[2];
    const std::size_t msz = nz * nx;
    const std::size_t dsz =
        train_ds.data.shape[1] * train_ds.data.shape[2] * train_ds.data.shape[3];

    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    double best_val = 1e300;
    int high_epochs = 0;
    std::vector<Tensor<T>*> params;
    std::vector<const Tensor<T>*> grads;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(cfg.seed * 0x9e3779b9ull + static_cast<std::uint64_t>(epoch));
        for (std::size_t i = 0; i + 1 < N; ++i)
            std::swap(order[i], order[i + rng.uniform_int(0, N - 1 - i)]);

        LossBreakdown epoch_mean;
        std::size_t seen = 0;
        for (std::size_t lo = 0; lo < N; lo += cfg.batch_size) {
            const std::size_t hi = std::min(N, lo + cfg.batch_size);
            const std::size_t B = hi - lo;
            Tensor<T> qb({B, nz, nx});
            Tensor<T> bb({B, train_ds.data.shape[1], train_ds.data.shape[2],
                          train_ds.data.shape[3]});
            for (std::size_t i = 0; i < B; ++i) {
                const std::size_t s = order[lo + i];
                std::copy(train_ds.models.data.begin() + s * msz,
                          train_ds.models.data.begin() + (s + 1) * msz,
                          qb.data.begin() + i * msz);
                std::copy(train_ds.data.data.begin() + s * dsz,
                          train_ds.data.data.begin() + (s + 1) * dsz, bb.data.begin() + i * dsz);
            }
            LossBreakdown lb = batch_loss_and_grads(m, qb, bb, cfg);
            if (out.initial_total == 0 && epoch == 1 && lo == 0) out.initial_total = lb.total;
            collect(params, grads);
            adam_step(opt, params, grads);
            epoch_mean.ae_data += B * lb.ae_data;
            epoch_mean.ae_model += B * lb.ae_model;
            epoch_mean.s_data_space += B * lb.s_data_space;
            epoch_mean.s_model_space += B * lb.s_model_space;
            epoch_mean.total += B * lb.total;
            seen += B;
        }
        epoch_mean.ae_data /= seen;
        epoch_mean.ae_model /= seen;
        epoch_mean.s_data_space /= seen;
        epoch_mean.s_model_space /= seen;
        epoch_mean.total /= seen;

        ValSummary vs = evaluate_validation(m, val_ds, cfg);
        EpochLog el;
        el.epoch = epoch;
        el.train = epoch_mean;
        el.val_total = vs.loss.total;
        el.val_lfe_err = vs.mean_lfe_err;
        out.log.push_back(el);

        if (vs.loss.total < best_val) {
            best_val = vs.loss.total;
            out.model = m;  // deep copy of parameters at the best epoch
        }
        high_epochs = epoch_mean.total > 10.0 * out.initial_total ? high_epochs + 1 : 0;
        if (high_epochs >= 3) {
            out.diverged = true;
            return out;
        }
    }
    if (out.log.empty() || best_val == 1e300) out.model = m;
    return out;
}

}  // namespace pinv
