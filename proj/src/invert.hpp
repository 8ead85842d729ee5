#pragma once

#include <string>
#include <vector>

#include "adam.hpp"
#include "paired.hpp"
#include "wave.hpp"

namespace pinv {

enum class InvMethod { BI, LSI };
enum class InvStart { Basic, Warm };

inline const char* method_name(InvMethod m) { return m == InvMethod::BI ? "BI" : "LSI"; }
inline const char* start_name(InvStart s) { return s == InvStart::Basic ? "basic" : "warm"; }

struct InversionConfig {
    InvMethod method = InvMethod::BI;
    InvStart start = InvStart::Basic;
    double alpha = 1.0;  // LSI anchor weight
    int iters = 700;
    double lr = 1e-2;
    double clamp_lo = 1500.0 * 1500.0;  // box on qsq, m^2/s^2
    double clamp_hi = 4000.0 * 4000.0;

    void validate() const {
        if (iters < 1) throw ContractError("InversionConfig: iters must be >= 1");
        if (alpha < 0) throw ContractError("InversionConfig: alpha must be >= 0");
        if (lr <= 0 || clamp_lo <= 0 || clamp_hi <= clamp_lo)
            throw ContractError("InversionConfig: bad lr or clamp box");
    }
};

// Per-iteration record including the initial point (length iters + 1).
template <class T>
struct InversionTrace {
    std::vector<double> misfit;     // 1/2 ||F - b||^2
    std::vector<double> reg;        // (alpha/2)||z - z*||^2, 0 for BI
    std::vector<double> model_err;  // relative error vs truth when available
    Tensor<T> final_model;          // qsq, [nz, nx]
    std::uint64_t solver_calls = 0;
};

// ||a - b_ref|| / ||b_ref||
template <class T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b_ref) {
    return relative_l2(a, b_ref);
}

// Laterally invariant basic start: velocity ramps linearly in depth between
// the box corners.
template <class T>
Tensor<T> make_basic_start(const Grid2D& grid, double clamp_lo, double clamp_hi) {
    const double c_lo = std::sqrt(clamp_lo), c_hi = std::sqrt(clamp_hi);
    Tensor<T> q({(std::size_t)grid.nz, (std::size_t)grid.nx});
    for (int iz = 0; iz < grid.nz; ++iz) {
        const double c = c_lo + (c_hi - c_lo) * (iz + 0.5) / grid.nz;
        for (int ix = 0; ix < grid.nx; ++ix) q[iz * grid.nx + ix] = static_cast<T>(c * c);
    }
    return q;
}

// Adam on the gridded qsq field with a box clamp; gradients are rescaled by
// the mean |q0| so the nominal lr is in relative units.
template <class T>
InversionTrace<T> basic_inversion(const Tensor<T>& b_obs, const VelocityModel<T>& q0,
                                  const Acquisition& acq, const InversionConfig& cfg,
                                  const Tensor<T>* q_true = nullptr) {
    cfg.validate();
    if (cfg.method != InvMethod::BI) throw ContractError("basic_inversion: method must be BI");
    const std::uint64_t calls0 = SolverCounters::total();

    VelocityModel<T> q = q0;
    double mean_abs = 0;
    for (T v : q.qsq.data) mean_abs += std::abs(static_cast<double>(v));
    mean_abs /= q.qsq.size();

    AdamState<T> opt;
    opt.lr = cfg.lr * mean_abs;
    std::vector<Tensor<T>*> ps{&q.qsq};
    Tensor<T> grad;
    InversionTrace<T> tr;
    for (int it = 0; it <= cfg.iters; ++it) {
        auto [phi, g] = misfit_and_gradient(q, acq, b_obs);
        tr.misfit.push_back(phi);
        tr.reg.push_back(0.0);
        tr.model_err.push_back(q_true ? relative_error(q.qsq, *q_true) : 0.0);
        if (it == cfg.iters) break;
        grad = std::move(g);
        std::vector<const Tensor<T>*> gs{&grad};
        adam_step(opt, ps, gs);
        for (auto& v : q.qsq.data)
            v = static_cast<T>(
                std::clamp(static_cast<double>(v), cfg.clamp_lo, cfg.clamp_hi));
    }
    tr.final_model = q.qsq;
    tr.solver_calls = SolverCounters::total() - calls0;
    return tr;
}

// Latent-space inversion: Adam on z for
//   1/2 ||F(D_q(z)) - b||^2 + (alpha/2) ||z - z*||^2,
// with the data-term gradient chained through the decoder linearized at its
// stored normalization statistics. The decoded model is clamped to the box
// before simulation; clamped cells contribute zero gradient.
template <class T>
InversionTrace<T> latent_space_inversion(const Tensor<T>& b_obs, const Tensor<T>& z_star,
                                         const InversionConfig& cfg, PairedModel<T>& m,
                                         const Grid2D& grid, const Acquisition& acq,
                                         const Tensor<T>* q_true = nullptr) {
    cfg.validate();
    if (cfg.method != InvMethod::LSI)
        throw ContractError("latent_space_inversion: method must be LSI");
    const std::size_t L = m.meta.latent_dim;
    z_star.require_shape({L}, "latent_space_inversion: z_star");
    const std::uint64_t calls0 = SolverCounters::total();

    Tensor<T> z;
    if (cfg.start == InvStart::Warm) {
        z = z_star;
    } else {
        Tensor<T> q0 = make_basic_start<T>(grid, cfg.clamp_lo, cfg.clamp_hi);
        q0.shape = {1, 1, (std::size_t)grid.nz, (std::size_t)grid.nx};
        z = unbatch(m.encode_model(q0));
    }

    AdamState<T> opt;
    opt.lr = cfg.lr;
    const T sd = static_cast<T>(m.meta.q_std);
    InversionTrace<T> tr;
    Tensor<T> gz;
    for (int it = 0; it <= cfg.iters; ++it) {
        Tensor<T> zb = z;
        zb.shape = {1, L};
        std::vector<LayerCache<T>> caches;
        Tensor<T> qn = m.dec_model.forward(zb, /*train=*/false, &caches);
        Tensor<T> q_phys = m.denormalize_model(qn);
        std::vector<char> clamped(q_phys.size(), 0);
        for (std::size_t i = 0; i < q_phys.size(); ++i) {
            const double v = q_phys[i];
            if (v < cfg.clamp_lo || v > cfg.clamp_hi) {
                clamped[i] = 1;
                q_phys[i] = static_cast<T>(std::clamp(v, cfg.clamp_lo, cfg.clamp_hi));
            }
        }
        VelocityModel<T> qm;
        qm.grid = grid;
        qm.qsq = q_phys;
        qm.qsq.shape = {(std::size_t)grid.nz, (std::size_t)grid.nx};

        auto [phi, gq] = misfit_and_gradient(qm, acq, b_obs);
        double reg = 0;
        for (std::size_t i = 0; i < L; ++i) {
            const double d = static_cast<double>(z[i]) - static_cast<double>(z_star[i]);
            reg += d * d;
        }
        reg *= 0.5 * cfg.alpha;
        tr.misfit.push_back(phi);
        tr.reg.push_back(reg);
        tr.model_err.push_back(q_true ? relative_error(qm.qsq, *q_true) : 0.0);
        if (it == cfg.iters) {
            tr.final_model = qm.qsq;
            break;
        }

        Tensor<T> gqn({std::size_t(1), std::size_t(1), (std::size_t)grid.nz,
                       (std::size_t)grid.nx});
        for (std::size_t i = 0; i < gq.size(); ++i)
            gqn[i] = clamped[i] ? T(0) : static_cast<T>(gq[i] * sd);
        gz = m.dec_model.backward_linearized(gqn, caches);
        gz.shape = {L};
        for (std::size_t i = 0; i < L; ++i)
            gz[i] += static_cast<T>(cfg.alpha * (static_cast<double>(z[i]) -
                                                 static_cast<double>(z_star[i])));
        std::vector<Tensor<T>*> ps{&z};
        std::vector<const Tensor<T>*> gs{&gz};
        adam_step(opt, ps, gs);
    }
    tr.solver_calls = SolverCounters::total() - calls0;
    return tr;
}

struct SuiteRow {
    std::string method, start;
    double alpha = 0;
    double misfit_init_mean = 0, misfit_init_std = 0;
    double misfit_final_mean = 0, misfit_final_std = 0;
    double err_init_mean = 0, err_init_std = 0;
    double err_final_mean = 0, err_final_std = 0;
    std::size_t n_samples = 0;
    std::size_t excluded = 0;
};

namespace invdetail {

inline void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0;
    sd = 0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= xs.size();
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / xs.size());
}

}  // namespace invdetail

// The four standard configurations over a ground-truthed test set. Misfit
// columns report relative data misfit ||F - b|| / ||b||.
template <class T>
std::vector<SuiteRow> run_suite(const Tensor<T>& test_models, const Tensor<T>& test_data,
                                PairedModel<T>& m, const Grid2D& grid, const Acquisition& acq,
                                const InversionConfig& base, std::size_t n_samples) {
    const std::size_t N = std::min<std::size_t>(n_samples, test_models.shape[0]);
    if (N < 1) throw ContractError("run_suite: empty test set");
    const std::size_t nz = grid.nz, nx = grid.nx;
    const std::size_t msz = nz * nx;
    const std::size_t dsz = test_data.shape[1] * test_data.shape[2] * test_data.shape[3];

    struct Cfg {
        InvMethod method;
        InvStart start;
        double alpha;
    };
    const Cfg cfgs[4] = {{InvMethod::BI, InvStart::Basic, 0.0},
                         {InvMethod::BI, InvStart::Warm, 0.0},
                         {InvMethod::LSI, InvStart::Basic, 0.0},
                         {InvMethod::LSI, InvStart::Warm, 1.0}};

    std::vector<SuiteRow> rows(4);
    std::vector<std::vector<double>> mi(4), mf(4), ei(4), ef(4);

    for (std::size_t s = 0; s < N; ++s) {
        Tensor<T> q_true({nz, nx});
        std::copy(test_models.data.begin() + s * msz, test_models.data.begin() + (s + 1) * msz,
                  q_true.data.begin());
        Tensor<T> b_obs({test_data.shape[1], test_data.shape[2], test_data.shape[3]});
        std::copy(test_data.data.begin() + s * dsz, test_data.data.begin() + (s + 1) * dsz,
                  b_obs.data.begin());
        const double b_norm = norm2(b_obs);

        Tensor<T> b1 = b_obs;
        b1.shape = {1, b_obs.shape[0], b_obs.shape[1], b_obs.shape[2]};
        Tensor<T> z_hat = unbatch(m.latent_map_dagger(m.encode_data(b1)));
        Tensor<T> zb = z_hat;
        zb.shape = {1, (std::size_t)m.meta.latent_dim};
        Tensor<T> q_hat = unbatch(m.decode_model(zb));
        q_hat.shape = {nz, nx};

        for (int c = 0; c < 4; ++c) {
            InversionConfig cfg = base;
            cfg.method = cfgs[c].method;
            cfg.start = cfgs[c].start;
            cfg.alpha = cfgs[c].alpha;
            try {
                InversionTrace<T> tr;
                if (cfg.method == InvMethod::BI) {
                    VelocityModel<T> q0;
                    q0.grid = grid;
                    if (cfg.start == InvStart::Basic) {
                        q0.qsq = make_basic_start<T>(grid, cfg.clamp_lo, cfg.clamp_hi);
                    } else {
                        q0.qsq = q_hat;
                        for (auto& v : q0.qsq.data)
                            v = static_cast<T>(std::clamp(static_cast<double>(v), cfg.clamp_lo,
                                                          cfg.clamp_hi));
                    }
                    tr = basic_inversion(b_obs, q0, acq, cfg, &q_true);
                } else {
                    tr = latent_space_inversion(b_obs, z_hat, cfg, m, grid, acq, &q_true);
                }
                mi[c].push_back(std::sqrt(2.0 * tr.misfit.front()) / b_norm);
                mf[c].push_back(std::sqrt(2.0 * tr.misfit.back()) / b_norm);
                ei[c].push_back(tr.model_err.front());
                ef[c].push_back(tr.model_err.back());
            } catch (const std::exception&) {
                rows[c].excluded += 1;
            }
        }
    }
    for (int c = 0; c < 4; ++c) {
        rows[c].method = method_name(cfgs[c].method);
        rows[c].start = start_name(cfgs[c].start);
        rows[c].alpha = cfgs[c].alpha;
        rows[c].n_samples = mi[c].size();
        invdetail::mean_std(mi[c], rows[c].misfit_init_mean, rows[c].misfit_init_std);
        invdetail::mean_std(mf[c], rows[c].misfit_final_mean, rows[c].misfit_final_std);
        invdetail::mean_std(ei[c], rows[c].err_init_mean, rows[c].err_init_std);
        invdetail::mean_std(ef[c], rows[c].err_final_mean, rows[c].err_final_std);
    }
    return rows;
}

}  // namespace pinv
