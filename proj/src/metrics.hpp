#pragma once

#include <algorithm>
#include <vector>

#include "container.hpp"
#include "datagen.hpp"
#include "paired.hpp"
#include "wave.hpp"

namespace pinv {

struct MetricPoint {
    double rre = 0, rma = 0;
};

// ||b - D_b(M E_q(q_hat))|| / ||b||, solver-free.
template <class T>
double rre(PairedModel<T>& m, const Tensor<T>& b, const Tensor<T>& q_hat) {
    if (norm2(b) == 0) throw ContractError("rre: zero data vector");
    Tensor<T> q1 = q_hat;
    q1.shape = {1, 1, (std::size_t)m.meta.nz, (std::size_t)m.meta.nx};
    Tensor<T> b_sur = unbatch(m.surrogate_forward(q1));
    Tensor<T> b3 = b;
    b3.shape = b_sur.shape;
    return relative_l2(b_sur, b3);
}

// ||q_hat - D_q(E_q(q_hat))|| / ||q_hat||, solver-free.
template <class T>
double rma(PairedModel<T>& m, const Tensor<T>& q_hat) {
    if (norm2(q_hat) == 0) throw ContractError("rma: zero model vector");
    Tensor<T> q1 = q_hat;
    q1.shape = {1, 1, (std::size_t)m.meta.nz, (std::size_t)m.meta.nx};
    Tensor<T> q_rt = unbatch(m.decode_model(m.encode_model(q1)));
    Tensor<T> q3 = q_hat;
    q3.shape = q_rt.shape;
    return relative_l2(q_rt, q3);
}

// Smoothed 2D histogram over [0, p99.5] per axis, normalized to sum 1, plus
// the sorted per-point densities of the fitting set (for percentile lookups).
struct DensityMap {
    int n_bins = 16;
    double rre_edge = 0, rma_edge = 0;  // upper range per axis
    Tensor<double> cells;               // [n_bins, n_bins]
    std::size_t n_samples = 0;
    std::vector<double> point_density;  // ascending

    // density at a point; 0 outside the histogram support
    double value(const MetricPoint& p) const {
        if (p.rre < 0 || p.rma < 0 || p.rre > rre_edge || p.rma > rma_edge) return 0.0;
        const int i = std::min(n_bins - 1, static_cast<int>(p.rre / rre_edge * n_bins));
        const int j = std::min(n_bins - 1, static_cast<int>(p.rma / rma_edge * n_bins));
        return cells[static_cast<std::size_t>(i) * n_bins + j];
    }
};

namespace metricdetail {

inline double percentile_of(std::vector<double> xs, double p) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    std::size_t idx = static_cast<std::size_t>(std::ceil(p * n));
    if (idx > 0) --idx;
    if (idx >= n) idx = n - 1;
    return xs[idx];
}

}  // namespace metricdetail

inline DensityMap fit_density(const std::vector<MetricPoint>& points, int n_bins,
                              double smooth_sigma) {
    if (points.size() < 30) throw ContractError("fit_density: need at least 30 points");
    if (n_bins < 2) throw ContractError("fit_density: need at least 2 bins");
    DensityMap dm;
    dm.n_bins = n_bins;
    dm.n_samples = points.size();
    std::vector<double> xs, ys;
    xs.reserve(points.size());
    ys.reserve(points.size());
    for (const auto& p : points) {
        xs.push_back(p.rre);
        ys.push_back(p.rma);
    }
    dm.rre_edge = std::max(metricdetail::percentile_of(xs, 0.995), 1e-12);
    dm.rma_edge = std::max(metricdetail::percentile_of(ys, 0.995), 1e-12);

    dm.cells = Tensor<double>({(std::size_t)n_bins, (std::size_t)n_bins});
    for (const auto& p : points) {
        if (p.rre > dm.rre_edge || p.rma > dm.rma_edge) continue;  // beyond p99.5
        const int i = std::min(n_bins - 1, static_cast<int>(p.rre / dm.rre_edge * n_bins));
        const int j = std::min(n_bins - 1, static_cast<int>(p.rma / dm.rma_edge * n_bins));
        dm.cells[static_cast<std::size_t>(i) * n_bins + j] += 1.0;
    }

    if (smooth_sigma > 0) {
        const int radius = static_cast<int>(std::ceil(3.0 * smooth_sigma));
        std::vector<double> kern(2 * radius + 1);
        for (int k = -radius; k <= radius; ++k)
            kern[k + radius] = std::exp(-0.5 * k * k / (smooth_sigma * smooth_sigma));
        auto blur_axis = [&](bool rows) {
            Tensor<double> out(dm.cells.shape);
            for (int i = 0; i < n_bins; ++i)
                for (int j = 0; j < n_bins; ++j) {
                    double acc = 0, wsum = 0;
                    for (int k = -radius; k <= radius; ++k) {
                        const int ii = rows ? i + k : i;
                        const int jj = rows ? j : j + k;
                        if (ii < 0 || ii >= n_bins || jj < 0 || jj >= n_bins) continue;
                        acc += kern[k + radius] *
                               dm.cells[static_cast<std::size_t>(ii) * n_bins + jj];
                        wsum += kern[k + radius];
                    }
                    out[static_cast<std::size_t>(i) * n_bins + j] = wsum > 0 ? acc / wsum : 0.0;
                }
            dm.cells = out;
        };
        blur_axis(true);
        blur_axis(false);
    }

    double mass = 0;
    for (double v : dm.cells.data) mass += v;
    if (mass <= 0) throw NumericError("fit_density: empty histogram");
    for (auto& v : dm.cells.data) v /= mass;

    dm.point_density.reserve(points.size());
    for (const auto& p : points) dm.point_density.push_back(dm.value(p));
    std::sort(dm.point_density.begin(), dm.point_density.end());
    return dm;
}

struct OodScore {
    double density_value = 0;
    double percentile = 0;  // fraction of fitting points at least this dense
    bool is_ood = false;
};

inline OodScore ood_score(const DensityMap& dm, const MetricPoint& p, double threshold = 0.95) {
    if (dm.point_density.empty()) throw ContractError("ood_score: density not fitted");
    OodScore s;
    s.density_value = dm.value(p);
    const auto lo = std::lower_bound(dm.point_density.begin(), dm.point_density.end(),
                                     s.density_value);
    const std::size_t at_least = dm.point_density.end() - lo;
    s.percentile = static_cast<double>(at_least) / dm.point_density.size();
    s.is_ood = s.percentile > threshold;
    return s;
}

inline void save_density(const std::string& path, const DensityMap& dm) {
    Container c;
    c.put("cells", dm.cells);
    Tensor<double> pd({dm.point_density.size()});
    pd.data.assign(dm.point_density.begin(), dm.point_density.end());
    c.put("point_density", pd);
    c.meta["n_bins"] = dm.n_bins;
    c.meta["rre_edge"] = dm.rre_edge;
    c.meta["rma_edge"] = dm.rma_edge;
    c.meta["n_samples"] = dm.n_samples;
    save_container(path, c);
}

inline DensityMap load_density(const std::string& path) {
    Container c = load_container(path);
    DensityMap dm;
    dm.n_bins = c.meta.at("n_bins");
    dm.rre_edge = c.meta.at("rre_edge");
    dm.rma_edge = c.meta.at("rma_edge");
    dm.n_samples = c.meta.at("n_samples");
    dm.cells = c.get("cells").as<double>();
    const auto pd = c.get("point_density").as<double>();
    dm.point_density.assign(pd.data.begin(), pd.data.end());
    return dm;
}

// AUROC of `score` as an in-distribution classifier: probability a positive
// (in-distribution) sample scores above a negative one, ties counted half.
inline double auroc(const std::vector<double>& pos, const std::vector<double>& neg) {
    if (pos.empty() || neg.empty()) throw ContractError("auroc: empty class");
    double s = 0;
    for (double p : pos)
        for (double n : neg) s += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    return s / (static_cast<double>(pos.size()) * neg.size());
}

// Empirical constants for the error bounds, estimated without solver calls
// from a validation split (stored pairs stand in for forward evaluations).
struct ConstantEstimates {
    double L = 0;        // forward map Lipschitz (from stored pairs)
    double L_q = 0;      // model decoder Lipschitz
    double L_b = 0;      // data encoder Lipschitz
    double L_ae = 0;     // model autoencoder D_q(E_q(.)) Lipschitz
    double xi_q = 0, xi_b = 0, xi_M = 0;
    double delta = 0;    // max surrogate data error
    double eps_q = 0;    // max lfe model error
    double M_dagger_norm = 1;
    std::size_t n_samples = 0, n_pairs = 0;
};

template <class T>
ConstantEstimates estimate_constants(PairedModel<T>& m, const PairedDataset<T>& val,
                                     std::size_t pair_samples, std::uint64_t seed = 7) {
    const std::size_t N = val.size();
    if (N < 2) throw ContractError("estimate_constants: need at least 2 samples");
    ConstantEstimates c;
    c.n_samples = N;
    const std::size_t nz = val.models.shape[1], nx = val.models.shape[2];

    // Per-sample forward passes, cached for the pairwise ratios.
    std::vector<Tensor<T>> q_in(N), q_ae(N), b_in(N), z_b(N), q_lfe(N), b_sur(N);
    for (std::size_t i = 0; i < N; ++i) {
        Tensor<T> q = val.model_at(i);
        q.shape = {1, 1, nz, nx};
        Tensor<T> b = val.data_at(i);
        b.shape = {1, b.shape[0], b.shape[1], b.shape[2]};
        q_in[i] = q;
        b_in[i] = b;
        q_ae[i] = m.decode_model(m.encode_model(q));
        z_b[i] = m.encode_data(b);
        q_lfe[i] = m.decode_model(m.latent_map_dagger(z_b[i]));
        b_sur[i] = m.surrogate_forward(q);
    }

    auto diff_norm = [](const Tensor<T>& a, const Tensor<T>& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
            s += d * d;
        }
        return std::sqrt(s);
    };

    for (std::size_t i = 0; i < N; ++i) {
        c.xi_q = std::max(c.xi_q, diff_norm(q_ae[i], q_in[i]));
        c.delta = std::max(c.delta, diff_norm(b_sur[i], b_in[i]));
        c.eps_q = std::max(c.eps_q, diff_norm(q_lfe[i], q_in[i]));
        // data-side latent roundtrip xi_b = max ||E_b(D_b(z)) - z||
        Tensor<T> b_dec = m.decode_data(z_b[i]);
        Tensor<T> z_rt = m.encode_data(b_dec);
        c.xi_b = std::max(c.xi_b, diff_norm(z_rt, z_b[i]));
        if (!m.meta.identity_maps) {
            Tensor<T> z_mm = m.latent_map_dagger(m.latent_map(z_b[i]));
            c.xi_M = std::max(c.xi_M, diff_norm(z_mm, z_b[i]));
        }
    }
    c.xi_M = m.meta.identity_maps ? 0.0 : c.xi_M;
    c.M_dagger_norm = 1.0;  // identity default; learned maps are out of scope here

    Rng rng(seed);
    c.n_pairs = pair_samples;
    for (std::size_t k = 0; k < pair_samples; ++k) {
        const std::size_t i = rng.uniform_int(0, N - 1);
        std::size_t j = rng.uniform_int(0, N - 2);
        if (j >= i) ++j;
        const double dq = diff_norm(q_in[i], q_in[j]);
        const double db = diff_norm(b_in[i], b_in[j]);
        const double dz = diff_norm(z_b[i], z_b[j]);
        if (dq > 0) {
            c.L = std::max(c.L, db / dq);
            c.L_ae = std::max(c.L_ae, diff_norm(q_ae[i], q_ae[j]) / dq);
        }
        if (db > 0) c.L_b = std::max(c.L_b, dz / db);
        if (dz > 0) c.L_q = std::max(c.L_q, diff_norm(q_lfe[i], q_lfe[j]) / dz);
    }
    return c;
}

struct BoundRow {
    std::size_t sample = 0;
    double residual = 0;       // ||F(q_hat) - b||, one true simulate call
    double bound1 = 0;         // L*eps_q + sigma*sqrt(dim)
    bool bound1_holds = false;
    double bound2 = 0;         // ||F(q_hat) - b_hat|| + ||b_hat - b||
    bool bound2_holds = false;
    double model_err = 0;      // ||q_hat - q_true||
    double prop2_bound = 0;
    bool prop2_applicable = false;
    bool prop2_holds = false;
    double theorem_bound = 0;
    bool theorem_holds = false;
};

// Per-sample bound checks on a ground-truthed test set. Uses exactly one
// simulate call per sample (for the true residual). Triangle-inequality
// comparisons allow 1e-12 relative slack for floating-point norm roundoff.
template <class T>
std::vector<BoundRow> bound_report(PairedModel<T>& m, const PairedDataset<T>& test,
                                   const ConstantEstimates& c, const Grid2D& grid,
                                   const Acquisition& acq, double clamp_lo, double clamp_hi) {
    const std::size_t N = test.size();
    const std::size_t nz = test.models.shape[1], nx = test.models.shape[2];
    const double eps_noise =
        test.noise_sigma * std::sqrt(static_cast<double>(acq.n_src() * acq.n_rec() * acq.nt));
    const double theorem =
        c.L_q * (c.M_dagger_norm * (c.L_b * c.delta + c.xi_b) + c.xi_M) + c.xi_q;

    std::vector<BoundRow> rows;
    rows.reserve(N);
    for (std::size_t s = 0; s < N; ++s) {
        BoundRow r;
        r.sample = s;
        Tensor<T> q_true = test.model_at(s);
        Tensor<T> b = test.data_at(s);
        Tensor<T> b1 = b;
        b1.shape = {1, b.shape[0], b.shape[1], b.shape[2]};
        Tensor<T> q_hat1 = m.lfe(b1);
        Tensor<T> b_hat1 = m.surrogate_forward(q_hat1);

        Tensor<T> q_hat = q_hat1;
        q_hat.shape = {nz, nx};
        VelocityModel<T> qm;
        qm.grid = grid;
        qm.qsq = q_hat;
        for (auto& v : qm.qsq.data)
            v = static_cast<T>(std::clamp(static_cast<double>(v), clamp_lo, clamp_hi));
        Tensor<T> f = simulate(qm, acq);

        auto nrm = [](const Tensor<T>& a, const Tensor<T>& bb) {
            double acc = 0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double d = static_cast<double>(a[i]) - static_cast<double>(bb[i]);
                acc += d * d;
            }
            return std::sqrt(acc);
        };
        Tensor<T> b_hat = b_hat1;
        b_hat.shape = b.shape;
        Tensor<T> f3 = f;
        f3.shape = b.shape;
        r.residual = nrm(f3, b);
        r.bound1 = c.L * c.eps_q + eps_noise;
        r.bound1_holds = r.residual <= r.bound1 * (1 + 1e-12);
        r.bound2 = nrm(f3, b_hat) + nrm(b_hat, b);
        r.bound2_holds = r.residual <= r.bound2 * (1 + 1e-12);

        Tensor<T> qh_clamped = qm.qsq;
        r.model_err = nrm(qh_clamped, q_true);
        // Prop 2: 1/(1-L_ae) * (||q_hat - AE(q_hat)|| + ||AE(q_true) - q_true||)
        Tensor<T> q_true1 = q_true;
        q_true1.shape = {1, 1, nz, nx};
        Tensor<T> qh_ae = m.decode_model(m.encode_model(q_hat1));
        Tensor<T> qt_ae = m.decode_model(m.encode_model(q_true1));
        r.prop2_applicable = c.L_ae < 1.0;
        if (r.prop2_applicable) {
            r.prop2_bound =
                (nrm(qh_ae, q_hat1) + nrm(qt_ae, q_true1)) / (1.0 - c.L_ae);
            r.prop2_holds = r.model_err <= r.prop2_bound * (1 + 1e-12);
        }
        r.theorem_bound = theorem;
        r.theorem_holds = r.model_err <= theorem * (1 + 1e-12);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace pinv
