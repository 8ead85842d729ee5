#pragma once

#include <atomic>
#include <functional>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace pinv {

// Forward-solver call accounting, used to assert the likelihood-free property.
struct SolverCounters {
    static std::atomic<std::uint64_t>& sim() {
        static std::atomic<std::uint64_t> c{0};
        return c;
    }
    static std::atomic<std::uint64_t>& grad() {
        static std::atomic<std::uint64_t> c{0};
        return c;
    }
    static std::uint64_t total() { return sim().load() + grad().load(); }
    static void reset() {
        sim().store(0);
        grad().store(0);
    }
};

struct Grid2D {
    int nz = 0, nx = 0;
    double dz = 0, dx = 0;

    void validate() const {
        if (nz < 16 || nx < 16) throw ContractError("Grid2D: nz, nx must be >= 16");
        if (dz <= 0 || dx <= 0) throw ContractError("Grid2D: spacing must be positive");
    }
};

// Squared acoustic velocity field q = c^2 on the interior grid.
template <class T>
struct VelocityModel {
    Grid2D grid;
    Tensor<T> qsq;  // [nz, nx], m^2/s^2

    double c_max() const {
        double m = 0;
        for (T v : qsq.data) m = std::max(m, static_cast<double>(v));
        return std::sqrt(m);
    }
    double c_min() const {
        double m = 1e30;
        for (T v : qsq.data) m = std::min(m, static_cast<double>(v));
        return std::sqrt(m);
    }
};

struct Acquisition {
    std::vector<std::pair<int, int>> sources;    // (iz, ix) interior indices
    std::vector<std::pair<int, int>> receivers;  // (iz, ix) interior indices
    int nt = 0;
    double dt = 0;
    std::vector<double> wavelet;  // length nt
    double source_scale = 1.0;

    std::size_t n_src() const { return sources.size(); }
    std::size_t n_rec() const { return receivers.size(); }

    void validate(const Grid2D& g) const {
        if (nt < 1 || dt <= 0) throw ContractError("Acquisition: nt and dt must be positive");
        if (static_cast<int>(wavelet.size()) != nt)
            throw ContractError("Acquisition: wavelet length must equal nt");
        auto inside = [&](const std::pair<int, int>& p) {
            return p.first >= 0 && p.first < g.nz && p.second >= 0 && p.second < g.nx;
        };
        for (const auto& p : sources)
            if (!inside(p)) throw ContractError("Acquisition: source outside grid");
        for (const auto& p : receivers)
            if (!inside(p)) throw ContractError("Acquisition: receiver outside grid");
    }
};

// w(t) = (1 - 2 pi^2 f^2 (t-t0)^2) exp(-pi^2 f^2 (t-t0)^2), sampled at k*dt.
inline std::vector<double> ricker(double f_peak, int nt, double dt, double t0) {
    if (f_peak <= 0) throw ContractError("ricker: f_peak must be positive");
    if (t0 < 0) throw ContractError("ricker: t0 must be nonnegative");
    std::vector<double> w(nt);
    const double pf = 3.14159265358979323846 * f_peak;
    for (int k = 0; k < nt; ++k) {
        const double t = k * dt - t0;
        const double a = pf * pf * t * t;
        w[k] = (1.0 - 2.0 * a) * std::exp(-a);
    }
    return w;
}

struct CflResult {
    bool ok = false;
    double ratio = 0;  // c_max*dt / min(dz,dx)
};

template <class T>
CflResult cfl_check(const VelocityModel<T>& q, double dt, const Grid2D& grid) {
    CflResult r;
    r.ratio = q.c_max() * dt / std::min(grid.dz, grid.dx);
    r.ok = r.ratio <= 1.0 / std::sqrt(2.0);
    return r;
}

constexpr int kSpongeWidth = 20;

namespace wavedetail {

// Padded-grid workspace: q replicated into the sponge, Cerjan damping profile.
template <class T>
struct Workspace {
    int Nz, Nx;  // padded extents
    int nz, nx;
    double dz, dx, dt;
    std::vector<double> q;     // padded, row-major
    std::vector<double> damp;  // per-cell damping factor g
    double inv_dz2, inv_dx2;

    Workspace(const VelocityModel<T>& vm, double dt_) {
        vm.grid.validate();
        nz = vm.grid.nz;
        nx = vm.grid.nx;
        dz = vm.grid.dz;
        dx = vm.grid.dx;
        dt = dt_;
        Nz = nz + 2 * kSpongeWidth;
        Nx = nx + 2 * kSpongeWidth;
        inv_dz2 = 1.0 / (dz * dz);
        inv_dx2 = 1.0 / (dx * dx);
        q.resize(static_cast<std::size_t>(Nz) * Nx);
        damp.assign(q.size(), 1.0);
        for (int i = 0; i < Nz; ++i)
            for (int j = 0; j < Nx; ++j) {
                const int iz = std::clamp(i - kSpongeWidth, 0, nz - 1);
                const int ix = std::clamp(j - kSpongeWidth, 0, nx - 1);
                q[idx(i, j)] = static_cast<double>(vm.qsq[iz * nx + ix]);
                const int dzc =
                    std::max(0, std::max(kSpongeWidth - i, i - (Nz - 1 - kSpongeWidth)));
                const int dxc =
                    std::max(0, std::max(kSpongeWidth - j, j - (Nx - 1 - kSpongeWidth)));
                const int d = std::max(dzc, dxc);
                if (d > 0) {
                    const double a = 0.015 * d;
                    damp[idx(i, j)] = std::exp(-a * a);
                }
            }
    }

    std::size_t cells() const { return q.size(); }
    std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i) * Nx + j; }
    std::size_t pidx(const std::pair<int, int>& p) const {
        return idx(p.first + kSpongeWidth, p.second + kSpongeWidth);
    }

    // 5-point Laplacian with zero Dirichlet values at the padded boundary.
    void laplacian(const std::vector<double>& u, std::vector<double>& out) const {
        std::fill(out.begin(), out.end(), 0.0);
        for (int i = 1; i < Nz - 1; ++i) {
            const double* um = &u[idx(i - 1, 0)];
            const double* uc = &u[idx(i, 0)];
            const double* up = &u[idx(i + 1, 0)];
            double* o = &out[idx(i, 0)];
            for (int j = 1; j < Nx - 1; ++j)
                o[j] = (um[j] - 2.0 * uc[j] + up[j]) * inv_dz2 +
                       (uc[j - 1] - 2.0 * uc[j] + uc[j + 1]) * inv_dx2;
        }
    }

    // Transpose of the edge-replication padding of q.
    template <class U>
    void fold_to_interior(const std::vector<double>& gpad, Tensor<U>& gint) const {
        gint = Tensor<U>({(std::size_t)nz, (std::size_t)nx});
        for (int i = 0; i < Nz; ++i)
            for (int j = 0; j < Nx; ++j) {
                const int iz = std::clamp(i - kSpongeWidth, 0, nz - 1);
                const int ix = std::clamp(j - kSpongeWidth, 0, nx - 1);
                gint[iz * nx + ix] += static_cast<U>(gpad[idx(i, j)]);
            }
    }

    // Replicate an interior field into the sponge (the padding map P).
    template <class U>
    std::vector<double> pad_interior(const Tensor<U>& f) const {
        std::vector<double> out(q.size());
        for (int i = 0; i < Nz; ++i)
            for (int j = 0; j < Nx; ++j) {
                const int iz = std::clamp(i - kSpongeWidth, 0, nz - 1);
                const int ix = std::clamp(j - kSpongeWidth, 0, nx - 1);
                out[idx(i, j)] = static_cast<double>(f[iz * nx + ix]);
            }
        return out;
    }
};

// One source: forward sweep storing z_n = L u_n - s_n, then the adjoint sweep
// driven by time-reversed data-space injections, accumulating the padded-grid
// q-gradient. `inject(n, r)` supplies the adjoint source; `observe(n, r, u)`
// sees the receiver samples of the forward field.
template <class T>
void forward_adjoint_one_source(const Workspace<T>& ws, const Acquisition& acq, std::size_t j,
                                const std::function<void(std::size_t, std::size_t, double)>& observe,
                                const std::function<double(std::size_t, std::size_t)>& inject,
                                std::vector<double>& grad_pad) {
    const std::size_t cells = ws.cells(), nr = acq.n_rec(), nt = acq.nt;
    const double dt2 = acq.dt * acq.dt;
    std::vector<double> z_all(cells * nt);
    std::vector<double> u_prev(cells, 0.0), u_cur(cells, 0.0), lap(cells);
    const std::size_t src = ws.pidx(acq.sources[j]);

    for (std::size_t n = 0; n < nt; ++n) {
        if (observe)
            for (std::size_t r = 0; r < nr; ++r) observe(n, r, u_cur[ws.pidx(acq.receivers[r])]);
        double* z = &z_all[n * cells];
        // Same laplacian routine as simulate() so the recomputed field (and
        // hence the residual) is bit-identical to the original synthesis.
        ws.laplacian(u_cur, lap);
        std::copy(lap.begin(), lap.end(), z);
        z[src] -= acq.wavelet[n] * acq.source_scale;
        for (std::size_t p = 0; p < cells; ++p) {
            const double g = ws.damp[p];
            const double un = g * (2.0 * u_cur[p] - g * u_prev[p] + dt2 * ws.q[p] * z[p]);
            u_prev[p] = u_cur[p];
            u_cur[p] = un;
        }
    }
    for (double v : u_cur)
        if (!std::isfinite(v))
            throw NumericError("wave solver: field blow-up for source " + std::to_string(j));

    // Reverse sweep. With ubar_n = dPhi/du_n:
    //   ubar_n = scatter(inject_n) + 2 g.*l_a + dt^2 L(q.*g.*l_a) - g^2.*l_b
    // where l_a = ubar_{n+1}, l_b = ubar_{n+2}, and the q-gradient accumulates
    // ubar_{n+1} .* g .* dt^2 .* z_n.
    std::vector<double> l_a(cells, 0.0), l_b(cells, 0.0), tmp(cells), lap_t(cells), ubar(cells);
    for (std::size_t n = nt; n-- > 0;) {
        const double* z = &z_all[n * cells];
        for (std::size_t p = 0; p < cells; ++p) grad_pad[p] += l_a[p] * ws.damp[p] * dt2 * z[p];
        for (std::size_t p = 0; p < cells; ++p) tmp[p] = ws.q[p] * ws.damp[p] * l_a[p];
        ws.laplacian(tmp, lap_t);
        for (std::size_t p = 0; p < cells; ++p) {
            const double g = ws.damp[p];
            ubar[p] = 2.0 * g * l_a[p] + dt2 * lap_t[p] - g * g * l_b[p];
        }
        for (std::size_t r = 0; r < nr; ++r) ubar[ws.pidx(acq.receivers[r])] += inject(n, r);
        l_b.swap(l_a);
        l_a.swap(ubar);
    }
}

}  // namespace wavedetail

// Second-order leapfrog on the padded grid with Cerjan sponge damping:
//   u_{n+1} = g .* (2 u_n - g .* u_{n-1} + dt^2 q .* (L u_n - s_n))
// Receivers sample u_n at the start of step n, so trace sample n is u(n*dt).
// If `interior_energy` is given, the discrete field energy of the first
// source's wavefield inside the sponge-free interior is recorded per step.
template <class T>
Tensor<T> simulate(const VelocityModel<T>& q, const Acquisition& acq,
                   std::vector<double>* interior_energy = nullptr) {
    acq.validate(q.grid);
    CflResult cfl = cfl_check(q, acq.dt, q.grid);
    if (!cfl.ok)
        throw ContractError("simulate: CFL violation, ratio " + std::to_string(cfl.ratio) +
                            " > 0.7071");
    SolverCounters::sim().fetch_add(1);

    wavedetail::Workspace<T> ws(q, acq.dt);
    const std::size_t ns = acq.n_src(), nr = acq.n_rec(), nt = acq.nt;
    Tensor<T> cube({ns, nr, nt});
    const double dt2 = acq.dt * acq.dt;
    std::vector<double> u_prev(ws.cells()), u_cur(ws.cells()), lap(ws.cells());

    for (std::size_t j = 0; j < ns; ++j) {
        std::fill(u_prev.begin(), u_prev.end(), 0.0);
        std::fill(u_cur.begin(), u_cur.end(), 0.0);
        const std::size_t src = ws.pidx(acq.sources[j]);
        for (std::size_t n = 0; n < nt; ++n) {
            for (std::size_t r = 0; r < nr; ++r)
                cube[(j * nr + r) * nt + n] = static_cast<T>(u_cur[ws.pidx(acq.receivers[r])]);
            if (interior_energy && j == 0) {
                double e = 0;
                for (int i = 0; i < ws.nz; ++i)
                    for (int k = 0; k < ws.nx; ++k) {
                        const std::size_t p = ws.idx(i + kSpongeWidth, k + kSpongeWidth);
                        const double ut = (u_cur[p] - u_prev[p]) / acq.dt;
                        e += 0.5 / ws.q[p] * ut * ut;
                        if (i + 1 < ws.nz) {
                            const double uz =
                                (u_cur[ws.idx(i + 1 + kSpongeWidth, k + kSpongeWidth)] - u_cur[p]) /
                                ws.dz;
                            e += 0.5 * uz * uz;
                        }
                        if (k + 1 < ws.nx) {
                            const double ux =
                                (u_cur[ws.idx(i + kSpongeWidth, k + 1 + kSpongeWidth)] - u_cur[p]) /
                                ws.dx;
                            e += 0.5 * ux * ux;
                        }
                    }
                interior_energy->push_back(e);
            }
            ws.laplacian(u_cur, lap);
            lap[src] -= acq.wavelet[n] * acq.source_scale;
            for (std::size_t p = 0; p < u_cur.size(); ++p) {
                const double g = ws.damp[p];
                const double un = g * (2.0 * u_cur[p] - g * u_prev[p] + dt2 * ws.q[p] * lap[p]);
                u_prev[p] = u_cur[p];
                u_cur[p] = un;
            }
        }
        for (double v : u_cur)
            if (!std::isfinite(v))
                throw NumericError("simulate: field blow-up for source " + std::to_string(j));
    }
    if (!cube.all_finite()) throw NumericError("simulate: non-finite data");
    return cube;
}

// phi = 1/2 ||simulate(q) - b_obs||^2 and its exact gradient w.r.t. the
// interior qsq field (discretize-then-optimize adjoint of the damped leapfrog).
template <class T>
std::pair<double, Tensor<T>> misfit_and_gradient(const VelocityModel<T>& q, const Acquisition& acq,
                                                 const Tensor<T>& b_obs) {
    acq.validate(q.grid);
    if (!cfl_check(q, acq.dt, q.grid).ok) throw ContractError("misfit_and_gradient: CFL violation");
    const std::size_t ns = acq.n_src(), nr = acq.n_rec(), nt = acq.nt;
    b_obs.require_shape({ns, nr, nt}, "misfit_and_gradient: b_obs");
    SolverCounters::grad().fetch_add(1);

    wavedetail::Workspace<T> ws(q, acq.dt);
    std::vector<double> grad_pad(ws.cells(), 0.0);
    double phi = 0;
    std::vector<double> resid(nr * nt);
    for (std::size_t j = 0; j < ns; ++j) {
        wavedetail::forward_adjoint_one_source<T>(
            ws, acq, j,
            [&](std::size_t n, std::size_t r, double u) {
                // Quantize to T first: simulate() stores T samples, so the
                // residual is exactly zero when b_obs came from this model.
                const double rr = static_cast<double>(static_cast<T>(u)) -
                                  static_cast<double>(b_obs[(j * nr + r) * nt + n]);
                resid[n * nr + r] = rr;
                phi += 0.5 * rr * rr;
            },
            [&](std::size_t n, std::size_t r) { return resid[n * nr + r]; }, grad_pad);
    }
    Tensor<T> grad;
    ws.fold_to_interior(grad_pad, grad);
    if (!grad.all_finite()) throw NumericError("misfit_and_gradient: non-finite gradient");
    return {phi, grad};
}

// Linearized (Born) forward: directional derivative of simulate along dq.
template <class T>
Tensor<T> born_apply(const VelocityModel<T>& q, const Acquisition& acq, const Tensor<T>& dq) {
    acq.validate(q.grid);
    if (!cfl_check(q, acq.dt, q.grid).ok) throw ContractError("born_apply: CFL violation");
    dq.require_shape({(std::size_t)q.grid.nz, (std::size_t)q.grid.nx}, "born_apply: dq");
    SolverCounters::sim().fetch_add(1);

    wavedetail::Workspace<T> ws(q, acq.dt);
    const std::size_t cells = ws.cells();
    const std::size_t ns = acq.n_src(), nr = acq.n_rec(), nt = acq.nt;
    const double dt2 = acq.dt * acq.dt;
    std::vector<double> dq_pad = ws.pad_interior(dq);
    Tensor<T> out({ns, nr, nt});

    std::vector<double> u_prev(cells), u_cur(cells), z(cells);
    std::vector<double> du_prev(cells), du_cur(cells), dlap(cells);
    for (std::size_t j = 0; j < ns; ++j) {
        std::fill(u_prev.begin(), u_prev.end(), 0.0);
        std::fill(u_cur.begin(), u_cur.end(), 0.0);
        std::fill(du_prev.begin(), du_prev.end(), 0.0);
        std::fill(du_cur.begin(), du_cur.end(), 0.0);
        const std::size_t src = ws.pidx(acq.sources[j]);
        for (std::size_t n = 0; n < nt; ++n) {
            for (std::size_t r = 0; r < nr; ++r)
                out[(j * nr + r) * nt + n] = static_cast<T>(du_cur[ws.pidx(acq.receivers[r])]);
            ws.laplacian(u_cur, z);
            z[src] -= acq.wavelet[n] * acq.source_scale;
            ws.laplacian(du_cur, dlap);
            for (std::size_t p = 0; p < cells; ++p) {
                const double g = ws.damp[p];
                const double un = g * (2.0 * u_cur[p] - g * u_prev[p] + dt2 * ws.q[p] * z[p]);
                const double dun = g * (2.0 * du_cur[p] - g * du_prev[p] +
                                        dt2 * (ws.q[p] * dlap[p] + dq_pad[p] * z[p]));
                u_prev[p] = u_cur[p];
                u_cur[p] = un;
                du_prev[p] = du_cur[p];
                du_cur[p] = dun;
            }
        }
    }
    return out;
}

// Adjoint of born_apply: J^T v for a data-space vector v.
template <class T>
Tensor<T> born_adjoint(const VelocityModel<T>& q, const Acquisition& acq, const Tensor<T>& v) {
    acq.validate(q.grid);
    if (!cfl_check(q, acq.dt, q.grid).ok) throw ContractError("born_adjoint: CFL violation");
    const std::size_t ns = acq.n_src(), nr = acq.n_rec(), nt = acq.nt;
    v.require_shape({ns, nr, nt}, "born_adjoint: v");
    SolverCounters::sim().fetch_add(1);

    wavedetail::Workspace<T> ws(q, acq.dt);
    std::vector<double> grad_pad(ws.cells(), 0.0);
    for (std::size_t j = 0; j < ns; ++j) {
        wavedetail::forward_adjoint_one_source<T>(
            ws, acq, j, nullptr,
            [&](std::size_t n, std::size_t r) {
                return static_cast<double>(v[(j * nr + r) * nt + n]);
            },
            grad_pad);
    }
    Tensor<T> grad;
    ws.fold_to_interior(grad_pad, grad);
    return grad;
}

// |<J dq, v> - <dq, J^T v>| / max(|<J dq, v>|, tiny), random dq and v.
template <class T>
double dot_product_test(const VelocityModel<T>& q, const Acquisition& acq, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<T> dq({(std::size_t)q.grid.nz, (std::size_t)q.grid.nx});
    const double scale = 0.01 * static_cast<double>(q.qsq[0]);
    for (auto& x : dq.data) x = static_cast<T>(scale * rng.normal());
    Tensor<T> v({acq.n_src(), acq.n_rec(), (std::size_t)acq.nt});
    for (auto& x : v.data) x = static_cast<T>(rng.normal());

    Tensor<T> Jdq = born_apply(q, acq, dq);
    Tensor<T> Jtv = born_adjoint(q, acq, v);
    const double lhs = dot(Jdq, v);
    const double rhs = dot(dq, Jtv);
    const double denom = std::max(std::abs(lhs), 1e-300);
    if (std::abs(lhs) < 1e-300 && std::abs(rhs) < 1e-300) return 0.0;
    return std::abs(lhs - rhs) / denom;
}

// Helpers for reporting model errors in velocity units.
template <class T>
Tensor<T> velocity_from_qsq(const Tensor<T>& qsq) {
    Tensor<T> c(qsq.shape);
    for (std::size_t i = 0; i < qsq.size(); ++i)
        c[i] = static_cast<T>(std::sqrt(std::max(0.0, static_cast<double>(qsq[i]))));
    return c;
}

}  // namespace pinv
