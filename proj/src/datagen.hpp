#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "container.hpp"
#include "rng.hpp"
#include "wave.hpp"

namespace pinv {

enum class ModelFamily { FlatLayers, CurvedLayers, FaultedLayers };

inline const char* family_name(ModelFamily f) {
    switch (f) {
        case ModelFamily::FlatLayers: return "flat_layers";
        case ModelFamily::CurvedLayers: return "curved_layers";
        case ModelFamily::FaultedLayers: return "faulted_layers";
    }
    return "?";
}

inline ModelFamily family_from_name(const std::string& s) {
    if (s == "flat_layers") return ModelFamily::FlatLayers;
    if (s == "curved_layers") return ModelFamily::CurvedLayers;
    if (s == "faulted_layers") return ModelFamily::FaultedLayers;
    throw ContractError("unknown model family '" + s + "'");
}

// Synthetic layered-velocity families. flat/faulted use a velocity profile
// increasing with depth; curved uses a decreasing profile with sinusoidal
// interfaces, which keeps the families structurally separated for the OOD
// experiment.
struct ModelStyle {
    ModelFamily family = ModelFamily::FlatLayers;
    int min_layers = 4, max_layers = 8;
    double c_min = 1500, c_max = 4000;  // m/s
    double curve_amp = 6;               // interface sine amplitude, cells
    double fault_throw = 10;            // max vertical throw, cells

    void validate() const {
        if (c_min <= 0 || c_min >= c_max) throw ContractError("ModelStyle: need 0 < c_min < c_max");
        if (min_layers < 1 || max_layers < min_layers)
            throw ContractError("ModelStyle: bad layer-count range");
    }
};

// Piecewise-constant layered model; qsq = c^2 within [c_min^2, c_max^2].
template <class T>
VelocityModel<T> sample_model(const ModelStyle& style, const Grid2D& grid, Rng& rng) {
    style.validate();
    grid.validate();
    const int nz = grid.nz, nx = grid.nx;
    const int k = static_cast<int>(rng.uniform_int(style.min_layers, style.max_layers));

    // Layer velocities jittered around a depth ramp; curved family inverts
    // the ramp so its mean profile differs strongly from the other families.
    std::vector<double> vel(k);
    const bool inverted = style.family == ModelFamily::CurvedLayers;
    for (int j = 0; j < k; ++j) {
        double frac = (j + 0.25 + 0.5 * rng.uniform()) / k;
        if (inverted) frac = 1.0 - frac;
        vel[j] = style.c_min + (style.c_max - style.c_min) * frac;
    }

    // Interface base depths: stratified random within equal slabs.
    std::vector<double> base(k - 1);
    for (int j = 0; j + 1 < k; ++j)
        base[j] = nz * (j + 1 + 0.6 * (rng.uniform() - 0.5)) / k;

    const double amp =
        style.family == ModelFamily::CurvedLayers ? rng.uniform(2.0, std::max(2.0, style.curve_amp))
                                                  : 0.0;
    const double cycles = rng.uniform(1.0, 2.0);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const int fault_x = style.family == ModelFamily::FaultedLayers
                            ? static_cast<int>(rng.uniform_int(nx / 4, 3 * nx / 4))
                            : nx;
    const double throw_cells =
        style.family == ModelFamily::FaultedLayers ? rng.uniform(3.0, std::max(3.0, style.fault_throw))
                                                   : 0.0;

    VelocityModel<T> m;
    m.grid = grid;
    m.qsq = Tensor<T>({(std::size_t)nz, (std::size_t)nx});
    for (int ix = 0; ix < nx; ++ix) {
        const double wobble = amp * std::sin(6.283185307179586 * cycles * ix / nx + phase);
        const double shift = ix >= fault_x ? throw_cells : 0.0;
        for (int iz = 0; iz < nz; ++iz) {
            int layer = 0;
            while (layer < k - 1 && iz >= base[layer] + wobble + shift) ++layer;
            const double c = vel[layer];
            m.qsq[iz * nx + ix] = static_cast<T>(c * c);
        }
    }
    return m;
}

// b = simulate(q) + sigma * N(0, 1), elementwise i.i.d.
template <class T>
Tensor<T> synthesize_pair(const VelocityModel<T>& q, const Acquisition& acq, double sigma,
                          Rng& rng) {
    if (sigma < 0) throw ContractError("synthesize_pair: sigma must be nonnegative");
    Tensor<T> b = simulate(q, acq);
    if (sigma > 0)
        for (auto& v : b.data) v += static_cast<T>(sigma * rng.normal());
    return b;
}

// In-memory paired dataset. models: [N, nz, nx] (qsq); data: [N, ns, nr, nt].
template <class T>
struct PairedDataset {
    Tensor<T> models;
    Tensor<T> data;
    double noise_sigma = 0;
    std::string split;  // "train" | "val" | "test" | "ood"

    std::size_t size() const { return models.shape.empty() ? 0 : models.shape[0]; }

    Tensor<T> model_at(std::size_t i) const {
        const std::size_t nz = models.shape[1], nx = models.shape[2];
        Tensor<T> q({nz, nx});
        std::copy(models.data.begin() + i * nz * nx, models.data.begin() + (i + 1) * nz * nx,
                  q.data.begin());
        return q;
    }
    Tensor<T> data_at(std::size_t i) const {
        const std::size_t m = data.shape[1] * data.shape[2] * data.shape[3];
        Tensor<T> b({data.shape[1], data.shape[2], data.shape[3]});
        std::copy(data.data.begin() + i * m, data.data.begin() + (i + 1) * m, b.data.begin());
        return b;
    }
};

// Noise level as a fraction of the mean absolute clean amplitude of a pilot
// simulation (model drawn from stream 0 of the seed).
template <class T>
double auto_sigma(const ModelStyle& style, const Grid2D& grid, const Acquisition& acq,
                  std::uint64_t seed, double sigma_rel) {
    Rng root(seed);
    Rng r0 = root.stream(0);
    VelocityModel<T> q = sample_model<T>(style, grid, r0);
    Tensor<T> b = simulate(q, acq);
    double mean_abs = 0;
    for (T v : b.data) mean_abs += std::abs(static_cast<double>(v));
    mean_abs /= b.size();
    return sigma_rel * mean_abs;
}

// n independent pairs, deterministic in seed; pair i uses rng stream i+1
// (stream 0 is reserved for the sigma pilot).
template <class T>
PairedDataset<T> build_dataset(std::size_t n, const ModelStyle& style, const Grid2D& grid,
                               const Acquisition& acq, double sigma, std::uint64_t seed) {
    if (n < 1) throw ContractError("build_dataset: n must be >= 1");
    Rng root(seed);
    PairedDataset<T> ds;
    ds.noise_sigma = sigma;
    ds.models = Tensor<T>({n, (std::size_t)grid.nz, (std::size_t)grid.nx});
    ds.data = Tensor<T>({n, acq.n_src(), acq.n_rec(), (std::size_t)acq.nt});
    const std::size_t msz = (std::size_t)grid.nz * grid.nx;
    const std::size_t dsz = acq.n_src() * acq.n_rec() * acq.nt;
    for (std::size_t i = 0; i < n; ++i) {
        Rng ri = root.stream(i + 1);
        VelocityModel<T> q = sample_model<T>(style, grid, ri);
        Tensor<T> b = synthesize_pair(q, acq, sigma, ri);
        std::copy(q.qsq.data.begin(), q.qsq.data.end(), ds.models.data.begin() + i * msz);
        std::copy(b.data.begin(), b.data.end(), ds.data.data.begin() + i * dsz);
    }
    return ds;
}

constexpr std::size_t kShardPairs = 256;

// Shard the dataset into containers of at most kShardPairs pairs and write a
// manifest JSON naming them.
template <class T>
void save_dataset(const std::string& dir, const PairedDataset<T>& ds, const nlohmann::json& extra) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t n = ds.size();
    const std::size_t n_shards = (n + kShardPairs - 1) / kShardPairs;
    const std::size_t msz = ds.models.shape[1] * ds.models.shape[2];
    const std::size_t dsz = ds.data.shape[1] * ds.data.shape[2] * ds.data.shape[3];
    nlohmann::json shards = nlohmann::json::array();
    for (std::size_t s = 0; s < n_shards; ++s) {
        const std::size_t lo = s * kShardPairs, hi = std::min(n, lo + kShardPairs);
        const std::size_t cnt = hi - lo;
        Tensor<T> mm({cnt, ds.models.shape[1], ds.models.shape[2]});
        Tensor<T> dd({cnt, ds.data.shape[1], ds.data.shape[2], ds.data.shape[3]});
        std::copy(ds.models.data.begin() + lo * msz, ds.models.data.begin() + hi * msz,
                  mm.data.begin());
        std::copy(ds.data.data.begin() + lo * dsz, ds.data.data.begin() + hi * dsz,
                  dd.data.begin());
        char name[32];
        std::snprintf(name, sizeof name, "shard_%03zu.pairinv", s);
        Container c;
        c.put("models", mm);
        c.put("data", dd);
        c.meta["shard"] = s;
        save_container((fs::path(dir) / name).string(), c);
        shards.push_back(name);
    }
    nlohmann::json man;
    man["n"] = n;
    man["noise_sigma"] = ds.noise_sigma;
    man["split"] = ds.split;
    man["shards"] = shards;
    man["nz"] = ds.models.shape[1];
    man["nx"] = ds.models.shape[2];
    man["extra"] = extra;
    std::ofstream f(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!f) throw FormatError("save_dataset: cannot write manifest in " + dir);
    f << man.dump(2) << "\n";
}

template <class T>
PairedDataset<T> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string mpath = (fs::path(dir) / "manifest.json").string();
    std::ifstream f(mpath, std::ios::binary);
    if (!f) throw FormatError("load_dataset: cannot open manifest '" + mpath + "'");
    nlohmann::json man;
    try {
        f >> man;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_dataset: bad manifest '" + mpath + "': " + e.what());
    }
    PairedDataset<T> ds;
    ds.noise_sigma = man.at("noise_sigma");
    ds.split = man.at("split");
    const std::size_t n = man.at("n");
    bool first = true;
    std::size_t filled = 0;
    for (const auto& name : man.at("shards")) {
        Container c = load_container((fs::path(dir) / name.get<std::string>()).string());
        Tensor<T> mm = c.get("models").as<T>();
        Tensor<T> dd = c.get("data").as<T>();
        if (first) {
            ds.models = Tensor<T>({n, mm.shape[1], mm.shape[2]});
            ds.data = Tensor<T>({n, dd.shape[1], dd.shape[2], dd.shape[3]});
            first = false;
        }
        if (filled + mm.shape[0] > n) throw FormatError("load_dataset: shards exceed manifest n");
        std::copy(mm.data.begin(), mm.data.end(),
                  ds.models.data.begin() + filled * mm.shape[1] * mm.shape[2]);
        std::copy(dd.data.begin(), dd.data.end(),
                  ds.data.data.begin() + filled * dd.shape[1] * dd.shape[2] * dd.shape[3]);
        filled += mm.shape[0];
    }
    if (filled != n) throw FormatError("load_dataset: manifest n does not match shard contents");
    return ds;
}

}  // namespace pinv
