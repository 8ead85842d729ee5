#include "config.hpp"

#include <fstream>
#include <initializer_list>

namespace pinv {

namespace {

using nlohmann::json;

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ContractError(std::string("config: ") + where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok)
            throw ContractError(std::string("config: unknown key '") + key + "' in " + where);
    }
}

template <class T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ModelStyle parse_style(const json& j, const char* where) {
    check_keys(j, where,
               {"family", "min_layers", "max_layers", "c_min", "c_max", "curve_amp",
                "fault_throw"});
    ModelStyle s;
    if (j.contains("family")) s.family = family_from_name(j.at("family").get<std::string>());
    get(j, "min_layers", s.min_layers);
    get(j, "max_layers", s.max_layers);
    get(j, "c_min", s.c_min);
    get(j, "c_max", s.c_max);
    get(j, "curve_amp", s.curve_amp);
    get(j, "fault_throw", s.fault_throw);
    s.validate();
    return s;
}

}  // namespace

RunConfig RunConfig::parse(const json& j) {
    check_keys(j, "top level",
               {"config_version", "seed", "grid", "acquisition", "style", "ood_style", "data",
                "train", "arch", "inversion", "diagnostics", "paths"});
    if (!j.contains("config_version") || j.at("config_version") != 1)
        throw ContractError("config: missing or unsupported config_version (expected 1)");

    RunConfig c;
    c.ood_style.family = ModelFamily::CurvedLayers;
    get(j, "seed", c.seed);
    if (j.contains("grid")) {
        const json& g = j.at("grid");
        check_keys(g, "grid", {"nz", "nx", "dz", "dx"});
        get(g, "nz", c.grid.nz);
        get(g, "nx", c.grid.nx);
        get(g, "dz", c.grid.dz);
        get(g, "dx", c.grid.dx);
        c.grid.validate();
    }
    if (j.contains("acquisition")) {
        const json& a = j.at("acquisition");
        check_keys(a, "acquisition",
                   {"n_sources", "n_receivers", "nt", "cfl_fraction", "f_peak", "t0",
                    "source_scale", "source_depth", "receiver_depth"});
        get(a, "n_sources", c.acq.n_sources);
        get(a, "n_receivers", c.acq.n_receivers);
        get(a, "nt", c.acq.nt);
        get(a, "cfl_fraction", c.acq.cfl_fraction);
        get(a, "f_peak", c.acq.f_peak);
        get(a, "t0", c.acq.t0);
        get(a, "source_scale", c.acq.source_scale);
        get(a, "source_depth", c.acq.source_depth);
        get(a, "receiver_depth", c.acq.receiver_depth);
        if (c.acq.n_sources < 1 || c.acq.n_receivers < 1 || c.acq.nt < 1)
            throw ContractError("config: acquisition counts must be positive");
        if (c.acq.cfl_fraction <= 0 || c.acq.cfl_fraction >= 1)
            throw ContractError("config: cfl_fraction must be in (0, 1)");
    }
    if (j.contains("style")) c.style = parse_style(j.at("style"), "style");
    if (j.contains("ood_style")) c.ood_style = parse_style(j.at("ood_style"), "ood_style");
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, "data", {"n_train", "n_val", "n_test", "n_ood", "sigma_rel"});
        get(d, "n_train", c.data.n_train);
        get(d, "n_val", c.data.n_val);
        get(d, "n_test", c.data.n_test);
        get(d, "n_ood", c.data.n_ood);
        get(d, "sigma_rel", c.data.sigma_rel);
        if (c.data.sigma_rel < 0) throw ContractError("config: sigma_rel must be >= 0");
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"batch_size", "epochs", "lr", "seed", "coupling", "w_b", "w_q", "w_s"});
        get(t, "batch_size", c.train.batch_size);
        get(t, "epochs", c.train.epochs);
        get(t, "lr", c.train.lr);
        get(t, "seed", c.train.seed);
        if (t.contains("coupling"))
            c.train.coupling = coupling_from_name(t.at("coupling").get<std::string>());
        get(t, "w_b", c.train.w_b);
        get(t, "w_q", c.train.w_q);
        get(t, "w_s", c.train.w_s);
        c.train.validate();
    }
    if (j.contains("arch")) {
        const json& a = j.at("arch");
        check_keys(a, "arch",
                   {"latent_dim", "menc", "denc", "mdec", "ddec", "resnet_h"});
        get(a, "latent_dim", c.arch.latent_dim);
        auto widths = [&](const char* key, int& w1, int& w2, int& w3) {
            if (!a.contains(key)) return;
            const json& v = a.at(key);
            if (!v.is_array() || v.size() != 3)
                throw ContractError(std::string("config: arch.") + key +
                                    " must be a 3-element array");
            w1 = v[0];
            w2 = v[1];
            w3 = v[2];
        };
        widths("menc", c.arch.menc1, c.arch.menc2, c.arch.menc3);
        widths("denc", c.arch.denc1, c.arch.denc2, c.arch.denc3);
        widths("mdec", c.arch.mdec1, c.arch.mdec2, c.arch.mdec3);
        widths("ddec", c.arch.ddec1, c.arch.ddec2, c.arch.ddec3);
        get(a, "resnet_h", c.arch.resnet_h);
        if (c.arch.latent_dim < 1) throw ContractError("config: latent_dim must be positive");
    }
    if (j.contains("inversion")) {
        const json& i = j.at("inversion");
        check_keys(i, "inversion",
                   {"iters", "lr", "alpha", "suite_samples", "method", "start"});
        get(i, "iters", c.inversion.iters);
        get(i, "lr", c.inversion.lr);
        get(i, "alpha", c.inversion.alpha);
        get(i, "suite_samples", c.inversion.suite_samples);
        get(i, "method", c.inversion.method);
        get(i, "start", c.inversion.start);
        if (c.inversion.method != "BI" && c.inversion.method != "LSI")
            throw ContractError("config: inversion.method must be BI or LSI");
        if (c.inversion.start != "basic" && c.inversion.start != "warm")
            throw ContractError("config: inversion.start must be basic or warm");
    }
    if (j.contains("diagnostics")) {
        const json& d = j.at("diagnostics");
        check_keys(d, "diagnostics", {"n_bins", "smooth_sigma", "threshold", "pair_samples"});
        get(d, "n_bins", c.diagnostics.n_bins);
        get(d, "smooth_sigma", c.diagnostics.smooth_sigma);
        get(d, "threshold", c.diagnostics.threshold);
        get(d, "pair_samples", c.diagnostics.pair_samples);
    }
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        check_keys(p, "paths", {"out_dir", "data_dir", "checkpoint"});
        get(p, "out_dir", c.paths.out_dir);
        get(p, "data_dir", c.paths.data_dir);
        get(p, "checkpoint", c.paths.checkpoint);
    }
    // derived sanity: CFL must actually hold at the configured fraction
    if (c.dt() <= 0) throw ContractError("config: derived dt is not positive");
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("config: cannot open config file '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ContractError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return parse(j);
}

Acquisition RunConfig::make_acquisition() const {
    Acquisition a;
    a.nt = acq.nt;
    a.dt = dt();
    a.wavelet = ricker(acq.f_peak, acq.nt, a.dt, ricker_t0());
    a.source_scale = acq.source_scale;
    for (int s = 0; s < acq.n_sources; ++s) {
        const int ix = static_cast<int>((s + 0.5) * grid.nx / acq.n_sources);
        a.sources.emplace_back(acq.source_depth, ix);
    }
    for (int r = 0; r < acq.n_receivers; ++r) {
        const int ix = static_cast<int>((r + 0.5) * grid.nx / acq.n_receivers);
        a.receivers.emplace_back(acq.receiver_depth, ix);
    }
    a.validate(grid);
    return a;
}

ArchMeta RunConfig::make_arch_meta() const {
    ArchMeta m;
    m.nz = grid.nz;
    m.nx = grid.nx;
    m.ns = acq.n_sources;
    m.nr = acq.n_receivers;
    m.nt = acq.nt;
    m.latent_dim = arch.latent_dim;
    m.menc1 = arch.menc1;
    m.menc2 = arch.menc2;
    m.menc3 = arch.menc3;
    m.denc1 = arch.denc1;
    m.denc2 = arch.denc2;
    m.denc3 = arch.denc3;
    m.mdec1 = arch.mdec1;
    m.mdec2 = arch.mdec2;
    m.mdec3 = arch.mdec3;
    m.ddec1 = arch.ddec1;
    m.ddec2 = arch.ddec2;
    m.ddec3 = arch.ddec3;
    m.resnet_h = arch.resnet_h;
    return m;
}

InversionConfig RunConfig::make_inversion_config() const {
    InversionConfig ic;
    ic.iters = inversion.iters;
    ic.lr = inversion.lr;
    ic.alpha = inversion.alpha;
    ic.clamp_lo = style.c_min * style.c_min;
    ic.clamp_hi = style.c_max * style.c_max;
    ic.method = inversion.method == "BI" ? InvMethod::BI : InvMethod::LSI;
    ic.start = inversion.start == "basic" ? InvStart::Basic : InvStart::Warm;
    return ic;
}

}  // namespace pinv
