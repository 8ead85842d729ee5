#pragma once

#include <string>

#include "json.hpp"
#include "datagen.hpp"
#include "invert.hpp"
#include "train.hpp"

namespace pinv {

// Schema-versioned JSON run configuration. Unknown keys are rejected at every
// level so typos fail loudly.
struct RunConfig {
    std::uint64_t seed = 1;

    Grid2D grid{64, 64, 10.0, 10.0};

    struct Acq {
        int n_sources = 6;
        int n_receivers = 32;
        int nt = 512;
        double cfl_fraction = 0.8;  // dt = fraction * CFL limit at style c_max
        double f_peak = 10.0;       // Hz
        double t0 = 0.0;            // 0 -> 1.2 / f_peak
        double source_scale = 1.0;
        int source_depth = 1;
        int receiver_depth = 1;
    } acq;

    ModelStyle style;      // training distribution
    ModelStyle ood_style;  // held-out family for the OOD experiment

    struct Data {
        std::size_t n_train = 512, n_val = 128, n_test = 128, n_ood = 128;
        double sigma_rel = 0.01;
    } data;

    TrainConfig train;

    struct Arch {
        int latent_dim = 64;
        int menc1 = 4, menc2 = 4, menc3 = 8;
        int denc1 = 2, denc2 = 2, denc3 = 2;
        int mdec1 = 2, mdec2 = 2, mdec3 = 2;
        int ddec1 = 8, ddec2 = 8, ddec3 = 4;
        double resnet_h = 0.5;
    } arch;

    struct Inversion {
        int iters = 700;
        double lr = 1e-2;
        double alpha = 1.0;
        std::size_t suite_samples = 50;
        std::string method = "BI";    // for the single-job invert subcommand
        std::string start = "basic";
    } inversion;

    struct Diagnostics {
        int n_bins = 16;
        double smooth_sigma = 1.0;
        double threshold = 0.95;
        std::size_t pair_samples = 1000;
    } diagnostics;

    struct Paths {
        std::string out_dir = "out";
        std::string data_dir;
        std::string checkpoint;
    } paths;

    static RunConfig parse(const nlohmann::json& j);
    static RunConfig load(const std::string& path);

    // dt at cfl_fraction of the stability limit for the style's fastest medium
    double dt() const {
        const double limit = std::min(grid.dz, grid.dx) / (style.c_max * std::sqrt(2.0));
        return acq.cfl_fraction * limit;
    }

    double ricker_t0() const { return acq.t0 > 0 ? acq.t0 : 1.2 / acq.f_peak; }

    Acquisition make_acquisition() const;
    ArchMeta make_arch_meta() const;
    InversionConfig make_inversion_config() const;
};

}  // namespace pinv
