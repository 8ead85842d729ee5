#include "pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "metrics.hpp"
#include "pgm.hpp"

namespace fs = std::filesystem;

namespace pinv {

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

using Model = PairedModel<float>;
using Dataset = PairedDataset<float>;

std::ofstream open_out(const fs::path& p) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw FormatError("cannot open output file '" + p.string() + "'");
    return f;
}

Model load_model(const std::string& checkpoint) {
    if (checkpoint.empty()) throw ContractError("a --checkpoint path is required");
    return Model::load(checkpoint);
}

Dataset load_split(const std::string& data_dir, const char* split) {
    return load_dataset<float>((fs::path(data_dir) / split).string());
}

// In-distribution metric points of a split, solver-free.
std::vector<MetricPoint> metric_points(Model& m, const Dataset& ds) {
    std::vector<MetricPoint> pts;
    pts.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Tensor<float> b = ds.data_at(i);
        Tensor<float> b1 = b;
        b1.shape = {1, b.shape[0], b.shape[1], b.shape[2]};
        Tensor<float> q_hat = unbatch(m.lfe(b1));
        q_hat.shape = {(std::size_t)m.meta.nz, (std::size_t)m.meta.nx};
        MetricPoint p;
        p.rre = rre(m, b, q_hat);
        p.rma = rma(m, q_hat);
        pts.push_back(p);
    }
    return pts;
}

}  // namespace

void run_gen(const RunConfig& cfg, const std::string& out_dir) {
    Acquisition acq = cfg.make_acquisition();
    const double sigma =
        auto_sigma<float>(cfg.style, cfg.grid, acq, cfg.seed, cfg.data.sigma_rel);
    nlohmann::json extra;
    extra["family"] = family_name(cfg.style.family);
    extra["seed"] = cfg.seed;
    extra["sigma"] = sigma;

    struct Job {
        const char* split;
        std::size_t n;
        const ModelStyle* style;
        std::uint64_t seed_offset;
    };
    const Job jobs[] = {{"train", cfg.data.n_train, &cfg.style, 0},
                        {"val", cfg.data.n_val, &cfg.style, 1},
                        {"test", cfg.data.n_test, &cfg.style, 2},
                        {"ood", cfg.data.n_ood, &cfg.ood_style, 3}};
    for (const Job& j : jobs) {
        if (j.n == 0) continue;
        Dataset ds = build_dataset<float>(j.n, *j.style, cfg.grid, acq, sigma,
                                          cfg.seed + 1000 * (j.seed_offset + 1));
        ds.split = j.split;
        nlohmann::json ex = extra;
        ex["family"] = family_name(j.style->family);
        save_dataset((fs::path(out_dir) / j.split).string(), ds, ex);
    }
}

void run_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    Dataset train_ds = load_split(data_dir, "train");
    Dataset val_ds = load_split(data_dir, "val");

    ArchMeta meta = cfg.make_arch_meta();
    {   // dataset standardization constants (population moments of the train split)
        double s = 0, s2 = 0;
        for (float v : train_ds.models.data) {
            s += v;
            s2 += static_cast<double>(v) * v;
        }
        const double n = train_ds.models.size();
        meta.q_mean = s / n;
        meta.q_std = std::sqrt(std::max(s2 / n - meta.q_mean * meta.q_mean, 1e-30));
        s = s2 = 0;
        for (float v : train_ds.data.data) {
            s += v;
            s2 += static_cast<double>(v) * v;
        }
        const double nd = train_ds.data.size();
        meta.b_mean = s / nd;
        meta.b_std = std::sqrt(std::max(s2 / nd - meta.b_mean * meta.b_mean, 1e-30));
    }

    Model m = Model::build(meta, cfg.seed);
    TrainResult<float> res = train(train_ds, val_ds, std::move(m), cfg.train);

    auto log = open_out(fs::path(out_dir) / "train_log.csv");
    log << "epoch,ae_data,ae_model,s_data_space,s_model_space,total,val_total,val_lfe_err\n";
    for (const EpochLog& e : res.log)
        log << e.epoch << "," << fmt_g17(e.train.ae_data) << "," << fmt_g17(e.train.ae_model)
            << "," << fmt_g17(e.train.s_data_space) << "," << fmt_g17(e.train.s_model_space)
            << "," << fmt_g17(e.train.total) << "," << fmt_g17(e.val_total) << ","
            << fmt_g17(e.val_lfe_err) << "\n";
    log.close();
    if (res.diverged)
        throw NumericError("training diverged (train total grew 10x above initial for 3 epochs); "
                           "log written to train_log.csv");
    res.model.save((fs::path(out_dir) / "ckpt.pairinv").string());
}

void run_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
               const std::string& out_dir) {
    (void)cfg;
    Model m = load_model(checkpoint);
    Dataset ds = load_split(data_dir, "test");
    auto csv = open_out(fs::path(out_dir) / "infer.csv");
    csv << "sample,rre,rma,model_err\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Tensor<float> b = ds.data_at(i);
        Tensor<float> b1 = b;
        b1.shape = {1, b.shape[0], b.shape[1], b.shape[2]};
        Tensor<float> q_hat = unbatch(m.lfe(b1));
        q_hat.shape = {(std::size_t)m.meta.nz, (std::size_t)m.meta.nx};
        const double e = relative_l2(q_hat, ds.model_at(i));
        csv << i << "," << fmt_g17(rre(m, b, q_hat)) << "," << fmt_g17(rma(m, q_hat)) << ","
            << fmt_g17(e) << "\n";
    }
}

void run_invert(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
                std::size_t sample, const std::string& out_dir) {
    Dataset ds = load_split(data_dir, "test");
    if (sample >= ds.size())
        throw ContractError("invert: sample index " + std::to_string(sample) +
                            " out of range (test split has " + std::to_string(ds.size()) + ")");
    Acquisition acq = cfg.make_acquisition();
    InversionConfig ic = cfg.make_inversion_config();
    Tensor<float> q_true = ds.model_at(sample);
    Tensor<float> b_obs = ds.data_at(sample);

    InversionTrace<float> tr;
    if (ic.method == InvMethod::BI) {
        VelocityModel<float> q0;
        q0.grid = cfg.grid;
        if (ic.start == InvStart::Basic) {
            q0.qsq = make_basic_start<float>(cfg.grid, ic.clamp_lo, ic.clamp_hi);
        } else {
            Model m = load_model(checkpoint);
            Tensor<float> b1 = b_obs;
            b1.shape = {1, b_obs.shape[0], b_obs.shape[1], b_obs.shape[2]};
            q0.qsq = unbatch(m.lfe(b1));
            q0.qsq.shape = {(std::size_t)cfg.grid.nz, (std::size_t)cfg.grid.nx};
            for (auto& v : q0.qsq.data)
                v = static_cast<float>(
                    std::clamp(static_cast<double>(v), ic.clamp_lo, ic.clamp_hi));
        }
        tr = basic_inversion(b_obs, q0, acq, ic, &q_true);
    } else {
        Model m = load_model(checkpoint);
        Tensor<float> b1 = b_obs;
        b1.shape = {1, b_obs.shape[0], b_obs.shape[1], b_obs.shape[2]};
        Tensor<float> z_star = unbatch(m.latent_map_dagger(m.encode_data(b1)));
        tr = latent_space_inversion(b_obs, z_star, ic, m, cfg.grid, acq, &q_true);
    }
    auto csv = open_out(fs::path(out_dir) / "trace.csv");
    csv << "iter,misfit,reg,model_err\n";
    for (std::size_t i = 0; i < tr.misfit.size(); ++i)
        csv << i << "," << fmt_g17(tr.misfit[i]) << "," << fmt_g17(tr.reg[i]) << ","
            << fmt_g17(tr.model_err[i]) << "\n";
    write_pgm((fs::path(out_dir) / "final_model.pgm").string(), tr.final_model);
}

void run_suite(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
               const std::string& out_dir) {
    Model m = load_model(checkpoint);
    Dataset ds = load_split(data_dir, "test");
    Acquisition acq = cfg.make_acquisition();
    InversionConfig ic = cfg.make_inversion_config();
    auto rows = run_suite(ds.models, ds.data, m, cfg.grid, acq, ic, cfg.inversion.suite_samples);
    auto csv = open_out(fs::path(out_dir) / "suite.csv");
    csv << "method,start,alpha,misfit_init_mean,misfit_init_std,misfit_final_mean,"
           "misfit_final_std,err_init_mean,err_init_std,err_final_mean,err_final_std,"
           "n_samples\n";
    for (const SuiteRow& r : rows)
        csv << r.method << "," << r.start << "," << fmt_g17(r.alpha) << ","
            << fmt_g17(r.misfit_init_mean) << "," << fmt_g17(r.misfit_init_std) << ","
            << fmt_g17(r.misfit_final_mean) << "," << fmt_g17(r.misfit_final_std) << ","
            << fmt_g17(r.err_init_mean) << "," << fmt_g17(r.err_init_std) << ","
            << fmt_g17(r.err_final_mean) << "," << fmt_g17(r.err_final_std) << ","
            << r.n_samples << "\n";
}

void run_ood(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_dir) {
    Model m = load_model(checkpoint);
    Dataset val = load_split(data_dir, "val");
    Dataset test = load_split(data_dir, "test");
    Dataset ood = load_split(data_dir, "ood");

    std::vector<MetricPoint> val_pts = metric_points(m, val);
    DensityMap dm = fit_density(val_pts, cfg.diagnostics.n_bins, cfg.diagnostics.smooth_sigma);
    save_density((fs::path(out_dir) / "density.pairinv").string(), dm);

    auto csv = open_out(fs::path(out_dir) / "ood.csv");
    csv << "sample,rre,rma,density,percentile,is_ood,label\n";
    std::vector<double> in_scores, ood_scores;
    auto emit = [&](const Dataset& ds, const char* label, std::vector<double>& scores) {
        std::vector<MetricPoint> pts = metric_points(m, ds);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            OodScore s = ood_score(dm, pts[i], cfg.diagnostics.threshold);
            scores.push_back(s.density_value);
            csv << label << i << "," << fmt_g17(pts[i].rre) << "," << fmt_g17(pts[i].rma) << ","
                << fmt_g17(s.density_value) << "," << fmt_g17(s.percentile) << ","
                << (s.is_ood ? 1 : 0) << "," << label << "\n";
        }
    };
    emit(test, "test", in_scores);
    emit(ood, "ood", ood_scores);

    nlohmann::json summary;
    summary["auroc"] = auroc(in_scores, ood_scores);
    summary["n_in"] = in_scores.size();
    summary["n_ood"] = ood_scores.size();
    auto sj = open_out(fs::path(out_dir) / "ood_summary.json");
    sj << summary.dump(2) << "\n";
}

void run_bounds(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
                const std::string& out_dir) {
    Model m = load_model(checkpoint);
    Dataset val = load_split(data_dir, "val");
    Dataset test = load_split(data_dir, "test");
    Acquisition acq = cfg.make_acquisition();

    ConstantEstimates consts = estimate_constants(m, val, cfg.diagnostics.pair_samples);
    std::vector<BoundRow> rows =
        bound_report(m, test, consts, cfg.grid, acq, cfg.style.c_min * cfg.style.c_min,
                     cfg.style.c_max * cfg.style.c_max);

    auto csv = open_out(fs::path(out_dir) / "bounds.csv");
    csv << "sample,residual,bound1,bound1_holds,bound2,bound2_holds,model_err,prop2_bound,"
           "prop2_applicable,prop2_holds,theorem_bound,theorem_holds\n";
    for (const BoundRow& r : rows)
        csv << r.sample << "," << fmt_g17(r.residual) << "," << fmt_g17(r.bound1) << ","
            << (r.bound1_holds ? 1 : 0) << "," << fmt_g17(r.bound2) << ","
            << (r.bound2_holds ? 1 : 0) << "," << fmt_g17(r.model_err) << ","
            << fmt_g17(r.prop2_bound) << "," << (r.prop2_applicable ? 1 : 0) << ","
            << (r.prop2_holds ? 1 : 0) << "," << fmt_g17(r.theorem_bound) << ","
            << (r.theorem_holds ? 1 : 0) << "\n";

    nlohmann::json cj;
    cj["L"] = consts.L;
    cj["L_q"] = consts.L_q;
    cj["L_b"] = consts.L_b;
    cj["L_ae"] = consts.L_ae;
    cj["xi_q"] = consts.xi_q;
    cj["xi_b"] = consts.xi_b;
    cj["xi_M"] = consts.xi_M;
    cj["delta"] = consts.delta;
    cj["eps_q"] = consts.eps_q;
    cj["M_dagger_norm"] = consts.M_dagger_norm;
    cj["n_samples"] = consts.n_samples;
    cj["n_pairs"] = consts.n_pairs;
    auto jf = open_out(fs::path(out_dir) / "constants.json");
    jf << cj.dump(2) << "\n";
}

void run_img(const std::string& container_path, const std::string& tensor_name,
             const std::string& out_path) {
    Container c = load_container(container_path);
    const NamedTensor& nt = c.get(tensor_name);
    Tensor<double> t = nt.as<double>();
    // collapse leading singleton axes so e.g. [1,1,H,W] saves directly
    while (t.shape.size() > 2 && t.shape.front() == 1) t.shape.erase(t.shape.begin());
    if (t.shape.size() != 2)
        throw ContractError("img: tensor '" + tensor_name + "' is not 2D (shape " +
                            shape_str(t.shape) + ")");
    const fs::path parent = fs::path(out_path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    write_pgm(out_path, t);
}

}  // namespace pinv
