// Training tests: loss bookkeeping, coupling behavior, exact gradients of the
// full coupled objective, and deterministic end-to-end epochs.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "train.hpp"

using namespace pinv;

namespace {

ArchMeta tiny_meta() {
    ArchMeta m;
    m.nz = 16;
    m.nx = 16;
    m.ns = 2;
    m.nr = 8;
    m.nt = 64;
    m.latent_dim = 8;
    m.menc1 = 2; m.menc2 = 2; m.menc3 = 2;
    m.denc1 = 2; m.denc2 = 2; m.denc3 = 2;
    m.mdec1 = 2; m.mdec2 = 2; m.mdec3 = 2;
    m.ddec1 = 2; m.ddec2 = 2; m.ddec3 = 2;
    m.q_mean = 6.0e6;
    m.q_std = 2.0e6;
    m.b_mean = 0.0;
    m.b_std = 0.2;
    return m;
}

// Even smaller variant for finite differences over every parameter.
ArchMeta fd_meta() {
    ArchMeta m = tiny_meta();
    m.ns = 1;
    m.latent_dim = 4;
    m.menc1 = 1; m.menc2 = 1; m.menc3 = 1;
    m.denc1 = 1; m.denc2 = 1; m.denc3 = 1;
    m.mdec1 = 1; m.mdec2 = 1; m.mdec3 = 1;
    m.ddec1 = 1; m.ddec2 = 1; m.ddec3 = 1;
    return m;
}

template <class T>
PairedDataset<T> synthetic_dataset(std::size_t n, const ArchMeta& meta, std::uint64_t seed) {
    Rng rng(seed);
    PairedDataset<T> ds;
    ds.split = "train";
    ds.models = Tensor<T>({n, (std::size_t)meta.nz, (std::size_t)meta.nx});
    ds.data = Tensor<T>({n, (std::size_t)meta.ns, (std::size_t)meta.nr, (std::size_t)meta.nt});
    for (auto& v : ds.models.data)
        v = static_cast<T>(meta.q_mean + meta.q_std * rng.normal());
    for (auto& v : ds.data.data) v = static_cast<T>(meta.b_mean + meta.b_std * rng.normal());
    return ds;
}

template <class T>
void batch_from(const PairedDataset<T>& ds, std::size_t lo, std::size_t B, Tensor<T>& qb,
                Tensor<T>& bb) {
    const std::size_t msz = ds.models.shape[1] * ds.models.shape[2];
    const std::size_t dsz = ds.data.shape[1] * ds.data.shape[2] * ds.data.shape[3];
    qb = Tensor<T>({B, ds.models.shape[1], ds.models.shape[2]});
    bb = Tensor<T>({B, ds.data.shape[1], ds.data.shape[2], ds.data.shape[3]});
    std::copy(ds.models.data.begin() + lo * msz, ds.models.data.begin() + (lo + B) * msz,
              qb.data.begin());
    std::copy(ds.data.data.begin() + lo * dsz, ds.data.data.begin() + (lo + B) * dsz,
              bb.data.begin());
}

}  // namespace

TEST_CASE("coupling names round trip") {
    for (Coupling c :
         {Coupling::None, Coupling::DataSpace, Coupling::ModelSpace, Coupling::Both})
        CHECK(coupling_from_name(coupling_name(c)) == c);
    CHECK_THROWS_AS(coupling_from_name("tight"), ContractError);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    c.lr = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = TrainConfig{};
    c.w_b = c.w_q = c.w_s = 0;
    CHECK_THROWS_AS(c.validate(), ContractError);
    c = TrainConfig{};
    c.w_q = -1;
    CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("loss total is the weighted sum of nonnegative components") {
    auto ds = synthetic_dataset<double>(4, tiny_meta(), 1);
    Tensor<double> qb, bb;
    batch_from(ds, 0, 4, qb, bb);
    TrainConfig cfg;
    cfg.w_b = 2.0;
    cfg.w_q = 0.5;
    cfg.w_s = 1.5;
    cfg.coupling = Coupling::Both;
    auto m = PairedModel<double>::build(tiny_meta(), 3);
    LossBreakdown lb = batch_loss_and_grads(m, qb, bb, cfg, /*with_grads=*/false);
    CHECK(lb.ae_data >= 0.0);
    CHECK(lb.ae_model >= 0.0);
    CHECK(lb.s_data_space >= 0.0);
    CHECK(lb.s_model_space >= 0.0);
    const double want =
        cfg.w_b * lb.ae_data + cfg.w_q * lb.ae_model + cfg.w_s * (lb.s_data_space + lb.s_model_space);
    CHECK(lb.total == doctest::Approx(want).epsilon(1e-14));

    cfg.coupling = Coupling::None;
    auto m2 = PairedModel<double>::build(tiny_meta(), 3);
    LossBreakdown ln = batch_loss_and_grads(m2, qb, bb, cfg, false);
    CHECK(ln.s_data_space == 0.0);
    CHECK(ln.s_model_space == 0.0);
    CHECK(ln.ae_data == lb.ae_data);  // same init, same reconstruction terms
    CHECK(ln.ae_model == lb.ae_model);
    CHECK(lb.total >= cfg.w_b * ln.ae_data + cfg.w_q * ln.ae_model);
}

TEST_CASE("loss values agree with and without gradient accumulation") {
    auto ds = synthetic_dataset<double>(4, tiny_meta(), 7);
    Tensor<double> qb, bb;
    batch_from(ds, 0, 4, qb, bb);
    TrainConfig cfg;
    auto ma = PairedModel<double>::build(tiny_meta(), 9);
    auto mb = PairedModel<double>::build(tiny_meta(), 9);
    LossBreakdown la = batch_loss_and_grads(ma, qb, bb, cfg, /*with_grads=*/true);
    LossBreakdown lo = batch_loss_and_grads(mb, qb, bb, cfg, /*with_grads=*/false);
    CHECK(la.ae_data == lo.ae_data);
    CHECK(la.ae_model == lo.ae_model);
    CHECK(la.s_data_space == lo.s_data_space);
    CHECK(la.s_model_space == lo.s_model_space);
    CHECK(la.total == lo.total);
}

TEST_CASE("full-batch loss is invariant under sample permutation") {
    auto ds = synthetic_dataset<double>(6, tiny_meta(), 13);
    Tensor<double> qb, bb;
    batch_from(ds, 0, 6, qb, bb);
    // reversed copy
    const std::size_t msz = 16 * 16, dsz = 2 * 8 * 64;
    Tensor<double> qp = qb, bq = bb;
    for (std::size_t i = 0; i < 6; ++i) {
        std::copy(qb.data.begin() + i * msz, qb.data.begin() + (i + 1) * msz,
                  qp.data.begin() + (5 - i) * msz);
        std::copy(bb.data.begin() + i * dsz, bb.data.begin() + (i + 1) * dsz,
                  bq.data.begin() + (5 - i) * dsz);
    }
    TrainConfig cfg;
    auto ma = PairedModel<double>::build(tiny_meta(), 17);
    auto mb = PairedModel<double>::build(tiny_meta(), 17);
    LossBreakdown l1 = batch_loss_and_grads(ma, qb, bb, cfg, false);
    LossBreakdown l2 = batch_loss_and_grads(mb, qp, bq, cfg, false);
    CHECK(l1.total == doctest::Approx(l2.total).epsilon(1e-12));
    CHECK(l1.ae_data == doctest::Approx(l2.ae_data).epsilon(1e-12));
    CHECK(l1.ae_model == doctest::Approx(l2.ae_model).epsilon(1e-12));
}

TEST_CASE("batch contracts: size mismatch and non-identity maps are rejected") {
    auto ds = synthetic_dataset<double>(4, tiny_meta(), 19);
    Tensor<double> qb, bb;
    batch_from(ds, 0, 4, qb, bb);
    TrainConfig cfg;
    auto m = PairedModel<double>::build(tiny_meta(), 19);
    Tensor<double> bb2({2, 2, 8, 64});
    CHECK_THROWS_AS(batch_loss_and_grads(m, qb, bb2, cfg, false), ContractError);

    ArchMeta nonid = tiny_meta();
    nonid.identity_maps = false;
    auto m2 = PairedModel<double>::build(nonid, 19);
    CHECK_THROWS_AS(batch_loss_and_grads(m2, qb, bb, cfg, false), ContractError);
}

TEST_CASE("coupled loss gradients match finite differences over all four nets") {
    ArchMeta meta = fd_meta();
    auto ds = synthetic_dataset<double>(2, meta, 23);
    Tensor<double> qb, bb;
    batch_from(ds, 0, 2, qb, bb);
    TrainConfig cfg;
    cfg.coupling = Coupling::Both;
    cfg.w_b = 1.0;
    cfg.w_q = 0.7;
    cfg.w_s = 1.3;

    auto model = PairedModel<double>::build(meta, 29);
    auto work = model;
    batch_loss_and_grads(work, qb, bb, cfg, /*with_grads=*/true);

    // flatten parameters and analytic gradients of all four nets
    std::vector<Net<double>*> nets = {&work.enc_model, &work.dec_model, &work.enc_data,
                                      &work.dec_data};
    std::size_t total = 0;
    for (auto* n : nets) total += n->param_count();
    Tensor<double> theta({total}), analytic({total});
    std::size_t off = 0;
    for (auto* n : nets)
        n->visit([&](Tensor<double>& p, Tensor<double>& g) {
            std::copy(p.data.begin(), p.data.end(), theta.data.begin() + off);
            std::copy(g.data.begin(), g.data.end(), analytic.data.begin() + off);
            off += p.size();
        });

    auto fn = [&](const Tensor<double>& tv) {
        auto probe = model;
        std::vector<Net<double>*> pn = {&probe.enc_model, &probe.dec_model, &probe.enc_data,
                                        &probe.dec_data};
        std::size_t o = 0;
        for (auto* n : pn)
            n->visit([&](Tensor<double>& p, Tensor<double>&) {
                std::copy(tv.data.begin() + o, tv.data.begin() + o + p.size(), p.data.begin());
                o += p.size();
            });
        return batch_loss_and_grads(probe, qb, bb, cfg, /*with_grads=*/false).total;
    };

    // Full scan. Bias channels feeding a normalization have exactly-zero
    // gradients in train mode (batch stats absorb per-channel shifts), so for
    // those the finite difference is pure roundoff and only a noise bound
    // applies.
    const double h = 1e-4;
    double worst = 0;
    std::size_t degenerate = 0;
    Tensor<double> tv = theta;
    for (std::size_t i = 0; i < total; ++i) {
        tv[i] = theta[i] + h;
        const double fp = fn(tv);
        tv[i] = theta[i] - h;
        const double fm = fn(tv);
        tv[i] = theta[i];
        const double fd = (fp - fm) / (2 * h);
        if (std::abs(analytic[i]) < 1e-10) {
            ++degenerate;
            CHECK(std::abs(fd) < 1e-7);
            continue;
        }
        const double err =
            std::abs(fd - analytic[i]) / std::max(std::abs(fd), std::abs(analytic[i]));
        worst = std::max(worst, err);
        if (err > 1e-5) {
            INFO("coord " << i << " analytic=" << analytic[i] << " fd=" << fd);
            CHECK(err <= 1e-5);
        }
    }
    INFO("param_count=" << total << " degenerate=" << degenerate << " worst=" << worst);
    CHECK(worst <= 1e-5);
    CHECK(degenerate < total / 4);  // degeneracy stays the exception
}

TEST_CASE("validation summary matches a hand computation on one sample") {
    ArchMeta meta = tiny_meta();
    auto ds = synthetic_dataset<double>(1, meta, 37);
    ds.split = "val";
    TrainConfig cfg;
    auto m = PairedModel<double>::build(meta, 41);
    ValSummary s = evaluate_validation(m, ds, cfg);
    REQUIRE(s.n == 1);

    auto m2 = PairedModel<double>::build(meta, 41);
    Tensor<double> q = ds.model_at(0);
    Tensor<double> b = ds.data_at(0);
    Tensor<double> q4 = batch_of_one(q);
    q4.shape = {1, 1, 16, 16};
    Tensor<double> b4 = batch_of_one(b);
    Tensor<double> q_hat = m2.lfe(b4);
    Tensor<double> b_sur = m2.decode_data(m2.latent_map(m2.encode_model(q4)));
    Tensor<double> q_rt = m2.decode_model(m2.encode_model(q_hat));

    auto rel = [](const Tensor<double>& a, const Tensor<double>& ref) {
        double n = 0, d = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            n += (a[i] - ref[i]) * (a[i] - ref[i]);
            d += ref[i] * ref[i];
        }
        return std::sqrt(n / d);
    };
    Tensor<double> qf = q_hat;
    CHECK(s.mean_rre == doctest::Approx(rel(b_sur, b4)).epsilon(1e-10));
    CHECK(s.mean_lfe_err == doctest::Approx(rel(q_hat, q4)).epsilon(1e-10));
    CHECK(s.mean_rma == doctest::Approx(rel(q_rt, qf)).epsilon(1e-10));
}

TEST_CASE("two training epochs run deterministically") {
    ArchMeta meta = tiny_meta();
    auto tr = synthetic_dataset<float>(8, meta, 43);
    auto va = synthetic_dataset<float>(4, meta, 44);
    va.split = "val";
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.seed = 45;

    auto r1 = train(tr, va, PairedModel<float>::build(meta, 46), cfg);
    auto r2 = train(tr, va, PairedModel<float>::build(meta, 46), cfg);
    REQUIRE(r1.log.size() == 2);
    CHECK_FALSE(r1.diverged);
    CHECK(r1.initial_total > 0.0);
    for (std::size_t e = 0; e < 2; ++e) {
        CHECK(r1.log[e].train.total == r2.log[e].train.total);
        CHECK(r1.log[e].val_total == r2.log[e].val_total);
        CHECK(r1.log[e].val_lfe_err == r2.log[e].val_lfe_err);
    }
    Rng rng(47);
    Tensor<float> b({1, 2, 8, 64});
    for (auto& v : b.data) v = (float)(0.2 * rng.normal());
    Tensor<float> p1 = r1.model.lfe(b), p2 = r2.model.lfe(b);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);

    cfg.batch_size = 64;  // larger than the dataset
    CHECK_THROWS_AS(train(tr, va, PairedModel<float>::build(meta, 46), cfg), ContractError);
}
