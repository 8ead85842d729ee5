#pragma once

#include <string>

#include "container.hpp"
#include "net.hpp"
#include "wave.hpp"

namespace pinv {

// Architecture and normalization metadata for a paired model. Serialized as
// JSON inside the checkpoint header.
struct ArchMeta {
    // physical shapes
    int nz = 64, nx = 64;
    int ns = 6, nr = 32, nt = 512;
    int time_down = 4;  // fixed time resampling factor on the data side
    int latent_dim = 64;
    // encoder level widths (3 levels) and bottleneck doubling
    int menc1 = 4, menc2 = 4, menc3 = 8;
    int denc1 = 2, denc2 = 2, denc3 = 2;
    // decoder level widths, bottom to top
    int mdec1 = 2, mdec2 = 2, mdec3 = 2;
    int ddec1 = 8, ddec2 = 8, ddec3 = 4;
    double resnet_h = 0.5;
    // dataset standardization constants (applied outside the nets)
    double q_mean = 0, q_std = 1, b_mean = 0, b_std = 1;
    bool identity_maps = true;

    nlohmann::json to_json() const {
        return nlohmann::json{{"nz", nz},       {"nx", nx},
                              {"ns", ns},       {"nr", nr},
                              {"nt", nt},       {"time_down", time_down},
                              {"latent_dim", latent_dim},
                              {"menc", {menc1, menc2, menc3}},
                              {"denc", {denc1, denc2, denc3}},
                              {"mdec", {mdec1, mdec2, mdec3}},
                              {"ddec", {ddec1, ddec2, ddec3}},
                              {"resnet_h", resnet_h},
                              {"q_mean", q_mean},  {"q_std", q_std},
                              {"b_mean", b_mean},  {"b_std", b_std},
                              {"identity_maps", identity_maps}};
    }

    static ArchMeta from_json(const nlohmann::json& j) {
        ArchMeta m;
        m.nz = j.at("nz");
        m.nx = j.at("nx");
        m.ns = j.at("ns");
        m.nr = j.at("nr");
        m.nt = j.at("nt");
        m.time_down = j.at("time_down");
        m.latent_dim = j.at("latent_dim");
        m.menc1 = j.at("menc")[0];
        m.menc2 = j.at("menc")[1];
        m.menc3 = j.at("menc")[2];
        m.denc1 = j.at("denc")[0];
        m.denc2 = j.at("denc")[1];
        m.denc3 = j.at("denc")[2];
        m.mdec1 = j.at("mdec")[0];
        m.mdec2 = j.at("mdec")[1];
        m.mdec3 = j.at("mdec")[2];
        m.ddec1 = j.at("ddec")[0];
        m.ddec2 = j.at("ddec")[1];
        m.ddec3 = j.at("ddec")[2];
        m.resnet_h = j.at("resnet_h");
        m.q_mean = j.at("q_mean");
        m.q_std = j.at("q_std");
        m.b_mean = j.at("b_mean");
        m.b_std = j.at("b_std");
        m.identity_maps = j.at("identity_maps");
        return m;
    }

    Shape model_shape1() const { return {1, (std::size_t)nz, (std::size_t)nx}; }
    Shape data_shape1() const { return {(std::size_t)ns, (std::size_t)nr, (std::size_t)nt}; }
};

namespace archdetail {

// Encoder: per level Kcc -> 3x ResNet -> pool (no pool at the bottom level),
// then a channel-doubling Kcc, flatten, affine to the latent size, and a
// per-feature normalization.
template <class T>
Net<T> build_encoder(int in_ch, int H, int W, int w1, int w2, int w3, int latent, double h,
                     bool time_pool_in) {
    Net<T> net;
    if (time_pool_in) {
        net.layers.push_back(make_time_pool4<T>());
        W /= 4;
    }
    const T th = static_cast<T>(h);
    auto level = [&](int cin, int c, bool pool) {
        net.layers.push_back(make_conv_cc<T>(cin, c));
        for (int i = 0; i < 3; ++i) net.layers.push_back(make_resnet_block<T>(c, th));
        if (pool) net.layers.push_back(make_avgpool2<T>());
    };
    level(in_ch, w1, true);
    level(w1, w2, true);
    level(w2, w3, false);
    const int Hb = H / 4, Wb = W / 4;
    net.layers.push_back(make_conv_cc<T>(w3, 2 * w3));
    net.layers.push_back(make_flatten<T>());
    net.layers.push_back(make_affine<T>(2 * w3 * Hb * Wb, latent));
    net.layers.push_back(make_norm<T>(latent));
    return net;
}

// Decoder: affine from the latent, reshape, Kcc, 3x ResNet at the bottom,
// then two upsample levels, and a final channel-change to the output count.
template <class T>
Net<T> build_decoder(int out_ch, int H, int W, int d1, int d2, int d3, int latent, double h,
                     bool time_interp_out) {
    Net<T> net;
    if (time_interp_out) W /= 4;
    const int Hb = H / 4, Wb = W / 4;
    const T th = static_cast<T>(h);
    const int c0 = 2 * d1;
    net.layers.push_back(make_affine<T>(latent, c0 * Hb * Wb));
    net.layers.push_back(make_reshape<T>(c0, Hb, Wb));
    net.layers.push_back(make_conv_cc<T>(c0, d1));
    for (int i = 0; i < 3; ++i) net.layers.push_back(make_resnet_block<T>(d1, th));
    net.layers.push_back(make_upsample2<T>());
    net.layers.push_back(make_conv_cc<T>(d1, d2));
    for (int i = 0; i < 3; ++i) net.layers.push_back(make_resnet_block<T>(d2, th));
    net.layers.push_back(make_upsample2<T>());
    net.layers.push_back(make_conv_cc<T>(d2, d3));
    for (int i = 0; i < 3; ++i) net.layers.push_back(make_resnet_block<T>(d3, th));
    net.layers.push_back(make_conv_cc<T>(d3, out_ch));
    if (time_interp_out) net.layers.push_back(make_time_interp4<T>());
    return net;
}

}  // namespace archdetail

// The six mappings E_q, D_q, E_b, D_b, M, M^dagger. Nets operate on
// standardized tensors; encode_*/decode_* apply the standardization so all
// public inputs and outputs are in physical units.
template <class T>
struct PairedModel {
    ArchMeta meta;
    Net<T> enc_model, dec_model, enc_data, dec_data;
    Tensor<T> map_fwd, map_dagger;  // [latent, latent] when not identity

    static PairedModel build(const ArchMeta& meta, std::uint64_t seed) {
        if (meta.nz % 4 || meta.nx % 4 || meta.nr % 4 || meta.nt % (4 * meta.time_down))
            throw ContractError("PairedModel: shapes must support two pooling levels");
        compact_heap();
        PairedModel m;
        m.meta = meta;
        m.enc_model = archdetail::build_encoder<T>(1, meta.nz, meta.nx, meta.menc1, meta.menc2,
                                                   meta.menc3, meta.latent_dim, meta.resnet_h,
                                                   false);
        m.dec_model = archdetail::build_decoder<T>(1, meta.nz, meta.nx, meta.mdec1, meta.mdec2,
                                                   meta.mdec3, meta.latent_dim, meta.resnet_h,
                                                   false);
        m.enc_data = archdetail::build_encoder<T>(meta.ns, meta.nr, meta.nt, meta.denc1,
                                                  meta.denc2, meta.denc3, meta.latent_dim,
                                                  meta.resnet_h, true);
        m.dec_data = archdetail::build_decoder<T>(meta.ns, meta.nr, meta.nt, meta.ddec1,
                                                  meta.ddec2, meta.ddec3, meta.latent_dim,
                                                  meta.resnet_h, true);
        Rng rng(seed);
        m.enc_model.init(rng);
        m.dec_model.init(rng);
        m.enc_data.init(rng);
        m.dec_data.init(rng);
        if (!meta.identity_maps) {
            const std::size_t L = meta.latent_dim;
            m.map_fwd = Tensor<T>({L, L});
            m.map_dagger = Tensor<T>({L, L});
            for (std::size_t i = 0; i < L; ++i) {
                m.map_fwd[i * L + i] = T(1);
                m.map_dagger[i * L + i] = T(1);
            }
        }
        return m;
    }

    // --- standardization -----------------------------------------------------
    Tensor<T> normalize_model(const Tensor<T>& q) const {
        Tensor<T> out = q;
        const T mu = static_cast<T>(meta.q_mean), sd = static_cast<T>(meta.q_std);
        for (auto& v : out.data) v = (v - mu) / sd;
        return out;
    }
    Tensor<T> denormalize_model(const Tensor<T>& qn) const {
        Tensor<T> out = qn;
        const T mu = static_cast<T>(meta.q_mean), sd = static_cast<T>(meta.q_std);
        for (auto& v : out.data) v = v * sd + mu;
        return out;
    }
    Tensor<T> normalize_data(const Tensor<T>& b) const {
        Tensor<T> out = b;
        const T mu = static_cast<T>(meta.b_mean), sd = static_cast<T>(meta.b_std);
        for (auto& v : out.data) v = (v - mu) / sd;
        return out;
    }
    Tensor<T> denormalize_data(const Tensor<T>& bn) const {
        Tensor<T> out = bn;
        const T mu = static_cast<T>(meta.b_mean), sd = static_cast<T>(meta.b_std);
        for (auto& v : out.data) v = v * sd + mu;
        return out;
    }

    // --- latent maps ---------------------------------------------------------
    Tensor<T> latent_map(const Tensor<T>& z) const { return apply_map(map_fwd, z); }
    Tensor<T> latent_map_dagger(const Tensor<T>& z) const { return apply_map(map_dagger, z); }

    // --- batched mappings, physical units ------------------------------------
    // q: [N,1,nz,nx] -> [N,latent]
    Tensor<T> encode_model(const Tensor<T>& q, bool train = false) {
        check_batched(q, meta.model_shape1(), "encode_model");
        return enc_model.forward(normalize_model(q), train);
    }
    // z: [N,latent] -> [N,1,nz,nx]
    Tensor<T> decode_model(const Tensor<T>& z, bool train = false) {
        return denormalize_model(dec_model.forward(z, train));
    }
    // b: [N,ns,nr,nt] -> [N,latent]
    Tensor<T> encode_data(const Tensor<T>& b, bool train = false) {
        check_batched(b, meta.data_shape1(), "encode_data");
        // Inference fast path: standardization commutes with the leading time
        // pooling (avg((b-mu)/sd) = (avg(b)-mu)/sd), so one pass reads the
        // full-rate cube and writes the pooled standardized tensor directly
        // instead of copying the input at full size first.
        if (!train && !enc_data.layers.empty() &&
            enc_data.layers[0].kind == LayerKind::TimePool4 && b.shape[3] % 4 == 0) {
            const std::size_t R = b.shape[0] * b.shape[1] * b.shape[2];
            const std::size_t W = b.shape[3], Wp = W / 4;
            Tensor<T> cur = Tensor<T>::uninit({b.shape[0], b.shape[1], b.shape[2], Wp});
            const T scale = static_cast<T>(0.25 / meta.b_std);
            const T shift = static_cast<T>(-meta.b_mean / meta.b_std);
            const T* xp = b.data.data();
            T* yp = cur.data.data();
            for (std::size_t r = 0; r < R; ++r, xp += W, yp += Wp)
                for (std::size_t ww = 0; ww < Wp; ++ww)
                    yp[ww] = (xp[4 * ww] + xp[4 * ww + 1] + xp[4 * ww + 2] + xp[4 * ww + 3]) *
                                 scale +
                             shift;
            for (std::size_t i = 1; i < enc_data.layers.size(); ++i)
                cur = layer_forward(enc_data.layers[i], cur, false,
                                    static_cast<LayerCache<T>*>(nullptr));
            return cur;
        }
        return enc_data.forward(normalize_data(b), train);
    }
    // z: [N,latent] -> [N,ns,nr,nt]
    Tensor<T> decode_data(const Tensor<T>& z, bool train = false) {
        return denormalize_data(dec_data.forward(z, train));
    }

    // Likelihood-free estimate: q_hat = D_q(M^dagger E_b(b)). No PDE solves.
    Tensor<T> lfe(const Tensor<T>& b) {
        return decode_model(latent_map_dagger(encode_data(b)));
    }

    // Surrogate forward: b_tilde = D_b(M E_q(q)).
    Tensor<T> surrogate_forward(const Tensor<T>& q) {
        return decode_data(latent_map(encode_model(q)));
    }

    // --- checkpoint ----------------------------------------------------------
    static constexpr const char* kFormat = "pairedinv-ckpt-1";

    void save(const std::string& path) const {
        Container c;
        c.meta["format"] = kFormat;
        c.meta["arch"] = meta.to_json();
        c.meta["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
        auto dump_net = [&](const char* prefix, const Net<T>& net) {
            for (std::size_t i = 0; i < net.layers.size(); ++i)
                for_each_state(const_cast<Layer<T>&>(net.layers[i]),
                               [&](const char* field, Tensor<T>& t) {
                                   if (t.size())
                                       c.put(std::string(prefix) + "/L" + std::to_string(i) + "/" +
                                                 field,
                                             t);
                               });
        };
        dump_net("enc_model", enc_model);
        dump_net("dec_model", dec_model);
        dump_net("enc_data", enc_data);
        dump_net("dec_data", dec_data);
        if (!meta.identity_maps) {
            c.put("latent/map_fwd", map_fwd);
            c.put("latent/map_dagger", map_dagger);
        }
        save_container(path, c);
    }

    static PairedModel load(const std::string& path) {
        Container c = load_container(path);
        if (!c.meta.contains("format") || c.meta["format"] != kFormat)
            throw FormatError("checkpoint: missing or unsupported format tag");
        PairedModel m = build(ArchMeta::from_json(c.meta.at("arch")), 0);
        auto fill_net = [&](const char* prefix, Net<T>& net) {
            for (std::size_t i = 0; i < net.layers.size(); ++i)
                for_each_state(net.layers[i], [&](const char* field, Tensor<T>& t) {
                    if (!t.size()) return;
                    const auto& nt = c.get(std::string(prefix) + "/L" + std::to_string(i) + "/" +
                                           field);
                    Tensor<T> loaded = nt.template as<T>();
                    loaded.require_shape(t.shape, "checkpoint tensor");
                    t = std::move(loaded);
                });
        };
        fill_net("enc_model", m.enc_model);
        fill_net("dec_model", m.dec_model);
        fill_net("enc_data", m.enc_data);
        fill_net("dec_data", m.dec_data);
        if (!m.meta.identity_maps) {
            m.map_fwd = c.get("latent/map_fwd").template as<T>();
            m.map_dagger = c.get("latent/map_dagger").template as<T>();
        }
        return m;
    }

private:
    template <class Fn>
    static void for_each_state(Layer<T>& L, Fn&& fn) {
        fn("w1", L.w1);
        fn("b1", L.b1);
        fn("w2", L.w2);
        fn("b2", L.b2);
        fn("gamma", L.gamma);
        fn("beta", L.beta);
        fn("run_mean", L.run_mean);
        fn("run_var", L.run_var);
    }

    static void check_batched(const Tensor<T>& x, const Shape& per_sample, const char* where) {
        if (x.shape.size() != per_sample.size() + 1)
            throw ContractError(std::string(where) + ": expected batched input, got " +
                                shape_str(x.shape));
        for (std::size_t i = 0; i < per_sample.size(); ++i)
            if (x.shape[i + 1] != per_sample[i])
                throw ContractError(std::string(where) + ": input " + shape_str(x.shape) +
                                    " does not match declared sample shape " +
                                    shape_str(per_sample));
    }

    Tensor<T> apply_map(const Tensor<T>& M, const Tensor<T>& z) const {
        if (z.shape.size() != 2 || z.shape[1] != static_cast<std::size_t>(meta.latent_dim))
            throw ContractError("latent map: expected [N," + std::to_string(meta.latent_dim) +
                                "], got " + shape_str(z.shape));
        if (meta.identity_maps) return z;
        const std::size_t N = z.shape[0], L = meta.latent_dim;
        Tensor<T> out({N, L});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < L; ++i) {
                double s = 0;
                for (std::size_t k = 0; k < L; ++k)
                    s += static_cast<double>(M[i * L + k]) * z.at2(n, k);
                out.at2(n, i) = static_cast<T>(s);
            }
        return out;
    }
};

// Wrap a single sample into a batch of one.
template <class T>
Tensor<T> batch_of_one(const Tensor<T>& x) {
    Tensor<T> out = x;
    out.shape.insert(out.shape.begin(), 1);
    return out;
}

template <class T>
Tensor<T> unbatch(const Tensor<T>& x) {
    Tensor<T> out = x;
    out.shape.erase(out.shape.begin());
    return out;
}

}  // namespace pinv
