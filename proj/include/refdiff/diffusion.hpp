#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refdiff/schedule.hpp"
#include "refdiff/unet.hpp"

namespace refdiff {

// ---------------------------------------------------------------------------
// Latent codec: identity pixel-space mapping to [-1,1], optionally packing
// 2x2 spatial blocks into channels (space-to-depth). The mechanism under test
// lives in the U-Net; the codec just houses the encode/decode symbols.
// ---------------------------------------------------------------------------

struct LatentCodec {
    int packing = 1;  // 1 (identity) or 2

    int latent_channels() const { return 3 * packing * packing; }
    int latent_size(int image_size) const { return image_size / packing; }

    Tensor encode(const Tensor& img01) const {
        if (img01.rank() != 4 || img01.dim(1) != 3)
            throw dimension_error("codec expects [1,3,h,w] image, got " + shape_str(img01.shape));
        const int h = img01.dim(2), w = img01.dim(3);
        if (packing == 1) {
            Tensor z(img01.shape);
            for (int64_t i = 0; i < z.numel(); ++i) z[i] = img01[i] * 2.0f - 1.0f;
            return z;
        }
        if (h % packing != 0 || w % packing != 0)
            throw dimension_error("image size not divisible by packing factor");
        Tensor z(Shape{1, latent_channels(), h / packing, w / packing});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const int oc = (c * packing + y % packing) * packing + x % packing;
                    z[z.offset4(0, oc, y / packing, x / packing)] =
                        img01[img01.offset4(0, c, y, x)] * 2.0f - 1.0f;
                }
        return z;
    }

    Tensor decode(const Tensor& z) const {
        if (packing == 1) {
            Tensor img(z.shape);
            for (int64_t i = 0; i < z.numel(); ++i) img[i] = std::clamp((z[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
            return img;
        }
        const int hh = z.dim(2), ww = z.dim(3);
        Tensor img(Shape{1, 3, hh * packing, ww * packing});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < hh * packing; ++y)
                for (int x = 0; x < ww * packing; ++x) {
                    const int oc = (c * packing + y % packing) * packing + x % packing;
                    img[img.offset4(0, c, y, x)] =
                        std::clamp((z[z.offset4(0, oc, y / packing, x / packing)] + 1.0f) * 0.5f, 0.0f, 1.0f);
                }
        return img;
    }
};

// ---------------------------------------------------------------------------
// Condition dropout (classifier-free guidance training)
// ---------------------------------------------------------------------------

// First draw: with p_all, drop every reference, the pose, and the caption
// (this is the unconditional branch used for guidance). Otherwise each
// reference is dropped independently with p_each.
inline ConditionBundle dropout_conditions(const ConditionBundle& cond, Rng& rng, double p_all = 0.2,
                                          double p_each = 0.2) {
    if (p_all < 0 || p_all > 1 || p_each < 0 || p_each > 1)
        throw config_error("dropout probabilities must lie in [0,1]");
    ConditionBundle out;
    if (rng.bernoulli(p_all)) {
        out.dropped_all = true;
        for (const auto& r : cond.refs) out.dropped_labels.push_back(r.label);
        return out;
    }
    out.pose  = cond.pose;
    out.attrs = cond.attrs;
    for (const auto& r : cond.refs) {
        if (rng.bernoulli(p_each))
            out.dropped_labels.push_back(r.label);
        else
            out.refs.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

struct TrainItem {
    Tensor z0;  // latent of the target image
    ConditionBundle cond;
};

// Injectable noise predictor, value-level. Default (null) runs the real
// denoiser + appearance encoder on a fresh graph.
using EpsStub = std::function<Tensor(const Tensor& z_t, int t, const ConditionBundle& cond)>;

// eps_theta for one sample on a fresh graph; returns predicted noise and, when
// grads is non-null, accumulates d(mse)/d(theta) into it.
inline float sample_loss(const Params& params, const UNetConfig& cfg, const Tensor& z0,
                         const ConditionBundle& cond, int t, const Tensor& eps, const NoiseSchedule& sched,
                         Variant variant, std::map<std::string, Tensor>* grads, const EpsStub* stub = nullptr,
                         int pose_stride = 1) {
    const Tensor z_t = q_sample(z0, t, eps, sched);
    if (stub && *stub) {
        const Tensor pred = (*stub)(z_t, t, cond);
        double acc        = 0;
        for (int64_t i = 0; i < pred.numel(); ++i) {
            const double d = double(eps[i]) - double(pred[i]);
            acc += d * d;
        }
        return float(acc / double(pred.numel()));
    }
    Graph g;
    ModelCtx m(g, params, grads != nullptr);
    auto enc = encode_condition<float>(m, cfg, cond, variant, pose_stride);
    Var vz(g, g.input(z_t, false));
    Var ve(g, g.input(eps, false));
    Var loss = mse(unet_forward(m, cfg, vz, t, enc), ve);
    const float value = loss.val()[0];
    if (!std::isfinite(value))
        throw numeric_error("non-finite training loss at t=" + std::to_string(t));
    if (grads) {
        g.backward(loss.id);
        for (const auto& [name, id] : m.bound()) {
            Tensor gt  = g.has_grad(id) ? g.grad(id) : Tensor::zeros(g.value(id).shape);
            auto [it, fresh] = grads->emplace(name, gt);
            if (!fresh)
                for (int64_t i = 0; i < gt.numel(); ++i) it->second[i] += gt[i];
        }
    }
    return value;
}

// Mean loss over a batch: per sample, conditions are dropout'ed, t is uniform
// on [0,T), eps is standard normal. Per-sample RNG streams split from `rng`.
inline float training_loss(const Params& params, const UNetConfig& cfg, const std::vector<TrainItem>& batch,
                           const NoiseSchedule& sched, Rng& rng, Variant variant = Variant::full,
                           double p_all = 0.2, double p_each = 0.2,
                           std::map<std::string, Tensor>* grads = nullptr, const EpsStub* stub = nullptr,
                           int pose_stride = 1) {
    if (batch.empty()) throw validation_error("training_loss: empty batch");
    const Rng base(rng.next_u64());  // advances the master stream
    double total = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        Rng rs = base.split(uint64_t(i));  // per-sample stream
        ConditionBundle cond = dropout_conditions(batch[i].cond, rs, p_all, p_each);
        const int t          = int(rs.below(uint64_t(sched.T)));
        Tensor eps(batch[i].z0.shape);
        for (auto& v : eps.data) v = float(rs.normal());
        total += sample_loss(params, cfg, batch[i].z0, cond, t, eps, sched, variant, grads, stub, pose_stride);
    }
    const float mean = float(total / double(batch.size()));
    if (grads)
        for (auto& [k, v] : *grads)
            for (auto& x : v.data) x /= float(batch.size());
    return mean;
}

// ---------------------------------------------------------------------------
// DDIM sampling with classifier-free guidance
// ---------------------------------------------------------------------------

struct SamplerConfig {
    int ddim_steps        = 50;
    double guidance_scale = 7.5;  // paper value; the desk RunConfig default is 2.0
    double eta            = 0.0;
};

// Value-level snapshot of an encoded condition, so the appearance encoder runs
// once per sampled image while each denoising step uses a fresh graph.
struct CondValues {
    struct Entry {
        Tensor feat;
        std::vector<uint8_t> keep;
        int label = -1;
    };
    std::vector<std::vector<Entry>> cache_layers;
    std::optional<Tensor> pose_feat, caption_tokens, ref_tokens;
    bool use_masks = true;
    bool empty() const {
        return cache_layers.empty() && !pose_feat && !caption_tokens && !ref_tokens;
    }
};

inline CondValues snapshot_condition(const EncodedCondition& e) {
    CondValues v;
    v.use_masks = e.use_masks;
    for (const auto& layer : e.cache.layers) {
        std::vector<CondValues::Entry> l;
        for (const auto& entry : layer) l.push_back({entry.feat.val(), entry.keep, entry.label});
        v.cache_layers.push_back(std::move(l));
    }
    if (e.pose_feat) v.pose_feat = e.pose_feat->val();
    if (e.caption_tokens) v.caption_tokens = e.caption_tokens->val();
    if (e.ref_tokens) v.ref_tokens = e.ref_tokens->val();
    return v;
}

inline EncodedCondition bind_condition(Graph& g, const CondValues& v) {
    EncodedCondition e;
    e.use_masks = v.use_masks;
    for (const auto& layer : v.cache_layers) {
        std::vector<RefCacheEntryT<float>> l;
        for (const auto& entry : layer)
            l.push_back({Var(g, g.constant(entry.feat)), entry.keep, entry.label});
        e.cache.layers.push_back(std::move(l));
        e.cache.num_refs = int(e.cache.layers.back().size());
    }
    if (v.pose_feat) e.pose_feat = Var(g, g.constant(*v.pose_feat));
    if (v.caption_tokens) e.caption_tokens = Var(g, g.constant(*v.caption_tokens));
    if (v.ref_tokens) e.ref_tokens = Var(g, g.constant(*v.ref_tokens));
    return e;
}

struct SampleResult {
    Tensor image;   // decoded [1,3,S,S] in [0,1]
    Tensor z0;      // final latent before decoding
    Tensor z_init;  // the initial noise z_T
};

// DDIM with a uniform-stride timestep subsequence. eta=0 update:
//   z_{t'} = sqrt(ab_{t'}) * (z_t - sqrt(1-ab_t) eps_hat) / sqrt(ab_t)
//          + sqrt(1-ab_{t'}) * eps_hat
// Guidance: eps_hat = eps_uncond + s (eps_cond - eps_uncond); s == 1 skips the
// unconditional pass entirely, so the trajectory is the conditional one
// bit-for-bit.
inline SampleResult ddim_sample(const Params& params, const UNetConfig& cfg, const ConditionBundle& cond,
                                const NoiseSchedule& sched, const SamplerConfig& sc, Rng& rng,
                                const LatentCodec& codec, Variant variant = Variant::full,
                                bool has_uncond_branch = true, const EpsStub* stub = nullptr,
                                int pose_stride = 1) {
    if (sc.ddim_steps < 1 || sc.ddim_steps > sched.T)
        throw config_error("ddim_steps " + std::to_string(sc.ddim_steps) + " outside [1, T=" +
                           std::to_string(sched.T) + "]");
    if (sc.eta < 0.0 || sc.eta > 1.0) throw config_error("eta must lie in [0,1]");
    if (sc.guidance_scale != 1.0 && !has_uncond_branch)
        throw config_error("guidance requested but the checkpoint was trained without an unconditional branch "
                           "(p_drop_all == 0)");

    // encoder runs once per sampled image, not per step
    CondValues cv;
    if (!cond.empty()) {
        Graph g;
        ModelCtx m(g, params, false);
        cv = snapshot_condition(encode_condition<float>(m, cfg, cond, variant, pose_stride));
    }
    const CondValues uncond;  // empty bundle = unconditional branch

    const int S = cfg.image_size;
    Tensor z(Shape{1, cfg.in_channels, S, S});
    for (auto& v : z.data) v = float(rng.normal());
    const Tensor z_init = z;

    auto eps_at = [&](const Tensor& z_t, int t, const CondValues& c) -> Tensor {
        if (stub && *stub) return (*stub)(z_t, t, cond);
        Graph g;
        ModelCtx m(g, params, false);
        EncodedCondition e = bind_condition(g, c);
        Var vz(g, g.input(z_t, false));
        return unet_forward(m, cfg, vz, t, e).val();
    };

    std::vector<int> ts(size_t(sc.ddim_steps));
    for (int i = 0; i < sc.ddim_steps; ++i) ts[size_t(i)] = int((int64_t(i) * sched.T) / sc.ddim_steps);

    for (int i = sc.ddim_steps - 1; i >= 0; --i) {
        const int t       = ts[size_t(i)];
        const int t_prev  = (i > 0) ? ts[size_t(i - 1)] : -1;
        const double ab_t = sched.alpha_bar[size_t(t)];
        const double ab_p = (t_prev >= 0) ? sched.alpha_bar[size_t(t_prev)] : 1.0;

        Tensor eps_hat = eps_at(z, t, cv);
        if (sc.guidance_scale != 1.0) {
            const Tensor eps_unc = eps_at(z, t, uncond);
            const float s        = float(sc.guidance_scale);
            for (int64_t j = 0; j < eps_hat.numel(); ++j)
                eps_hat[j] = eps_unc[j] + s * (eps_hat[j] - eps_unc[j]);
        }

        const double sigma =
            sc.eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
        const float c_z   = float(std::sqrt(ab_p / ab_t));
        const float c_eps = float(std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma)) -
                                  std::sqrt(ab_p / ab_t) * std::sqrt(1.0 - ab_t));
        for (int64_t j = 0; j < z.numel(); ++j) z[j] = c_z * z[j] + c_eps * eps_hat[j];
        if (sigma > 0.0)
            for (int64_t j = 0; j < z.numel(); ++j) z[j] += float(sigma * rng.normal());
        if (!z.all_finite()) throw numeric_error("non-finite latent during sampling at t=" + std::to_string(t));
    }

    SampleResult out;
    out.z0     = z;
    out.z_init = z_init;
    out.image  = codec.decode(z);
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, Tensor> m, v;
    int64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline void adam_update(Params& params, AdamState& st, const std::map<std::string, Tensor>& grads, double lr) {
    st.step += 1;
    const double c1 = 1.0 - std::pow(st.beta1, double(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, double(st.step));
    for (auto& [name, g] : grads) {
        Tensor& p = params.t.at(name);
        auto mi   = st.m.emplace(name, Tensor::zeros(p.shape)).first;
        auto vi   = st.v.emplace(name, Tensor::zeros(p.shape)).first;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gi = double(g[i]);
            const double m  = double(mi->second[i]) * st.beta1 + (1.0 - st.beta1) * gi;
            const double v  = double(vi->second[i]) * st.beta2 + (1.0 - st.beta2) * gi * gi;
            mi->second[i]   = float(m);
            vi->second[i]   = float(v);
            p[i] -= float(lr * (m / c1) / (std::sqrt(v / c2) + st.eps));
        }
    }
}

}  // namespace refdiff
