#pragma once

#include <atomic>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refdiff/attention.hpp"
#include "refdiff/ops.hpp"

namespace refdiff {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct UNetConfig {
    int image_size    = 32;  // spatial size of the latent the denoiser sees
    int in_channels   = 3;
    int base_channels = 16;
    std::vector<int> channel_mult     = {1, 2};
    std::vector<int> attn_resolutions = {16, 8};
    int heads          = 4;
    int token_dim      = 32;
    int temb_dim       = 64;
    int label_vocab    = 6;  // six-part taxonomy; the desk corpus uses four of them
    int attr_dim       = 8;
    int caption_tokens = 4;
    int ref_tokens     = 4;  // image tokens per reference

    int levels() const { return int(channel_mult.size()); }
    int channels(int level) const { return base_channels * channel_mult[size_t(level)]; }
    bool attends(int resolution) const {
        for (int r : attn_resolutions)
            if (r == resolution) return true;
        return false;
    }
};

enum class Variant { full, no_labels, no_mask };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_labels: return "no_labels";
        default: return "no_mask";
    }
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "full") return Variant::full;
    if (s == "no_labels") return Variant::no_labels;
    if (s == "no_mask") return Variant::no_mask;
    throw config_error("unknown variant '" + s + "' (expected full|no_labels|no_mask)");
}

// Largest group count <= 8 that divides the channel count.
inline int norm_groups(int channels) {
    for (int g = std::min(8, channels); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

// One attention site: a block whose resolution is in attn_resolutions. Site
// order is forward order (down levels, middle, up levels); the reference cache
// is keyed by this ordinal.
struct AttentionSite {
    std::string block;  // "down1", "mid", "up1", ...
    int resolution = 0;
    int channels   = 0;
};

inline std::vector<AttentionSite> attention_sites(const UNetConfig& cfg, int input_size) {
    std::vector<AttentionSite> sites;
    const int L = cfg.levels();
    for (int i = 0; i < L; ++i) {
        const int r = input_size >> i;
        if (cfg.attends(r)) sites.push_back({"down" + std::to_string(i), r, cfg.channels(i)});
    }
    const int rm = input_size >> (L - 1);
    if (cfg.attends(rm)) sites.push_back({"mid", rm, cfg.channels(L - 1)});
    for (int i = L - 1; i >= 0; --i) {
        const int r = input_size >> i;
        if (cfg.attends(r)) sites.push_back({"up" + std::to_string(i), r, cfg.channels(i)});
    }
    return sites;
}

// ---------------------------------------------------------------------------
// Parameter store and graph binding
// ---------------------------------------------------------------------------

template <typename S>
struct ParamsT {
    std::map<std::string, TensorT<S>> t;

    template <typename T>
    ParamsT<T> cast() const {
        ParamsT<T> out;
        for (const auto& [k, v] : t) out.t.emplace(k, v.template cast<T>());
        return out;
    }
};

using Params = ParamsT<float>;

// Binds named parameters onto one graph as leaves, lazily, one leaf per name.
// After backward, grads are read back through the binding map (deterministic
// order: std::map iteration).
template <typename S>
class ModelCtxT {
public:
    ModelCtxT(GraphT<S>& g, const ParamsT<S>& params, bool trainable = true)
        : g_(&g), params_(&params), trainable_(trainable) {}

    VarT<S> operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return VarT<S>(*g_, it->second);
        auto pit = params_->t.find(name);
        if (pit == params_->t.end()) throw config_error("unknown parameter '" + name + "'");
        const int id = g_->input(pit->second, trainable_);
        bound_.emplace(name, id);
        return VarT<S>(*g_, id);
    }

    GraphT<S>& graph() { return *g_; }
    const std::map<std::string, int>& bound() const { return bound_; }

private:
    GraphT<S>* g_;
    const ParamsT<S>* params_;
    bool trainable_;
    std::map<std::string, int> bound_;
};

using ModelCtx = ModelCtxT<float>;

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace init_detail {

inline Tensor conv_w(int oc, int ic, int k, Rng& rng) {
    const float s = 1.0f / std::sqrt(float(ic * k * k));
    return Tensor::randn({oc, ic, k, k}, rng, s);
}

inline Tensor lin_w(int in, int out, Rng& rng) {
    return Tensor::randn({in, out}, rng, 1.0f / std::sqrt(float(in)));
}

inline void res_block_params(Params& p, const std::string& pre, int cin, int cout, int temb_dim, Rng& rng) {
    p.t[pre + ".norm1.g"] = Tensor::full({cin}, 1.0f);
    p.t[pre + ".norm1.b"] = Tensor::zeros({cin});
    p.t[pre + ".conv1.w"] = conv_w(cout, cin, 3, rng);
    p.t[pre + ".conv1.b"] = Tensor::zeros({cout});
    p.t[pre + ".temb.w"]  = lin_w(temb_dim, cout, rng);
    p.t[pre + ".temb.b"]  = Tensor::zeros({cout});
    p.t[pre + ".norm2.g"] = Tensor::full({cout}, 1.0f);
    p.t[pre + ".norm2.b"] = Tensor::zeros({cout});
    p.t[pre + ".conv2.w"] = conv_w(cout, cout, 3, rng);
    p.t[pre + ".conv2.b"] = Tensor::zeros({cout});
    if (cin != cout) {
        p.t[pre + ".skip.w"] = conv_w(cout, cin, 1, rng);
        p.t[pre + ".skip.b"] = Tensor::zeros({cout});
    }
}

inline void attn_block_params(Params& p, const std::string& pre, int c, int token_dim, Rng& rng) {
    p.t[pre + ".attn.norm.g"] = Tensor::full({c}, 1.0f);
    p.t[pre + ".attn.norm.b"] = Tensor::zeros({c});
    p.t[pre + ".attn.wq"]     = lin_w(c, c, rng);
    p.t[pre + ".attn.wk"]     = lin_w(c, c, rng);
    p.t[pre + ".attn.wv"]     = lin_w(c, c, rng);
    p.t[pre + ".attn.wo"]     = Tensor::zeros({c, c});  // attention blocks start as identity
    p.t[pre + ".cross.norm.g"] = Tensor::full({c}, 1.0f);
    p.t[pre + ".cross.norm.b"] = Tensor::zeros({c});
    p.t[pre + ".cross.t.wq"]   = lin_w(c, c, rng);
    p.t[pre + ".cross.t.wk"]   = lin_w(token_dim, c, rng);
    p.t[pre + ".cross.t.wv"]   = lin_w(token_dim, c, rng);
    p.t[pre + ".cross.t.wo"]   = Tensor::zeros({c, c});
    p.t[pre + ".cross.i.wq"]   = lin_w(c, c, rng);
    p.t[pre + ".cross.i.wk"]   = Tensor::zeros({token_dim, c});  // adapter-style zero init
    p.t[pre + ".cross.i.wv"]   = Tensor::zeros({token_dim, c});
    p.t[pre + ".cross.i.wo"]   = Tensor::zeros({c, c});
}

inline void unet_params(Params& p, const std::string& net, const UNetConfig& cfg, Rng& rng) {
    const int L = cfg.levels();
    p.t[net + ".in_conv.w"] = conv_w(cfg.base_channels, cfg.in_channels, 3, rng);
    p.t[net + ".in_conv.b"] = Tensor::zeros({cfg.base_channels});
    p.t[net + ".temb.w1"]   = lin_w(cfg.temb_dim, cfg.temb_dim, rng);
    p.t[net + ".temb.b1"]   = Tensor::zeros({cfg.temb_dim});
    p.t[net + ".temb.w2"]   = lin_w(cfg.temb_dim, cfg.temb_dim, rng);
    p.t[net + ".temb.b2"]   = Tensor::zeros({cfg.temb_dim});

    int cin = cfg.base_channels;
    for (int i = 0; i < L; ++i) {
        const std::string pre = net + ".down" + std::to_string(i);
        res_block_params(p, pre + ".res", cin, cfg.channels(i), cfg.temb_dim, rng);
        attn_block_params(p, pre, cfg.channels(i), cfg.token_dim, rng);  // used only at attention resolutions
        cin = cfg.channels(i);
        if (i + 1 < L) {
            p.t[pre + ".down.w"] = conv_w(cin, cin, 3, rng);
            p.t[pre + ".down.b"] = Tensor::zeros({cin});
        }
    }
    const int cm = cfg.channels(L - 1);
    res_block_params(p, net + ".mid.res1", cm, cm, cfg.temb_dim, rng);
    attn_block_params(p, net + ".mid", cm, cfg.token_dim, rng);
    res_block_params(p, net + ".mid.res2", cm, cm, cfg.temb_dim, rng);

    for (int i = L - 1; i >= 0; --i) {
        const std::string pre = net + ".up" + std::to_string(i);
        res_block_params(p, pre + ".res", 2 * cfg.channels(i), cfg.channels(i), cfg.temb_dim, rng);
        attn_block_params(p, pre, cfg.channels(i), cfg.token_dim, rng);
        if (i > 0) {
            p.t[pre + ".upconv.w"] = conv_w(cfg.channels(i - 1), cfg.channels(i), 3, rng);
            p.t[pre + ".upconv.b"] = Tensor::zeros({cfg.channels(i - 1)});
        }
    }
    p.t[net + ".out.norm.g"] = Tensor::full({cfg.base_channels}, 1.0f);
    p.t[net + ".out.norm.b"] = Tensor::zeros({cfg.base_channels});
    p.t[net + ".out.conv.w"] = Tensor::zeros({cfg.in_channels, cfg.base_channels, 3, 3});  // eps_hat = 0 at init
    p.t[net + ".out.conv.b"] = Tensor::zeros({cfg.in_channels});
}

}  // namespace init_detail

// All four networks: denoiser ("den"), appearance encoder ("enc", initialized
// identically to the denoiser but trained separately), pose encoder ("pose"),
// token encoders ("tok").
inline Params init_params(const UNetConfig& cfg, uint64_t seed, int pose_stride = 1) {
    Params p;
    Rng rng(seed);
    init_detail::unet_params(p, "den", cfg, rng);
    for (const auto& [k, v] : std::map<std::string, Tensor>(p.t))  // copy: identical init
        if (k.rfind("den.", 0) == 0) p.t["enc." + k.substr(4)] = v;

    p.t["pose.conv1.w"] = init_detail::conv_w(8, 3, 3, rng);
    p.t["pose.conv1.b"] = Tensor::zeros({8});
    p.t["pose.conv2.w"] = init_detail::conv_w(16, 8, 3, rng);
    p.t["pose.conv2.b"] = Tensor::zeros({16});
    p.t["pose.conv3.w"] = Tensor::zeros({cfg.base_channels, 16, 3, 3});  // zero contribution at init
    p.t["pose.conv3.b"] = Tensor::zeros({cfg.base_channels});
    (void)pose_stride;

    p.t["tok.label.table"]   = Tensor::randn({cfg.label_vocab, cfg.token_dim}, rng);
    p.t["tok.caption.w"]     = init_detail::lin_w(cfg.attr_dim, cfg.caption_tokens * cfg.token_dim, rng);
    p.t["tok.caption.b"]     = Tensor::zeros({cfg.caption_tokens * cfg.token_dim});
    p.t["tok.refimg.conv1.w"] = init_detail::conv_w(8, 3, 3, rng);
    p.t["tok.refimg.conv1.b"] = Tensor::zeros({8});
    p.t["tok.refimg.conv2.w"] = init_detail::conv_w(16, 8, 3, rng);
    p.t["tok.refimg.conv2.b"] = Tensor::zeros({16});
    p.t["tok.refimg.proj.w"]  = init_detail::lin_w(16, cfg.ref_tokens * cfg.token_dim, rng);
    p.t["tok.refimg.proj.b"]  = Tensor::zeros({cfg.ref_tokens * cfg.token_dim});
    return p;
}

// ---------------------------------------------------------------------------
// Condition types
// ---------------------------------------------------------------------------

// One reference part: image canvas, binary subject mask, class label.
struct RefPart {
    Tensor image;  // [1,3,h,w], values in [0,1]
    MaskLevel mask;
    int label = -1;
};

// Data-level per-sample condition state. Dropout operates here; the flags stay
// consistent with component presence.
struct ConditionBundle {
    std::vector<RefPart> refs;
    std::optional<Tensor> pose;   // [1,3,S,S] skeleton raster in [0,1]
    std::optional<Tensor> attrs;  // [attr_dim] identity attributes (caption source)
    bool dropped_all = false;
    std::vector<int> dropped_labels;

    bool empty() const { return refs.empty() && !pose && !attrs; }
};

// Graph-bound cache entry: the feature captured immediately before one
// self-attention layer, with the matching mask-pyramid level and class label.
template <typename S>
struct RefCacheEntryT {
    VarT<S> feat;               // [hw, d]
    std::vector<uint8_t> keep;  // pyramid level bitmap, size hw
    int label = -1;
};

template <typename S>
struct ReferenceFeatureCacheT {
    std::vector<std::vector<RefCacheEntryT<S>>> layers;  // [site][reference]
    int num_refs = 0;
    bool empty() const { return num_refs == 0; }
};

// Graph-bound condition: everything unet_forward consumes.
template <typename S>
struct EncodedConditionT {
    ReferenceFeatureCacheT<S> cache;
    std::optional<VarT<S>> pose_feat;       // [1, base, S, S]
    std::optional<VarT<S>> caption_tokens;  // [caption_tokens, token_dim]
    std::optional<VarT<S>> ref_tokens;      // [K*N, token_dim]
    bool use_masks = true;
};

using EncodedCondition = EncodedConditionT<float>;

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

namespace net_detail {

template <typename S>
VarT<S> flatten_hw(VarT<S> x) {  // [1,c,h,w] -> [hw, c]
    const auto& sh = x.shape();
    return transpose2d(reshape(x, Shape{sh[1], sh[2] * sh[3]}));
}

template <typename S>
VarT<S> unflatten_hw(VarT<S> f, int c, int h, int w) {  // [hw, c] -> [1,c,h,w]
    return reshape(transpose2d(f), Shape{1, c, h, w});
}

template <typename S>
VarT<S> linear(ModelCtxT<S>& m, const std::string& pre, VarT<S> x) {
    return add_row_bias(matmul(x, m(pre + ".w")), m(pre + ".b"));
}

// Sinusoidal embedding of a scalar timestep, then a 2-layer MLP.
template <typename S>
VarT<S> timestep_embedding(ModelCtxT<S>& m, const std::string& net, const UNetConfig& cfg, S t) {
    const int half = cfg.temb_dim / 2;
    TensorT<S> emb(Shape{1, cfg.temb_dim});
    for (int i = 0; i < half; ++i) {
        const S f = std::exp(S(-std::log(10000.0)) * S(i) / S(std::max(1, half - 1)));
        emb[i]        = std::cos(t * f);
        emb[half + i] = std::sin(t * f);
    }
    VarT<S> e(m.graph(), m.graph().constant(std::move(emb)));
    VarT<S> h = silu(add_row_bias(matmul(e, m(net + ".temb.w1")), m(net + ".temb.b1")));
    return add_row_bias(matmul(h, m(net + ".temb.w2")), m(net + ".temb.b2"));
}

template <typename S>
VarT<S> res_block(ModelCtxT<S>& m, const std::string& pre, VarT<S> x, VarT<S> temb, int cin, int cout) {
    VarT<S> h = group_norm(x, norm_groups(cin), m(pre + ".norm1.g"), m(pre + ".norm1.b"), S(1e-5));
    h         = conv2d(silu(h), m(pre + ".conv1.w"), 1, 1);
    h         = add_channel_bias(h, m(pre + ".conv1.b"));
    VarT<S> tv = add_row_bias(matmul(silu(temb), m(pre + ".temb.w")), m(pre + ".temb.b"));
    h          = add_spatial_broadcast(h, tv);
    h = group_norm(h, norm_groups(cout), m(pre + ".norm2.g"), m(pre + ".norm2.b"), S(1e-5));
    h = add_channel_bias(conv2d(silu(h), m(pre + ".conv2.w"), 1, 1), m(pre + ".conv2.b"));
    VarT<S> skip = x;
    if (cin != cout) skip = add_channel_bias(conv2d(x, m(pre + ".skip.w"), 1, 0), m(pre + ".skip.b"));
    return add(h, skip);
}

template <typename S>
AttentionParamsT<S> attn_params(ModelCtxT<S>& m, const std::string& pre, int heads) {
    return AttentionParamsT<S>{m(pre + ".wq"), m(pre + ".wk"), m(pre + ".wv"), m(pre + ".wo"), heads};
}

}  // namespace net_detail

// ---------------------------------------------------------------------------
// U-Net core (shared by denoiser and appearance encoder)
// ---------------------------------------------------------------------------

// In encoder mode (tap != nullptr), the post-norm flattened feature entering
// each self-attention layer is appended to *tap in site order, the attention is
// plain self-attention, and the cross branch consumes encoder_text (class
// label tokens). In denoiser mode the cache extends keys/values and the cross
// branch consumes caption + reference image tokens.
template <typename S>
struct UNetRun {
    ModelCtxT<S>& m;
    const UNetConfig& cfg;
    std::string net;                               // "den" or "enc"
    const EncodedConditionT<S>* cond = nullptr;    // denoiser mode
    std::vector<VarT<S>>* tap = nullptr;           // encoder mode
    std::optional<VarT<S>> encoder_text;           // encoder mode cross tokens
    Shape* bottleneck_probe = nullptr;
};

namespace net_detail {

template <typename S>
VarT<S> attention_block(UNetRun<S>& run, const std::string& pre, VarT<S> h, int c, int hh, int ww, int site_idx) {
    ModelCtxT<S>& m = run.m;
    VarT<S> f0 = flatten_hw(group_norm(h, norm_groups(c), m(pre + ".attn.norm.g"), m(pre + ".attn.norm.b"), S(1e-5)));
    auto p_self = attn_params(m, pre + ".attn", run.cfg.heads);

    VarT<S> attn_out;
    if (run.tap) {
        run.tap->push_back(f0);  // cached feature: exactly what this layer attends over
        attn_out = self_attention(f0, p_self);
    } else {
        std::vector<VarT<S>> refs;
        std::vector<std::vector<uint8_t>> keeps;
        if (run.cond && !run.cond->cache.empty()) {
            const auto& layer = run.cond->cache.layers.at(size_t(site_idx));
            for (const auto& entry : layer) {
                refs.push_back(entry.feat);
                keeps.push_back(entry.keep);
            }
        }
        if (refs.empty())
            attn_out = self_attention(f0, p_self);
        else if (run.cond->use_masks)
            attn_out = mask_guided_attention(f0, refs, keeps, p_self);
        else
            attn_out = shared_self_attention(f0, refs, p_self);
    }
    h = add(h, unflatten_hw(attn_out, c, hh, ww));

    // decoupled cross-attention
    VarT<S> f = flatten_hw(
        group_norm(h, norm_groups(c), m(pre + ".cross.norm.g"), m(pre + ".cross.norm.b"), S(1e-5)));
    std::optional<VarT<S>> text, image;
    if (run.tap) {
        text = run.encoder_text;
    } else if (run.cond) {
        text  = run.cond->caption_tokens;
        image = run.cond->ref_tokens;
    }
    auto pt = attn_params(m, pre + ".cross.t", run.cfg.heads);
    auto pi = attn_params(m, pre + ".cross.i", run.cfg.heads);
    VarT<S> cross = decoupled_cross_attention(f, text, image, pt, pi);
    return add(h, unflatten_hw(cross, c, hh, ww));
}

}  // namespace net_detail

template <typename S>
VarT<S> unet_run(UNetRun<S>& run, VarT<S> z, S t_value, std::optional<VarT<S>> pose_feat = std::nullopt) {
    using namespace net_detail;
    ModelCtxT<S>& m      = run.m;
    const UNetConfig& c  = run.cfg;
    const std::string& n = run.net;
    const auto& zs       = z.shape();
    if (zs.size() != 4 || zs[0] != 1 || zs[1] != c.in_channels)
        throw dimension_error("unet input must be [1," + std::to_string(c.in_channels) + ",h,w], got " +
                              shape_str(z.val().shape));
    const int size = zs[2];
    const int L    = c.levels();

    VarT<S> temb = timestep_embedding(m, n, c, t_value);
    VarT<S> h    = add_channel_bias(conv2d(z, m(n + ".in_conv.w"), 1, 1), m(n + ".in_conv.b"));
    if (pose_feat) h = add(h, *pose_feat);  // pose features join the initial feature maps

    int site = 0;
    std::vector<VarT<S>> skips;
    int cin = c.base_channels;
    for (int i = 0; i < L; ++i) {
        const std::string pre = n + ".down" + std::to_string(i);
        const int r           = size >> i;
        h   = res_block(m, pre + ".res", h, temb, cin, c.channels(i));
        cin = c.channels(i);
        if (c.attends(r)) h = attention_block(run, pre, h, cin, r, h.shape()[3], site++);
        skips.push_back(h);
        if (i + 1 < L)
            h = add_channel_bias(conv2d(h, m(pre + ".down.w"), 2, 1), m(pre + ".down.b"));
    }

    const int rm = size >> (L - 1);
    const int cm = c.channels(L - 1);
    if (run.bottleneck_probe) *run.bottleneck_probe = h.shape();
    h = res_block(m, n + ".mid.res1", h, temb, cm, cm);
    if (c.attends(rm)) h = attention_block(run, n + ".mid", h, cm, rm, h.shape()[3], site++);
    h = res_block(m, n + ".mid.res2", h, temb, cm, cm);

    for (int i = L - 1; i >= 0; --i) {
        const std::string pre = n + ".up" + std::to_string(i);
        const int r           = size >> i;
        h = concat<S>({h, skips[size_t(i)]}, 1);
        h = res_block(m, pre + ".res", h, temb, 2 * c.channels(i), c.channels(i));
        if (c.attends(r)) h = attention_block(run, pre, h, c.channels(i), r, h.shape()[3], site++);
        if (i > 0) {
            h = upsample_nearest2(h);
            h = add_channel_bias(conv2d(h, m(pre + ".upconv.w"), 1, 1), m(pre + ".upconv.b"));
        }
    }

    h = group_norm(h, norm_groups(c.base_channels), m(n + ".out.norm.g"), m(n + ".out.norm.b"), S(1e-5));
    return add_channel_bias(conv2d(silu(h), m(n + ".out.conv.w"), 1, 1), m(n + ".out.conv.b"));
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

inline std::atomic<uint64_t>& appearance_encode_calls() {
    static std::atomic<uint64_t> n{0};
    return n;
}

// Label ids -> one token each.
template <typename S>
VarT<S> label_embed(ModelCtxT<S>& m, const std::vector<int>& label_ids) {
    return embed(m("tok.label.table"), label_ids);
}

// Identity attribute vector -> caption token sequence (learned projection).
template <typename S>
VarT<S> caption_encode(ModelCtxT<S>& m, const UNetConfig& cfg, const TensorT<S>& attrs) {
    if (attrs.numel() != cfg.attr_dim)
        throw dimension_error("caption_encode expects " + std::to_string(cfg.attr_dim) + " attributes, got " +
                              shape_str(attrs.shape));
    TensorT<S> row(Shape{1, cfg.attr_dim}, attrs.data);
    VarT<S> v(m.graph(), m.graph().constant(std::move(row)));
    VarT<S> t = net_detail::linear(m, "tok.caption", v);
    return reshape(t, Shape{cfg.caption_tokens, cfg.token_dim});
}

// Reference images -> K tokens per reference, concatenated in input order.
template <typename S>
std::optional<VarT<S>> ref_image_tokens(ModelCtxT<S>& m, const UNetConfig& cfg,
                                        const std::vector<TensorT<S>>& ref_images) {
    if (ref_images.empty()) return std::nullopt;
    std::vector<VarT<S>> all;
    for (const auto& img : ref_images) {
        VarT<S> x(m.graph(), m.graph().constant(img));
        x = silu(add_channel_bias(conv2d(x, m("tok.refimg.conv1.w"), 2, 1), m("tok.refimg.conv1.b")));
        x = silu(add_channel_bias(conv2d(x, m("tok.refimg.conv2.w"), 2, 1), m("tok.refimg.conv2.b")));
        // global average pool per channel: [1,c,h,w] -> [1,c]
        const auto& sh = x.shape();
        VarT<S> cm = reshape(x, Shape{sh[1], sh[2] * sh[3]});
        TensorT<S> pool(Shape{sh[2] * sh[3], 1});
        for (auto& vv : pool.data) vv = S(1) / S(sh[2] * sh[3]);
        VarT<S> poolv(m.graph(), m.graph().constant(std::move(pool)));
        VarT<S> feat = transpose2d(matmul(cm, poolv));  // [1, c]
        VarT<S> toks = net_detail::linear(m, "tok.refimg.proj", feat);
        all.push_back(reshape(toks, Shape{cfg.ref_tokens, cfg.token_dim}));
    }
    return concat<S>(all, 0);
}

// Pose raster -> level-0 feature map. Final projection is zero-initialized so
// the initial contribution is exactly zero.
template <typename S>
VarT<S> pose_encode(ModelCtxT<S>& m, const UNetConfig& cfg, const TensorT<S>& pose, int stride = 1) {
    if (pose.rank() != 4 || pose.dim(1) != 3)
        throw dimension_error("pose raster must be [1,3,h,w], got " + shape_str(pose.shape));
    if (pose.dim(2) / stride != cfg.image_size)
        throw dimension_error("pose raster " + shape_str(pose.shape) + " does not map to latent size " +
                              std::to_string(cfg.image_size));
    VarT<S> x(m.graph(), m.graph().constant(pose));
    x = silu(add_channel_bias(conv2d(x, m("pose.conv1.w"), 1, 1), m("pose.conv1.b")));
    x = silu(add_channel_bias(conv2d(x, m("pose.conv2.w"), stride, 1), m("pose.conv2.b")));
    return add_channel_bias(conv2d(x, m("pose.conv3.w"), 1, 1), m("pose.conv3.b"));
}

// Runs the appearance encoder once per reference at timestep 0 (no noise, no
// RNG), caching the feature entering every self-attention layer along with the
// mask-pyramid level at that layer's resolution. width_concat packs all parts
// side by side and encodes them in a single pass without labels (the
// "no_labels" ablation).
template <typename S>
ReferenceFeatureCacheT<S> appearance_encode(ModelCtxT<S>& m, const UNetConfig& cfg,
                                            const std::vector<RefPart>& refs, bool with_labels = true,
                                            bool width_concat = false) {
    appearance_encode_calls().fetch_add(1);
    ReferenceFeatureCacheT<S> cache;
    if (refs.empty()) return cache;
    for (const auto& r : refs)
        if (with_labels && (r.label < 0 || r.label >= cfg.label_vocab))
            throw index_error("reference label " + std::to_string(r.label) + " outside vocabulary of " +
                              std::to_string(cfg.label_vocab));

    // assemble encoder inputs: one per reference, or one wide canvas
    struct EncInput {
        TensorT<S> z;
        MaskLevel mask;
        int label;
    };
    std::vector<EncInput> inputs;
    if (width_concat) {
        const int h = refs[0].image.dim(2);
        int wsum    = 0;
        for (const auto& r : refs) {
            if (r.image.dim(2) != h)
                throw dimension_error("width-concat references must share height");
            wsum += r.image.dim(3);
        }
        TensorT<S> wide(Shape{1, 3, h, wsum});
        MaskLevel wm{h, wsum, std::vector<uint8_t>(size_t(h) * wsum, 0)};
        int off = 0;
        for (const auto& r : refs) {
            const int w = r.image.dim(3);
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        wide[wide.offset4(0, c, y, off + x)] = S(r.image[r.image.offset4(0, c, y, x)]) * S(2) - S(1);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) wm.keep[size_t(y) * wsum + off + x] = r.mask.keep[size_t(y) * w + x];
            off += w;
        }
        inputs.push_back({std::move(wide), std::move(wm), -1});
    } else {
        for (const auto& r : refs) {
            TensorT<S> z(Shape{1, 3, r.image.dim(2), r.image.dim(3)});
            for (int64_t i = 0; i < z.numel(); ++i) z[i] = S(r.image[i]) * S(2) - S(1);
            inputs.push_back({std::move(z), r.mask, r.label});
        }
    }

    for (const auto& in : inputs) {
        const auto sites = attention_sites(cfg, in.z.dim(2));
        std::vector<std::pair<int, int>> res_list;
        for (const auto& s : sites) {
            const int f = in.z.dim(2) / s.resolution;
            res_list.emplace_back(in.mask.h / f, in.mask.w / f);
        }
        MaskPyramid pyr = build_mask_pyramid(in.mask, res_list);

        std::vector<VarT<S>> tap;
        UNetRun<S> run{m, cfg, "enc", nullptr, &tap, std::nullopt, nullptr};
        if (with_labels && in.label >= 0) run.encoder_text = label_embed(m, std::vector<int>{in.label});
        VarT<S> z(m.graph(), m.graph().constant(in.z));
        unet_run(run, z, S(0));  // timestep fixed at 0, single pass

        if (cache.layers.empty()) cache.layers.resize(tap.size());
        if (tap.size() != cache.layers.size())
            throw dimension_error("appearance encoder produced inconsistent attention layer count");
        for (size_t k = 0; k < tap.size(); ++k) {
            RefCacheEntryT<S> e;
            e.feat  = tap[k];
            e.keep  = pyr.levels[k].keep;
            e.label = in.label;
            cache.layers[k].push_back(std::move(e));
        }
        cache.num_refs += 1;
    }
    return cache;
}

// Builds the full graph-bound condition (cache + pose features + tokens) from
// the data-level bundle.
template <typename S>
EncodedConditionT<S> encode_condition(ModelCtxT<S>& m, const UNetConfig& cfg, const ConditionBundle& cond,
                                      Variant variant = Variant::full, int pose_stride = 1) {
    EncodedConditionT<S> out;
    out.use_masks = (variant != Variant::no_mask);
    if (!cond.refs.empty())
        out.cache = appearance_encode(m, cfg, cond.refs, variant != Variant::no_labels,
                                      variant == Variant::no_labels);
    if (cond.pose) out.pose_feat = pose_encode(m, cfg, cond.pose->template cast<S>(), pose_stride);
    if (cond.attrs) out.caption_tokens = caption_encode(m, cfg, cond.attrs->template cast<S>());
    if (!cond.refs.empty()) {
        std::vector<TensorT<S>> imgs;
        for (const auto& r : cond.refs) imgs.push_back(r.image.cast<S>());
        out.ref_tokens = ref_image_tokens(m, cfg, imgs);
    }
    return out;
}

// The denoising U-Net: epsilon_theta(z_t, cond, t).
template <typename S>
VarT<S> unet_forward(ModelCtxT<S>& m, const UNetConfig& cfg, VarT<S> z_t, int t,
                     const EncodedConditionT<S>& cond, Shape* bottleneck_probe = nullptr) {
    if (!cond.cache.empty()) {
        const auto sites = attention_sites(cfg, z_t.shape()[2]);
        if (cond.cache.layers.size() != sites.size())
            throw dimension_error("reference cache has " + std::to_string(cond.cache.layers.size()) +
                                  " attention layers, denoiser expects " + std::to_string(sites.size()));
    }
    UNetRun<S> run{m, cfg, "den", &cond, nullptr, std::nullopt, bottleneck_probe};
    return unet_run(run, z_t, S(t), cond.pose_feat);
}

}  // namespace refdiff
