#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "refdiff/ops.hpp"

namespace refdiff {

// Projection weights for one attention layer. Self-attention: wq/wk/wv/w_out all
// d x d. Cross-attention: wk/wv are token_dim x d.
template <typename S>
struct AttentionParamsT {
    VarT<S> wq, wk, wv, w_out;
    int heads = 1;
};

using AttentionParams   = AttentionParamsT<float>;
using AttentionParams64 = AttentionParamsT<double>;

// Per-attention-resolution binary subject masks. Level r is the >0 threshold of
// the previous level convolved with a full-ones kernel of the downsampling
// factor (equivalently a 2x2 max-pool per halving).
struct MaskLevel {
    int h = 0, w = 0;
    std::vector<uint8_t> keep;  // row-major, values in {0,1}
};

struct MaskPyramid {
    std::vector<MaskLevel> levels;

    const MaskLevel& level_for(int h, int w) const {
        for (const auto& l : levels)
            if (l.h == h && l.w == w) return l;
        throw dimension_error("mask pyramid has no level of size " + std::to_string(h) + "x" + std::to_string(w));
    }
};

inline MaskLevel maxpool2_mask(const MaskLevel& m) {
    MaskLevel out;
    out.h = m.h / 2;
    out.w = m.w / 2;
    out.keep.assign(size_t(out.h) * out.w, 0);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            int any = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) any |= m.keep[size_t(2 * y + dy) * m.w + (2 * x + dx)];
            out.keep[size_t(y) * out.w + x] = uint8_t(any);
        }
    return out;
}

// Resolutions must descend from the input resolution by factors of 2 (the input
// resolution itself is allowed as the first level).
inline MaskPyramid build_mask_pyramid(const MaskLevel& mask, const std::vector<std::pair<int, int>>& resolutions) {
    for (uint8_t v : mask.keep)
        if (v != 0 && v != 1) throw validation_error("mask pyramid input must be binary {0,1}");
    if (int64_t(mask.keep.size()) != int64_t(mask.h) * mask.w)
        throw dimension_error("mask size does not match extents");
    MaskPyramid pyr;
    MaskLevel cur = mask;
    for (const auto& [rh, rw] : resolutions) {
        while (cur.h > rh || cur.w > rw) {
            if (cur.h % 2 != 0 || cur.w % 2 != 0)
                throw dimension_error("mask pyramid resolution " + std::to_string(rh) + "x" + std::to_string(rw) +
                                      " not reachable from " + std::to_string(mask.h) + "x" + std::to_string(mask.w));
            cur = maxpool2_mask(cur);
        }
        if (cur.h != rh || cur.w != rw)
            throw dimension_error("mask pyramid resolution " + std::to_string(rh) + "x" + std::to_string(rw) +
                                  " not reachable from " + std::to_string(mask.h) + "x" + std::to_string(mask.w));
        pyr.levels.push_back(cur);
    }
    return pyr;
}

namespace detail {

// Shared core for self / shared / mask-guided attention. Queries come from f0
// only; keys and values span [f0 | refs...]. keep_masks, when non-empty, holds
// one binary bitmap per reference; masked-out reference positions receive
// additive -inf logits (exactly zero weight). f0's own positions are always
// attendable. Shapes stay static; no keys are deleted.
template <typename S>
VarT<S> attention_core(VarT<S> f0, const std::vector<VarT<S>>& refs,
                       const std::vector<std::vector<uint8_t>>& keep_masks, const AttentionParamsT<S>& p,
                       std::vector<VarT<S>>* weights_out = nullptr) {
    GraphT<S>& g = *f0.g;
    const auto& F = f0.val();
    if (F.rank() != 2) throw dimension_error("attention expects flattened (hw)xd input, got " + shape_str(F.shape));
    const int hw0 = F.dim(0), d = F.dim(1);
    if (p.wq.val().shape != Shape{d, d})
        throw dimension_error("attention feature dim " + std::to_string(d) + " does not match params " +
                              shape_str(p.wq.val().shape));
    if (p.heads <= 0 || d % p.heads != 0)
        throw dimension_error("heads " + std::to_string(p.heads) + " must divide feature dim " + std::to_string(d));
    for (const auto& r : refs)
        if (r.val().rank() != 2 || r.val().dim(1) != d)
            throw dimension_error("reference feature dim mismatch: " + shape_str(r.val().shape) + " vs d=" +
                                  std::to_string(d));
    if (!keep_masks.empty()) {
        if (keep_masks.size() != refs.size())
            throw dimension_error("one mask per reference required");
        for (size_t i = 0; i < refs.size(); ++i)
            if (int64_t(keep_masks[i].size()) != refs[i].val().dim(0))
                throw dimension_error("mask size " + std::to_string(keep_masks[i].size()) +
                                      " does not match reference positions " +
                                      std::to_string(refs[i].val().dim(0)));
    }

    VarT<S> kv_src = f0;
    if (!refs.empty()) {
        std::vector<VarT<S>> parts{f0};
        parts.insert(parts.end(), refs.begin(), refs.end());
        kv_src = concat<S>(parts, 0);
    }
    const int kv_len = kv_src.val().dim(0);

    VarT<S> q = matmul(f0, p.wq);
    VarT<S> k = matmul(kv_src, p.wk);
    VarT<S> v = matmul(kv_src, p.wv);

    // Additive mask over key positions; only materialized when a position is
    // actually masked out, so all-ones masks are graph-identical to no masks.
    std::optional<VarT<S>> row_mask;
    if (!keep_masks.empty()) {
        bool any_masked = false;
        for (const auto& m : keep_masks)
            for (uint8_t b : m)
                if (!b) any_masked = true;
        if (any_masked) {
            TensorT<S> mrow(Shape{1, kv_len});
            const S ninf = -std::numeric_limits<S>::infinity();
            int64_t off  = hw0;  // self positions stay 0
            for (const auto& m : keep_masks)
                for (uint8_t b : m) mrow[off++] = b ? S(0) : ninf;
            row_mask = VarT<S>(g, g.constant(std::move(mrow)));
        }
    }

    const int dh      = d / p.heads;
    const S inv_scale = S(1) / std::sqrt(S(dh));
    std::vector<VarT<S>> head_outs;
    head_outs.reserve(size_t(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        VarT<S> qh     = (p.heads == 1) ? q : slice(q, 1, h * dh, dh);
        VarT<S> kh     = (p.heads == 1) ? k : slice(k, 1, h * dh, dh);
        VarT<S> vh     = (p.heads == 1) ? v : slice(v, 1, h * dh, dh);
        VarT<S> logits = scale(matmul(qh, transpose2d(kh)), inv_scale);
        if (row_mask) logits = add_row_bias(logits, reshape(*row_mask, Shape{kv_len}));
        VarT<S> weights = softmax(logits, 1);
        if (weights_out) weights_out->push_back(weights);
        head_outs.push_back(matmul(weights, vh));
    }
    VarT<S> merged = (p.heads == 1) ? head_outs[0] : concat<S>(head_outs, 1);
    return matmul(merged, p.w_out);
}

}  // namespace detail

// Vanilla self-attention over one flattened feature map. The residual add is
// the caller's job.
template <typename S>
VarT<S> self_attention(VarT<S> f0, const AttentionParamsT<S>& p) {
    return detail::attention_core(f0, {}, {}, p);
}

// Keys/values extended side-by-side with cached reference features; queries and
// emitted positions are f0's only.
template <typename S>
VarT<S> shared_self_attention(VarT<S> f0, const std::vector<VarT<S>>& refs, const AttentionParamsT<S>& p) {
    return detail::attention_core(f0, refs, {}, p);
}

// Shared self-attention where reference positions outside subject masks are
// ignored (additive -inf before softmax). Self positions are always kept.
template <typename S>
VarT<S> mask_guided_attention(VarT<S> f0, const std::vector<VarT<S>>& refs,
                              const std::vector<std::vector<uint8_t>>& keep_masks, const AttentionParamsT<S>& p) {
    return detail::attention_core(f0, refs, keep_masks, p);
}

// Same computation, also exposing the per-head post-softmax weight matrices
// (hw0 x kv_len). Used by tests that assert the mask-exactness contract.
template <typename S>
VarT<S> mask_guided_attention_with_weights(VarT<S> f0, const std::vector<VarT<S>>& refs,
                                           const std::vector<std::vector<uint8_t>>& keep_masks,
                                           const AttentionParamsT<S>& p, std::vector<VarT<S>>& weights) {
    return detail::attention_core(f0, refs, keep_masks, p, &weights);
}

// One cross-attention branch: queries from f, keys/values from a token
// sequence.
template <typename S>
VarT<S> cross_attention(VarT<S> f, VarT<S> tokens, const AttentionParamsT<S>& p) {
    const int d  = f.val().dim(1);
    const int td = tokens.val().dim(1);
    if (p.wq.val().shape != Shape{d, d} || p.wk.val().dim(0) != td)
        throw dimension_error("cross_attention params mismatch: f " + shape_str(f.val().shape) + ", tokens " +
                              shape_str(tokens.val().shape));
    if (p.heads <= 0 || d % p.heads != 0)
        throw dimension_error("heads must divide feature dim");
    VarT<S> q = matmul(f, p.wq);
    VarT<S> k = matmul(tokens, p.wk);
    VarT<S> v = matmul(tokens, p.wv);
    const int dh      = d / p.heads;
    const S inv_scale = S(1) / std::sqrt(S(dh));
    std::vector<VarT<S>> head_outs;
    for (int h = 0; h < p.heads; ++h) {
        VarT<S> qh = (p.heads == 1) ? q : slice(q, 1, h * dh, dh);
        VarT<S> kh = (p.heads == 1) ? k : slice(k, 1, h * dh, dh);
        VarT<S> vh = (p.heads == 1) ? v : slice(v, 1, h * dh, dh);
        VarT<S> w  = softmax(scale(matmul(qh, transpose2d(kh)), inv_scale), 1);
        head_outs.push_back(matmul(w, vh));
    }
    VarT<S> merged = (p.heads == 1) ? head_outs[0] : concat<S>(head_outs, 1);
    return matmul(merged, p.w_out);
}

// Two parallel cross-attention branches (text tokens, image tokens) whose
// outputs are summed. An absent token set contributes zero; both absent yields
// a zero map (the unconditional branch, not an error).
template <typename S>
VarT<S> decoupled_cross_attention(VarT<S> f, std::optional<VarT<S>> text_tokens,
                                  std::optional<VarT<S>> image_tokens, const AttentionParamsT<S>& params_text,
                                  const AttentionParamsT<S>& params_image) {
    std::optional<VarT<S>> out;
    if (text_tokens) out = cross_attention(f, *text_tokens, params_text);
    if (image_tokens) {
        VarT<S> img = cross_attention(f, *image_tokens, params_image);
        out         = out ? add(*out, img) : img;
    }
    if (!out) return VarT<S>(*f.g, f.g->constant(TensorT<S>::zeros(f.val().shape)));
    return *out;
}

}  // namespace refdiff
