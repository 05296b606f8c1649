#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <vector>

#include "refdiff/graph.hpp"

namespace refdiff {

namespace detail {

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using CMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C[m,n] = A[m,k] * B[k,n], optionally accumulating.
template <typename S>
void gemm(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
    CMatMap<S> A(a, m, k);
    CMatMap<S> B(b, k, n);
    MatMap<S> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// i-k-j matmul with a strictly ascending per-element fold over k. Unlike a
// blocked GEMM, each output element's accumulation sequence is independent of
// the other extents, so extending the key set with zero-weight rows leaves the
// original elements bit-identical. The attention ops rely on this.
template <typename S>
void matmul_ikj(const S* a, const S* b, S* c, int m, int k, int n) {
    if (n <= 16) {
        // short rows: fold in a local accumulator the compiler keeps in registers
        for (int i = 0; i < m; ++i) {
            S acc[16] = {};
            const S* arow = a + size_t(i) * k;
            for (int kk = 0; kk < k; ++kk) {
                const S av    = arow[kk];
                const S* brow = b + size_t(kk) * n;
                for (int j = 0; j < n; ++j) acc[j] += av * brow[j];
            }
            S* crow = c + size_t(i) * n;
            for (int j = 0; j < n; ++j) crow[j] = acc[j];
        }
        return;
    }
    for (int i = 0; i < m; ++i) {
        S* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = S(0);
        const S* arow = a + size_t(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const S av    = arow[kk];
            const S* brow = b + size_t(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// exp for the softmax hot path: a Cephes-style degree-5 polynomial for float
// (2-3 ulp, branch-free so the row loop vectorizes), the libm exp for double
// (the test precision mode). Maps -inf (and deep underflow) to exactly 0.
inline float softmax_exp(float x) {
    const float xc = std::max(x, -87.0f);  // -inf and underflow clamp to the zero product below
    const float nf = std::floor(xc * 1.442695040888963f + 0.5f);
    float r        = xc - nf * 0.693359375f;
    r -= nf * -2.12194440e-4f;
    const float r2 = r * r;
    float p        = 1.9875691500e-4f;
    p              = p * r + 1.3981999507e-3f;
    p              = p * r + 8.3334519073e-3f;
    p              = p * r + 4.1665795894e-2f;
    p              = p * r + 1.6666665459e-1f;
    p              = p * r + 5.0000001201e-1f;
    p              = p * r2 + r + 1.0f;
    const float pow2n = std::bit_cast<float>((int32_t(nf) + 127) << 23);
    const float zero_mask = x < -87.0f ? 0.0f : 1.0f;  // select, not branch, under vectorization
    return p * pow2n * zero_mask;
}

inline double softmax_exp(double x) { return std::exp(x); }

// C[k,n] (+)= A[m,k]^T * B[m,n]
template <typename S>
void gemm_at_b(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
    CMatMap<S> A(a, m, k);
    CMatMap<S> B(b, m, n);
    MatMap<S> C(c, k, n);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

// C[m,k] (+)= A[m,n] * B[k,n]^T
template <typename S>
void gemm_a_bt(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
    CMatMap<S> A(a, m, n);
    CMatMap<S> B(b, k, n);
    MatMap<S> C(c, m, k);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// im2col for one image: x[c,h,w] -> col[c*kh*kw, oh*ow]
template <typename S>
void im2col(const S* x, int c, int h, int w, int kh, int kw, int stride, int pad, S* col, int oh, int ow) {
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                S* dst = col + (size_t(ch) * kh * kw + size_t(ky) * kw + kx) * size_t(oh) * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) dst[size_t(oy) * ow + ox] = S(0);
                        continue;
                    }
                    const S* src = x + (size_t(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix              = ox * stride + kx - pad;
                        dst[size_t(oy) * ow + ox] = (ix < 0 || ix >= w) ? S(0) : src[ix];
                    }
                }
            }
        }
    }
}

// Scatter-add of a col buffer back into an image (adjoint of im2col).
template <typename S>
void col2im_add(const S* col, int c, int h, int w, int kh, int kw, int stride, int pad, S* x, int oh, int ow) {
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const S* src = col + (size_t(ch) * kh * kw + size_t(ky) * kw + kx) * size_t(oh) * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    S* dst = x + (size_t(ch) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += src[size_t(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

// Uniform node-emission helper: backprop closure receives the output node id.
template <typename S, typename F>
VarT<S> make_node(GraphT<S>& g, TensorT<S> value, bool needs_grad, F backprop) {
    const int id = g.emit(std::move(value), needs_grad);
    if (needs_grad)
        g.set_backprop(id, [id, fn = std::move(backprop)](GraphT<S>& gr) { fn(gr, id); });
    return VarT<S>(g, id);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix / linear algebra
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    const auto& A = a.val();
    const auto& B = b.val();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw dimension_error("matmul shape mismatch: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    TensorT<S> out(Shape{m, n});
    detail::matmul_ikj(A.ptr(), B.ptr(), out.ptr(), m, k, n);
    const int ia = a.id, ib = b.id;
    return detail::make_node(*a.g, std::move(out), a.needs_grad() || b.needs_grad(),
                             [ia, ib, m, k, n](GraphT<S>& g, int self) {
                                 const auto& gc = g.grad(self);
                                 if (g.needs_grad(ia))
                                     detail::gemm_a_bt(gc.ptr(), g.value(ib).ptr(), g.grad_buf(ia).ptr(), m, k, n, true);
                                 if (g.needs_grad(ib))
                                     detail::gemm_at_b(g.value(ia).ptr(), gc.ptr(), g.grad_buf(ib).ptr(), m, k, n, true);
                             });
}

template <typename S>
VarT<S> transpose2d(VarT<S> a) {
    const auto& A = a.val();
    if (A.rank() != 2) throw dimension_error("transpose2d expects rank 2, got " + shape_str(A.shape));
    const int m = A.dim(0), n = A.dim(1);
    TensorT<S> out(Shape{n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[size_t(j) * m + i] = A[size_t(i) * n + j];
    const int ia = a.id;
    return detail::make_node(*a.g, std::move(out), a.needs_grad(), [ia, m, n](GraphT<S>& g, int self) {
        if (!g.needs_grad(ia)) return;
        const auto& gy = g.grad(self);
        auto& gx       = g.grad_buf(ia);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i) gx[size_t(i) * n + j] += gy[size_t(j) * m + i];
    });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), NCHW
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> conv2d(VarT<S> x, VarT<S> kernel, int stride = 1, int pad = 0) {
    const auto& X = x.val();
    const auto& K = kernel.val();
    if (X.rank() != 4 || K.rank() != 4)
        throw dimension_error("conv2d expects rank-4 input and kernel, got " + shape_str(X.shape) + " and " +
                              shape_str(K.shape));
    const int b = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    const int oc = K.dim(0), kc = K.dim(1), kh = K.dim(2), kw = K.dim(3);
    if (kc != c)
        throw dimension_error("conv2d channel mismatch: input " + shape_str(X.shape) + " vs kernel " +
                              shape_str(K.shape));
    const int oh = detail::conv_out_extent(h, kh, stride, pad);
    const int ow = detail::conv_out_extent(w, kw, stride, pad);
    if (oh <= 0 || ow <= 0)
        throw dimension_error("conv2d non-positive output size for input " + shape_str(X.shape) + ", kernel " +
                              shape_str(K.shape) + ", stride " + std::to_string(stride) + ", pad " +
                              std::to_string(pad));

    const int ck = c * kh * kw;
    TensorT<S> out(Shape{b, oc, oh, ow});
    std::vector<S> col(size_t(ck) * oh * ow);
    for (int i = 0; i < b; ++i) {
        detail::im2col(X.ptr() + size_t(i) * c * h * w, c, h, w, kh, kw, stride, pad, col.data(), oh, ow);
        detail::gemm(K.ptr(), col.data(), out.ptr() + size_t(i) * oc * oh * ow, oc, ck, oh * ow, false);
    }
    const int ix = x.id, ik = kernel.id;
    return detail::make_node(
        *x.g, std::move(out), x.needs_grad() || kernel.needs_grad(),
        [ix, ik, b, c, h, w, oc, kh, kw, stride, pad, oh, ow, ck](GraphT<S>& g, int self) {
            const auto& gy = g.grad(self);
            const auto& X2 = g.value(ix);
            const auto& K2 = g.value(ik);
            std::vector<S> col(size_t(ck) * oh * ow);
            const bool want_x = g.needs_grad(ix);
            const bool want_k = g.needs_grad(ik);
            for (int i = 0; i < b; ++i) {
                const S* gy_i = gy.ptr() + size_t(i) * oc * oh * ow;
                if (want_k) {
                    detail::im2col(X2.ptr() + size_t(i) * c * h * w, c, h, w, kh, kw, stride, pad, col.data(), oh, ow);
                    // dK[oc, ck] += gy_i[oc, oh*ow] * col[ck, oh*ow]^T
                    detail::gemm_a_bt(gy_i, col.data(), g.grad_buf(ik).ptr(), oc, ck, oh * ow, true);
                }
                if (want_x) {
                    // dcol[ck, oh*ow] = K[oc, ck]^T * gy_i
                    detail::gemm_at_b(K2.ptr(), gy_i, col.data(), oc, ck, oh * ow, false);
                    detail::col2im_add(col.data(), c, h, w, kh, kw, stride, pad,
                                       g.grad_buf(ix).ptr() + size_t(i) * c * h * w, oh, ow);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax along an axis; additive -inf entries map to exactly 0
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> softmax(VarT<S> x, int axis) {
    const auto& X = x.val();
    if (axis < 0 || axis >= X.rank())
        throw dimension_error("softmax axis " + std::to_string(axis) + " invalid for " + shape_str(X.shape));
    const int len = X.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= X.dim(i);
    for (int i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);

    TensorT<S> out(X.shape);
    const S neg_inf = -std::numeric_limits<S>::infinity();
    if (inner == 1) {
        // contiguous rows (softmax over the last axis): pointer fast path
        for (int64_t o = 0; o < outer; ++o) {
            const S* row = X.ptr() + o * len;
            S* dst       = out.ptr() + o * len;
            S mx         = neg_inf;
            for (int j = 0; j < len; ++j) mx = std::max(mx, row[j]);
            if (mx == neg_inf)
                throw invalid_mask_error("softmax row is entirely -inf (no attendable entry)");
            // exp pass kept free of the sum so it vectorizes; -inf -> exactly 0
            for (int j = 0; j < len; ++j) dst[j] = detail::softmax_exp(row[j] - mx);
            S sum = S(0);
            for (int j = 0; j < len; ++j) sum += dst[j];
            const S inv = S(1) / sum;
            for (int j = 0; j < len; ++j) dst[j] *= inv;
        }
    } else {
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                S mx               = neg_inf;
                for (int j = 0; j < len; ++j) mx = std::max(mx, X[base + j * inner]);
                if (mx == neg_inf)
                    throw invalid_mask_error("softmax row is entirely -inf (no attendable entry)");
                S sum = S(0);
                for (int j = 0; j < len; ++j) {
                    const S v             = X[base + j * inner];
                    const S e             = (v == neg_inf) ? S(0) : detail::softmax_exp(v - mx);
                    out[base + j * inner] = e;
                    sum += e;
                }
                const S inv = S(1) / sum;
                for (int j = 0; j < len; ++j) out[base + j * inner] *= inv;
            }
        }
    }
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(),
                             [ix, len, outer, inner](GraphT<S>& g, int self) {
                                 if (!g.needs_grad(ix)) return;
                                 const auto& y  = g.value(self);
                                 const auto& gy = g.grad(self);
                                 auto& gx       = g.grad_buf(ix);
                                 for (int64_t o = 0; o < outer; ++o) {
                                     for (int64_t in = 0; in < inner; ++in) {
                                         const int64_t base = o * len * inner + in;
                                         S dot              = S(0);
                                         for (int j = 0; j < len; ++j)
                                             dot += y[base + j * inner] * gy[base + j * inner];
                                         for (int j = 0; j < len; ++j)
                                             gx[base + j * inner] +=
                                                 y[base + j * inner] * (gy[base + j * inner] - dot);
                                     }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Group normalization, NCHW
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> group_norm(VarT<S> x, int groups, VarT<S> gain, VarT<S> bias, S eps = S(1e-5)) {
    const auto& X = x.val();
    if (X.rank() != 4) throw dimension_error("group_norm expects rank 4, got " + shape_str(X.shape));
    const int b = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    if (groups <= 0 || c % groups != 0)
        throw config_error("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                           std::to_string(groups));
    if (gain.val().numel() != c || bias.val().numel() != c)
        throw dimension_error("group_norm gain/bias must have one entry per channel");
    const int cg       = c / groups;
    const int64_t hw   = int64_t(h) * w;
    const int64_t gsz  = cg * hw;

    TensorT<S> out(X.shape);
    TensorT<S> inv_std(Shape{b, groups});
    TensorT<S> mean(Shape{b, groups});
    const auto& G = gain.val();
    const auto& Bv = bias.val();
    for (int i = 0; i < b; ++i) {
        for (int gidx = 0; gidx < groups; ++gidx) {
            const int64_t base = (int64_t(i) * c + int64_t(gidx) * cg) * hw;
            S mu               = S(0);
            for (int64_t j = 0; j < gsz; ++j) mu += X[base + j];
            mu /= S(gsz);
            S var = S(0);
            for (int64_t j = 0; j < gsz; ++j) {
                const S d = X[base + j] - mu;
                var += d * d;
            }
            var /= S(gsz);
            const S inv                          = S(1) / std::sqrt(var + eps);
            mean[size_t(i) * groups + gidx]      = mu;
            inv_std[size_t(i) * groups + gidx]   = inv;
            for (int ch = 0; ch < cg; ++ch) {
                const S gk = G[size_t(gidx) * cg + ch];
                const S bk = Bv[size_t(gidx) * cg + ch];
                for (int64_t j = 0; j < hw; ++j) {
                    const int64_t idx = base + int64_t(ch) * hw + j;
                    out[idx]          = gk * (X[idx] - mu) * inv + bk;
                }
            }
        }
    }
    const int ix = x.id, ig = gain.id, ib = bias.id;
    return detail::make_node(
        *x.g, std::move(out), x.needs_grad() || gain.needs_grad() || bias.needs_grad(),
        [ix, ig, ib, b, c, groups, cg, hw, gsz, mean, inv_std](GraphT<S>& g, int self) {
            const auto& gy = g.grad(self);
            const auto& X2 = g.value(ix);
            const auto& G2 = g.value(ig);
            const bool want_x = g.needs_grad(ix);
            const bool want_g = g.needs_grad(ig);
            const bool want_b = g.needs_grad(ib);
            for (int i = 0; i < b; ++i) {
                for (int gidx = 0; gidx < groups; ++gidx) {
                    const int64_t base = (int64_t(i) * c + int64_t(gidx) * cg) * hw;
                    const S mu         = mean[size_t(i) * groups + gidx];
                    const S inv        = inv_std[size_t(i) * groups + gidx];
                    // dxhat-dependent reductions
                    S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
                    for (int ch = 0; ch < cg; ++ch) {
                        const S gk = G2[size_t(gidx) * cg + ch];
                        for (int64_t j = 0; j < hw; ++j) {
                            const int64_t idx = base + int64_t(ch) * hw + j;
                            const S xhat      = (X2[idx] - mu) * inv;
                            const S dxhat     = gy[idx] * gk;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    const S m = S(gsz);
                    for (int ch = 0; ch < cg; ++ch) {
                        const S gk = G2[size_t(gidx) * cg + ch];
                        for (int64_t j = 0; j < hw; ++j) {
                            const int64_t idx = base + int64_t(ch) * hw + j;
                            const S xhat      = (X2[idx] - mu) * inv;
                            if (want_x) {
                                const S dxhat = gy[idx] * gk;
                                g.grad_buf(ix)[idx] +=
                                    inv * (dxhat - sum_dxhat / m - xhat * (sum_dxhat_xhat / m));
                            }
                            if (want_g) g.grad_buf(ig)[size_t(gidx) * cg + ch] += gy[idx] * xhat;
                            if (want_b) g.grad_buf(ib)[size_t(gidx) * cg + ch] += gy[idx];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> silu(VarT<S> x) {
    const auto& X = x.val();
    TensorT<S> out(X.shape);
    for (int64_t i = 0; i < X.numel(); ++i) {
        const S s = S(1) / (S(1) + std::exp(-X[i]));
        out[i]    = X[i] * s;
    }
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(), [ix](GraphT<S>& g, int self) {
        if (!g.needs_grad(ix)) return;
        const auto& X2 = g.value(ix);
        const auto& gy = g.grad(self);
        auto& gx       = g.grad_buf(ix);
        for (int64_t i = 0; i < X2.numel(); ++i) {
            const S s = S(1) / (S(1) + std::exp(-X2[i]));
            gx[i] += gy[i] * s * (S(1) + X2[i] * (S(1) - s));
        }
    });
}

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    const auto& A = a.val();
    const auto& B = b.val();
    if (!A.same_shape(B))
        throw dimension_error("add shape mismatch: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    TensorT<S> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] + B[i];
    const int ia = a.id, ib = b.id;
    return detail::make_node(*a.g, std::move(out), a.needs_grad() || b.needs_grad(), [ia, ib](GraphT<S>& g, int self) {
        const auto& gy = g.grad(self);
        if (g.needs_grad(ia)) {
            auto& ga = g.grad_buf(ia);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
        }
        if (g.needs_grad(ib)) {
            auto& gb = g.grad_buf(ib);
            for (int64_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i];
        }
    });
}

template <typename S>
VarT<S> sub(VarT<S> a, VarT<S> b) {
    const auto& A = a.val();
    const auto& B = b.val();
    if (!A.same_shape(B))
        throw dimension_error("sub shape mismatch: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    TensorT<S> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] - B[i];
    const int ia = a.id, ib = b.id;
    return detail::make_node(*a.g, std::move(out), a.needs_grad() || b.needs_grad(), [ia, ib](GraphT<S>& g, int self) {
        const auto& gy = g.grad(self);
        if (g.needs_grad(ia)) {
            auto& ga = g.grad_buf(ia);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i];
        }
        if (g.needs_grad(ib)) {
            auto& gb = g.grad_buf(ib);
            for (int64_t i = 0; i < gy.numel(); ++i) gb[i] -= gy[i];
        }
    });
}

template <typename S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
    const auto& A = a.val();
    const auto& B = b.val();
    if (!A.same_shape(B))
        throw dimension_error("mul shape mismatch: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    TensorT<S> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] * B[i];
    const int ia = a.id, ib = b.id;
    return detail::make_node(*a.g, std::move(out), a.needs_grad() || b.needs_grad(), [ia, ib](GraphT<S>& g, int self) {
        const auto& gy = g.grad(self);
        if (g.needs_grad(ia)) {
            const auto& B2 = g.value(ib);
            auto& ga       = g.grad_buf(ia);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * B2[i];
        }
        if (g.needs_grad(ib)) {
            const auto& A2 = g.value(ia);
            auto& gb       = g.grad_buf(ib);
            for (int64_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * A2[i];
        }
    });
}

template <typename S>
VarT<S> scale(VarT<S> a, S k) {
    const auto& A = a.val();
    TensorT<S> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) out[i] = A[i] * k;
    const int ia = a.id;
    return detail::make_node(*a.g, std::move(out), a.needs_grad(), [ia, k](GraphT<S>& g, int self) {
        if (!g.needs_grad(ia)) return;
        const auto& gy = g.grad(self);
        auto& ga       = g.grad_buf(ia);
        for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * k;
    });
}

// ---------------------------------------------------------------------------
// Broadcast adds
// ---------------------------------------------------------------------------

// x[b,c,h,w] + bias[c]
template <typename S>
VarT<S> add_channel_bias(VarT<S> x, VarT<S> bias) {
    const auto& X = x.val();
    const auto& Bv = bias.val();
    if (X.rank() != 4 || Bv.numel() != X.dim(1))
        throw dimension_error("add_channel_bias: input " + shape_str(X.shape) + " vs bias " + shape_str(Bv.shape));
    const int b = X.dim(0), c = X.dim(1);
    const int64_t hw = int64_t(X.dim(2)) * X.dim(3);
    TensorT<S> out(X.shape);
    for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const int64_t base = (int64_t(i) * c + ch) * hw;
            const S bk         = Bv[ch];
            for (int64_t j = 0; j < hw; ++j) out[base + j] = X[base + j] + bk;
        }
    const int ix = x.id, ib = bias.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad() || bias.needs_grad(),
                             [ix, ib, b, c, hw](GraphT<S>& g, int self) {
                                 const auto& gy = g.grad(self);
                                 if (g.needs_grad(ix)) {
                                     auto& gx = g.grad_buf(ix);
                                     for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
                                 }
                                 if (g.needs_grad(ib)) {
                                     auto& gb = g.grad_buf(ib);
                                     for (int i = 0; i < b; ++i)
                                         for (int ch = 0; ch < c; ++ch) {
                                             const int64_t base = (int64_t(i) * c + ch) * hw;
                                             S s                = S(0);
                                             for (int64_t j = 0; j < hw; ++j) s += gy[base + j];
                                             gb[ch] += s;
                                         }
                                 }
                             });
}

// x[m,n] + bias[n], broadcast over rows
template <typename S>
VarT<S> add_row_bias(VarT<S> x, VarT<S> bias) {
    const auto& X = x.val();
    const auto& Bv = bias.val();
    if (X.rank() != 2 || Bv.numel() != X.dim(1))
        throw dimension_error("add_row_bias: input " + shape_str(X.shape) + " vs bias " + shape_str(Bv.shape));
    const int m = X.dim(0), n = X.dim(1);
    TensorT<S> out(X.shape);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[size_t(i) * n + j] = X[size_t(i) * n + j] + Bv[j];
    const int ix = x.id, ib = bias.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad() || bias.needs_grad(),
                             [ix, ib, m, n](GraphT<S>& g, int self) {
                                 const auto& gy = g.grad(self);
                                 if (g.needs_grad(ix)) {
                                     auto& gx = g.grad_buf(ix);
                                     for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
                                 }
                                 if (g.needs_grad(ib)) {
                                     auto& gb = g.grad_buf(ib);
                                     for (int i = 0; i < m; ++i)
                                         for (int j = 0; j < n; ++j) gb[j] += gy[size_t(i) * n + j];
                                 }
                             });
}

// x[b,c,h,w] + v[b,c] broadcast over spatial dims (timestep embedding injection)
template <typename S>
VarT<S> add_spatial_broadcast(VarT<S> x, VarT<S> v) {
    const auto& X = x.val();
    const auto& V = v.val();
    if (X.rank() != 4 || V.rank() != 2 || V.dim(0) != X.dim(0) || V.dim(1) != X.dim(1))
        throw dimension_error("add_spatial_broadcast: input " + shape_str(X.shape) + " vs vector " +
                              shape_str(V.shape));
    const int b = X.dim(0), c = X.dim(1);
    const int64_t hw = int64_t(X.dim(2)) * X.dim(3);
    TensorT<S> out(X.shape);
    for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const int64_t base = (int64_t(i) * c + ch) * hw;
            const S vv         = V[size_t(i) * c + ch];
            for (int64_t j = 0; j < hw; ++j) out[base + j] = X[base + j] + vv;
        }
    const int ix = x.id, iv = v.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad() || v.needs_grad(),
                             [ix, iv, b, c, hw](GraphT<S>& g, int self) {
                                 const auto& gy = g.grad(self);
                                 if (g.needs_grad(ix)) {
                                     auto& gx = g.grad_buf(ix);
                                     for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
                                 }
                                 if (g.needs_grad(iv)) {
                                     auto& gv = g.grad_buf(iv);
                                     for (int i = 0; i < b; ++i)
                                         for (int ch = 0; ch < c; ++ch) {
                                             const int64_t base = (int64_t(i) * c + ch) * hw;
                                             S s                = S(0);
                                             for (int64_t j = 0; j < hw; ++j) s += gy[base + j];
                                             gv[size_t(i) * c + ch] += s;
                                         }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> reshape(VarT<S> x, Shape new_shape) {
    const auto& X = x.val();
    if (shape_numel(new_shape) != X.numel())
        throw dimension_error("reshape " + shape_str(X.shape) + " -> " + shape_str(new_shape) +
                              " changes element count");
    TensorT<S> out(new_shape, X.data);
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(), [ix](GraphT<S>& g, int self) {
        if (!g.needs_grad(ix)) return;
        const auto& gy = g.grad(self);
        auto& gx       = g.grad_buf(ix);
        for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i];
    });
}

template <typename S>
VarT<S> concat(const std::vector<VarT<S>>& parts, int axis) {
    if (parts.empty()) throw dimension_error("concat of zero tensors");
    GraphT<S>& g  = *parts[0].g;
    const auto& first = parts[0].val();
    const int rank    = first.rank();
    if (axis < 0 || axis >= rank)
        throw dimension_error("concat axis " + std::to_string(axis) + " invalid for " + shape_str(first.shape));
    Shape out_shape = first.shape;
    int total       = 0;
    for (const auto& p : parts) {
        const auto& t = p.val();
        if (t.rank() != rank) throw dimension_error("concat rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && t.dim(d) != first.dim(d))
                throw dimension_error("concat shape mismatch: " + shape_str(first.shape) + " vs " +
                                      shape_str(t.shape));
        total += t.dim(axis);
    }
    out_shape[size_t(axis)] = total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= first.dim(i);
    for (int i = axis + 1; i < rank; ++i) inner *= first.dim(i);

    TensorT<S> out(out_shape);
    std::vector<int> ids;
    std::vector<int> lens;
    int64_t off = 0;
    for (const auto& p : parts) {
        const auto& t   = p.val();
        const int64_t L = t.dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::copy(t.ptr() + o * L * inner, t.ptr() + (o + 1) * L * inner,
                      out.ptr() + (o * total + off) * inner);
        ids.push_back(p.id);
        lens.push_back(int(L));
        off += L;
    }
    bool ng = false;
    for (const auto& p : parts) ng = ng || p.needs_grad();
    return detail::make_node(g, std::move(out), ng, [ids, lens, outer, inner, total](GraphT<S>& gr, int self) {
        const auto& gy = gr.grad(self);
        int64_t off    = 0;
        for (size_t p = 0; p < ids.size(); ++p) {
            const int64_t L = lens[p];
            if (gr.needs_grad(ids[p])) {
                auto& gx = gr.grad_buf(ids[p]);
                for (int64_t o = 0; o < outer; ++o) {
                    const S* src = gy.ptr() + (o * total + off) * inner;
                    S* dst       = gx.ptr() + o * L * inner;
                    for (int64_t j = 0; j < L * inner; ++j) dst[j] += src[j];
                }
            }
            off += L;
        }
    });
}

template <typename S>
VarT<S> slice(VarT<S> x, int axis, int start, int len) {
    const auto& X = x.val();
    const int rank = X.rank();
    if (axis < 0 || axis >= rank)
        throw dimension_error("slice axis " + std::to_string(axis) + " invalid for " + shape_str(X.shape));
    if (start < 0 || len <= 0 || start + len > X.dim(axis))
        throw index_error("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                          ") out of range for axis extent " + std::to_string(X.dim(axis)));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= X.dim(i);
    for (int i = axis + 1; i < rank; ++i) inner *= X.dim(i);
    const int64_t L = X.dim(axis);

    Shape out_shape         = X.shape;
    out_shape[size_t(axis)] = len;
    TensorT<S> out(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        std::copy(X.ptr() + (o * L + start) * inner, X.ptr() + (o * L + start + len) * inner,
                  out.ptr() + o * len * inner);
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(),
                             [ix, outer, inner, L, start, len](GraphT<S>& g, int self) {
                                 if (!g.needs_grad(ix)) return;
                                 const auto& gy = g.grad(self);
                                 auto& gx       = g.grad_buf(ix);
                                 for (int64_t o = 0; o < outer; ++o) {
                                     const S* src = gy.ptr() + o * len * inner;
                                     S* dst       = gx.ptr() + (o * L + start) * inner;
                                     for (int64_t j = 0; j < int64_t(len) * inner; ++j) dst[j] += src[j];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> embed(VarT<S> table, const std::vector<int>& ids) {
    const auto& T = table.val();
    if (T.rank() != 2) throw dimension_error("embed table must be rank 2, got " + shape_str(T.shape));
    const int v = T.dim(0), d = T.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw index_error("embed id " + std::to_string(id) + " out of range for vocabulary " +
                              std::to_string(v));
    TensorT<S> out(Shape{int(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(T.ptr() + size_t(ids[i]) * d, T.ptr() + size_t(ids[i] + 1) * d, out.ptr() + i * d);
    const int it = table.id;
    return detail::make_node(*table.g, std::move(out), table.needs_grad(), [it, ids, d](GraphT<S>& g, int self) {
        if (!g.needs_grad(it)) return;
        const auto& gy = g.grad(self);
        auto& gt       = g.grad_buf(it);
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j) gt[size_t(ids[i]) * d + j] += gy[i * d + j];
    });
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> upsample_nearest2(VarT<S> x) {
    const auto& X = x.val();
    if (X.rank() != 4) throw dimension_error("upsample_nearest2 expects rank 4, got " + shape_str(X.shape));
    const int b = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
    TensorT<S> out(Shape{b, c, 2 * h, 2 * w});
    for (int i = 0; i < b; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const S* src = X.ptr() + (size_t(i) * c + ch) * h * w;
            S* dst       = out.ptr() + (size_t(i) * c + ch) * 4 * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const S v                          = src[size_t(y) * w + xx];
                    dst[size_t(2 * y) * 2 * w + 2 * xx]         = v;
                    dst[size_t(2 * y) * 2 * w + 2 * xx + 1]     = v;
                    dst[size_t(2 * y + 1) * 2 * w + 2 * xx]     = v;
                    dst[size_t(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
                }
        }
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(), [ix, b, c, h, w](GraphT<S>& g, int self) {
        if (!g.needs_grad(ix)) return;
        const auto& gy = g.grad(self);
        auto& gx       = g.grad_buf(ix);
        for (int i = 0; i < b; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const S* src = gy.ptr() + (size_t(i) * c + ch) * 4 * h * w;
                S* dst       = gx.ptr() + (size_t(i) * c + ch) * h * w;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        dst[size_t(y) * w + xx] += src[size_t(2 * y) * 2 * w + 2 * xx] +
                                                   src[size_t(2 * y) * 2 * w + 2 * xx + 1] +
                                                   src[size_t(2 * y + 1) * 2 * w + 2 * xx] +
                                                   src[size_t(2 * y + 1) * 2 * w + 2 * xx + 1];
            }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> mean_all(VarT<S> x) {
    const auto& X   = x.val();
    const int64_t n = X.numel();
    S s             = S(0);
    for (int64_t i = 0; i < n; ++i) s += X[i];
    TensorT<S> out(Shape{1});
    out[0]       = s / S(n);
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(), [ix, n](GraphT<S>& g, int self) {
        if (!g.needs_grad(ix)) return;
        const S gy = g.grad(self)[0] / S(n);
        auto& gx   = g.grad_buf(ix);
        for (int64_t i = 0; i < n; ++i) gx[i] += gy;
    });
}

template <typename S>
VarT<S> sum_all(VarT<S> x) {
    const auto& X   = x.val();
    const int64_t n = X.numel();
    S s             = S(0);
    for (int64_t i = 0; i < n; ++i) s += X[i];
    TensorT<S> out(Shape{1});
    out[0]       = s;
    const int ix = x.id;
    return detail::make_node(*x.g, std::move(out), x.needs_grad(), [ix, n](GraphT<S>& g, int self) {
        if (!g.needs_grad(ix)) return;
        const S gy = g.grad(self)[0];
        auto& gx   = g.grad_buf(ix);
        for (int64_t i = 0; i < n; ++i) gx[i] += gy;
    });
}

// Mean squared error between same-shape tensors.
template <typename S>
VarT<S> mse(VarT<S> a, VarT<S> b) {
    VarT<S> d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace refdiff
