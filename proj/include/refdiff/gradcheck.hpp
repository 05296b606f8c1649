#pragma once

#include <functional>
#include <vector>

#include "refdiff/ops.hpp"

namespace refdiff {

// Scalar-valued differentiable function of a set of input tensors: builds its
// computation on the given graph and returns the scalar output node.
template <typename S>
using ScalarFn = std::function<VarT<S>(GraphT<S>&, std::vector<VarT<S>>&)>;

// Central-finite-difference check. Evaluates in the graph's scalar type (tests
// use double). Returns max over all coordinates of
//   |analytic - numeric| / max(1, |analytic|).
template <typename S>
S grad_check(const ScalarFn<S>& f, std::vector<TensorT<S>> point, S eps = S(1e-4)) {
    // Analytic gradients.
    GraphT<S> g;
    std::vector<VarT<S>> vars;
    vars.reserve(point.size());
    for (auto& t : point) vars.emplace_back(g, g.input(t, true));
    VarT<S> out = f(g, vars);
    if (out.val().numel() != 1) throw dimension_error("grad_check target must be scalar");
    if (!std::isfinite(double(out.val()[0]))) throw numeric_error("grad_check: non-finite function value");
    g.backward(out.id);

    std::vector<TensorT<S>> analytic;
    for (auto& v : vars)
        analytic.push_back(g.has_grad(v.id) ? g.grad(v.id) : TensorT<S>::zeros(v.shape()));

    auto eval = [&](const std::vector<TensorT<S>>& p) -> S {
        GraphT<S> g2;
        std::vector<VarT<S>> vs;
        for (const auto& t : p) vs.emplace_back(g2, g2.input(t, false));
        S v = f(g2, vs).val()[0];
        if (!std::isfinite(double(v))) throw numeric_error("grad_check: non-finite value at perturbed point");
        return v;
    };

    S worst = S(0);
    for (size_t ti = 0; ti < point.size(); ++ti) {
        for (int64_t i = 0; i < point[ti].numel(); ++i) {
            const S keep  = point[ti][i];
            point[ti][i]  = keep + eps;
            const S up    = eval(point);
            point[ti][i]  = keep - eps;
            const S down  = eval(point);
            point[ti][i]  = keep;
            const S num   = (up - down) / (S(2) * eps);
            const S ana   = analytic[ti][i];
            const S denom = std::max(S(1), std::abs(ana));
            worst         = std::max(worst, std::abs(ana - num) / denom);
        }
    }
    return worst;
}

// Same check restricted to a sampled subset of coordinates per tensor; for
// functions too heavy to probe coordinate-by-coordinate.
template <typename S>
S grad_check_sampled(const ScalarFn<S>& f, std::vector<TensorT<S>> point, int coords_per_tensor, Rng& rng,
                     S eps = S(1e-4)) {
    GraphT<S> g;
    std::vector<VarT<S>> vars;
    for (auto& t : point) vars.emplace_back(g, g.input(t, true));
    VarT<S> out = f(g, vars);
    if (!std::isfinite(double(out.val()[0]))) throw numeric_error("grad_check: non-finite function value");
    g.backward(out.id);
    std::vector<TensorT<S>> analytic;
    for (auto& v : vars)
        analytic.push_back(g.has_grad(v.id) ? g.grad(v.id) : TensorT<S>::zeros(v.shape()));

    auto eval = [&](const std::vector<TensorT<S>>& p) -> S {
        GraphT<S> g2;
        std::vector<VarT<S>> vs;
        for (const auto& t : p) vs.emplace_back(g2, g2.input(t, false));
        S v = f(g2, vs).val()[0];
        if (!std::isfinite(double(v))) throw numeric_error("grad_check: non-finite value at perturbed point");
        return v;
    };

    S worst = S(0);
    for (size_t ti = 0; ti < point.size(); ++ti) {
        const int64_t n = point[ti].numel();
        for (int c = 0; c < coords_per_tensor; ++c) {
            const int64_t i = (n <= coords_per_tensor) ? (c % n) : int64_t(rng.below(uint64_t(n)));
            const S keep    = point[ti][i];
            point[ti][i]    = keep + eps;
            const S up      = eval(point);
            point[ti][i]    = keep - eps;
            const S down    = eval(point);
            point[ti][i]    = keep;
            const S num     = (up - down) / (S(2) * eps);
            const S ana     = analytic[ti][i];
            worst           = std::max(worst, std::abs(ana - num) / std::max(S(1), std::abs(ana)));
        }
    }
    return worst;
}

}  // namespace refdiff
