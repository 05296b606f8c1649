#pragma once

#include <cmath>
#include <vector>

#include "refdiff/error.hpp"
#include "refdiff/tensor.hpp"

namespace refdiff {

// Forward-process constants: beta_t and the cumulative products
// alpha_bar_t = prod_{s<=t} (1 - beta_s), computed in 64-bit.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    void validate() const {
        if (T <= 0 || int(beta.size()) != T || int(alpha_bar.size()) != T)
            throw config_error("noise schedule arrays do not match T");
        double prev = 1.0;
        for (int t = 0; t < T; ++t) {
            if (!(beta[size_t(t)] > 0.0 && beta[size_t(t)] < 1.0))
                throw config_error("beta out of (0,1) at t=" + std::to_string(t));
            if (!(alpha_bar[size_t(t)] < prev))
                throw config_error("alpha_bar not strictly decreasing at t=" + std::to_string(t));
            prev = alpha_bar[size_t(t)];
        }
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T <= 0) throw config_error("schedule needs T >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw config_error("invalid beta range [" + std::to_string(beta_start) + ", " + std::to_string(beta_end) +
                           "]; need 0 < start <= end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(size_t(T));
    s.alpha_bar.resize(size_t(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b = (T == 1) ? beta_start : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
        s.beta[size_t(t)] = b;
        prod *= 1.0 - b;
        s.alpha_bar[size_t(t)] = prod;
    }
    return s;
}

// Training-time subsampling: keeps every k-th alpha_bar of the source schedule
// (k = s.T / target_T) and derives the betas that realize the same marginals,
// so the compressed schedule ends at the same terminal alpha_bar.
inline NoiseSchedule subsample_schedule(const NoiseSchedule& s, int target_T) {
    if (target_T <= 0 || target_T > s.T || s.T % target_T != 0)
        throw config_error("subsample target " + std::to_string(target_T) + " must divide T=" + std::to_string(s.T));
    const int k = s.T / target_T;
    if (k == 1) return s;
    NoiseSchedule out;
    out.T = target_T;
    double prev = 1.0;
    for (int t = 0; t < target_T; ++t) {
        const double ab = s.alpha_bar[size_t((t + 1) * k - 1)];
        out.alpha_bar.push_back(ab);
        out.beta.push_back(1.0 - ab / prev);
        prev = ab;
    }
    out.validate();
    return out;
}

// Closed-form marginal of the Markov chain: z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps.
inline Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.T)
        throw index_error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + ")");
    if (!z0.same_shape(eps))
        throw dimension_error("q_sample shapes differ: " + shape_str(z0.shape) + " vs " + shape_str(eps.shape));
    const float a = float(std::sqrt(sched.alpha_bar[size_t(t)]));
    const float b = float(std::sqrt(1.0 - sched.alpha_bar[size_t(t)]));
    Tensor out(z0.shape);
    for (int64_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

}  // namespace refdiff
