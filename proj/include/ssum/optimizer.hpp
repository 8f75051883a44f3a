#pragma once

#include <cmath>
#include <vector>

#include "ssum/model.hpp"

namespace ssum {

// Adam with fixed (beta1, beta2, eps); only the learning rate is a stage
// knob. State slots align with trainable parameter groups.
struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Mat> m;
    std::vector<Mat> v;
    u64 t = 0;

    static AdamState init(const ModelParams& p) {
        AdamState s;
        s.m.resize(p.num_groups());
        s.v.resize(p.num_groups());
        for (std::size_t i = 0; i < p.num_groups(); ++i) {
            if (!p.group(i).frozen) {
                s.m[i] = Mat(p.group(i).w.rows, p.group(i).w.cols);
                s.v[i] = Mat(p.group(i).w.rows, p.group(i).w.cols);
            }
        }
        return s;
    }
};

// One Adam update on the trainable groups; bumps the parameter version.
inline void optimizer_step(ModelParams& params, const Gradients& grads, AdamState& state,
                           double lr, const AdamConfig& cfg = {}) {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!grads.finite()) throw NumericError("non-finite gradient");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.num_groups(); ++i) {
        if (params.group(i).frozen) continue;
        Mat& w = params.mutable_group(i).w;
        const Mat& g = grads.g[i];
        Mat& m = state.m[i];
        Mat& v = state.v[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g.a[k];
            m.a[k] = cfg.beta1 * m.a[k] + (1.0 - cfg.beta1) * gk;
            v.a[k] = cfg.beta2 * v.a[k] + (1.0 - cfg.beta2) * gk * gk;
            const double mhat = m.a[k] / bc1;
            const double vhat = v.a[k] / bc2;
            w.a[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    params.bump_version();
}

}  // namespace ssum
