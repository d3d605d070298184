#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dso/tensor.hpp"
#include "dso/util.hpp"

namespace dso {

struct AdamWConfig {
    double lr = 5e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    long warmup_steps = 2000;
};

struct AdamWState {
    AdamWConfig cfg;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;
};

inline AdamWState make_adamw(const std::vector<Tensor*>& params,
                             const AdamWConfig& cfg) {
    AdamWState st;
    st.cfg = cfg;
    for (const Tensor* p : params) {
        st.m.push_back(Tensor::zeros(p->shape));
        st.v.push_back(Tensor::zeros(p->shape));
    }
    return st;
}

// Linear warmup: lr(s) = base * min(1, s / warmup_steps).
inline double warmup_lr(const AdamWConfig& cfg, long step) {
    if (cfg.warmup_steps <= 0) return cfg.lr;
    const double f = static_cast<double>(step) /
                     static_cast<double>(cfg.warmup_steps);
    return cfg.lr * (f < 1.0 ? f : 1.0);
}

// Scales all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (double v : g.values) sq += v * v;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor& g : grads)
            for (double& v : g.values) v *= s;
    }
    return norm;
}

struct AdamWStepReport {
    bool applied = false;
    double lr = 0.0;
    std::string message;
};

// One AdamW update. Weight decay is decoupled (applied directly to the
// parameter, not through the moments). A non-finite gradient skips the whole
// step and reports it; parameters and moments stay untouched.
inline AdamWStepReport adamw_step(std::vector<Tensor*>& params,
                                  const std::vector<Tensor>& grads,
                                  AdamWState& st) {
    AdamWStepReport rep;
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw InputError("adamw_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->same_shape(grads[i]))
            throw InputError("adamw_step: shape mismatch at parameter " +
                             std::to_string(i));
        if (!grads[i].all_finite()) {
            rep.message = "non-finite gradient at parameter " +
                          std::to_string(i) + "; step skipped";
            return rep;
        }
    }

    st.step += 1;
    const double lr = warmup_lr(st.cfg, st.step);
    const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        Tensor& m = st.m[i];
        Tensor& v = st.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            p.values[j] -= lr * st.cfg.weight_decay * p.values[j];
            m.values[j] = st.cfg.beta1 * m.values[j] +
                          (1.0 - st.cfg.beta1) * g.values[j];
            v.values[j] = st.cfg.beta2 * v.values[j] +
                          (1.0 - st.cfg.beta2) * g.values[j] * g.values[j];
            const double mhat = m.values[j] / bc1;
            const double vhat = v.values[j] / bc2;
            p.values[j] -= lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
        }
    }
    rep.applied = true;
    rep.lr = lr;
    return rep;
}

}  // namespace dso
