#pragma once

#include <span>
#include <vector>

#include "dso/geometry.hpp"
#include "dso/nn.hpp"
#include "dso/rng.hpp"
#include "dso/tensor.hpp"
#include "dso/util.hpp"

namespace dso {

// Rectified-flow convention used throughout: x_t = (1-t) x0 + t eps,
// velocity target v = eps - x0, so x1 is pure noise and x0 is data.

inline Tensor to_tensor(const ShapeLatent& l) {
    return Tensor::from_vector(l.values);
}

inline ShapeLatent to_latent(const Tensor& t) { return ShapeLatent{t.values}; }

inline Tensor corrupt(const Tensor& x0, double t, const Tensor& eps) {
    if (!(t >= 0.0 && t <= 1.0)) throw InputError("corrupt: t must be in [0,1]");
    if (!x0.same_shape(eps)) throw InputError("corrupt: shape mismatch");
    Tensor out = x0;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values[i] = (1.0 - t) * x0.values[i] + t * eps.values[i];
    return out;
}

// LogitNormal(1, 1): t = sigmoid(z), z ~ N(1, 1). Always in (0, 1).
inline double sample_time_one(Rng& rng) {
    return detail::sigmoid(rng.normal(1.0, 1.0));
}

inline std::vector<double> sample_time(int n, std::uint64_t seed) {
    if (n < 1) throw InputError("sample_time: need n >= 1");
    Rng rng(seed);
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = sample_time_one(rng);
    return out;
}

struct GuidanceConfig {
    double drop_prob = 0.1;  // condition dropout during training
    double scale = 1.0;      // 1 = guidance off
};

struct FlowExample {
    Tensor x0;
    Tensor cond;
};

// Per-element corruption randomness: drawn once, in element order, and then
// shared by every objective so that objective identities hold bitwise.
struct CorruptionDraw {
    double t = 0.5;
    Tensor eps;
    bool drop_cond = false;
};

inline std::vector<CorruptionDraw> draw_corruptions(int n, int dim,
                                                    double drop_prob,
                                                    std::uint64_t seed) {
    Rng rng(seed);
    std::vector<CorruptionDraw> out(n);
    for (int i = 0; i < n; ++i) {
        out[i].t = sample_time_one(rng);
        out[i].eps = Tensor::zeros({static_cast<std::size_t>(dim)});
        for (auto& v : out[i].eps.values) v = rng.normal();
        out[i].drop_cond = drop_prob > 0.0 && rng.bernoulli(drop_prob);
    }
    return out;
}

struct LossGrad {
    double loss = 0.0;
    std::vector<Tensor> grads;  // aligned with the trainable parameter order
};

namespace detail {

inline void fill_batch_inputs(const MlpModel& m,
                              std::span<const FlowExample> batch,
                              std::span<const CorruptionDraw> draws, Tensor& x,
                              Tensor& target) {
    const std::size_t b_n = batch.size();
    x = Tensor::zeros({b_n, static_cast<std::size_t>(m.input_dim())});
    target = Tensor::zeros({b_n, static_cast<std::size_t>(m.latent_dim)});
    const Tensor zero_cond = Tensor::zeros({static_cast<std::size_t>(m.cond_dim)});
    for (std::size_t i = 0; i < b_n; ++i) {
        const FlowExample& ex = batch[i];
        const CorruptionDraw& d = draws[i];
        const Tensor x_t = corrupt(ex.x0, d.t, d.eps);
        const Tensor& cond = d.drop_cond ? zero_cond : ex.cond;
        fill_input_row(m, x_t, cond, d.t, &x.values[i * x.cols()]);
        for (int j = 0; j < m.latent_dim; ++j)
            target.values[i * m.latent_dim + j] =
                d.eps.values[j] - ex.x0.values[j];
    }
}

}  // namespace detail

// Weighted velocity-matching loss: sum_i weights[i] * ||vhat_i - v_i||^2.
// All flow/alignment objectives that reduce to a weighted MSE go through
// here, with explicit draws so tests can pin (t, eps) pairs.
inline double vmse_loss_with_draws(const MlpModel& m, const LoraAdapter* ad,
                                   std::span<const FlowExample> batch,
                                   std::span<const double> weights,
                                   std::span<const CorruptionDraw> draws,
                                   TrainScope scope = TrainScope::kFrozen,
                                   LossGrad* out = nullptr) {
    if (batch.empty()) throw InputError("loss: empty batch");
    if (weights.size() != batch.size() || draws.size() != batch.size())
        throw InputError("loss: batch/weights/draws size mismatch");
    Tensor x, target;
    detail::fill_batch_inputs(m, batch, draws, x, target);

    Graph g;
    std::vector<Graph::NodeId> params;
    const Graph::NodeId xin = g.input(std::move(x));
    const Graph::NodeId vhat = forward_graph(g, m, ad, xin, scope, &params);
    const Graph::NodeId diff = g.sub(vhat, g.input(std::move(target)));
    const Graph::NodeId per = g.row_sq_norm(diff);
    Tensor w = Tensor::zeros({batch.size()});
    for (std::size_t i = 0; i < batch.size(); ++i) w.values[i] = weights[i];
    const Graph::NodeId loss = g.sum_all(g.cmul(per, std::move(w)));

    const double value = g.value(loss).values[0];
    if (!std::isfinite(value)) throw NumericError("non-finite flow loss");
    if (out) {
        g.backward(loss);
        out->loss = value;
        out->grads.clear();
        for (auto id : params) out->grads.push_back(g.grad(id));
    }
    return value;
}

// Flow-matching loss: mean over the batch of ||vhat - (eps - x0)||^2 with
// t ~ LogitNormal(1,1) and fresh eps per element.
inline double fm_loss(const MlpModel& m, const LoraAdapter* ad,
                      std::span<const FlowExample> batch, std::uint64_t seed,
                      double drop_prob = 0.0, TrainScope scope = TrainScope::kFrozen,
                      LossGrad* out = nullptr) {
    const auto draws = draw_corruptions(static_cast<int>(batch.size()),
                                        m.latent_dim, drop_prob, seed);
    const std::vector<double> w(batch.size(), 1.0 / batch.size());
    return vmse_loss_with_draws(m, ad, batch, w, draws, scope, out);
}

struct SampleResult {
    ShapeLatent latent;
    bool valid = true;
};

// Euler integration of the learned velocity field from t=1 (noise) down to
// t=0. With guidance scale s != 1, vhat = v_uncond + s (v_cond - v_uncond);
// at s == 1 only the conditional branch is evaluated.
inline SampleResult sample_latent(const MlpModel& m, const LoraAdapter* ad,
                                  const Tensor& cond, int steps,
                                  const GuidanceConfig& guidance,
                                  std::uint64_t seed) {
    if (steps < 1) throw InputError("sample_latent: steps must be >= 1");
    Rng rng(seed);
    Tensor x = Tensor::zeros({static_cast<std::size_t>(m.latent_dim)});
    for (auto& v : x.values) v = rng.normal();

    const Tensor zero_cond = Tensor::zeros({static_cast<std::size_t>(m.cond_dim)});
    const double dt = 1.0 / steps;
    bool valid = x.all_finite();
    for (int k = 0; k < steps && valid; ++k) {
        const double t = 1.0 - static_cast<double>(k) / steps;
        Tensor v;
        if (guidance.scale == 1.0) {
            v = forward(m, ad, x, cond, t);
        } else {
            const Tensor vc = forward(m, ad, x, cond, t);
            const Tensor vu = forward(m, ad, x, zero_cond, t);
            v = vu;
            for (std::size_t i = 0; i < v.size(); ++i)
                v.values[i] += guidance.scale * (vc.values[i] - vu.values[i]);
        }
        for (std::size_t i = 0; i < x.size(); ++i) x.values[i] -= dt * v.values[i];
        valid = valid && x.all_finite();
    }
    return {to_latent(x), valid};
}

}  // namespace dso
