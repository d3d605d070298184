#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dso/flow.hpp"
#include "dso/nn.hpp"
#include "dso/optim.hpp"
#include "dso/rng.hpp"
#include "dso/util.hpp"

namespace dso {

// One labeled rollout usable for reward-weighted training.
struct RewardSample {
    long prompt_id = 0;
    Tensor x0;
    Tensor cond;
    int o = 0;  // binary stability verdict
    double tilt_deg = 0.0;
};

// Stable/unstable rollout pair sharing a prompt.
struct PreferencePair {
    long prompt_id = 0;
    Tensor x0_w;  // o = 1
    Tensor x0_l;  // o = 0
    Tensor cond;
};

enum class Objective { kDro, kDpo, kSft };

inline const char* objective_name(Objective o) {
    switch (o) {
        case Objective::kDro: return "dro";
        case Objective::kDpo: return "dpo";
        case Objective::kSft: return "sft";
    }
    return "?";
}

inline Objective parse_objective(const std::string& s) {
    if (s == "dro") return Objective::kDro;
    if (s == "dpo") return Objective::kDpo;
    if (s == "sft") return Objective::kSft;
    throw ConfigError("unknown objective: " + s);
}

struct DsoConfig {
    Objective objective = Objective::kDro;
    double beta = 500.0;  // margin sharpness for the contrastive objective
    long steps = 4000;
    int batch = 48;
    AdamWConfig adamw;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    double clip_norm = 1.0;
    double drop_prob = 0.0;
    std::uint64_t seed = 0;
};

// --- reward-weighted objectives ------------------------------------------

// Signed denoising loss: mean_i (2 o_i - 1) ||vhat_i - v_i||^2. Stable
// samples are denoised better, unstable ones worse; no reference model and
// no pairing needed.
inline double dro_loss_with_draws(const MlpModel& m, const LoraAdapter* ad,
                                  std::span<const RewardSample> batch,
                                  std::span<const CorruptionDraw> draws,
                                  TrainScope scope = TrainScope::kFrozen,
                                  LossGrad* out = nullptr) {
    if (batch.empty()) throw InputError("dro_loss: empty batch");
    std::vector<FlowExample> ex(batch.size());
    std::vector<double> w(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].o != 0 && batch[i].o != 1)
            throw InputError("dro_loss: labels must be 0 or 1");
        ex[i] = {batch[i].x0, batch[i].cond};
        w[i] = (2.0 * batch[i].o - 1.0) / static_cast<double>(batch.size());
    }
    return vmse_loss_with_draws(m, ad, ex, w, draws, scope, out);
}

inline double dro_loss(const MlpModel& m, const LoraAdapter* ad,
                       std::span<const RewardSample> batch, std::uint64_t seed,
                       double drop_prob = 0.0,
                       TrainScope scope = TrainScope::kFrozen,
                       LossGrad* out = nullptr) {
    const auto draws = draw_corruptions(static_cast<int>(batch.size()),
                                        m.latent_dim, drop_prob, seed);
    return dro_loss_with_draws(m, ad, batch, draws, scope, out);
}

// Flow-matching on stable samples only.
inline double sft_loss(const MlpModel& m, const LoraAdapter* ad,
                       std::span<const RewardSample> batch, std::uint64_t seed,
                       double drop_prob = 0.0,
                       TrainScope scope = TrainScope::kFrozen,
                       LossGrad* out = nullptr) {
    if (batch.empty()) throw InputError("sft_loss: empty batch");
    std::vector<FlowExample> ex(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].o != 1)
            throw InputError("sft_loss: batch must contain stable samples only");
        ex[i] = {batch[i].x0, batch[i].cond};
    }
    return fm_loss(m, ad, ex, seed, drop_prob, scope, out);
}

// Per-pair randomness for the contrastive objective: shared t, independent
// noise for the winner and loser branches.
struct PairDraw {
    double t = 0.5;
    Tensor eps_w;
    Tensor eps_l;
};

inline std::vector<PairDraw> draw_pair_corruptions(int n, int dim,
                                                   std::uint64_t seed) {
    Rng rng(seed);
    std::vector<PairDraw> out(n);
    for (int i = 0; i < n; ++i) {
        out[i].t = sample_time_one(rng);
        out[i].eps_w = Tensor::zeros({static_cast<std::size_t>(dim)});
        for (auto& v : out[i].eps_w.values) v = rng.normal();
        out[i].eps_l = Tensor::zeros({static_cast<std::size_t>(dim)});
        for (auto& v : out[i].eps_l.values) v = rng.normal();
    }
    return out;
}

struct DpoDiagnostics {
    std::vector<PairDraw> draws;
    std::vector<double> margin;  // per pair, before the beta factor
};

// Contrastive preference objective:
//   mean_i -log sigmoid(-beta * [(mse_theta^w - mse_ref^w)
//                                - (mse_theta^l - mse_ref^l)])
// with the reference MSEs computed on the frozen base model. At
// theta == ref the margin is exactly zero and the loss is ln 2.
inline double dpo_loss_with_draws(const MlpModel& m, const LoraAdapter* ad,
                                  const MlpModel& ref,
                                  std::span<const PreferencePair> pairs,
                                  double beta,
                                  std::span<const PairDraw> draws,
                                  TrainScope scope = TrainScope::kFrozen,
                                  LossGrad* out = nullptr,
                                  DpoDiagnostics* diag = nullptr) {
    if (pairs.empty()) throw InputError("dpo_loss: empty batch");
    if (!(beta > 0.0)) throw InputError("dpo_loss: beta must be > 0");
    const std::size_t b_n = pairs.size();

    std::vector<FlowExample> ex_w(b_n), ex_l(b_n);
    std::vector<CorruptionDraw> dw(b_n), dl(b_n);
    for (std::size_t i = 0; i < b_n; ++i) {
        ex_w[i] = {pairs[i].x0_w, pairs[i].cond};
        ex_l[i] = {pairs[i].x0_l, pairs[i].cond};
        dw[i] = {draws[i].t, draws[i].eps_w, false};
        dl[i] = {draws[i].t, draws[i].eps_l, false};
    }

    Tensor xw, tw, xl, tl;
    detail::fill_batch_inputs(m, ex_w, dw, xw, tw);
    detail::fill_batch_inputs(m, ex_l, dl, xl, tl);

    // frozen reference: plain forward, no tape
    auto ref_mse = [&](const Tensor& x, const Tensor& target) {
        const Tensor v = forward_batch(ref, nullptr, x);
        Tensor mse = Tensor::zeros({b_n});
        for (std::size_t r = 0; r < b_n; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < v.cols(); ++c) {
                const double d = v.at(r, c) - target.at(r, c);
                acc += d * d;
            }
            mse.values[r] = acc;
        }
        return mse;
    };
    Tensor mse_ref_w = ref_mse(xw, tw);
    Tensor mse_ref_l = ref_mse(xl, tl);
    for (auto& v : mse_ref_w.values) v = -v;
    for (auto& v : mse_ref_l.values) v = -v;

    Graph g;
    std::vector<Graph::NodeId> params;
    const Graph::NodeId vw =
        forward_graph(g, m, ad, g.input(std::move(xw)), scope, &params);
    // the loser branch reuses the same trainable leaves
    std::vector<Graph::NodeId> params_l;
    const Graph::NodeId vl = forward_graph(g, m, ad, g.input(std::move(xl)),
                                           scope, &params_l);
    const Graph::NodeId mse_w = g.row_sq_norm(g.sub(vw, g.input(std::move(tw))));
    const Graph::NodeId mse_l = g.row_sq_norm(g.sub(vl, g.input(std::move(tl))));
    const Graph::NodeId margin =
        g.sub(g.cadd(mse_w, std::move(mse_ref_w)),
              g.cadd(mse_l, std::move(mse_ref_l)));
    const Graph::NodeId loss = g.mean_all(g.softplus(g.scale(margin, beta)));

    const double value = g.value(loss).values[0];
    if (!std::isfinite(value)) throw NumericError("non-finite dpo loss");
    if (diag) {
        diag->draws.assign(draws.begin(), draws.end());
        diag->margin = g.value(margin).values;
    }
    if (out) {
        g.backward(loss);
        out->loss = value;
        out->grads.clear();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor acc = g.grad(params[i]);
            const Tensor& other = g.grad(params_l[i]);
            for (std::size_t j = 0; j < acc.size(); ++j)
                acc.values[j] += other.values[j];
            out->grads.push_back(std::move(acc));
        }
    }
    return value;
}

inline double dpo_loss(const MlpModel& m, const LoraAdapter* ad,
                       const MlpModel& ref,
                       std::span<const PreferencePair> pairs, double beta,
                       std::uint64_t seed,
                       TrainScope scope = TrainScope::kFrozen,
                       LossGrad* out = nullptr,
                       DpoDiagnostics* diag = nullptr) {
    const auto draws = draw_pair_corruptions(static_cast<int>(pairs.size()),
                                             m.latent_dim, seed);
    return dpo_loss_with_draws(m, ad, ref, pairs, beta, draws, scope, out, diag);
}

// --- pairing ---------------------------------------------------------------

struct PairStats {
    int pairable_prompts = 0;
    int skipped_prompts = 0;  // prompts lacking one of the two classes
};

// One epoch of disjoint pairs: per prompt with both classes, stable and
// unstable rollouts are shuffled and zipped without replacement.
inline std::vector<PreferencePair> make_pairs(
    std::span<const RewardSample> records, std::uint64_t seed,
    PairStats* stats = nullptr) {
    std::map<long, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
        by_prompt;  // prompt -> (stable idx, unstable idx)
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto& bucket = by_prompt[records[i].prompt_id];
        (records[i].o == 1 ? bucket.first : bucket.second).push_back(i);
    }
    Rng rng(seed);
    std::vector<PreferencePair> pairs;
    PairStats st;
    for (auto& [prompt, bucket] : by_prompt) {
        auto& [stable, unstable] = bucket;
        if (stable.empty() || unstable.empty()) {
            ++st.skipped_prompts;
            continue;
        }
        ++st.pairable_prompts;
        for (std::size_t i = stable.size(); i > 1; --i)
            std::swap(stable[i - 1], stable[rng.below(i)]);
        for (std::size_t i = unstable.size(); i > 1; --i)
            std::swap(unstable[i - 1], unstable[rng.below(i)]);
        const std::size_t n = std::min(stable.size(), unstable.size());
        for (std::size_t i = 0; i < n; ++i) {
            const RewardSample& w = records[stable[i]];
            const RewardSample& l = records[unstable[i]];
            pairs.push_back({prompt, w.x0, l.x0, w.cond});
        }
    }
    if (pairs.empty())
        throw InputError("make_pairs: no prompt has both stable and unstable rollouts");
    if (stats) *stats = st;
    return pairs;
}

// --- training loops ---------------------------------------------------------

struct TrainLogEntry {
    long step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;  // pre-clip global norm
    double lr = 0.0;
};

struct TrainResult {
    ModelCheckpoint ckpt;
    std::vector<TrainLogEntry> log;
    bool aborted = false;
    std::string message;
};

inline std::string train_log_body(const std::vector<TrainLogEntry>& log) {
    std::string body;
    for (const auto& e : log)
        body += "step=" + std::to_string(e.step) + " loss=" + fmt17(e.loss) +
                " grad_norm=" + fmt17(e.grad_norm) + " lr=" + fmt17(e.lr) + "\n";
    return body;
}

struct PretrainConfig {
    int latent_dim = 16;
    int cond_dim = 16;
    int time_dim = 32;
    std::vector<int> hidden{128, 128, 128};
    long steps = 20000;
    int batch = 48;
    AdamWConfig adamw{1e-3, 0.9, 0.999, 1e-8, 0.01, 2000};
    double drop_prob = 0.1;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
};

// Trains the base velocity model from scratch with the flow-matching loss.
inline TrainResult pretrain_model(std::span<const FlowExample> data,
                                  const PretrainConfig& cfg) {
    if (data.empty()) throw InputError("pretrain: empty dataset");
    TrainResult res;
    res.ckpt.model = make_mlp(cfg.latent_dim, cfg.cond_dim, cfg.time_dim,
                              cfg.hidden, derive_seed(cfg.seed, "model-init"));
    res.ckpt.objective_tag = "pretrain";
    res.ckpt.master_seed = cfg.seed;

    MlpModel& model = res.ckpt.model;
    std::vector<Tensor*> params = model.parameters();
    AdamWState opt = make_adamw(params, cfg.adamw);
    Rng batch_rng(derive_seed(cfg.seed, "batch"));
    const std::uint64_t draw_seed = derive_seed(cfg.seed, "draws");

    std::vector<Tensor> last_good;
    auto snapshot = [&] {
        last_good.clear();
        for (Tensor* p : params) last_good.push_back(*p);
    };
    snapshot();

    std::vector<FlowExample> batch(cfg.batch);
    for (long step = 1; step <= cfg.steps; ++step) {
        for (int i = 0; i < cfg.batch; ++i)
            batch[i] = data[batch_rng.below(data.size())];
        LossGrad lg;
        try {
            fm_loss(model, nullptr, batch, mix_seed(draw_seed, step),
                    cfg.drop_prob, TrainScope::kAll, &lg);
        } catch (const NumericError& e) {
            for (std::size_t i = 0; i < params.size(); ++i)
                *params[i] = last_good[i];
            res.aborted = true;
            res.message = std::string("diverged at step ") +
                          std::to_string(step) + ": " + e.what();
            break;
        }
        snapshot();
        const double gnorm = clip_global_norm(lg.grads, cfg.clip_norm);
        const auto rep = adamw_step(params, lg.grads, opt);
        res.log.push_back({step, lg.loss, gnorm, rep.lr});
        res.ckpt.trained_steps = step;
    }
    return res;
}

// LoRA fine-tuning against simulator feedback. Only adapter parameters are
// trained; the base model doubles as the frozen reference for the
// contrastive objective.
inline TrainResult finetune(const ModelCheckpoint& base,
                            std::span<const RewardSample> records,
                            const DsoConfig& cfg) {
    if (records.empty()) throw InputError("finetune: empty dataset");
    if (cfg.steps < 0) throw InputError("finetune: steps must be >= 0");

    TrainResult res;
    res.ckpt.model = base.model;
    res.ckpt.adapter = make_lora(base.model, cfg.lora_rank, cfg.lora_alpha,
                                 derive_seed(cfg.seed, "lora-init"));
    res.ckpt.objective_tag = objective_name(cfg.objective);
    res.ckpt.master_seed = cfg.seed;

    const MlpModel& model = res.ckpt.model;
    LoraAdapter& adapter = *res.ckpt.adapter;

    // index pools per objective
    std::vector<std::size_t> pool;  // dro: all, sft: stable subset
    std::map<long, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
        by_prompt;
    std::vector<long> pairable;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (cfg.objective == Objective::kSft) {
            if (records[i].o == 1) pool.push_back(i);
        } else {
            pool.push_back(i);
        }
        auto& bucket = by_prompt[records[i].prompt_id];
        (records[i].o == 1 ? bucket.first : bucket.second).push_back(i);
    }
    if (cfg.objective == Objective::kSft && pool.empty())
        throw InputError("finetune: stable subset is empty");
    if (cfg.objective == Objective::kDpo) {
        for (const auto& [prompt, bucket] : by_prompt)
            if (!bucket.first.empty() && !bucket.second.empty())
                pairable.push_back(prompt);
        if (pairable.empty())
            throw InputError(
                "finetune: no prompt has both stable and unstable rollouts");
    }

    std::vector<Tensor*> params = adapter.parameters();
    AdamWState opt = make_adamw(params, cfg.adamw);
    Rng batch_rng(derive_seed(cfg.seed, "batch"));
    const std::uint64_t draw_seed = derive_seed(cfg.seed, "draws");

    std::vector<Tensor> last_good;
    auto snapshot = [&] {
        last_good.clear();
        for (Tensor* p : params) last_good.push_back(*p);
    };
    snapshot();

    for (long step = 1; step <= cfg.steps; ++step) {
        LossGrad lg;
        try {
            if (cfg.objective == Objective::kDpo) {
                std::vector<PreferencePair> batch(cfg.batch);
                for (int i = 0; i < cfg.batch; ++i) {
                    const long prompt = pairable[batch_rng.below(pairable.size())];
                    const auto& [stable, unstable] = by_prompt[prompt];
                    const RewardSample& w =
                        records[stable[batch_rng.below(stable.size())]];
                    const RewardSample& l =
                        records[unstable[batch_rng.below(unstable.size())]];
                    batch[i] = {prompt, w.x0, l.x0, w.cond};
                }
                dpo_loss(model, &adapter, base.model, batch, cfg.beta,
                         mix_seed(draw_seed, step), TrainScope::kLoraOnly, &lg);
            } else {
                std::vector<RewardSample> batch(cfg.batch);
                for (int i = 0; i < cfg.batch; ++i)
                    batch[i] = records[pool[batch_rng.below(pool.size())]];
                if (cfg.objective == Objective::kDro)
                    dro_loss(model, &adapter, batch, mix_seed(draw_seed, step),
                             cfg.drop_prob, TrainScope::kLoraOnly, &lg);
                else
                    sft_loss(model, &adapter, batch, mix_seed(draw_seed, step),
                             cfg.drop_prob, TrainScope::kLoraOnly, &lg);
            }
        } catch (const NumericError& e) {
            for (std::size_t i = 0; i < params.size(); ++i)
                *params[i] = last_good[i];
            res.aborted = true;
            res.message = std::string("diverged at step ") +
                          std::to_string(step) + ": " + e.what();
            break;
        }
        snapshot();
        const double gnorm = clip_global_norm(lg.grads, cfg.clip_norm);
        const auto rep = adamw_step(params, lg.grads, opt);
        res.log.push_back({step, lg.loss, gnorm, rep.lr});
        res.ckpt.trained_steps = step;
    }
    return res;
}

// --- derivation identity checks ----------------------------------------

struct IdentityReport {
    int trials = 0;
    double max_kl_mse_discrepancy = 0.0;
    double max_bt_discrepancy = 0.0;
    double ln2_error = 0.0;
    bool ok = false;
};

// Numerically verifies, on closed-form 1-D Gaussian instances, that the
// KL-difference form of the reward objective equals its eps-MSE
// re-parameterization, and that the Bradley-Terry sigmoid algebra behind the
// contrastive objective holds for scalar rewards.
inline IdentityReport verify_derivation_identities(int trials,
                                                   std::uint64_t seed) {
    IdentityReport rep;
    rep.trials = trials;
    Rng rng(seed);
    for (int trial = 0; trial < trials; ++trial) {
        // discrete-diffusion schedule snippet around one transition
        const double alpha_t = rng.uniform(0.5, 0.999);
        const double abar_prev = rng.uniform(0.1, 0.999);
        const double abar_t = alpha_t * abar_prev;
        const double beta_t = 1.0 - alpha_t;

        const double x0 = rng.normal();
        const double eps = rng.normal();
        const double eps_theta = rng.normal();
        const double eps_ref = trial % 10 == 0 ? eps_theta : rng.normal();
        const double xt = std::sqrt(abar_t) * x0 + std::sqrt(1.0 - abar_t) * eps;

        // posterior mean via the x0/xt mixture form
        const double mu_q =
            (std::sqrt(abar_prev) * beta_t / (1.0 - abar_t)) * x0 +
            (std::sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)) * xt;
        const double var_q = (1.0 - abar_prev) / (1.0 - abar_t) * beta_t;

        // model means via the eps parameterization
        const double scale = beta_t / std::sqrt(1.0 - abar_t);
        const double mu_theta = (xt - scale * eps_theta) / std::sqrt(alpha_t);
        const double mu_ref = (xt - scale * eps_ref) / std::sqrt(alpha_t);

        auto kl_same_var = [&](double mu_a, double mu_b) {
            return (mu_a - mu_b) * (mu_a - mu_b) / (2.0 * var_q);
        };
        const double lhs = kl_same_var(mu_q, mu_theta) - kl_same_var(mu_q, mu_ref);

        const double w_t =
            beta_t * beta_t / (2.0 * var_q * alpha_t * (1.0 - abar_t));
        const double rhs = w_t * ((eps - eps_theta) * (eps - eps_theta) -
                                  (eps - eps_ref) * (eps - eps_ref));
        rep.max_kl_mse_discrepancy =
            std::max(rep.max_kl_mse_discrepancy, std::abs(lhs - rhs));
        if (trial % 10 == 0)
            rep.max_kl_mse_discrepancy =
                std::max(rep.max_kl_mse_discrepancy, std::abs(lhs) + std::abs(rhs));

        // Bradley-Terry route vs the folded softplus form for scalar rewards
        const double beta = rng.uniform(0.5, 800.0);
        const double dw = rng.normal(0.0, 0.01);
        const double dl = rng.normal(0.0, 0.01);
        const double r_w = -beta * dw;
        const double r_l = -beta * dl;
        const double bt = -std::log(detail::sigmoid(r_w - r_l));
        const double folded = detail::softplus(beta * (dw - dl));
        rep.max_bt_discrepancy =
            std::max(rep.max_bt_discrepancy, std::abs(bt - folded));
    }
    rep.ln2_error = std::abs(-std::log(detail::sigmoid(0.0)) - std::log(2.0));
    rep.ok = rep.max_kl_mse_discrepancy < 1e-8 &&
             rep.max_bt_discrepancy < 1e-8 && rep.ln2_error < 1e-12;
    return rep;
}

}  // namespace dso
