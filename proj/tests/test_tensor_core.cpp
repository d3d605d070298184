#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dso/nn.hpp"
#include "dso/optim.hpp"
#include "dso/rng.hpp"
#include "dso/tensor.hpp"

using namespace dso;

namespace {

// Builds a weighted velocity-MSE style loss over a small random problem and
// returns it as a function of the model/adapter parameters. Used for the
// finite-difference oracle below.
struct LossProblem {
    MlpModel model;
    LoraAdapter adapter;
    Tensor x;       // [B x in]
    Tensor target;  // [B x D]
    Tensor weights; // [B]
    bool use_softplus = false;

    double eval(TrainScope scope, std::vector<Tensor>* grads_out) const {
        Graph g;
        std::vector<Graph::NodeId> pn;
        Graph::NodeId xin = g.input(x);
        Graph::NodeId out = forward_graph(
            g, model, scope == TrainScope::kAll ? nullptr : &adapter, xin,
            scope, &pn);
        Graph::NodeId diff = g.sub(out, g.input(target));
        Graph::NodeId per = g.row_sq_norm(diff);
        if (use_softplus) per = g.softplus(g.scale(per, 0.5));
        Graph::NodeId loss = g.sum_all(g.cmul(per, weights));
        if (grads_out) {
            g.backward(loss);
            grads_out->clear();
            for (auto id : pn) grads_out->push_back(g.grad(id));
        }
        return g.value(loss).values[0];
    }
};

LossProblem make_problem(std::uint64_t seed, bool softplus) {
    LossProblem p;
    p.model = make_mlp(4, 4, 8, {8, 8}, seed);
    p.adapter = make_lora(p.model, 2, 4.0, seed + 1);
    Rng rng(seed + 2);
    // randomize B so adapter gradients are non-trivial
    for (auto& l : p.adapter.layers)
        for (auto& v : l.b.values) v = rng.normal(0.0, 0.3);
    const std::size_t bsz = 3;
    p.x = random_normal({bsz, static_cast<std::size_t>(p.model.input_dim())},
                        1.0, rng);
    p.target = random_normal({bsz, 4}, 1.0, rng);
    p.weights = Tensor::zeros({bsz});
    for (auto& w : p.weights.values) w = rng.uniform(0.2, 1.0);
    p.use_softplus = softplus;
    return p;
}

// Central finite differences at h=1e-4 against reverse-mode gradients.
double max_rel_grad_error(LossProblem& p, TrainScope scope) {
    std::vector<Tensor> grads;
    p.eval(scope, &grads);
    std::vector<Tensor*> params;
    if (scope == TrainScope::kAll)
        params = p.model.parameters();
    else
        params = p.adapter.parameters();
    REQUIRE(params.size() == grads.size());

    const double h = 1e-4;
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& t = *params[pi];
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double keep = t.values[j];
            t.values[j] = keep + h;
            const double lp = p.eval(scope, nullptr);
            t.values[j] = keep - h;
            const double lm = p.eval(scope, nullptr);
            t.values[j] = keep;
            const double fd = (lp - lm) / (2.0 * h);
            const double ad = grads[pi].values[j];
            const double rel = std::abs(ad - fd) / std::max(1e-4, std::abs(fd));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("fnv1a64 matches published constants") {
    CHECK(fnv1a64("") == 14695981039346656037ull);
    // one non-empty probe: offset-basis xor/multiply chain, spot value
    CHECK(fnv1a64("a") == (kFnvOffsetBasis ^ 0x61ull) * kFnvPrime);
}

TEST_CASE("seed derivation is deterministic and stage-separated") {
    CHECK(derive_seed(42, "rollout") == derive_seed(42, "rollout"));
    CHECK(derive_seed(42, "rollout") != derive_seed(42, "simulate"));
    CHECK(derive_seed(42, "rollout") != derive_seed(43, "rollout"));
    CHECK(mix_seed(7, 1, 2) != mix_seed(7, 2, 1));
}

TEST_CASE("counter rng reproduces sequences and has sane moments") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(9);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("graph gradients: sum of squares and constants") {
    // f(x) = sum x^2 over a [1x2] row -> grad [2, 4]
    Graph g2;
    Tensor row = Tensor::zeros({1, 2});
    row.values = {1.0, 2.0};
    Graph::NodeId xr = g2.param(row);
    Graph::NodeId l2 = g2.sum_all(g2.row_sq_norm(xr));
    g2.backward(l2);
    CHECK(g2.grad(xr).values[0] == doctest::Approx(2.0));
    CHECK(g2.grad(xr).values[1] == doctest::Approx(4.0));

    // constant loss: zero gradients everywhere
    Graph g3;
    Graph::NodeId p = g3.param(Tensor{3.0, -1.0});
    Graph::NodeId c = g3.input(Tensor{5.0});
    Graph::NodeId l3 = g3.sum_all(c);
    g3.backward(l3);
    CHECK(g3.grad(p).values[0] == 0.0);
    CHECK(g3.grad(p).values[1] == 0.0);
}

TEST_CASE("autodiff matches central finite differences on a random mlp") {
    LossProblem p = make_problem(77, false);
    CHECK(max_rel_grad_error(p, TrainScope::kAll) < 1e-4);
}

TEST_CASE("autodiff matches finite differences through lora and softplus") {
    LossProblem p = make_problem(1234, true);
    CHECK(max_rel_grad_error(p, TrainScope::kLoraOnly) < 1e-4);
}

TEST_CASE("non-finite loss raises a numeric error naming the node") {
    Graph g;
    Tensor bad{1.0};
    bad.values[0] = std::numeric_limits<double>::infinity();
    Graph::NodeId n = g.input(bad);
    Graph::NodeId l = g.sum_all(n);
    CHECK_THROWS_AS(g.backward(l), NumericError);
}

TEST_CASE("forward with zero-initialized lora equals base forward bitwise") {
    MlpModel m = make_mlp(16, 16, 32, {32, 32}, 5);
    LoraAdapter ad = make_lora(m, 8, 16.0, 6);
    Rng rng(7);
    Tensor xt = random_normal({16}, 1.0, rng);
    Tensor cond = random_normal({16}, 1.0, rng);
    Tensor base = forward(m, nullptr, xt, cond, 0.35);
    Tensor adapted = forward(m, &ad, xt, cond, 0.35);
    REQUIRE(base.size() == adapted.size());
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(base.values[i] == adapted.values[i]);
}

TEST_CASE("all-zero model maps everything to zero") {
    MlpModel m = make_mlp(4, 4, 8, {8}, 1);
    for (auto& l : m.layers) {
        for (auto& v : l.weight.values) v = 0.0;
        for (auto& v : l.bias.values) v = 0.0;
    }
    Rng rng(2);
    Tensor xt = random_normal({4}, 1.0, rng);
    Tensor cond = random_normal({4}, 1.0, rng);
    Tensor out = forward(m, nullptr, xt, cond, 0.5);
    for (double v : out.values) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic for fixed inputs") {
    MlpModel m = make_mlp(8, 8, 16, {24}, 99);
    Rng rng(3);
    Tensor xt = random_normal({8}, 1.0, rng);
    Tensor cond = random_normal({8}, 1.0, rng);
    Tensor a = forward(m, nullptr, xt, cond, 0.2);
    Tensor b = forward(m, nullptr, xt, cond, 0.2);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a.values[i] == b.values[i]);
}

TEST_CASE("forward rejects dimension mismatches") {
    MlpModel m = make_mlp(4, 4, 8, {8}, 1);
    Rng rng(4);
    Tensor xt = random_normal({5}, 1.0, rng);
    Tensor cond = random_normal({4}, 1.0, rng);
    CHECK_THROWS_AS(forward(m, nullptr, xt, cond, 0.5), InputError);
    Tensor xt4 = random_normal({4}, 1.0, rng);
    CHECK_THROWS_AS(forward(m, nullptr, xt4, cond, 1.5), InputError);
}

TEST_CASE("lora merge reproduces the adapted forward") {
    MlpModel m = make_mlp(8, 8, 16, {16, 16}, 21);
    LoraAdapter ad = make_lora(m, 4, 8.0, 22);
    Rng rng(23);
    for (auto& l : ad.layers)
        for (auto& v : l.b.values) v = rng.normal(0.0, 0.2);

    LoraAdapter copy = ad;
    MlpModel merged = lora_merge(m, copy);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor xt = random_normal({8}, 1.0, rng);
        Tensor cond = random_normal({8}, 1.0, rng);
        const double t = rng.uniform();
        Tensor a = forward(m, &ad, xt, cond, t);
        Tensor b = forward(merged, nullptr, xt, cond, t);
        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
    }
    CHECK(worst < 1e-12);

    // zero-B adapter merges to the identical model
    LoraAdapter zero = make_lora(m, 4, 8.0, 24);
    MlpModel same = lora_merge(m, zero);
    for (std::size_t li = 0; li < m.layers.size(); ++li)
        for (std::size_t j = 0; j < m.layers[li].weight.size(); ++j)
            CHECK(same.layers[li].weight.values[j] ==
                  m.layers[li].weight.values[j]);

    // an adapter can only be merged once
    CHECK_THROWS_AS(lora_merge(m, copy), InputError);
}

TEST_CASE("adamw single step matches the hand-evaluated update") {
    Tensor p{1.0};
    Tensor g{1.0};
    std::vector<Tensor*> params{&p};
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 0;
    AdamWState st = make_adamw(params, cfg);
    auto rep = adamw_step(params, {g}, st);
    CHECK(rep.applied);
    // mhat = 1, vhat = 1 -> p = 1 - 0.1/(1 + 1e-8)
    const double expect = 1.0 - 0.1 / (1.0 + 1e-8);
    CHECK(p.values[0] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(p.values[0] == doctest::Approx(0.9000000009).epsilon(1e-9));
}

TEST_CASE("adamw leaves parameters alone on zero gradient, no decay") {
    Tensor p{0.7};
    std::vector<Tensor*> params{&p};
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    cfg.warmup_steps = 0;
    AdamWState st = make_adamw(params, cfg);
    adamw_step(params, {Tensor{0.0}}, st);
    CHECK(p.values[0] == 0.7);
}

TEST_CASE("adamw decoupled decay on zero gradient") {
    Tensor p{1.0};
    std::vector<Tensor*> params{&p};
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    cfg.warmup_steps = 0;
    AdamWState st = make_adamw(params, cfg);
    adamw_step(params, {Tensor{0.0}}, st);
    CHECK(p.values[0] == doctest::Approx(0.999).epsilon(1e-15));
}

TEST_CASE("adamw skips and reports non-finite gradients") {
    Tensor p{1.0};
    std::vector<Tensor*> params{&p};
    AdamWState st = make_adamw(params, {});
    Tensor g{std::numeric_limits<double>::quiet_NaN()};
    auto rep = adamw_step(params, {g}, st);
    CHECK_FALSE(rep.applied);
    CHECK(p.values[0] == 1.0);
    CHECK(st.step == 0);
    CHECK(rep.message.find("skipped") != std::string::npos);
}

TEST_CASE("warmup scales the learning rate linearly") {
    AdamWConfig cfg;
    cfg.lr = 2e-3;
    cfg.warmup_steps = 2000;
    CHECK(warmup_lr(cfg, 1) == doctest::Approx(2e-3 / 2000.0));
    CHECK(warmup_lr(cfg, 500) == doctest::Approx(2e-3 * 0.25));
    CHECK(warmup_lr(cfg, 2000) == doctest::Approx(2e-3));
    CHECK(warmup_lr(cfg, 5000) == doctest::Approx(2e-3));
}

TEST_CASE("adamw is bitwise deterministic") {
    auto run = [] {
        Rng rng(11);
        Tensor p = random_normal({6}, 1.0, rng);
        std::vector<Tensor*> params{&p};
        AdamWConfig cfg;
        cfg.lr = 1e-2;
        cfg.warmup_steps = 10;
        AdamWState st = make_adamw(params, cfg);
        for (int s = 0; s < 25; ++s) {
            Tensor g = random_normal({6}, 1.0, rng);
            adamw_step(params, {g}, st);
        }
        return p;
    };
    Tensor a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a.values[i] == b.values[i]);
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
    std::vector<Tensor> grads{Tensor{3.0, 4.0}};
    const double pre = clip_global_norm(grads, 1.0);
    CHECK(pre == doctest::Approx(5.0));
    double sq = 0.0;
    for (double v : grads[0].values) sq += v * v;
    CHECK(std::sqrt(sq) == doctest::Approx(1.0));

    std::vector<Tensor> small{Tensor{0.1, 0.1}};
    clip_global_norm(small, 1.0);
    CHECK(small[0].values[0] == 0.1);
}

TEST_CASE("checkpoint round-trips bitwise and detects tampering") {
    MlpModel m = make_mlp(16, 16, 32, {32, 32}, 314);
    ModelCheckpoint ck;
    ck.model = m;
    ck.adapter = make_lora(m, 4, 8.0, 315);
    Rng rng(316);
    for (auto& l : ck.adapter->layers)
        for (auto& v : l.b.values) v = rng.normal(0.0, 0.5);
    ck.objective_tag = "dro";
    ck.trained_steps = 123;
    ck.master_seed = 42;

    const auto dir = std::filesystem::temp_directory_path() / "dso_ck_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.ckpt";
    save_checkpoint(path, ck);
    ModelCheckpoint back = load_checkpoint(path);
    CHECK(checkpoint_hash(back) == checkpoint_hash(ck));
    CHECK(back.objective_tag == "dro");
    CHECK(back.trained_steps == 123);
    REQUIRE(back.adapter.has_value());
    CHECK(back.adapter->rank == 4);

    // truncation -> corruption error
    {
        std::ifstream in(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
        std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
        out << all.substr(0, all.size() / 2);
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), CorruptionError);

    // future version -> version error, nothing loaded
    {
        std::ofstream out(dir / "future.ckpt", std::ios::binary);
        out << "dso-checkpoint v9\nhash 0000000000000000\n";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "future.ckpt"), VersionError);
}
