#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dso/io.hpp"
#include "dso/rng.hpp"
#include "dso/tensor.hpp"
#include "dso/util.hpp"

namespace dso {

enum class Nonlinearity { kSilu, kNone };

struct LinearLayer {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out]
    Nonlinearity act = Nonlinearity::kNone;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }
};

// Velocity predictor: input row is x_t | cond | sinusoidal time embedding,
// output has the latent dimension.
struct MlpModel {
    int latent_dim = 16;
    int cond_dim = 16;
    int time_dim = 32;
    std::vector<LinearLayer> layers;
    std::uint64_t creation_seed = 0;

    int input_dim() const { return latent_dim + cond_dim + time_dim; }

    std::vector<const Tensor*> parameters() const {
        std::vector<const Tensor*> ps;
        for (const auto& l : layers) {
            ps.push_back(&l.weight);
            ps.push_back(&l.bias);
        }
        return ps;
    }
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (auto& l : layers) {
            ps.push_back(&l.weight);
            ps.push_back(&l.bias);
        }
        return ps;
    }
};

// Additive low-rank adapter per linear layer: W_eff = W + (alpha/rank) B A.
// B starts at zero so a fresh adapter leaves the model unchanged.
struct LoraAdapter {
    int rank = 8;
    double alpha = 16.0;
    struct LayerPair {
        Tensor a;  // [rank x in]
        Tensor b;  // [out x rank]
    };
    std::vector<LayerPair> layers;
    bool consumed = false;  // set once merged into a base model

    double scaling() const { return alpha / static_cast<double>(rank); }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (auto& l : layers) {
            ps.push_back(&l.a);
            ps.push_back(&l.b);
        }
        return ps;
    }
};

inline MlpModel make_mlp(int latent_dim, int cond_dim, int time_dim,
                         const std::vector<int>& hidden, std::uint64_t seed) {
    if (time_dim % 2 != 0) throw InputError("time embedding dim must be even");
    MlpModel m;
    m.latent_dim = latent_dim;
    m.cond_dim = cond_dim;
    m.time_dim = time_dim;
    m.creation_seed = seed;
    Rng rng(seed);
    int in = m.input_dim();
    std::vector<int> dims = hidden;
    dims.push_back(latent_dim);
    for (std::size_t i = 0; i < dims.size(); ++i) {
        LinearLayer l;
        const double stddev = std::sqrt(2.0 / static_cast<double>(in));
        l.weight = random_normal({static_cast<std::size_t>(dims[i]),
                                  static_cast<std::size_t>(in)},
                                 stddev, rng);
        l.bias = Tensor::zeros({static_cast<std::size_t>(dims[i])});
        l.act = (i + 1 < dims.size()) ? Nonlinearity::kSilu : Nonlinearity::kNone;
        m.layers.push_back(std::move(l));
        in = dims[i];
    }
    return m;
}

inline LoraAdapter make_lora(const MlpModel& model, int rank, double alpha,
                             std::uint64_t seed) {
    if (rank < 1) throw InputError("lora rank must be >= 1");
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    Rng rng(seed);
    for (const auto& l : model.layers) {
        LoraAdapter::LayerPair p;
        const double stddev = std::sqrt(1.0 / static_cast<double>(l.in_dim()));
        p.a = random_normal({static_cast<std::size_t>(rank), l.in_dim()},
                            stddev, rng);
        p.b = Tensor::zeros({l.out_dim(), static_cast<std::size_t>(rank)});
        ad.layers.push_back(std::move(p));
    }
    return ad;
}

inline void check_adapter(const MlpModel& model, const LoraAdapter& ad) {
    if (ad.layers.size() != model.layers.size())
        throw InputError("adapter layer count does not match model");
    for (std::size_t i = 0; i < ad.layers.size(); ++i) {
        const auto& p = ad.layers[i];
        const auto& l = model.layers[i];
        if (p.a.rows() != static_cast<std::size_t>(ad.rank) ||
            p.b.cols() != static_cast<std::size_t>(ad.rank) ||
            p.a.cols() != l.in_dim() || p.b.rows() != l.out_dim())
            throw InputError("adapter rank/shape mismatch at layer " +
                             std::to_string(i));
    }
}

// Sinusoidal embedding, frequencies 2^0 .. 2^(dim/2 - 1).
inline Tensor time_embedding(double t, int dim) {
    Tensor e = Tensor::zeros({static_cast<std::size_t>(dim)});
    double freq = 1.0;
    for (int k = 0; k < dim / 2; ++k) {
        e.values[2 * k] = std::sin(freq * t);
        e.values[2 * k + 1] = std::cos(freq * t);
        freq *= 2.0;
    }
    return e;
}

inline void fill_input_row(const MlpModel& m, const Tensor& x_t,
                           const Tensor& cond, double t, double* row) {
    if (static_cast<int>(x_t.size()) != m.latent_dim)
        throw InputError("x_t dim does not match model latent dim");
    if (static_cast<int>(cond.size()) != m.cond_dim)
        throw InputError("cond dim does not match model cond dim");
    if (!(t >= 0.0 && t <= 1.0)) throw InputError("t must be in [0,1]");
    int off = 0;
    for (int i = 0; i < m.latent_dim; ++i) row[off++] = x_t.values[i];
    for (int i = 0; i < m.cond_dim; ++i) row[off++] = cond.values[i];
    const Tensor emb = time_embedding(t, m.time_dim);
    for (int i = 0; i < m.time_dim; ++i) row[off++] = emb.values[i];
}

// Plain batched forward; X is [B x input_dim]. Uses the same kernels as the
// graph path.
inline Tensor forward_batch(const MlpModel& m, const LoraAdapter* ad,
                            const Tensor& x) {
    if (x.cols() != static_cast<std::size_t>(m.input_dim()))
        throw InputError("forward: input width does not match model");
    if (ad) check_adapter(m, *ad);
    Tensor h = x;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& l = m.layers[i];
        Tensor y;
        k_matmul_nt(h, l.weight, y);
        if (ad) {
            Tensor ha, hb;
            k_matmul_nt(h, ad->layers[i].a, ha);
            k_matmul_nt(ha, ad->layers[i].b, hb);
            const double s = ad->scaling();
            for (std::size_t j = 0; j < y.size(); ++j)
                y.values[j] += s * hb.values[j];
        }
        for (std::size_t r = 0; r < y.rows(); ++r)
            for (std::size_t c = 0; c < y.cols(); ++c)
                y.values[r * y.cols() + c] += l.bias.values[c];
        if (l.act == Nonlinearity::kSilu)
            for (auto& v : y.values) v *= detail::sigmoid(v);
        h = std::move(y);
    }
    return h;
}

// Single-sample velocity prediction.
inline Tensor forward(const MlpModel& m, const LoraAdapter* ad,
                      const Tensor& x_t, const Tensor& cond, double t) {
    Tensor x = Tensor::zeros({1, static_cast<std::size_t>(m.input_dim())});
    fill_input_row(m, x_t, cond, t, x.values.data());
    Tensor y = forward_batch(m, ad, x);
    y.shape = {y.size()};
    return y;
}

enum class TrainScope { kFrozen, kAll, kLoraOnly };

// Graph forward. Parameters selected by `scope` are registered as trainable
// leaves and appended to `param_nodes` in a fixed order (layer-major; W,b for
// kAll; A,B for kLoraOnly) so optimizer state lines up deterministically.
inline Graph::NodeId forward_graph(Graph& g, const MlpModel& m,
                                   const LoraAdapter* ad, Graph::NodeId x,
                                   TrainScope scope,
                                   std::vector<Graph::NodeId>* param_nodes) {
    if (scope == TrainScope::kLoraOnly && !ad)
        throw InputError("lora-only training requires an adapter");
    if (ad) check_adapter(m, *ad);
    Graph::NodeId h = x;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& l = m.layers[i];
        Graph::NodeId wn, bn;
        if (scope == TrainScope::kAll) {
            wn = g.param(l.weight);
            bn = g.param(l.bias);
            if (param_nodes) {
                param_nodes->push_back(wn);
                param_nodes->push_back(bn);
            }
        } else {
            wn = g.input(l.weight);
            bn = g.input(l.bias);
        }
        Graph::NodeId y = g.matmul_nt(h, wn);
        if (ad) {
            Graph::NodeId an, bn2;
            if (scope == TrainScope::kLoraOnly) {
                an = g.param(ad->layers[i].a);
                bn2 = g.param(ad->layers[i].b);
                if (param_nodes) {
                    param_nodes->push_back(an);
                    param_nodes->push_back(bn2);
                }
            } else {
                an = g.input(ad->layers[i].a);
                bn2 = g.input(ad->layers[i].b);
            }
            Graph::NodeId ha = g.matmul_nt(h, an);
            Graph::NodeId hb = g.matmul_nt(ha, bn2);
            y = g.add(y, g.scale(hb, ad->scaling()));
        }
        y = g.add_rowwise(y, bn);
        if (l.act == Nonlinearity::kSilu) y = g.silu(y);
        h = y;
    }
    return h;
}

// Folds the adapter into the base weights; the adapter is consumed and a
// second merge attempt is an error.
inline MlpModel lora_merge(const MlpModel& model, LoraAdapter& ad) {
    if (ad.consumed) throw InputError("adapter already merged");
    check_adapter(model, ad);
    MlpModel out = model;
    const double s = ad.scaling();
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
        Tensor& w = out.layers[i].weight;
        const Tensor& a = ad.layers[i].a;
        const Tensor& b = ad.layers[i].b;
        const std::size_t in_n = w.cols(), out_n = w.rows();
        const std::size_t r_n = a.rows();
        for (std::size_t o = 0; o < out_n; ++o)
            for (std::size_t l = 0; l < in_n; ++l) {
                double acc = 0.0;
                for (std::size_t r = 0; r < r_n; ++r)
                    acc += b.at(o, r) * a.at(r, l);
                w.at(o, l) += s * acc;
            }
    }
    ad.consumed = true;
    return out;
}

// --- checkpoint persistence ----------------------------------------------

struct ModelCheckpoint {
    MlpModel model;
    std::optional<LoraAdapter> adapter;
    std::string objective_tag = "base";
    std::int64_t trained_steps = 0;
    std::uint64_t master_seed = 0;
};

inline const LoraAdapter* adapter_ptr(const ModelCheckpoint& c) {
    return c.adapter ? &*c.adapter : nullptr;
}

namespace detail {

inline void body_tensor(std::string& body, const std::string& name,
                        const Tensor& t) {
    body += "tensor " + name;
    for (auto d : t.shape) body += " " + std::to_string(d);
    body += "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (i) body += ' ';
        body += fmt17(t.values[i]);
    }
    body += "\n";
}

}  // namespace detail

inline std::string checkpoint_body(const ModelCheckpoint& c) {
    std::string body;
    body += "meta latent_dim=" + std::to_string(c.model.latent_dim) +
            " cond_dim=" + std::to_string(c.model.cond_dim) +
            " time_dim=" + std::to_string(c.model.time_dim) +
            " creation_seed=" + std::to_string(c.model.creation_seed) +
            " master_seed=" + std::to_string(c.master_seed) +
            " objective=" + c.objective_tag +
            " trained_steps=" + std::to_string(c.trained_steps) + "\n";
    body += "layers";
    for (const auto& l : c.model.layers)
        body += " " + std::to_string(l.in_dim()) + ":" +
                std::to_string(l.out_dim()) + ":" +
                (l.act == Nonlinearity::kSilu ? "silu" : "none");
    body += "\n";
    if (c.adapter)
        body += "lora rank=" + std::to_string(c.adapter->rank) +
                " alpha=" + fmt17(c.adapter->alpha) +
                " consumed=" + std::to_string(c.adapter->consumed ? 1 : 0) +
                "\n";
    for (std::size_t i = 0; i < c.model.layers.size(); ++i) {
        detail::body_tensor(body, "layer" + std::to_string(i) + ".weight",
                            c.model.layers[i].weight);
        detail::body_tensor(body, "layer" + std::to_string(i) + ".bias",
                            c.model.layers[i].bias);
    }
    if (c.adapter)
        for (std::size_t i = 0; i < c.adapter->layers.size(); ++i) {
            detail::body_tensor(body, "lora" + std::to_string(i) + ".A",
                                c.adapter->layers[i].a);
            detail::body_tensor(body, "lora" + std::to_string(i) + ".B",
                                c.adapter->layers[i].b);
        }
    return body;
}

inline std::uint64_t checkpoint_hash(const ModelCheckpoint& c) {
    return fnv1a64(checkpoint_body(c));
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const ModelCheckpoint& c) {
    write_text_artifact(path, "dso-checkpoint", 1, checkpoint_body(c));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const TextArtifact art = read_text_artifact(path, "dso-checkpoint", 1);
    ModelCheckpoint c;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::size_t i = 0;
    std::vector<std::string> layer_specs;
    while (i < art.lines.size()) {
        const auto toks = split_ws(art.lines[i]);
        if (toks.empty()) {
            ++i;
            continue;
        }
        if (toks[0] == "meta") {
            for (std::size_t k = 1; k < toks.size(); ++k) {
                auto [key, val] = split_kv(toks[k]);
                if (key == "latent_dim") c.model.latent_dim = static_cast<int>(parse_int(val));
                else if (key == "cond_dim") c.model.cond_dim = static_cast<int>(parse_int(val));
                else if (key == "time_dim") c.model.time_dim = static_cast<int>(parse_int(val));
                else if (key == "creation_seed") c.model.creation_seed = static_cast<std::uint64_t>(parse_int(val));
                else if (key == "master_seed") c.master_seed = static_cast<std::uint64_t>(parse_int(val));
                else if (key == "objective") c.objective_tag = val;
                else if (key == "trained_steps") c.trained_steps = parse_int(val);
                else throw CorruptionError("unknown checkpoint meta key: " + key);
            }
            ++i;
        } else if (toks[0] == "layers") {
            layer_specs.assign(toks.begin() + 1, toks.end());
            ++i;
        } else if (toks[0] == "lora") {
            LoraAdapter ad;
            for (std::size_t k = 1; k < toks.size(); ++k) {
                auto [key, val] = split_kv(toks[k]);
                if (key == "rank") ad.rank = static_cast<int>(parse_int(val));
                else if (key == "alpha") ad.alpha = parse_double(val);
                else if (key == "consumed") ad.consumed = parse_int(val) != 0;
                else throw CorruptionError("unknown lora key: " + key);
            }
            c.adapter = std::move(ad);
            ++i;
        } else if (toks[0] == "tensor") {
            if (toks.size() < 3 || i + 1 >= art.lines.size())
                throw CorruptionError("malformed tensor record");
            Tensor t;
            std::size_t n = 1;
            for (std::size_t k = 2; k < toks.size(); ++k) {
                const std::size_t d = static_cast<std::size_t>(parse_int(toks[k]));
                t.shape.push_back(d);
                n *= d;
            }
            const auto vals = split_ws(art.lines[i + 1]);
            if (vals.size() != n)
                throw CorruptionError("tensor value count mismatch for " + toks[1]);
            t.values.reserve(n);
            for (const auto& v : vals) t.values.push_back(parse_double(v));
            tensors.emplace_back(toks[1], std::move(t));
            i += 2;
        } else {
            throw CorruptionError("unknown checkpoint record: " + toks[0]);
        }
    }

    auto take = [&](const std::string& name) -> Tensor {
        for (auto& [n, t] : tensors)
            if (n == name) return std::move(t);
        throw CorruptionError("checkpoint missing tensor: " + name);
    };
    for (std::size_t li = 0; li < layer_specs.size(); ++li) {
        const std::string& spec = layer_specs[li];
        const std::size_t c1 = spec.find(':');
        const std::size_t c2 = spec.find(':', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw CorruptionError("bad layer spec: " + spec);
        LinearLayer l;
        l.weight = take("layer" + std::to_string(li) + ".weight");
        l.bias = take("layer" + std::to_string(li) + ".bias");
        l.act = spec.substr(c2 + 1) == "silu" ? Nonlinearity::kSilu
                                              : Nonlinearity::kNone;
        c.model.layers.push_back(std::move(l));
    }
    if (c.adapter)
        for (std::size_t li = 0; li < layer_specs.size(); ++li) {
            LoraAdapter::LayerPair p;
            p.a = take("lora" + std::to_string(li) + ".A");
            p.b = take("lora" + std::to_string(li) + ".B");
            c.adapter->layers.push_back(std::move(p));
        }
    if (c.adapter) check_adapter(c.model, *c.adapter);
    return c;
}

}  // namespace dso
