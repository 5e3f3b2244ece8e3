// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pqlr/tensor.hpp"
#include "pqlr/tokenizer.hpp"

namespace pqlr {

struct ModelConfig {
    int vocab_size = CharTokenizer::vocab_size();
    int d_model = 48;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 128;
    int max_seq_len = 128;
    bool tie_embeddings = true;

    void validate() const {
        if (vocab_size < 2) throw UsageError("model: vocab_size must be >= 2");
        if (max_seq_len < 1) throw UsageError("model: max_seq_len must be >= 1");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw UsageError("model: d_model must be divisible by n_heads");
    }
};

template <typename T>
using ParamMap = std::map<std::string, TensorT<T>>;

using Parameters = ParamMap<float>;

// Rank-r adapter for one linear layer; contribution is (alpha/r) * B * A.
template <typename T>
struct LoraAdapterT {
    std::string target;
    TensorT<T> A; // [r, d_in]
    TensorT<T> B; // [d_out, r], zero-initialized
    int rank = 0;
    T alpha = T(0);

    T scaling() const { return alpha / static_cast<T>(rank); }
};

using LoraAdapter = LoraAdapterT<float>;

namespace names {
inline std::string layer(int i, const char* suffix) {
    return "layers." + std::to_string(i) + "." + suffix;
}
} // namespace names

// Standard parameter names for a given config. Iteration order of ParamMap is
// lexicographic, which keeps everything downstream deterministic.
inline std::vector<std::string> linear_param_names(const ModelConfig& cfg) {
    std::vector<std::string> out;
    for (int i = 0; i < cfg.n_layers; ++i)
        for (const char* s : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w_up", "mlp.w_down"})
            out.push_back(names::layer(i, s));
    return out;
}

template <typename T>
ParamMap<T> init_parameters(const ModelConfig& cfg, Rng& rng, double init_std = 0.02) {
    cfg.validate();
    ParamMap<T> p;
    auto gauss = [&](std::vector<std::size_t> shape) {
        TensorT<T> t = TensorT<T>::zeros(shape);
        for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, init_std));
        return t;
    };
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dff = static_cast<std::size_t>(cfg.d_ff);
    p["tok_emb"] = gauss({V, d});
    p["pos_emb"] = gauss({static_cast<std::size_t>(cfg.max_seq_len), d});
    for (int i = 0; i < cfg.n_layers; ++i) {
        p[names::layer(i, "ln1.g")] = TensorT<T>::full({d}, T(1));
        p[names::layer(i, "ln1.b")] = TensorT<T>::zeros({d});
        p[names::layer(i, "attn.wq")] = gauss({d, d});
        p[names::layer(i, "attn.wk")] = gauss({d, d});
        p[names::layer(i, "attn.wv")] = gauss({d, d});
        p[names::layer(i, "attn.wo")] = gauss({d, d});
        p[names::layer(i, "ln2.g")] = TensorT<T>::full({d}, T(1));
        p[names::layer(i, "ln2.b")] = TensorT<T>::zeros({d});
        p[names::layer(i, "mlp.w_up")] = gauss({dff, d});
        p[names::layer(i, "mlp.w_down")] = gauss({d, dff});
    }
    p["final_ln.g"] = TensorT<T>::full({d}, T(1));
    p["final_ln.b"] = TensorT<T>::zeros({d});
    if (!cfg.tie_embeddings) p["head"] = gauss({V, d});
    return p;
}

// A fully resolved dense view of the model the forward/backward core runs on.
// The SFT path points straight into a ParamMap; the QLoRA path points into
// dequantized copies plus adapters. `train_dense` / `train_adapters` select
// which gradient entries are emitted.
template <typename T>
struct ModelWeights {
    struct Linear {
        std::string name;
        const TensorT<T>* W = nullptr;            // [d_out, d_in]
        const LoraAdapterT<T>* adapter = nullptr; // optional
    };
    struct Layer {
        const TensorT<T>*ln1_g, *ln1_b, *ln2_g, *ln2_b;
        Linear wq, wk, wv, wo, w_up, w_down;
    };
    const TensorT<T>* tok_emb = nullptr;
    const TensorT<T>* pos_emb = nullptr;
    std::vector<Layer> layers;
    const TensorT<T>*final_g = nullptr, *final_b = nullptr;
    const TensorT<T>* head = nullptr; // equals tok_emb when tied
    bool tied = true;
    bool train_dense = true;
    bool train_adapters = false;

    static ModelWeights from_params(const ParamMap<T>& p, const ModelConfig& cfg) {
        ModelWeights w;
        w.tok_emb = &p.at("tok_emb");
        w.pos_emb = &p.at("pos_emb");
        for (int i = 0; i < cfg.n_layers; ++i) {
            Layer l;
            l.ln1_g = &p.at(names::layer(i, "ln1.g"));
            l.ln1_b = &p.at(names::layer(i, "ln1.b"));
            l.ln2_g = &p.at(names::layer(i, "ln2.g"));
            l.ln2_b = &p.at(names::layer(i, "ln2.b"));
            const std::pair<Linear*, const char*> linears[] = {
                {&l.wq, "attn.wq"},   {&l.wk, "attn.wk"},     {&l.wv, "attn.wv"},
                {&l.wo, "attn.wo"},   {&l.w_up, "mlp.w_up"},  {&l.w_down, "mlp.w_down"}};
            for (auto [field, nm] : linears) {
                field->name = names::layer(i, nm);
                field->W = &p.at(field->name);
            }
            w.layers.push_back(l);
        }
        w.final_g = &p.at("final_ln.g");
        w.final_b = &p.at("final_ln.b");
        w.tied = cfg.tie_embeddings;
        w.head = w.tied ? w.tok_emb : &p.at("head");
        return w;
    }
};

// Token batch padded to a common length; targets use kIgnoreIndex for padding
// and prompt positions.
struct TokenBatch {
    std::vector<std::vector<int>> tokens;
    std::vector<std::vector<int>> targets; // may be empty for forward-only
};

template <typename T>
struct ForwardCache {
    std::size_t batch = 0, seq = 0;
    TensorT<T> x0; // embeddings sum [N, d]
    struct LinearCache {
        TensorT<T> x; // input [N, d_in]
        TensorT<T> u; // adapter intermediate [N, r] (empty if no adapter)
    };
    struct LayerCache {
        TensorT<T> x_in;
        std::vector<T> ln1_mean, ln1_rstd;
        TensorT<T> a; // ln1 output
        TensorT<T> q, k, v;
        std::vector<TensorT<T>> probs; // per (seq*heads) [T, T]
        TensorT<T> att;                // concatenated heads, pre-wo
        TensorT<T> x_mid;              // after attention residual
        std::vector<T> ln2_mean, ln2_rstd;
        TensorT<T> b; // ln2 output
        TensorT<T> h; // pre-gelu [N, d_ff]
        TensorT<T> g; // gelu(h)
        LinearCache cq, ck, cv, co, cup, cdown;
    };
    std::vector<LayerCache> layers;
    std::vector<T> lnf_mean, lnf_rstd;
    TensorT<T> x_final; // input to final norm
    TensorT<T> f;       // final norm output
};

namespace detail {

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    const T pdf = std::exp(-x * x / T(2)) / std::sqrt(T(2) * static_cast<T>(M_PI));
    return cdf + x * pdf;
}

// y = x * W^T (+ adapter path). Caches x and u when a cache slot is given.
template <typename T>
TensorT<T> linear_fwd(const typename ModelWeights<T>::Linear& lin, const TensorT<T>& x,
                      typename ForwardCache<T>::LinearCache* cache) {
    TensorT<T> y = matmul_nt(x, *lin.W);
    TensorT<T> u;
    if (lin.adapter) {
        u = matmul_nt(x, lin.adapter->A); // [N, r]
        TensorT<T> delta = matmul_nt(u, lin.adapter->B);
        const T s = lin.adapter->scaling();
        for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += s * delta.data[i];
    }
    if (cache) {
        cache->x = x;
        cache->u = std::move(u);
    }
    return y;
}

// Backward through linear_fwd. Returns dx; accumulates dW / adapter grads
// into `grads` according to the training flags.
template <typename T>
TensorT<T> linear_bwd(const typename ModelWeights<T>::Linear& lin,
                      const typename ForwardCache<T>::LinearCache& cache, const TensorT<T>& dy,
                      bool train_dense, bool train_adapters, ParamMap<T>& grads) {
    TensorT<T> dx = matmul(dy, *lin.W);
    if (train_dense) grads[lin.name] = matmul_tn(dy, cache.x);
    if (lin.adapter) {
        const T s = lin.adapter->scaling();
        TensorT<T> dyB = matmul(dy, lin.adapter->B); // [N, r]
        // dx += s * dyB * A
        TensorT<T> dxa = matmul(dyB, lin.adapter->A);
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += s * dxa.data[i];
        if (train_adapters) {
            TensorT<T> dB = matmul_tn(dy, cache.u); // [d_out, r]
            TensorT<T> dA = matmul_tn(dyB, cache.x); // [r, d_in]
            for (auto& v : dB.data) v *= s;
            for (auto& v : dA.data) v *= s;
            grads[lin.name + ".lora_B"] = std::move(dB);
            grads[lin.name + ".lora_A"] = std::move(dA);
        }
    }
    return dx;
}

// dx for layer norm plus accumulated dgamma/dbeta.
template <typename T>
TensorT<T> layer_norm_bwd(const TensorT<T>& x, const std::vector<T>& mean,
                          const std::vector<T>& rstd, const TensorT<T>& gamma,
                          const TensorT<T>& dy, TensorT<T>* dgamma, TensorT<T>* dbeta) {
    const std::size_t m = x.rows(), n = x.cols();
    TensorT<T> dx = TensorT<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* xr = &x.data[i * n];
        const T* dyr = &dy.data[i * n];
        T* dxr = &dx.data[i * n];
        T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            const T xhat = (xr[j] - mean[i]) * rstd[i];
            const T dxhat = dyr[j] * gamma.data[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            if (dgamma) dgamma->data[j] += dyr[j] * xhat;
            if (dbeta) dbeta->data[j] += dyr[j];
        }
        mean_dxhat /= static_cast<T>(n);
        mean_dxhat_xhat /= static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) {
            const T xhat = (xr[j] - mean[i]) * rstd[i];
            const T dxhat = dyr[j] * gamma.data[j];
            dxr[j] = rstd[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    return dx;
}

} // namespace detail

// Causal forward pass. Returns logits [B*T, V] (row-major over batch then
// position); fills `cache` when non-null so the backward pass is exact.
template <typename T>
TensorT<T> transformer_forward(const ModelWeights<T>& w, const ModelConfig& cfg,
                               const TokenBatch& batch, ForwardCache<T>* cache) {
    const std::size_t bsz = batch.tokens.size();
    if (bsz == 0) throw DataError("forward: empty batch");
    const std::size_t seq = batch.tokens[0].size();
    if (seq == 0) throw DataError("forward: empty sequence");
    if (seq > static_cast<std::size_t>(cfg.max_seq_len)) throw DataError("forward: sequence too long");
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t dh = d / heads;
    const std::size_t n = bsz * seq;

    TensorT<T> x = TensorT<T>::zeros({n, d});
    for (std::size_t s = 0; s < bsz; ++s) {
        if (batch.tokens[s].size() != seq) throw ShapeError("forward: ragged batch");
        for (std::size_t t = 0; t < seq; ++t) {
            const int tok = batch.tokens[s][t];
            if (tok < 0 || tok >= cfg.vocab_size) throw DataError("forward: token id out of range");
            const T* e = &w.tok_emb->data[static_cast<std::size_t>(tok) * d];
            const T* pe = &w.pos_emb->data[t * d];
            T* row = &x.data[(s * seq + t) * d];
            for (std::size_t j = 0; j < d; ++j) row[j] = e[j] + pe[j];
        }
    }
    if (cache) {
        cache->batch = bsz;
        cache->seq = seq;
        cache->x0 = x;
        cache->layers.resize(w.layers.size());
    }

    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (std::size_t li = 0; li < w.layers.size(); ++li) {
        const auto& L = w.layers[li];
        auto* lc = cache ? &cache->layers[li] : nullptr;
        if (lc) lc->x_in = x;

        std::vector<T> m1, r1;
        TensorT<T> a = layer_norm_rows(x, *L.ln1_g, *L.ln1_b, T(1e-5), &m1, &r1);
        TensorT<T> q = detail::linear_fwd<T>(L.wq, a, lc ? &lc->cq : nullptr);
        TensorT<T> k = detail::linear_fwd<T>(L.wk, a, lc ? &lc->ck : nullptr);
        TensorT<T> v = detail::linear_fwd<T>(L.wv, a, lc ? &lc->cv : nullptr);

        TensorT<T> att = TensorT<T>::zeros({n, d});
        std::vector<TensorT<T>> probs;
        if (lc) probs.reserve(bsz * heads);
        for (std::size_t s = 0; s < bsz; ++s) {
            for (std::size_t h = 0; h < heads; ++h) {
                TensorT<T> scores = TensorT<T>::zeros({seq, seq});
                for (std::size_t i = 0; i < seq; ++i) {
                    const T* qi = &q.data[(s * seq + i) * d + h * dh];
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T* kj = &k.data[(s * seq + j) * d + h * dh];
                        T acc = T(0);
                        for (std::size_t p = 0; p < dh; ++p) acc += qi[p] * kj[p];
                        scores.at(i, j) = acc * att_scale;
                    }
                    for (std::size_t j = i + 1; j < seq; ++j)
                        scores.at(i, j) = -std::numeric_limits<T>::infinity();
                }
                TensorT<T> p = softmax_rows(scores);
                for (std::size_t i = 0; i < seq; ++i) {
                    T* orow = &att.data[(s * seq + i) * d + h * dh];
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T pij = p.at(i, j);
                        const T* vj = &v.data[(s * seq + j) * d + h * dh];
                        for (std::size_t c = 0; c < dh; ++c) orow[c] += pij * vj[c];
                    }
                }
                if (lc) probs.push_back(std::move(p));
            }
        }
        TensorT<T> att_out = detail::linear_fwd<T>(L.wo, att, lc ? &lc->co : nullptr);
        TensorT<T> x_mid = x;
        for (std::size_t i = 0; i < x_mid.size(); ++i) x_mid.data[i] += att_out.data[i];

        std::vector<T> m2, r2;
        TensorT<T> b = layer_norm_rows(x_mid, *L.ln2_g, *L.ln2_b, T(1e-5), &m2, &r2);
        TensorT<T> h = detail::linear_fwd<T>(L.w_up, b, lc ? &lc->cup : nullptr);
        TensorT<T> g = h;
        for (auto& val : g.data) val = detail::gelu(val);
        TensorT<T> mo = detail::linear_fwd<T>(L.w_down, g, lc ? &lc->cdown : nullptr);
        TensorT<T> x_next = x_mid;
        for (std::size_t i = 0; i < x_next.size(); ++i) x_next.data[i] += mo.data[i];

        if (lc) {
            lc->ln1_mean = std::move(m1);
            lc->ln1_rstd = std::move(r1);
            lc->a = std::move(a);
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->probs = std::move(probs);
            lc->att = std::move(att);
            lc->x_mid = x_mid;
            lc->ln2_mean = std::move(m2);
            lc->ln2_rstd = std::move(r2);
            lc->b = std::move(b);
            lc->h = std::move(h);
            lc->g = std::move(g);
        }
        x = std::move(x_next);
    }

    std::vector<T> mf, rf;
    TensorT<T> f = layer_norm_rows(x, *w.final_g, *w.final_b, T(1e-5), &mf, &rf);
    TensorT<T> logits = matmul_nt(f, *w.head);
    if (cache) {
        cache->x_final = std::move(x);
        cache->lnf_mean = std::move(mf);
        cache->lnf_rstd = std::move(rf);
        cache->f = std::move(f);
    }
    return logits;
}

template <typename T>
struct LossAndGrads {
    double loss = 0.0;
    ParamMap<T> grads;
};

// Full backward pass; emits gradient entries according to the weight view's
// training flags minus the `frozen` set. With everything frozen the grads map
// comes back empty (the forward/backward still runs to produce the loss).
template <typename T>
LossAndGrads<T> transformer_loss_and_grads(const ModelWeights<T>& w, const ModelConfig& cfg,
                                           const TokenBatch& batch,
                                           const std::set<std::string>& frozen = {}) {
    ForwardCache<T> cache;
    TensorT<T> logits = transformer_forward(w, cfg, batch, &cache);
    const std::size_t bsz = cache.batch, seq = cache.seq;
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t dh = d / heads;
    const std::size_t n = bsz * seq;

    std::vector<int> flat_targets(n, kIgnoreIndex);
    for (std::size_t s = 0; s < bsz; ++s) {
        if (batch.targets[s].size() != seq) throw ShapeError("loss: target shape mismatch");
        for (std::size_t t = 0; t < seq; ++t) flat_targets[s * seq + t] = batch.targets[s][t];
    }
    auto ce = cross_entropy(logits, flat_targets, kIgnoreIndex);

    LossAndGrads<T> out;
    out.loss = ce.loss;
    ParamMap<T> raw; // grads keyed by canonical names, pre-freeze filtering
    const bool dense = w.train_dense;

    // Head and final norm.
    TensorT<T> df = matmul(ce.dlogits, *w.head);
    TensorT<T> dhead;
    if (dense) dhead = matmul_tn(ce.dlogits, cache.f); // [V, d]
    TensorT<T> dg_f, db_f;
    if (dense) {
        dg_f = TensorT<T>::zeros({d});
        db_f = TensorT<T>::zeros({d});
    }
    TensorT<T> dx = detail::layer_norm_bwd(cache.x_final, cache.lnf_mean, cache.lnf_rstd,
                                           *w.final_g, df, dense ? &dg_f : nullptr,
                                           dense ? &db_f : nullptr);
    if (dense) {
        raw["final_ln.g"] = std::move(dg_f);
        raw["final_ln.b"] = std::move(db_f);
    }

    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (std::size_t li = w.layers.size(); li-- > 0;) {
        const auto& L = w.layers[li];
        auto& lc = cache.layers[li];
        const std::string ln1g = names::layer(static_cast<int>(li), "ln1.g");
        const std::string ln1b = names::layer(static_cast<int>(li), "ln1.b");
        const std::string ln2g = names::layer(static_cast<int>(li), "ln2.g");
        const std::string ln2b = names::layer(static_cast<int>(li), "ln2.b");

        // MLP branch: x_next = x_mid + W_down(gelu(W_up(b))), b = LN2(x_mid)
        TensorT<T> dmo = dx; // gradient w.r.t. mo
        TensorT<T> dgelu = detail::linear_bwd<T>(L.w_down, lc.cdown, dmo, dense,
                                                 w.train_adapters, raw);
        TensorT<T> dhpre = dgelu;
        for (std::size_t i = 0; i < dhpre.size(); ++i)
            dhpre.data[i] *= detail::gelu_grad(lc.h.data[i]);
        TensorT<T> db = detail::linear_bwd<T>(L.w_up, lc.cup, dhpre, dense, w.train_adapters, raw);
        TensorT<T> dg2, db2;
        if (dense) {
            dg2 = TensorT<T>::zeros({d});
            db2 = TensorT<T>::zeros({d});
        }
        TensorT<T> dx_mid = detail::layer_norm_bwd(lc.x_mid, lc.ln2_mean, lc.ln2_rstd, *L.ln2_g,
                                                   db, dense ? &dg2 : nullptr,
                                                   dense ? &db2 : nullptr);
        for (std::size_t i = 0; i < dx_mid.size(); ++i) dx_mid.data[i] += dx.data[i]; // residual
        if (dense) {
            raw[ln2g] = std::move(dg2);
            raw[ln2b] = std::move(db2);
        }

        // Attention branch: x_mid = x_in + Wo(attn(a)), a = LN1(x_in)
        TensorT<T> datt = detail::linear_bwd<T>(L.wo, lc.co, dx_mid, dense, w.train_adapters, raw);
        TensorT<T> dq = TensorT<T>::zeros({n, d});
        TensorT<T> dk = TensorT<T>::zeros({n, d});
        TensorT<T> dv = TensorT<T>::zeros({n, d});
        for (std::size_t s = 0; s < bsz; ++s) {
            for (std::size_t h = 0; h < heads; ++h) {
                const TensorT<T>& p = lc.probs[s * heads + h];
                // dv[j] += sum_i p(i,j) * datt[i]; dp(i,j) = datt[i] . v[j]
                TensorT<T> dp = TensorT<T>::zeros({seq, seq});
                for (std::size_t i = 0; i < seq; ++i) {
                    const T* doi = &datt.data[(s * seq + i) * d + h * dh];
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T pij = p.at(i, j);
                        const T* vj = &lc.v.data[(s * seq + j) * d + h * dh];
                        T* dvj = &dv.data[(s * seq + j) * d + h * dh];
                        T acc = T(0);
                        for (std::size_t c = 0; c < dh; ++c) {
                            dvj[c] += pij * doi[c];
                            acc += doi[c] * vj[c];
                        }
                        dp.at(i, j) = acc;
                    }
                }
                // softmax backward per row: ds = p * (dp - sum(dp * p))
                for (std::size_t i = 0; i < seq; ++i) {
                    T dot = T(0);
                    for (std::size_t j = 0; j <= i; ++j) dot += dp.at(i, j) * p.at(i, j);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T ds = p.at(i, j) * (dp.at(i, j) - dot) * att_scale;
                        const T* kj = &lc.k.data[(s * seq + j) * d + h * dh];
                        const T* qi = &lc.q.data[(s * seq + i) * d + h * dh];
                        T* dqi = &dq.data[(s * seq + i) * d + h * dh];
                        T* dkj = &dk.data[(s * seq + j) * d + h * dh];
                        for (std::size_t c = 0; c < dh; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
        TensorT<T> da = detail::linear_bwd<T>(L.wq, lc.cq, dq, dense, w.train_adapters, raw);
        {
            TensorT<T> t = detail::linear_bwd<T>(L.wk, lc.ck, dk, dense, w.train_adapters, raw);
            for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += t.data[i];
            t = detail::linear_bwd<T>(L.wv, lc.cv, dv, dense, w.train_adapters, raw);
            for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += t.data[i];
        }
        TensorT<T> dg1, db1;
        if (dense) {
            dg1 = TensorT<T>::zeros({d});
            db1 = TensorT<T>::zeros({d});
        }
        TensorT<T> dx_in = detail::layer_norm_bwd(lc.x_in, lc.ln1_mean, lc.ln1_rstd, *L.ln1_g, da,
                                                  dense ? &dg1 : nullptr, dense ? &db1 : nullptr);
        for (std::size_t i = 0; i < dx_in.size(); ++i) dx_in.data[i] += dx_mid.data[i];
        if (dense) {
            raw[ln1g] = std::move(dg1);
            raw[ln1b] = std::move(db1);
        }
        dx = std::move(dx_in);
    }

    // Embedding scatter (tied head folds dhead into tok_emb).
    if (dense) {
        TensorT<T> dtok;
        if (w.tied) {
            dtok = std::move(dhead);
        } else {
            dtok = TensorT<T>::zeros(w.tok_emb->shape);
            raw["head"] = std::move(dhead);
        }
        TensorT<T> dpos = TensorT<T>::zeros(w.pos_emb->shape);
        for (std::size_t s = 0; s < bsz; ++s) {
            for (std::size_t t = 0; t < seq; ++t) {
                const std::size_t tok = static_cast<std::size_t>(batch.tokens[s][t]);
                const T* dxr = &dx.data[(s * seq + t) * d];
                T* te = &dtok.data[tok * d];
                T* pe = &dpos.data[t * d];
                for (std::size_t j = 0; j < d; ++j) {
                    te[j] += dxr[j];
                    pe[j] += dxr[j];
                }
            }
        }
        raw["tok_emb"] = std::move(dtok);
        raw["pos_emb"] = std::move(dpos);
    }

    for (auto& [name, g] : raw) {
        if (frozen.count(name)) continue;
        out.grads[name] = std::move(g);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

struct OptimizerState {
    Parameters m, v;
    long step = 0;
    AdamWConfig hp;
};

// Decoupled AdamW with bias correction. Only keys present in `grads` are
// touched; moment slots are created lazily.
void adamw_step(Parameters& params, const Parameters& grads, OptimizerState& state, float lr);

struct LrSchedule {
    enum class Kind { linear, cosine };
    Kind kind = Kind::linear;
    double base_lr = 3e-5;
    long total_steps = 0;
    long warmup_steps = 0;
};

LrSchedule::Kind schedule_kind_from_string(const std::string& s);
std::string schedule_kind_to_string(LrSchedule::Kind k);
double lr_at_step(const LrSchedule& s, long step);

// ---------------------------------------------------------------------------
// Training and generation
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 2; // two passes over the data by default
    int batch_size = 16;
    LrSchedule schedule;
    AdamWConfig adamw;
    std::uint64_t seed = 0;
};

struct TrainLog {
    std::vector<std::string> lines;         // "step <n> lr <f> loss <f>"
    std::vector<double> per_epoch_mean_loss;
};

// Pads samples into batches (deterministic order within the given index list).
TokenBatch make_batch(const std::vector<TokenizedSample>& samples,
                      const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end);

// Full-parameter SFT: shuffled epochs, AdamW, per-step loss log.
TrainLog train_sft(Parameters& params, const ModelConfig& cfg,
                   const std::vector<TokenizedSample>& data, const TrainConfig& tc,
                   const std::set<std::string>& frozen = {});

// Greedy argmax decoding. Prompts longer than max_input are truncated from
// the left; decoding stops at EOS or after max_new tokens.
std::vector<int> generate_greedy(const ModelWeights<float>& w, const ModelConfig& cfg,
                                 std::vector<int> prompt, int max_input, int max_new);

} // namespace pqlr
