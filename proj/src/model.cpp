// SPDX-License-Identifier: Apache-2.0
#include "pqlr/model.hpp"

#include <algorithm>
#include <cstdio>

namespace pqlr {

void adamw_step(Parameters& params, const Parameters& grads, OptimizerState& state, float lr) {
    state.step += 1;
    const auto& hp = state.hp;
    const double bc1 = 1.0 - std::pow(static_cast<double>(hp.beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(hp.beta2), static_cast<double>(state.step));
    for (const auto& [name, g] : grads) {
        auto pit = params.find(name);
        if (pit == params.end()) throw ShapeError("adamw: gradient for unknown parameter " + name);
        Tensor& p = pit->second;
        if (!p.same_shape(g)) throw ShapeError("adamw: grad/parameter shape mismatch for " + name);
        Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m.data[i] = hp.beta1 * m.data[i] + (1.0f - hp.beta1) * g.data[i];
            v.data[i] = hp.beta2 * v.data[i] + (1.0f - hp.beta2) * g.data[i] * g.data[i];
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            double upd = lr * mhat / (std::sqrt(vhat) + hp.eps);
            if (hp.weight_decay != 0.0f) upd += static_cast<double>(lr) * hp.weight_decay * p.data[i];
            p.data[i] = static_cast<float>(p.data[i] - upd);
        }
    }
}

LrSchedule::Kind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return LrSchedule::Kind::linear;
    if (s == "cosine") return LrSchedule::Kind::cosine;
    throw UsageError("unknown schedule kind: " + s);
}

std::string schedule_kind_to_string(LrSchedule::Kind k) {
    return k == LrSchedule::Kind::linear ? "linear" : "cosine";
}

double lr_at_step(const LrSchedule& s, long step) {
    if (step < 0 || step > s.total_steps) throw UsageError("lr_at_step: step out of range");
    if (s.warmup_steps > 0 && step < s.warmup_steps)
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const long decay_total = s.total_steps - s.warmup_steps;
    if (decay_total == 0) return s.base_lr;
    const double progress = static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay_total);
    if (s.kind == LrSchedule::Kind::linear) return s.base_lr * (1.0 - progress);
    return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

TokenBatch make_batch(const std::vector<TokenizedSample>& samples,
                      const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) {
    std::size_t maxlen = 1;
    for (std::size_t i = begin; i < end; ++i)
        maxlen = std::max(maxlen, samples[idx[i]].tokens.size());
    TokenBatch b;
    for (std::size_t i = begin; i < end; ++i) {
        const auto& s = samples[idx[i]];
        std::vector<int> toks = s.tokens;
        std::vector<int> tgts = s.targets;
        toks.resize(maxlen, CharTokenizer::kPad);
        tgts.resize(maxlen, kIgnoreIndex);
        b.tokens.push_back(std::move(toks));
        b.targets.push_back(std::move(tgts));
    }
    return b;
}

TrainLog train_sft(Parameters& params, const ModelConfig& cfg,
                   const std::vector<TokenizedSample>& data, const TrainConfig& tc,
                   const std::set<std::string>& frozen) {
    if (data.empty()) throw DataError("train: empty dataset");
    cfg.validate();

    TrainLog log;
    OptimizerState opt;
    opt.hp = tc.adamw;
    const std::size_t bsz = static_cast<std::size_t>(tc.batch_size);
    const long steps_per_epoch = static_cast<long>((data.size() + bsz - 1) / bsz);
    LrSchedule sched = tc.schedule;
    if (sched.total_steps == 0) sched.total_steps = steps_per_epoch * tc.epochs;

    long step = 0;
    char line[128];
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        Rng shuffle_rng(tc.seed, 1000 + static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> idx = shuffle_rng.permutation(data.size());
        double epoch_loss = 0.0;
        long epoch_steps = 0;
        for (std::size_t pos = 0; pos < idx.size(); pos += bsz) {
            const std::size_t hi = std::min(idx.size(), pos + bsz);
            TokenBatch batch = make_batch(data, idx, pos, hi);
            ModelWeights<float> w = ModelWeights<float>::from_params(params, cfg);
            auto lg = transformer_loss_and_grads(w, cfg, batch, frozen);
            const double lr = lr_at_step(sched, std::min(step, sched.total_steps));
            adamw_step(params, lg.grads, opt, static_cast<float>(lr));
            std::snprintf(line, sizeof(line), "step %ld lr %.8g loss %.6f", step, lr, lg.loss);
            log.lines.emplace_back(line);
            epoch_loss += lg.loss;
            ++epoch_steps;
            ++step;
        }
        log.per_epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_steps));
    }
    return log;
}

std::vector<int> generate_greedy(const ModelWeights<float>& w, const ModelConfig& cfg,
                                 std::vector<int> prompt, int max_input, int max_new) {
    if (prompt.empty()) throw DataError("generate: empty prompt");
    const int limit = std::min(max_input, cfg.max_seq_len - 1);
    if (static_cast<int>(prompt.size()) > limit)
        prompt.erase(prompt.begin(), prompt.end() - limit);

    std::vector<int> seq = prompt;
    seq.push_back(CharTokenizer::kSep);
    std::vector<int> out;
    for (int i = 0; i < max_new; ++i) {
        if (static_cast<int>(seq.size()) >= cfg.max_seq_len) break;
        TokenBatch b;
        b.tokens.push_back(seq);
        Tensor logits = transformer_forward<float>(w, cfg, b, nullptr);
        const std::size_t last = seq.size() - 1;
        const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
        const float* row = &logits.data[last * v];
        int best = 0;
        for (std::size_t j = 1; j < v; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        if (best == CharTokenizer::kEos) break;
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

} // namespace pqlr
