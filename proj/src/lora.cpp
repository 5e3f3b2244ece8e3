// SPDX-License-Identifier: Apache-2.0
#include "pqlr/lora.hpp"

#include <algorithm>
#include <cstdio>

namespace pqlr {

AdapterMap init_lora(const ModelConfig& cfg, const std::vector<std::string>& targets, int rank,
                     float alpha, Rng& rng) {
    if (targets.empty()) throw UsageError("lora: empty target list");
    if (rank < 1) throw UsageError("lora: rank must be >= 1");
    std::set<std::string> known;
    for (const auto& n : linear_param_names(cfg)) known.insert(n);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dff = static_cast<std::size_t>(cfg.d_ff);
    AdapterMap out;
    for (const auto& t : targets) {
        if (!known.count(t)) throw DataError("lora: unknown target layer " + t);
        std::size_t d_in = d, d_out = d;
        if (t.find("mlp.w_up") != std::string::npos) d_out = dff;
        if (t.find("mlp.w_down") != std::string::npos) d_in = dff;
        LoraAdapter a;
        a.target = t;
        a.rank = rank;
        a.alpha = alpha;
        a.A = Tensor::zeros({static_cast<std::size_t>(rank), d_in});
        for (auto& v : a.A.data) v = static_cast<float>(rng.normal(0.0, 0.02));
        a.B = Tensor::zeros({d_out, static_cast<std::size_t>(rank)});
        out[t] = std::move(a);
    }
    return out;
}

TrainLog train_qlora(const QuantizedModel& base, AdapterMap& adapters, const ModelConfig& cfg,
                     const std::vector<TokenizedSample>& data, const TrainConfig& tc) {
    if (data.empty()) throw DataError("train: empty dataset");
    if (adapters.empty()) throw DataError("train_qlora: no adapters attached");
    cfg.validate();

    auto rm = resolve_qlora<float>(base, adapters, cfg);

    // The optimizer operates on a flat parameter map mirroring the adapters;
    // updates are copied back into the resolved adapter tensors each step.
    Parameters flat;
    for (const auto& [name, a] : rm->adapters) {
        flat[name + ".lora_A"] = a.A;
        flat[name + ".lora_B"] = a.B;
    }

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
            auto lg = transformer_loss_and_grads(rm->weights, cfg, batch);
            const double lr = lr_at_step(sched, std::min(step, sched.total_steps));
            adamw_step(flat, lg.grads, opt, static_cast<float>(lr));
            for (auto& [name, a] : rm->adapters) {
                a.A.data = flat.at(name + ".lora_A").data;
                a.B.data = flat.at(name + ".lora_B").data;
            }
            std::snprintf(line, sizeof(line), "step %ld lr %.8g loss %.6f", step, lr, lg.loss);
            log.lines.emplace_back(line);
            epoch_loss += lg.loss;
            ++epoch_steps;
            ++step;
        }
        log.per_epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_steps));
    }

    // Publish the trained adapters back to the caller's map.
    for (auto& [name, a] : adapters) {
        a.A = rm->adapters.at(name).A;
        a.B = rm->adapters.at(name).B;
    }
    return log;
}

Parameters merge_and_export(const QuantizedModel& base, const AdapterMap& adapters,
                            const ModelConfig& cfg) {
    (void)cfg;
    Parameters out = base.rest;
    for (const auto& [name, q] : base.qweights) {
        Tensor w = dequantize_blockwise(q);
        auto it = adapters.find(name);
        if (it != adapters.end()) {
            const LoraAdapter& a = it->second;
            Tensor delta = matmul(a.B, a.A); // [d_out, d_in]
            const float s = a.scaling();
            for (std::size_t i = 0; i < w.size(); ++i) w.data[i] += s * delta.data[i];
        }
        out[name] = std::move(w);
    }
    return out;
}

} // namespace pqlr
