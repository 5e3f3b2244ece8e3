// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pqlr/model.hpp"
#include "pqlr/quant.hpp"

namespace pqlr {

using AdapterMap = std::map<std::string, LoraAdapter>;

// A ~ N(0, 0.02^2) seeded, B exactly zero. Targets must be linear layer
// names; unknown names are rejected.
AdapterMap init_lora(const ModelConfig& cfg, const std::vector<std::string>& targets, int rank,
                     float alpha, Rng& rng);

// Owned dense view of a quantized base (optionally with adapters): the
// quantized matrices dequantized on resolution, everything else referenced by
// value copy. Adapters are cast copies unless the float view aliases the
// caller's live adapters.
template <typename T>
struct ResolvedModel {
    ParamMap<T> dense;
    std::map<std::string, LoraAdapterT<T>> adapters;
    ModelConfig cfg;
    ModelWeights<T> weights; // points into `dense` and `adapters`

    ResolvedModel(const ResolvedModel&) = delete;
    ResolvedModel& operator=(const ResolvedModel&) = delete;
    ResolvedModel(ResolvedModel&&) = delete;
    ResolvedModel() = default;
};

template <typename T>
void attach_adapters(ResolvedModel<T>& rm) {
    for (auto& layer : rm.weights.layers) {
        for (auto* lin : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w_up, &layer.w_down}) {
            auto it = rm.adapters.find(lin->name);
            if (it != rm.adapters.end()) lin->adapter = &it->second;
        }
    }
}

template <typename T>
std::unique_ptr<ResolvedModel<T>> resolve_qlora(const QuantizedModel& base,
                                                const AdapterMap& adapters,
                                                const ModelConfig& cfg) {
    auto rm = std::make_unique<ResolvedModel<T>>();
    rm->cfg = cfg;
    for (const auto& [name, q] : base.qweights) rm->dense[name] = dequantize_to<T>(q);
    for (const auto& [name, t] : base.rest) rm->dense[name] = t.template cast<T>();
    for (const auto& [name, a] : adapters) {
        if (!base.qweights.count(name))
            throw DataError("lora: adapter target is not a quantized linear: " + name);
        LoraAdapterT<T> at;
        at.target = a.target;
        at.A = a.A.template cast<T>();
        at.B = a.B.template cast<T>();
        at.rank = a.rank;
        at.alpha = static_cast<T>(a.alpha);
        rm->adapters[name] = std::move(at);
    }
    rm->weights = ModelWeights<T>::from_params(rm->dense, cfg);
    rm->weights.train_dense = false;
    rm->weights.train_adapters = true;
    attach_adapters(*rm);
    return rm;
}

// Dense view of a plain parameter checkpoint (no quantization, no adapters).
template <typename T>
std::unique_ptr<ResolvedModel<T>> resolve_dense(const ParamMap<T>& params, const ModelConfig& cfg) {
    auto rm = std::make_unique<ResolvedModel<T>>();
    rm->cfg = cfg;
    rm->dense = params;
    rm->weights = ModelWeights<T>::from_params(rm->dense, cfg);
    return rm;
}

// QLoRA fine-tuning: only adapter tensors receive optimizer updates; the
// quantized base is shared read-only and stays bit-identical.
TrainLog train_qlora(const QuantizedModel& base, AdapterMap& adapters, const ModelConfig& cfg,
                     const std::vector<TokenizedSample>& data, const TrainConfig& tc);

// Dense export: per target, weight = dequantize(W_q) + (alpha/r) * B * A.
Parameters merge_and_export(const QuantizedModel& base, const AdapterMap& adapters,
                            const ModelConfig& cfg);

} // namespace pqlr
