// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pqlr/lora.hpp"

namespace pqlr {

// CRC-32 (IEEE 802.3 polynomial, reflected).
std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0);

// Unified checkpoint payload: a dense model (stage 1) or a quantized base
// plus optional adapters (stages 2 and 3).
struct ModelState {
    ModelConfig cfg;
    std::string stage_label;
    bool is_quantized = false;
    Parameters dense;     // full parameter set when !is_quantized
    QuantizedModel quant; // quantized linears + full-precision rest
    AdapterMap adapters;
    int lora_rank = 0;
    float lora_alpha = 0.0f;

    static ModelState from_dense(Parameters p, const ModelConfig& cfg, std::string label) {
        ModelState s;
        s.cfg = cfg;
        s.dense = std::move(p);
        s.stage_label = std::move(label);
        return s;
    }
    static ModelState from_quantized(QuantizedModel q, const ModelConfig& cfg,
                                     AdapterMap adapters = {}, int rank = 0, float alpha = 0.0f) {
        ModelState s;
        s.cfg = cfg;
        s.is_quantized = true;
        s.stage_label = q.stage_label;
        s.quant = std::move(q);
        s.adapters = std::move(adapters);
        s.lora_rank = rank;
        s.lora_alpha = alpha;
        if (!s.adapters.empty()) s.stage_label += "+QLoRA";
        return s;
    }
};

// Binary format: magic "PQLR", u32 version, little-endian throughout;
// stage/config header, tensor directory, payload, trailing CRC-32 over
// everything after the magic+version words.
void save_checkpoint(const ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

// Dense float view for evaluation of any stage.
std::unique_ptr<ResolvedModel<float>> resolve_state(const ModelState& state);

// Serialized byte size of one quantized entry's payload blob (codes +
// scales); used for the density cross-check against format arithmetic.
std::size_t quantized_payload_bytes(const QuantizedTensor& q);

} // namespace pqlr
