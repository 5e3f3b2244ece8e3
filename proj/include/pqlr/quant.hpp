// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pqlr/model.hpp"
#include "pqlr/tensor.hpp"

namespace pqlr {

enum class CodebookId : std::uint8_t { nf4 = 0, uniform4 = 1 };

std::string codebook_id_to_string(CodebookId id);
CodebookId codebook_id_from_string(const std::string& s);

// 16-value quantization codebook, strictly increasing over [-1, 1] with an
// exact zero.
struct Codebook {
    CodebookId id = CodebookId::nf4;
    std::vector<float> values;

    // Index of the nearest value to x; ties resolve to the lower index.
    int nearest(float x) const {
        int best = 0;
        float bestd = std::abs(x - values[0]);
        for (int i = 1; i < static_cast<int>(values.size()); ++i) {
            const float d = std::abs(x - values[i]);
            if (d < bestd) {
                bestd = d;
                best = i;
            }
        }
        return best;
    }

    int zero_index() const;
    float max_adjacent_gap() const;
};

// Inverse standard normal CDF (Acklam's rational approximation polished with
// one Halley step on erfc). The test suite checks it against an independent
// bisection oracle.
double inverse_normal_cdf(double p);

Codebook build_codebook(CodebookId id);

// Second-level quantization of the per-block scales: per chunk, a float mean
// offset and a float absmax scale plus one signed 8-bit residual code per
// original scale.
struct DoubleQuantScales {
    int chunk_size = 256;
    std::vector<float> offsets;        // per chunk
    std::vector<float> second_scales;  // per chunk (residual absmax)
    std::vector<std::int8_t> codes;    // one per original scale
};

DoubleQuantScales double_quantize_scales(const std::vector<float>& scales, int chunk_size);
std::vector<float> reconstruct_scales(const DoubleQuantScales& dq);

// Packed 4-bit tensor: two codes per byte, low nibble first; blocks of
// block_size consecutive elements in flat row-major order share one absmax
// scale.
struct QuantizedTensor {
    std::vector<std::uint8_t> codes;
    std::vector<std::size_t> shape;
    int block_size = 64;
    std::vector<float> scales;              // plain scales (empty when dq set)
    std::optional<DoubleQuantScales> dq;
    CodebookId codebook_id = CodebookId::nf4;

    std::size_t numel() const { return Tensor::numel(shape); }
    std::size_t num_blocks() const {
        return (numel() + static_cast<std::size_t>(block_size) - 1) /
               static_cast<std::size_t>(block_size);
    }
    std::uint8_t code_at(std::size_t i) const {
        const std::uint8_t b = codes[i / 2];
        return (i % 2 == 0) ? (b & 0x0f) : (b >> 4);
    }
    std::vector<float> effective_scales() const {
        return dq ? reconstruct_scales(*dq) : scales;
    }
};

std::vector<std::uint8_t> pack_codes(const std::vector<std::uint8_t>& nibbles);
std::vector<std::uint8_t> unpack_codes(const std::vector<std::uint8_t>& packed, std::size_t n);

// Per-block absmax scales over the flat array (shared by the BNB and GPTQ
// paths so proxy-loss comparisons stay fair).
std::vector<float> blockwise_absmax_scales(const Tensor& w, int block_size);

QuantizedTensor quantize_blockwise(const Tensor& w, int block_size, const Codebook& cb,
                                   bool double_quant, int dq_chunk_size = 256);

Tensor dequantize_blockwise(const QuantizedTensor& q);

template <typename T>
TensorT<T> dequantize_to(const QuantizedTensor& q) {
    return dequantize_blockwise(q).template cast<T>();
}

// Squared Frobenius norm of (W - What) * X, with X laid out [cols x samples].
double proxy_loss(const Tensor& w, const Tensor& w_hat, const Tensor& x);

struct GptqConfig {
    double damping_ratio = 0.01; // lambda relative to mean Hessian diagonal
    int calibration_samples = 128;
    int block_size = 64;
    bool act_order = false;
};

// Per-layer calibration activations, [features x samples] per target layer.
using CalibrationSet = std::map<std::string, Tensor>;

// Greedy column-ordered quantization with error feedback through the inverse
// Hessian H = 2*X*X^T + damping. Scales are the blockwise absmax of the
// original W, computed before any feedback mutates the working copy.
QuantizedTensor gptq_quantize_matrix(const Tensor& w, const Tensor& x, const GptqConfig& cfg,
                                     const Codebook& cb);

enum class QuantMethod { bnb_nf4, gptq };
std::string quant_method_to_string(QuantMethod m);
QuantMethod quant_method_from_string(const std::string& s);

struct QuantConfig {
    CodebookId codebook = CodebookId::nf4;
    int block_size = 64;
    // Double quant defaults on for the BNB path and off for GPTQ; kept as an
    // explicit optional so a config file can force either.
    std::optional<bool> double_quant;
    int dq_chunk_size = 256;
    GptqConfig gptq;

    bool effective_double_quant(QuantMethod m) const {
        return double_quant.value_or(m == QuantMethod::bnb_nf4);
    }
};

// Quantized model: all attention/MLP projections packed to 4 bits, everything
// else (embeddings, norms) kept full precision.
struct QuantizedModel {
    std::map<std::string, QuantizedTensor> qweights;
    Parameters rest;
    std::string stage_label;
};

QuantizedModel quantize_model(const Parameters& params, const ModelConfig& cfg, QuantMethod method,
                              const QuantConfig& qcfg, const CalibrationSet* calibration);

// One forward pass over calibration batches, stacking each target layer's
// input activations as [features x samples].
CalibrationSet collect_calibration(const Parameters& params, const ModelConfig& cfg,
                                   const std::vector<TokenizedSample>& samples, int max_samples,
                                   std::uint64_t seed);

// Average storage density of a packed tensor in bits per weight, from format
// arithmetic over the actual stored sizes.
double bits_per_weight(const QuantizedTensor& q);
double model_bits_per_weight(const QuantizedModel& m);

} // namespace pqlr
