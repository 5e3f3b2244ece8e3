// SPDX-License-Identifier: Apache-2.0
#include "pqlr/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pqlr {

std::string codebook_id_to_string(CodebookId id) {
    return id == CodebookId::nf4 ? "nf4" : "uniform4";
}

CodebookId codebook_id_from_string(const std::string& s) {
    if (s == "nf4") return CodebookId::nf4;
    if (s == "uniform4") return CodebookId::uniform4;
    throw UsageError("unknown codebook id: " + s);
}

int Codebook::zero_index() const {
    for (int i = 0; i < static_cast<int>(values.size()); ++i)
        if (values[i] == 0.0f) return i;
    throw NumericError("codebook: no exact zero value");
}

float Codebook::max_adjacent_gap() const {
    float gap = 0.0f;
    for (std::size_t i = 1; i < values.size(); ++i)
        gap = std::max(gap, values[i] - values[i - 1]);
    return gap;
}

double inverse_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0)) throw NumericError("inverse_normal_cdf: p outside (0,1)");
    // Acklam's rational approximation.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // One Halley step on F(x) = Phi(x) - p brings the result to full double
    // precision.
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

Codebook build_codebook(CodebookId id) {
    Codebook cb;
    cb.id = id;
    std::vector<double> vals;
    if (id == CodebookId::nf4) {
        // Asymmetric normal-quantile construction: 8 strictly negative values
        // and 8 non-negative with zero pinned, probabilities evenly spaced
        // between the offset and 1/2 on each side, normalized to [-1, 1].
        const double offset = (1.0 / 32.0 + 1.0 / 30.0) / 2.0;
        for (int i = 0; i < 8; ++i) {
            const double p = offset + (0.5 - offset) * static_cast<double>(i) / 8.0;
            vals.push_back(inverse_normal_cdf(p));
        }
        for (int i = 0; i < 8; ++i) {
            const double p = offset + (0.5 - offset) * static_cast<double>(i) / 7.0;
            vals.push_back(-inverse_normal_cdf(p));
        }
        std::sort(vals.begin(), vals.end());
        double maxabs = 0.0;
        for (double v : vals) maxabs = std::max(maxabs, std::abs(v));
        for (double& v : vals) v /= maxabs;
    } else {
        // 16 even steps over [-1, 1]; the step nearest zero is replaced by an
        // exact zero.
        int zi = 0;
        double best = 2.0;
        for (int k = 0; k < 16; ++k) {
            const double v = -1.0 + 2.0 * static_cast<double>(k) / 15.0;
            vals.push_back(v);
            if (std::abs(v) < best) {
                best = std::abs(v);
                zi = k;
            }
        }
        vals[static_cast<std::size_t>(zi)] = 0.0;
    }
    cb.values.assign(vals.begin(), vals.end());
    // Enforce the construction invariants.
    if (cb.values.size() != 16) throw NumericError("codebook: expected 16 values");
    cb.values.front() = -1.0f;
    cb.values.back() = 1.0f;
    for (std::size_t i = 1; i < cb.values.size(); ++i)
        if (!(cb.values[i] > cb.values[i - 1]))
            throw NumericError("codebook: values not strictly increasing");
    cb.zero_index();
    return cb;
}

DoubleQuantScales double_quantize_scales(const std::vector<float>& scales, int chunk_size) {
    if (scales.empty()) throw DataError("double_quantize_scales: empty scales");
    if (chunk_size < 1) throw UsageError("double_quantize_scales: chunk_size must be >= 1");
    DoubleQuantScales dq;
    dq.chunk_size = chunk_size;
    dq.codes.resize(scales.size());
    const std::size_t chunks =
        (scales.size() + static_cast<std::size_t>(chunk_size) - 1) / static_cast<std::size_t>(chunk_size);
    for (std::size_t ci = 0; ci < chunks; ++ci) {
        const std::size_t lo = ci * static_cast<std::size_t>(chunk_size);
        const std::size_t hi = std::min(scales.size(), lo + static_cast<std::size_t>(chunk_size));
        double mean = 0.0;
        for (std::size_t i = lo; i < hi; ++i) mean += scales[i];
        const float offset = static_cast<float>(mean / static_cast<double>(hi - lo));
        float absmax = 0.0f;
        for (std::size_t i = lo; i < hi; ++i)
            absmax = std::max(absmax, std::abs(scales[i] - offset));
        dq.offsets.push_back(offset);
        dq.second_scales.push_back(absmax);
        for (std::size_t i = lo; i < hi; ++i) {
            if (absmax == 0.0f) {
                dq.codes[i] = 0;
            } else {
                const float r = (scales[i] - offset) / absmax * 127.0f;
                dq.codes[i] = static_cast<std::int8_t>(std::lrintf(r));
            }
        }
    }
    return dq;
}

std::vector<float> reconstruct_scales(const DoubleQuantScales& dq) {
    std::vector<float> out(dq.codes.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t ci = i / static_cast<std::size_t>(dq.chunk_size);
        out[i] = dq.offsets[ci] +
                 static_cast<float>(dq.codes[i]) * (dq.second_scales[ci] / 127.0f);
    }
    return out;
}

std::vector<std::uint8_t> pack_codes(const std::vector<std::uint8_t>& nibbles) {
    std::vector<std::uint8_t> out((nibbles.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < nibbles.size(); ++i) {
        if (nibbles[i] >= 16) throw DataError("pack_codes: code out of 4-bit range");
        if (i % 2 == 0)
            out[i / 2] = nibbles[i];
        else
            out[i / 2] = static_cast<std::uint8_t>(out[i / 2] | (nibbles[i] << 4));
    }
    return out;
}

std::vector<std::uint8_t> unpack_codes(const std::vector<std::uint8_t>& packed, std::size_t n) {
    if (packed.size() < (n + 1) / 2) throw DataError("unpack_codes: truncated code buffer");
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (i % 2 == 0) ? (packed[i / 2] & 0x0f) : (packed[i / 2] >> 4);
    return out;
}

std::vector<float> blockwise_absmax_scales(const Tensor& w, int block_size) {
    if (block_size < 1) throw UsageError("quantize: block_size must be >= 1");
    const std::size_t n = w.size();
    const std::size_t blocks =
        (n + static_cast<std::size_t>(block_size) - 1) / static_cast<std::size_t>(block_size);
    std::vector<float> scales(blocks, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        const float a = std::abs(w.data[i]);
        float& s = scales[i / static_cast<std::size_t>(block_size)];
        s = std::max(s, a);
    }
    return scales;
}

namespace {

std::vector<std::uint8_t> quantize_with_scales(const Tensor& w, const std::vector<float>& scales,
                                               int block_size, const Codebook& cb) {
    const int zi = cb.zero_index();
    std::vector<std::uint8_t> nibbles(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const float s = scales[i / static_cast<std::size_t>(block_size)];
        nibbles[i] = (s == 0.0f) ? static_cast<std::uint8_t>(zi)
                                 : static_cast<std::uint8_t>(cb.nearest(w.data[i] / s));
    }
    return nibbles;
}

QuantizedTensor assemble(const Tensor& w, std::vector<std::uint8_t> nibbles,
                         std::vector<float> scales, int block_size, const Codebook& cb,
                         bool double_quant, int dq_chunk_size) {
    QuantizedTensor q;
    q.codes = pack_codes(nibbles);
    q.shape = w.shape;
    q.block_size = block_size;
    q.codebook_id = cb.id;
    if (double_quant)
        q.dq = double_quantize_scales(scales, dq_chunk_size);
    else
        q.scales = std::move(scales);
    return q;
}

} // namespace

QuantizedTensor quantize_blockwise(const Tensor& w, int block_size, const Codebook& cb,
                                   bool double_quant, int dq_chunk_size) {
    if (!w.all_finite()) throw NumericError("quantize_blockwise: non-finite input");
    std::vector<float> scales = blockwise_absmax_scales(w, block_size);
    std::vector<std::uint8_t> nibbles = quantize_with_scales(w, scales, block_size, cb);
    return assemble(w, std::move(nibbles), std::move(scales), block_size, cb, double_quant,
                    dq_chunk_size);
}

Tensor dequantize_blockwise(const QuantizedTensor& q) {
    const Codebook cb = build_codebook(q.codebook_id);
    const std::vector<float> scales = q.effective_scales();
    const std::size_t n = q.numel();
    if (q.codes.size() < (n + 1) / 2) throw DataError("dequantize: truncated code buffer");
    Tensor out = Tensor::zeros(q.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t c = q.code_at(i);
        out.data[i] = scales[i / static_cast<std::size_t>(q.block_size)] * cb.values[c];
    }
    return out;
}

double proxy_loss(const Tensor& w, const Tensor& w_hat, const Tensor& x) {
    detail::require(w.rank() == 2 && w_hat.rank() == 2 && x.rank() == 2,
                    "proxy_loss: operands must be 2-d");
    detail::require(w.shape == w_hat.shape, "proxy_loss: W/What shape mismatch");
    detail::require(w.cols() == x.rows(), "proxy_loss: X feature dim mismatch");
    Tensor d = w;
    for (std::size_t i = 0; i < d.size(); ++i) d.data[i] -= w_hat.data[i];
    Tensor dx = matmul(d, x);
    double acc = 0.0;
    for (float v : dx.data) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
}

namespace {

// Dense Cholesky inverse of a symmetric positive definite matrix (double).
std::vector<double> cholesky_inverse(std::vector<double> h, std::size_t n) {
    // In-place lower Cholesky.
    for (std::size_t j = 0; j < n; ++j) {
        double diag = h[j * n + j];
        for (std::size_t k = 0; k < j; ++k) diag -= h[j * n + k] * h[j * n + k];
        if (!(diag > 0.0)) throw NumericError("gptq: Hessian not positive definite after damping");
        const double ljj = std::sqrt(diag);
        h[j * n + j] = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = h[i * n + j];
            for (std::size_t k = 0; k < j; ++k) v -= h[i * n + k] * h[j * n + k];
            h[i * n + j] = v / ljj;
        }
    }
    // Solve L * Y = I, then L^T * Hinv = Y, column by column.
    std::vector<double> inv(n * n, 0.0);
    std::vector<double> y(n);
    for (std::size_t col = 0; col < n; ++col) {
        for (std::size_t i = 0; i < n; ++i) {
            double v = (i == col) ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k) v -= h[i * n + k] * y[k];
            y[i] = v / h[i * n + i];
        }
        for (std::size_t i = n; i-- > 0;) {
            double v = y[i];
            for (std::size_t k = i + 1; k < n; ++k) v -= h[k * n + i] * inv[k * n + col];
            inv[i * n + col] = v / h[i * n + i];
        }
    }
    return inv;
}

} // namespace

QuantizedTensor gptq_quantize_matrix(const Tensor& w, const Tensor& x, const GptqConfig& cfg,
                                     const Codebook& cb) {
    detail::require(w.rank() == 2 && x.rank() == 2, "gptq: operands must be 2-d");
    detail::require(w.cols() == x.rows(), "gptq: calibration feature dim mismatch");
    if (!(cfg.damping_ratio > 0.0)) throw UsageError("gptq: damping_ratio must be > 0");
    const std::size_t rows = w.rows(), cols = w.cols();

    // H = 2 * X * X^T + lambda * mean(diag) * I, in double.
    std::vector<double> h(cols * cols, 0.0);
    const std::size_t samples = x.cols();
    for (std::size_t i = 0; i < cols; ++i) {
        for (std::size_t j = i; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t s = 0; s < samples; ++s)
                acc += static_cast<double>(x.at(i, s)) * static_cast<double>(x.at(j, s));
            h[i * cols + j] = h[j * cols + i] = 2.0 * acc;
        }
    }
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < cols; ++i) mean_diag += h[i * cols + i];
    mean_diag /= static_cast<double>(cols);
    if (mean_diag <= 0.0) mean_diag = 1.0;
    const double damp = cfg.damping_ratio * mean_diag;
    for (std::size_t i = 0; i < cols; ++i) h[i * cols + i] += damp;

    // Optional activation ordering: process columns by descending diagonal.
    std::vector<std::size_t> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    if (cfg.act_order) {
        std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
            return h[a * cols + a] > h[b * cols + b];
        });
        std::vector<double> hp(cols * cols);
        for (std::size_t i = 0; i < cols; ++i)
            for (std::size_t j = 0; j < cols; ++j)
                hp[i * cols + j] = h[perm[i] * cols + perm[j]];
        h = std::move(hp);
    }

    const std::vector<double> hinv = cholesky_inverse(std::move(h), cols);

    // Blockwise scales come from the untouched W.
    std::vector<float> scales = blockwise_absmax_scales(w, cfg.block_size);
    const int zi = cb.zero_index();

    std::vector<std::uint8_t> nibbles(w.size());
    std::vector<double> wrow(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) wrow[j] = w.at(r, perm[j]);
        for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t orig_col = perm[j];
            const std::size_t flat = r * cols + orig_col;
            const float s = scales[flat / static_cast<std::size_t>(cfg.block_size)];
            std::uint8_t code;
            double wq;
            if (s == 0.0f) {
                code = static_cast<std::uint8_t>(zi);
                wq = 0.0;
            } else {
                code = static_cast<std::uint8_t>(
                    cb.nearest(static_cast<float>(wrow[j] / static_cast<double>(s))));
                wq = static_cast<double>(s) * static_cast<double>(cb.values[code]);
            }
            nibbles[flat] = code;
            const double err = (wrow[j] - wq) / hinv[j * cols + j];
            for (std::size_t k = j + 1; k < cols; ++k) wrow[k] -= err * hinv[j * cols + k];
        }
    }

    return assemble(w, std::move(nibbles), std::move(scales), cfg.block_size, cb,
                    /*double_quant=*/false, /*dq_chunk_size=*/256);
}

std::string quant_method_to_string(QuantMethod m) {
    return m == QuantMethod::bnb_nf4 ? "bnb-nf4" : "gptq";
}

QuantMethod quant_method_from_string(const std::string& s) {
    if (s == "bnb-nf4") return QuantMethod::bnb_nf4;
    if (s == "gptq") return QuantMethod::gptq;
    throw UsageError("unknown quantization method: " + s);
}

QuantizedModel quantize_model(const Parameters& params, const ModelConfig& cfg, QuantMethod method,
                              const QuantConfig& qcfg, const CalibrationSet* calibration) {
    QuantizedModel out;
    const Codebook cb = build_codebook(qcfg.codebook);
    const bool dq = qcfg.effective_double_quant(method);
    std::set<std::string> targets;
    for (const auto& n : linear_param_names(cfg)) targets.insert(n);

    for (const auto& [name, t] : params) {
        if (!targets.count(name)) {
            out.rest[name] = t;
            continue;
        }
        if (method == QuantMethod::bnb_nf4) {
            out.qweights[name] =
                quantize_blockwise(t, qcfg.block_size, cb, dq, qcfg.dq_chunk_size);
        } else {
            if (!calibration || !calibration->count(name))
                throw DataError("gptq: missing calibration activations for " + name);
            GptqConfig gc = qcfg.gptq;
            gc.block_size = qcfg.block_size;
            QuantizedTensor q = gptq_quantize_matrix(t, calibration->at(name), gc, cb);
            if (dq) {
                q.dq = double_quantize_scales(q.scales, qcfg.dq_chunk_size);
                q.scales.clear();
            }
            out.qweights[name] = std::move(q);
        }
    }
    out.stage_label =
        method == QuantMethod::bnb_nf4 ? "PTQ-BNB-4bit" : "PTQ-GPTQ-4bit";
    return out;
}

CalibrationSet collect_calibration(const Parameters& params, const ModelConfig& cfg,
                                   const std::vector<TokenizedSample>& samples, int max_samples,
                                   std::uint64_t seed) {
    if (samples.empty()) throw DataError("calibration: empty sample set");
    Rng rng(seed, 77);
    std::vector<std::size_t> order = rng.permutation(samples.size());
    const std::size_t take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(max_samples));

    ModelWeights<float> w = ModelWeights<float>::from_params(params, cfg);
    std::vector<ForwardCache<float>> caches(take);
    for (std::size_t si = 0; si < take; ++si) {
        TokenBatch b;
        b.tokens.push_back(samples[order[si]].tokens);
        transformer_forward<float>(w, cfg, b, &caches[si]);
    }
    CalibrationSet out;
    for (std::size_t li = 0; li < w.layers.size(); ++li) {
        const auto& L = w.layers[li];
        const std::pair<const char*, int> kinds[] = {{"attn.wq", 0}, {"attn.wk", 1}, {"attn.wv", 2},
                                                     {"attn.wo", 3}, {"mlp.w_up", 4},
                                                     {"mlp.w_down", 5}};
        (void)L;
        for (auto [suffix, kind] : kinds) {
            std::size_t total = 0;
            for (const auto& c : caches) total += c.layers[li].x_in.rows();
            std::size_t features = 0;
            // Resolve the cached input for this linear.
            auto pick = [&](const ForwardCache<float>& c) -> const Tensor& {
                const auto& lc = c.layers[li];
                switch (kind) {
                    case 0: return lc.cq.x;
                    case 1: return lc.ck.x;
                    case 2: return lc.cv.x;
                    case 3: return lc.co.x;
                    case 4: return lc.cup.x;
                    default: return lc.cdown.x;
                }
            };
            features = pick(caches[0]).cols();
            Tensor x = Tensor::zeros({features, total});
            std::size_t col = 0;
            for (const auto& c : caches) {
                const Tensor& act = pick(c);
                for (std::size_t rpos = 0; rpos < act.rows(); ++rpos) {
                    for (std::size_t f = 0; f < features; ++f)
                        x.at(f, col) = act.at(rpos, f);
                    ++col;
                }
            }
            out[names::layer(static_cast<int>(li), suffix)] = std::move(x);
        }
    }
    return out;
}

double bits_per_weight(const QuantizedTensor& q) {
    const double n = static_cast<double>(q.numel());
    double bits = 4.0 * n;
    if (q.dq) {
        bits += 8.0 * static_cast<double>(q.dq->codes.size());
        bits += 64.0 * static_cast<double>(q.dq->offsets.size());
    } else {
        bits += 32.0 * static_cast<double>(q.scales.size());
    }
    return bits / n;
}

double model_bits_per_weight(const QuantizedModel& m) {
    double bits = 0.0, n = 0.0;
    for (const auto& [name, q] : m.qweights) {
        bits += bits_per_weight(q) * static_cast<double>(q.numel());
        n += static_cast<double>(q.numel());
    }
    return n > 0.0 ? bits / n : 0.0;
}

} // namespace pqlr
