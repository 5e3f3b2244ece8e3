// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pqlr/data.hpp"
#include "pqlr/model.hpp"
#include "pqlr/quant.hpp"

namespace pqlr {

struct DatasetSpec {
    std::string name;
    DatasetKind kind = DatasetKind::general_instruction;
    std::string path; // empty => synthetic generator
    int train = 0, dev = 0, test = 0;
};

// Declarative description of one pipeline run. Parsed from a flat
// `key = value` file with '#' comments and dotted section prefixes.
struct ExperimentConfig {
    ModelConfig model;
    std::uint64_t seed = 1;
    std::string out_dir = "runs";

    std::vector<DatasetSpec> datasets; // defaults: general + classification + summarization

    // Stage 1: full-parameter SFT. The learning rate is a desk-scale default
    // (training starts from random weights here, not a pretrained 7B).
    double stage1_lr = 1e-3;
    LrSchedule::Kind stage1_schedule = LrSchedule::Kind::linear;
    int stage1_epochs = 2;
    int stage1_batch = 16;
    long stage1_warmup = 0;

    QuantMethod method = QuantMethod::bnb_nf4;
    QuantConfig quant;

    // Stage 3: QLoRA. 2e-4 is one of the adapter rates reported for this
    // setting; rank/alpha are our defaults.
    double stage3_lr = 2e-4;
    LrSchedule::Kind stage3_schedule = LrSchedule::Kind::cosine;
    int stage3_epochs = 2;
    int stage3_batch = 16;
    long stage3_warmup = 0;
    int lora_rank = 8;
    float lora_alpha = 16.0f;

    int max_input = 320;  // 10x scale-down of the 3200/800 token limits
    int max_output = 80;

    void validate() const;
    // Canonical text form; also the basis of the manifest's config hash.
    std::string canonical_text() const;
    std::string config_hash() const;
};

ExperimentConfig default_config();
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

} // namespace pqlr
