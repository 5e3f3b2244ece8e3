// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "pqlr/checkpoint.hpp"
#include "pqlr/config.hpp"
#include "pqlr/eval.hpp"

namespace pqlr {

inline constexpr const char* kToolVersion = "0.1.0";

struct StageRecord {
    std::string label;
    std::string checkpoint_path;
    MetricReport metrics;
    double wall_seconds = 0.0;
};

struct RunManifest {
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string quant_method;
    std::string tool_version = kToolVersion;
    std::uint64_t stage1_dataset_hash = 0;
    std::uint64_t stage3_dataset_hash = 0;
    std::vector<StageRecord> stages; // execution order 1 -> 2 -> 3
};

void save_manifest(const RunManifest& m, const std::string& path);
RunManifest load_manifest(const std::string& path);

// Materialized train/dev/test mixture for a config (stage 3 reuses the
// stage-1 training mixture).
struct PipelineData {
    std::vector<Sample> train_mix; // general + task training data
    std::vector<Sample> test;      // task test data only
    std::vector<std::string> label_set;
};

PipelineData build_pipeline_data(const ExperimentConfig& cfg);

// Executes SFT -> PTQ -> QLoRA with per-stage evaluation and checkpoints
// under <out_dir>/run-<hash>-seed<seed>/. Completed stages found in an
// existing manifest are reused; a stage failure still writes the manifest for
// the stages that finished.
RunManifest run_pipeline(const ExperimentConfig& cfg);

// One row per stage, best value per metric column marked with '*'. Metrics
// are averaged across manifests carrying the same stage label.
std::string emit_report(const std::vector<RunManifest>& manifests, const std::string& format);

struct CompareResult {
    std::string stage_a, stage_b, metric;
    std::vector<std::pair<double, double>> pairs;
    WilcoxonResult wilcoxon;
    double median_diff = 0.0;
    bool significant_at_05 = false;
};

// Pairs metric values per manifest condition (seed) for two stage labels and
// runs the signed-rank test.
CompareResult compare_stages(const std::vector<RunManifest>& manifests, const std::string& stage_a,
                             const std::string& stage_b, const std::string& metric);

// The signed-rank comparison on explicit paired scores (also used by the
// report tooling when pairs come from external tables).
CompareResult compare_pairs(std::vector<std::pair<double, double>> pairs, std::string stage_a,
                            std::string stage_b, std::string metric);

std::string format_compare(const CompareResult& r);

} // namespace pqlr
