// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "pqlr/lora.hpp"

namespace pqlr {

struct EvalSample {
    std::string prompt;
    std::string reference;
    std::string task; // "generation" or "classification"
    std::string prediction;
};

struct RougeScores {
    double r1 = 0.0, r2 = 0.0, rl = 0.0, rlsum = 0.0;
};

// ROUGE tokenization: lowercase, split on non-alphanumeric runs, no stemming.
std::vector<std::string> rouge_tokenize(const std::string& text);
std::vector<std::vector<std::string>> split_sentences(const std::string& text);

// F1-variant ROUGE-1/2/L plus summary-level ROUGE-Lsum (union LCS over
// newline/terminal-punctuation sentences). Both texts empty scores 1.0 by
// convention; one empty scores 0.
RougeScores rouge_scores(const std::string& prediction, const std::string& reference);

struct ClassificationMetrics {
    double precision = 0.0, recall = 0.0, f1_micro = 0.0;
};

// Micro-averaged metrics. Predictions are matched to labels by exact string
// comparison after trimming and case-folding; anything else counts as a wrong
// prediction of a reserved invalid label.
ClassificationMetrics classification_metrics(const std::vector<std::string>& predictions,
                                             const std::vector<std::string>& references,
                                             const std::vector<std::string>& label_set);

enum class WilcoxonMode { exact, normal_approx, auto_select };

struct WilcoxonResult {
    double w_plus = 0.0, w_minus = 0.0;
    int n_effective = 0;
    double p_value = 1.0;
    bool all_zero = false; // degenerate: every difference was zero
    bool exact = false;    // whether the exact distribution was used
};

// Paired signed-rank test. Zero differences are dropped (classical rule),
// ties get average ranks. Exact two-sided p by the full sign-assignment
// distribution when n_effective <= 25 in auto mode, normal approximation with
// tie correction above.
WilcoxonResult wilcoxon_signed_rank(const std::vector<std::pair<double, double>>& pairs,
                                    WilcoxonMode mode = WilcoxonMode::auto_select);

struct MetricReport {
    std::string stage_label;
    std::size_t gen_count = 0;
    double r1 = 0.0, r2 = 0.0, rl = 0.0, rlsum = 0.0;
    std::size_t cls_count = 0;
    double precision = 0.0, recall = 0.0, f1_micro = 0.0;

    // Named lookup used by report/compare ("R1", "R2", "RL", "RLsum",
    // "precision", "recall", "f1_micro").
    double metric(const std::string& name) const;
    static const std::vector<std::string>& generation_metric_names();
    static const std::vector<std::string>& classification_metric_names();
};

struct EvalLimits {
    int max_input = 320;
    int max_output = 80;
};

// Greedy decoding over the test set, ROUGE for generation samples and
// micro-F1 for classification samples. Per-sample decode failures are
// recorded (empty prediction) and never abort the run.
MetricReport evaluate_stage(const ModelWeights<float>& weights, const ModelConfig& cfg,
                            std::vector<EvalSample>& samples, const EvalLimits& limits,
                            const std::vector<std::string>& label_set,
                            const std::string& stage_label);

} // namespace pqlr
