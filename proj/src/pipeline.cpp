// SPDX-License-Identifier: Apache-2.0
#include "pqlr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace pqlr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json metrics_to_json(const MetricReport& m) {
    json j;
    j["stage_label"] = m.stage_label;
    j["gen_count"] = m.gen_count;
    j["cls_count"] = m.cls_count;
    if (m.gen_count > 0) {
        j["R1"] = m.r1;
        j["R2"] = m.r2;
        j["RL"] = m.rl;
        j["RLsum"] = m.rlsum;
    }
    if (m.cls_count > 0) {
        j["precision"] = m.precision;
        j["recall"] = m.recall;
        j["f1_micro"] = m.f1_micro;
    }
    return j;
}

MetricReport metrics_from_json(const json& j) {
    MetricReport m;
    m.stage_label = j.value("stage_label", "");
    m.gen_count = j.value("gen_count", std::size_t{0});
    m.cls_count = j.value("cls_count", std::size_t{0});
    m.r1 = j.value("R1", 0.0);
    m.r2 = j.value("R2", 0.0);
    m.rl = j.value("RL", 0.0);
    m.rlsum = j.value("RLsum", 0.0);
    m.precision = j.value("precision", 0.0);
    m.recall = j.value("recall", 0.0);
    m.f1_micro = j.value("f1_micro", 0.0);
    return m;
}

} // namespace

void save_manifest(const RunManifest& m, const std::string& path) {
    json j;
    j["config_hash"] = m.config_hash;
    j["seed"] = m.seed;
    j["quant_method"] = m.quant_method;
    j["tool_version"] = m.tool_version;
    j["stage1_dataset_hash"] = m.stage1_dataset_hash;
    j["stage3_dataset_hash"] = m.stage3_dataset_hash;
    j["stages"] = json::array();
    for (const auto& s : m.stages) {
        json sj;
        sj["label"] = s.label;
        sj["checkpoint"] = s.checkpoint_path;
        sj["wall_seconds"] = s.wall_seconds;
        sj["metrics"] = metrics_to_json(s.metrics);
        j["stages"].push_back(std::move(sj));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("manifest not found: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("manifest parse error: " + std::string(e.what()));
    }
    RunManifest m;
    m.config_hash = j.value("config_hash", "");
    m.seed = j.value("seed", std::uint64_t{0});
    m.quant_method = j.value("quant_method", "");
    m.tool_version = j.value("tool_version", "");
    m.stage1_dataset_hash = j.value("stage1_dataset_hash", std::uint64_t{0});
    m.stage3_dataset_hash = j.value("stage3_dataset_hash", std::uint64_t{0});
    for (const auto& sj : j.value("stages", json::array())) {
        StageRecord s;
        s.label = sj.value("label", "");
        s.checkpoint_path = sj.value("checkpoint", "");
        s.wall_seconds = sj.value("wall_seconds", 0.0);
        s.metrics = metrics_from_json(sj.value("metrics", json::object()));
        m.stages.push_back(std::move(s));
    }
    return m;
}

PipelineData build_pipeline_data(const ExperimentConfig& cfg) {
    cfg.validate();
    PipelineData pd;
    pd.label_set = call_purpose_labels();
    for (const auto& spec : cfg.datasets) {
        std::vector<Sample> all;
        const std::size_t want =
            static_cast<std::size_t>(spec.train) + spec.dev + spec.test;
        if (!spec.path.empty()) {
            LoadStats st;
            all = load_dataset_jsonl(spec.path, cfg.max_input, cfg.max_output, &st);
            if (all.size() < want)
                throw DataError("dataset " + spec.name + ": only " + std::to_string(all.size()) +
                                " usable samples, need " + std::to_string(want));
        } else {
            all = generate_synthetic(spec.kind, want, cfg.seed);
        }
        // Split order: train, dev, test.
        for (std::size_t i = 0; i < static_cast<std::size_t>(spec.train); ++i)
            pd.train_mix.push_back(all[i]);
        for (std::size_t i = 0; i < static_cast<std::size_t>(spec.test); ++i) {
            const auto& s = all[static_cast<std::size_t>(spec.train + spec.dev) + i];
            pd.test.push_back(s);
        }
    }
    return pd;
}

namespace {

std::vector<EvalSample> to_eval_samples(const std::vector<Sample>& test) {
    std::vector<EvalSample> out;
    out.reserve(test.size());
    for (const auto& s : test) out.push_back({s.prompt, s.response, s.task, ""});
    return out;
}

MetricReport eval_state(const ModelState& st, const PipelineData& pd,
                        const ExperimentConfig& cfg) {
    auto rm = resolve_state(st);
    std::vector<EvalSample> samples = to_eval_samples(pd.test);
    return evaluate_stage(rm->weights, st.cfg, samples, {cfg.max_input, cfg.max_output},
                          pd.label_set, st.stage_label);
}

} // namespace

RunManifest run_pipeline(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::string hash = cfg.config_hash();
    const fs::path run_dir =
        fs::path(cfg.out_dir) / ("run-" + hash + "-seed" + std::to_string(cfg.seed));
    fs::create_directories(run_dir);
    const std::string manifest_path = (run_dir / "manifest.json").string();
    {
        std::ofstream cf(run_dir / "config.txt", std::ios::trunc);
        cf << cfg.canonical_text();
    }

    RunManifest manifest;
    manifest.config_hash = hash;
    manifest.seed = cfg.seed;
    manifest.quant_method = quant_method_to_string(cfg.method);

    // Resume: reuse completed stages from a matching manifest.
    if (fs::exists(manifest_path)) {
        try {
            RunManifest prev = load_manifest(manifest_path);
            if (prev.config_hash == hash) {
                for (const auto& s : prev.stages)
                    if (fs::exists(s.checkpoint_path)) manifest.stages.push_back(s);
                manifest.stage1_dataset_hash = prev.stage1_dataset_hash;
                manifest.stage3_dataset_hash = prev.stage3_dataset_hash;
            }
        } catch (const std::exception&) {
            manifest.stages.clear(); // unreadable manifest: rerun from scratch
        }
    }

    PipelineData pd = build_pipeline_data(cfg);
    // Training sequences are prompt + SEP + response + EOS and must fit the
    // context window, so the configured limits are clamped against it.
    const int fit_output = std::min(cfg.max_output, cfg.model.max_seq_len - 2);
    const int fit_input = std::min(cfg.max_input, cfg.model.max_seq_len - 1 - fit_output);
    const auto train_tokens = tokenize_dataset(pd.train_mix, fit_input, fit_output);
    manifest.stage1_dataset_hash = dataset_hash(pd.train_mix);
    // The same fine-tuning mixture is applied twice: full SFT and QLoRA.
    manifest.stage3_dataset_hash = manifest.stage1_dataset_hash;

    auto has_stage = [&](std::size_t i) { return manifest.stages.size() > i; };
    auto timed = [&](auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    try {
        // Stage 1: SFT-16bit.
        ModelState sft_state;
        const std::string sft_path = (run_dir / "sft.pqlr").string();
        if (has_stage(0)) {
            sft_state = load_checkpoint(manifest.stages[0].checkpoint_path);
        } else {
            StageRecord rec;
            rec.wall_seconds = timed([&] {
                Rng init_rng(cfg.seed, 1);
                Parameters params = init_parameters<float>(cfg.model, init_rng);
                TrainConfig tc;
                tc.epochs = cfg.stage1_epochs;
                tc.batch_size = cfg.stage1_batch;
                tc.seed = cfg.seed;
                tc.schedule.kind = cfg.stage1_schedule;
                tc.schedule.base_lr = cfg.stage1_lr;
                tc.schedule.warmup_steps = cfg.stage1_warmup;
                TrainLog log = train_sft(params, cfg.model, train_tokens, tc);
                std::ofstream lf(run_dir / "sft_train.log", std::ios::trunc);
                for (const auto& l : log.lines) lf << l << "\n";
                sft_state = ModelState::from_dense(std::move(params), cfg.model, "SFT-16bit");
                save_checkpoint(sft_state, sft_path);
                rec.metrics = eval_state(sft_state, pd, cfg);
            });
            rec.label = "SFT-16bit";
            rec.checkpoint_path = sft_path;
            manifest.stages.push_back(std::move(rec));
            save_manifest(manifest, manifest_path);
        }
        if (!has_stage(0)) throw NumericError("pipeline: stage 1 bookkeeping failure");
        if (sft_state.dense.empty())
            sft_state = load_checkpoint(manifest.stages[0].checkpoint_path);

        // Stage 2: PTQ.
        ModelState ptq_state;
        const std::string ptq_path = (run_dir / "ptq.pqlr").string();
        if (has_stage(1)) {
            ptq_state = load_checkpoint(manifest.stages[1].checkpoint_path);
        } else {
            StageRecord rec;
            rec.wall_seconds = timed([&] {
                CalibrationSet calib;
                const CalibrationSet* calib_ptr = nullptr;
                if (cfg.method == QuantMethod::gptq) {
                    calib = collect_calibration(sft_state.dense, cfg.model, train_tokens,
                                                cfg.quant.gptq.calibration_samples, cfg.seed);
                    calib_ptr = &calib;
                }
                QuantizedModel qm =
                    quantize_model(sft_state.dense, cfg.model, cfg.method, cfg.quant, calib_ptr);
                ptq_state = ModelState::from_quantized(std::move(qm), cfg.model);
                save_checkpoint(ptq_state, ptq_path);
                rec.metrics = eval_state(ptq_state, pd, cfg);
            });
            rec.label = ptq_state.stage_label;
            rec.checkpoint_path = ptq_path;
            manifest.stages.push_back(std::move(rec));
            save_manifest(manifest, manifest_path);
        }

        // Stage 3: QLoRA on the same mixture.
        if (!has_stage(2)) {
            const std::string qlora_path = (run_dir / "qlora.pqlr").string();
            StageRecord rec;
            ModelState ql_state;
            rec.wall_seconds = timed([&] {
                Rng lora_rng(cfg.seed, 2);
                AdapterMap adapters = init_lora(cfg.model, linear_param_names(cfg.model),
                                                cfg.lora_rank, cfg.lora_alpha, lora_rng);
                TrainConfig tc;
                tc.epochs = cfg.stage3_epochs;
                tc.batch_size = cfg.stage3_batch;
                tc.seed = cfg.seed + 1;
                tc.schedule.kind = cfg.stage3_schedule;
                tc.schedule.base_lr = cfg.stage3_lr;
                tc.schedule.warmup_steps = cfg.stage3_warmup;
                TrainLog log = train_qlora(ptq_state.quant, adapters, cfg.model, train_tokens, tc);
                std::ofstream lf(run_dir / "qlora_train.log", std::ios::trunc);
                for (const auto& l : log.lines) lf << l << "\n";
                ql_state = ModelState::from_quantized(ptq_state.quant, cfg.model,
                                                      std::move(adapters), cfg.lora_rank,
                                                      cfg.lora_alpha);
                save_checkpoint(ql_state, qlora_path);
                rec.metrics = eval_state(ql_state, pd, cfg);
            });
            rec.label = ql_state.stage_label;
            rec.checkpoint_path = qlora_path;
            manifest.stages.push_back(std::move(rec));
            save_manifest(manifest, manifest_path);
        }
    } catch (...) {
        save_manifest(manifest, manifest_path); // record completed stages
        throw;
    }
    return manifest;
}

namespace {

struct ReportRow {
    std::string label;
    std::map<std::string, double> values;
    std::size_t count = 0;
};

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

} // namespace

std::string emit_report(const std::vector<RunManifest>& manifests, const std::string& format) {
    if (manifests.empty()) throw UsageError("report: no manifests");
    // Aggregate by stage label (average over manifests), preserving first-seen
    // stage order.
    std::vector<ReportRow> rows;
    std::vector<std::string> columns;
    auto row_for = [&](const std::string& label) -> ReportRow& {
        for (auto& r : rows)
            if (r.label == label) return r;
        rows.push_back({label, {}, 0});
        return rows.back();
    };
    bool first_manifest = true;
    std::set<std::string> expected_cols;
    for (const auto& m : manifests) {
        std::set<std::string> cols;
        for (const auto& s : m.stages) {
            ReportRow& r = row_for(s.label);
            auto add = [&](const std::string& name, double v) {
                r.values[name] += v;
                cols.insert(name);
                if (std::find(columns.begin(), columns.end(), name) == columns.end())
                    columns.push_back(name);
            };
            if (s.metrics.gen_count > 0)
                for (const auto& n : MetricReport::generation_metric_names())
                    add(n, s.metrics.metric(n));
            if (s.metrics.cls_count > 0)
                for (const auto& n : MetricReport::classification_metric_names())
                    add(n, s.metrics.metric(n));
            r.count += 1;
        }
        if (first_manifest) {
            expected_cols = cols;
            first_manifest = false;
        } else if (cols != expected_cols) {
            throw DataError("report: inconsistent metric sets across manifests");
        }
    }
    for (auto& r : rows)
        for (auto& [k, v] : r.values) v /= static_cast<double>(r.count);

    // Best value per column; ties break toward the earlier stage.
    std::map<std::string, std::size_t> best;
    for (const auto& c : columns) {
        std::size_t bi = 0;
        double bv = -1.0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            auto it = rows[i].values.find(c);
            if (it != rows[i].values.end() && it->second > bv) {
                bv = it->second;
                bi = i;
            }
        }
        best[c] = bi;
    }

    std::ostringstream o;
    const bool mark = rows.size() > 1;
    if (format == "csv") {
        o << "stage";
        for (const auto& c : columns) o << "," << csv_quote(c);
        o << "\r\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            o << csv_quote(rows[i].label);
            for (const auto& c : columns) {
                o << ",";
                auto it = rows[i].values.find(c);
                if (it != rows[i].values.end()) {
                    o << std::fixed << std::setprecision(4) << it->second;
                    if (mark && best[c] == i) o << "*";
                }
            }
            o << "\r\n";
        }
    } else if (format == "table") {
        std::size_t w0 = 5;
        for (const auto& r : rows) w0 = std::max(w0, r.label.size());
        o << std::left << std::setw(static_cast<int>(w0) + 2) << "stage";
        for (const auto& c : columns) o << std::setw(10) << c;
        o << "\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            o << std::left << std::setw(static_cast<int>(w0) + 2) << rows[i].label;
            for (const auto& c : columns) {
                auto it = rows[i].values.find(c);
                std::ostringstream cell;
                if (it != rows[i].values.end()) {
                    cell << std::fixed << std::setprecision(4) << it->second;
                    if (mark && best[c] == i) cell << "*";
                }
                o << std::setw(10) << cell.str();
            }
            o << "\n";
        }
    } else {
        throw UsageError("report: unknown format " + format);
    }
    return o.str();
}

CompareResult compare_pairs(std::vector<std::pair<double, double>> pairs, std::string stage_a,
                            std::string stage_b, std::string metric) {
    if (pairs.empty()) throw DataError("compare: no pairs");
    CompareResult r;
    r.stage_a = std::move(stage_a);
    r.stage_b = std::move(stage_b);
    r.metric = std::move(metric);
    r.pairs = std::move(pairs);
    r.wilcoxon = wilcoxon_signed_rank(r.pairs);
    std::vector<double> diffs;
    for (const auto& [a, b] : r.pairs) diffs.push_back(a - b);
    std::sort(diffs.begin(), diffs.end());
    const std::size_t n = diffs.size();
    r.median_diff = n % 2 == 1 ? diffs[n / 2] : 0.5 * (diffs[n / 2 - 1] + diffs[n / 2]);
    r.significant_at_05 = !r.wilcoxon.all_zero && r.wilcoxon.p_value <= 0.05;
    return r;
}

CompareResult compare_stages(const std::vector<RunManifest>& manifests, const std::string& stage_a,
                             const std::string& stage_b, const std::string& metric) {
    std::vector<std::pair<double, double>> pairs;
    for (const auto& m : manifests) {
        const MetricReport *ma = nullptr, *mb = nullptr;
        for (const auto& s : m.stages) {
            if (s.label == stage_a) ma = &s.metrics;
            if (s.label == stage_b) mb = &s.metrics;
        }
        if (ma && mb) pairs.emplace_back(ma->metric(metric), mb->metric(metric));
    }
    if (pairs.empty())
        throw DataError("compare: no manifest carries both stages " + stage_a + " and " + stage_b);
    return compare_pairs(std::move(pairs), stage_a, stage_b, metric);
}

std::string format_compare(const CompareResult& r) {
    std::ostringstream o;
    o << "compare " << r.stage_a << " vs " << r.stage_b << " on " << r.metric << "\n";
    o << "pairs " << r.pairs.size() << " n_effective " << r.wilcoxon.n_effective << "\n";
    o << std::setprecision(6) << "W+ " << r.wilcoxon.w_plus << " W- " << r.wilcoxon.w_minus
      << " median_diff " << r.median_diff << "\n";
    if (r.wilcoxon.all_zero) {
        o << "p 1.0 (degenerate: all differences zero)\n";
    } else {
        o << "p " << r.wilcoxon.p_value << (r.wilcoxon.exact ? " (exact)" : " (normal approx)")
          << "\n";
    }
    o << (r.significant_at_05 ? "significant at 0.05" : "not significant at 0.05") << "\n";
    return o.str();
}

} // namespace pqlr
