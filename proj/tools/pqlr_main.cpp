// SPDX-License-Identifier: Apache-2.0
// pqlr: desk-scale SFT -> 4-bit PTQ -> QLoRA pipeline driver.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pqlr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pqlr;

namespace {

struct Shared {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
};

void add_shared(CLI::App* cmd, Shared& sh) {
    cmd->add_option("--config", sh.config_path, "Experiment config file (key = value)");
    cmd->add_option("--seed", sh.seed, "Override the config seed");
    cmd->add_option("--out", sh.out_dir, "Override the output directory");
}

ExperimentConfig make_config(const Shared& sh) {
    ExperimentConfig cfg = sh.config_path.empty() ? default_config() : load_config_file(sh.config_path);
    if (sh.seed) cfg.seed = *sh.seed;
    if (sh.out_dir) cfg.out_dir = *sh.out_dir;
    return cfg;
}

std::vector<RunManifest> load_manifests(const std::vector<std::string>& paths) {
    if (paths.empty()) throw UsageError("at least one manifest path is required");
    std::vector<RunManifest> out;
    for (const auto& p : paths) out.push_back(load_manifest(p));
    return out;
}

int cmd_gen_data(const Shared& sh) {
    ExperimentConfig cfg = sh.config_path.empty() ? default_config() : load_config_file(sh.config_path);
    if (sh.seed) cfg.seed = *sh.seed;
    const fs::path dir = sh.out_dir.value_or("data");
    fs::create_directories(dir);
    for (const auto& ds : cfg.datasets) {
        const std::size_t n = static_cast<std::size_t>(ds.train) + ds.dev + ds.test;
        auto samples = generate_synthetic(ds.kind, n, cfg.seed);
        const std::string path = (dir / (ds.name + ".jsonl")).string();
        save_jsonl(path, samples);
        std::cout << "wrote " << samples.size() << " samples to " << path << "\n";
    }
    return 0;
}

int cmd_train_sft(const Shared& sh) {
    ExperimentConfig cfg = make_config(sh);
    cfg.validate();
    PipelineData pd = build_pipeline_data(cfg);
    auto tokens = tokenize_dataset(pd.train_mix, cfg.max_input, cfg.max_output);
    Rng init_rng(cfg.seed, 1);
    Parameters params = init_parameters<float>(cfg.model, init_rng);
    TrainConfig tc;
    tc.epochs = cfg.stage1_epochs;
    tc.batch_size = cfg.stage1_batch;
    tc.seed = cfg.seed;
    tc.schedule.kind = cfg.stage1_schedule;
    tc.schedule.base_lr = cfg.stage1_lr;
    tc.schedule.warmup_steps = cfg.stage1_warmup;
    TrainLog log = train_sft(params, cfg.model, tokens, tc);
    for (const auto& l : log.lines) std::cout << l << "\n";
    fs::create_directories(cfg.out_dir);
    const std::string path = (fs::path(cfg.out_dir) / "sft.pqlr").string();
    save_checkpoint(ModelState::from_dense(std::move(params), cfg.model, "SFT-16bit"), path);
    std::cout << "saved " << path << "\n";
    return 0;
}

int cmd_quantize(const Shared& sh, const std::string& checkpoint, const std::string& method) {
    ExperimentConfig cfg = make_config(sh);
    if (!method.empty()) cfg.method = quant_method_from_string(method);
    ModelState sft = load_checkpoint(checkpoint);
    if (sft.is_quantized) throw UsageError("quantize expects a dense checkpoint");
    CalibrationSet calib;
    const CalibrationSet* calib_ptr = nullptr;
    if (cfg.method == QuantMethod::gptq) {
        PipelineData pd = build_pipeline_data(cfg);
        auto tokens = tokenize_dataset(pd.train_mix, cfg.max_input, cfg.max_output);
        calib = collect_calibration(sft.dense, sft.cfg, tokens,
                                    cfg.quant.gptq.calibration_samples, cfg.seed);
        calib_ptr = &calib;
    }
    QuantizedModel qm = quantize_model(sft.dense, sft.cfg, cfg.method, cfg.quant, calib_ptr);
    std::cout << "density " << model_bits_per_weight(qm) << " bits/weight\n";
    fs::create_directories(cfg.out_dir);
    const std::string path = (fs::path(cfg.out_dir) / "ptq.pqlr").string();
    save_checkpoint(ModelState::from_quantized(std::move(qm), sft.cfg), path);
    std::cout << "saved " << path << "\n";
    return 0;
}

int cmd_train_qlora(const Shared& sh, const std::string& checkpoint) {
    ExperimentConfig cfg = make_config(sh);
    ModelState ptq = load_checkpoint(checkpoint);
    if (!ptq.is_quantized) throw UsageError("train-qlora expects a quantized checkpoint");
    PipelineData pd = build_pipeline_data(cfg);
    auto tokens = tokenize_dataset(pd.train_mix, cfg.max_input, cfg.max_output);
    Rng lora_rng(cfg.seed, 2);
    AdapterMap adapters =
        init_lora(ptq.cfg, linear_param_names(ptq.cfg), cfg.lora_rank, cfg.lora_alpha, lora_rng);
    TrainConfig tc;
    tc.epochs = cfg.stage3_epochs;
    tc.batch_size = cfg.stage3_batch;
    tc.seed = cfg.seed + 1;
    tc.schedule.kind = cfg.stage3_schedule;
    tc.schedule.base_lr = cfg.stage3_lr;
    tc.schedule.warmup_steps = cfg.stage3_warmup;
    TrainLog log = train_qlora(ptq.quant, adapters, ptq.cfg, tokens, tc);
    for (const auto& l : log.lines) std::cout << l << "\n";
    fs::create_directories(cfg.out_dir);
    const std::string path = (fs::path(cfg.out_dir) / "qlora.pqlr").string();
    save_checkpoint(ModelState::from_quantized(ptq.quant, ptq.cfg, std::move(adapters),
                                               cfg.lora_rank, cfg.lora_alpha),
                    path);
    std::cout << "saved " << path << "\n";
    return 0;
}

int cmd_eval(const Shared& sh, const std::string& checkpoint) {
    ExperimentConfig cfg = make_config(sh);
    ModelState st = load_checkpoint(checkpoint);
    PipelineData pd = build_pipeline_data(cfg);
    std::vector<EvalSample> samples;
    for (const auto& s : pd.test) samples.push_back({s.prompt, s.response, s.task, ""});
    auto rm = resolve_state(st);
    MetricReport m = evaluate_stage(rm->weights, st.cfg, samples, {cfg.max_input, cfg.max_output},
                                    pd.label_set, st.stage_label);
    RunManifest single;
    single.stages.push_back({m.stage_label, checkpoint, m, 0.0});
    std::cout << emit_report({single}, "table");
    return 0;
}

int cmd_pipeline(const Shared& sh) {
    ExperimentConfig cfg = make_config(sh);
    RunManifest m = run_pipeline(cfg);
    std::cout << emit_report({m}, "table");
    const fs::path run_dir =
        fs::path(cfg.out_dir) / ("run-" + cfg.config_hash() + "-seed" + std::to_string(cfg.seed));
    std::cout << "manifest " << (run_dir / "manifest.json").string() << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& manifests, const std::string& format,
               const std::string& out_path) {
    const std::string text = emit_report(load_manifests(manifests), format);
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::trunc);
        if (!out) throw DataError("cannot write report: " + out_path);
        out << text;
        std::cout << "wrote " << out_path << "\n";
    }
    return 0;
}

int cmd_compare(const std::vector<std::string>& manifests, const std::string& stage_a,
                const std::string& stage_b, const std::string& metric) {
    CompareResult r = compare_stages(load_manifests(manifests), stage_a, stage_b, metric);
    std::cout << format_compare(r);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale SFT -> 4-bit PTQ -> QLoRA pipeline"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    Shared sh;
    std::string checkpoint, method, format = "table", out_path, stage_a, stage_b, metric = "f1_micro";
    std::vector<std::string> manifests;

    auto* gen = app.add_subcommand("gen-data", "Write the synthetic datasets as JSONL");
    add_shared(gen, sh);

    auto* sft = app.add_subcommand("train-sft", "Stage 1: full-parameter SFT");
    add_shared(sft, sh);

    auto* qz = app.add_subcommand("quantize", "Stage 2: 4-bit post-training quantization");
    add_shared(qz, sh);
    qz->add_option("--checkpoint", checkpoint, "Dense SFT checkpoint")->required();
    qz->add_option("--method", method, "bnb-nf4 or gptq");

    auto* ql = app.add_subcommand("train-qlora", "Stage 3: LoRA on the frozen quantized base");
    add_shared(ql, sh);
    ql->add_option("--checkpoint", checkpoint, "Quantized checkpoint")->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    add_shared(ev, sh);
    ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();

    auto* pl = app.add_subcommand("pipeline", "Run all three stages with per-stage eval");
    add_shared(pl, sh);

    auto* rp = app.add_subcommand("report", "Tabulate stage metrics from run manifests");
    rp->add_option("manifests", manifests, "Manifest JSON paths")->required();
    rp->add_option("--format", format, "csv or table");
    rp->add_option("--out", out_path, "Write the report to a file");

    auto* cp = app.add_subcommand("compare", "Signed-rank test between two stages");
    cp->add_option("manifests", manifests, "Manifest JSON paths")->required();
    cp->add_option("--stage-a", stage_a, "First stage label")->required();
    cp->add_option("--stage-b", stage_b, "Second stage label")->required();
    cp->add_option("--metric", metric, "Metric name (default f1_micro)");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(sh);
        if (sft->parsed()) return cmd_train_sft(sh);
        if (qz->parsed()) return cmd_quantize(sh, checkpoint, method);
        if (ql->parsed()) return cmd_train_qlora(sh, checkpoint);
        if (ev->parsed()) return cmd_eval(sh, checkpoint);
        if (pl->parsed()) return cmd_pipeline(sh);
        if (rp->parsed()) return cmd_report(manifests, format, out_path);
        if (cp->parsed()) return cmd_compare(manifests, stage_a, stage_b, metric);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
