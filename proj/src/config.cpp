// SPDX-License-Identifier: Apache-2.0
#include "pqlr/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace pqlr {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw UsageError("config: bad boolean value '" + v + "'");
}

DatasetSpec* find_dataset(ExperimentConfig& c, const std::string& name) {
    for (auto& d : c.datasets)
        if (d.name == name) return &d;
    return nullptr;
}

} // namespace

ExperimentConfig default_config() {
    ExperimentConfig c;
    // Mixture proportions mirror the reported dataset-size table at roughly
    // 1/20 scale: general 2500, task sets 300 with 40-sample dev/test splits.
    c.datasets = {
        {"general", DatasetKind::general_instruction, "", 2500, 100, 0},
        {"classification", DatasetKind::classification_like, "", 300, 40, 70},
        {"summarization", DatasetKind::summarization_like, "", 300, 40, 40},
    };
    return c;
}

void ExperimentConfig::validate() const {
    model.validate();
    if (max_input <= 0 || max_output <= 0) throw UsageError("config: limits must be > 0");
    if (datasets.empty()) throw UsageError("config: no datasets");
    for (const auto& d : datasets) {
        if (d.train < 0 || d.dev < 0 || d.test < 0)
            throw UsageError("config: negative split size for " + d.name);
        if (d.kind == DatasetKind::general_instruction && d.test != 0)
            throw UsageError("config: general_instruction is excluded from the test split");
        if (!d.path.empty()) {
            std::ifstream f(d.path);
            if (!f) throw DataError("config: dataset file not found: " + d.path);
        }
    }
    if (stage1_epochs < 1 || stage3_epochs < 1) throw UsageError("config: epochs must be >= 1");
    if (lora_rank < 1) throw UsageError("config: lora rank must be >= 1");
}

std::string ExperimentConfig::canonical_text() const {
    std::ostringstream o;
    o << "seed = " << seed << "\n";
    o << "model.vocab_size = " << model.vocab_size << "\n";
    o << "model.d_model = " << model.d_model << "\n";
    o << "model.n_layers = " << model.n_layers << "\n";
    o << "model.n_heads = " << model.n_heads << "\n";
    o << "model.d_ff = " << model.d_ff << "\n";
    o << "model.max_seq_len = " << model.max_seq_len << "\n";
    o << "model.tie_embeddings = " << (model.tie_embeddings ? "true" : "false") << "\n";
    for (const auto& d : datasets) {
        const std::string p = "data." + d.name + ".";
        o << p << "kind = " << dataset_kind_to_string(d.kind) << "\n";
        if (!d.path.empty()) o << p << "path = " << d.path << "\n";
        o << p << "train = " << d.train << "\n";
        o << p << "dev = " << d.dev << "\n";
        o << p << "test = " << d.test << "\n";
    }
    o << "stage1.lr = " << stage1_lr << "\n";
    o << "stage1.schedule = " << schedule_kind_to_string(stage1_schedule) << "\n";
    o << "stage1.epochs = " << stage1_epochs << "\n";
    o << "stage1.batch_size = " << stage1_batch << "\n";
    o << "stage1.warmup_steps = " << stage1_warmup << "\n";
    o << "quant.method = " << quant_method_to_string(method) << "\n";
    o << "quant.codebook = " << codebook_id_to_string(quant.codebook) << "\n";
    o << "quant.block_size = " << quant.block_size << "\n";
    if (quant.double_quant)
        o << "quant.double_quant = " << (*quant.double_quant ? "true" : "false") << "\n";
    o << "quant.dq_chunk_size = " << quant.dq_chunk_size << "\n";
    o << "quant.damping_ratio = " << quant.gptq.damping_ratio << "\n";
    o << "quant.calibration_samples = " << quant.gptq.calibration_samples << "\n";
    o << "quant.act_order = " << (quant.gptq.act_order ? "true" : "false") << "\n";
    o << "stage3.lr = " << stage3_lr << "\n";
    o << "stage3.schedule = " << schedule_kind_to_string(stage3_schedule) << "\n";
    o << "stage3.epochs = " << stage3_epochs << "\n";
    o << "stage3.batch_size = " << stage3_batch << "\n";
    o << "stage3.warmup_steps = " << stage3_warmup << "\n";
    o << "lora.rank = " << lora_rank << "\n";
    o << "lora.alpha = " << lora_alpha << "\n";
    o << "limits.max_input = " << max_input << "\n";
    o << "limits.max_output = " << max_output << "\n";
    return o.str();
}

std::string ExperimentConfig::config_hash() const {
    const std::string s = canonical_text();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig c = default_config();
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "seed") c.seed = std::stoull(val);
            else if (key == "out_dir") c.out_dir = val;
            else if (key == "model.vocab_size") c.model.vocab_size = std::stoi(val);
            else if (key == "model.d_model") c.model.d_model = std::stoi(val);
            else if (key == "model.n_layers") c.model.n_layers = std::stoi(val);
            else if (key == "model.n_heads") c.model.n_heads = std::stoi(val);
            else if (key == "model.d_ff") c.model.d_ff = std::stoi(val);
            else if (key == "model.max_seq_len") c.model.max_seq_len = std::stoi(val);
            else if (key == "model.tie_embeddings") c.model.tie_embeddings = parse_bool(val);
            else if (key == "stage1.lr") c.stage1_lr = std::stod(val);
            else if (key == "stage1.schedule") c.stage1_schedule = schedule_kind_from_string(val);
            else if (key == "stage1.epochs") c.stage1_epochs = std::stoi(val);
            else if (key == "stage1.batch_size") c.stage1_batch = std::stoi(val);
            else if (key == "stage1.warmup_steps") c.stage1_warmup = std::stol(val);
            else if (key == "quant.method") c.method = quant_method_from_string(val);
            else if (key == "quant.codebook") c.quant.codebook = codebook_id_from_string(val);
            else if (key == "quant.block_size") c.quant.block_size = std::stoi(val);
            else if (key == "quant.double_quant") c.quant.double_quant = parse_bool(val);
            else if (key == "quant.dq_chunk_size") c.quant.dq_chunk_size = std::stoi(val);
            else if (key == "quant.damping_ratio") c.quant.gptq.damping_ratio = std::stod(val);
            else if (key == "quant.calibration_samples")
                c.quant.gptq.calibration_samples = std::stoi(val);
            else if (key == "quant.act_order") c.quant.gptq.act_order = parse_bool(val);
            else if (key == "stage3.lr") c.stage3_lr = std::stod(val);
            else if (key == "stage3.schedule") c.stage3_schedule = schedule_kind_from_string(val);
            else if (key == "stage3.epochs") c.stage3_epochs = std::stoi(val);
            else if (key == "stage3.batch_size") c.stage3_batch = std::stoi(val);
            else if (key == "stage3.warmup_steps") c.stage3_warmup = std::stol(val);
            else if (key == "lora.rank") c.lora_rank = std::stoi(val);
            else if (key == "lora.alpha") c.lora_alpha = std::stof(val);
            else if (key == "limits.max_input") c.max_input = std::stoi(val);
            else if (key == "limits.max_output") c.max_output = std::stoi(val);
            else if (key.rfind("data.", 0) == 0) {
                const std::size_t dot = key.find('.', 5);
                if (dot == std::string::npos)
                    throw UsageError("config: bad dataset key " + key);
                const std::string name = key.substr(5, dot - 5);
                const std::string field = key.substr(dot + 1);
                DatasetSpec* d = find_dataset(c, name);
                if (!d) {
                    c.datasets.push_back({name, DatasetKind::general_instruction, "", 0, 0, 0});
                    d = &c.datasets.back();
                }
                if (field == "kind") d->kind = dataset_kind_from_string(val);
                else if (field == "path") d->path = val;
                else if (field == "train") d->train = std::stoi(val);
                else if (field == "dev") d->dev = std::stoi(val);
                else if (field == "test") d->test = std::stoi(val);
                else throw UsageError("config: unknown dataset field " + field);
            } else {
                throw UsageError("config: unknown key " + key);
            }
        } catch (const std::invalid_argument&) {
            throw UsageError("config line " + std::to_string(lineno) + ": bad value for " + key);
        } catch (const std::out_of_range&) {
            throw UsageError("config line " + std::to_string(lineno) + ": value out of range");
        }
    }
    return c;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config file not found: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

} // namespace pqlr
