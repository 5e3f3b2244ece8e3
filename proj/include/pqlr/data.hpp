// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "pqlr/rng.hpp"
#include "pqlr/tokenizer.hpp"

namespace pqlr {

struct Sample {
    std::string prompt;
    std::string response;
    std::string task; // "generation" or "classification"
};

enum class DatasetKind { general_instruction, summarization_like, classification_like };

std::string dataset_kind_to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

// The seven Call Purpose category names used as the default label set.
const std::vector<std::string>& call_purpose_labels();

// Deterministic synthetic generators. Same (kind, n, seed) gives byte-equal
// output; classification labels are uniform within +-1 sample.
std::vector<Sample> generate_synthetic(DatasetKind kind, std::size_t n, std::uint64_t seed);

// JSON-lines persistence: one object per line with string fields prompt,
// response, task.
void save_jsonl(const std::string& path, const std::vector<Sample>& samples);

struct LoadStats {
    std::size_t loaded = 0;
    std::size_t dropped_overlong = 0;
};

// Parses a JSONL dataset; malformed lines and schema violations raise a
// DataError naming the line. Samples whose tokenized prompt/response exceed
// the limits are dropped and counted.
std::vector<Sample> load_dataset_jsonl(const std::string& path, int max_input_tokens,
                                       int max_output_tokens, LoadStats* stats = nullptr);

// Training view of a sample set under the token limits.
std::vector<TokenizedSample> tokenize_dataset(const std::vector<Sample>& samples, int max_input,
                                              int max_output);

// FNV-1a over the serialized samples; used for dataset-identity checks in the
// run manifest.
std::uint64_t dataset_hash(const std::vector<Sample>& samples);

} // namespace pqlr
