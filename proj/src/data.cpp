// SPDX-License-Identifier: Apache-2.0
#include "pqlr/data.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "pqlr/errors.hpp"

namespace pqlr {

using nlohmann::json;

std::string dataset_kind_to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::general_instruction: return "general_instruction";
        case DatasetKind::summarization_like: return "summarization_like";
        default: return "classification_like";
    }
}

DatasetKind dataset_kind_from_string(const std::string& s) {
    if (s == "general_instruction") return DatasetKind::general_instruction;
    if (s == "summarization_like") return DatasetKind::summarization_like;
    if (s == "classification_like") return DatasetKind::classification_like;
    throw UsageError("unknown dataset kind: " + s);
}

const std::vector<std::string>& call_purpose_labels() {
    static const std::vector<std::string> labels = {
        "Account Management", "Appointment", "Billing Questions", "Callback",
        "Cancellation",       "Claim",       "Complaint"};
    return labels;
}

namespace {

// Signature phrases per label; each classification prompt contains exactly
// one of its label's signatures plus neutral filler.
const std::vector<std::vector<std::string>>& label_signatures() {
    static const std::vector<std::vector<std::string>> sig = {
        {"update my account details", "change my account email", "reset my account password"},
        {"book an appointment", "schedule a visit", "move my appointment"},
        {"a question about my bill", "charged twice this month", "explain this invoice"},
        {"call me back later", "request a callback", "ring me back tomorrow"},
        {"cancel my subscription", "stop my service plan", "end my contract now"},
        {"file an insurance claim", "report a damage claim", "follow up on my claim"},
        {"very unhappy with the service", "make a formal complaint", "report a bad experience"},
    };
    return sig;
}

const std::vector<std::string>& fillers() {
    static const std::vector<std::string> f = {
        "thanks for your help", "as soon as possible", "before the weekend",
        "it is quite urgent",   "when you have time",  "sorry to bother you"};
    return f;
}

std::vector<Sample> gen_classification(std::size_t n, Rng& rng) {
    const auto& labels = call_purpose_labels();
    const auto& sigs = label_signatures();
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t li = i % labels.size(); // uniform within +-1 sample
        const auto& s = sigs[li][rng.below(sigs[li].size())];
        const auto& fill = fillers()[rng.below(fillers().size())];
        Sample smp;
        smp.prompt = "purpose? caller says: i want to " + s + ", " + fill + ".";
        smp.response = labels[li];
        smp.task = "classification";
        out.push_back(std::move(smp));
    }
    // Deterministic shuffle so labels are not grouped.
    std::vector<std::size_t> perm = rng.permutation(out.size());
    std::vector<Sample> shuffled;
    shuffled.reserve(out.size());
    for (std::size_t i : perm) shuffled.push_back(std::move(out[i]));
    return shuffled;
}

std::vector<Sample> gen_summarization(std::size_t n, Rng& rng) {
    static const std::vector<std::string> names = {"alice", "bob",  "carol", "dave",
                                                   "erin",  "frank"};
    static const std::vector<std::string> items = {"router", "phone", "laptop", "printer"};
    static const std::vector<std::string> issues = {"broken", "slow", "noisy", "offline"};
    static const std::vector<std::string> days = {"monday", "tuesday", "friday", "sunday"};
    static const std::vector<std::string> lengths = {"short", "medium", "long"};
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& nm = names[rng.below(names.size())];
        const auto& it = items[rng.below(items.size())];
        const auto& is = issues[rng.below(issues.size())];
        const auto& dy = days[rng.below(days.size())];
        const auto& ln = lengths[rng.below(lengths.size())];
        Sample s;
        s.prompt = "summarize (" + ln + "): caller=" + nm + "; item=" + it + "; issue=" + is +
                   "; day=" + dy;
        if (ln == "short") {
            s.response = nm + " reported " + is + " " + it + ".";
        } else if (ln == "medium") {
            s.response = nm + " reported a " + is + " " + it + " on " + dy + ".";
        } else {
            s.response = "on " + dy + " " + nm + " called about a " + is + " " + it +
                         ". a follow up is planned.";
        }
        s.task = "generation";
        out.push_back(std::move(s));
    }
    return out;
}

std::string random_word(Rng& rng) {
    const std::size_t len = 3 + rng.below(5);
    std::string w;
    for (std::size_t i = 0; i < len; ++i)
        w.push_back(static_cast<char>('a' + rng.below(26)));
    return w;
}

std::vector<Sample> gen_general(std::size_t n, Rng& rng) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t kind = rng.below(3);
        const std::string w = random_word(rng);
        Sample s;
        s.task = "generation";
        if (kind == 0) {
            s.prompt = "copy: " + w;
            s.response = w;
        } else if (kind == 1) {
            s.prompt = "reverse: " + w;
            s.response = std::string(w.rbegin(), w.rend());
        } else {
            s.prompt = "upper: " + w;
            s.response = w;
            for (char& c : s.response) c = static_cast<char>(std::toupper(c));
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace

std::vector<Sample> generate_synthetic(DatasetKind kind, std::size_t n, std::uint64_t seed) {
    Rng rng(seed, static_cast<std::uint64_t>(kind) + 10);
    switch (kind) {
        case DatasetKind::classification_like: return gen_classification(n, rng);
        case DatasetKind::summarization_like: return gen_summarization(n, rng);
        default: return gen_general(n, rng);
    }
}

void save_jsonl(const std::string& path, const std::vector<Sample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& s : samples) {
        json j;
        j["prompt"] = s.prompt;
        j["response"] = s.response;
        j["task"] = s.task;
        out << j.dump() << "\n";
    }
}

std::vector<Sample> load_dataset_jsonl(const std::string& path, int max_input_tokens,
                                       int max_output_tokens, LoadStats* stats) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("dataset file not found: " + path);
    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 0;
    LoadStats st;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("malformed JSON at line " + std::to_string(lineno) + ": " + e.what());
        }
        for (const char* field : {"prompt", "response", "task"}) {
            if (!j.contains(field) || !j[field].is_string())
                throw DataError("line " + std::to_string(lineno) + ": missing string field '" +
                                field + "'");
        }
        Sample s{j["prompt"].get<std::string>(), j["response"].get<std::string>(),
                 j["task"].get<std::string>()};
        const std::size_t ptoks = CharTokenizer::encode(s.prompt).size();
        const std::size_t rtoks = CharTokenizer::encode(s.response).size();
        if (ptoks > static_cast<std::size_t>(max_input_tokens) ||
            rtoks > static_cast<std::size_t>(max_output_tokens)) {
            ++st.dropped_overlong;
            continue;
        }
        out.push_back(std::move(s));
        ++st.loaded;
    }
    if (stats) *stats = st;
    return out;
}

std::vector<TokenizedSample> tokenize_dataset(const std::vector<Sample>& samples, int max_input,
                                              int max_output) {
    std::vector<TokenizedSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples)
        out.push_back(tokenize_for_training(s.prompt, s.response, max_input, max_output));
    return out;
}

std::uint64_t dataset_hash(const std::vector<Sample>& samples) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        h ^= 0x1f;
        h *= 1099511628211ULL;
    };
    for (const auto& s : samples) {
        mix(s.prompt);
        mix(s.response);
        mix(s.task);
    }
    return h;
}

} // namespace pqlr
