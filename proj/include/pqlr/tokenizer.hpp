// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace pqlr {

// Character-level tokenizer over printable ASCII (0x20..0x7e) plus three
// specials. Characters outside the range are dropped. Vocabulary is fixed:
//   0 = PAD, 1 = EOS, 2 = SEP, 3..97 = ' '..'~'
class CharTokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kSep = 2;
    static constexpr int kFirstChar = 3;

    static constexpr int vocab_size() { return 3 + (0x7e - 0x20 + 1); }

    static std::vector<int> encode(const std::string& text) {
        std::vector<int> out;
        out.reserve(text.size());
        for (unsigned char c : text) {
            if (c >= 0x20 && c <= 0x7e) out.push_back(kFirstChar + (c - 0x20));
        }
        return out;
    }

    // Decodes char tokens; stops at EOS, skips other specials.
    static std::string decode(const std::vector<int>& tokens) {
        std::string out;
        out.reserve(tokens.size());
        for (int t : tokens) {
            if (t == kEos) break;
            if (t >= kFirstChar && t < vocab_size())
                out.push_back(static_cast<char>(0x20 + (t - kFirstChar)));
        }
        return out;
    }
};

// One training sequence: next-token targets, with prompt positions masked by
// ignore_index so loss covers response tokens (and the trailing EOS) only.
struct TokenizedSample {
    std::vector<int> tokens;  // prompt .. SEP .. response .. EOS
    std::vector<int> targets; // targets[i] is the target for predicting from tokens[i]
};

inline constexpr int kIgnoreIndex = -1;

// Builds the training sequence prompt+SEP+response+EOS, truncating the prompt
// from the left to max_input tokens and the response to max_output.
inline TokenizedSample tokenize_for_training(const std::string& prompt, const std::string& response,
                                             int max_input, int max_output) {
    std::vector<int> p = CharTokenizer::encode(prompt);
    std::vector<int> r = CharTokenizer::encode(response);
    if (static_cast<int>(p.size()) > max_input)
        p.erase(p.begin(), p.end() - max_input);
    if (static_cast<int>(r.size()) > max_output) r.resize(static_cast<std::size_t>(max_output));

    TokenizedSample s;
    s.tokens = p;
    s.tokens.push_back(CharTokenizer::kSep);
    const std::size_t response_start = s.tokens.size();
    s.tokens.insert(s.tokens.end(), r.begin(), r.end());
    s.tokens.push_back(CharTokenizer::kEos);

    // Shifted next-token targets; prompt-predicting positions are ignored.
    s.targets.assign(s.tokens.size() - 1, kIgnoreIndex);
    for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i) {
        if (i + 1 >= response_start) s.targets[i] = s.tokens[i + 1];
    }
    s.tokens.pop_back(); // inputs exclude the final position
    return s;
}

} // namespace pqlr
