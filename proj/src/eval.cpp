// SPDX-License-Identifier: Apache-2.0
#include "pqlr/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "pqlr/tokenizer.hpp"

namespace pqlr {

std::vector<std::string> rouge_tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::vector<std::vector<std::string>> split_sentences(const std::string& text) {
    std::vector<std::vector<std::string>> out;
    std::string cur;
    auto flush = [&]() {
        auto toks = rouge_tokenize(cur);
        if (!toks.empty()) out.push_back(std::move(toks));
        cur.clear();
    };
    for (char c : text) {
        if (c == '\n' || c == '.' || c == '!' || c == '?') {
            flush();
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

namespace {

double f1_from_counts(double match, double pred_len, double ref_len) {
    if (pred_len == 0.0 && ref_len == 0.0) return 1.0;
    if (pred_len == 0.0 || ref_len == 0.0 || match == 0.0) return 0.0;
    const double p = match / pred_len;
    const double r = match / ref_len;
    return 2.0 * p * r / (p + r);
}

double ngram_f1(const std::vector<std::string>& pred, const std::vector<std::string>& ref,
                std::size_t n) {
    if (pred.size() < n && ref.size() < n) return pred.empty() && ref.empty() ? 1.0 : 0.0;
    std::map<std::vector<std::string>, int> pc, rc;
    for (std::size_t i = 0; i + n <= pred.size(); ++i)
        pc[{pred.begin() + i, pred.begin() + i + n}]++;
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
        rc[{ref.begin() + i, ref.begin() + i + n}]++;
    double match = 0.0;
    for (const auto& [g, c] : pc) {
        auto it = rc.find(g);
        if (it != rc.end()) match += std::min(c, it->second);
    }
    const double plen = pred.size() >= n ? static_cast<double>(pred.size() - n + 1) : 0.0;
    const double rlen = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
    return f1_from_counts(match, plen, rlen);
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
        std::fill(cur.begin(), cur.end(), 0);
    }
    return prev[b.size()];
}

// Positions of one LCS of `a` against `b`, as indices into `a`.
std::vector<std::size_t> lcs_positions(const std::vector<std::string>& a,
                                       const std::vector<std::string>& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<std::size_t>> dp(n + 1, std::vector<std::size_t>(m + 1, 0));
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j)
            dp[i][j] = (a[i - 1] == b[j - 1]) ? dp[i - 1][j - 1] + 1
                                              : std::max(dp[i - 1][j], dp[i][j - 1]);
    std::vector<std::size_t> pos;
    std::size_t i = n, j = m;
    while (i > 0 && j > 0) {
        if (a[i - 1] == b[j - 1] && dp[i][j] == dp[i - 1][j - 1] + 1) {
            pos.push_back(i - 1);
            --i;
            --j;
        } else if (dp[i - 1][j] >= dp[i][j - 1]) {
            --i;
        } else {
            --j;
        }
    }
    std::reverse(pos.begin(), pos.end());
    return pos;
}

// Summary-level ROUGE-L: per reference sentence, the union of LCS hits
// against all prediction sentences, F1 over total token counts.
double rouge_lsum(const std::string& prediction, const std::string& reference) {
    auto psents = split_sentences(prediction);
    auto rsents = split_sentences(reference);
    std::size_t plen = 0, rlen = 0;
    for (const auto& s : psents) plen += s.size();
    for (const auto& s : rsents) rlen += s.size();
    if (plen == 0 && rlen == 0) return 1.0;
    if (plen == 0 || rlen == 0) return 0.0;
    double match = 0.0;
    for (const auto& rs : rsents) {
        std::set<std::size_t> hit;
        for (const auto& ps : psents)
            for (std::size_t p : lcs_positions(rs, ps)) hit.insert(p);
        match += static_cast<double>(hit.size());
    }
    return f1_from_counts(match, static_cast<double>(plen), static_cast<double>(rlen));
}

} // namespace

RougeScores rouge_scores(const std::string& prediction, const std::string& reference) {
    auto p = rouge_tokenize(prediction);
    auto r = rouge_tokenize(reference);
    RougeScores s;
    s.r1 = ngram_f1(p, r, 1);
    s.r2 = ngram_f1(p, r, 2);
    s.rl = f1_from_counts(static_cast<double>(lcs_length(p, r)), static_cast<double>(p.size()),
                          static_cast<double>(r.size()));
    if (p.empty() && r.empty()) s.rl = 1.0;
    s.rlsum = rouge_lsum(prediction, reference);
    return s;
}

namespace {

std::string normalize_label(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    std::string out = s.substr(b, e - b);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

} // namespace

ClassificationMetrics classification_metrics(const std::vector<std::string>& predictions,
                                             const std::vector<std::string>& references,
                                             const std::vector<std::string>& label_set) {
    if (predictions.empty() || predictions.size() != references.size())
        throw DataError("classification_metrics: empty or mismatched inputs");
    std::set<std::string> labels;
    for (const auto& l : label_set) labels.insert(normalize_label(l));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const std::string ref = normalize_label(references[i]);
        if (!labels.count(ref))
            throw DataError("classification_metrics: reference outside label set: " + references[i]);
        const std::string pred = normalize_label(predictions[i]);
        // An invalid prediction counts as a wrong prediction of a reserved
        // invalid label: it can never match any reference.
        if (labels.count(pred) && pred == ref) ++correct;
    }
    // Each sample contributes exactly one prediction and one reference, so
    // micro precision == micro recall == micro F1.
    const double acc = static_cast<double>(correct) / static_cast<double>(predictions.size());
    return {acc, acc, acc};
}

namespace {

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

} // namespace

WilcoxonResult wilcoxon_signed_rank(const std::vector<std::pair<double, double>>& pairs,
                                    WilcoxonMode mode) {
    if (pairs.empty()) throw DataError("wilcoxon: no pairs");
    std::vector<double> diffs;
    for (const auto& [a, b] : pairs) {
        const double d = a - b;
        if (d != 0.0) diffs.push_back(d);
    }
    WilcoxonResult res;
    res.n_effective = static_cast<int>(diffs.size());
    if (diffs.empty()) {
        res.all_zero = true;
        res.p_value = 1.0;
        return res;
    }
    const std::size_t n = diffs.size();

    // Average ranks of |d|.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return std::abs(diffs[a]) < std::abs(diffs[b]); });
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double wplus = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (diffs[k] > 0.0) wplus += rank[k];
    const double total = static_cast<double>(n) * static_cast<double>(n + 1) / 2.0;
    res.w_plus = wplus;
    res.w_minus = total - wplus;

    const bool exact = mode == WilcoxonMode::exact ||
                       (mode == WilcoxonMode::auto_select && n <= 25);
    res.exact = exact;
    if (exact) {
        // Exact null distribution of W+ over all 2^n sign assignments,
        // computed by convolution over doubled (integer) ranks.
        std::vector<long> r2(n);
        long maxsum = 0;
        for (std::size_t k = 0; k < n; ++k) {
            r2[k] = std::lround(rank[k] * 2.0);
            maxsum += r2[k];
        }
        std::vector<double> dist(static_cast<std::size_t>(maxsum) + 1, 0.0);
        dist[0] = 1.0;
        long cur_max = 0;
        for (std::size_t k = 0; k < n; ++k) {
            cur_max += r2[k];
            for (long s = cur_max; s >= r2[k]; --s)
                dist[static_cast<std::size_t>(s)] += dist[static_cast<std::size_t>(s - r2[k])];
        }
        const long w_small2 = std::lround(std::min(res.w_plus, res.w_minus) * 2.0);
        double count = 0.0;
        for (long s = 0; s <= w_small2; ++s) count += dist[static_cast<std::size_t>(s)];
        res.p_value = std::min(1.0, 2.0 * count / std::pow(2.0, static_cast<double>(n)));
    } else {
        // Normal approximation with tie correction.
        const double nn = static_cast<double>(n);
        const double mean = nn * (nn + 1.0) / 4.0;
        double tie_term = 0.0;
        i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) ++j;
            const double t = static_cast<double>(j - i + 1);
            tie_term += t * t * t - t;
            i = j + 1;
        }
        const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
        const double z = (res.w_plus - mean) / std::sqrt(var);
        res.p_value = std::min(1.0, 2.0 * normal_sf(std::abs(z)));
    }
    return res;
}

double MetricReport::metric(const std::string& name) const {
    if (name == "R1") return r1;
    if (name == "R2") return r2;
    if (name == "RL") return rl;
    if (name == "RLsum") return rlsum;
    if (name == "precision") return precision;
    if (name == "recall") return recall;
    if (name == "f1_micro") return f1_micro;
    throw UsageError("unknown metric: " + name);
}

const std::vector<std::string>& MetricReport::generation_metric_names() {
    static const std::vector<std::string> v = {"R1", "R2", "RL", "RLsum"};
    return v;
}

const std::vector<std::string>& MetricReport::classification_metric_names() {
    static const std::vector<std::string> v = {"precision", "recall", "f1_micro"};
    return v;
}

MetricReport evaluate_stage(const ModelWeights<float>& weights, const ModelConfig& cfg,
                            std::vector<EvalSample>& samples, const EvalLimits& limits,
                            const std::vector<std::string>& label_set,
                            const std::string& stage_label) {
    if (samples.empty()) throw DataError("evaluate_stage: empty test set");
    MetricReport rep;
    rep.stage_label = stage_label;
    double r1 = 0.0, r2 = 0.0, rl = 0.0, rlsum = 0.0;
    std::vector<std::string> preds, refs;
    for (auto& s : samples) {
        std::string text;
        try {
            std::vector<int> prompt = CharTokenizer::encode(s.prompt);
            std::vector<int> out =
                generate_greedy(weights, cfg, prompt, limits.max_input, limits.max_output);
            text = CharTokenizer::decode(out);
        } catch (const std::exception&) {
            text.clear(); // decode failure scores zero, never aborts the run
        }
        s.prediction = text;
        if (s.task == "classification") {
            preds.push_back(text);
            refs.push_back(s.reference);
        } else {
            RougeScores rs = rouge_scores(text, s.reference);
            r1 += rs.r1;
            r2 += rs.r2;
            rl += rs.rl;
            rlsum += rs.rlsum;
            ++rep.gen_count;
        }
    }
    if (rep.gen_count > 0) {
        const double c = static_cast<double>(rep.gen_count);
        rep.r1 = r1 / c;
        rep.r2 = r2 / c;
        rep.rl = rl / c;
        rep.rlsum = rlsum / c;
    }
    if (!preds.empty()) {
        auto m = classification_metrics(preds, refs, label_set);
        rep.precision = m.precision;
        rep.recall = m.recall;
        rep.f1_micro = m.f1_micro;
        rep.cls_count = preds.size();
    }
    return rep;
}

} // namespace pqlr
