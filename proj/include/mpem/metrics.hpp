#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mpem/common.hpp"
#include "mpem/corpus.hpp"
#include "mpem/model.hpp"
#include "mpem/text.hpp"

namespace mpem::eval {

using Tokens = std::vector<std::string>;

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(const Tokens& toks, int k) {
    std::map<std::vector<std::string>, int> counts;
    if (static_cast<int>(toks.size()) < k) return counts;
    for (size_t i = 0; i + static_cast<size_t>(k) <= toks.size(); ++i)
        ++counts[std::vector<std::string>(toks.begin() + static_cast<long>(i),
                                          toks.begin() + static_cast<long>(i) + k)];
    return counts;
}

}  // namespace detail

// Pooled corpus-level BLEU statistics: clipped k-gram matches and totals
// for k = 1..4, candidate length, and closest-reference length.
struct BleuStats {
    static constexpr int kMaxOrder = 4;
    long matches[kMaxOrder] = {0, 0, 0, 0};
    long totals[kMaxOrder] = {0, 0, 0, 0};
    long cand_len = 0;
    long ref_len = 0;

    void add(const Tokens& candidate, const std::vector<Tokens>& references) {
        if (references.empty()) throw DataError("bleu: no references");
        cand_len += static_cast<long>(candidate.size());
        // closest reference length; ties go to the shorter reference
        long best_ref = static_cast<long>(references[0].size());
        for (const auto& r : references) {
            long rl = static_cast<long>(r.size());
            long dc = std::abs(rl - static_cast<long>(candidate.size()));
            long db = std::abs(best_ref - static_cast<long>(candidate.size()));
            if (dc < db || (dc == db && rl < best_ref)) best_ref = rl;
        }
        ref_len += best_ref;
        for (int k = 1; k <= kMaxOrder; ++k) {
            auto cand_ngrams = detail::ngram_counts(candidate, k);
            std::map<std::vector<std::string>, int> max_ref;
            for (const auto& r : references)
                for (const auto& [ng, c] : detail::ngram_counts(r, k))
                    max_ref[ng] = std::max(max_ref[ng], c);
            for (const auto& [ng, c] : cand_ngrams) {
                totals[k - 1] += c;
                auto it = max_ref.find(ng);
                if (it != max_ref.end()) matches[k - 1] += std::min(c, it->second);
            }
        }
    }

    // geometric mean of clipped precisions for orders 1..n, epsilon-smoothed
    // (zero counts are replaced by 1e-9), times the brevity penalty.
    double score(int n) const {
        if (n < 1 || n > kMaxOrder) throw DataError("bleu: order must be in [1,4]");
        if (cand_len == 0) return 0.0;
        constexpr double eps = 1e-9;
        double log_sum = 0;
        for (int k = 1; k <= n; ++k) {
            double m = matches[k - 1] > 0 ? static_cast<double>(matches[k - 1]) : eps;
            double t = totals[k - 1] > 0 ? static_cast<double>(totals[k - 1]) : 1.0;
            log_sum += std::log(m / t);
        }
        double bp = cand_len < ref_len
                        ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len))
                        : 1.0;
        return bp * std::exp(log_sum / n);
    }
};

inline double bleu_n(const Tokens& candidate, const std::vector<Tokens>& references, int n) {
    BleuStats stats;
    stats.add(candidate, references);
    return stats.score(n);
}

inline int lcs_length(const Tokens& a, const Tokens& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// LCS F-measure with beta = 1: F = 2PR/(P+R), 0 when LCS = 0
inline double rouge_l(const Tokens& candidate, const Tokens& reference) {
    if (reference.empty()) throw DataError("rouge_l: empty reference");
    if (candidate.empty()) return 0.0;
    int lcs = lcs_length(candidate, reference);
    if (lcs == 0) return 0.0;
    double p = static_cast<double>(lcs) / static_cast<double>(candidate.size());
    double r = static_cast<double>(lcs) / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

struct ScoredPrediction {
    double confidence = 0;
    int predicted = 0;
    std::optional<int> gold;
};

// Fraction correct among the ceil(f*N) highest-confidence predictions
// (f = 1 when omitted). Ties in confidence keep input order.
inline double addressee_accuracy(std::vector<ScoredPrediction> preds,
                                 std::optional<double> top_fraction = std::nullopt) {
    if (preds.empty()) throw DataError("addressee_accuracy: no predictions");
    for (const auto& p : preds)
        if (!p.gold) throw DataError("addressee_accuracy: prediction without gold label");
    size_t keep = preds.size();
    if (top_fraction) {
        if (*top_fraction <= 0.0 || *top_fraction > 1.0)
            throw DataError("addressee_accuracy: top_fraction must be in (0,1]");
        keep = static_cast<size_t>(
            std::ceil(*top_fraction * static_cast<double>(preds.size())));
        keep = std::max<size_t>(1, std::min(keep, preds.size()));
    }
    std::stable_sort(preds.begin(), preds.end(),
                     [](const ScoredPrediction& a, const ScoredPrediction& b) {
                         return a.confidence > b.confidence;
                     });
    long correct = 0;
    for (size_t i = 0; i < keep; ++i)
        if (preds[i].predicted == *preds[i].gold) ++correct;
    return static_cast<double>(correct) / static_cast<double>(keep);
}

struct MetricsReport {
    double bleu[4] = {0, 0, 0, 0};
    double rouge_l = 0;
    std::optional<double> addressee_accuracy;
    long n_examples = 0;

    std::string to_kv_text() const {
        std::ostringstream os;
        os.precision(6);
        os << std::fixed;
        for (int k = 0; k < 4; ++k) os << "bleu" << (k + 1) << " = " << bleu[k] << "\n";
        os << "rougeL = " << rouge_l << "\n";
        if (addressee_accuracy) os << "addr_acc = " << *addressee_accuracy << "\n";
        os << "n_examples = " << n_examples << "\n";
        return os.str();
    }

    std::string to_csv_row() const {
        std::ostringstream os;
        os.precision(6);
        os << std::fixed;
        os << bleu[0] << "," << bleu[1] << "," << bleu[2] << "," << bleu[3] << "," << rouge_l;
        return os.str();
    }
};

struct DecodeConfig {
    int max_len = 16;
    int beam = 1;  // 1 = greedy
    bool use_addressee_flags = true;
    int max_context_len = 128;
};

// Decode each test instance conditioned on its gold addressee and score
// against the gold response: pooled corpus BLEU, mean ROUGE-L.
inline MetricsReport evaluate_generation(const model::GeneratorParams& params,
                                         const std::vector<corpus::Instance>& instances,
                                         const text::Vocabulary& vocab,
                                         const DecodeConfig& dec) {
    if (instances.empty()) throw DataError("evaluate_generation: no instances");
    BleuStats stats;
    double rouge_sum = 0;
    for (const auto& inst : instances) {
        if (!inst.gold_addressee)
            throw DataError("evaluate_generation: instance without gold addressee (dialogue '" +
                            inst.dialogue_id + "' t=" + std::to_string(inst.t) + ")");
        std::optional<int> z;
        if (dec.use_addressee_flags) z = *inst.gold_addressee;
        auto enc = text::encode_instance(inst, z, vocab, dec.max_context_len);
        std::vector<int> out_ids =
            dec.beam <= 1
                ? model::greedy_decode(params, enc.context_ids, enc.addressee_flags, dec.max_len)
                : model::beam_decode(params, enc.context_ids, enc.addressee_flags, dec.max_len,
                                     dec.beam);
        Tokens candidate = vocab.decode_ids(out_ids);
        stats.add(candidate, {inst.response});
        rouge_sum += rouge_l(candidate, inst.response);
    }
    MetricsReport rep;
    for (int k = 0; k < 4; ++k) rep.bleu[k] = stats.score(k + 1);
    rep.rouge_l = rouge_sum / static_cast<double>(instances.size());
    rep.n_examples = static_cast<long>(instances.size());
    return rep;
}

}  // namespace mpem::eval
