#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mpem/common.hpp"
#include "mpem/corpus.hpp"
#include "mpem/model.hpp"
#include "mpem/text.hpp"

namespace mpem::eval {

// log p(r | c, z=i) for every candidate i = 1..t-1
inline std::vector<double> candidate_logliks(const model::GeneratorParams& params,
                                             const corpus::Instance& inst,
                                             const text::Vocabulary& vocab, int max_context_len) {
    if (inst.t < 2) throw DataError("candidate_logliks: t must be >= 2");
    std::vector<double> s;
    s.reserve(static_cast<size_t>(inst.t - 1));
    for (int z = 1; z < inst.t; ++z) {
        auto enc = text::encode_instance(inst, z, vocab, max_context_len);
        s.push_back(model::response_loglik(params, enc));
    }
    return s;
}

// Numeric decomposition of the marginal log-likelihood under the uniform
// addressee prior p(z|c) = 1/(t-1):
//   marginal          l     = logsumexp_i( s_i + log(1/(t-1)) )
//   expected complete l_hat = sum_i q_i * ( s_i + log(1/(t-1)) )
//   entropy           H_q   = -sum_i q_i log q_i
//   gap               l - (l_hat + H_q)   >= 0, 0 iff q is the posterior
struct ElboReport {
    double marginal = 0;
    double expected_complete = 0;
    double entropy = 0;
    double gap = 0;
};

inline ElboReport elbo_from_scores(const std::vector<double>& s,
                                   const std::vector<double>& q) {
    if (s.empty()) throw DataError("elbo: no candidates");
    if (q.size() != s.size()) throw DataError("elbo: q size mismatch");
    double qsum = 0;
    for (double qi : q) {
        if (qi < -1e-12 || !std::isfinite(qi)) throw DataError("elbo: invalid q");
        qsum += qi;
    }
    if (std::abs(qsum - 1.0) > 1e-6) throw DataError("elbo: q does not sum to 1");

    const double log_prior = -std::log(static_cast<double>(s.size()));
    std::vector<double> joint(s.size());
    for (size_t i = 0; i < s.size(); ++i) joint[i] = s[i] + log_prior;

    ElboReport rep;
    rep.marginal = logsumexp(joint);
    for (size_t i = 0; i < s.size(); ++i) {
        if (q[i] <= 0) continue;  // 0 log 0 = 0
        rep.expected_complete += q[i] * joint[i];
        rep.entropy -= q[i] * std::log(q[i]);
    }
    rep.gap = rep.marginal - (rep.expected_complete + rep.entropy);
    return rep;
}

// q defaults to the exact posterior exp(s_i - logsumexp(s)), in which case
// the gap vanishes up to rounding.
inline ElboReport elbo_diagnostics(const model::GeneratorParams& params,
                                   const corpus::Instance& inst, const text::Vocabulary& vocab,
                                   int max_context_len,
                                   const std::optional<std::vector<double>>& q = std::nullopt) {
    auto s = candidate_logliks(params, inst, vocab, max_context_len);
    if (q) return elbo_from_scores(s, *q);
    double lz = logsumexp(s);
    std::vector<double> post(s.size());
    for (size_t i = 0; i < s.size(); ++i) post[i] = std::exp(s[i] - lz);
    return elbo_from_scores(s, post);
}

}  // namespace mpem::eval
