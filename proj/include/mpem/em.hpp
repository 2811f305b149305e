#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpem/checkpoint.hpp"
#include "mpem/common.hpp"
#include "mpem/corpus.hpp"
#include "mpem/elbo.hpp"
#include "mpem/metrics.hpp"
#include "mpem/model.hpp"
#include "mpem/rng.hpp"
#include "mpem/text.hpp"

namespace mpem::em {

using corpus::Instance;
using model::GeneratorParams;
using text::Vocabulary;

// Posterior over addressee candidates z = 1..t-1 for one instance.
struct Posterior {
    std::string dialogue_id;
    int t = 0;
    size_t instance_index = 0;
    std::vector<std::pair<int, double>> probs;  // (candidate turn, probability)
};

// Hard assignment: the argmax candidate and its posterior probability.
struct Assignment {
    std::string dialogue_id;
    int t = 0;
    size_t instance_index = 0;
    int z_star = 0;
    double confidence = 0;
};

enum class InitStrategy { PreviousUtterance, KeywordOverlap, NoisyOracle };

inline InitStrategy parse_init_strategy(const std::string& s) {
    if (s == "previous-utterance") return InitStrategy::PreviousUtterance;
    if (s == "keyword-overlap") return InitStrategy::KeywordOverlap;
    if (s == "noisy-oracle") return InitStrategy::NoisyOracle;
    throw ConfigError("unknown init strategy: '" + s + "'");
}

inline std::string to_string(InitStrategy s) {
    switch (s) {
        case InitStrategy::PreviousUtterance: return "previous-utterance";
        case InitStrategy::KeywordOverlap: return "keyword-overlap";
        case InitStrategy::NoisyOracle: return "noisy-oracle";
    }
    return "?";
}

struct EMConfig {
    int n_iterations = 8;
    int epochs_per_m_step = 1;
    int batch_size = 64;
    model::AdamHyper optim;
    double grad_clip = 1.0;  // global-norm clip; 0 disables
    double alpha_target_accuracy = 0.8;
    double alpha_grid_step = 0.05;
    double alpha_floor = 0.1;
    InitStrategy init_strategy = InitStrategy::KeywordOverlap;
    double noisy_oracle_p = 0.5;
    int max_context_len = 128;
    // generation metrics per iteration are computed on the first
    // eval_max_instances validation instances (0 = all); keeps the
    // per-iteration validation decode affordable
    int eval_max_instances = 500;
    eval::DecodeConfig decode;
    // false trains with all-zero addressee flags (the ablation baseline);
    // applies to m_step/finetune, never to the E-step
    bool use_addressee_flags = true;
    uint64_t seed = 1;
};

inline void validate_config(const EMConfig& c) {
    if (c.n_iterations < 0) throw ConfigError("em: n_iterations must be >= 0");
    if (c.epochs_per_m_step < 1) throw ConfigError("em: epochs_per_m_step must be >= 1");
    if (c.batch_size < 1) throw ConfigError("em: batch_size must be >= 1");
    if (c.alpha_floor <= 0.0 || c.alpha_floor > 1.0)
        throw ConfigError("em: alpha_floor must be in (0,1]");
    if (c.alpha_target_accuracy <= 0.0 || c.alpha_target_accuracy >= 1.0)
        throw ConfigError("em: alpha_target_accuracy must be in (0,1)");
    if (c.alpha_grid_step <= 0.0 || c.alpha_grid_step > 1.0)
        throw ConfigError("em: alpha_grid_step must be in (0,1]");
    if (c.noisy_oracle_p < 0.0 || c.noisy_oracle_p > 1.0)
        throw ConfigError("em: noisy_oracle_p must be in [0,1]");
}

namespace detail {

inline int token_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::map<std::string, int> ca;
    for (const auto& t : a) ++ca[t];
    std::map<std::string, int> cb;
    for (const auto& t : b) ++cb[t];
    int s = 0;
    for (const auto& [tok, n] : ca) {
        auto it = cb.find(tok);
        if (it != cb.end()) s += std::min(n, it->second);
    }
    return s;
}

}  // namespace detail

// Coarse initial labels standing in for an external discourse parser.
//   previous-utterance: z = t-1, confidence 1
//   keyword-overlap:    argmax token overlap with the response, most recent
//                       on ties, confidence = overlap share
//   noisy-oracle(p):    gold with probability p, else a uniformly wrong
//                       candidate; requires gold labels
inline std::vector<Assignment> initial_labels(const std::vector<Instance>& instances,
                                              InitStrategy strategy, double noisy_p,
                                              uint64_t seed) {
    std::vector<Assignment> out;
    out.reserve(instances.size());
    for (size_t idx = 0; idx < instances.size(); ++idx) {
        const Instance& inst = instances[idx];
        Assignment a;
        a.dialogue_id = inst.dialogue_id;
        a.t = inst.t;
        a.instance_index = idx;
        switch (strategy) {
            case InitStrategy::PreviousUtterance: {
                a.z_star = inst.t - 1;
                a.confidence = 1.0;
                break;
            }
            case InitStrategy::KeywordOverlap: {
                std::vector<int> ov(static_cast<size_t>(inst.t - 1));
                long total = 0;
                for (int z = 1; z < inst.t; ++z) {
                    ov[static_cast<size_t>(z - 1)] =
                        detail::token_overlap(inst.response, inst.context[static_cast<size_t>(z - 1)].tokens);
                    total += ov[static_cast<size_t>(z - 1)];
                }
                int best = 1;
                for (int z = 2; z < inst.t; ++z)
                    if (ov[static_cast<size_t>(z - 1)] >= ov[static_cast<size_t>(best - 1)])
                        best = z;  // ties to most recent
                a.z_star = best;
                a.confidence = total > 0
                                   ? static_cast<double>(ov[static_cast<size_t>(best - 1)]) /
                                         static_cast<double>(total)
                                   : 1.0 / static_cast<double>(inst.t - 1);
                break;
            }
            case InitStrategy::NoisyOracle: {
                if (!inst.gold_addressee)
                    throw DataError("noisy-oracle init requires gold labels (dialogue '" +
                                    inst.dialogue_id + "' t=" + std::to_string(inst.t) + ")");
                Rng rng(mix_seed(seed, 0x9017ACE0ULL + idx));
                int gold = *inst.gold_addressee;
                if (inst.t == 2 || rng.next_bernoulli(noisy_p)) {
                    a.z_star = gold;
                } else {
                    int wrong = static_cast<int>(rng.next_int(1, inst.t - 2));
                    a.z_star = wrong >= gold ? wrong + 1 : wrong;
                }
                a.confidence = 1.0;
                break;
            }
        }
        out.push_back(a);
    }
    return out;
}

// probs_i = exp(s_i - logsumexp(s)); stable for any score magnitude
inline std::vector<double> posterior_from_scores(const std::vector<double>& s) {
    if (s.empty()) throw DataError("posterior_from_scores: no candidates");
    double lz = logsumexp(s);
    std::vector<double> p(s.size());
    for (size_t i = 0; i < s.size(); ++i) p[i] = std::exp(s[i] - lz);
    return p;
}

// Posterior over addressees from generation likelihoods under a uniform
// prior: p(z=i | c, r) = p(r|c,z=i) / sum_j p(r|c,z=j).
inline Posterior e_step_posterior(const GeneratorParams& params, const Instance& inst,
                                  const Vocabulary& vocab, int max_context_len,
                                  size_t instance_index = 0) {
    auto s = eval::candidate_logliks(params, inst, vocab, max_context_len);
    auto p = posterior_from_scores(s);
    Posterior post;
    post.dialogue_id = inst.dialogue_id;
    post.t = inst.t;
    post.instance_index = instance_index;
    post.probs.reserve(p.size());
    for (size_t i = 0; i < p.size(); ++i)
        post.probs.emplace_back(static_cast<int>(i + 1), p[i]);
    return post;
}

// argmax of the posterior; exact ties go to the most recent candidate
inline Assignment hard_assign(const Posterior& post) {
    if (post.probs.empty()) throw DataError("hard_assign: empty posterior");
    size_t best = 0;
    for (size_t i = 1; i < post.probs.size(); ++i)
        if (post.probs[i].second >= post.probs[best].second) best = i;
    Assignment a;
    a.dialogue_id = post.dialogue_id;
    a.t = post.t;
    a.instance_index = post.instance_index;
    a.z_star = post.probs[best].first;
    a.confidence = post.probs[best].second;
    return a;
}

// Largest alpha on the grid whose top-ceil(alpha*N) prefix (by descending
// confidence) is at least alpha_target_accuracy accurate on the labeled
// validation set; alpha_floor when no grid point qualifies.
inline double calibrate_alpha(const std::vector<Assignment>& assignments_val,
                              const std::vector<int>& gold_val, const EMConfig& cfg) {
    if (assignments_val.empty()) throw DataError("calibrate_alpha: empty validation set");
    if (gold_val.size() != assignments_val.size())
        throw DataError("calibrate_alpha: gold label count mismatch");
    const size_t n = assignments_val.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return assignments_val[a].confidence > assignments_val[b].confidence;
    });
    std::vector<long> correct_prefix(n + 1, 0);
    for (size_t i = 0; i < n; ++i)
        correct_prefix[i + 1] =
            correct_prefix[i] +
            (assignments_val[order[i]].z_star == gold_val[order[i]] ? 1 : 0);

    double best = cfg.alpha_floor;
    bool found = false;
    for (int step = 1;; ++step) {
        double alpha = std::min(1.0, step * cfg.alpha_grid_step);
        size_t k = static_cast<size_t>(std::ceil(alpha * static_cast<double>(n)));
        k = std::max<size_t>(1, std::min(k, n));
        double acc = static_cast<double>(correct_prefix[k]) / static_cast<double>(k);
        if (acc >= cfg.alpha_target_accuracy) {
            best = alpha;
            found = true;
        }
        if (alpha >= 1.0 - 1e-12) break;
    }
    return found ? best : cfg.alpha_floor;
}

// Top ceil(alpha*N) assignments by confidence; ties at the cut resolve in
// instance order. Output is returned in instance order.
inline std::vector<Assignment> select_top_alpha(const std::vector<Assignment>& assignments,
                                                double alpha) {
    if (alpha <= 0.0 || alpha > 1.0) throw DataError("select_top_alpha: alpha must be in (0,1]");
    if (assignments.empty()) return {};
    const size_t n = assignments.size();
    size_t k = static_cast<size_t>(std::ceil(alpha * static_cast<double>(n)));
    k = std::max<size_t>(1, std::min(k, n));
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return assignments[a].confidence > assignments[b].confidence;
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    std::vector<Assignment> out;
    out.reserve(k);
    for (size_t i : order) out.push_back(assignments[i]);
    return out;
}

struct MStepReport {
    std::vector<double> epoch_mean_loss;  // mean NLL per token, per epoch
};

// Standard training over the (c, r, z_star) triplets: epochs_per_m_step
// epochs, seeded minibatch order, fresh optimizer state. rng_salt keeps
// different iterations on different shuffle streams.
inline MStepReport m_step(GeneratorParams& params, const std::vector<Instance>& instances,
                          const std::vector<Assignment>& selected, const EMConfig& cfg,
                          const Vocabulary& vocab, uint64_t rng_salt = 0) {
    if (selected.empty()) throw DataError("m_step: empty selection");
    std::vector<text::EncodedInstance> encoded;
    encoded.reserve(selected.size());
    for (const auto& a : selected) {
        const Instance& inst = instances.at(a.instance_index);
        std::optional<int> z;
        if (cfg.use_addressee_flags) z = a.z_star;
        encoded.push_back(text::encode_instance(inst, z, vocab, cfg.max_context_len));
    }

    model::AdamState adam = model::make_adam_state(params);
    MStepReport report;
    std::vector<size_t> order(encoded.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.epochs_per_m_step; ++epoch) {
        Rng rng(mix_seed(cfg.seed, 0x3157E900ULL + rng_salt * 131 + static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        double nll_tokens = 0;
        long tokens = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<text::EncodedInstance> batch;
            batch.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) batch.push_back(encoded[order[i]]);
            auto lg = model::loss_and_grads(params, batch);
            if (!std::isfinite(lg.loss)) throw NumericError("m_step: non-finite loss");
            if (cfg.grad_clip > 0) {
                double norm = model::global_grad_norm(lg.grads);
                if (norm > cfg.grad_clip) model::scale_grads(lg.grads, cfg.grad_clip / norm);
            }
            model::optimizer_step(params, lg.grads, adam, cfg.optim);
            nll_tokens += lg.loss * static_cast<double>(lg.token_count);
            tokens += lg.token_count;
        }
        report.epoch_mean_loss.push_back(nll_tokens / static_cast<double>(tokens));
    }
    return report;
}

// m_step on gold addressees; every instance must be labeled.
inline GeneratorParams finetune(GeneratorParams params, const std::vector<Instance>& instances,
                                const EMConfig& cfg, const Vocabulary& vocab) {
    if (instances.empty()) throw DataError("finetune: no instances");
    std::vector<Assignment> gold;
    gold.reserve(instances.size());
    for (size_t i = 0; i < instances.size(); ++i) {
        if (!instances[i].gold_addressee)
            throw DataError("finetune: instance without gold addressee (dialogue '" +
                            instances[i].dialogue_id + "' t=" + std::to_string(instances[i].t) +
                            ")");
        Assignment a;
        a.dialogue_id = instances[i].dialogue_id;
        a.t = instances[i].t;
        a.instance_index = i;
        a.z_star = *instances[i].gold_addressee;
        a.confidence = 1.0;
        gold.push_back(a);
    }
    m_step(params, instances, gold, cfg, vocab, 0xF17EULL);
    return params;
}

// One row per completed iteration. top30_addr_acc is kept in memory for
// analysis; the CSV carries the columns listed in csv_header().
struct IterationRecord {
    int iteration = 0;
    double alpha = 1.0;
    double sel_addr_acc = 0;  // accuracy of the top-alpha validation slice
    double all_addr_acc = 0;
    double bleu[4] = {0, 0, 0, 0};
    double rouge_l = 0;
    double mean_elbo_hat = 0;
    double mean_entropy = 0;
    double seconds = 0;
    double top30_addr_acc = std::numeric_limits<double>::quiet_NaN();
};

inline std::string csv_header() {
    return "iteration,alpha,sel_addr_acc,all_addr_acc,bleu1,bleu2,bleu3,bleu4,rougeL,"
           "mean_elbo_hat,mean_entropy,seconds";
}

inline std::string csv_row(const IterationRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f", r.iteration,
                  r.alpha, r.sel_addr_acc, r.all_addr_acc, r.bleu[0], r.bleu[1], r.bleu[2],
                  r.bleu[3], r.rouge_l, r.mean_elbo_hat, r.mean_entropy, r.seconds);
    return buf;
}

inline IterationRecord parse_csv_row(const std::string& line) {
    IterationRecord r;
    std::vector<double> vals;
    std::string cur;
    for (char ch : line + ",") {
        if (ch == ',') {
            vals.push_back(std::stod(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (vals.size() != 12) throw DataError("iterations.csv: bad row: " + line);
    r.iteration = static_cast<int>(vals[0]);
    r.alpha = vals[1];
    r.sel_addr_acc = vals[2];
    r.all_addr_acc = vals[3];
    for (int k = 0; k < 4; ++k) r.bleu[k] = vals[4 + static_cast<size_t>(k)];
    r.rouge_l = vals[8];
    r.mean_elbo_hat = vals[9];
    r.mean_entropy = vals[10];
    r.seconds = vals[11];
    return r;
}

// Where run_em persists its outputs. With resume=true a partial run
// directory is picked up at the last completed iteration.
struct RunSinks {
    std::string out_dir;
    bool resume = false;
};

struct EmRunResult {
    GeneratorParams best_params;
    int best_iteration = 0;
    std::vector<IterationRecord> log;
};

inline void save_assignments_jsonl(const std::vector<Assignment>& assignments,
                                   const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write assignments: " + path);
    for (const auto& a : assignments) {
        nlohmann::json j;
        j["dialogue_id"] = a.dialogue_id;
        j["t"] = a.t;
        j["z"] = a.z_star;
        j["confidence"] = a.confidence;
        out << j.dump() << "\n";
    }
}

namespace detail {

inline std::string ckpt_path(const std::string& out_dir, int iteration) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "iter_%04d.ckpt", iteration);
    return out_dir + "/checkpoints/" + buf;
}

struct ValEvaluation {
    double sel_addr_acc = 0, all_addr_acc = 0, top30_addr_acc = 0;
    double mean_elbo_hat = 0, mean_entropy = 0;
    std::vector<Assignment> assignments;
};

inline ValEvaluation evaluate_validation_estep(const GeneratorParams& params,
                                               const std::vector<Instance>& valid,
                                               const Vocabulary& vocab, const EMConfig& cfg,
                                               double alpha) {
    ValEvaluation ev;
    std::vector<eval::ScoredPrediction> preds;
    preds.reserve(valid.size());
    double elbo_sum = 0, ent_sum = 0;
    for (size_t i = 0; i < valid.size(); ++i) {
        auto s = eval::candidate_logliks(params, valid[i], vocab, cfg.max_context_len);
        auto q = posterior_from_scores(s);
        Posterior post;
        post.dialogue_id = valid[i].dialogue_id;
        post.t = valid[i].t;
        post.instance_index = i;
        for (size_t c = 0; c < q.size(); ++c)
            post.probs.emplace_back(static_cast<int>(c + 1), q[c]);
        Assignment a = hard_assign(post);
        ev.assignments.push_back(a);
        preds.push_back({a.confidence, a.z_star, valid[i].gold_addressee});

        double log_prior = -std::log(static_cast<double>(s.size()));
        for (size_t c = 0; c < q.size(); ++c) {
            if (q[c] <= 0) continue;
            elbo_sum += q[c] * (s[c] + log_prior);
            ent_sum -= q[c] * std::log(q[c]);
        }
    }
    ev.all_addr_acc = eval::addressee_accuracy(preds);
    ev.sel_addr_acc = eval::addressee_accuracy(preds, alpha >= 1.0 ? std::nullopt
                                                                   : std::optional<double>(alpha));
    ev.top30_addr_acc = eval::addressee_accuracy(preds, 0.3);
    ev.mean_elbo_hat = elbo_sum / static_cast<double>(valid.size());
    ev.mean_entropy = ent_sum / static_cast<double>(valid.size());
    return ev;
}

}  // namespace detail

// The alternating driver. Iteration 0 trains on the coarse initial labels;
// every later iteration recomputes hard assignments with the current model
// (E), recalibrates alpha on the labeled validation split, keeps the most
// confident alpha-fraction, and retrains (M). Validation metrics are logged
// after every iteration and the checkpoint with the best validation BLEU-4
// is returned.
inline EmRunResult run_em(const std::vector<Instance>& train, const std::vector<Instance>& valid,
                          const Vocabulary& vocab, const model::ModelConfig& model_cfg,
                          const EMConfig& cfg, const RunSinks* sinks = nullptr,
                          std::ostream* progress = nullptr) {
    validate_config(cfg);
    model::validate_config(model_cfg);
    if (train.empty()) throw DataError("run_em: empty train split");
    if (valid.empty()) throw DataError("run_em: empty validation split");
    std::vector<int> gold_val;
    gold_val.reserve(valid.size());
    for (const auto& inst : valid) {
        if (!inst.gold_addressee)
            throw DataError("run_em: validation split must be fully labeled (dialogue '" +
                            inst.dialogue_id + "' t=" + std::to_string(inst.t) + ")");
        gold_val.push_back(*inst.gold_addressee);
    }

    std::vector<Instance> eval_slice;
    {
        size_t n = cfg.eval_max_instances > 0
                       ? std::min(valid.size(), static_cast<size_t>(cfg.eval_max_instances))
                       : valid.size();
        eval_slice.assign(valid.begin(), valid.begin() + static_cast<long>(n));
    }

    std::ofstream csv;
    if (sinks) {
        std::filesystem::create_directories(sinks->out_dir + "/checkpoints");
    }

    EmRunResult result;
    GeneratorParams params = model::init_params(model_cfg);
    int start_iteration = 0;

    if (sinks && sinks->resume) {
        std::string csv_path = sinks->out_dir + "/iterations.csv";
        std::ifstream in(csv_path);
        if (in) {
            std::string line;
            bool header = true;
            while (std::getline(in, line)) {
                if (trim(line).empty()) continue;
                if (header) {
                    if (line != csv_header())
                        throw DataError("resume: unexpected CSV header in " + csv_path);
                    header = false;
                    continue;
                }
                result.log.push_back(parse_csv_row(line));
            }
        }
        if (!result.log.empty()) {
            for (size_t i = 0; i < result.log.size(); ++i)
                if (result.log[i].iteration != static_cast<int>(i))
                    throw DataError("resume: iterations.csv rows are not contiguous");
            int last = result.log.back().iteration;
            params = model::load_checkpoint(detail::ckpt_path(sinks->out_dir, last));
            start_iteration = last + 1;
            if (progress)
                *progress << "resuming after iteration " << last << "\n";
        }
    }

    if (sinks) {
        bool fresh = result.log.empty();
        csv.open(sinks->out_dir + "/iterations.csv", fresh ? std::ios::trunc : std::ios::app);
        if (!csv) throw DataError("cannot write iterations.csv under " + sinks->out_dir);
        if (fresh) csv << csv_header() << "\n";
    }

    GeneratorParams best_mem;
    double best_mem_bleu4 = -1.0;

    auto run_iteration = [&](int iteration) {
        auto t_start = std::chrono::steady_clock::now();
        double alpha = 1.0;
        std::vector<Assignment> assignments;
        if (iteration == 0) {
            assignments = initial_labels(train, cfg.init_strategy, cfg.noisy_oracle_p, cfg.seed);
        } else {
            assignments.reserve(train.size());
            for (size_t i = 0; i < train.size(); ++i)
                assignments.push_back(
                    hard_assign(e_step_posterior(params, train[i], vocab, cfg.max_context_len, i)));
            auto val_pre = detail::evaluate_validation_estep(params, valid, vocab, cfg, 1.0);
            alpha = calibrate_alpha(val_pre.assignments, gold_val, cfg);
            assignments = select_top_alpha(assignments, alpha);
        }
        m_step(params, train, assignments, cfg, vocab, static_cast<uint64_t>(iteration) + 1);

        auto val_post = detail::evaluate_validation_estep(params, valid, vocab, cfg, alpha);
        auto gen = eval::evaluate_generation(params, eval_slice, vocab, cfg.decode);

        IterationRecord rec;
        rec.iteration = iteration;
        rec.alpha = alpha;
        rec.sel_addr_acc = val_post.sel_addr_acc;
        rec.all_addr_acc = val_post.all_addr_acc;
        rec.top30_addr_acc = val_post.top30_addr_acc;
        for (int k = 0; k < 4; ++k) rec.bleu[k] = gen.bleu[k];
        rec.rouge_l = gen.rouge_l;
        rec.mean_elbo_hat = val_post.mean_elbo_hat;
        rec.mean_entropy = val_post.mean_entropy;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                          .count();
        result.log.push_back(rec);
        if (rec.bleu[3] > best_mem_bleu4) {
            best_mem_bleu4 = rec.bleu[3];
            best_mem = params;
        }
        if (sinks) {
            csv << csv_row(rec) << "\n";
            csv.flush();
            model::save_checkpoint(params, detail::ckpt_path(sinks->out_dir, iteration));
        }
        if (progress)
            *progress << "iteration " << iteration << ": alpha=" << rec.alpha
                      << " all_acc=" << rec.all_addr_acc << " top30=" << rec.top30_addr_acc
                      << " bleu4=" << rec.bleu[3] << " (" << rec.seconds << "s)\n";
    };

    for (int it = start_iteration; it <= cfg.n_iterations; ++it) {
        try {
            run_iteration(it);
        } catch (const DataError& e) {
            throw DataError("em iteration " + std::to_string(it) + ": " + e.what());
        } catch (const NumericError& e) {
            throw NumericError("em iteration " + std::to_string(it) + ": " + e.what());
        } catch (const std::exception& e) {
            throw NumericError("em iteration " + std::to_string(it) + ": " + e.what());
        }
    }

    int best = 0;
    for (size_t i = 1; i < result.log.size(); ++i)
        if (result.log[i].bleu[3] > result.log[static_cast<size_t>(best)].bleu[3])
            best = static_cast<int>(i);
    result.best_iteration = best;
    if (sinks) {
        // authoritative across resume: every iteration's checkpoint is on disk
        result.best_params = model::load_checkpoint(detail::ckpt_path(sinks->out_dir, best));
        model::save_checkpoint(result.best_params, sinks->out_dir + "/checkpoints/best.ckpt");
    } else {
        result.best_params = std::move(best_mem);
    }
    return result;
}

}  // namespace mpem::em
