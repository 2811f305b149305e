#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "mpem/common.hpp"
#include "mpem/rng.hpp"

namespace mpem::corpus {

// One dialogue turn. `addressee` is the 1-based index of the earlier turn
// this utterance replies to; absent when unlabeled. Turn 1 never has one.
struct Utterance {
    int speaker_id = 0;
    std::vector<std::string> tokens;
    std::optional<int> addressee;
};

struct Dialogue {
    std::string id;
    std::vector<Utterance> utterances;  // implicit turn indices 1..T

    int turns() const { return static_cast<int>(utterances.size()); }
};

// One response-generation example: context turns 1..t-1, the speaker of the
// response, the response tokens, and (when known) the gold addressee.
struct Instance {
    std::string dialogue_id;
    int t = 0;  // response turn index, >= 2
    std::vector<Utterance> context;
    int response_speaker = 0;
    std::vector<std::string> response;
    std::optional<int> gold_addressee;

    int num_candidates() const { return t - 1; }
};

struct SynthConfig {
    int n_dialogues = 1000;
    std::pair<int, int> turns_range{4, 8};
    std::pair<int, int> n_speakers_range{3, 5};
    int vocab_size = 100;         // background word types
    int keyword_pool_size = 150;  // keyword types shared across dialogues
    double copy_strength = 0.9;   // P(response token copied from addressee keyword set)
    uint64_t seed = 1;

    // shape of a planted utterance: each turn draws kKeywordsPerTurn keywords
    // and displays each kDisplayRepeats times, followed by kResponseSlots
    // reply tokens (copies of the addressee's keywords or background noise,
    // emitted in canonical sorted order).
    static constexpr int kKeywordsPerTurn = 3;
    static constexpr int kDisplayRepeats = 2;
    static constexpr int kResponseSlots = 5;
};

inline void validate_dialogue(const Dialogue& d, bool require_multiparty = true) {
    if (require_multiparty && d.turns() < 2)
        throw DataError("dialogue '" + d.id + "': needs at least 2 turns, got " +
                        std::to_string(d.turns()));
    for (int i = 0; i < d.turns(); ++i) {
        const Utterance& u = d.utterances[i];
        int turn = i + 1;
        if (u.tokens.empty())
            throw DataError("dialogue '" + d.id + "' turn " + std::to_string(turn) +
                            ": empty token list");
        if (u.speaker_id < 0)
            throw DataError("dialogue '" + d.id + "' turn " + std::to_string(turn) +
                            ": negative speaker id");
        if (u.addressee) {
            if (turn == 1)
                throw DataError("dialogue '" + d.id + "': turn 1 cannot have an addressee");
            if (*u.addressee < 1 || *u.addressee >= turn)
                throw DataError("dialogue '" + d.id + "' turn " + std::to_string(turn) +
                                ": addressee " + std::to_string(*u.addressee) +
                                " out of range [1, " + std::to_string(turn - 1) + "]");
        }
    }
    if (require_multiparty) {
        int first = d.utterances[0].speaker_id;
        bool two = false;
        for (const auto& u : d.utterances)
            if (u.speaker_id != first) { two = true; break; }
        if (!two) throw DataError("dialogue '" + d.id + "': fewer than 2 distinct speakers");
    }
}

// UTF-8 JSONL, one dialogue per line:
//   {"id": "...", "utterances": [{"speaker": n, "text": "w w w", "addressee": n|null}, ...]}
// Unknown fields are ignored. With require_multiparty=false, degenerate
// dialogues (single turn or single speaker) are admitted; `parse` wants that.
inline std::vector<Dialogue> load_jsonl(const std::string& path, bool require_multiparty = true) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::vector<Dialogue> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        Dialogue d;
        try {
            d.id = j.at("id").get<std::string>();
            for (const auto& ju : j.at("utterances")) {
                Utterance u;
                u.speaker_id = ju.at("speaker").get<int>();
                u.tokens = split_ws(ju.at("text").get<std::string>());
                if (ju.contains("addressee") && !ju["addressee"].is_null())
                    u.addressee = ju["addressee"].get<int>();
                d.utterances.push_back(std::move(u));
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad dialogue record: " +
                            e.what());
        }
        validate_dialogue(d, require_multiparty);
        out.push_back(std::move(d));
    }
    return out;
}

inline void save_jsonl(const std::vector<Dialogue>& dialogues, const std::string& path,
                       bool include_labels = true) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write corpus file: " + path);
    for (const auto& d : dialogues) {
        nlohmann::json j;
        j["id"] = d.id;
        j["utterances"] = nlohmann::json::array();
        for (const auto& u : d.utterances) {
            nlohmann::json ju;
            ju["speaker"] = u.speaker_id;
            ju["text"] = join_ws(u.tokens);
            if (include_labels && u.addressee)
                ju["addressee"] = *u.addressee;
            else
                ju["addressee"] = nullptr;
            j["utterances"].push_back(std::move(ju));
        }
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("write failed: " + path);
}

inline std::vector<Dialogue> filter_dialogues(const std::vector<Dialogue>& dialogues,
                                              int min_turns) {
    if (min_turns < 2) throw DataError("min_turns must be >= 2");
    std::vector<Dialogue> out;
    for (const auto& d : dialogues)
        if (d.turns() >= min_turns) out.push_back(d);
    return out;
}

// Deterministic synthetic corpus with planted reply structure. Every turn
// t >= 2 gets a gold addressee, uniform over earlier turns. Each turn owns a
// small keyword set, displayed verbatim at the start of the utterance; reply
// tokens then copy the *addressee's* keywords with probability copy_strength
// (background noise otherwise), so token evidence points back at the true
// addressee and p(r|c,z) discriminates z whenever copy_strength > 0.
inline std::vector<Dialogue> synthesize_corpus(const SynthConfig& cfg) {
    if (cfg.turns_range.first < 4 || cfg.turns_range.second < cfg.turns_range.first)
        throw DataError("turns_range must satisfy 4 <= min <= max");
    if (cfg.n_speakers_range.first < 2 || cfg.n_speakers_range.second < cfg.n_speakers_range.first)
        throw DataError("n_speakers_range must satisfy 2 <= min <= max");
    if (cfg.copy_strength < 0.0 || cfg.copy_strength > 1.0)
        throw DataError("copy_strength must be in [0,1]");
    if (cfg.vocab_size < 1 || cfg.keyword_pool_size < SynthConfig::kKeywordsPerTurn)
        throw DataError("vocab_size/keyword_pool_size too small");

    const int K = SynthConfig::kKeywordsPerTurn;
    const int D = SynthConfig::kDisplayRepeats;
    const int M = SynthConfig::kResponseSlots;

    std::vector<Dialogue> out;
    out.reserve(cfg.n_dialogues);
    for (int di = 0; di < cfg.n_dialogues; ++di) {
        Rng rng(mix_seed(cfg.seed, 0x5EEDC0DEULL + static_cast<uint64_t>(di)));
        Dialogue d;
        {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "synth-%06d", di);
            d.id = buf;
        }
        int turns = static_cast<int>(rng.next_int(cfg.turns_range.first, cfg.turns_range.second));
        int n_speakers =
            static_cast<int>(rng.next_int(cfg.n_speakers_range.first, cfg.n_speakers_range.second));

        // turn keywords: distinct within a dialogue when the pool allows
        std::vector<std::vector<int>> turn_kws(turns);
        {
            std::vector<int> pool(cfg.keyword_pool_size);
            for (int i = 0; i < cfg.keyword_pool_size; ++i) pool[i] = i;
            rng.shuffle(pool);
            size_t cursor = 0;
            for (int i = 0; i < turns; ++i) {
                for (int k = 0; k < K; ++k) {
                    if (cursor >= pool.size()) {  // pool exhausted, reshuffle
                        rng.shuffle(pool);
                        cursor = 0;
                    }
                    turn_kws[i].push_back(pool[cursor++]);
                }
            }
        }

        auto kw_token = [](int k) { return "k" + std::to_string(k); };
        auto bg_token = [&](Rng& r) {
            return "w" + std::to_string(r.next_int(0, cfg.vocab_size - 1));
        };

        for (int i = 0; i < turns; ++i) {
            Utterance u;
            // first two turns get distinct speakers; multi-party guaranteed
            if (i == 0)
                u.speaker_id = 0;
            else if (i == 1)
                u.speaker_id = 1;
            else
                u.speaker_id = static_cast<int>(rng.next_int(0, n_speakers - 1));

            if (i >= 1) u.addressee = static_cast<int>(rng.next_int(1, i));  // 1-based

            for (int k = 0; k < K; ++k)
                for (int r = 0; r < D; ++r) u.tokens.push_back(kw_token(turn_kws[i][k]));
            // reply part in canonical sorted order, so the token sequence is
            // a near-deterministic function of (context, addressee)
            std::vector<std::string> reply;
            for (int s = 0; s < M; ++s) {
                if (i >= 1 && rng.next_bernoulli(cfg.copy_strength)) {
                    const auto& src = turn_kws[*u.addressee - 1];
                    reply.push_back(kw_token(src[rng.next_below(src.size())]));
                } else {
                    reply.push_back(bg_token(rng));
                }
            }
            std::sort(reply.begin(), reply.end());
            u.tokens.insert(u.tokens.end(), reply.begin(), reply.end());
            d.utterances.push_back(std::move(u));
        }
        out.push_back(std::move(d));
    }
    return out;
}

// One instance per turn t in [2, T] of every dialogue.
inline std::vector<Instance> make_instances(const std::vector<Dialogue>& dialogues) {
    std::vector<Instance> out;
    for (const auto& d : dialogues) {
        for (int t = 2; t <= d.turns(); ++t) {
            Instance inst;
            inst.dialogue_id = d.id;
            inst.t = t;
            inst.context.assign(d.utterances.begin(), d.utterances.begin() + (t - 1));
            inst.response_speaker = d.utterances[t - 1].speaker_id;
            inst.response = d.utterances[t - 1].tokens;
            inst.gold_addressee = d.utterances[t - 1].addressee;
            out.push_back(std::move(inst));
        }
    }
    return out;
}

// Partition by dialogue. Non-train sizes are floored, remainder goes to train.
inline std::tuple<std::vector<Dialogue>, std::vector<Dialogue>, std::vector<Dialogue>> split(
    const std::vector<Dialogue>& dialogues, std::array<double, 3> ratios, uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0 || std::abs(sum - 1.0) > 1e-9)
        throw DataError("split ratios must be positive and sum to 1");
    size_t n = dialogues.size();
    size_t n_valid = static_cast<size_t>(ratios[1] * static_cast<double>(n));
    size_t n_test = static_cast<size_t>(ratios[2] * static_cast<double>(n));
    size_t n_train = n - n_valid - n_test;

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x5F11737EULL));
    rng.shuffle(order);

    std::tuple<std::vector<Dialogue>, std::vector<Dialogue>, std::vector<Dialogue>> result;
    for (size_t i = 0; i < n; ++i) {
        const Dialogue& d = dialogues[order[i]];
        if (i < n_train)
            std::get<0>(result).push_back(d);
        else if (i < n_train + n_valid)
            std::get<1>(result).push_back(d);
        else
            std::get<2>(result).push_back(d);
    }
    return result;
}

inline std::vector<Dialogue> strip_labels(std::vector<Dialogue> dialogues) {
    for (auto& d : dialogues)
        for (auto& u : d.utterances) u.addressee.reset();
    return dialogues;
}

}  // namespace mpem::corpus
