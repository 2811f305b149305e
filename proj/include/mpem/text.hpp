#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mpem/common.hpp"
#include "mpem/corpus.hpp"

namespace mpem::text {

// Token ids. Reserved ids are fixed; speaker tokens "S#k" follow, then
// corpus tokens by descending frequency (ties lexicographic).
struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;
    static constexpr int kUnk = 4;
    static constexpr int kColon = 5;
    static constexpr int kNumReserved = 6;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    int size() const { return static_cast<int>(id_to_token.size()); }

    int id(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const { return id_to_token.at(static_cast<size_t>(id)); }

    bool has_token(const std::string& tok) const { return token_to_id.count(tok) > 0; }

    static std::string speaker_token(int speaker_id) { return "S#" + std::to_string(speaker_id); }

    int speaker_id_token(int speaker_id) const { return id(speaker_token(speaker_id)); }

    void add(const std::string& tok) {
        if (token_to_id.count(tok))
            throw DataError("vocabulary: duplicate token '" + tok + "'");
        token_to_id[tok] = size();
        id_to_token.push_back(tok);
    }

    std::vector<int> encode_tokens(const std::vector<std::string>& toks) const {
        std::vector<int> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id(t));
        return out;
    }

    std::vector<std::string> decode_ids(const std::vector<int>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (int i : ids) out.push_back(token(i));
        return out;
    }
};

// Tokens kept when corpus frequency >= min_freq, most frequent first,
// truncated so the whole vocabulary (reserved + speakers + content) has at
// most max_size entries.
inline Vocabulary build_vocab(const std::vector<corpus::Dialogue>& dialogues, int min_freq,
                              int max_size) {
    if (min_freq < 1) throw DataError("min_freq must be >= 1");
    Vocabulary v;
    v.add("[PAD]");
    v.add("[BOS]");
    v.add("[EOS]");
    v.add("[SEP]");
    v.add("[UNK]");
    v.add(":");

    std::map<int, bool> speakers;
    std::map<std::string, long> freq;
    for (const auto& d : dialogues) {
        for (const auto& u : d.utterances) {
            speakers[u.speaker_id] = true;
            for (const auto& t : u.tokens) ++freq[t];
        }
    }
    for (const auto& [spk, _] : speakers) v.add(Vocabulary::speaker_token(spk));

    std::vector<std::pair<std::string, long>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [tok, n] : items) {
        if (n < min_freq) break;
        if (v.size() >= max_size) break;
        if (v.has_token(tok)) continue;  // tokens that collide with reserved forms
        v.add(tok);
    }
    return v;
}

// One token per line, line number = id, reserved tokens first.
inline void save_vocab(const Vocabulary& v, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    for (const auto& t : v.id_to_token) out << t << "\n";
}

inline Vocabulary load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        v.add(line);
    }
    static const char* expect[] = {"[PAD]", "[BOS]", "[EOS]", "[SEP]", "[UNK]", ":"};
    if (v.size() < Vocabulary::kNumReserved)
        throw DataError("vocabulary too small: " + path);
    for (int i = 0; i < Vocabulary::kNumReserved; ++i)
        if (v.token(i) != expect[i])
            throw DataError("vocabulary " + path + ": reserved token mismatch at id " +
                            std::to_string(i));
    return v;
}

// Model-ready encoding of one instance under a fixed addressee choice z.
// Context layout: S#a : U_1 [SEP] S#b : U_2 [SEP] ... S#spk(t) :
// addressee_flags mark the chosen candidate's span (speaker token through
// its last content token; the [SEP] after it stays 0). candidate_spans are
// half-open [start, end) offsets into context_ids for the surviving turns,
// listed oldest first; span_turns gives each span's original turn index.
struct EncodedInstance {
    std::vector<int> context_ids;
    std::vector<uint8_t> addressee_flags;
    std::vector<int> response_ids;  // response tokens + EOS
    std::vector<std::pair<int, int>> candidate_spans;
    std::vector<int> span_turns;

    int span_of_turn(int turn) const {
        for (size_t i = 0; i < span_turns.size(); ++i)
            if (span_turns[i] == turn) return static_cast<int>(i);
        return -1;
    }
};

// z = 1-based candidate turn, or nullopt for "no addressee specified"
// (all flags zero). When the context exceeds max_context_len, whole turns
// are dropped oldest-first; the candidate turn and the trailing speaker
// prompt are never dropped.
inline EncodedInstance encode_instance(const corpus::Instance& inst, std::optional<int> z,
                                       const Vocabulary& vocab, int max_context_len) {
    if (z && (*z < 1 || *z >= inst.t))
        throw DataError("encode_instance: z=" + std::to_string(*z) + " out of range [1," +
                        std::to_string(inst.t - 1) + ") for dialogue '" + inst.dialogue_id + "'");

    const int n_turns = static_cast<int>(inst.context.size());
    std::vector<std::vector<int>> turn_ids(n_turns);
    for (int i = 0; i < n_turns; ++i) {
        const auto& u = inst.context[i];
        turn_ids[i].push_back(vocab.speaker_id_token(u.speaker_id));
        turn_ids[i].push_back(Vocabulary::kColon);
        for (const auto& tok : u.tokens) turn_ids[i].push_back(vocab.id(tok));
    }
    const int prompt_len = 2;  // trailing "S#spk :"

    // drop whole oldest turns until the sequence fits
    std::vector<bool> kept(n_turns, true);
    auto total_len = [&]() {
        int len = prompt_len;
        for (int i = 0; i < n_turns; ++i)
            if (kept[i]) len += static_cast<int>(turn_ids[i].size()) + 1;  // + [SEP]
        return len;
    };
    int drop = 0;
    while (total_len() > max_context_len) {
        while (drop < n_turns && (!kept[drop] || (z && drop == *z - 1))) ++drop;
        if (drop >= n_turns)
            throw DataError("encode_instance: candidate turn alone exceeds max_context_len for "
                            "dialogue '" + inst.dialogue_id + "' t=" + std::to_string(inst.t));
        kept[drop] = false;
    }

    EncodedInstance enc;
    for (int i = 0; i < n_turns; ++i) {
        if (!kept[i]) continue;
        int start = static_cast<int>(enc.context_ids.size());
        enc.context_ids.insert(enc.context_ids.end(), turn_ids[i].begin(), turn_ids[i].end());
        int end = static_cast<int>(enc.context_ids.size());
        enc.context_ids.push_back(Vocabulary::kSep);
        enc.candidate_spans.emplace_back(start, end);
        enc.span_turns.push_back(i + 1);
    }
    enc.context_ids.push_back(vocab.speaker_id_token(inst.response_speaker));
    enc.context_ids.push_back(Vocabulary::kColon);

    enc.addressee_flags.assign(enc.context_ids.size(), 0);
    if (z) {
        int si = enc.span_of_turn(*z);
        if (si < 0)
            throw DataError("encode_instance: candidate turn was truncated away");
        auto [s, e] = enc.candidate_spans[static_cast<size_t>(si)];
        for (int p = s; p < e; ++p) enc.addressee_flags[static_cast<size_t>(p)] = 1;
    }

    enc.response_ids = vocab.encode_tokens(inst.response);
    enc.response_ids.push_back(Vocabulary::kEos);
    return enc;
}

}  // namespace mpem::text
