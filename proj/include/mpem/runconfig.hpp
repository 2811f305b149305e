#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mpem/common.hpp"
#include "mpem/corpus.hpp"
#include "mpem/em.hpp"
#include "mpem/metrics.hpp"
#include "mpem/model.hpp"

namespace mpem::cli {

// Flat `key = value` configuration with [section] headers and '#' comments.
// Every key has a default below; unknown keys are rejected. Command-line
// flags override file values; the fully resolved configuration is echoed to
// <out_dir>/config.resolved for provenance.
class RunConfig {
public:
    RunConfig() : values_(defaults()) {}

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> kDefaults = {
            {"paths.train", ""},
            {"paths.valid", ""},
            {"paths.test", ""},
            {"paths.vocab", ""},
            {"paths.checkpoint", ""},
            {"paths.init_checkpoint", ""},
            {"paths.out_dir", "runs/default"},
            {"synth.n_dialogues", "1000"},
            {"synth.turns_min", "4"},
            {"synth.turns_max", "8"},
            {"synth.speakers_min", "3"},
            {"synth.speakers_max", "5"},
            {"synth.vocab_size", "100"},
            {"synth.keyword_pool_size", "150"},
            {"synth.copy_strength", "0.9"},
            {"synth.ratio_train", "0.8"},
            {"synth.ratio_valid", "0.1"},
            {"synth.ratio_test", "0.1"},
            {"model.d", "32"},
            {"model.n_layers", "2"},
            {"model.n_heads", "2"},
            {"model.d_ff", "64"},
            {"model.max_seq_len", "160"},
            {"model.init_scale", "0.08"},
            {"em.iterations", "8"},
            {"em.epochs_per_m_step", "1"},
            {"em.batch_size", "64"},
            {"em.lr", "0.001"},
            {"em.beta1", "0.9"},
            {"em.beta2", "0.999"},
            {"em.eps", "1e-08"},
            {"em.grad_clip", "1"},
            {"em.alpha_target_accuracy", "0.8"},
            {"em.alpha_grid_step", "0.05"},
            {"em.alpha_floor", "0.1"},
            {"em.init_strategy", "keyword-overlap"},
            {"em.noisy_oracle_p", "0.5"},
            {"em.max_context_len", "128"},
            {"em.eval_max_instances", "500"},
            {"decode.max_len", "16"},
            {"decode.beam", "1"},
            {"finetune.epochs", "8"},
            {"run.seed", "1"},
            {"run.use_addressee_flags", "true"},
            {"run.min_turns", "4"},
        };
        return kDefaults;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::string line, section;
        size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string s = line;
            size_t hash = s.find('#');
            if (hash != std::string::npos) s = s.substr(0, hash);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[' && s.back() == ']') {
                section = trim(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(path + ":" + std::to_string(line_no) + ": empty section");
                continue;
            }
            size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(line_no) +
                                  ": expected 'key = value'");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            if (!section.empty()) key = section + "." + key;
            set(key, value);
        }
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ConfigError("unknown config key: '" + key + "'");
        values_[key] = value;
    }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key: '" + key + "'");
        return it->second;
    }

    long integer(const std::string& key) const {
        try {
            size_t pos = 0;
            long v = std::stol(str(key), &pos);
            if (pos != str(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not an integer: '" + str(key) + "'");
        }
    }

    double real(const std::string& key) const {
        try {
            size_t pos = 0;
            double v = std::stod(str(key), &pos);
            if (pos != str(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not a number: '" + str(key) + "'");
        }
    }

    bool boolean(const std::string& key) const {
        const std::string& v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
    }

    uint64_t seed() const { return static_cast<uint64_t>(integer("run.seed")); }

    corpus::SynthConfig synth_config() const {
        corpus::SynthConfig c;
        c.n_dialogues = static_cast<int>(integer("synth.n_dialogues"));
        c.turns_range = {static_cast<int>(integer("synth.turns_min")),
                         static_cast<int>(integer("synth.turns_max"))};
        c.n_speakers_range = {static_cast<int>(integer("synth.speakers_min")),
                              static_cast<int>(integer("synth.speakers_max"))};
        c.vocab_size = static_cast<int>(integer("synth.vocab_size"));
        c.keyword_pool_size = static_cast<int>(integer("synth.keyword_pool_size"));
        c.copy_strength = real("synth.copy_strength");
        c.seed = seed();
        return c;
    }

    model::ModelConfig model_config(int vocab_size) const {
        model::ModelConfig c;
        c.d = static_cast<int>(integer("model.d"));
        c.n_layers = static_cast<int>(integer("model.n_layers"));
        c.n_heads = static_cast<int>(integer("model.n_heads"));
        c.d_ff = static_cast<int>(integer("model.d_ff"));
        c.max_seq_len = static_cast<int>(integer("model.max_seq_len"));
        c.init_scale = real("model.init_scale");
        c.vocab_size = vocab_size;
        c.seed = seed();
        return c;
    }

    em::EMConfig em_config() const {
        em::EMConfig c;
        c.n_iterations = static_cast<int>(integer("em.iterations"));
        c.epochs_per_m_step = static_cast<int>(integer("em.epochs_per_m_step"));
        c.batch_size = static_cast<int>(integer("em.batch_size"));
        c.optim.lr = real("em.lr");
        c.optim.beta1 = real("em.beta1");
        c.optim.beta2 = real("em.beta2");
        c.optim.eps = real("em.eps");
        c.grad_clip = real("em.grad_clip");
        c.alpha_target_accuracy = real("em.alpha_target_accuracy");
        c.alpha_grid_step = real("em.alpha_grid_step");
        c.alpha_floor = real("em.alpha_floor");
        c.init_strategy = em::parse_init_strategy(str("em.init_strategy"));
        c.noisy_oracle_p = real("em.noisy_oracle_p");
        c.max_context_len = static_cast<int>(integer("em.max_context_len"));
        c.eval_max_instances = static_cast<int>(integer("em.eval_max_instances"));
        c.decode = decode_config();
        c.use_addressee_flags = boolean("run.use_addressee_flags");
        c.seed = seed();
        return c;
    }

    eval::DecodeConfig decode_config() const {
        eval::DecodeConfig c;
        c.max_len = static_cast<int>(integer("decode.max_len"));
        c.beam = static_cast<int>(integer("decode.beam"));
        c.use_addressee_flags = boolean("run.use_addressee_flags");
        c.max_context_len = static_cast<int>(integer("em.max_context_len"));
        return c;
    }

    std::array<double, 3> split_ratios() const {
        return {real("synth.ratio_train"), real("synth.ratio_valid"), real("synth.ratio_test")};
    }

    // every key, grouped by section, in deterministic order
    std::string to_text() const {
        std::string cur_section;
        std::ostringstream os;
        for (const auto& [key, value] : values_) {
            size_t dot = key.find('.');
            std::string section = key.substr(0, dot);
            if (section != cur_section) {
                if (!cur_section.empty()) os << "\n";
                os << "[" << section << "]\n";
                cur_section = section;
            }
            os << key.substr(dot + 1) << " = " << value << "\n";
        }
        return os.str();
    }

    void write_resolved(const std::string& out_dir) const {
        std::ofstream out(out_dir + "/config.resolved");
        if (!out) throw DataError("cannot write config.resolved under " + out_dir);
        out << to_text();
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace mpem::cli
