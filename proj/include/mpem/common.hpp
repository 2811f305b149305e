#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <sstream>
#include <vector>

namespace mpem {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: ConfigError -> 1, DataError -> 2, NumericError -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream iss(s);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

inline std::string join_ws(const std::vector<std::string>& toks) {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

inline double logsumexp(const std::vector<double>& xs) {
    if (xs.empty()) throw NumericError("logsumexp of empty vector");
    double mx = *std::max_element(xs.begin(), xs.end());
    if (!std::isfinite(mx)) return mx;
    double s = 0;
    for (double x : xs) s += std::exp(x - mx);
    return mx + std::log(s);
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace mpem
