#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mpem/common.hpp"
#include "mpem/mat.hpp"
#include "mpem/rng.hpp"
#include "mpem/text.hpp"

namespace mpem::model {

using text::EncodedInstance;
using text::Vocabulary;

struct ModelConfig {
    int d = 32;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 64;
    int max_seq_len = 160;  // L
    int vocab_size = 0;     // V, set from the vocabulary
    double init_scale = 0.08;
    uint64_t seed = 0;
};

inline void validate_config(const ModelConfig& c) {
    if (c.d <= 0 || c.n_layers <= 0 || c.n_heads <= 0 || c.d_ff <= 0 || c.max_seq_len <= 0 ||
        c.vocab_size <= 0)
        throw ConfigError("model config: all dimensions must be positive");
    if (c.d % c.n_heads != 0) throw ConfigError("model config: d must be divisible by n_heads");
    if (c.init_scale < 0) throw ConfigError("model config: init_scale must be >= 0");
}

struct LayerParams {
    Mat ln1_g, ln1_b;
    Mat wq, bq, wk, bk, wv, bv, wo, bo;
    Mat ln2_g, ln2_b;
    Mat w1, b1, w2, b2;
};

// All learnable arrays. addr_emb has exactly 2 rows: row 0 marks tokens
// outside the addressee utterance, row 1 marks tokens inside it.
struct GeneratorParams {
    ModelConfig cfg;
    Mat token_emb;  // V x d
    Mat pos_emb;    // L x d
    Mat addr_emb;   // 2 x d
    std::vector<LayerParams> layers;
    Mat lnf_g, lnf_b;  // 1 x d
    Mat w_out;         // d x V
    Mat b_out;         // 1 x V
};

inline std::vector<std::pair<std::string, Mat*>> named_blocks(GeneratorParams& p) {
    std::vector<std::pair<std::string, Mat*>> out;
    out.emplace_back("token_emb", &p.token_emb);
    out.emplace_back("pos_emb", &p.pos_emb);
    out.emplace_back("addr_emb", &p.addr_emb);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        std::string pre = "layers." + std::to_string(l) + ".";
        out.emplace_back(pre + "ln1.g", &L.ln1_g);
        out.emplace_back(pre + "ln1.b", &L.ln1_b);
        out.emplace_back(pre + "attn.wq", &L.wq);
        out.emplace_back(pre + "attn.bq", &L.bq);
        out.emplace_back(pre + "attn.wk", &L.wk);
        out.emplace_back(pre + "attn.bk", &L.bk);
        out.emplace_back(pre + "attn.wv", &L.wv);
        out.emplace_back(pre + "attn.bv", &L.bv);
        out.emplace_back(pre + "attn.wo", &L.wo);
        out.emplace_back(pre + "attn.bo", &L.bo);
        out.emplace_back(pre + "ln2.g", &L.ln2_g);
        out.emplace_back(pre + "ln2.b", &L.ln2_b);
        out.emplace_back(pre + "ffn.w1", &L.w1);
        out.emplace_back(pre + "ffn.b1", &L.b1);
        out.emplace_back(pre + "ffn.w2", &L.w2);
        out.emplace_back(pre + "ffn.b2", &L.b2);
    }
    out.emplace_back("ln_f.g", &p.lnf_g);
    out.emplace_back("ln_f.b", &p.lnf_b);
    out.emplace_back("out.w", &p.w_out);
    out.emplace_back("out.b", &p.b_out);
    return out;
}

inline std::vector<std::pair<std::string, const Mat*>> named_blocks(const GeneratorParams& p) {
    auto mut = named_blocks(const_cast<GeneratorParams&>(p));
    std::vector<std::pair<std::string, const Mat*>> out;
    out.reserve(mut.size());
    for (auto& [name, m] : mut) out.emplace_back(name, m);
    return out;
}

inline GeneratorParams zero_like(const GeneratorParams& p) {
    GeneratorParams z = p;
    for (auto& [name, m] : named_blocks(z)) m->fill(0.0);
    return z;
}

// Embeddings and projection matrices uniform in [-init_scale, +init_scale];
// layer-norm gains 1; all biases 0. Deterministic per (seed, block index).
inline GeneratorParams init_params(const ModelConfig& cfg) {
    validate_config(cfg);
    GeneratorParams p;
    p.cfg = cfg;
    const int d = cfg.d, V = cfg.vocab_size, L = cfg.max_seq_len, dff = cfg.d_ff;
    p.token_emb = Mat(V, d);
    p.pos_emb = Mat(L, d);
    p.addr_emb = Mat(2, d);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lay : p.layers) {
        lay.ln1_g = Mat(1, d, 1.0);
        lay.ln1_b = Mat(1, d);
        lay.wq = Mat(d, d);
        lay.bq = Mat(1, d);
        lay.wk = Mat(d, d);
        lay.bk = Mat(1, d);
        lay.wv = Mat(d, d);
        lay.bv = Mat(1, d);
        lay.wo = Mat(d, d);
        lay.bo = Mat(1, d);
        lay.ln2_g = Mat(1, d, 1.0);
        lay.ln2_b = Mat(1, d);
        lay.w1 = Mat(d, dff);
        lay.b1 = Mat(1, dff);
        lay.w2 = Mat(dff, d);
        lay.b2 = Mat(1, d);
    }
    p.lnf_g = Mat(1, d, 1.0);
    p.lnf_b = Mat(1, d);
    p.w_out = Mat(d, V);
    p.b_out = Mat(1, V);

    uint64_t idx = 0;
    for (auto& [name, m] : named_blocks(p)) {
        ++idx;
        bool is_weight = name == "token_emb" || name == "pos_emb" || name == "addr_emb" ||
                         name.ends_with(".wq") || name.ends_with(".wk") ||
                         name.ends_with(".wv") || name.ends_with(".wo") ||
                         name.ends_with(".w1") || name.ends_with(".w2") || name == "out.w";
        if (!is_weight) continue;  // gains/biases keep their fill
        Rng rng(mix_seed(cfg.seed, 0x11117000ULL + idx));
        for (double& v : m->a) v = rng.next_real(-cfg.init_scale, cfg.init_scale);
    }
    return p;
}

namespace detail {

struct LnCache {
    Mat xhat;                     // n x d
    std::vector<double> inv_std;  // n
};

// y = g .* xhat + b, xhat = (x - mean) / sqrt(var + eps), per row
inline void layernorm_fwd(const Mat& x, const Mat& g, const Mat& b, Mat& y, LnCache& cache) {
    constexpr double eps = 1e-5;
    const int n = x.rows, d = x.cols;
    y = Mat(n, d);
    cache.xhat = Mat(n, d);
    cache.inv_std.assign(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        const double* xi = x.row(i);
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        double istd = 1.0 / std::sqrt(var + eps);
        cache.inv_std[static_cast<size_t>(i)] = istd;
        double* xh = cache.xhat.row(i);
        double* yi = y.row(i);
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mu) * istd;
            yi[j] = g.at(0, j) * xh[j] + b.at(0, j);
        }
    }
}

inline void layernorm_bwd(const Mat& dy, const Mat& g, const LnCache& cache, Mat& dx, Mat& dg,
                          Mat& db) {
    const int n = dy.rows, d = dy.cols;
    dx = Mat(n, d);
    for (int i = 0; i < n; ++i) {
        const double* dyi = dy.row(i);
        const double* xh = cache.xhat.row(i);
        double istd = cache.inv_std[static_cast<size_t>(i)];
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int j = 0; j < d; ++j) {
            dg.at(0, j) += dyi[j] * xh[j];
            db.at(0, j) += dyi[j];
            double dxh = dyi[j] * g.at(0, j);
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        double m1 = sum_dxhat / d, m2 = sum_dxhat_xhat / d;
        double* dxi = dx.row(i);
        for (int j = 0; j < d; ++j) {
            double dxh = dyi[j] * g.at(0, j);
            dxi[j] = istd * (dxh - m1 - xh[j] * m2);
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline void add_bias(Mat& x, const Mat& b) {
    for (int i = 0; i < x.rows; ++i) {
        double* xi = x.row(i);
        for (int j = 0; j < x.cols; ++j) xi[j] += b.at(0, j);
    }
}

inline void add_colsum(const Mat& dy, Mat& db) {
    for (int i = 0; i < dy.rows; ++i) {
        const double* r = dy.row(i);
        for (int j = 0; j < dy.cols; ++j) db.at(0, j) += r[j];
    }
}

// linear: y = x * w + b
inline Mat linear_fwd(const Mat& x, const Mat& w, const Mat& b) {
    Mat y(x.rows, w.cols);
    matmul_acc(x, w, y);
    add_bias(y, b);
    return y;
}

struct LayerCache {
    Mat x_in;  // layer input
    LnCache ln1;
    Mat a;                  // post-LN1
    Mat q, k, v;            // n x d
    std::vector<Mat> prob;  // per head, n x n causal attention weights
    Mat ctx;                // n x d concatenated head outputs
    Mat x_mid;              // after attention residual
    LnCache ln2;
    Mat b;   // post-LN2
    Mat h1;  // pre-activation, n x d_ff
    Mat g1;  // post-gelu
};

struct ForwardCache {
    Mat x0;  // embedding sum
    std::vector<LayerCache> layers;
    LnCache lnf;
    Mat y;  // final layer-norm output
};

// Causal self-attention + FFN stack. Returns logits for rows
// [logits_from, n); earlier rows are left zero (their distributions are
// never consumed by likelihood or decoding).
inline Mat run_forward(const GeneratorParams& p, const std::vector<int>& ids,
                       const std::vector<uint8_t>& flags, int logits_from, ForwardCache* cache) {
    const ModelConfig& cfg = p.cfg;
    const int n = static_cast<int>(ids.size());
    const int d = cfg.d, nh = cfg.n_heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (n == 0) throw DataError("model: empty input sequence");
    if (n > cfg.max_seq_len)
        throw DataError("model: sequence length " + std::to_string(n) + " exceeds L=" +
                        std::to_string(cfg.max_seq_len));
    if (flags.size() != ids.size()) throw DataError("model: ids/flags length mismatch");

    Mat x(n, d);
    for (int i = 0; i < n; ++i) {
        int id = ids[static_cast<size_t>(i)];
        if (id < 0 || id >= cfg.vocab_size) throw DataError("model: token id out of range");
        int f = flags[static_cast<size_t>(i)] ? 1 : 0;
        const double* te = p.token_emb.row(id);
        const double* pe = p.pos_emb.row(i);
        const double* ae = p.addr_emb.row(f);
        double* xi = x.row(i);
        for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j] + ae[j];
    }
    if (cache) {
        cache->x0 = x;
        cache->layers.resize(p.layers.size());
    }

    for (size_t li = 0; li < p.layers.size(); ++li) {
        const LayerParams& L = p.layers[li];
        LayerCache* lc = cache ? &cache->layers[li] : nullptr;
        if (lc) lc->x_in = x;

        LnCache ln1;
        Mat a;
        layernorm_fwd(x, L.ln1_g, L.ln1_b, a, ln1);
        Mat q = linear_fwd(a, L.wq, L.bq);
        Mat k = linear_fwd(a, L.wk, L.bk);
        Mat v = linear_fwd(a, L.wv, L.bv);

        Mat ctx(n, d);
        std::vector<Mat> probs(static_cast<size_t>(nh));
        std::vector<double> srow(static_cast<size_t>(n));
        for (int h = 0; h < nh; ++h) {
            Mat& P = probs[static_cast<size_t>(h)];
            P = Mat(n, n);
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                const double* qi = q.row(i) + off;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) {
                    const double* kj = k.row(j) + off;
                    double s = 0;
                    for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    s *= scale;
                    srow[static_cast<size_t>(j)] = s;
                    if (s > mx) mx = s;
                }
                double Z = 0;
                double* Pi = P.row(i);
                for (int j = 0; j <= i; ++j) {
                    double e = std::exp(srow[static_cast<size_t>(j)] - mx);
                    Pi[j] = e;
                    Z += e;
                }
                double* ci = ctx.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    Pi[j] /= Z;
                    const double* vj = v.row(j) + off;
                    for (int t = 0; t < dh; ++t) ci[t] += Pi[j] * vj[t];
                }
            }
        }
        Mat o = linear_fwd(ctx, L.wo, L.bo);
        Mat x_mid = x;
        for (size_t t = 0; t < x_mid.a.size(); ++t) x_mid.a[t] += o.a[t];

        LnCache ln2;
        Mat b;
        layernorm_fwd(x_mid, L.ln2_g, L.ln2_b, b, ln2);
        Mat h1 = linear_fwd(b, L.w1, L.b1);
        Mat g1(n, cfg.d_ff);
        for (size_t t = 0; t < h1.a.size(); ++t) g1.a[t] = gelu(h1.a[t]);
        Mat f(n, d);
        matmul_acc(g1, L.w2, f);
        add_bias(f, L.b2);

        Mat x_next = x_mid;
        for (size_t t = 0; t < x_next.a.size(); ++t) x_next.a[t] += f.a[t];

        if (lc) {
            lc->ln1 = std::move(ln1);
            lc->a = std::move(a);
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->prob = std::move(probs);
            lc->ctx = std::move(ctx);
            lc->x_mid = x_mid;
            lc->ln2 = std::move(ln2);
            lc->b = std::move(b);
            lc->h1 = std::move(h1);
            lc->g1 = std::move(g1);
        }
        x = std::move(x_next);
    }

    LnCache lnf;
    Mat y;
    layernorm_fwd(x, p.lnf_g, p.lnf_b, y, lnf);

    Mat logits(n, cfg.vocab_size);
    for (int i = logits_from; i < n; ++i) {
        const double* yi = y.row(i);
        double* gi = logits.row(i);
        for (int j = 0; j < cfg.vocab_size; ++j) gi[j] = p.b_out.at(0, j);
        for (int t = 0; t < d; ++t) {
            double v = yi[t];
            if (v == 0.0) continue;
            const double* wr = p.w_out.row(t);
            for (int j = 0; j < cfg.vocab_size; ++j) gi[j] += v * wr[j];
        }
    }
    if (cache) {
        cache->lnf = std::move(lnf);
        cache->y = std::move(y);
    }
    return logits;
}

// backward through the stack given dlogits; accumulates into g
inline void run_backward(const GeneratorParams& p, const std::vector<int>& ids,
                         const std::vector<uint8_t>& flags, const ForwardCache& cache,
                         const Mat& dlogits, GeneratorParams& g) {
    const ModelConfig& cfg = p.cfg;
    const int n = static_cast<int>(ids.size());
    const int d = cfg.d, nh = cfg.n_heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // output projection
    Mat dy(n, d);
    matmul_at_acc(cache.y, dlogits, g.w_out);
    add_colsum(dlogits, g.b_out);
    matmul_bt_acc(dlogits, p.w_out, dy);

    Mat dx;
    layernorm_bwd(dy, p.lnf_g, cache.lnf, dx, g.lnf_g, g.lnf_b);

    for (int li = static_cast<int>(p.layers.size()) - 1; li >= 0; --li) {
        const LayerParams& L = p.layers[static_cast<size_t>(li)];
        const LayerCache& lc = cache.layers[static_cast<size_t>(li)];
        LayerParams& gL = g.layers[static_cast<size_t>(li)];

        // FFN block: x_next = x_mid + gelu(b*w1+b1)*w2+b2
        const Mat& df = dx;  // gradient wrt f (and wrt x_mid via residual)
        Mat dg1(n, cfg.d_ff);
        matmul_at_acc(lc.g1, df, gL.w2);
        add_colsum(df, gL.b2);
        matmul_bt_acc(df, L.w2, dg1);
        Mat dh1(n, cfg.d_ff);
        for (size_t t = 0; t < dh1.a.size(); ++t) dh1.a[t] = dg1.a[t] * gelu_grad(lc.h1.a[t]);
        Mat db(n, d);
        matmul_at_acc(lc.b, dh1, gL.w1);
        add_colsum(dh1, gL.b1);
        matmul_bt_acc(dh1, L.w1, db);
        Mat dx_mid;
        layernorm_bwd(db, L.ln2_g, lc.ln2, dx_mid, gL.ln2_g, gL.ln2_b);
        for (size_t t = 0; t < dx_mid.a.size(); ++t) dx_mid.a[t] += dx.a[t];  // residual

        // attention block: x_mid = x_in + (attn(a))*wo+bo
        const Mat& do_ = dx_mid;
        Mat dctx(n, d);
        matmul_at_acc(lc.ctx, do_, gL.wo);
        add_colsum(do_, gL.bo);
        matmul_bt_acc(do_, L.wo, dctx);

        Mat dq(n, d), dk(n, d), dv(n, d);
        std::vector<double> dPi(static_cast<size_t>(n)), dSi(static_cast<size_t>(n));
        for (int h = 0; h < nh; ++h) {
            const Mat& P = lc.prob[static_cast<size_t>(h)];
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                const double* dci = dctx.row(i) + off;
                const double* Pi = P.row(i);
                // dP and dv
                double dot = 0;
                for (int j = 0; j <= i; ++j) {
                    const double* vj = lc.v.row(j) + off;
                    double s = 0;
                    for (int t = 0; t < dh; ++t) s += dci[t] * vj[t];
                    dPi[static_cast<size_t>(j)] = s;
                    dot += s * Pi[j];
                    double* dvj = dv.row(j) + off;
                    for (int t = 0; t < dh; ++t) dvj[t] += Pi[j] * dci[t];
                }
                // softmax backward, then scores -> q, k
                const double* qi = lc.q.row(i) + off;
                double* dqi = dq.row(i) + off;
                for (int j = 0; j <= i; ++j) {
                    double ds = Pi[j] * (dPi[static_cast<size_t>(j)] - dot) * scale;
                    if (ds == 0.0) continue;
                    const double* kj = lc.k.row(j) + off;
                    double* dkj = dk.row(j) + off;
                    for (int t = 0; t < dh; ++t) {
                        dqi[t] += ds * kj[t];
                        dkj[t] += ds * qi[t];
                    }
                }
            }
        }

        Mat da(n, d);
        matmul_at_acc(lc.a, dq, gL.wq);
        add_colsum(dq, gL.bq);
        matmul_bt_acc(dq, L.wq, da);
        matmul_at_acc(lc.a, dk, gL.wk);
        add_colsum(dk, gL.bk);
        matmul_bt_acc(dk, L.wk, da);
        matmul_at_acc(lc.a, dv, gL.wv);
        add_colsum(dv, gL.bv);
        matmul_bt_acc(dv, L.wv, da);

        Mat dx_in;
        layernorm_bwd(da, L.ln1_g, lc.ln1, dx_in, gL.ln1_g, gL.ln1_b);
        for (size_t t = 0; t < dx_in.a.size(); ++t) dx_in.a[t] += dx_mid.a[t];  // residual
        dx = std::move(dx_in);
    }

    for (int i = 0; i < n; ++i) {
        const double* dxi = dx.row(i);
        double* te = g.token_emb.row(ids[static_cast<size_t>(i)]);
        double* pe = g.pos_emb.row(i);
        double* ae = g.addr_emb.row(flags[static_cast<size_t>(i)] ? 1 : 0);
        for (int j = 0; j < d; ++j) {
            te[j] += dxi[j];
            pe[j] += dxi[j];
            ae[j] += dxi[j];
        }
    }
}

// teacher-forcing layout: feed context + response[:-1]; rows
// [|context|-1, n) predict the response tokens, EOS last.
struct TfSequence {
    std::vector<int> ids;
    std::vector<uint8_t> flags;
    int first_target;
    std::vector<int> targets;
};

inline TfSequence tf_sequence(const EncodedInstance& enc) {
    if (enc.context_ids.empty()) throw DataError("model: empty context");
    if (enc.response_ids.empty()) throw DataError("model: empty response");
    TfSequence s;
    s.ids = enc.context_ids;
    s.ids.insert(s.ids.end(), enc.response_ids.begin(), enc.response_ids.end() - 1);
    s.flags.assign(s.ids.size(), 0);
    std::copy(enc.addressee_flags.begin(), enc.addressee_flags.end(), s.flags.begin());
    s.first_target = static_cast<int>(enc.context_ids.size()) - 1;
    s.targets = enc.response_ids;
    return s;
}

inline void log_softmax_row(const double* logits, int v, double* out) {
    double mx = logits[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits[j]);
    double z = 0;
    for (int j = 0; j < v; ++j) z += std::exp(logits[j] - mx);
    double lz = mx + std::log(z);
    for (int j = 0; j < v; ++j) out[j] = logits[j] - lz;
}

}  // namespace detail

// log p(w_i | w_<i, context, flags) for each response token including EOS
inline std::vector<double> response_token_logprobs(const GeneratorParams& p,
                                                   const EncodedInstance& enc) {
    auto s = detail::tf_sequence(enc);
    Mat logits = detail::run_forward(p, s.ids, s.flags, s.first_target, nullptr);
    const int V = p.cfg.vocab_size;
    std::vector<double> lp(static_cast<size_t>(V));
    std::vector<double> out;
    out.reserve(s.targets.size());
    for (size_t ti = 0; ti < s.targets.size(); ++ti) {
        int row = s.first_target + static_cast<int>(ti);
        detail::log_softmax_row(logits.row(row), V, lp.data());
        out.push_back(lp[static_cast<size_t>(s.targets[ti])]);
    }
    return out;
}

inline double response_loglik(const GeneratorParams& p, const EncodedInstance& enc) {
    auto lps = response_token_logprobs(p, enc);
    double s = 0;
    for (double v : lps) s += v;
    return s;
}

struct LossGrads {
    double loss = 0;
    long token_count = 0;
    GeneratorParams grads;
};

// mean NLL per response token over the batch, with gradients from
// reverse-mode differentiation of the same graph; instances are processed
// in order, so accumulation is deterministic.
inline LossGrads loss_and_grads(const GeneratorParams& p,
                                const std::vector<EncodedInstance>& batch) {
    if (batch.empty()) throw DataError("loss_and_grads: empty batch");
    LossGrads out;
    out.grads = zero_like(p);
    long total_tokens = 0;
    for (const auto& enc : batch) total_tokens += static_cast<long>(enc.response_ids.size());
    out.token_count = total_tokens;

    const int V = p.cfg.vocab_size;
    std::vector<double> lp(static_cast<size_t>(V));
    double nll_sum = 0;
    for (const auto& enc : batch) {
        auto s = detail::tf_sequence(enc);
        detail::ForwardCache cache;
        Mat logits = detail::run_forward(p, s.ids, s.flags, s.first_target, &cache);
        const int n = static_cast<int>(s.ids.size());
        Mat dlogits(n, V);
        for (size_t ti = 0; ti < s.targets.size(); ++ti) {
            int row = s.first_target + static_cast<int>(ti);
            detail::log_softmax_row(logits.row(row), V, lp.data());
            int tgt = s.targets[ti];
            nll_sum -= lp[static_cast<size_t>(tgt)];
            double* dl = dlogits.row(row);
            double w = 1.0 / static_cast<double>(total_tokens);
            for (int j = 0; j < V; ++j) dl[j] = std::exp(lp[static_cast<size_t>(j)]) * w;
            dl[tgt] -= w;
        }
        detail::run_backward(p, s.ids, s.flags, cache, dlogits, out.grads);
    }
    out.loss = nll_sum / static_cast<double>(total_tokens);
    return out;
}

inline double batch_loss(const GeneratorParams& p, const std::vector<EncodedInstance>& batch) {
    if (batch.empty()) throw DataError("batch_loss: empty batch");
    double nll_sum = 0;
    long total_tokens = 0;
    for (const auto& enc : batch) {
        nll_sum -= response_loglik(p, enc);
        total_tokens += static_cast<long>(enc.response_ids.size());
    }
    return nll_sum / static_cast<double>(total_tokens);
}

// logits for every position; test and inspection surface
inline Mat forward_logits(const GeneratorParams& p, const std::vector<int>& ids,
                          const std::vector<uint8_t>& flags) {
    return detail::run_forward(p, ids, flags, 0, nullptr);
}

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    long step = 0;
    GeneratorParams m, v;
};

inline AdamState make_adam_state(const GeneratorParams& p) {
    AdamState s;
    s.m = zero_like(p);
    s.v = zero_like(p);
    return s;
}

// bias-corrected adaptive moment update; rejects non-finite gradients
inline void optimizer_step(GeneratorParams& p, const GeneratorParams& grads, AdamState& state,
                           const AdamHyper& h) {
    auto gb = named_blocks(const_cast<GeneratorParams&>(grads));
    for (auto& [name, m] : gb)
        if (!all_finite(*m)) throw NumericError("optimizer_step: non-finite gradient in " + name);

    state.step += 1;
    double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    auto pb = named_blocks(p);
    auto mb = named_blocks(state.m);
    auto vb = named_blocks(state.v);
    for (size_t i = 0; i < pb.size(); ++i) {
        Mat& w = *pb[i].second;
        const Mat& g = *gb[i].second;
        Mat& m = *mb[i].second;
        Mat& v = *vb[i].second;
        for (size_t t = 0; t < w.a.size(); ++t) {
            m.a[t] = h.beta1 * m.a[t] + (1.0 - h.beta1) * g.a[t];
            v.a[t] = h.beta2 * v.a[t] + (1.0 - h.beta2) * g.a[t] * g.a[t];
            double mhat = m.a[t] / bc1;
            double vhat = v.a[t] / bc2;
            w.a[t] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

inline double global_grad_norm(const GeneratorParams& grads) {
    double s = 0;
    for (auto& [name, m] : named_blocks(grads))
        for (double v : m->a) s += v * v;
    return std::sqrt(s);
}

inline void scale_grads(GeneratorParams& grads, double factor) {
    for (auto& [name, m] : named_blocks(grads))
        for (double& v : m->a) v *= factor;
}

// argmax decoding over the context prompt; PAD masked, ties to the lowest
// token id, stops at EOS (not included in the output) or max_len.
inline std::vector<int> greedy_decode(const GeneratorParams& p, std::vector<int> ids,
                                      std::vector<uint8_t> flags, int max_len) {
    std::vector<int> out;
    const int V = p.cfg.vocab_size;
    for (int step = 0; step < max_len; ++step) {
        if (static_cast<int>(ids.size()) >= p.cfg.max_seq_len) break;
        Mat logits = detail::run_forward(p, ids, flags, static_cast<int>(ids.size()) - 1, nullptr);
        const double* row = logits.row(static_cast<int>(ids.size()) - 1);
        int best = -1;
        double best_v = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < V; ++j) {
            if (j == Vocabulary::kPad) continue;
            if (row[j] > best_v) {
                best_v = row[j];
                best = j;
            }
        }
        if (best == Vocabulary::kEos) break;
        out.push_back(best);
        ids.push_back(best);
        flags.push_back(0);
    }
    return out;
}

// raw log-probability of a given continuation under the model
inline double sequence_logprob(const GeneratorParams& p, const std::vector<int>& ctx_ids,
                               const std::vector<uint8_t>& ctx_flags,
                               const std::vector<int>& continuation) {
    EncodedInstance enc;
    enc.context_ids = ctx_ids;
    enc.addressee_flags = ctx_flags;
    enc.response_ids = continuation;
    enc.response_ids.push_back(Vocabulary::kEos);
    return response_loglik(p, enc);
}

// length-normalized beam search; beam=1 reproduces greedy_decode exactly
inline std::vector<int> beam_decode(const GeneratorParams& p, const std::vector<int>& ctx_ids,
                                    const std::vector<uint8_t>& ctx_flags, int max_len,
                                    int beam_width) {
    if (beam_width < 1) throw DataError("beam_decode: beam must be >= 1");
    struct Hyp {
        std::vector<int> toks;
        double logp = 0;
        bool done = false;
        double norm() const {
            size_t len = toks.size() + (done ? 1 : 0);  // EOS counts toward length
            return logp / static_cast<double>(len < 1 ? 1 : len);
        }
    };
    const int V = p.cfg.vocab_size;
    std::vector<Hyp> beam{Hyp{}};
    std::vector<Hyp> finished;
    for (int step = 0; step < max_len; ++step) {
        std::vector<Hyp> expanded;
        for (const Hyp& h : beam) {
            if (h.done) continue;
            std::vector<int> ids = ctx_ids;
            ids.insert(ids.end(), h.toks.begin(), h.toks.end());
            if (static_cast<int>(ids.size()) >= p.cfg.max_seq_len) {
                finished.push_back(h);
                continue;
            }
            std::vector<uint8_t> flags = ctx_flags;
            flags.resize(ids.size(), 0);
            Mat logits =
                detail::run_forward(p, ids, flags, static_cast<int>(ids.size()) - 1, nullptr);
            std::vector<double> lp(static_cast<size_t>(V));
            detail::log_softmax_row(logits.row(static_cast<int>(ids.size()) - 1), V, lp.data());
            for (int j = 0; j < V; ++j) {
                if (j == Vocabulary::kPad) continue;
                Hyp nh = h;
                nh.logp += lp[static_cast<size_t>(j)];
                if (j == Vocabulary::kEos) {
                    nh.done = true;
                } else {
                    nh.toks.push_back(j);
                }
                expanded.push_back(std::move(nh));
            }
        }
        if (expanded.empty()) break;
        // stable order: higher raw logp first; the stable sort keeps the
        // lowest-token-id expansion first among exact ties
        std::stable_sort(expanded.begin(), expanded.end(),
                         [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
        beam.clear();
        int taken = 0;
        for (auto& h : expanded) {
            if (taken++ >= beam_width) break;
            if (h.done)
                finished.push_back(std::move(h));
            else
                beam.push_back(std::move(h));
        }
        if (beam.empty()) break;
    }
    for (auto& h : beam) finished.push_back(h);
    if (finished.empty()) return {};
    const Hyp* best = &finished[0];
    for (const auto& h : finished)
        if (h.norm() > best->norm()) best = &h;
    return best->toks;
}

}  // namespace mpem::model
