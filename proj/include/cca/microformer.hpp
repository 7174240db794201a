#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cca/errors.hpp"
#include "cca/grid_layout.hpp"
#include "cca/io.hpp"
#include "cca/mask.hpp"
#include "cca/rng.hpp"
#include "cca/rope.hpp"

namespace cca {

// Tiny autoregressive decoder. All math in 64-bit floats, single-threaded and
// bit-deterministic given the seed. Pre-norm residual blocks: LN -> rotary
// multi-head attention, LN -> 4x GELU MLP, final LN, tied to nothing.

struct ModelConfig {
    int layers = 1;
    int heads = 1;
    int d_model = 8;
    int vocab = 2;
    double rope_base = 10000.0;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / heads; }

    void validate() const {
        require(layers >= 1, "ModelConfig: layers must be >= 1");
        require(heads >= 1, "ModelConfig: heads must be >= 1");
        require(d_model >= 2 && d_model % heads == 0,
                "ModelConfig: d_model must be a positive multiple of heads");
        require(d_model / heads >= 2 && (d_model / heads) % 2 == 0,
                "ModelConfig: head dim must be even and >= 2");
        require(vocab >= 2, "ModelConfig: vocab must be >= 2");
    }
};

// Parameter matrix with a paired gradient buffer.
struct Param {
    std::vector<double> w;
    std::vector<double> g;
    int rows = 0;
    int cols = 0;

    void resize(int r, int c) {
        rows = r;
        cols = c;
        w.assign(std::size_t(r) * c, 0.0);
        g.assign(std::size_t(r) * c, 0.0);
    }
    std::size_t size() const { return w.size(); }
};

struct LayerParams {
    Param ln1_g, ln1_b;
    Param wq, wk, wv, wo;
    Param ln2_g, ln2_b;
    Param w1, b1, w2, b2;
};

struct NamedParam {
    std::string name;
    Param* p;
};

struct MicroModel {
    ModelConfig cfg;
    RopeParams rope;
    Param embed;        // vocab x d_model
    std::vector<LayerParams> layers;
    Param lnf_g, lnf_b; // final layer norm
    Param wu, bu;       // unembedding d_model x vocab, bias zero-initialized

    explicit MicroModel(const ModelConfig& config) : cfg(config) {
        cfg.validate();
        rope = RopeParams::make(cfg.head_dim(), cfg.rope_base);
        const int d = cfg.d_model;
        const int f = 4 * d;
        embed.resize(cfg.vocab, d);
        layers.resize(std::size_t(cfg.layers));
        for (auto& l : layers) {
            l.ln1_g.resize(1, d);
            l.ln1_b.resize(1, d);
            l.wq.resize(d, d);
            l.wk.resize(d, d);
            l.wv.resize(d, d);
            l.wo.resize(d, d);
            l.ln2_g.resize(1, d);
            l.ln2_b.resize(1, d);
            l.w1.resize(d, f);
            l.b1.resize(1, f);
            l.w2.resize(f, d);
            l.b2.resize(1, d);
        }
        lnf_g.resize(1, d);
        lnf_b.resize(1, d);
        wu.resize(d, cfg.vocab);
        bu.resize(1, cfg.vocab);
        init_weights();
    }

    // Fixed registry order; checkpoints, Adam and the gradient check iterate it.
    std::vector<NamedParam> params() {
        std::vector<NamedParam> out;
        out.push_back({"embed", &embed});
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            auto& lp = layers[l];
            out.push_back({prefix + "ln1_g", &lp.ln1_g});
            out.push_back({prefix + "ln1_b", &lp.ln1_b});
            out.push_back({prefix + "wq", &lp.wq});
            out.push_back({prefix + "wk", &lp.wk});
            out.push_back({prefix + "wv", &lp.wv});
            out.push_back({prefix + "wo", &lp.wo});
            out.push_back({prefix + "ln2_g", &lp.ln2_g});
            out.push_back({prefix + "ln2_b", &lp.ln2_b});
            out.push_back({prefix + "w1", &lp.w1});
            out.push_back({prefix + "b1", &lp.b1});
            out.push_back({prefix + "w2", &lp.w2});
            out.push_back({prefix + "b2", &lp.b2});
        }
        out.push_back({"lnf_g", &lnf_g});
        out.push_back({"lnf_b", &lnf_b});
        out.push_back({"wu", &wu});
        out.push_back({"bu", &bu});
        return out;
    }

    void zero_grad() {
        for (auto& np : params()) std::fill(np.p->g.begin(), np.p->g.end(), 0.0);
    }

private:
    // Gaussian std 0.02 for projections and embeddings; layer-norm gains 1,
    // every bias 0 (including the unembedding bias).
    void init_weights() {
        Rng rng(derive_seed(cfg.seed, 0x1217));
        auto gauss = [&](Param& p) {
            for (auto& x : p.w) x = rng.gaussian(0.0, 0.02);
        };
        auto ones = [](Param& p) { std::fill(p.w.begin(), p.w.end(), 1.0); };
        gauss(embed);
        for (auto& l : layers) {
            ones(l.ln1_g);
            gauss(l.wq);
            gauss(l.wk);
            gauss(l.wv);
            gauss(l.wo);
            ones(l.ln2_g);
            gauss(l.w1);
            gauss(l.w2);
        }
        ones(lnf_g);
        gauss(wu);
    }
};

// Head-averaged attention probabilities of one layer for one sequence.
struct AttnRecord {
    int layer = 0;
    int size = 0;
    std::vector<double> probs; // row-major size*size

    double at(int i, int j) const { return probs[std::size_t(i) * size + j]; }
};

struct ForwardResult {
    int seq_len = 0;
    int vocab = 0;
    std::vector<double> logits; // row-major seq_len*vocab
    std::vector<AttnRecord> records;

    std::span<const double> row(int i) const {
        return {logits.data() + std::size_t(i) * vocab, std::size_t(vocab)};
    }
};

struct TrainExample {
    std::vector<int> tokens;
    int answer_pos = 0;
    int label = 0;
};

namespace detail {

constexpr double kLnEps = 1e-5;

// Per-sequence activations kept for the backward pass.
struct LayerActs {
    std::vector<double> xhat1, a;         // L*D
    std::vector<double> inv_std1;         // L
    std::vector<double> qrot, krot, v;    // L*D (head blocks rotated in place)
    std::vector<double> probs;            // H*L*L
    std::vector<double> ctx;              // L*D
    std::vector<double> x_mid;            // L*D
    std::vector<double> xhat2, b_out;     // L*D
    std::vector<double> inv_std2;         // L
    std::vector<double> h1, u;            // L*F
    std::vector<double> x_out;            // L*D
};

struct Acts {
    int seq_len = 0;
    std::vector<double> x0;               // L*D
    std::vector<LayerActs> layers;
    std::vector<double> xhatf, y;         // L*D
    std::vector<double> inv_stdf;         // L
    std::vector<double> logits;           // L*V
};

// out[L x cols] = in[L x rows] * w[rows x cols]
inline void matmul(std::span<const double> in, const Param& w, std::span<double> out, int L) {
    for (int i = 0; i < L; ++i) {
        const double* xi = in.data() + std::size_t(i) * w.rows;
        double* oi = out.data() + std::size_t(i) * w.cols;
        std::fill(oi, oi + w.cols, 0.0);
        for (int r = 0; r < w.rows; ++r) {
            const double xv = xi[r];
            const double* wr = w.w.data() + std::size_t(r) * w.cols;
            for (int c = 0; c < w.cols; ++c) oi[c] += xv * wr[c];
        }
    }
}

inline void add_bias(std::span<double> x, const Param& b, int L) {
    for (int i = 0; i < L; ++i) {
        double* xi = x.data() + std::size_t(i) * b.cols;
        for (int c = 0; c < b.cols; ++c) xi[c] += b.w[std::size_t(c)];
    }
}

// d_in += d_out * w^T ; w.g += in^T * d_out ; b.g += colsum(d_out)
inline void matmul_backward(std::span<const double> in, Param& w, Param* b,
                            std::span<const double> d_out, std::span<double> d_in, int L) {
    for (int i = 0; i < L; ++i) {
        const double* xi = in.data() + std::size_t(i) * w.rows;
        const double* doi = d_out.data() + std::size_t(i) * w.cols;
        double* dii = d_in.data() + std::size_t(i) * w.rows;
        for (int r = 0; r < w.rows; ++r) {
            const double* wr = w.w.data() + std::size_t(r) * w.cols;
            double* gr = w.g.data() + std::size_t(r) * w.cols;
            const double xv = xi[r];
            double acc = 0.0;
            for (int c = 0; c < w.cols; ++c) {
                acc += doi[c] * wr[c];
                gr[c] += xv * doi[c];
            }
            dii[r] += acc;
        }
        if (b != nullptr)
            for (int c = 0; c < w.cols; ++c) b->g[std::size_t(c)] += doi[c];
    }
}

inline void layernorm(std::span<const double> x, const Param& g, const Param& b,
                      std::span<double> xhat, std::span<double> inv_std, std::span<double> out,
                      int L, int D) {
    for (int i = 0; i < L; ++i) {
        const double* xi = x.data() + std::size_t(i) * D;
        double mu = 0.0;
        for (int c = 0; c < D; ++c) mu += xi[c];
        mu /= D;
        double var = 0.0;
        for (int c = 0; c < D; ++c) var += (xi[c] - mu) * (xi[c] - mu);
        var /= D;
        const double is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[std::size_t(i)] = is;
        double* xh = xhat.data() + std::size_t(i) * D;
        double* oi = out.data() + std::size_t(i) * D;
        for (int c = 0; c < D; ++c) {
            xh[c] = (xi[c] - mu) * is;
            oi[c] = g.w[std::size_t(c)] * xh[c] + b.w[std::size_t(c)];
        }
    }
}

inline void layernorm_backward(std::span<const double> d_out, std::span<const double> xhat,
                               std::span<const double> inv_std, Param& g, Param& b,
                               std::span<double> d_in, int L, int D) {
    for (int i = 0; i < L; ++i) {
        const double* doi = d_out.data() + std::size_t(i) * D;
        const double* xh = xhat.data() + std::size_t(i) * D;
        double* dii = d_in.data() + std::size_t(i) * D;
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (int c = 0; c < D; ++c) {
            const double dxh = doi[c] * g.w[std::size_t(c)];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[c];
            g.g[std::size_t(c)] += doi[c] * xh[c];
            b.g[std::size_t(c)] += doi[c];
        }
        mean_dxhat /= D;
        mean_dxhat_xhat /= D;
        const double is = inv_std[std::size_t(i)];
        for (int c = 0; c < D; ++c) {
            const double dxh = doi[c] * g.w[std::size_t(c)];
            dii[c] += (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat) * is;
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

// Forward through every layer, filling acts. Attention applies RoPE to Q/K at
// the map's positions and visibility per the mask; softmax is max-subtracted
// and masked entries are exactly zero.
inline void forward_acts(const MicroModel& model, std::span<const int> tokens,
                         const PositionMap& map, const AttentionMask& mask, Acts& acts) {
    const auto& cfg = model.cfg;
    const int L = int(tokens.size());
    require(L >= 1, "forward: empty token sequence");
    require(map.size() == L, "forward: position map length mismatch");
    require(mask.size == L, "forward: mask length mismatch");
    const int D = cfg.d_model;
    const int H = cfg.heads;
    const int dh = cfg.head_dim();
    const int F = 4 * D;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    acts.seq_len = L;
    acts.x0.assign(std::size_t(L) * D, 0.0);
    for (int i = 0; i < L; ++i) {
        const int tok = tokens[std::size_t(i)];
        require(tok >= 0 && tok < cfg.vocab, "forward: token id out of vocab range");
        std::memcpy(acts.x0.data() + std::size_t(i) * D,
                    model.embed.w.data() + std::size_t(tok) * D, sizeof(double) * std::size_t(D));
    }

    acts.layers.resize(std::size_t(cfg.layers));
    std::vector<double> x = acts.x0;
    for (int l = 0; l < cfg.layers; ++l) {
        auto& la = acts.layers[std::size_t(l)];
        const auto& lp = model.layers[std::size_t(l)];
        la.xhat1.assign(std::size_t(L) * D, 0.0);
        la.inv_std1.assign(std::size_t(L), 0.0);
        la.a.assign(std::size_t(L) * D, 0.0);
        layernorm(x, lp.ln1_g, lp.ln1_b, la.xhat1, la.inv_std1, la.a, L, D);

        la.qrot.assign(std::size_t(L) * D, 0.0);
        la.krot.assign(std::size_t(L) * D, 0.0);
        la.v.assign(std::size_t(L) * D, 0.0);
        matmul(la.a, lp.wq, la.qrot, L);
        matmul(la.a, lp.wk, la.krot, L);
        matmul(la.a, lp.wv, la.v, L);
        for (int i = 0; i < L; ++i) {
            const std::int64_t m = map.positions[std::size_t(i)];
            for (int h = 0; h < H; ++h) {
                rotate_inplace({la.qrot.data() + std::size_t(i) * D + std::size_t(h) * dh,
                                std::size_t(dh)},
                               m, model.rope);
                rotate_inplace({la.krot.data() + std::size_t(i) * D + std::size_t(h) * dh,
                                std::size_t(dh)},
                               m, model.rope);
            }
        }

        la.probs.assign(std::size_t(H) * L * L, 0.0);
        la.ctx.assign(std::size_t(L) * D, 0.0);
        std::vector<double> logits_row(std::size_t(L));
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < L; ++i) {
                const double* qi = la.qrot.data() + std::size_t(i) * D + std::size_t(h) * dh;
                double max_logit = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < L; ++j) {
                    if (!mask.at(i, j)) continue;
                    const double* kj = la.krot.data() + std::size_t(j) * D + std::size_t(h) * dh;
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    logits_row[std::size_t(j)] = acc * inv_sqrt_dh;
                    max_logit = std::max(max_logit, logits_row[std::size_t(j)]);
                }
                require(std::isfinite(max_logit), "forward: query row has no visible key");
                double* pij = la.probs.data() + (std::size_t(h) * L + std::size_t(i)) * L;
                double denom = 0.0;
                for (int j = 0; j < L; ++j) {
                    if (!mask.at(i, j)) continue;
                    pij[j] = std::exp(logits_row[std::size_t(j)] - max_logit);
                    denom += pij[j];
                }
                double* ci = la.ctx.data() + std::size_t(i) * D + std::size_t(h) * dh;
                for (int j = 0; j < L; ++j) {
                    if (!mask.at(i, j)) continue;
                    pij[j] /= denom;
                    const double* vj = la.v.data() + std::size_t(j) * D + std::size_t(h) * dh;
                    for (int c = 0; c < dh; ++c) ci[c] += pij[j] * vj[c];
                }
            }
        }

        la.x_mid.assign(std::size_t(L) * D, 0.0);
        matmul(la.ctx, lp.wo, la.x_mid, L); // attn output, residual added next
        for (std::size_t idx = 0; idx < la.x_mid.size(); ++idx) la.x_mid[idx] += x[idx];

        la.xhat2.assign(std::size_t(L) * D, 0.0);
        la.inv_std2.assign(std::size_t(L), 0.0);
        la.b_out.assign(std::size_t(L) * D, 0.0);
        layernorm(la.x_mid, lp.ln2_g, lp.ln2_b, la.xhat2, la.inv_std2, la.b_out, L, D);

        la.h1.assign(std::size_t(L) * F, 0.0);
        matmul(la.b_out, lp.w1, la.h1, L);
        add_bias(la.h1, lp.b1, L);
        la.u.assign(std::size_t(L) * F, 0.0);
        for (std::size_t idx = 0; idx < la.h1.size(); ++idx) la.u[idx] = gelu(la.h1[idx]);

        la.x_out.assign(std::size_t(L) * D, 0.0);
        matmul(la.u, lp.w2, la.x_out, L);
        add_bias(la.x_out, lp.b2, L);
        for (std::size_t idx = 0; idx < la.x_out.size(); ++idx) la.x_out[idx] += la.x_mid[idx];
        x = la.x_out;
    }

    acts.xhatf.assign(std::size_t(L) * D, 0.0);
    acts.inv_stdf.assign(std::size_t(L), 0.0);
    acts.y.assign(std::size_t(L) * D, 0.0);
    layernorm(x, model.lnf_g, model.lnf_b, acts.xhatf, acts.inv_stdf, acts.y, L, D);
    acts.logits.assign(std::size_t(L) * cfg.vocab, 0.0);
    matmul(acts.y, model.wu, acts.logits, L);
    add_bias(acts.logits, model.bu, L);
}

// Backward for one sequence given d(logits). Accumulates into model gradients.
inline void backward_acts(MicroModel& model, std::span<const int> tokens, const PositionMap& map,
                          const AttentionMask& mask, const Acts& acts,
                          std::span<const double> d_logits) {
    const auto& cfg = model.cfg;
    const int L = acts.seq_len;
    const int D = cfg.d_model;
    const int H = cfg.heads;
    const int dh = cfg.head_dim();
    const int F = 4 * D;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    std::vector<double> dy(std::size_t(L) * D, 0.0);
    matmul_backward(acts.y, model.wu, &model.bu, d_logits, dy, L);
    std::vector<double> dx(std::size_t(L) * D, 0.0);
    layernorm_backward(dy, acts.xhatf, acts.inv_stdf, model.lnf_g, model.lnf_b, dx, L, D);

    std::vector<double> d_bout(std::size_t(L) * D);
    std::vector<double> dh1(std::size_t(L) * F);
    std::vector<double> du(std::size_t(L) * F);
    std::vector<double> dctx(std::size_t(L) * D);
    std::vector<double> dqrot(std::size_t(L) * D);
    std::vector<double> dkrot(std::size_t(L) * D);
    std::vector<double> dv(std::size_t(L) * D);
    std::vector<double> da(std::size_t(L) * D);
    std::vector<double> dp_row(std::size_t(L));

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto& la = acts.layers[std::size_t(l)];
        auto& lp = model.layers[std::size_t(l)];
        const std::vector<double>& x_in = (l == 0) ? acts.x0 : acts.layers[std::size_t(l - 1)].x_out;

        // MLP branch: dx is d(x_out); residual passes it to x_mid too.
        std::fill(du.begin(), du.end(), 0.0);
        matmul_backward(la.u, lp.w2, &lp.b2, dx, du, L);
        for (std::size_t idx = 0; idx < du.size(); ++idx)
            dh1[idx] = du[idx] * gelu_grad(la.h1[idx]);
        std::fill(d_bout.begin(), d_bout.end(), 0.0);
        matmul_backward(la.b_out, lp.w1, &lp.b1, dh1, d_bout, L);
        // dx now accumulates d(x_mid)
        layernorm_backward(d_bout, la.xhat2, la.inv_std2, lp.ln2_g, lp.ln2_b, dx, L, D);

        // Attention branch: dx is d(x_mid); residual passes it to x_in too.
        std::fill(dctx.begin(), dctx.end(), 0.0);
        matmul_backward(la.ctx, lp.wo, nullptr, dx, dctx, L);

        std::fill(dqrot.begin(), dqrot.end(), 0.0);
        std::fill(dkrot.begin(), dkrot.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < L; ++i) {
                const double* pij = la.probs.data() + (std::size_t(h) * L + std::size_t(i)) * L;
                const double* dci = dctx.data() + std::size_t(i) * D + std::size_t(h) * dh;
                double pdp = 0.0;
                for (int j = 0; j < L; ++j) {
                    if (!mask.at(i, j)) {
                        dp_row[std::size_t(j)] = 0.0;
                        continue;
                    }
                    const double* vj = la.v.data() + std::size_t(j) * D + std::size_t(h) * dh;
                    double* dvj = dv.data() + std::size_t(j) * D + std::size_t(h) * dh;
                    double acc = 0.0;
                    for (int c = 0; c < dh; ++c) {
                        acc += dci[c] * vj[c];
                        dvj[c] += pij[j] * dci[c];
                    }
                    dp_row[std::size_t(j)] = acc;
                    pdp += pij[j] * acc;
                }
                const double* qi = la.qrot.data() + std::size_t(i) * D + std::size_t(h) * dh;
                double* dqi = dqrot.data() + std::size_t(i) * D + std::size_t(h) * dh;
                for (int j = 0; j < L; ++j) {
                    if (!mask.at(i, j)) continue;
                    const double ds = pij[j] * (dp_row[std::size_t(j)] - pdp) * inv_sqrt_dh;
                    const double* kj = la.krot.data() + std::size_t(j) * D + std::size_t(h) * dh;
                    double* dkj = dkrot.data() + std::size_t(j) * D + std::size_t(h) * dh;
                    for (int c = 0; c < dh; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }
        // Undo the rotation: gradients rotate by -m (R is orthogonal).
        for (int i = 0; i < L; ++i) {
            const std::int64_t m = map.positions[std::size_t(i)];
            for (int h = 0; h < H; ++h) {
                rotate_inplace({dqrot.data() + std::size_t(i) * D + std::size_t(h) * dh,
                                std::size_t(dh)},
                               -m, model.rope);
                rotate_inplace({dkrot.data() + std::size_t(i) * D + std::size_t(h) * dh,
                                std::size_t(dh)},
                               -m, model.rope);
            }
        }

        std::fill(da.begin(), da.end(), 0.0);
        matmul_backward(la.a, lp.wq, nullptr, dqrot, da, L);
        matmul_backward(la.a, lp.wk, nullptr, dkrot, da, L);
        matmul_backward(la.a, lp.wv, nullptr, dv, da, L);
        // dx now accumulates d(x_in): residual + through-LN1 path
        layernorm_backward(da, la.xhat1, la.inv_std1, lp.ln1_g, lp.ln1_b, dx, L, D);
    }

    for (int i = 0; i < L; ++i) {
        const int tok = tokens[std::size_t(i)];
        double* ge = model.embed.g.data() + std::size_t(tok) * D;
        const double* dxi = dx.data() + std::size_t(i) * D;
        for (int c = 0; c < D; ++c) ge[c] += dxi[c];
    }
}

} // namespace detail

inline ForwardResult forward(const MicroModel& model, std::span<const int> tokens,
                             const PositionMap& map, const AttentionMask& mask) {
    detail::Acts acts;
    detail::forward_acts(model, tokens, map, mask, acts);
    ForwardResult result;
    result.seq_len = acts.seq_len;
    result.vocab = model.cfg.vocab;
    result.logits = std::move(acts.logits);
    const int L = result.seq_len;
    const int H = model.cfg.heads;
    result.records.reserve(std::size_t(model.cfg.layers));
    for (int l = 0; l < model.cfg.layers; ++l) {
        AttnRecord rec;
        rec.layer = l;
        rec.size = L;
        rec.probs.assign(std::size_t(L) * L, 0.0);
        const auto& probs = acts.layers[std::size_t(l)].probs;
        for (int h = 0; h < H; ++h)
            for (std::size_t idx = 0; idx < rec.probs.size(); ++idx)
                rec.probs[idx] += probs[std::size_t(h) * L * L + idx];
        for (auto& p : rec.probs) p /= H;
        result.records.push_back(std::move(rec));
    }
    return result;
}

// Mean cross-entropy over the batch at each example's answer position, with
// gradients accumulated into the model's buffers (zeroed first).
inline double loss_and_grad(MicroModel& model, std::span<const TrainExample> batch,
                            const PositionMap& map, const AttentionMask& mask) {
    require(!batch.empty(), "loss_and_grad: empty batch");
    model.zero_grad();
    const int vocab = model.cfg.vocab;
    double total_loss = 0.0;
    detail::Acts acts;
    std::vector<double> d_logits;
    std::vector<double> prob(std::size_t(vocab));
    for (const auto& ex : batch) {
        const int L = int(ex.tokens.size());
        require(ex.answer_pos >= 0 && ex.answer_pos < L, "loss_and_grad: bad answer position");
        require(ex.label >= 0 && ex.label < vocab, "loss_and_grad: bad label");
        detail::forward_acts(model, ex.tokens, map, mask, acts);
        const double* row = acts.logits.data() + std::size_t(ex.answer_pos) * vocab;
        double mx = row[0];
        for (int c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < vocab; ++c) {
            prob[std::size_t(c)] = std::exp(row[c] - mx);
            denom += prob[std::size_t(c)];
        }
        total_loss += std::log(denom) - (row[ex.label] - mx);
        d_logits.assign(std::size_t(L) * vocab, 0.0);
        double* drow = d_logits.data() + std::size_t(ex.answer_pos) * vocab;
        const double inv_batch = 1.0 / double(batch.size());
        for (int c = 0; c < vocab; ++c) drow[c] = prob[std::size_t(c)] / denom * inv_batch;
        drow[ex.label] -= inv_batch;
        detail::backward_acts(model, ex.tokens, map, mask, acts, d_logits);
    }
    return total_loss / double(batch.size());
}

struct TrainConfig {
    double lr = 1e-3;
    long steps = 1000;
    int batch_size = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainResult {
    MicroModel model;
    std::vector<double> loss_history;
};

// Adam on the full parameter registry. Bit-deterministic given cfg.seed; the
// batch stream is derived from it. Throws divergence_error on NaN loss.
inline TrainResult train(const ModelConfig& cfg, std::span<const TrainExample> dataset,
                         const PositionMap& map, const AttentionMask& mask,
                         const TrainConfig& hyper) {
    require(!dataset.empty(), "train: empty dataset");
    require(hyper.steps >= 0, "train: negative step count");
    require(hyper.batch_size >= 1, "train: batch_size must be >= 1");
    TrainResult result{MicroModel(cfg), {}};
    MicroModel& model = result.model;
    auto params = model.params();

    std::vector<std::vector<double>> adam_m;
    std::vector<std::vector<double>> adam_v;
    for (auto& np : params) {
        adam_m.emplace_back(np.p->size(), 0.0);
        adam_v.emplace_back(np.p->size(), 0.0);
    }

    Rng batch_rng(derive_seed(cfg.seed, 0x6A7C));
    std::vector<TrainExample> batch(std::size_t(hyper.batch_size));
    result.loss_history.reserve(std::size_t(hyper.steps));
    for (long step = 0; step < hyper.steps; ++step) {
        for (auto& slot : batch)
            slot = dataset[std::size_t(batch_rng.uniform_int(0, std::int64_t(dataset.size()) - 1))];
        const double loss = loss_and_grad(model, batch, map, mask);
        if (!std::isfinite(loss)) throw divergence_error("train: non-finite loss", step);
        result.loss_history.push_back(loss);

        const double bc1 = 1.0 - std::pow(hyper.beta1, double(step + 1));
        const double bc2 = 1.0 - std::pow(hyper.beta2, double(step + 1));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Param& p = *params[pi].p;
            auto& m = adam_m[pi];
            auto& v = adam_v[pi];
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double g = p.g[k];
                m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g;
                v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g;
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p.w[k] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian flat binary. Header: magic 'CCAM', version u32,
// layers/heads/d_model/vocab as i32, rope_base f64, seed u64; then every
// parameter in registry order as f64.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace detail {
constexpr std::uint32_t kCheckpointMagic = 0x4D414343u; // "CCAM" in file order
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put_raw(std::string& out, const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out.append(p, sizeof(T));
}

template <class T>
T get_raw(const std::string& in, std::size_t& off) {
    require(off + sizeof(T) <= in.size(), "checkpoint: truncated file");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}
} // namespace detail

inline void save_checkpoint(MicroModel& model, const std::filesystem::path& path) {
    std::string out;
    detail::put_raw(out, detail::kCheckpointMagic);
    detail::put_raw(out, detail::kCheckpointVersion);
    detail::put_raw(out, std::int32_t(model.cfg.layers));
    detail::put_raw(out, std::int32_t(model.cfg.heads));
    detail::put_raw(out, std::int32_t(model.cfg.d_model));
    detail::put_raw(out, std::int32_t(model.cfg.vocab));
    detail::put_raw(out, model.cfg.rope_base);
    detail::put_raw(out, std::uint64_t(model.cfg.seed));
    for (auto& np : model.params())
        for (double w : np.p->w) detail::put_raw(out, w);
    write_file_atomic(path, out);
}

inline MicroModel load_checkpoint(const std::filesystem::path& path) {
    const std::string in = read_file(path);
    std::size_t off = 0;
    require(detail::get_raw<std::uint32_t>(in, off) == detail::kCheckpointMagic,
            "checkpoint: bad magic");
    require(detail::get_raw<std::uint32_t>(in, off) == detail::kCheckpointVersion,
            "checkpoint: unsupported version");
    ModelConfig cfg;
    cfg.layers = detail::get_raw<std::int32_t>(in, off);
    cfg.heads = detail::get_raw<std::int32_t>(in, off);
    cfg.d_model = detail::get_raw<std::int32_t>(in, off);
    cfg.vocab = detail::get_raw<std::int32_t>(in, off);
    cfg.rope_base = detail::get_raw<double>(in, off);
    cfg.seed = detail::get_raw<std::uint64_t>(in, off);
    MicroModel model(cfg);
    for (auto& np : model.params())
        for (auto& w : np.p->w) w = detail::get_raw<double>(in, off);
    require(off == in.size(), "checkpoint: trailing bytes");
    return model;
}

// ---------------------------------------------------------------------------
// Information flow: per visual token, the attention mass received from
// instruction-token queries, averaged over the dataset and reshaped to the
// sqrt(V) x sqrt(V) grid in raster cell order.
// ---------------------------------------------------------------------------

struct InfoFlowMap {
    int side = 0;
    std::vector<double> mass; // row-major side*side

    double at(int r, int c) const { return mass[std::size_t(r) * side + c]; }
};

// Aggregates records of the selected layer (first decoder layer by default).
inline InfoFlowMap info_flow(std::span<const AttnRecord> records, const SequenceSpec& seq,
                             int layer = 0) {
    const int L = seq.total_len();
    const int n = seq.grid.side;
    const int v = seq.grid.visual_count();
    const int p = seq.prefix_len;
    InfoFlowMap map{n, std::vector<double>(std::size_t(v), 0.0)};
    long used = 0;
    for (const auto& rec : records) {
        if (rec.layer != layer) continue;
        require(rec.size == L, "info_flow: record length does not match sequence spec");
        for (int i = p + v; i < L; ++i)
            for (int j = 0; j < v; ++j) map.mass[std::size_t(j)] += rec.at(i, p + j);
        ++used;
    }
    require(used > 0, "info_flow: no records for the requested layer");
    for (auto& m : map.mass) m /= double(used);
    return map;
}

} // namespace cca
