#pragma once

#include <cmath>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "ssum/core.hpp"
#include "ssum/linalg.hpp"
#include "ssum/lora.hpp"
#include "ssum/rng.hpp"

namespace ssum {

// Decoder-only policy: frozen linear audio encoder, trainable projector,
// frozen transformer backbone with trainable LoRA adapters on the attention
// query/value weights, trainable output head. RMSNorm pre-norm blocks,
// learned positions, ReLU MLP.
struct ModelConfig {
    Vocab vocab;
    int d_audio = 24;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int max_ctx = 256;
    int lora_rank = 16;
    double lora_alpha = 32.0;
    u64 init_seed = 1;

    int d_ff() const { return 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        vocab.validate();
        if (d_audio < 1 || d_model < 1 || n_layers < 1 || max_ctx < 4)
            throw ConfigError("model dimensions must be positive");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("d_model must be divisible by n_heads");
        if (lora_rank < 1 || lora_rank > d_model) throw ConfigError("lora rank out of range");
        if (lora_alpha <= 0.0) throw ConfigError("lora alpha must be positive");
    }

    bool operator==(const ModelConfig& o) const {
        return vocab.size == o.vocab.size && vocab.pad == o.vocab.pad && vocab.bos == o.vocab.bos &&
               vocab.eos == o.vocab.eos && vocab.sep == o.vocab.sep && d_audio == o.d_audio &&
               d_model == o.d_model && n_layers == o.n_layers && n_heads == o.n_heads &&
               max_ctx == o.max_ctx && lora_rank == o.lora_rank && lora_alpha == o.lora_alpha;
    }
};

struct ParamGroup {
    std::string name;
    Mat w;
    bool frozen = false;
};

// Group order is fixed; checkpoints, gradients and optimizer state all use it.
class ModelParams {
  public:
    static constexpr int kEncoder = 0;
    static constexpr int kProjector = 1;
    static constexpr int kTokEmb = 2;
    static constexpr int kPosEmb = 3;
    static constexpr int kPerLayer = 10;
    // per-layer offsets
    static constexpr int kWq = 0, kWk = 1, kWv = 2, kWo = 3;
    static constexpr int kLoraQA = 4, kLoraQB = 5, kLoraVA = 6, kLoraVB = 7;
    static constexpr int kW1 = 8, kW2 = 9;

    ModelParams() = default;

    static ModelParams init(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.cfg_ = cfg;
        const std::size_t d = cfg.d_model;
        const std::size_t da = cfg.d_audio;
        const std::size_t V = cfg.vocab.size;
        const std::size_t r = cfg.lora_rank;
        const std::size_t dff = cfg.d_ff();
        const double wstd = 1.0 / std::sqrt(static_cast<double>(d));

        auto grp = [&](const std::string& name, Mat w, bool frozen) {
            p.groups_.push_back({name, std::move(w), frozen});
        };
        auto rng_for = [&](std::size_t idx) { return Rng(mix_seed(cfg.init_seed, idx, 0)); };

        std::size_t gi = 0;
        {
            Rng r0 = rng_for(gi++);
            grp("encoder", Mat::gaussian(d, da, 1.0 / std::sqrt(static_cast<double>(da)), r0), true);
        }
        gi++;
        grp("projector", Mat::identity(d), false);
        {
            Rng r2 = rng_for(gi++);
            grp("tok_emb", Mat::gaussian(V, d, 1.0, r2), true);
        }
        {
            Rng r3 = rng_for(gi++);
            grp("pos_emb", Mat::gaussian(cfg.max_ctx, d, 0.3, r3), true);
        }
        for (int l = 0; l < cfg.n_layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            for (const char* nm : {"wq", "wk", "wv", "wo"}) {
                Rng rr = rng_for(gi++);
                grp(pre + nm, Mat::gaussian(d, d, wstd, rr), true);
            }
            for (const char* nm : {"lora_q.A", "lora_v.A"}) {
                Rng rr = rng_for(gi++);
                Mat A(r, d);
                for (double& v : A.a) v = rr.uniform(-wstd, wstd);
                grp(pre + nm, std::move(A), false);
                grp(pre + std::string(nm).substr(0, 7) + ".B", Mat(d, r), false);
                gi++;
            }
            {
                Rng rr = rng_for(gi++);
                grp(pre + "w1", Mat::gaussian(dff, d, wstd, rr), true);
            }
            {
                Rng rr = rng_for(gi++);
                grp(pre + "w2", Mat::gaussian(d, dff, 1.0 / std::sqrt(static_cast<double>(dff)), rr),
                    true);
            }
        }
        {
            Rng rh = rng_for(gi++);
            grp("head", Mat::gaussian(V, d, wstd, rh), false);
        }
        return p;
    }

    const ModelConfig& cfg() const { return cfg_; }
    u64 version() const { return version_; }
    void bump_version() { ++version_; }

    std::size_t num_groups() const { return groups_.size(); }
    const ParamGroup& group(std::size_t i) const { return groups_[i]; }
    // Mutation is reserved for initialization, test setup and the optimizer.
    ParamGroup& mutable_group(std::size_t i) { return groups_[i]; }

    std::size_t layer_base(int layer) const { return 4 + static_cast<std::size_t>(layer) * kPerLayer; }

    const Mat& encoder() const { return groups_[kEncoder].w; }
    const Mat& projector() const { return groups_[kProjector].w; }
    const Mat& tok_emb() const { return groups_[kTokEmb].w; }
    const Mat& pos_emb() const { return groups_[kPosEmb].w; }
    const Mat& head() const { return groups_.back().w; }
    std::size_t head_index() const { return groups_.size() - 1; }
    const Mat& layer_w(int layer, int off) const { return groups_[layer_base(layer) + off].w; }

    LoraAdapter lora_q(int layer) const {
        return {layer_w(layer, kLoraQA), layer_w(layer, kLoraQB), cfg_.lora_alpha, cfg_.lora_rank};
    }
    LoraAdapter lora_v(int layer) const {
        return {layer_w(layer, kLoraVA), layer_w(layer, kLoraVB), cfg_.lora_alpha, cfg_.lora_rank};
    }

    std::size_t find_group(const std::string& name) const {
        for (std::size_t i = 0; i < groups_.size(); ++i)
            if (groups_[i].name == name) return i;
        throw ConfigError("no such parameter group: " + name);
    }

  private:
    friend ModelParams make_params_from_groups(ModelConfig, std::vector<ParamGroup>);
    ModelConfig cfg_;
    std::vector<ParamGroup> groups_;
    u64 version_ = 0;
};

inline ModelParams make_params_from_groups(ModelConfig cfg, std::vector<ParamGroup> groups) {
    ModelParams p;
    p.cfg_ = std::move(cfg);
    p.groups_ = std::move(groups);
    return p;
}

// Gradients aligned with the parameter groups; frozen groups hold no slot.
struct Gradients {
    std::vector<Mat> g;

    static Gradients zeros_like(const ModelParams& p) {
        Gradients gr;
        gr.g.resize(p.num_groups());
        for (std::size_t i = 0; i < p.num_groups(); ++i)
            if (!p.group(i).frozen) gr.g[i] = Mat(p.group(i).w.rows, p.group(i).w.cols);
        return gr;
    }

    void add(const Gradients& o) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!g[i].empty())
                for (std::size_t k = 0; k < g[i].size(); ++k) g[i].a[k] += o.g[i].a[k];
    }

    void scale(double s) {
        for (Mat& m : g)
            for (double& v : m.a) v *= s;
    }

    double max_abs() const {
        double m = 0.0;
        for (const Mat& mm : g)
            for (double v : mm.a) m = std::max(m, std::abs(v));
        return m;
    }

    bool finite() const {
        for (const Mat& mm : g)
            if (!all_finite(mm.a)) return false;
        return true;
    }
};

// Conditioning context: prefix (projected audio frames or prefix-token
// embeddings), SEP, query tokens, then tokens generated so far.
struct Context {
    std::optional<AudioFrames> audio;
    TokenSeq text_prefix;
    TokenSeq query;
    TokenSeq generated;

    std::size_t prefix_len() const {
        return audio ? audio->num_frames() : text_prefix.size();
    }
    std::size_t total_len() const { return prefix_len() + 1 + query.size() + generated.size(); }
    // row of the first generated token
    std::size_t gen_base() const { return prefix_len() + 1 + query.size(); }

    static Context for_input(const PairedInput& in, TokenSeq gen = {}) {
        Context c;
        c.audio = in.audio;
        c.query = in.query;
        c.generated = std::move(gen);
        return c;
    }

    static Context for_text(TokenSeq prefix, TokenSeq query, TokenSeq gen = {}) {
        Context c;
        c.text_prefix = std::move(prefix);
        c.query = std::move(query);
        c.generated = std::move(gen);
        return c;
    }
};

inline void validate_context(const ModelParams& p, const Context& ctx) {
    const ModelConfig& cfg = p.cfg();
    if (ctx.total_len() > static_cast<std::size_t>(cfg.max_ctx))
        throw LengthError("context exceeds max length");
    if (ctx.audio && ctx.audio->dim() != static_cast<std::size_t>(cfg.d_audio))
        throw ShapeError("audio feature dim mismatch");
    validate_seq(cfg.vocab, ctx.text_prefix, "prefix");
    validate_seq(cfg.vocab, ctx.query, "query");
    for (Token t : ctx.generated)
        if (!cfg.vocab.contains(t)) throw VocabError("generated token out of vocab");
}

// projector(encoder(frames)), row-wise.
inline Mat project_audio(const AudioFrames& frames, const ModelParams& p) {
    frames.validate();
    if (frames.dim() != p.encoder().cols) throw ShapeError("project_audio: frame dim mismatch");
    const std::size_t F = frames.num_frames();
    const std::size_t d = p.encoder().rows;
    Mat out(F, d);
    Vec enc(d);
    for (std::size_t i = 0; i < F; ++i) {
        matvec(p.encoder(), frames.frames.row_span(i), enc);
        matvec(p.projector(), enc, out.row_span(i));
    }
    return out;
}

namespace detail {

constexpr double kRmsEps = 1e-8;

inline void rmsnorm(std::span<const double> x, std::span<double> y) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms = ms / static_cast<double>(x.size()) + kRmsEps;
    const double inv = 1.0 / std::sqrt(ms);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv;
}

// d(rmsnorm)/dx given the pre-norm input x and upstream dy; accumulates into dx.
inline void rmsnorm_backward(std::span<const double> x, std::span<const double> dy,
                             std::span<double> dx) {
    const std::size_t n = x.size();
    double ms = 0.0, xdy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ms += x[i] * x[i];
        xdy += x[i] * dy[i];
    }
    ms = ms / static_cast<double>(n) + kRmsEps;
    const double inv = 1.0 / std::sqrt(ms);
    const double c = xdy * inv * inv * inv / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * inv - c * x[i];
}

}  // namespace detail

struct LayerActs {
    Mat x_in;       // block input
    Mat ln1_out;
    Mat q, k, v;    // effective projections
    std::vector<Mat> attw;  // per head, T x T, row t holds weights over 0..t
    Mat attn_out;   // concatenated heads, pre-Wo
    Mat x_mid;      // after attention residual
    Mat ln2_out;
    Mat ff_pre;     // pre-ReLU
};

struct Activations {
    std::size_t T = 0, P = 0;
    Mat enc_out;    // encoder outputs for audio prefixes (projector backward)
    Mat emb;        // embeddings incl. positions
    std::vector<LayerActs> layers;
    Mat x_final;
    Mat lnf_out;
    Mat logits;     // T x V
};

// Full-sequence forward pass recording every activation needed by backward().
inline Activations forward_collect(const ModelParams& p, const Context& ctx) {
    validate_context(p, ctx);
    const ModelConfig& cfg = p.cfg();
    const std::size_t d = cfg.d_model;
    const std::size_t T = ctx.total_len();
    if (T == 0) throw LengthError("empty context");
    const std::size_t P = ctx.prefix_len();
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Activations acts;
    acts.T = T;
    acts.P = P;
    acts.emb = Mat(T, d);

    // prefix rows
    if (ctx.audio) {
        acts.enc_out = Mat(P, d);
        for (std::size_t i = 0; i < P; ++i) {
            matvec(p.encoder(), ctx.audio->frames.row_span(i), acts.enc_out.row_span(i));
            matvec(p.projector(), acts.enc_out.row_span(i), acts.emb.row_span(i));
        }
    } else {
        for (std::size_t i = 0; i < P; ++i) {
            const double* e = p.tok_emb().row(ctx.text_prefix[i]);
            std::memcpy(acts.emb.row(i), e, d * sizeof(double));
        }
    }
    // SEP, query, generated rows
    std::size_t pos = P;
    auto put_token = [&](Token t) {
        std::memcpy(acts.emb.row(pos), p.tok_emb().row(t), d * sizeof(double));
        ++pos;
    };
    put_token(cfg.vocab.sep);
    for (Token t : ctx.query) put_token(t);
    for (Token t : ctx.generated) put_token(t);
    // learned positions
    for (std::size_t t = 0; t < T; ++t) {
        const double* pe = p.pos_emb().row(t);
        double* r = acts.emb.row(t);
        for (std::size_t j = 0; j < d; ++j) r[j] += pe[j];
    }

    Mat x = acts.emb;
    acts.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerActs& A = acts.layers[l];
        A.x_in = x;
        A.ln1_out = Mat(T, d);
        for (std::size_t t = 0; t < T; ++t)
            detail::rmsnorm(A.x_in.row_span(t), A.ln1_out.row_span(t));

        const Mat wq_eff = lora_effective(p.layer_w(l, ModelParams::kWq), p.lora_q(l));
        const Mat wv_eff = lora_effective(p.layer_w(l, ModelParams::kWv), p.lora_v(l));
        const Mat& wk = p.layer_w(l, ModelParams::kWk);

        A.q = Mat(T, d);
        A.k = Mat(T, d);
        A.v = Mat(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            matvec(wq_eff, A.ln1_out.row_span(t), A.q.row_span(t));
            matvec(wk, A.ln1_out.row_span(t), A.k.row_span(t));
            matvec(wv_eff, A.ln1_out.row_span(t), A.v.row_span(t));
        }

        A.attw.assign(H, Mat(T, T));
        A.attn_out = Mat(T, d);
        std::vector<double> scores;
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            Mat& W = A.attw[h];
            for (std::size_t t = 0; t < T; ++t) {
                scores.assign(t + 1, 0.0);
                const double* qt = A.q.row(t) + off;
                for (std::size_t u = 0; u <= t; ++u) {
                    const double* ku = A.k.row(u) + off;
                    double s = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) s += qt[j] * ku[j];
                    scores[u] = s * inv_sqrt_dh;
                }
                softmax_inplace(scores);
                double* wrow = W.row(t);
                double* ot = A.attn_out.row(t) + off;
                for (std::size_t u = 0; u <= t; ++u) {
                    wrow[u] = scores[u];
                    const double* vu = A.v.row(u) + off;
                    for (std::size_t j = 0; j < dh; ++j) ot[j] += scores[u] * vu[j];
                }
            }
        }

        A.x_mid = Mat(T, d);
        const Mat& wo = p.layer_w(l, ModelParams::kWo);
        Vec tmp(d);
        for (std::size_t t = 0; t < T; ++t) {
            matvec(wo, A.attn_out.row_span(t), tmp);
            const double* xin = A.x_in.row(t);
            double* xm = A.x_mid.row(t);
            for (std::size_t j = 0; j < d; ++j) xm[j] = xin[j] + tmp[j];
        }

        A.ln2_out = Mat(T, d);
        for (std::size_t t = 0; t < T; ++t)
            detail::rmsnorm(A.x_mid.row_span(t), A.ln2_out.row_span(t));

        const Mat& w1 = p.layer_w(l, ModelParams::kW1);
        const Mat& w2 = p.layer_w(l, ModelParams::kW2);
        const std::size_t dff = cfg.d_ff();
        A.ff_pre = Mat(T, dff);
        x = Mat(T, d);
        Vec mid(dff);
        for (std::size_t t = 0; t < T; ++t) {
            matvec(w1, A.ln2_out.row_span(t), A.ff_pre.row_span(t));
            for (std::size_t j = 0; j < dff; ++j) mid[j] = std::max(0.0, A.ff_pre(t, j));
            matvec(w2, mid, x.row_span(t));
            const double* xm = A.x_mid.row(t);
            double* xr = x.row(t);
            for (std::size_t j = 0; j < d; ++j) xr[j] += xm[j];
        }
    }

    acts.x_final = std::move(x);
    acts.lnf_out = Mat(T, d);
    for (std::size_t t = 0; t < T; ++t)
        detail::rmsnorm(acts.x_final.row_span(t), acts.lnf_out.row_span(t));

    const Mat& head = p.head();
    acts.logits = Mat(T, head.rows);
    for (std::size_t t = 0; t < T; ++t) matvec(head, acts.lnf_out.row_span(t), acts.logits.row_span(t));
    return acts;
}

// Next-token logits at the final position.
inline Vec forward_logits(const ModelParams& p, const Context& ctx) {
    Activations acts = forward_collect(p, ctx);
    const std::size_t last = acts.T - 1;
    return Vec(acts.logits.row(last), acts.logits.row(last) + acts.logits.cols);
}

// Backprop from per-position logit gradients. Parameter gradients accumulate
// only for trainable groups; activation gradients still flow through frozen
// weights.
inline Gradients backward(const ModelParams& p, const Context& ctx, const Activations& acts,
                          const Mat& dlogits) {
    const ModelConfig& cfg = p.cfg();
    const std::size_t T = acts.T;
    const std::size_t d = cfg.d_model;
    const std::size_t V = cfg.vocab.size;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    if (dlogits.rows != T || dlogits.cols != V) throw ShapeError("backward: dlogits shape");

    Gradients g = Gradients::zeros_like(p);
    Mat& g_head = g.g[p.head_index()];

    // head + final norm
    Mat dx(T, d);
    {
        const Mat& head = p.head();
        Vec dln(d);
        for (std::size_t t = 0; t < T; ++t) {
            const double* dl = dlogits.row(t);
            bool active = false;
            for (std::size_t z = 0; z < V; ++z)
                if (dl[z] != 0.0) { active = true; break; }
            if (!active) continue;
            outer_acc(g_head, dlogits.row_span(t), acts.lnf_out.row_span(t));
            std::fill(dln.begin(), dln.end(), 0.0);
            tmatvec_acc(head, dlogits.row_span(t), dln);
            detail::rmsnorm_backward(acts.x_final.row_span(t), dln, dx.row_span(t));
        }
    }

    Vec dmid(cfg.d_ff()), dln(d), tmp(d);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerActs& A = acts.layers[l];
        const Mat& w1 = p.layer_w(l, ModelParams::kW1);
        const Mat& w2 = p.layer_w(l, ModelParams::kW2);
        const Mat& wo = p.layer_w(l, ModelParams::kWo);
        const Mat& wk = p.layer_w(l, ModelParams::kWk);
        const Mat wq_eff = lora_effective(p.layer_w(l, ModelParams::kWq), p.lora_q(l));
        const Mat wv_eff = lora_effective(p.layer_w(l, ModelParams::kWv), p.lora_v(l));

        // MLP block: dx is d(loss)/d(block output); residual passes through.
        Mat dx_mid(T, d);
        const std::size_t dff = cfg.d_ff();
        for (std::size_t t = 0; t < T; ++t) {
            std::fill(dmid.begin(), dmid.end(), 0.0);
            tmatvec_acc(w2, dx.row_span(t), dmid);
            const double* pre = A.ff_pre.row(t);
            for (std::size_t j = 0; j < dff; ++j)
                if (pre[j] <= 0.0) dmid[j] = 0.0;
            std::fill(dln.begin(), dln.end(), 0.0);
            tmatvec_acc(w1, dmid, dln);
            double* dm = dx_mid.row(t);
            const double* dxt = dx.row(t);
            for (std::size_t j = 0; j < d; ++j) dm[j] = dxt[j];
            detail::rmsnorm_backward(A.x_mid.row_span(t), dln, dx_mid.row_span(t));
        }

        // attention block
        Mat dattn(T, d);
        Mat dx_in(T, d);
        for (std::size_t t = 0; t < T; ++t) {
            std::fill(dattn.row(t), dattn.row(t) + d, 0.0);
            tmatvec_acc(wo, dx_mid.row_span(t), dattn.row_span(t));
            std::memcpy(dx_in.row(t), dx_mid.row(t), d * sizeof(double));
        }

        Mat dq(T, d), dk(T, d), dv(T, d);
        std::vector<double> dw(T), ds(T);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            const Mat& W = A.attw[h];
            for (std::size_t t = 0; t < T; ++t) {
                const double* dat = dattn.row(t) + off;
                const double* wrow = W.row(t);
                double wsum = 0.0;
                for (std::size_t u = 0; u <= t; ++u) {
                    const double* vu = A.v.row(u) + off;
                    double s = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) s += dat[j] * vu[j];
                    dw[u] = s;
                    wsum += wrow[u] * s;
                    double* dvu = dv.row(u) + off;
                    for (std::size_t j = 0; j < dh; ++j) dvu[j] += wrow[u] * dat[j];
                }
                double* dqt = dq.row(t) + off;
                for (std::size_t u = 0; u <= t; ++u) {
                    ds[u] = wrow[u] * (dw[u] - wsum);
                    if (ds[u] == 0.0) continue;
                    const double* ku = A.k.row(u) + off;
                    const double c = ds[u] * inv_sqrt_dh;
                    for (std::size_t j = 0; j < dh; ++j) dqt[j] += c * ku[j];
                    double* dku = dk.row(u) + off;
                    const double* qt = A.q.row(t) + off;
                    for (std::size_t j = 0; j < dh; ++j) dku[j] += c * qt[j];
                }
            }
        }

        // projection weights; only the LoRA factors are trainable.
        Mat dwq(d, d), dwv(d, d);
        for (std::size_t t = 0; t < T; ++t) {
            outer_acc(dwq, dq.row_span(t), A.ln1_out.row_span(t));
            outer_acc(dwv, dv.row_span(t), A.ln1_out.row_span(t));
            std::fill(dln.begin(), dln.end(), 0.0);
            tmatvec_acc(wq_eff, dq.row_span(t), dln);
            tmatvec_acc(wk, dk.row_span(t), dln);
            tmatvec_acc(wv_eff, dv.row_span(t), dln);
            detail::rmsnorm_backward(A.x_in.row_span(t), dln, dx_in.row_span(t));
        }

        const std::size_t base = p.layer_base(l);
        const double s = cfg.lora_alpha / cfg.lora_rank;
        auto lora_grads = [&](const Mat& dweff, const Mat& Amat, const Mat& Bmat, Mat& gA, Mat& gB) {
            // dA = s * B^T dWeff ; dB = s * dWeff A^T
            for (std::size_t i = 0; i < gA.rows; ++i)
                for (std::size_t j = 0; j < gA.cols; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < d; ++k) acc += Bmat(k, i) * dweff(k, j);
                    gA(i, j) += s * acc;
                }
            for (std::size_t i = 0; i < gB.rows; ++i)
                for (std::size_t j = 0; j < gB.cols; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < d; ++k) acc += dweff(i, k) * Amat(j, k);
                    gB(i, j) += s * acc;
                }
        };
        lora_grads(dwq, p.layer_w(l, ModelParams::kLoraQA), p.layer_w(l, ModelParams::kLoraQB),
                   g.g[base + ModelParams::kLoraQA], g.g[base + ModelParams::kLoraQB]);
        lora_grads(dwv, p.layer_w(l, ModelParams::kLoraVA), p.layer_w(l, ModelParams::kLoraVB),
                   g.g[base + ModelParams::kLoraVA], g.g[base + ModelParams::kLoraVB]);

        dx = std::move(dx_in);
    }

    // embedding rows: audio prefix flows into the projector.
    if (ctx.audio) {
        Mat& g_proj = g.g[ModelParams::kProjector];
        for (std::size_t i = 0; i < acts.P; ++i)
            outer_acc(g_proj, dx.row_span(i), acts.enc_out.row_span(i));
    }
    return g;
}

struct LogProbResult {
    std::vector<double> per_token;
    double total = 0.0;
};

// Per-token log-probabilities of a continuation under the audio-conditioned
// policy: total = sum_t log softmax(logits_<t)[y_t].
inline LogProbResult log_prob(const ModelParams& p, const PairedInput& input,
                              const TokenSeq& continuation) {
    if (continuation.empty()) throw InputError("log_prob: empty continuation");
    for (Token t : continuation)
        if (!p.cfg().vocab.contains(t)) throw VocabError("log_prob: token out of vocab");
    Context ctx = Context::for_input(input, continuation);
    Activations acts = forward_collect(p, ctx);
    const std::size_t base = ctx.gen_base();
    LogProbResult r;
    r.per_token.resize(continuation.size());
    for (std::size_t t = 0; t < continuation.size(); ++t) {
        const auto row = acts.logits.row_span(base - 1 + t);
        const double lse = logsumexp(row);
        r.per_token[t] = row[continuation[t]] - lse;
        r.total += r.per_token[t];
    }
    return r;
}

// Incremental decoder with cached keys/values; logits match the full forward
// pass position-for-position.
class Decoder {
  public:
    explicit Decoder(const ModelParams& p) : p_(p), cfg_(p.cfg()) {
        for (int l = 0; l < cfg_.n_layers; ++l) {
            wq_.push_back(lora_effective(p.layer_w(l, ModelParams::kWq), p.lora_q(l)));
            wv_.push_back(lora_effective(p.layer_w(l, ModelParams::kWv), p.lora_v(l)));
        }
        kcache_.assign(cfg_.n_layers, Mat(cfg_.max_ctx, cfg_.d_model));
        vcache_.assign(cfg_.n_layers, Mat(cfg_.max_ctx, cfg_.d_model));
        logits_.resize(cfg_.vocab.size);
    }

    // Feeds prefix + SEP + query (+ any pre-existing generated tokens).
    void start(const Context& ctx) {
        validate_context(p_, ctx);
        pos_ = 0;
        const std::size_t P = ctx.prefix_len();
        Vec row(cfg_.d_model);
        if (ctx.audio) {
            Vec enc(cfg_.d_model);
            for (std::size_t i = 0; i < P; ++i) {
                matvec(p_.encoder(), ctx.audio->frames.row_span(i), enc);
                matvec(p_.projector(), enc, row);
                feed_row(row);
            }
        } else {
            for (Token t : ctx.text_prefix) feed_token_row(t, row);
        }
        feed_token_row(cfg_.vocab.sep, row);
        for (Token t : ctx.query) feed_token_row(t, row);
        for (Token t : ctx.generated) feed_token_row(t, row);
    }

    void feed(Token t) {
        if (pos_ >= static_cast<std::size_t>(cfg_.max_ctx)) throw LengthError("context exhausted");
        Vec row(cfg_.d_model);
        feed_token_row(t, row);
    }

    std::size_t positions() const { return pos_; }
    std::size_t remaining() const { return cfg_.max_ctx - pos_; }
    std::span<const double> logits() const { return logits_; }

  private:
    void feed_token_row(Token t, Vec& scratch) {
        std::memcpy(scratch.data(), p_.tok_emb().row(t), cfg_.d_model * sizeof(double));
        feed_row(scratch);
    }

    void feed_row(std::span<const double> emb) {
        const std::size_t d = cfg_.d_model;
        const std::size_t H = cfg_.n_heads;
        const std::size_t dh = cfg_.head_dim();
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        if (pos_ >= static_cast<std::size_t>(cfg_.max_ctx)) throw LengthError("context exhausted");

        Vec x(d);
        const double* pe = p_.pos_emb().row(pos_);
        for (std::size_t j = 0; j < d; ++j) x[j] = emb[j] + pe[j];

        Vec a(d), q(d), attn(d), tmp(d);
        std::vector<double> scores;
        for (int l = 0; l < cfg_.n_layers; ++l) {
            detail::rmsnorm(x, a);
            matvec(wq_[l], a, q);
            matvec(p_.layer_w(l, ModelParams::kWk), a, kcache_[l].row_span(pos_));
            matvec(wv_[l], a, vcache_[l].row_span(pos_));

            std::fill(attn.begin(), attn.end(), 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t off = h * dh;
                scores.assign(pos_ + 1, 0.0);
                for (std::size_t u = 0; u <= pos_; ++u) {
                    const double* ku = kcache_[l].row(u) + off;
                    double s = 0.0;
                    for (std::size_t j = 0; j < dh; ++j) s += q[off + j] * ku[j];
                    scores[u] = s * inv_sqrt_dh;
                }
                softmax_inplace(scores);
                for (std::size_t u = 0; u <= pos_; ++u) {
                    const double* vu = vcache_[l].row(u) + off;
                    for (std::size_t j = 0; j < dh; ++j) attn[off + j] += scores[u] * vu[j];
                }
            }
            matvec(p_.layer_w(l, ModelParams::kWo), attn, tmp);
            for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];

            detail::rmsnorm(x, a);
            const Mat& w1 = p_.layer_w(l, ModelParams::kW1);
            const Mat& w2 = p_.layer_w(l, ModelParams::kW2);
            Vec mid(cfg_.d_ff());
            matvec(w1, a, mid);
            for (double& v : mid) v = std::max(0.0, v);
            matvec(w2, mid, tmp);
            for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];
        }
        detail::rmsnorm(x, a);
        matvec(p_.head(), a, logits_);
        ++pos_;
    }

    const ModelParams& p_;
    const ModelConfig& cfg_;
    std::vector<Mat> wq_, wv_;
    std::vector<Mat> kcache_, vcache_;
    Vec logits_;
    std::size_t pos_ = 0;
};

}  // namespace ssum
