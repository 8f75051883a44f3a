#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ssum/model.hpp"
#include "ssum/rollout.hpp"

namespace ssum {

// Dense probability vector over the vocabulary. A zero entry means the token
// is outside the support (truncated teachers renormalize onto their top-K
// support before reaching the KD losses).
struct Distribution {
    Vec p;

    void validate() const {
        double s = 0.0;
        for (double v : p) {
            if (!(v >= 0.0)) throw NumericError("distribution entries must be >= 0");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw NumericError("distribution must sum to 1");
    }

    static Distribution uniform(std::size_t n) {
        Distribution d;
        d.p.assign(n, 1.0 / static_cast<double>(n));
        return d;
    }
};

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// -ln(sigmoid(x)), stable for large |x|.
inline double softplus_neg(double x) {
    if (x > 0.0) return std::log1p(std::exp(-x));
    return -x + std::log1p(std::exp(x));
}

// KL(p_T || p_S) = sum_z p_T(z) (ln p_T(z) - ln p_S(z)), with 0 ln 0 := 0.
inline double forward_kl(const Distribution& p_T, const Distribution& p_S) {
    if (p_T.p.size() != p_S.p.size()) throw ShapeError("forward_kl: length mismatch");
    double kl = 0.0;
    for (std::size_t z = 0; z < p_T.p.size(); ++z) {
        const double t = p_T.p[z];
        if (t == 0.0) continue;
        if (p_S.p[z] <= 0.0) throw SupportError("forward_kl: student has zero mass on teacher support");
        kl += t * (std::log(t) - std::log(p_S.p[z]));
    }
    return std::max(kl, 0.0);
}

struct KdConfig {
    enum class Reduction { Sum, Mean };
    Reduction reduction = Reduction::Sum;
    int top_k = 20;

    void validate() const {
        if (top_k < 1) throw ConfigError("kd top_k must be >= 1");
    }
};

struct DpoConfig {
    double beta = 0.1;

    void validate() const {
        if (!(beta > 0.0)) throw ConfigError("dpo beta must be positive");
    }
};

// Exact gradient of forward_kl(p_T, softmax(l)) w.r.t. the logits l, teacher
// fixed: softmax(l) - p_T. Entries sum to zero.
inline Vec kd_grad_wrt_logits(const Distribution& p_T, std::span<const double> logits) {
    if (p_T.p.size() != logits.size()) throw ShapeError("kd_grad_wrt_logits: length mismatch");
    Vec g = softmax(logits);
    for (std::size_t z = 0; z < g.size(); ++z) g[z] -= p_T.p[z];
    return g;
}

// Per-position KD objective on the teacher's support: the student softmax is
// restricted to {z : p_T(z) > 0} and renormalized, so a teacher equal to the
// student is an exact fixpoint even when truncated.
inline double kd_position_kl(const Distribution& p_T, std::span<const double> student_logits) {
    if (p_T.p.size() != student_logits.size()) throw ShapeError("kd_position_kl: length mismatch");
    const Vec s = softmax(student_logits);
    double m = 0.0;
    for (std::size_t z = 0; z < s.size(); ++z)
        if (p_T.p[z] > 0.0) m += s[z];
    if (m <= 0.0) throw SupportError("kd_position_kl: student mass vanished on support");
    double kl = 0.0;
    for (std::size_t z = 0; z < s.size(); ++z) {
        const double t = p_T.p[z];
        if (t == 0.0) continue;
        kl += t * (std::log(t) - std::log(s[z] / m));
    }
    return std::max(kl, 0.0);
}

// Per-position gradients below this max-norm are indistinguishable from
// double rounding noise (teacher and student renormalize along different
// arithmetic paths). They collapse to exact zero: without the floor, Adam's
// epsilon denominator amplifies the noise by lr/eps per step and a
// self-distillation fixpoint slowly walks away from itself.
inline constexpr double kKdGradNoiseFloor = 1e-13;

// Gradient of kd_position_kl w.r.t. the student logits: restricted softmax
// minus teacher on the support, zero elsewhere. Reduces to kd_grad_wrt_logits
// when the teacher has full support.
inline Vec kd_position_grad(const Distribution& p_T, std::span<const double> student_logits) {
    if (p_T.p.size() != student_logits.size()) throw ShapeError("kd_position_grad: length mismatch");
    const Vec s = softmax(student_logits);
    double m = 0.0;
    for (std::size_t z = 0; z < s.size(); ++z)
        if (p_T.p[z] > 0.0) m += s[z];
    if (m <= 0.0) throw SupportError("kd_position_grad: student mass vanished on support");
    Vec g(s.size(), 0.0);
    double gmax = 0.0;
    for (std::size_t z = 0; z < s.size(); ++z) {
        if (p_T.p[z] > 0.0) g[z] = s[z] / m - p_T.p[z];
        gmax = std::max(gmax, std::abs(g[z]));
    }
    if (gmax <= kKdGradNoiseFloor) std::fill(g.begin(), g.end(), 0.0);
    return g;
}

// Per-position forward KL along a sampled trajectory, reduced over the
// generated positions only; the prompt and query are never scored.
inline double kd_sequence_loss(const ModelParams& p, const Rollout& rollout,
                               std::span<const Distribution> teacher_dists,
                               const KdConfig& cfg = {}) {
    if (teacher_dists.size() != rollout.generated.size())
        throw AlignmentError("kd_sequence_loss: one teacher distribution per generated position");
    if (rollout.generated.empty()) return 0.0;
    Context ctx = Context::for_input(rollout.input, rollout.generated);
    Activations acts = forward_collect(p, ctx);
    const std::size_t base = ctx.gen_base();
    double total = 0.0;
    for (std::size_t t = 0; t < rollout.generated.size(); ++t)
        total += kd_position_kl(teacher_dists[t], acts.logits.row_span(base - 1 + t));
    if (cfg.reduction == KdConfig::Reduction::Mean)
        total /= static_cast<double>(rollout.generated.size());
    return total;
}

struct LossGrad {
    double loss = 0.0;
    Gradients grads;
};

// Stop-gradient estimate of the on-policy KD objective: the sampled
// sequences are treated as constants, so the estimate is the gradient of the
// mean kd_sequence_loss with the trajectories held fixed — equivalently the
// negated average of sum_z p_T(z) grad log p_S(z) over generated positions.
// Rollouts must come from the current parameter version.
inline LossGrad kd_gradient_estimate(const ModelParams& p, std::span<const Rollout> rollouts,
                                     std::span<const std::vector<Distribution>> teacher_dists,
                                     const KdConfig& cfg = {}) {
    if (rollouts.size() != teacher_dists.size())
        throw AlignmentError("kd_gradient_estimate: teacher distributions per rollout");
    LossGrad out;
    out.grads = Gradients::zeros_like(p);
    if (rollouts.empty()) return out;
    const std::size_t V = p.cfg().vocab.size;
    for (std::size_t r = 0; r < rollouts.size(); ++r) {
        const Rollout& ro = rollouts[r];
        if (ro.params_version != p.version())
            throw StalenessError("kd_gradient_estimate: rollout from stale parameter version");
        if (teacher_dists[r].size() != ro.generated.size())
            throw AlignmentError("kd_gradient_estimate: length mismatch at rollout " +
                                 std::to_string(r));
        if (ro.generated.empty()) continue;
        Context ctx = Context::for_input(ro.input, ro.generated);
        Activations acts = forward_collect(p, ctx);
        const std::size_t base = ctx.gen_base();
        const double w = cfg.reduction == KdConfig::Reduction::Mean
                             ? 1.0 / static_cast<double>(ro.generated.size())
                             : 1.0;
        Mat dlogits(acts.T, V);
        for (std::size_t t = 0; t < ro.generated.size(); ++t) {
            const auto row = acts.logits.row_span(base - 1 + t);
            out.loss += w * kd_position_kl(teacher_dists[r][t], row);
            const Vec g = kd_position_grad(teacher_dists[r][t], row);
            double* dst = dlogits.row(base - 1 + t);
            for (std::size_t z = 0; z < V; ++z) dst[z] = w * g[z];
        }
        out.grads.add(backward(p, ctx, acts, dlogits));
    }
    const double inv_n = 1.0 / static_cast<double>(rollouts.size());
    out.loss *= inv_n;
    out.grads.scale(inv_n);
    return out;
}

// Mean negative log-likelihood of the reference given (audio, query).
inline double sft_loss(const ModelParams& p, const PairedInput& input, const TokenSeq& reference) {
    if (reference.empty()) throw InputError("sft_loss: empty reference");
    if (!ends_with_eos(p.cfg().vocab, reference)) throw InputError("sft_loss: reference must end with EOS");
    const LogProbResult lp = log_prob(p, input, reference);
    return -lp.total / static_cast<double>(reference.size());
}

inline LossGrad sft_loss_grad(const ModelParams& p, const PairedInput& input,
                              const TokenSeq& reference) {
    if (reference.empty()) throw InputError("sft_loss_grad: empty reference");
    if (!ends_with_eos(p.cfg().vocab, reference))
        throw InputError("sft_loss_grad: reference must end with EOS");
    Context ctx = Context::for_input(input, reference);
    Activations acts = forward_collect(p, ctx);
    const std::size_t base = ctx.gen_base();
    const std::size_t V = p.cfg().vocab.size;
    const double w = 1.0 / static_cast<double>(reference.size());
    LossGrad out;
    Mat dlogits(acts.T, V);
    for (std::size_t t = 0; t < reference.size(); ++t) {
        const auto row = acts.logits.row_span(base - 1 + t);
        const Vec lsm = log_softmax(row);
        out.loss -= w * lsm[reference[t]];
        double* dst = dlogits.row(base - 1 + t);
        for (std::size_t z = 0; z < V; ++z) dst[z] = w * std::exp(lsm[z]);
        dst[reference[t]] -= w;
    }
    out.grads = backward(p, ctx, acts, dlogits);
    return out;
}

// -ln sigmoid(beta * ((lp+ - ref+) - (lp- - ref-))); >= 0, decreasing in the
// margin, ln 2 at zero margin.
inline double dpo_loss(double lp_plus, double lp_minus, double ref_lp_plus, double ref_lp_minus,
                       const DpoConfig& cfg = {}) {
    cfg.validate();
    const double margin = (lp_plus - ref_lp_plus) - (lp_minus - ref_lp_minus);
    return softplus_neg(cfg.beta * margin);
}

// Closed-form partials w.r.t. (lp_plus, lp_minus).
inline std::pair<double, double> dpo_loss_grad_lp(double lp_plus, double lp_minus,
                                                  double ref_lp_plus, double ref_lp_minus,
                                                  const DpoConfig& cfg = {}) {
    cfg.validate();
    const double margin = (lp_plus - ref_lp_plus) - (lp_minus - ref_lp_minus);
    const double s = logistic(-cfg.beta * margin);
    return {-cfg.beta * s, cfg.beta * s};
}

struct DpoPairGrad {
    double loss = 0.0;
    double margin = 0.0;  // beta-free implicit-reward margin
    Gradients grads;
};

// Full DPO gradient for one preference pair; the reference log-probs are
// constants computed once from the frozen reference policy.
inline DpoPairGrad dpo_pair_grad(const ModelParams& p, const PairedInput& input,
                                 const TokenSeq& y_plus, const TokenSeq& y_minus,
                                 double ref_lp_plus, double ref_lp_minus, const DpoConfig& cfg) {
    cfg.validate();
    if (y_plus.empty() || y_minus.empty()) throw InputError("dpo_pair_grad: empty hypothesis");
    const std::size_t V = p.cfg().vocab.size;

    DpoPairGrad out;
    double lps[2] = {0.0, 0.0};
    Context ctxs[2] = {Context::for_input(input, y_plus), Context::for_input(input, y_minus)};
    Activations acts[2];
    for (int i = 0; i < 2; ++i) {
        acts[i] = forward_collect(p, ctxs[i]);
        const std::size_t base = ctxs[i].gen_base();
        const TokenSeq& y = i == 0 ? y_plus : y_minus;
        for (std::size_t t = 0; t < y.size(); ++t) {
            const auto row = acts[i].logits.row_span(base - 1 + t);
            lps[i] += row[y[t]] - logsumexp(row);
        }
    }
    out.margin = (lps[0] - ref_lp_plus) - (lps[1] - ref_lp_minus);
    out.loss = softplus_neg(cfg.beta * out.margin);
    const auto [dplus, dminus] = dpo_loss_grad_lp(lps[0], lps[1], ref_lp_plus, ref_lp_minus, cfg);

    out.grads = Gradients::zeros_like(p);
    for (int i = 0; i < 2; ++i) {
        const double coef = i == 0 ? dplus : dminus;
        const TokenSeq& y = i == 0 ? y_plus : y_minus;
        const std::size_t base = ctxs[i].gen_base();
        Mat dlogits(acts[i].T, V);
        for (std::size_t t = 0; t < y.size(); ++t) {
            const auto row = acts[i].logits.row_span(base - 1 + t);
            const Vec sm = softmax(row);
            double* dst = dlogits.row(base - 1 + t);
            // d lp / d logits = onehot - softmax
            for (std::size_t z = 0; z < V; ++z) dst[z] = -coef * sm[z];
            dst[y[t]] += coef;
        }
        out.grads.add(backward(p, ctxs[i], acts[i], dlogits));
    }
    return out;
}

}  // namespace ssum
