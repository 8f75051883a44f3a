#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "ssum/losses.hpp"
#include "ssum/model.hpp"

namespace ssum {

// Sparse truncated next-token distribution as exposed by a teacher:
// (token, probability) entries in descending probability plus the mass left
// in the tail.
struct TopKDist {
    std::vector<std::pair<Token, double>> entries;
    double tail_mass = 0.0;

    void validate() const {
        double sum = tail_mass;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (!(entries[i].second > 0.0)) throw NumericError("top-k entry must be positive");
            if (i > 0 && entries[i].second > entries[i - 1].second + 1e-12)
                throw NumericError("top-k entries must be descending");
            for (std::size_t j = i + 1; j < entries.size(); ++j)
                if (entries[i].first == entries[j].first)
                    throw NumericError("top-k tokens must be distinct");
            sum += entries[i].second;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw NumericError("top-k mass must sum to 1");
    }
};

struct TeacherRequest {
    TokenSeq transcript;
    TokenSeq query;
    TokenSeq generated;
    int top_k = 20;
};

// dists[t] scores token t of `generated` given the transcript, the query and
// generated[0..t).
struct TeacherResponse {
    std::vector<TopKDist> dists;
};

class TeacherBackend {
  public:
    virtual ~TeacherBackend() = default;
    virtual TeacherResponse score(const TeacherRequest& req) = 0;
};

// K highest-probability entries (ties resolved toward the lower token id);
// the tail carries exactly the excluded mass.
inline TopKDist truncate_topk(const Distribution& full, int k) {
    if (k < 1) throw ConfigError("truncate_topk: K must be >= 1");
    std::vector<Token> idx(full.p.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](Token a, Token b) {
        if (full.p[a] != full.p[b]) return full.p[a] > full.p[b];
        return a < b;
    });
    TopKDist out;
    for (Token t : idx) {
        if (full.p[t] <= 0.0) break;
        if (out.entries.size() < static_cast<std::size_t>(k))
            out.entries.emplace_back(t, full.p[t]);
        else
            out.tail_mass += full.p[t];
    }
    return out;
}

// Probabilities scaled by 1/(1 - tail_mass); the result is a distribution
// restricted to the retained support.
inline TopKDist renormalize(const TopKDist& tk) {
    if (tk.entries.empty()) throw InputError("renormalize: empty support");
    if (tk.tail_mass >= 1.0 - 1e-12) throw DegenerateError("renormalize: tail mass is everything");
    const double scale = 1.0 / (1.0 - tk.tail_mass);
    TopKDist out;
    out.entries.reserve(tk.entries.size());
    for (const auto& [t, p] : tk.entries) out.entries.emplace_back(t, p * scale);
    out.tail_mass = 0.0;
    return out;
}

// Dense view over the vocabulary, zero off the support.
inline Distribution to_distribution(const TopKDist& tk, int vocab_size) {
    Distribution d;
    d.p.assign(vocab_size, 0.0);
    for (const auto& [t, p] : tk.entries) {
        if (t < 0 || t >= vocab_size) throw VocabError("top-k token out of vocab");
        d.p[t] = p;
    }
    return d;
}

// Next token under the scripted-teacher rule: take the longest suffix of the
// generated prefix that occurs as a contiguous substring of the reference
// (earliest occurrence wins, and an occurrence must leave a following token)
// and continue from there; with no match, start the reference over.
inline Token scripted_next(const TokenSeq& reference, std::span<const Token> prefix) {
    if (reference.empty()) throw InputError("scripted_next: empty reference");
    const std::size_t R = reference.size();
    const std::size_t maxlen = std::min(prefix.size(), R - 1);
    for (std::size_t len = maxlen;; --len) {
        for (std::size_t i = 0; i + len < R; ++i) {
            bool match = true;
            for (std::size_t j = 0; j < len; ++j) {
                if (reference[i + j] != prefix[prefix.size() - len + j]) {
                    match = false;
                    break;
                }
            }
            if (match) return reference[i + len];
        }
        if (len == 0) break;
    }
    return reference[0];
}

// Deterministic teacher bound to a single reference: mass 1-(V-1)*eps on the
// scripted next token, eps on every other token.
class ScriptedTeacher : public TeacherBackend {
  public:
    ScriptedTeacher(Vocab vocab, TokenSeq reference, double epsilon)
        : vocab_(vocab), reference_(std::move(reference)), epsilon_(epsilon) {
        vocab_.validate();
        validate_seq(vocab_, reference_, "reference");
        if (!ends_with_eos(vocab_, reference_))
            throw InputError("scripted teacher reference must end with EOS");
        if (!(epsilon_ > 0.0) || epsilon_ >= 1.0 / (vocab_.size - 1))
            throw ConfigError("scripted teacher epsilon out of range");
    }

    TeacherResponse score(const TeacherRequest& req) override {
        if (req.top_k < 1 || req.top_k > vocab_.size) throw InputError("top_k out of range");
        TeacherResponse resp;
        resp.dists.reserve(req.generated.size());
        for (std::size_t t = 0; t < req.generated.size(); ++t) {
            const std::span<const Token> prefix(req.generated.data(), t);
            const Token next = scripted_next(reference_, prefix);
            Distribution full;
            full.p.assign(vocab_.size, epsilon_);
            full.p[next] = 1.0 - (vocab_.size - 1) * epsilon_;
            resp.dists.push_back(truncate_topk(full, req.top_k));
        }
        return resp;
    }

    const TokenSeq& reference() const { return reference_; }

  private:
    Vocab vocab_;
    TokenSeq reference_;
    double epsilon_;
};

// Text-conditioned teacher backed by a trained policy of this project:
// prompt = transcript, SEP, query, SEP, generated prefix. Serves its own
// softmax truncated to top-K.
class ModelTeacher : public TeacherBackend {
  public:
    explicit ModelTeacher(ModelParams params) : params_(std::move(params)) {}

    TeacherResponse score(const TeacherRequest& req) override {
        const Vocab& v = params_.cfg().vocab;
        if (req.top_k < 1 || req.top_k > v.size) throw InputError("top_k out of range");
        TeacherResponse resp;
        if (req.generated.empty()) return resp;
        TokenSeq query_block = req.query;
        query_block.push_back(v.sep);
        Context ctx = Context::for_text(req.transcript, std::move(query_block), req.generated);
        Activations acts = forward_collect(params_, ctx);
        const std::size_t base = ctx.gen_base();
        resp.dists.reserve(req.generated.size());
        for (std::size_t t = 0; t < req.generated.size(); ++t) {
            Distribution full;
            full.p = softmax(acts.logits.row_span(base - 1 + t));
            resp.dists.push_back(truncate_topk(full, req.top_k));
        }
        return resp;
    }

    const ModelParams& params() const { return params_; }

  private:
    ModelParams params_;
};

// A teacher that mirrors the student itself: it rebuilds the student's audio
// context from the transcript (exact when audio synthesis is noiseless), so
// its top-K renormalized targets are a fixpoint of the KD objective.
class SelfTeacher : public TeacherBackend {
  public:
    using AudioFn = std::function<AudioFrames(const TokenSeq&)>;

    SelfTeacher(ModelParams params, AudioFn audio_fn)
        : params_(std::move(params)), audio_fn_(std::move(audio_fn)) {}

    TeacherResponse score(const TeacherRequest& req) override {
        TeacherResponse resp;
        if (req.generated.empty()) return resp;
        Context ctx;
        ctx.audio = audio_fn_(req.transcript);
        ctx.query = req.query;
        ctx.generated = req.generated;
        Activations acts = forward_collect(params_, ctx);
        const std::size_t base = ctx.gen_base();
        for (std::size_t t = 0; t < req.generated.size(); ++t) {
            Distribution full;
            full.p = softmax(acts.logits.row_span(base - 1 + t));
            resp.dists.push_back(truncate_topk(full, req.top_k));
        }
        return resp;
    }

  private:
    ModelParams params_;
    AudioFn audio_fn_;
};

// Renormalized dense teacher targets for a rollout, ready for the KD losses.
inline std::vector<Distribution> teacher_targets(TeacherBackend& teacher, const Rollout& rollout,
                                                 int top_k, int vocab_size) {
    TeacherRequest req;
    req.transcript = rollout.input.transcript;
    req.query = rollout.input.query;
    req.generated = rollout.generated;
    req.top_k = top_k;
    TeacherResponse resp = teacher.score(req);
    if (resp.dists.size() != rollout.generated.size())
        throw ProtocolError("teacher returned wrong number of distributions");
    std::vector<Distribution> out;
    out.reserve(resp.dists.size());
    for (const TopKDist& tk : resp.dists) out.push_back(to_distribution(renormalize(tk), vocab_size));
    return out;
}

}  // namespace ssum
