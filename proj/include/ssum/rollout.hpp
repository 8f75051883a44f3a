#pragma once

#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "ssum/model.hpp"
#include "ssum/rng.hpp"

namespace ssum {

struct DecodeConfig {
    double temperature = 1.0;
    int max_new_tokens = 48;
    u64 seed = 0;

    void validate() const {
        if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
        if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
    }
};

// A student-generated sequence, its per-token log-probabilities under the
// sampling snapshot, and the snapshot version that produced it.
struct Rollout {
    PairedInput input;
    TokenSeq generated;
    std::vector<double> logprobs;
    u64 params_version = 0;
    u64 seed = 0;  // effective stream seed after mixing
};

namespace detail {

inline Token sample_from_logits(std::span<const double> logits, double temperature, Rng& rng,
                                double* logprob_out) {
    const Vec lsm = log_softmax(logits);
    Token pick = 0;
    if (temperature == 0.0) {
        // greedy, ties broken by lowest token id
        for (std::size_t z = 1; z < logits.size(); ++z)
            if (logits[z] > logits[pick]) pick = static_cast<Token>(z);
    } else {
        Vec tempered(logits.size());
        for (std::size_t z = 0; z < logits.size(); ++z) tempered[z] = logits[z] / temperature;
        softmax_inplace(tempered);
        pick = static_cast<Token>(rng.categorical(tempered));
    }
    *logprob_out = lsm[pick];
    return pick;
}

inline Rollout generate_stream(const ModelParams& p, const PairedInput& input,
                               const DecodeConfig& cfg, u64 stream_seed) {
    cfg.validate();
    input.validate(p.cfg().vocab);
    Context ctx = Context::for_input(input);
    if (ctx.total_len() + static_cast<std::size_t>(cfg.max_new_tokens) >
        static_cast<std::size_t>(p.cfg().max_ctx))
        throw LengthError("decode budget exceeds max context");

    Decoder dec(p);
    dec.start(ctx);
    Rng rng(stream_seed);

    Rollout r;
    r.input = input;
    r.params_version = p.version();
    r.seed = stream_seed;
    const Token eos = p.cfg().vocab.eos;
    for (int i = 0; i < cfg.max_new_tokens; ++i) {
        double lp = 0.0;
        const Token tk = sample_from_logits(dec.logits(), cfg.temperature, rng, &lp);
        r.generated.push_back(tk);
        r.logprobs.push_back(lp);
        if (tk == eos) break;
        if (i + 1 < cfg.max_new_tokens) dec.feed(tk);
    }
    return r;
}

}  // namespace detail

// Ancestral sampling from the policy snapshot; identical inputs and config
// give identical rollouts.
inline Rollout generate(const ModelParams& p, const PairedInput& input, const DecodeConfig& cfg) {
    return detail::generate_stream(p, input, cfg, mix_seed(cfg.seed, 0, 0));
}

// Two rollouts with distinct token sequences, from derived seeds. Attempts
// are bounded; a policy too deterministic to produce two hypotheses is an
// error the caller must see.
inline constexpr int kPairRetryBudget = 16;

inline std::pair<Rollout, Rollout> generate_pair(const ModelParams& p, const PairedInput& input,
                                                 const DecodeConfig& cfg) {
    cfg.validate();
    if (!(cfg.temperature > 0.0)) throw InputError("generate_pair requires temperature > 0");
    for (int attempt = 0; attempt < kPairRetryBudget; ++attempt) {
        Rollout a = detail::generate_stream(p, input, cfg, mix_seed(cfg.seed, 0, 2 * attempt + 1));
        Rollout b = detail::generate_stream(p, input, cfg, mix_seed(cfg.seed, 1, 2 * attempt + 1));
        if (a.generated != b.generated) return {std::move(a), std::move(b)};
    }
    throw DistinctnessError("generate_pair: retry budget exhausted");
}

struct BatchElementError : Error {
    std::size_t index;
    BatchElementError(std::size_t i, const std::string& msg)
        : Error("batch element " + std::to_string(i) + ": " + msg), index(i) {}
};

// Element-wise generate with per-element derived seeds; output order follows
// input order.
inline std::vector<Rollout> batch_generate(const ModelParams& p,
                                           std::span<const PairedInput> inputs,
                                           const DecodeConfig& cfg) {
    std::vector<Rollout> out;
    out.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        try {
            out.push_back(detail::generate_stream(p, inputs[i], cfg, mix_seed(cfg.seed, i, 0)));
        } catch (const Error& e) {
            throw BatchElementError(i, e.what());
        }
    }
    return out;
}

}  // namespace ssum
