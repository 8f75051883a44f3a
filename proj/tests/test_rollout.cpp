#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include <json.hpp>

#include "ssum/rollout.hpp"
#include "ssum/rollout_dump.hpp"
#include "test_util.hpp"

using namespace ssum;
using namespace ssum::testutil;

namespace {

// Wilson-Hilferty approximation of the chi-square 99th percentile.
double chi2_crit_99(int df) {
    const double z = 2.3263478740408408;
    const double a = 2.0 / (9.0 * df);
    const double t = 1.0 - a + z * std::sqrt(a);
    return df * t * t * t;
}

// Model whose first sampled token for `in` is `always` with probability 1:
// the head row is aligned with the actual final hidden state, whose
// self-inner-product is positive by construction.
ModelParams pinned_first_token_model(const ModelConfig& cfg, const PairedInput& in, Token always) {
    ModelParams p = ModelParams::init(cfg);
    const Activations acts = forward_collect(p, Context::for_input(in));
    const auto h = acts.lnf_out.row_span(acts.T - 1);
    Mat head(cfg.vocab.size, cfg.d_model, 0.0);
    for (int j = 0; j < cfg.d_model; ++j) head(always, j) = 1e4 * h[j];
    p.mutable_group(p.head_index()).w = head;
    return p;
}

}  // namespace

TEST_CASE("temperature 0 reproduces the step-by-step argmax sequence") {
    ModelConfig cfg = tiny_config();
    cfg.init_seed = 71;
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 1);

    // oracle: replay greedy decoding through explicit forward calls
    TokenSeq expect;
    for (int i = 0; i < 5; ++i) {
        const Vec logits = forward_logits(p, Context::for_input(in, expect));
        Token am = 0;
        for (std::size_t z = 1; z < logits.size(); ++z)
            if (logits[z] > logits[am]) am = static_cast<Token>(z);
        expect.push_back(am);
        if (am == cfg.vocab.eos) break;
    }
    const Rollout r = generate(p, in, {0.0, 5, 99});
    REQUIRE(r.generated == expect);

    // all-equal logits: ties resolve to the lowest token id
    ModelParams pu = ModelParams::init(cfg);
    pu.mutable_group(pu.head_index()).w = Mat(cfg.vocab.size, cfg.d_model, 0.0);
    const Rollout rt = generate(pu, in, {0.0, 3, 99});
    REQUIRE(rt.generated == TokenSeq{0, 0, 0});
}

TEST_CASE("first-step EOS probability 1 gives an EOS-only rollout") {
    ModelConfig cfg = tiny_config();
    const PairedInput in = random_input(cfg, 2);
    const ModelParams p = pinned_first_token_model(cfg, in, cfg.vocab.eos);
    const Rollout r = generate(p, in, {1.0, 8, 7});
    REQUIRE(r.generated == TokenSeq{cfg.vocab.eos});
    REQUIRE(r.logprobs.size() == 1);
}

TEST_CASE("same seed gives bit-identical rollouts; stored logprobs recompute") {
    ModelConfig cfg = tiny_config();
    cfg.init_seed = 12;
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 3);
    const DecodeConfig dc{1.0, 8, 424242};

    const Rollout a = generate(p, in, dc);
    const Rollout b = generate(p, in, dc);
    REQUIRE(a.generated == b.generated);
    REQUIRE(a.logprobs == b.logprobs);
    REQUIRE(a.seed == b.seed);
    REQUIRE(a.params_version == p.version());

    const LogProbResult lp = log_prob(p, in, a.generated);
    for (std::size_t t = 0; t < a.logprobs.size(); ++t)
        REQUIRE(std::abs(a.logprobs[t] - lp.per_token[t]) < 1e-12);
}

TEST_CASE("recomputed logprobs match at temperatures other than 1") {
    ModelConfig cfg = tiny_config();
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 9);
    const Rollout r = generate(p, in, {0.7, 6, 5});
    const LogProbResult lp = log_prob(p, in, r.generated);
    for (std::size_t t = 0; t < r.logprobs.size(); ++t)
        REQUIRE(std::abs(r.logprobs[t] - lp.per_token[t]) < 1e-12);
}

TEST_CASE("decode budget beyond the context is a length error") {
    ModelConfig cfg = tiny_config();
    cfg.max_ctx = 12;
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 4);  // prompt is 3+1+2 = 6 rows
    REQUIRE_NOTHROW(generate(p, in, {1.0, 6, 1}));
    REQUIRE_THROWS_AS(generate(p, in, {1.0, 7, 1}), LengthError);
}

TEST_CASE("generate_pair produces distinct sequences or fails meaningfully") {
    ModelConfig cfg = tiny_config();
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 5);

    const auto [a, b] = generate_pair(p, in, {1.0, 6, 99});
    REQUIRE(a.generated != b.generated);

    // a policy that emits EOS immediately with probability 1 can never
    // produce two distinct hypotheses
    const ModelParams pd = pinned_first_token_model(cfg, in, cfg.vocab.eos);
    REQUIRE_THROWS_AS(generate_pair(pd, in, {1.0, 4, 99}), DistinctnessError);
    REQUIRE_THROWS_AS(generate_pair(p, in, {0.0, 4, 99}), InputError);
}

TEST_CASE("pair distribution matches conditional distinct-pair probabilities") {
    // single-token sequences make the pair distribution fully enumerable
    ModelConfig cfg = tiny_config(8, 4, 1);
    cfg.init_seed = 21;
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 6);

    const Vec probs = softmax(forward_logits(p, Context::for_input(in)));
    double collision = 0.0;
    for (double q : probs) collision += q * q;

    const int V = cfg.vocab.size;
    const int n_pairs = 4000;
    std::vector<int> counts(V * V, 0);
    for (int i = 0; i < n_pairs; ++i) {
        const auto [a, b] = generate_pair(p, in, {1.0, 1, mix_seed(777, i, 0)});
        counts[a.generated[0] * V + b.generated[0]]++;
    }
    double chi2 = 0.0;
    int df = -1;
    for (int a = 0; a < V; ++a)
        for (int b = 0; b < V; ++b) {
            if (a == b) {
                REQUIRE(counts[a * V + b] == 0);
                continue;
            }
            const double expect = n_pairs * probs[a] * probs[b] / (1.0 - collision);
            if (expect < 1e-9) continue;
            const double diff = counts[a * V + b] - expect;
            chi2 += diff * diff / expect;
            ++df;
        }
    REQUIRE(chi2 < chi2_crit_99(df));
}

TEST_CASE("batch_generate equals element-wise generation with derived seeds") {
    ModelConfig cfg = tiny_config();
    const ModelParams p = ModelParams::init(cfg);
    std::vector<PairedInput> inputs;
    for (u64 s = 1; s <= 5; ++s) inputs.push_back(random_input(cfg, s));
    const DecodeConfig dc{1.0, 6, 31};

    const std::vector<Rollout> batch = batch_generate(p, inputs, dc);
    REQUIRE(batch.size() == inputs.size());

    // batch of 1 equals single generate
    const std::vector<Rollout> one = batch_generate(p, std::span(inputs.data(), 1), dc);
    const Rollout single = generate(p, inputs[0], dc);
    REQUIRE(one[0].generated == single.generated);
    REQUIRE(one[0].seed == single.seed);

    // element-wise sequential oracle with the same derived seeds
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Rollout r = detail::generate_stream(p, inputs[i], dc, mix_seed(dc.seed, i, 0));
        REQUIRE(batch[i].generated == r.generated);
        REQUIRE(batch[i].logprobs == r.logprobs);
    }

    // permuting inputs permutes the index-derived streams accordingly
    std::vector<PairedInput> swapped = {inputs[1], inputs[0]};
    const std::vector<Rollout> sb = batch_generate(p, swapped, dc);
    REQUIRE(sb[0].input.doc_id == inputs[1].doc_id);
    REQUIRE(sb[1].input.doc_id == inputs[0].doc_id);

    // element errors carry the index
    ModelConfig small = cfg;
    small.max_ctx = 8;
    const ModelParams ps = ModelParams::init(small);
    std::vector<PairedInput> bad = {random_input(small, 1, 2), random_input(small, 2, 7)};
    try {
        batch_generate(ps, bad, {1.0, 1, 0});
        FAIL("expected BatchElementError");
    } catch (const BatchElementError& e) {
        REQUIRE(e.index == 1);
    }
}

TEST_CASE("empirical next-token frequencies match softmax within 4 SE") {
    ModelConfig cfg = tiny_config(8, 4, 1);
    cfg.init_seed = 33;
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 7);
    const Vec probs = softmax(forward_logits(p, Context::for_input(in)));

    const int n = 100000;
    std::vector<int> counts(cfg.vocab.size, 0);
    for (int i = 0; i < n; ++i) {
        const Rollout r = detail::generate_stream(p, in, {1.0, 1, 0}, mix_seed(909, i, 0));
        counts[r.generated[0]]++;
    }
    for (int z = 0; z < cfg.vocab.size; ++z) {
        const double se = std::sqrt(probs[z] * (1.0 - probs[z]) / n);
        REQUIRE(std::abs(counts[z] / static_cast<double>(n) - probs[z]) <= 4.0 * se + 1e-12);
    }
}

TEST_CASE("rollout dump emits one JSON object per line with the pinned fields") {
    ModelConfig cfg = tiny_config();
    const ModelParams p = ModelParams::init(cfg);
    std::vector<PairedInput> inputs = {random_input(cfg, 11), random_input(cfg, 12)};
    const std::vector<Rollout> rollouts = batch_generate(p, inputs, {1.0, 4, 3});

    std::ostringstream os;
    dump_rollouts(os, rollouts);
    std::istringstream is(os.str());
    std::string line;
    std::size_t i = 0;
    while (std::getline(is, line)) {
        const auto j = nlohmann::json::parse(line);
        REQUIRE(j.at("input_id").get<u64>() == rollouts[i].input.doc_id);
        REQUIRE(j.at("seed").get<u64>() == rollouts[i].seed);
        REQUIRE(j.at("tokens").get<TokenSeq>() == rollouts[i].generated);
        REQUIRE(j.at("logprobs").get<std::vector<double>>() == rollouts[i].logprobs);
        REQUIRE(j.at("params_version").get<u64>() == rollouts[i].params_version);
        ++i;
    }
    REQUIRE(i == rollouts.size());
}
