#include <catch2/catch_amalgamated.hpp>

#include "ssum/teacher.hpp"
#include "test_util.hpp"

using namespace ssum;
using namespace ssum::testutil;

namespace {

Distribution dist(Vec p) {
    Distribution d;
    d.p = std::move(p);
    return d;
}

// Brute-force oracle for the scripted rule: enumerate every (start, length)
// substring of the reference, keep those that equal a suffix of the prefix
// and still have a following token, and take (longest, earliest).
Token scripted_next_oracle(const TokenSeq& ref, const TokenSeq& prefix) {
    std::size_t best_len = 0;
    std::size_t best_start = 0;
    bool found = false;
    for (std::size_t start = 0; start < ref.size(); ++start) {
        for (std::size_t len = 0; start + len < ref.size(); ++len) {
            if (len > prefix.size()) break;
            bool is_suffix = true;
            for (std::size_t j = 0; j < len; ++j)
                if (ref[start + j] != prefix[prefix.size() - len + j]) {
                    is_suffix = false;
                    break;
                }
            if (!is_suffix) continue;
            if (!found || len > best_len || (len == best_len && start < best_start)) {
                if (!found || len > best_len) {
                    best_len = len;
                    best_start = start;
                } else if (start < best_start) {
                    best_start = start;
                }
                found = true;
            }
        }
    }
    return ref[best_start + best_len];
}

}  // namespace

TEST_CASE("truncate_topk ordering, ties and tail mass") {
    const TopKDist all = truncate_topk(dist({0.5, 0.3, 0.2}), 5);
    REQUIRE(all.entries.size() == 3);
    REQUIRE(all.tail_mass == 0.0);

    const TopKDist two = truncate_topk(dist({0.5, 0.3, 0.2}), 2);
    REQUIRE(two.entries == std::vector<std::pair<Token, double>>{{0, 0.5}, {1, 0.3}});
    REQUIRE(std::abs(two.tail_mass - 0.2) < 1e-15);
    REQUIRE_NOTHROW(two.validate());

    const TopKDist tie = truncate_topk(dist({0.4, 0.4, 0.2}), 1);
    REQUIRE(tie.entries.size() == 1);
    REQUIRE(tie.entries[0].first == 0);  // lower token id wins the tie
    REQUIRE(tie.entries[0].second == 0.4);

    // zero-probability tokens never enter the support
    const TopKDist z = truncate_topk(dist({0.7, 0.0, 0.3}), 3);
    REQUIRE(z.entries.size() == 2);

    REQUIRE_THROWS_AS(truncate_topk(dist({1.0}), 0), ConfigError);
}

TEST_CASE("renormalize divides by one minus tail") {
    TopKDist tk;
    tk.entries = {{0, 0.5}, {1, 0.3}};
    tk.tail_mass = 0.2;
    const TopKDist r = renormalize(tk);
    REQUIRE(std::abs(r.entries[0].second - 0.625) < 1e-12);
    REQUIRE(std::abs(r.entries[1].second - 0.375) < 1e-12);
    REQUIRE(r.tail_mass == 0.0);
    double sum = 0.0;
    for (const auto& [t, p] : r.entries) sum += p;
    REQUIRE(std::abs(sum - 1.0) < 1e-12);

    TopKDist zero_tail;
    zero_tail.entries = {{2, 0.6}, {5, 0.4}};
    zero_tail.tail_mass = 0.0;
    const TopKDist same = renormalize(zero_tail);
    REQUIRE(same.entries == zero_tail.entries);

    TopKDist single;
    single.entries = {{3, 0.25}};
    single.tail_mass = 0.75;
    REQUIRE(std::abs(renormalize(single).entries[0].second - 1.0) < 1e-12);

    TopKDist degenerate;
    degenerate.entries = {{0, 1e-15}};
    degenerate.tail_mass = 1.0 - 1e-15;
    REQUIRE_THROWS_AS(renormalize(degenerate), DegenerateError);
    TopKDist empty;
    REQUIRE_THROWS_AS(renormalize(empty), InputError);
}

TEST_CASE("scripted rule fixed cases") {
    const Vocab v{8, 0, 1, 2, 3};
    // tokens: a=4 b=5 c=6 x=7
    const TokenSeq ref_abac = {4, 5, 4, 6};
    REQUIRE(scripted_next(ref_abac, TokenSeq{}) == 4);            // empty prefix -> start
    REQUIRE(scripted_next(ref_abac, TokenSeq{7, 4}) == 5);        // suffix "a", earliest occurrence
    REQUIRE(scripted_next(ref_abac, TokenSeq{5, 4}) == 6);        // suffix "b a" -> c
    const TokenSeq ref = {4, 5, v.eos};                           // "a b EOS"
    REQUIRE(scripted_next(ref, TokenSeq{4, 5}) == v.eos);         // full body -> EOS
    REQUIRE_THROWS_AS(scripted_next(TokenSeq{}, TokenSeq{}), InputError);
}

TEST_CASE("scripted rule matches the brute-force oracle on random cases") {
    const int V = 6;
    Rng rng(99);
    for (int trial = 0; trial < 2000; ++trial) {
        TokenSeq ref(1 + rng.below(8));
        for (Token& t : ref) t = static_cast<Token>(rng.below(V));
        TokenSeq prefix(rng.below(10));
        for (Token& t : prefix) t = static_cast<Token>(rng.below(V));
        REQUIRE(scripted_next(ref, prefix) == scripted_next_oracle(ref, prefix));
    }
}

TEST_CASE("scripted teacher concentrates on the reference continuation") {
    const Vocab v{8, 0, 1, 2, 3};
    const double eps = 0.01;
    ScriptedTeacher teacher(v, {4, 5, v.eos}, eps);

    TeacherRequest req;
    req.transcript = {4, 5, v.eos};
    req.query = {6};
    req.generated = {4, 5, v.eos};
    req.top_k = 8;
    const TeacherResponse resp = teacher.score(req);
    REQUIRE(resp.dists.size() == 3);
    const Token want[3] = {4, 5, v.eos};
    for (int t = 0; t < 3; ++t) {
        resp.dists[t].validate();
        REQUIRE(resp.dists[t].entries[0].first == want[t]);
        REQUIRE(std::abs(resp.dists[t].entries[0].second - (1.0 - 7 * eps)) < 1e-12);
        for (std::size_t k = 1; k < resp.dists[t].entries.size(); ++k)
            REQUIRE(std::abs(resp.dists[t].entries[k].second - eps) < 1e-12);
    }

    // empty generation scores to an empty response
    req.generated = {};
    REQUIRE(teacher.score(req).dists.empty());

    // identical requests, identical responses, across instances
    ScriptedTeacher teacher2(v, {4, 5, v.eos}, eps);
    req.generated = {6, 6, 4};
    req.top_k = 3;
    const TeacherResponse r1 = teacher.score(req);
    const TeacherResponse r2 = teacher2.score(req);
    REQUIRE(r1.dists.size() == r2.dists.size());
    for (std::size_t t = 0; t < r1.dists.size(); ++t) {
        REQUIRE(r1.dists[t].entries == r2.dists[t].entries);
        REQUIRE(r1.dists[t].tail_mass == r2.dists[t].tail_mass);
    }

    REQUIRE_THROWS_AS(ScriptedTeacher(v, {4, 5}, eps), InputError);      // no EOS
    REQUIRE_THROWS_AS(ScriptedTeacher(v, {4, v.eos}, 0.5), ConfigError); // eps too large
    req.top_k = 99;
    REQUIRE_THROWS_AS(teacher.score(req), InputError);
}

TEST_CASE("model teacher serves its own softmax truncated to top-K") {
    ModelConfig cfg = tiny_config(8, 4, 2);
    cfg.init_seed = 13;
    ModelParams params = ModelParams::init(cfg);
    warm_lora(params);
    ModelTeacher teacher(params);

    TeacherRequest req;
    req.transcript = {4, 5, 6, cfg.vocab.eos};
    req.query = {5};
    req.generated = {6, 4};
    req.top_k = 3;
    const TeacherResponse resp = teacher.score(req);
    REQUIRE(resp.dists.size() == 2);

    // in-process oracle: per-position forward_logits over the teacher prompt
    TokenSeq query_block = req.query;
    query_block.push_back(cfg.vocab.sep);
    for (std::size_t t = 0; t < req.generated.size(); ++t) {
        const TokenSeq prefix_gen(req.generated.begin(), req.generated.begin() + t);
        const Vec logits = forward_logits(
            params, Context::for_text(req.transcript, query_block, prefix_gen));
        Distribution full;
        full.p = softmax(logits);
        const TopKDist want = truncate_topk(full, req.top_k);
        REQUIRE(resp.dists[t].entries == want.entries);
        REQUIRE(resp.dists[t].tail_mass == want.tail_mass);
    }
}

TEST_CASE("teacher targets renormalize onto the vocabulary") {
    ModelConfig cfg = tiny_config();
    const ModelParams p = ModelParams::init(cfg);
    const PairedInput in = random_input(cfg, 5);
    const Rollout ro = fixed_rollout(p, in, {4, 6});
    ScriptedTeacher teacher(cfg.vocab, {4, 6, cfg.vocab.eos}, 0.01);
    const auto targets = teacher_targets(teacher, ro, 3, cfg.vocab.size);
    REQUIRE(targets.size() == 2);
    for (const Distribution& d : targets) {
        double sum = 0.0;
        int support = 0;
        for (double v : d.p) {
            sum += v;
            support += v > 0.0;
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-12);
        REQUIRE(support == 3);
    }
}
