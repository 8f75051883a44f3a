#include <catch2/catch_amalgamated.hpp>

#include "ssum/judge.hpp"

using namespace ssum;

namespace {

SynthConfig test_cfg() {
    SynthConfig cfg;
    cfg.d_audio = 6;
    return cfg;
}

// Random summary-like outputs: true claims, fabricated claims, garbage,
// bullets, optional header/EOS.
TokenSeq random_output(const FactDoc& doc, Rng& rng, bool bulleted_kind) {
    const SynthVocab& sv = synth_vocab();
    TokenSeq out;
    if (rng.uniform() < 0.8) out.push_back(sv.hdr);
    const int n = static_cast<int>(rng.below(6));
    for (int i = 0; i < n; ++i) {
        const double what = rng.uniform();
        if (what < 0.5 && !doc.facts.empty()) {
            const Fact& f = doc.facts[rng.below(doc.facts.size())];
            if (bulleted_kind && rng.uniform() < 0.8) out.push_back(sv.bullet);
            out.push_back(f.subject);
            out.push_back(f.attribute);
            out.push_back(f.value);
        } else if (what < 0.8) {
            if (bulleted_kind && rng.uniform() < 0.8) out.push_back(sv.bullet);
            out.push_back(sv.subj_base + static_cast<Token>(rng.below(sv.n_subj)));
            out.push_back(sv.attr_base + static_cast<Token>(rng.below(sv.n_attr)));
            out.push_back(sv.val_base + static_cast<Token>(rng.below(sv.n_val)));
        } else {
            out.push_back(sv.fill_base + static_cast<Token>(rng.below(sv.n_fill)));
        }
    }
    if (rng.uniform() < 0.9) out.push_back(sv.vocab.eos);
    return out;
}

Fact fabricated_fact(const FactDoc& doc, Rng& rng) {
    const SynthVocab& sv = synth_vocab();
    for (;;) {
        Fact f;
        f.subject = sv.subj_base + static_cast<Token>(rng.below(sv.n_subj));
        f.attribute = sv.attr_base + static_cast<Token>(rng.below(sv.n_attr));
        f.value = sv.val_base + static_cast<Token>(rng.below(sv.n_val));
        bool in_doc = false;
        for (const Fact& d : doc.facts)
            if (d == f) in_doc = true;
        if (!in_doc) return f;
    }
}

}  // namespace

TEST_CASE("extract_claims: round-trip, empty, malformed span counting") {
    const SynthConfig cfg = test_cfg();
    const SynthVocab& sv = synth_vocab();
    for (u64 seed = 0; seed < 200; ++seed) {
        const FactDoc doc = gen_doc(seed, cfg);
        const TokenSeq ref = gen_reference_summary(doc, {sv.qk_list}, cfg);
        const ExtractedClaims ec = extract_claims(ref);
        REQUIRE(ec.malformed_spans == 0);
        REQUIRE(ec.saw_header);
        REQUIRE(ec.claims.size() == doc.facts.size());
        for (const Fact& c : ec.claims) {
            bool found = false;
            for (const Fact& f : doc.facts) found |= f == c;
            REQUIRE(found);
        }
    }

    REQUIRE(extract_claims({}).claims.empty());
    REQUIRE(extract_claims({}).malformed_spans == 0);

    // one malformed clause (missing value) between header and a good clause
    const TokenSeq mixed = {sv.hdr, sv.subj_base, sv.attr_base, sv.subj_base + 1,
                            sv.attr_base + 1, sv.val_base, sv.vocab.eos};
    // parse: "s a" cannot form a clause (third token is a subject), so the
    // scan skips to the next clause start
    const ExtractedClaims ec = extract_claims(mixed);
    REQUIRE(ec.claims.size() == 1);
    REQUIRE(ec.malformed_spans == 1);
    REQUIRE(ec.claims[0].subject == sv.subj_base + 1);
}

TEST_CASE("repetition_rate hand counts and boundaries") {
    REQUIRE(repetition_rate({10, 11, 12, 13, 14, 15}, 4) == 0.0);
    const TokenSeq rep(8, 20);  // "a" eight times
    REQUIRE(repetition_rate(rep, 4) == 0.8);
    REQUIRE(repetition_rate({20, 21, 22}, 4) == 0.0);  // shorter than n
    REQUIRE(repetition_rate({}, 4) == 0.0);
    REQUIRE_THROWS_AS(repetition_rate({20}, 1), ConfigError);
    // two interleaved copies of the same 4-gram
    REQUIRE(repetition_rate({20, 21, 22, 23, 20, 21, 22, 23}, 4) == Catch::Approx(1.0 / 5.0));
}

TEST_CASE("score_summary: reference scores 7, empty scores 1, fabrication costs") {
    const SynthConfig cfg = test_cfg();
    const SynthVocab& sv = synth_vocab();
    for (u64 seed = 0; seed < 300; ++seed) {
        const FactDoc doc = gen_doc(seed, cfg);
        for (const Token qk : {sv.qk_short, sv.qk_list}) {
            const TokenSeq query =
                qk == sv.qk_subset ? TokenSeq{qk, doc.facts[0].subject} : TokenSeq{qk};
            const TokenSeq ref = gen_reference_summary(doc, query, cfg);
            const RubricScores rs = score_summary(doc, query, ref, cfg);
            REQUIRE(rs.overall == 7);
            REQUIRE(rs.fact_recall == 1.0);
            REQUIRE(rs.fact_precision == 1.0);
            REQUIRE(rs.hallucination_count == 0);
            REQUIRE(rs.format_ok);

            if (ref.size() > 2) {  // target set non-empty
                const RubricScores empty = score_summary(doc, query, {}, cfg);
                REQUIRE(empty.overall == 1);
            }

            // one fabricated clause appended before EOS
            Rng rng(seed + 1);
            const Fact fab = fabricated_fact(doc, rng);
            TokenSeq fabbed = ref;
            fabbed.pop_back();
            if (qk == sv.qk_list) fabbed.push_back(sv.bullet);
            fabbed.push_back(fab.subject);
            fabbed.push_back(fab.attribute);
            fabbed.push_back(fab.value);
            fabbed.push_back(sv.vocab.eos);
            const RubricScores frs = score_summary(doc, query, fabbed, cfg);
            REQUIRE(frs.hallucination_count == 1);
            REQUIRE(frs.overall < 7);
        }
    }
    const FactDoc doc = gen_doc(1, cfg);
    REQUIRE_THROWS_AS(score_summary(doc, {sv.vocab.pad}, {}, cfg), QueryError);
}

TEST_CASE("compare: identity tie, reference beats empty, repetition decides") {
    const SynthConfig cfg = test_cfg();
    const SynthVocab& sv = synth_vocab();
    const FactDoc doc = gen_doc(17, cfg);
    const TokenSeq query = {sv.qk_list};
    const TokenSeq ref = gen_reference_summary(doc, query, cfg);

    REQUIRE(compare(doc, query, ref, ref, cfg).choice == Verdict::Choice::Tie);
    REQUIRE(compare(doc, query, ref, {}, cfg).choice == Verdict::Choice::PreferA);
    REQUIRE(compare(doc, query, {}, ref, cfg).choice == Verdict::Choice::PreferB);

    // duplicate one clause of B: the duplicate claim costs precision
    TokenSeq dup = ref;
    dup.pop_back();
    dup.push_back(sv.bullet);
    dup.push_back(doc.facts[0].subject);
    dup.push_back(doc.facts[0].attribute);
    dup.push_back(doc.facts[0].value);
    dup.push_back(sv.vocab.eos);
    const Verdict v = compare(doc, query, ref, dup, cfg);
    REQUIRE(v.choice == Verdict::Choice::PreferA);
    REQUIRE(v.margin > 0.0);
}

TEST_CASE("judge properties over randomized outputs") {
    const SynthConfig cfg = test_cfg();
    const SynthVocab& sv = synth_vocab();
    Rng rng(2024);
    int monotone_checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const FactDoc doc = gen_doc(3000 + trial, cfg);
        const Token qk = trial % 3 == 0   ? sv.qk_short
                         : trial % 3 == 1 ? sv.qk_subset
                                          : sv.qk_list;
        const TokenSeq query =
            qk == sv.qk_subset ? TokenSeq{qk, doc.facts[0].subject} : TokenSeq{qk};
        const bool bulleted = qk == sv.qk_list;
        const TokenSeq a = random_output(doc, rng, bulleted);
        const TokenSeq b = random_output(doc, rng, bulleted);

        // reflexivity
        REQUIRE(compare(doc, query, a, a, cfg).choice == Verdict::Choice::Tie);

        // symmetry
        const Verdict ab = compare(doc, query, a, b, cfg);
        const Verdict ba = compare(doc, query, b, a, cfg);
        REQUIRE(ab.margin == -ba.margin);
        if (ab.choice == Verdict::Choice::Tie) {
            REQUIRE(ba.choice == Verdict::Choice::Tie);
        } else if (ab.choice == Verdict::Choice::PreferA) {
            REQUIRE(ba.choice == Verdict::Choice::PreferB);
        } else {
            REQUIRE(ba.choice == Verdict::Choice::PreferA);
        }

        // appending a fabricated clause never raises the overall score
        const RubricScores before = score_summary(doc, query, a, cfg);
        TokenSeq worse = a;
        const bool had_eos = !worse.empty() && worse.back() == sv.vocab.eos;
        if (had_eos) worse.pop_back();
        const Fact fab = fabricated_fact(doc, rng);
        if (bulleted) worse.push_back(sv.bullet);
        worse.push_back(fab.subject);
        worse.push_back(fab.attribute);
        worse.push_back(fab.value);
        if (had_eos) worse.push_back(sv.vocab.eos);
        const RubricScores after = score_summary(doc, query, worse, cfg);
        REQUIRE(after.overall <= before.overall);
        ++monotone_checked;

        // oracle reference is maximal
        const TokenSeq ref = gen_reference_summary(doc, query, cfg);
        REQUIRE(score_summary(doc, query, ref, cfg).overall == 7);
        REQUIRE(compare(doc, query, ref, a, cfg).choice != Verdict::Choice::PreferB);
    }
    REQUIRE(monotone_checked == 1000);
}

TEST_CASE("rubric overall mapping table pins the score bands") {
    // q = (recall+precision)/2 drives the base; each defect subtracts
    REQUIRE(rubric_overall(1.0, 1.0, 0, 0.0, true) == 7);
    REQUIRE(rubric_overall(1.0, 1.0, 0, 0.0, false) == 6);
    REQUIRE(rubric_overall(1.0, 1.0, 0, kRepetitionPenaltyThreshold, true) == 6);
    REQUIRE(rubric_overall(1.0, 1.0, 1, 0.0, true) == 6);
    REQUIRE(rubric_overall(1.0, 1.0, 3, 0.5, false) == 2);
    REQUIRE(rubric_overall(0.0, 0.0, 0, 0.0, false) == 1);
    REQUIRE(rubric_overall(0.5, 0.5, 0, 0.0, true) == 4);
    REQUIRE(rubric_overall(0.0, 0.0, 9, 1.0, false) == 1);  // floor
}

namespace {

// deterministic judges for the preference-pair contract
PreferenceVerdict always_tie(const PairedInput&, const TokenSeq&, const TokenSeq&) {
    return {0, 0.0};
}

PreferenceVerdict prefer_longer(const PairedInput&, const TokenSeq& a, const TokenSeq& b) {
    if (a.size() == b.size()) return {0, 0.0};
    return {a.size() > b.size() ? 1 : -1, std::abs(double(a.size()) - double(b.size()))};
}

}  // namespace

TEST_CASE("build_preference_pairs: ties drop, verdicts orient the pair") {
    SynthConfig cfg = test_cfg();
    ModelConfig mc;
    mc.vocab = synth_vocab().vocab;
    mc.d_audio = cfg.d_audio;
    mc.d_model = 8;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.max_ctx = 128;
    mc.lora_rank = 2;
    mc.lora_alpha = 4;
    const ModelParams params = ModelParams::init(mc);
    const auto inputs = build_kd_inputs(6, 99, cfg);
    const DecodeConfig dc{1.0, 6, 0};

    const PreferenceBuildResult ties =
        build_preference_pairs(params, always_tie, inputs, dc, 7);
    REQUIRE(ties.pairs.empty());
    REQUIRE(ties.ties == static_cast<int>(inputs.size()) - ties.degenerate);

    const PreferenceBuildResult longer =
        build_preference_pairs(params, prefer_longer, inputs, dc, 7);
    for (const PreferencePair& pr : longer.pairs) {
        REQUIRE(pr.y_plus.size() > pr.y_minus.size());
        REQUIRE(pr.y_plus != pr.y_minus);
        REQUIRE(pr.verdict.margin > 0.0);
    }
    REQUIRE(longer.pairs.size() + longer.ties + longer.degenerate == inputs.size());

    // rubric judge: re-judging every produced pair reproduces the orientation
    const PairwiseJudge judge = make_rubric_judge(cfg);
    const PreferenceBuildResult rub = build_preference_pairs(params, judge, inputs, dc, 7);
    for (const PreferencePair& pr : rub.pairs) {
        const PreferenceVerdict again = judge(pr.input, pr.y_plus, pr.y_minus);
        REQUIRE(again.choice == 1);
    }
    REQUIRE(rub.pairs.size() + rub.ties + rub.degenerate == inputs.size());

    REQUIRE_THROWS_AS(build_preference_pairs(params, judge, inputs, {0.0, 6, 0}, 7), InputError);
}
