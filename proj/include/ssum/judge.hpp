#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "ssum/datasynth.hpp"

namespace ssum {

// Rubric version; bump when the overall mapping table changes.
inline constexpr int kRubricVersion = 1;

// Sub-scores plus the deterministic 1..7 overall mapping. An overall of 7
// requires perfect recall and precision, zero hallucinations, repetition
// under the threshold and a well-formed output.
struct RubricScores {
    double fact_recall = 0.0;
    double fact_precision = 0.0;
    int hallucination_count = 0;
    double repetition_rate = 0.0;
    bool format_ok = false;
    int overall = 1;
};

inline constexpr double kRepetitionPenaltyThreshold = 0.25;

// Published mapping: overall = clamp(1, 7, 1 + floor(6*(recall+precision)/2)
//   - hallucination_count - [repetition >= 0.25] - [!format_ok]).
// The hallucination penalty is uncapped, which makes appending a fabricated
// clause a non-improving move no matter how the other terms shift.
inline int rubric_overall(double recall, double precision, int hallucinations, double repetition,
                          bool format_ok) {
    const double q = 0.5 * (recall + precision);
    int score = 1 + static_cast<int>(std::floor(6.0 * q + 1e-9));
    score -= hallucinations;
    if (repetition >= kRepetitionPenaltyThreshold) score -= 1;
    if (!format_ok) score -= 1;
    return std::clamp(score, 1, 7);
}

struct ExtractedClaims {
    std::vector<Fact> claims;  // multiset, in output order
    int malformed_spans = 0;
    bool saw_header = false;
    int bulleted = 0;  // clauses carrying the bullet marker
    int bare = 0;      // clauses without it
};

namespace detail {

// True when position i starts a well-formed clause: [bullet] subject
// attribute value.
inline bool clause_at(const SynthVocab& sv, const TokenSeq& s, std::size_t i, bool* bulleted,
                      std::size_t* len) {
    std::size_t j = i;
    bool bul = false;
    if (j < s.size() && s[j] == sv.bullet) {
        bul = true;
        ++j;
    }
    if (j + 2 < s.size() && sv.is_subject(s[j]) && sv.is_attribute(s[j + 1]) &&
        sv.is_value(s[j + 2])) {
        *bulleted = bul;
        *len = (bul ? 4 : 3);
        return true;
    }
    return false;
}

}  // namespace detail

// Lenient clause parser for model outputs: scans for [bullet] subject
// attribute value clauses, skipping anything else as counted malformed spans.
inline ExtractedClaims extract_claims(const TokenSeq& output) {
    const SynthVocab& sv = synth_vocab();
    ExtractedClaims out;
    std::size_t i = 0;
    if (!output.empty() && output[0] == sv.hdr) {
        out.saw_header = true;
        i = 1;
    }
    while (i < output.size()) {
        if (output[i] == sv.vocab.eos) break;
        bool bul = false;
        std::size_t len = 0;
        if (detail::clause_at(sv, output, i, &bul, &len)) {
            Fact f;
            f.subject = output[i + (bul ? 1 : 0)];
            f.attribute = output[i + (bul ? 2 : 1)];
            f.value = output[i + (bul ? 3 : 2)];
            f.importance = sv.value_importance(f.value);
            out.claims.push_back(f);
            if (bul)
                ++out.bulleted;
            else
                ++out.bare;
            i += len;
            continue;
        }
        // malformed span: skip to the next clause start or EOS
        ++out.malformed_spans;
        while (i < output.size() && output[i] != sv.vocab.eos &&
               !detail::clause_at(sv, output, i, &bul, &len))
            ++i;
    }
    return out;
}

// Fraction of n-grams that duplicate an earlier n-gram; 0 when the output is
// shorter than n.
inline double repetition_rate(const TokenSeq& output, int n = 4) {
    if (n < 2) throw ConfigError("repetition n-gram size must be >= 2");
    if (output.size() < static_cast<std::size_t>(n)) return 0.0;
    const std::size_t total = output.size() - n + 1;
    std::set<std::vector<Token>> seen;
    std::size_t dups = 0;
    for (std::size_t i = 0; i < total; ++i) {
        std::vector<Token> gram(output.begin() + i, output.begin() + i + n);
        if (!seen.insert(std::move(gram)).second) ++dups;
    }
    return static_cast<double>(dups) / static_cast<double>(total);
}

// Score an output against the oracle selection for (doc, query).
inline RubricScores score_summary(const FactDoc& doc, const TokenSeq& query, const TokenSeq& output,
                                  const SynthConfig& cfg) {
    const SynthVocab& sv = synth_vocab();
    const QueryKind kind = detail::query_kind_of(query);
    const std::vector<Fact> target = detail::facts_selected_by_query(doc.facts, query, cfg);
    const ExtractedClaims ec = extract_claims(output);

    std::vector<bool> consumed(target.size(), false);
    int matched = 0;
    int hallucinated = 0;
    for (const Fact& c : ec.claims) {
        bool hit = false;
        for (std::size_t k = 0; k < target.size(); ++k) {
            if (!consumed[k] && target[k] == c) {
                consumed[k] = true;
                hit = true;
                break;
            }
        }
        if (hit) {
            ++matched;
            continue;
        }
        bool in_doc = false;
        for (const Fact& f : doc.facts)
            if (f == c) {
                in_doc = true;
                break;
            }
        if (!in_doc) ++hallucinated;
    }

    RubricScores rs;
    rs.fact_recall = target.empty() ? 1.0 : static_cast<double>(matched) / target.size();
    rs.fact_precision = ec.claims.empty() ? (target.empty() ? 1.0 : 0.0)
                                          : static_cast<double>(matched) / ec.claims.size();
    rs.hallucination_count = hallucinated;
    rs.repetition_rate = repetition_rate(output);

    const bool bullets_ok = kind == QueryKind::StructuredList ? ec.bare == 0 : ec.bulleted == 0;
    rs.format_ok = ec.saw_header && ends_with_eos(sv.vocab, output) && ec.malformed_spans == 0 &&
                   bullets_ok;
    rs.overall = rubric_overall(rs.fact_recall, rs.fact_precision, rs.hallucination_count,
                                rs.repetition_rate, rs.format_ok);
    return rs;
}

struct Verdict {
    enum class Choice { PreferA, PreferB, Tie };
    Choice choice = Choice::Tie;
    double margin = 0.0;
};

// Strict preference by overall, then fewer hallucinations, lower repetition,
// higher recall; a tie only when all four agree.
inline Verdict compare(const FactDoc& doc, const TokenSeq& query, const TokenSeq& out_a,
                       const TokenSeq& out_b, const SynthConfig& cfg) {
    const RubricScores a = score_summary(doc, query, out_a, cfg);
    const RubricScores b = score_summary(doc, query, out_b, cfg);
    Verdict v;
    double margin = 0.0;
    if (a.overall != b.overall)
        margin = static_cast<double>(a.overall - b.overall);
    else if (a.hallucination_count != b.hallucination_count)
        margin = static_cast<double>(b.hallucination_count - a.hallucination_count);
    else if (a.repetition_rate != b.repetition_rate)
        margin = b.repetition_rate - a.repetition_rate;
    else if (a.fact_recall != b.fact_recall)
        margin = a.fact_recall - b.fact_recall;
    v.margin = margin;
    v.choice = margin > 0.0   ? Verdict::Choice::PreferA
               : margin < 0.0 ? Verdict::Choice::PreferB
                              : Verdict::Choice::Tie;
    return v;
}

// Adapter for the preference-pair builder: recovers the document from the
// transcript via the oracle parser (the judge sees text, never audio).
inline PairwiseJudge make_rubric_judge(const SynthConfig& cfg) {
    return [cfg](const PairedInput& input, const TokenSeq& a, const TokenSeq& b) {
        FactDoc doc;
        doc.id = input.doc_id;
        doc.facts = parse_transcript(input.transcript).facts;
        const Verdict v = compare(doc, input.query, a, b, cfg);
        PreferenceVerdict pv;
        pv.margin = v.margin;
        pv.choice = v.choice == Verdict::Choice::PreferA  ? 1
                    : v.choice == Verdict::Choice::PreferB ? -1
                                                           : 0;
        return pv;
    };
}

}  // namespace ssum
