#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssum/core.hpp"
#include "ssum/rng.hpp"
#include "ssum/rollout.hpp"

namespace ssum {

// Token layout of the synthetic summarization task. 128 ids: the four
// reserved ids, query keywords, summary markers, then disjoint content
// ranges for subjects, attributes, values and filler.
struct SynthVocab {
    Vocab vocab{128, 0, 1, 2, 3};
    Token qk_short = 4;    // "give a short summary"
    Token qk_subset = 5;   // "summarize facts about <subject>"
    Token qk_list = 6;     // "list everything, bulleted"
    Token hdr = 7;         // summary header
    Token bullet = 8;      // bullet marker for list-style output
    Token subj_base = 16;
    int n_subj = 24;
    Token attr_base = 40;
    int n_attr = 24;
    Token val_base = 64;
    int n_val = 32;
    Token fill_base = 96;
    int n_fill = 32;

    bool is_subject(Token t) const { return t >= subj_base && t < subj_base + n_subj; }
    bool is_attribute(Token t) const { return t >= attr_base && t < attr_base + n_attr; }
    bool is_value(Token t) const { return t >= val_base && t < val_base + n_val; }
    bool is_filler(Token t) const { return t >= fill_base && t < fill_base + n_fill; }

    // Importance is a fixed public function of the value token: an even grid
    // over (0,1). It is recoverable from any rendering of the fact, which
    // keeps every query kind answerable from the transcript alone.
    double value_importance(Token v) const {
        return (static_cast<double>(v - val_base) + 0.5) / static_cast<double>(n_val);
    }
};

inline const SynthVocab& synth_vocab() {
    static const SynthVocab sv;
    return sv;
}

struct Fact {
    Token subject = 0;
    Token attribute = 0;
    Token value = 0;
    double importance = 0.0;

    bool operator==(const Fact& o) const {
        return subject == o.subject && attribute == o.attribute && value == o.value;
    }
};

struct FactDoc {
    u64 id = 0;
    std::vector<Fact> facts;
    u64 style_seed = 0;
};

enum class QueryKind { ShortSummary, KeyedSubset, StructuredList };

struct QueryCandidate {
    TokenSeq query;
    double importance_score = 0.0;
    QueryKind kind = QueryKind::ShortSummary;
};

struct SummarizationExample {
    PairedInput input;
    TokenSeq reference;  // empty when the example carries no reference
    u64 doc_id = 0;
    u64 audio_seed = 0;  // noise stream that produced input.audio

    bool has_reference() const { return !reference.empty(); }
};

struct SynthConfig {
    int min_facts = 3;
    int max_facts = 12;
    int max_filler_run = 2;
    int n_query_candidates = 6;
    double query_threshold = 0.5;
    double importance_threshold = 0.5;  // short_summary inclusion bar
    u64 encoder_table_seed = 7;
    double noise_sigma = 0.05;
    int d_audio = 24;

    void validate() const {
        if (min_facts < 1 || max_facts < min_facts) throw ConfigError("bad fact count bounds");
        if (max_filler_run < 0) throw ConfigError("bad filler bound");
        if (n_query_candidates < 2) throw ConfigError("need at least two query candidates");
        if (noise_sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
        if (d_audio < 1) throw ConfigError("bad audio dim");
    }
};

inline FactDoc gen_doc(u64 seed, const SynthConfig& cfg) {
    cfg.validate();
    const SynthVocab& sv = synth_vocab();
    Rng rng(seed);
    FactDoc doc;
    doc.id = seed;
    const int n = cfg.min_facts + static_cast<int>(rng.below(cfg.max_facts - cfg.min_facts + 1));
    while (static_cast<int>(doc.facts.size()) < n) {
        Fact f;
        f.subject = sv.subj_base + static_cast<Token>(rng.below(sv.n_subj));
        f.attribute = sv.attr_base + static_cast<Token>(rng.below(sv.n_attr));
        bool dup = false;
        for (const Fact& o : doc.facts)
            if (o.subject == f.subject && o.attribute == f.attribute) {
                dup = true;
                break;
            }
        if (dup) continue;
        f.value = sv.val_base + static_cast<Token>(rng.below(sv.n_val));
        f.importance = sv.value_importance(f.value);
        doc.facts.push_back(f);
    }
    doc.style_seed = rng.next_u64();
    return doc;
}

// Facts in document order as "subject attribute value" clauses with
// style-seeded filler runs in between, terminated by EOS. Invertible: the
// content ranges are disjoint, so the oracle parser recovers the facts.
inline TokenSeq render_transcript(const FactDoc& doc, const SynthConfig& cfg) {
    const SynthVocab& sv = synth_vocab();
    Rng style(doc.style_seed);
    TokenSeq out;
    auto filler_run = [&] {
        const int k = static_cast<int>(style.below(cfg.max_filler_run + 1));
        for (int i = 0; i < k; ++i)
            out.push_back(sv.fill_base + static_cast<Token>(style.below(sv.n_fill)));
    };
    for (const Fact& f : doc.facts) {
        filler_run();
        out.push_back(f.subject);
        out.push_back(f.attribute);
        out.push_back(f.value);
    }
    filler_run();
    out.push_back(sv.vocab.eos);
    return out;
}

struct ParsedTranscript {
    std::vector<Fact> facts;
    int malformed = 0;
};

// Oracle parser for transcripts (and any clause sequence): skips filler,
// reads subject-attribute-value triples, counts anything else as malformed.
inline ParsedTranscript parse_transcript(const TokenSeq& seq) {
    const SynthVocab& sv = synth_vocab();
    ParsedTranscript out;
    std::size_t i = 0;
    while (i < seq.size()) {
        const Token t = seq[i];
        if (t == sv.vocab.eos) break;
        if (sv.is_filler(t)) {
            ++i;
            continue;
        }
        if (sv.is_subject(t) && i + 2 < seq.size() && sv.is_attribute(seq[i + 1]) &&
            sv.is_value(seq[i + 2])) {
            Fact f;
            f.subject = t;
            f.attribute = seq[i + 1];
            f.value = seq[i + 2];
            f.importance = sv.value_importance(f.value);
            out.facts.push_back(f);
            i += 3;
            continue;
        }
        ++out.malformed;
        ++i;
    }
    return out;
}

inline Vec audio_table_row(u64 table_seed, Token t, int d_audio) {
    Rng rng(mix_seed(table_seed, static_cast<u64>(t), 0));
    Vec row(d_audio);
    for (double& v : row) v = rng.normal();
    return row;
}

// One frame per transcript token: frozen per-token embedding plus Gaussian
// noise of the given sigma.
inline AudioFrames synth_audio(const TokenSeq& transcript, u64 table_seed, double sigma, Rng& rng,
                               int d_audio) {
    if (sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
    if (transcript.empty()) throw InputError("cannot synthesize audio for empty transcript");
    AudioFrames af;
    af.frames = Mat(transcript.size(), d_audio);
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        const Vec base = audio_table_row(table_seed, transcript[i], d_audio);
        double* row = af.frames.row(i);
        for (int j = 0; j < d_audio; ++j) row[j] = base[j] + sigma * rng.normal();
    }
    return af;
}

namespace detail {

inline std::vector<Fact> facts_selected_by_query(const std::vector<Fact>& facts,
                                                 const TokenSeq& query, const SynthConfig& cfg) {
    const SynthVocab& sv = synth_vocab();
    if (query.empty()) throw QueryError("empty query");
    std::vector<Fact> sel;
    if (query[0] == sv.qk_short && query.size() == 1) {
        for (const Fact& f : facts)
            if (f.importance >= cfg.importance_threshold) sel.push_back(f);
    } else if (query[0] == sv.qk_subset && query.size() == 2 && sv.is_subject(query[1])) {
        for (const Fact& f : facts)
            if (f.subject == query[1]) sel.push_back(f);
    } else if (query[0] == sv.qk_list && query.size() == 1) {
        sel = facts;
    } else {
        throw QueryError("unrecognized query form");
    }
    // canonical order: descending importance, then subject, attribute ids
    std::sort(sel.begin(), sel.end(), [](const Fact& a, const Fact& b) {
        if (a.importance != b.importance) return a.importance > b.importance;
        if (a.subject != b.subject) return a.subject < b.subject;
        return a.attribute < b.attribute;
    });
    return sel;
}

inline QueryKind query_kind_of(const TokenSeq& query) {
    const SynthVocab& sv = synth_vocab();
    if (query.empty()) throw QueryError("empty query");
    if (query[0] == sv.qk_short) return QueryKind::ShortSummary;
    if (query[0] == sv.qk_subset) return QueryKind::KeyedSubset;
    if (query[0] == sv.qk_list) return QueryKind::StructuredList;
    throw QueryError("unrecognized query form");
}

}  // namespace detail

// Candidate queries spanning the three kinds, each scored by a fixed rubric:
// 0.3 * kind specificity + 0.7 * coverage of the high-importance facts.
inline std::vector<QueryCandidate> gen_query_candidates(const FactDoc& doc, Rng& rng, int n,
                                                        const SynthConfig& cfg) {
    if (n < 2) throw InputError("need at least two query candidates");
    if (doc.facts.empty()) throw InputError("doc has no facts");
    const SynthVocab& sv = synth_vocab();
    std::vector<Fact> important;
    for (const Fact& f : doc.facts)
        if (f.importance >= cfg.importance_threshold) important.push_back(f);

    auto coverage = [&](const std::vector<Fact>& sel) {
        if (important.empty()) return 0.0;
        int hit = 0;
        for (const Fact& f : sel)
            if (f.importance >= cfg.importance_threshold) ++hit;
        return static_cast<double>(hit) / static_cast<double>(important.size());
    };

    std::vector<QueryCandidate> out;
    for (int j = 0; j < n; ++j) {
        QueryCandidate c;
        switch (j % 3) {
            case 0: {
                c.kind = QueryKind::ShortSummary;
                c.query = {sv.qk_short};
                const double cov = important.empty() ? 0.0 : 1.0;
                c.importance_score = 0.3 * 1.0 + 0.7 * cov;
                break;
            }
            case 1: {
                c.kind = QueryKind::KeyedSubset;
                const Token s = doc.facts[rng.below(doc.facts.size())].subject;
                c.query = {sv.qk_subset, s};
                c.importance_score =
                    0.3 * 0.9 + 0.7 * coverage(detail::facts_selected_by_query(doc.facts, c.query, cfg));
                break;
            }
            default: {
                c.kind = QueryKind::StructuredList;
                c.query = {sv.qk_list};
                const double cov = important.empty() ? 0.0 : 1.0;
                c.importance_score = 0.3 * 0.5 + 0.7 * cov;
                break;
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

// Uniform random choice among the candidates at or above the threshold.
inline QueryCandidate filter_and_select(const std::vector<QueryCandidate>& candidates,
                                        double threshold, Rng& rng) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (candidates[i].importance_score >= threshold) pool.push_back(i);
    if (pool.empty()) throw EmptyPoolError("no query candidate meets the threshold");
    return candidates[pool[rng.below(pool.size())]];
}

// Canonical reference: header token, the query-selected facts in canonical
// order (bulleted for the list kind), EOS.
inline TokenSeq gen_reference_summary(const FactDoc& doc, const TokenSeq& query,
                                      const SynthConfig& cfg) {
    const SynthVocab& sv = synth_vocab();
    const std::vector<Fact> sel = detail::facts_selected_by_query(doc.facts, query, cfg);
    const bool bulleted = detail::query_kind_of(query) == QueryKind::StructuredList;
    TokenSeq out;
    out.push_back(sv.hdr);
    for (const Fact& f : sel) {
        if (bulleted) out.push_back(sv.bullet);
        out.push_back(f.subject);
        out.push_back(f.attribute);
        out.push_back(f.value);
    }
    out.push_back(sv.vocab.eos);
    return out;
}

namespace detail {

// One fully assembled example. A doc whose candidates all fall below the
// query threshold is discarded and regenerated from a derived seed.
inline SummarizationExample build_example(u64 base_seed, u64 index, const SynthConfig& cfg,
                                          bool with_reference) {
    for (u64 attempt = 0;; ++attempt) {
        if (attempt >= 64) throw EmptyPoolError("no viable doc after 64 attempts");
        const u64 doc_seed = mix_seed(base_seed, index, 3 * attempt);
        const FactDoc doc = gen_doc(doc_seed, cfg);
        Rng qrng(mix_seed(base_seed, index, 3 * attempt + 1));
        const auto candidates = gen_query_candidates(doc, qrng, cfg.n_query_candidates, cfg);
        QueryCandidate chosen;
        try {
            chosen = filter_and_select(candidates, cfg.query_threshold, qrng);
        } catch (const EmptyPoolError&) {
            continue;
        }
        SummarizationExample ex;
        ex.doc_id = index;
        ex.input.doc_id = index;
        ex.input.transcript = render_transcript(doc, cfg);
        ex.audio_seed = mix_seed(base_seed, index, 3 * attempt + 2);
        Rng arng(ex.audio_seed);
        ex.input.audio =
            synth_audio(ex.input.transcript, cfg.encoder_table_seed, cfg.noise_sigma, arng, cfg.d_audio);
        ex.input.query = chosen.query;
        if (with_reference) ex.reference = gen_reference_summary(doc, chosen.query, cfg);
        return ex;
    }
}

}  // namespace detail

// SFT set: one query and one reference per document.
inline std::vector<SummarizationExample> build_sft_dataset(int n, u64 seed,
                                                           const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SummarizationExample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i)
        out.push_back(detail::build_example(seed, static_cast<u64>(i), cfg, true));
    return out;
}

// KD/DPO inputs: same construction with the reference generation step
// omitted.
inline std::vector<PairedInput> build_kd_inputs(int n, u64 seed, const SynthConfig& cfg) {
    cfg.validate();
    std::vector<PairedInput> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i)
        out.push_back(detail::build_example(seed, static_cast<u64>(i), cfg, false).input);
    return out;
}

// Same as build_kd_inputs but keeps the full example records (audio seeds
// included) for serialization.
inline std::vector<SummarizationExample> build_kd_examples(int n, u64 seed,
                                                           const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SummarizationExample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i)
        out.push_back(detail::build_example(seed, static_cast<u64>(i), cfg, false));
    return out;
}

// Pairwise preference judgment: +1 prefers A, -1 prefers B, 0 is a tie.
struct PreferenceVerdict {
    int choice = 0;
    double margin = 0.0;
};

using PairwiseJudge =
    std::function<PreferenceVerdict(const PairedInput&, const TokenSeq&, const TokenSeq&)>;

struct PreferencePair {
    PairedInput input;
    TokenSeq y_plus;
    TokenSeq y_minus;
    PreferenceVerdict verdict;  // provenance, expressed as (winner vs loser)
    u64 pair_seed = 0;
};

struct PreferenceBuildResult {
    std::vector<PreferencePair> pairs;
    int ties = 0;
    int degenerate = 0;  // inputs where two distinct hypotheses never appeared
};

// Sample two distinct hypotheses per input, judge them, drop ties.
inline PreferenceBuildResult build_preference_pairs(const ModelParams& params,
                                                    const PairwiseJudge& judge,
                                                    std::span<const PairedInput> inputs,
                                                    const DecodeConfig& decode, u64 seed) {
    if (!(decode.temperature > 0.0))
        throw InputError("preference pairs need temperature > 0 sampling");
    PreferenceBuildResult out;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        DecodeConfig cfg = decode;
        cfg.seed = mix_seed(seed, i, 0);
        std::pair<Rollout, Rollout> pr;
        try {
            pr = generate_pair(params, inputs[i], cfg);
        } catch (const DistinctnessError&) {
            ++out.degenerate;
            continue;
        }
        const PreferenceVerdict v = judge(inputs[i], pr.first.generated, pr.second.generated);
        if (v.choice == 0) {
            ++out.ties;
            continue;
        }
        PreferencePair pair;
        pair.input = inputs[i];
        pair.pair_seed = cfg.seed;
        if (v.choice > 0) {
            pair.y_plus = pr.first.generated;
            pair.y_minus = pr.second.generated;
        } else {
            pair.y_plus = pr.second.generated;
            pair.y_minus = pr.first.generated;
        }
        pair.verdict = {1, std::abs(v.margin)};
        out.pairs.push_back(std::move(pair));
    }
    return out;
}

// ---- dataset serialization (JSON lines) ----
// {"doc_id":..,"facts":[[s,a,v,imp],..],"transcript":[..],"audio_seed":..,
//  "noise_sigma":..,"query":[..],"reference":[..]|null}

inline std::string dataset_line(const SummarizationExample& ex, const SynthConfig& cfg) {
    nlohmann::ordered_json j;
    j["doc_id"] = ex.doc_id;
    const ParsedTranscript parsed = parse_transcript(ex.input.transcript);
    auto facts = nlohmann::ordered_json::array();
    for (const Fact& f : parsed.facts)
        facts.push_back(nlohmann::ordered_json::array({f.subject, f.attribute, f.value, f.importance}));
    j["facts"] = std::move(facts);
    j["transcript"] = ex.input.transcript;
    j["audio_seed"] = ex.audio_seed;
    j["noise_sigma"] = cfg.noise_sigma;
    j["query"] = ex.input.query;
    if (ex.has_reference())
        j["reference"] = ex.reference;
    else
        j["reference"] = nullptr;
    return j.dump();
}

inline void write_dataset(std::ostream& os, std::span<const SummarizationExample> examples,
                          const SynthConfig& cfg) {
    for (const SummarizationExample& ex : examples) os << dataset_line(ex, cfg) << '\n';
}

struct DatasetRecord {
    SummarizationExample example;
    u64 audio_seed = 0;
    double noise_sigma = 0.0;
};

inline DatasetRecord parse_dataset_line(const std::string& line, const SynthConfig& cfg) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad dataset line: ") + e.what());
    }
    DatasetRecord rec;
    try {
        rec.example.doc_id = j.at("doc_id").get<u64>();
        rec.example.input.doc_id = rec.example.doc_id;
        rec.example.input.transcript = j.at("transcript").get<TokenSeq>();
        rec.example.input.query = j.at("query").get<TokenSeq>();
        rec.audio_seed = j.at("audio_seed").get<u64>();
        rec.noise_sigma = j.at("noise_sigma").get<double>();
        if (!j.at("reference").is_null()) rec.example.reference = j.at("reference").get<TokenSeq>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("dataset line missing fields: ") + e.what());
    }
    rec.example.audio_seed = rec.audio_seed;
    Rng arng(rec.audio_seed);
    rec.example.input.audio = synth_audio(rec.example.input.transcript, cfg.encoder_table_seed,
                                          rec.noise_sigma, arng, cfg.d_audio);
    return rec;
}

}  // namespace ssum
