#pragma once

#include "ssum/datasynth.hpp"
#include "ssum/teacher.hpp"

namespace ssum {

// Scripted teacher driven by the oracle reference: for each request it
// recovers the document from the transcript, renders the canonical reference
// for the query, and scores the generated prefix with the suffix-match rule.
// Deterministic, stateless across requests, text-conditioned only.
class OracleTeacher : public TeacherBackend {
  public:
    OracleTeacher(SynthConfig cfg, double epsilon) : cfg_(std::move(cfg)), epsilon_(epsilon) {
        const Vocab& v = synth_vocab().vocab;
        if (!(epsilon_ > 0.0) || epsilon_ >= 1.0 / (v.size - 1))
            throw ConfigError("oracle teacher epsilon out of range");
    }

    TeacherResponse score(const TeacherRequest& req) override {
        const Vocab& v = synth_vocab().vocab;
        if (req.top_k < 1 || req.top_k > v.size) throw InputError("top_k out of range");
        FactDoc doc;
        doc.facts = parse_transcript(req.transcript).facts;
        const TokenSeq reference = gen_reference_summary(doc, req.query, cfg_);
        TeacherResponse resp;
        resp.dists.reserve(req.generated.size());
        for (std::size_t t = 0; t < req.generated.size(); ++t) {
            const std::span<const Token> prefix(req.generated.data(), t);
            const Token next = scripted_next(reference, prefix);
            Distribution full;
            full.p.assign(v.size, epsilon_);
            full.p[next] = 1.0 - (v.size - 1) * epsilon_;
            resp.dists.push_back(truncate_topk(full, req.top_k));
        }
        return resp;
    }

    double epsilon() const { return epsilon_; }

  private:
    SynthConfig cfg_;
    double epsilon_;
};

}  // namespace ssum
