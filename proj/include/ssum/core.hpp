#pragma once

#include <string>
#include <vector>

#include "ssum/common.hpp"
#include "ssum/linalg.hpp"

namespace ssum {

// Closed token vocabulary with the four reserved ids.
struct Vocab {
    int size = 0;
    Token pad = 0;
    Token bos = 1;
    Token eos = 2;
    Token sep = 3;

    void validate() const {
        if (size < 8) throw VocabError("vocab size must be >= 8");
        const Token r[4] = {pad, bos, eos, sep};
        for (int i = 0; i < 4; ++i) {
            if (r[i] < 0 || r[i] >= size) throw VocabError("reserved id out of range");
            for (int j = i + 1; j < 4; ++j)
                if (r[i] == r[j]) throw VocabError("reserved ids must be distinct");
        }
    }

    bool contains(Token t) const { return t >= 0 && t < size; }
};

using TokenSeq = std::vector<Token>;

// Valid iff every id is in-vocab and EOS, when present, appears once and last.
inline void validate_seq(const Vocab& v, const TokenSeq& s, const char* what = "sequence") {
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!v.contains(s[i])) throw VocabError(std::string(what) + ": token id out of vocab");
        if (s[i] == v.eos && i + 1 != s.size())
            throw VocabError(std::string(what) + ": EOS not in final position");
    }
}

inline bool ends_with_eos(const Vocab& v, const TokenSeq& s) {
    return !s.empty() && s.back() == v.eos;
}

// Simulated acoustic input: one real-valued feature frame per row.
struct AudioFrames {
    Mat frames;  // F x d_audio

    void validate() const {
        if (frames.rows < 1) throw ShapeError("audio must have at least one frame");
        if (!all_finite(frames.a)) throw NumericError("audio frames must be finite");
    }

    std::size_t num_frames() const { return frames.rows; }
    std::size_t dim() const { return frames.cols; }
};

// One task instance. The audio and transcript render the same source
// document; doc_id records that pairing. The student conditions on
// (audio, query), the teacher on (transcript, query).
struct PairedInput {
    AudioFrames audio;
    TokenSeq transcript;
    TokenSeq query;
    u64 doc_id = 0;

    void validate(const Vocab& v) const {
        audio.validate();
        validate_seq(v, transcript, "transcript");
        validate_seq(v, query, "query");
        if (query.empty()) throw InputError("query must be non-empty");
    }
};

}  // namespace ssum
