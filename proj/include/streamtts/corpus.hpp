#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "streamtts/align.hpp"
#include "streamtts/codec.hpp"
#include "streamtts/phonemizer.hpp"

namespace streamtts {

// Synthetic corpus recipe. Durations default to >= 1 frame so a frame never
// holds two whole phonemes; that keeps the semantic-token map exactly
// invertible (every phoneme heads at least one frame) and the error-rate
// proxy trustworthy. Nonzero jitter adds seeded per-phoneme noise the model
// cannot predict, which lowers the reachable teacher-forced duration
// accuracy; the default keeps timing a pure function of the phoneme string.
struct CorpusSpec {
    int speakers = 200;
    int utterances = 2000;
    int min_phonemes = 6;
    int max_phonemes = 16;
    double duration_jitter = 0.0;        // frames, uniform +/-
    double speaker_tempo_spread = 0.0;   // multiplicative range around 1
    uint64_t master_seed = 1;
    CodecSpec codec;

    void validate() const;
};

CorpusSpec corpus_spec_from_json(const std::string& text);
std::string corpus_spec_to_json(const CorpusSpec& spec);

// The semantic token of a frame encodes the frame's first covered phoneme
// plus a flag for two-phoneme frames: sem = head + 32 * two.
inline constexpr int kSemanticHeadSpace = 32;
inline int semantic_token(int head_phoneme, bool two_phoneme) {
    return head_phoneme + (two_phoneme ? kSemanticHeadSpace : 0);
}
inline int semantic_head(int sem) { return sem % kSemanticHeadSpace; }

struct Utterance {
    uint64_t seed = 0;
    int speaker_id = 0;
    std::vector<int> phonemes;
    ForcedAlignment alignment;
    std::vector<DurationToken> durations;     // encode_alignment(alignment)
    std::vector<int> semantic;                // per frame, undelayed
    std::vector<std::vector<int>> acoustic;   // [frame][row-1], undelayed
    std::vector<float> speaker_vec;

    int frames() const { return static_cast<int>(semantic.size()); }
    // Delayed grid view: frames() columns, acoustics shifted one column right
    // (the final frame's acoustics fall off the edge).
    TokenGrid grid(const CodecSpec& spec) const;
};

std::vector<float> speaker_vector(uint64_t master_seed, int speaker_id, int dim);

double base_duration_frames(int phoneme_id);

Utterance generate_utterance(const CorpusSpec& spec, const Lexicon& lex, uint64_t utt_seed);

// Frame-by-frame inversion of the semantic map with adjacent repeats
// collapsed, then Levenshtein distance over reference length (clipped to 1).
double phoneme_error_rate(const std::vector<int>& reference, const TokenGrid& hypothesis);

size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// Manifest: JSON-lines, first line the corpus spec, then one utterance per
// line carrying seed, speaker, phonemes, end frames and the token streams.
void write_manifest(const std::string& path, const CorpusSpec& spec,
                    const std::vector<Utterance>& utts);
std::pair<CorpusSpec, std::vector<Utterance>> read_manifest(const std::string& path);

std::vector<Utterance> generate_corpus(const CorpusSpec& spec, const Lexicon& lex);

}  // namespace streamtts
