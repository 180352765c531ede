#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "streamtts/errors.hpp"

namespace streamtts {

// The model emitted more phonemes than the utterance has.
struct OverrunError : ValidationError {
    explicit OverrunError(const std::string& msg) : ValidationError(msg) {}
};

// Time-stamped phoneme intervals, in frame units at 12.5 Hz. Interval i
// spans (end_frames[i-1], end_frames[i]], with interval 0 starting at 0.
struct ForcedAlignment {
    std::vector<int> phoneme_ids;
    std::vector<double> end_frames;

    int phoneme_count() const { return static_cast<int>(phoneme_ids.size()); }
    void validate() const;
};

enum class Shift : uint8_t { Stay = 0, Go = 1 };

// One duration token per audio frame: the shift flag says whether the next
// frame continues the current phoneme or moves past it, count says how many
// phonemes (1 or 2) this frame carries.
struct DurationToken {
    Shift shift;
    int count;  // 1 or 2

    int packed_id() const { return 2 * (shift == Shift::Go ? 1 : 0) + (count - 1); }

    static DurationToken from_packed(int id) {
        if (id < 0 || id > 3) throw ValidationError("duration token id out of range");
        return {id >= 2 ? Shift::Go : Shift::Stay, (id & 1) + 1};
    }

    bool operator==(const DurationToken&) const = default;
};

// Contiguous phoneme span of one frame, 1-based inclusive.
struct FrameCoverage {
    int b;
    int e;
    bool operator==(const FrameCoverage&) const = default;
};

struct DecodeResult {
    std::vector<FrameCoverage> coverage;
    // true when the stream ends with shift=go exactly at phoneme M
    bool terminated = false;
};

// Replays duration tokens into per-frame coverage:
//   b_1 = 1;  e_t = b_t + count_t - 1;  b_{t+1} = e_t + (shift_t == go).
// Throws OverrunError if any e_t exceeds M.
DecodeResult decode_tokens(const std::vector<DurationToken>& tokens, int phoneme_count);

// Greedy left-to-right encoding of a forced alignment into duration tokens.
// Frame t spans (t-1, t]; a phoneme ending exactly on a frame boundary
// belongs to that frame. When three or more phonemes fall into one ideal
// frame the encoder covers two and spills the rest rightward, so decoding
// always covers every phoneme and ends with (go, e=M).
std::vector<DurationToken> encode_alignment(const ForcedAlignment& a);

struct CoverageStats {
    std::map<int, int> frames_per_phoneme;  // frames-covering-count -> #phonemes
    double two_phoneme_frame_rate = 0.0;
    double stay_rate = 0.0;
};

CoverageStats coverage_stats(const std::vector<DurationToken>& tokens, int phoneme_count);

// JSON interchange: {"phonemes": [...], "end_frames": [...]}
ForcedAlignment alignment_from_json(const std::string& text);
std::string alignment_to_json(const ForcedAlignment& a);

// Minimal interval form, seconds converted at 12.5 frames/s:
// {"intervals": [{"phoneme": "K", "start_s": 0.0, "end_s": 0.08}, ...]}
// phoneme names resolve through the supplied inventory lookup.
ForcedAlignment alignment_from_interval_json(
    const std::string& text, const std::map<std::string, int>& phoneme_ids);

}  // namespace streamtts
