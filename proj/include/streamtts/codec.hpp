#pragma once

#include <string>
#include <vector>

#include "streamtts/errors.hpp"

namespace streamtts {

struct AmbiguityError : ValidationError {
    explicit AmbiguityError(const std::string& msg) : ValidationError(msg) {}
};

// Grid geometry of the target codec: 12.5 Hz frames of 1920 samples at
// 24 kHz, 12 codebooks. The waveform mapping is a deterministic sinusoid
// bank so encode is an exact inverse of decode.
struct CodecSpec {
    double frame_rate = 12.5;
    int sample_rate = 24000;
    int samples_per_frame = 1920;
    int codebooks = 12;
    int semantic_vocab = 64;  // row 0
    int acoustic_vocab = 64;  // rows 1..11

    int acoustic_pad() const { return acoustic_vocab; }
    void validate() const;
    int row_vocab(int row) const { return row == 0 ? semantic_vocab : acoustic_vocab; }
};

// 12-row x T-column token matrix. Row 0 is the semantic stream aligned to
// frames; rows 1..11 hold the acoustic streams delayed one column, so
// column t carries frame t-1's acoustics and column 0 is ACOUSTIC_PAD.
struct TokenGrid {
    int rows = 0;
    int cols = 0;
    std::vector<int> data;  // row-major

    TokenGrid() = default;
    TokenGrid(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0) {}

    int& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    int at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

// One decodable frame's 12 token IDs (delay already resolved).
using FrameTokens = std::vector<int>;

// Renders one frame: per row a bank sinusoid at f(row, token) with a 2 ms
// raised-cosine edge taper. Frequencies are distinct DFT bins across all
// (row, token) pairs, so frames are exactly analyzable.
std::vector<float> decode_frame(const FrameTokens& tokens, const CodecSpec& spec);

// Matched-filter inverse of decode_frame; throws AmbiguityError when the
// best and runner-up responses in some row are indistinguishable.
FrameTokens encode_frame(const std::vector<float>& samples, const CodecSpec& spec);

// Streaming convenience: decode frames in order and concatenate. Equal,
// sample for sample, to decoding them one call at a time.
std::vector<float> decode_frames(const std::vector<FrameTokens>& frames, const CodecSpec& spec);

}  // namespace streamtts
