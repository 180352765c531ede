#include "streamtts/codec.hpp"

#include <cmath>

namespace streamtts {

namespace {

constexpr int kBaseBin = 40;     // 500 Hz at 12.5 Hz bin spacing
constexpr int kTaperSamples = 48;  // 2 ms at 24 kHz
constexpr double kTwoPi = 6.283185307179586;

double row_amplitude(int row) { return 0.085 - 0.003 * row; }
double row_phase(int row) { return 0.37 * row; }

// disjoint per-row frequency banks: consecutive DFT bins, rows stacked
int bank_bin(const CodecSpec& spec, int row, int token) {
    int off = 0;
    for (int r = 0; r < row; ++r) off += spec.row_vocab(r);
    return kBaseBin + off + token;
}

double taper(int n, int total) {
    if (n < kTaperSamples)
        return 0.5 * (1.0 - std::cos(M_PI * (n + 0.5) / kTaperSamples));
    if (n >= total - kTaperSamples)
        return 0.5 * (1.0 - std::cos(M_PI * (total - n - 0.5) / kTaperSamples));
    return 1.0;
}

// |DFT response|^2 at one bin via the Goertzel recurrence
double goertzel_power(const std::vector<float>& x, int bin, int n) {
    double w = kTwoPi * bin / n;
    double c = 2.0 * std::cos(w);
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double s0 = static_cast<double>(x[i]) + c * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    return s1 * s1 + s2 * s2 - c * s1 * s2;
}

}  // namespace

void CodecSpec::validate() const {
    if (static_cast<double>(samples_per_frame) * frame_rate !=
        static_cast<double>(sample_rate))
        throw ValidationError("codec: samples_per_frame * frame_rate must equal sample_rate");
    if (codebooks < 1 || semantic_vocab < 1 || acoustic_vocab < 1)
        throw ValidationError("codec: bad geometry");
    int total_bins = semantic_vocab + (codebooks - 1) * acoustic_vocab;
    if (kBaseBin + total_bins >= samples_per_frame / 2)
        throw ValidationError("codec: frequency plan exceeds Nyquist");
}

std::vector<float> decode_frame(const FrameTokens& tokens, const CodecSpec& spec) {
    spec.validate();
    if (static_cast<int>(tokens.size()) != spec.codebooks)
        throw ValidationError("decode_frame: expected " + std::to_string(spec.codebooks) +
                              " tokens");
    for (int r = 0; r < spec.codebooks; ++r)
        if (tokens[r] < 0 || tokens[r] >= spec.row_vocab(r))
            throw ValidationError("decode_frame: token out of vocab in row " + std::to_string(r));

    const int n = spec.samples_per_frame;
    std::vector<double> acc(n, 0.0);
    for (int r = 0; r < spec.codebooks; ++r) {
        int bin = bank_bin(spec, r, tokens[r]);
        double w = kTwoPi * bin / n;
        double amp = row_amplitude(r);
        double ph = row_phase(r);
        for (int i = 0; i < n; ++i) acc[i] += amp * std::sin(w * i + ph);
    }
    std::vector<float> out(n);
    for (int i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] * taper(i, n));
    return out;
}

FrameTokens encode_frame(const std::vector<float>& samples, const CodecSpec& spec) {
    spec.validate();
    const int n = spec.samples_per_frame;
    if (static_cast<int>(samples.size()) != n)
        throw ValidationError("encode_frame: expected " + std::to_string(n) + " samples");
    FrameTokens out(spec.codebooks);
    for (int r = 0; r < spec.codebooks; ++r) {
        double best = -1.0, second = -1.0;
        int best_tok = 0;
        for (int tok = 0; tok < spec.row_vocab(r); ++tok) {
            double p = goertzel_power(samples, bank_bin(spec, r, tok), n);
            if (p > best) {
                second = best;
                best = p;
                best_tok = tok;
            } else if (p > second) {
                second = p;
            }
        }
        if (best < 1e-12 || (second >= 0.0 && best - second <= 1e-6 * best))
            throw AmbiguityError("encode_frame: ambiguous response in row " + std::to_string(r));
        out[r] = best_tok;
    }
    return out;
}

std::vector<float> decode_frames(const std::vector<FrameTokens>& frames, const CodecSpec& spec) {
    std::vector<float> out;
    out.reserve(frames.size() * static_cast<size_t>(spec.samples_per_frame));
    for (const auto& f : frames) {
        auto chunk = decode_frame(f, spec);
        out.insert(out.end(), chunk.begin(), chunk.end());
    }
    return out;
}

}  // namespace streamtts
