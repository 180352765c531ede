#include <doctest.h>

#include <cmath>
#include <complex>

#include "streamtts/codec.hpp"
#include "streamtts/rng.hpp"
#include "streamtts/wav.hpp"

using namespace streamtts;

namespace {

FrameTokens random_frame(Rng& rng, const CodecSpec& spec) {
    FrameTokens t(spec.codebooks);
    for (int r = 0; r < spec.codebooks; ++r)
        t[r] = static_cast<int>(rng.uniform_int(spec.row_vocab(r)));
    return t;
}

// direct DFT probe at one bin (independent of the Goertzel in the codec)
double dft_power(const std::vector<float>& x, int bin) {
    std::complex<double> acc{0, 0};
    const double w = 2.0 * M_PI * bin / static_cast<double>(x.size());
    for (size_t n = 0; n < x.size(); ++n)
        acc += static_cast<double>(x[n]) * std::complex<double>(std::cos(w * n), -std::sin(w * n));
    return std::norm(acc);
}

}  // namespace

TEST_CASE("codec geometry invariants") {
    CodecSpec spec;
    spec.validate();
    CHECK(spec.samples_per_frame == 1920);
    CHECK(spec.frame_rate == 12.5);
    CHECK(spec.sample_rate == 24000);
    CHECK(spec.codebooks == 12);

    CodecSpec bad = spec;
    bad.samples_per_frame = 1000;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("decode_frame is deterministic and rejects out-of-vocab tokens") {
    CodecSpec spec;
    FrameTokens zeros(12, 0);
    auto a = decode_frame(zeros, spec);
    auto b = decode_frame(zeros, spec);
    CHECK(a == b);
    CHECK(static_cast<int>(a.size()) == spec.samples_per_frame);

    FrameTokens bad(12, 0);
    bad[3] = spec.acoustic_vocab;
    CHECK_THROWS_AS(decode_frame(bad, spec), ValidationError);
}

TEST_CASE("streaming decode equals offline concatenation, sample-exact") {
    CodecSpec spec;
    Rng rng(5);
    std::vector<FrameTokens> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(random_frame(rng, spec));
    auto offline = decode_frames(frames, spec);
    std::vector<float> streamed;
    for (const auto& f : frames) {
        auto chunk = decode_frame(f, spec);
        streamed.insert(streamed.end(), chunk.begin(), chunk.end());
    }
    CHECK(offline == streamed);
}

TEST_CASE("bank frequency dominates its row band by more than 20 dB") {
    CodecSpec spec;
    Rng rng(17);
    FrameTokens tokens = random_frame(rng, spec);
    auto wave = decode_frame(tokens, spec);
    // row 0 band occupies bins [40, 40+64); its token's bin must dominate
    const int base = 40;
    double mine = dft_power(wave, base + tokens[0]);
    for (int tok = 0; tok < spec.semantic_vocab; ++tok) {
        if (tok == tokens[0]) continue;
        double other = dft_power(wave, base + tok);
        CHECK(10.0 * std::log10(mine / std::max(other, 1e-30)) > 20.0);
    }
}

TEST_CASE("exhaustive encode(decode) identity over the full token space") {
    CodecSpec spec;
    // token t in every row, t = 0..63, covers all 12*64 (row, token) pairs
    for (int t = 0; t < spec.acoustic_vocab; ++t) {
        FrameTokens tokens(spec.codebooks, t);
        CHECK(encode_frame(decode_frame(tokens, spec), spec) == tokens);
    }
}

TEST_CASE("random frames round-trip, with and without -40 dB noise") {
    CodecSpec spec;
    Rng rng(99);
    for (int i = 0; i < 250; ++i) {
        FrameTokens tokens = random_frame(rng, spec);
        auto wave = decode_frame(tokens, spec);
        CHECK(encode_frame(wave, spec) == tokens);

        // add white noise 40 dB below the signal
        double sig = 0;
        for (float s : wave) sig += static_cast<double>(s) * s;
        double noise_rms = std::sqrt(sig / wave.size()) * std::pow(10.0, -40.0 / 20.0);
        auto noisy = wave;
        for (auto& s : noisy) s += static_cast<float>(rng.normal() * noise_rms);
        CHECK(encode_frame(noisy, spec) == tokens);
    }
}

TEST_CASE("silence is ambiguous") {
    CodecSpec spec;
    std::vector<float> zeros(spec.samples_per_frame, 0.0f);
    CHECK_THROWS_AS(encode_frame(zeros, spec), AmbiguityError);
}

TEST_CASE("wav round trip") {
    CodecSpec spec;
    Rng rng(3);
    auto wave = decode_frame(random_frame(rng, spec), spec);
    write_wav("/tmp/streamtts_test.wav", wave, spec.sample_rate);
    int rate = 0;
    auto back = read_wav("/tmp/streamtts_test.wav", &rate);
    CHECK(rate == spec.sample_rate);
    REQUIRE(back.size() == wave.size());
    for (size_t i = 0; i < wave.size(); ++i)
        CHECK(std::abs(back[i] - wave[i]) <= 1.0f / 32767.0f + 1e-6f);
    // and the quantized waveform still carries the tokens
    CHECK(encode_frame(back, spec) == encode_frame(wave, spec));
}
