#include "streamtts/align.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace streamtts {

void ForcedAlignment::validate() const {
    if (phoneme_ids.empty()) throw ValidationError("alignment: no phonemes");
    if (phoneme_ids.size() != end_frames.size())
        throw ValidationError("alignment: phoneme/end count mismatch");
    double prev = 0.0;
    for (size_t i = 0; i < end_frames.size(); ++i) {
        if (!(end_frames[i] > prev))
            throw ValidationError("alignment: end_frames must be strictly increasing and > 0 (index " +
                                  std::to_string(i) + ")");
        prev = end_frames[i];
    }
}

DecodeResult decode_tokens(const std::vector<DurationToken>& tokens, int phoneme_count) {
    if (phoneme_count < 1) throw ValidationError("decode: phoneme count must be >= 1");
    if (tokens.empty()) throw ValidationError("decode: empty token stream");
    DecodeResult r;
    r.coverage.reserve(tokens.size());
    int b = 1;
    for (const auto& tok : tokens) {
        if (tok.count < 1 || tok.count > 2)
            throw ValidationError("decode: count must be 1 or 2");
        int e = b + tok.count - 1;
        if (e > phoneme_count)
            throw OverrunError("decode: frame covers phoneme " + std::to_string(e) +
                               " but utterance has " + std::to_string(phoneme_count));
        r.coverage.push_back({b, e});
        b = (tok.shift == Shift::Go) ? e + 1 : e;
    }
    r.terminated = tokens.back().shift == Shift::Go && r.coverage.back().e == phoneme_count;
    return r;
}

namespace {

// interval of phoneme i (1-based) is (start, end]
double interval_start(const ForcedAlignment& a, int i) {
    return i == 1 ? 0.0 : a.end_frames[i - 2];
}

// frame t spans (t-1, t]; closed right edge on the phoneme interval
bool active_in_frame(const ForcedAlignment& a, int i, int t) {
    return interval_start(a, i) < static_cast<double>(t) &&
           a.end_frames[i - 1] > static_cast<double>(t - 1);
}

}  // namespace

std::vector<DurationToken> encode_alignment(const ForcedAlignment& a) {
    a.validate();
    const int m = a.phoneme_count();
    const int ideal_frames = static_cast<int>(std::ceil(a.end_frames[m - 1]));
    if (ideal_frames == 0) throw ValidationError("encode: empty utterance");

    std::vector<DurationToken> tokens;
    int b = 1;
    const int guard = 25 * m + ideal_frames + 16;
    for (int t = 1;; ++t) {
        // consecutive phonemes from the pointer that are active in frame t;
        // probing three is enough to notice the over-capacity case
        int run = 0;
        while (run < 3 && b + run <= m && active_in_frame(a, b + run, t)) ++run;

        int count;
        bool capped = false;
        if (run == 0) {
            // pointer lags the alignment (an earlier frame held >2 phonemes):
            // spill rightward two at a time until caught up
            count = std::min(2, m - b + 1);
        } else {
            count = std::min(run, 2);
            capped = run > 2;
        }
        int e = b + count - 1;
        bool go = capped ? false : a.end_frames[e - 1] <= static_cast<double>(t);
        tokens.push_back({go ? Shift::Go : Shift::Stay, count});
        if (go && e == m) break;
        b = go ? e + 1 : e;
        if (static_cast<int>(tokens.size()) > guard)
            throw ValidationError("encode: failed to terminate (internal error)");
    }
    return tokens;
}

CoverageStats coverage_stats(const std::vector<DurationToken>& tokens, int phoneme_count) {
    DecodeResult dec = decode_tokens(tokens, phoneme_count);
    CoverageStats st;
    std::vector<int> per_phoneme(phoneme_count + 1, 0);
    int stays = 0, twos = 0;
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t].shift == Shift::Stay) ++stays;
        if (tokens[t].count == 2) ++twos;
        for (int i = dec.coverage[t].b; i <= dec.coverage[t].e; ++i) ++per_phoneme[i];
    }
    for (int i = 1; i <= phoneme_count; ++i) st.frames_per_phoneme[per_phoneme[i]]++;
    st.stay_rate = static_cast<double>(stays) / static_cast<double>(tokens.size());
    st.two_phoneme_frame_rate = static_cast<double>(twos) / static_cast<double>(tokens.size());
    return st;
}

ForcedAlignment alignment_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ParseError(std::string("alignment json: ") + e.what());
    }
    ForcedAlignment a;
    a.phoneme_ids = j.at("phonemes").get<std::vector<int>>();
    a.end_frames = j.at("end_frames").get<std::vector<double>>();
    a.validate();
    return a;
}

std::string alignment_to_json(const ForcedAlignment& a) {
    nlohmann::json j;
    j["phonemes"] = a.phoneme_ids;
    j["end_frames"] = a.end_frames;
    return j.dump();
}

ForcedAlignment alignment_from_interval_json(const std::string& text,
                                             const std::map<std::string, int>& phoneme_ids) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ParseError(std::string("interval json: ") + e.what());
    }
    constexpr double kFramesPerSecond = 12.5;
    ForcedAlignment a;
    for (const auto& iv : j.at("intervals")) {
        std::string name = iv.at("phoneme");
        auto it = phoneme_ids.find(name);
        if (it == phoneme_ids.end())
            throw ParseError("interval json: unknown phoneme \"" + name + "\"");
        a.phoneme_ids.push_back(it->second);
        a.end_frames.push_back(iv.at("end_s").get<double>() * kFramesPerSecond);
    }
    a.validate();
    return a;
}

}  // namespace streamtts
