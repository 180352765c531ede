#include "streamtts/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "streamtts/rng.hpp"

namespace streamtts {

void CorpusSpec::validate() const {
    codec.validate();
    if (speakers < 1 || utterances < 1) throw ValidationError("corpus: empty spec");
    if (min_phonemes < 2 || max_phonemes < min_phonemes)
        throw ValidationError("corpus: bad phoneme length range");
    if (duration_jitter < 0.0 || duration_jitter > 0.5)
        throw ValidationError("corpus: jitter out of range");
    if (speaker_tempo_spread < 0.0 || speaker_tempo_spread > 0.3)
        throw ValidationError("corpus: tempo spread out of range");
    // the shortest possible duration must stay above the 0.4-frame floor
    double floor = (1.0 - speaker_tempo_spread) * 1.125 - duration_jitter;
    if (floor < 0.4) throw ValidationError("corpus: durations could drop below 0.4 frames");
}

CorpusSpec corpus_spec_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ParseError(std::string("corpus spec: ") + e.what());
    }
    CorpusSpec s;
    s.speakers = j.value("speakers", s.speakers);
    s.utterances = j.value("utterances", s.utterances);
    s.min_phonemes = j.value("min_phonemes", s.min_phonemes);
    s.max_phonemes = j.value("max_phonemes", s.max_phonemes);
    s.duration_jitter = j.value("duration_jitter", s.duration_jitter);
    s.speaker_tempo_spread = j.value("speaker_tempo_spread", s.speaker_tempo_spread);
    s.master_seed = j.value("master_seed", s.master_seed);
    if (j.contains("codec")) {
        const auto& c = j["codec"];
        s.codec.semantic_vocab = c.value("semantic_vocab", s.codec.semantic_vocab);
        s.codec.acoustic_vocab = c.value("acoustic_vocab", s.codec.acoustic_vocab);
    }
    s.validate();
    return s;
}

std::string corpus_spec_to_json(const CorpusSpec& s) {
    nlohmann::json j;
    j["speakers"] = s.speakers;
    j["utterances"] = s.utterances;
    j["min_phonemes"] = s.min_phonemes;
    j["max_phonemes"] = s.max_phonemes;
    j["duration_jitter"] = s.duration_jitter;
    j["speaker_tempo_spread"] = s.speaker_tempo_spread;
    j["master_seed"] = s.master_seed;
    j["codec"] = {{"semantic_vocab", s.codec.semantic_vocab},
                  {"acoustic_vocab", s.codec.acoustic_vocab}};
    return j.dump();
}

double base_duration_frames(int phoneme_id) {
    // 1.125 .. 2.875 frames in exact eighths: dyadic values keep the running
    // alignment phase exactly representable, so the stay/go timing stays a
    // deterministic function of the phoneme prefix rather than of float
    // rounding; the joint head can then actually learn it
    return 1.125 + 0.125 * ((phoneme_id * 7 + 3) % 15);
}

std::vector<float> speaker_vector(uint64_t master_seed, int speaker_id, int dim) {
    Rng rng(Rng::mix(master_seed, Rng::mix(0x5eafULL, static_cast<uint64_t>(speaker_id))));
    std::vector<float> v(dim);
    double norm2 = 0.0;
    for (auto& x : v) {
        x = static_cast<float>(rng.normal());
        norm2 += static_cast<double>(x) * x;
    }
    float inv = static_cast<float>(1.0 / std::sqrt(norm2));
    for (auto& x : v) x *= inv;
    return v;
}

namespace {

int acoustic_token(int head, int speaker_id, int row, int frame, int vocab) {
    int parity = frame % 2;
    return (head * 131 + speaker_id * 17 + row * 29 + parity * 43) % vocab;
}

std::vector<std::string> sorted_words(const Lexicon& lex) {
    std::vector<std::string> ws;
    ws.reserve(lex.words.size());
    for (const auto& [w, _] : lex.words) ws.push_back(w);
    std::sort(ws.begin(), ws.end());
    return ws;
}

}  // namespace

TokenGrid Utterance::grid(const CodecSpec& spec) const {
    int t = frames();
    TokenGrid g(spec.codebooks, t);
    for (int c = 0; c < t; ++c) g.at(0, c) = semantic[c];
    for (int r = 1; r < spec.codebooks; ++r) {
        g.at(r, 0) = spec.acoustic_pad();
        for (int c = 1; c < t; ++c) g.at(r, c) = acoustic[c - 1][r - 1];
    }
    return g;
}

Utterance generate_utterance(const CorpusSpec& spec, const Lexicon& lex, uint64_t utt_seed) {
    spec.validate();
    if (lex.words.empty()) throw ValidationError("corpus: lexicon has no words");
    if (lex.inventory_size() > kSemanticHeadSpace)
        throw ValidationError("corpus: inventory too large for the semantic map");
    if (spec.codec.semantic_vocab < 2 * kSemanticHeadSpace)
        throw ValidationError("corpus: semantic vocab too small for the semantic map");

    Rng rng(Rng::mix(spec.master_seed, utt_seed));
    Utterance u;
    u.seed = utt_seed;
    u.speaker_id = static_cast<int>(rng.uniform_int(spec.speakers));

    // phoneme sequence: lexicon words back to back, skipping a word when it
    // would create an adjacent duplicate (the error-rate proxy collapses
    // repeats, so true doubles must not occur in ground truth)
    auto words = sorted_words(lex);
    int target = spec.min_phonemes +
                 static_cast<int>(rng.uniform_int(spec.max_phonemes - spec.min_phonemes + 1));
    while (static_cast<int>(u.phonemes.size()) < target) {
        const auto& w = words[rng.uniform_int(words.size())];
        const auto& ph = lex.words.at(w);
        if (!u.phonemes.empty() && ph.front() == u.phonemes.back()) continue;
        bool internal_dup = false;
        for (size_t i = 1; i < ph.size(); ++i)
            if (ph[i] == ph[i - 1]) internal_dup = true;
        if (internal_dup) continue;
        u.phonemes.insert(u.phonemes.end(), ph.begin(), ph.end());
    }
    u.phonemes.resize(target);

    double tempo = 1.0 + spec.speaker_tempo_spread *
                             (2.0 * Rng(Rng::mix(spec.master_seed,
                                                 Rng::mix(0x7e94ULL, u.speaker_id)))
                                        .uniform() -
                              1.0);
    double t_acc = 0.0;
    u.alignment.phoneme_ids = u.phonemes;
    for (int ph : u.phonemes) {
        double d = base_duration_frames(ph) * tempo +
                   rng.uniform(-spec.duration_jitter, spec.duration_jitter);
        t_acc += d;
        u.alignment.end_frames.push_back(t_acc);
    }

    u.durations = encode_alignment(u.alignment);
    DecodeResult cov = decode_tokens(u.durations, u.alignment.phoneme_count());

    int frames = static_cast<int>(u.durations.size());
    u.semantic.resize(frames);
    u.acoustic.assign(frames, std::vector<int>(spec.codec.codebooks - 1, 0));
    for (int t = 0; t < frames; ++t) {
        int head = u.phonemes[cov.coverage[t].b - 1];
        bool two = cov.coverage[t].e > cov.coverage[t].b;
        u.semantic[t] = semantic_token(head, two);
        for (int r = 1; r < spec.codec.codebooks; ++r)
            u.acoustic[t][r - 1] =
                acoustic_token(head, u.speaker_id, r, t, spec.codec.acoustic_vocab);
    }

    u.speaker_vec = speaker_vector(spec.master_seed, u.speaker_id, 16);
    return u;
}

size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
            size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double phoneme_error_rate(const std::vector<int>& reference, const TokenGrid& hypothesis) {
    std::vector<int> hyp;
    for (int t = 0; t < hypothesis.cols; ++t) {
        int head = semantic_head(hypothesis.at(0, t));
        if (hyp.empty() || hyp.back() != head) hyp.push_back(head);
    }
    if (reference.empty()) return hyp.empty() ? 0.0 : 1.0;
    double per = static_cast<double>(levenshtein(reference, hyp)) /
                 static_cast<double>(reference.size());
    return std::min(per, 1.0);
}

void write_manifest(const std::string& path, const CorpusSpec& spec,
                    const std::vector<Utterance>& utts) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write manifest: " + path);
    f << corpus_spec_to_json(spec) << "\n";
    for (const auto& u : utts) {
        nlohmann::json j;
        j["seed"] = u.seed;
        j["speaker"] = u.speaker_id;
        j["phonemes"] = u.phonemes;
        j["end_frames"] = u.alignment.end_frames;
        j["semantic"] = u.semantic;
        j["acoustic"] = u.acoustic;
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("short write: " + path);
}

std::pair<CorpusSpec, std::vector<Utterance>> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read manifest: " + path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError("manifest: empty file");
    CorpusSpec spec = corpus_spec_from_json(line);
    std::vector<Utterance> utts;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw ParseError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        Utterance u;
        u.seed = j.at("seed").get<uint64_t>();
        u.speaker_id = j.at("speaker").get<int>();
        u.phonemes = j.at("phonemes").get<std::vector<int>>();
        u.alignment.phoneme_ids = u.phonemes;
        u.alignment.end_frames = j.at("end_frames").get<std::vector<double>>();
        u.semantic = j.at("semantic").get<std::vector<int>>();
        u.acoustic = j.at("acoustic").get<std::vector<std::vector<int>>>();
        u.durations = encode_alignment(u.alignment);
        if (static_cast<int>(u.durations.size()) != u.frames())
            throw ValidationError("manifest line " + std::to_string(lineno) +
                                  ": stream lengths disagree");
        u.speaker_vec = speaker_vector(spec.master_seed, u.speaker_id, 16);
        utts.push_back(std::move(u));
    }
    return {spec, utts};
}

std::vector<Utterance> generate_corpus(const CorpusSpec& spec, const Lexicon& lex) {
    std::vector<Utterance> utts;
    utts.reserve(spec.utterances);
    for (int i = 0; i < spec.utterances; ++i)
        utts.push_back(generate_utterance(spec, lex, static_cast<uint64_t>(i)));
    return utts;
}

}  // namespace streamtts
