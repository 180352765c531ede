#include "streamtts/engine.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace streamtts {

namespace {

// count-2 classes are invalid when the pointer sits on the last phoneme,
// stay classes when the forced-go guard fires
void ban_count2(int semantic_vocab, std::vector<int>& banned) {
    for (int s = 0; s < semantic_vocab; ++s) {
        banned.push_back(s * 4 + 1);
        banned.push_back(s * 4 + 3);
    }
}

void ban_stay(int semantic_vocab, std::vector<int>& banned) {
    for (int s = 0; s < semantic_vocab; ++s) {
        banned.push_back(s * 4 + 0);
        banned.push_back(s * 4 + 1);
    }
}

struct ScopedTimer {
    Clock& clock;
    uint64_t& sink;
    uint64_t t0;
    ScopedTimer(Clock& c, uint64_t& s) : clock(c), sink(s), t0(c.now_ns()) {}
    ~ScopedTimer() { sink += clock.now_ns() - t0; }
};

}  // namespace

StreamEngine::StreamEngine(const Model<float>& model, const Lexicon& lex, Clock& clock,
                           EngineOptions opt)
    : model_(model),
      lex_(lex),
      clock_(clock),
      opt_(opt),
      la_eff_(std::min(opt.la_cap, model.cfg.la_cap)),
      rng_(opt.seed),
      prev_sem_(model.cfg.bos_semantic()) {
    if (opt.la_cap < 0) throw ValidationError("engine: negative look-ahead cap");
    if (opt.guard_frames_per_phoneme < 1)
        throw ValidationError("engine: guard must be at least 1");
    // default speaker: deterministic unit vector, replaced by prompts
    spk_.assign(model.cfg.speaker_dim, 0.0f);
    float u = 1.0f / std::sqrt(static_cast<float>(model.cfg.speaker_dim));
    for (auto& x : spk_) x = u;
}

void StreamEngine::recompute_embeddings() {
    const int w = static_cast<int>(phonemes_.size());
    embeds_.resize(w);
    uint64_t t0 = clock_.now_ns();
    // positions whose horizon just filled get their final prefix forward
    while (frozen_ < w && frozen_ + la_eff_ <= w - 1) {
        int e = frozen_ + la_eff_;
        auto rows = pt_prefix_forward(model_, phonemes_, e);
        embeds_[frozen_] = std::move(rows[frozen_]);
        ++times_.pt_passes;
        ++frozen_;
    }
    // everything after the frozen prefix re-evaluates against the new buffer
    if (frozen_ < w) {
        auto rows = pt_prefix_forward(model_, phonemes_, w - 1);
        ++times_.pt_passes;
        for (int i = frozen_; i < w; ++i) embeds_[i] = std::move(rows[i]);
    }
    times_.pt_ns += clock_.now_ns() - t0;
    if (stage_hook) stage_hook("pt");
}

void StreamEngine::push_word(const std::string& word) {
    push_phonemes(phonemize_word(word, lex_));
}

void StreamEngine::push_phonemes(const std::vector<int>& phonemes) {
    uint64_t call0 = clock_.now_ns();
    if (closed_) throw StateError("push after close");
    if (!have_arrival_) {
        have_arrival_ = true;
        first_arrival_ns_ = call0;
    }
    if (phonemes.empty()) return;  // no letters; skip
    int start = static_cast<int>(phonemes_.size());
    phonemes_.insert(phonemes_.end(), phonemes.begin(), phonemes.end());
    word_extents_.emplace_back(start, static_cast<int>(phonemes_.size()));
    recompute_embeddings();
    times_.active_ns += clock_.now_ns() - call0;
}

void StreamEngine::prefill_prompt(const Prompt& prompt) {
    uint64_t call0 = clock_.now_ns();
    if (steps_ != 0 || !phonemes_.empty() || closed_)
        throw StateError("prefill requires a fresh stream");
    if (!prompt.speaker.v.empty()) {
        prompt.speaker.validate(model_.cfg.speaker_dim);
        spk_ = prompt.speaker.v;
    }
    if (prompt.phonemes.empty()) return;

    const int m = static_cast<int>(prompt.phonemes.size());
    if (prompt.alignment.phoneme_count() != m)
        throw ValidationError("prompt: alignment phoneme count mismatch");
    if (prompt.alignment.phoneme_ids != prompt.phonemes)
        throw ValidationError("prompt: alignment phonemes disagree");
    std::vector<DurationToken> durations = encode_alignment(prompt.alignment);
    DecodeResult cov = decode_tokens(durations, m);
    const int frames = static_cast<int>(durations.size());
    if (prompt.grid.rows != model_.cfg.codebooks || prompt.grid.cols != frames)
        throw ValidationError("prompt: grid shape disagrees with alignment");
    for (int t = 0; t < frames; ++t)
        if (prompt.grid.at(0, t) < 0 || prompt.grid.at(0, t) >= model_.cfg.semantic_vocab)
            throw ValidationError("prompt: semantic token out of range");

    phonemes_ = prompt.phonemes;
    word_extents_.emplace_back(0, m);
    recompute_embeddings();

    for (int t = 0; t < frames; ++t) {
        int p = cov.coverage[t].b - 1;
        const std::vector<float>& slot_a = embeds_[p];
        const std::vector<float>* slot_b = (p + 1 < m) ? &embeds_[p + 1] : nullptr;
        consumed_hi_ = std::max(consumed_hi_, slot_b ? p + 1 : p);
        frozen_ = std::max(frozen_, consumed_hi_ + 1);
        {
            ScopedTimer st(clock_, times_.tt_ns);
            tt_step(model_, tt_, prev_sem_,
                    slot_a, slot_b, model_.cfg.speaker_to_tt ? &spk_ : nullptr, steps_);
        }
        if (stage_hook) stage_hook("tt");
        prev_sem_ = prompt.grid.at(0, t);
        ++steps_;
        ++times_.prefill_tt_steps;
    }
    prompt_frames_ = frames;
    pointer_ = m + 1;
    last_b_ = -1;
    streak_ = 0;
    times_.active_ns += clock_.now_ns() - call0;
}

void StreamEngine::close() {
    if (closed_) throw StateError("stream already closed");
    closed_ = true;
}

FrameOut StreamEngine::run_step(const std::vector<float>& slot_a,
                                const std::vector<float>* slot_b,
                                const std::vector<int>& banned, bool flush) {
    TtStepOut<float> tt;
    {
        ScopedTimer st(clock_, times_.tt_ns);
        tt = tt_step(model_, tt_, prev_sem_, slot_a, slot_b,
                     model_.cfg.speaker_to_tt ? &spk_ : nullptr, steps_);
    }
    ++times_.tt_steps;
    if (stage_hook) stage_hook("tt");

    JointToken tok;
    {
        ScopedTimer st(clock_, times_.sample_ns);
        if (opt_.joint_override) {
            tok = opt_.joint_override(tt.logits, banned);
            for (int b : banned)
                if (tok.joint_class() == b)
                    throw GenerationFault("joint override produced a banned class");
        } else {
            tok = sample_joint(tt.logits, opt_.sampling, rng_, banned);
        }
    }
    ++times_.samples;
    if (stage_hook) stage_hook("sample");

    std::vector<int> acoustics;
    {
        ScopedTimer st(clock_, times_.dt_ns);
        acoustics = dt_generate(model_, tt.h, tok.semantic, spk_, opt_.sampling, rng_);
    }
    ++times_.dt_columns;
    if (stage_hook) stage_hook("dt");

    FrameOut out;
    int sem_prev = prev_sem_;
    prev_sem_ = tok.semantic;
    ++steps_;

    if (steps_ == 1) {
        // no previous frame to resolve yet
        out.frame_index = 0;
        out.decodable = false;
        out.emit_time_ns = clock_.now_ns();
    } else {
        out.frame_index = steps_ - 1;
        out.tokens.reserve(1 + acoustics.size());
        out.tokens.push_back(sem_prev);
        out.tokens.insert(out.tokens.end(), acoustics.begin(), acoustics.end());
        out.emit_time_ns = clock_.now_ns();
        out.decodable = out.frame_index > prompt_frames_;
        if (out.decodable) {
            if (out_.empty()) {
                first_decodable_ns_ = out.emit_time_ns;
                times_.tt_steps_at_first_decodable = times_.tt_steps;
                times_.dt_columns_at_first_decodable = times_.dt_columns;
            }
            last_emit_ns_ = out.emit_time_ns;
            out_.push_back(out);
        }
    }

    if (!flush) {
        int e = pointer_ + tok.duration.count - 1;
        if (e > static_cast<int>(phonemes_.size()))
            throw GenerationFault("pointer overrun: frame covers phoneme " + std::to_string(e) +
                                  " of " + std::to_string(phonemes_.size()));
        pointer_ = (tok.duration.shift == Shift::Go) ? e + 1 : e;
    }
    return out;
}

std::optional<FrameOut> StreamEngine::try_step() {
    uint64_t call0 = clock_.now_ns();
    auto leave = [&](std::optional<FrameOut> r) {
        times_.active_ns += clock_.now_ns() - call0;
        return r;
    };
    if (terminal_) return leave(std::nullopt);
    const int m = static_cast<int>(phonemes_.size());

    if (pointer_ > m) {
        if (!closed_) return leave(std::nullopt);  // waiting for words
        if (steps_ == 0 || flushed_) {
            terminal_ = true;
            return leave(std::nullopt);
        }
        // flush: one step with PAD phoneme slots resolves the delayed row
        std::vector<float> zero(model_.cfg.pt.d_model, 0.0f);
        FrameOut out = run_step(zero, nullptr, {}, true);
        flushed_ = true;
        terminal_ = true;
        return leave(out);
    }
    if (pointer_ == m && !closed_)
        return leave(std::nullopt);  // the candidate second slot is not buffered yet

    int p = pointer_ - 1;
    const std::vector<float>& slot_a = embeds_[p];
    const std::vector<float>* slot_b = (p + 1 < m) ? &embeds_[p + 1] : nullptr;
    consumed_hi_ = std::max(consumed_hi_, slot_b ? p + 1 : p);
    frozen_ = std::max(frozen_, consumed_hi_ + 1);

    streak_ = (pointer_ == last_b_) ? streak_ + 1 : 1;
    last_b_ = pointer_;

    std::vector<int> banned;
    if (!slot_b) ban_count2(model_.cfg.semantic_vocab, banned);
    if (streak_ >= opt_.guard_frames_per_phoneme) ban_stay(model_.cfg.semantic_vocab, banned);

    return leave(run_step(slot_a, slot_b, banned, false));
}

void StreamEngine::note_decode(uint64_t ns) {
    times_.decode_ns += ns;
    ++times_.decodes;
}

LatencyReport StreamEngine::latency_report() const {
    if (out_.empty()) throw StateError("latency report: no decodable frames emitted");
    if (!have_arrival_) throw StateError("latency report: no words arrived");
    LatencyReport r;
    r.decodable_frames = static_cast<int>(out_.size());
    r.first_word_arrival_ns = first_arrival_ns_;
    r.first_decodable_emit_ns = first_decodable_ns_;
    r.last_emit_ns = last_emit_ns_;
    r.fpl_ms = static_cast<double>(first_decodable_ns_ - first_arrival_ns_) / 1e6;
    double audio_s = 0.08 * r.decodable_frames;
    r.rtf = (static_cast<double>(last_emit_ns_ - first_arrival_ns_) / 1e9) / audio_s;
    r.stages = times_;
    uint64_t staged = times_.pt_ns + times_.tt_ns + times_.dt_ns + times_.sample_ns;
    r.stages.other_ns = times_.active_ns > staged ? times_.active_ns - staged : 0;
    return r;
}

// ----------------------------------------------------------------------
// Offline reference generator.
// ----------------------------------------------------------------------

OfflineResult generate_offline(const Model<float>& m, const std::vector<int>& phonemes,
                               const std::vector<float>& speaker, const EngineOptions& opt,
                               const Prompt* prompt) {
    const int la_eff = std::min(opt.la_cap, m.cfg.la_cap);
    std::vector<int> tokens;
    int prompt_len = 0, prompt_frames = 0;
    if (prompt && !prompt->phonemes.empty()) {
        tokens = prompt->phonemes;
        prompt_len = static_cast<int>(tokens.size());
    }
    tokens.insert(tokens.end(), phonemes.begin(), phonemes.end());
    const int n = static_cast<int>(tokens.size());
    OfflineResult res;
    if (n == 0) return res;

    // consumption-time look-ahead: prompt positions saw only the prompt
    std::vector<int> la(n);
    for (int i = 0; i < n; ++i) {
        int horizon = (i < prompt_len) ? prompt_len - 1 - i : n - 1 - i;
        la[i] = std::min(la_eff, horizon);
    }
    auto embeds = pt_encode(m, tokens, la);

    std::vector<float> spk = speaker;
    if (spk.empty()) {
        spk.assign(m.cfg.speaker_dim, 1.0f / std::sqrt(static_cast<float>(m.cfg.speaker_dim)));
    }

    Rng rng(opt.seed);
    TtState<float> tt;
    int prev_sem = m.cfg.bos_semantic();
    int steps = 0;

    if (prompt && !prompt->phonemes.empty()) {
        std::vector<DurationToken> durations = encode_alignment(prompt->alignment);
        DecodeResult cov = decode_tokens(durations, prompt_len);
        prompt_frames = static_cast<int>(durations.size());
        for (int t = 0; t < prompt_frames; ++t) {
            int p = cov.coverage[t].b - 1;
            const std::vector<float>* slot_b = (p + 1 < prompt_len) ? &embeds[p + 1] : nullptr;
            tt_step(m, tt, prev_sem, embeds[p], slot_b,
                    m.cfg.speaker_to_tt ? &spk : nullptr, steps);
            prev_sem = prompt->grid.at(0, t);
            ++steps;
        }
    }

    int pointer = prompt_len + 1;
    int last_b = -1, streak = 0;
    bool flushed = false;
    while (true) {
        bool flush = pointer > n;
        std::vector<int> banned;
        const std::vector<float>* slot_a = nullptr;
        const std::vector<float>* slot_b = nullptr;
        std::vector<float> zero(m.cfg.pt.d_model, 0.0f);
        if (flush) {
            if (steps == 0 || flushed) break;
            slot_a = &zero;
        } else {
            int p = pointer - 1;
            slot_a = &embeds[p];
            slot_b = (p + 1 < n) ? &embeds[p + 1] : nullptr;
            streak = (pointer == last_b) ? streak + 1 : 1;
            last_b = pointer;
            if (!slot_b) ban_count2(m.cfg.semantic_vocab, banned);
            if (streak >= opt.guard_frames_per_phoneme) ban_stay(m.cfg.semantic_vocab, banned);
        }

        TtStepOut<float> step =
            tt_step(m, tt, prev_sem, *slot_a, slot_b, m.cfg.speaker_to_tt ? &spk : nullptr, steps);
        JointToken tok = sample_joint(step.logits, opt.sampling, rng, banned);
        std::vector<int> ac = dt_generate(m, step.h, tok.semantic, spk, opt.sampling, rng);

        int sem_prev = prev_sem;
        prev_sem = tok.semantic;
        ++steps;
        if (steps > 1) {
            int f = steps - 1;
            if (f > prompt_frames) {
                FrameOut fo;
                fo.frame_index = f;
                fo.tokens.push_back(sem_prev);
                fo.tokens.insert(fo.tokens.end(), ac.begin(), ac.end());
                fo.decodable = true;
                res.frames.push_back(std::move(fo));
            }
        }
        if (flush) {
            flushed = true;
            break;
        }
        int e = pointer + tok.duration.count - 1;
        if (e > n) throw GenerationFault("offline: pointer overrun");
        pointer = (tok.duration.shift == Shift::Go) ? e + 1 : e;
    }
    return res;
}

// ----------------------------------------------------------------------
// Token log.
// ----------------------------------------------------------------------

void write_token_log(const std::string& path, const std::vector<FrameOut>& frames) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write token log: " + path);
    for (const auto& fr : frames) {
        if (!fr.decodable) continue;
        f << fr.frame_index;
        for (int t : fr.tokens) f << ',' << t;
        f << ',' << fr.emit_time_ns << "\n";
    }
    if (!f) throw IoError("short write: " + path);
}

std::vector<FrameOut> read_token_log(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read token log: " + path);
    std::vector<FrameOut> frames;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string field;
        std::vector<uint64_t> vals;
        while (std::getline(is, field, ',')) vals.push_back(std::stoull(field));
        if (vals.size() < 3)
            throw ParseError("token log line " + std::to_string(lineno) + ": too few fields");
        FrameOut fr;
        fr.frame_index = static_cast<int>(vals.front());
        for (size_t i = 1; i + 1 < vals.size(); ++i)
            fr.tokens.push_back(static_cast<int>(vals[i]));
        fr.emit_time_ns = vals.back();
        fr.decodable = true;
        frames.push_back(std::move(fr));
    }
    return frames;
}

}  // namespace streamtts
