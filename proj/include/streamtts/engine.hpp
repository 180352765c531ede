#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "streamtts/clock.hpp"
#include "streamtts/codec.hpp"
#include "streamtts/corpus.hpp"
#include "streamtts/model.hpp"
#include "streamtts/phonemizer.hpp"

namespace streamtts {

struct EngineOptions {
    SampleOptions sampling;
    uint64_t seed = 0;
    int la_cap = 10;                    // effective look-ahead, clamped to the model cap
    int guard_frames_per_phoneme = 25;  // forced-go guard
    // replaces the sampler when set (deterministic policies in tests); must
    // respect the banned-class list or the step faults
    std::function<JointToken(const std::vector<float>&, const std::vector<int>&)> joint_override;
};

// One resolved frame: 12 token IDs with the acoustic delay already folded
// in (frame f becomes decodable after engine step f+1). Step 1 yields a
// non-decodable marker since no previous frame exists yet.
struct FrameOut {
    int frame_index = 0;  // 1-based
    std::vector<int> tokens;
    uint64_t emit_time_ns = 0;
    bool decodable = false;
};

// Voice prompt: phonemes, their forced alignment, the prompt token grid and
// the speaker vector. Prefill teacher-forces it; no prompt frames are emitted.
struct Prompt {
    std::vector<int> phonemes;
    TokenGrid grid;
    ForcedAlignment alignment;
    SpeakerVector speaker;
};

struct StageTimes {
    uint64_t pt_ns = 0, tt_ns = 0, dt_ns = 0, sample_ns = 0, other_ns = 0, decode_ns = 0;
    int64_t pt_passes = 0, tt_steps = 0, dt_columns = 0, samples = 0, decodes = 0;
    int64_t prefill_tt_steps = 0;
    // generation-phase counts captured when the first decodable frame emitted
    int64_t tt_steps_at_first_decodable = -1;
    int64_t dt_columns_at_first_decodable = -1;
    uint64_t active_ns = 0;  // total time spent inside engine calls
};

struct LatencyReport {
    double fpl_ms = 0.0;
    double rtf = 0.0;
    int decodable_frames = 0;
    StageTimes stages;
    uint64_t first_word_arrival_ns = 0;
    uint64_t first_decodable_emit_ns = 0;
    uint64_t last_emit_ns = 0;
};

// The full-stream scheduler. Words arrive incrementally; phoneme embeddings
// recompute under the dynamic look-ahead until finalized (horizon filled) or
// frozen (consumed by a step); TT/DT steps are gated on slot availability;
// the monotonic pointer advances by sampled duration tokens.
class StreamEngine {
public:
    StreamEngine(const Model<float>& model, const Lexicon& lex, Clock& clock,
                 EngineOptions opt);

    void prefill_prompt(const Prompt& prompt);
    void push_word(const std::string& word);
    void push_phonemes(const std::vector<int>& phonemes);  // word-level feed, pre-phonemized
    void close();
    std::optional<FrameOut> try_step();

    bool closed() const { return closed_; }
    bool finished() const { return terminal_; }
    int steps() const { return steps_; }
    int pointer() const { return pointer_; }
    int buffer_size() const { return static_cast<int>(phonemes_.size()); }
    int tt_cache_cols() const { return tt_.cache.cols; }
    int frozen_positions() const { return frozen_; }
    const std::vector<float>& embedding(int pos) const { return embeds_.at(pos); }
    const std::vector<FrameOut>& emitted() const { return out_; }
    const StageTimes& ledger() const { return times_; }

    // the codec consumer reports decode work so the report can include it
    void note_decode(uint64_t ns);

    LatencyReport latency_report() const;

    // invoked after each internal stage; the bench's virtual-clock mode uses
    // this to inject per-stage delays
    std::function<void(const char*)> stage_hook;

private:
    void recompute_embeddings();
    FrameOut run_step(const std::vector<float>& slot_a, const std::vector<float>* slot_b,
                      const std::vector<int>& banned, bool flush);

    const Model<float>& model_;
    const Lexicon& lex_;
    Clock& clock_;
    EngineOptions opt_;
    int la_eff_;
    Rng rng_;

    std::vector<int> phonemes_;
    std::vector<std::pair<int, int>> word_extents_;
    std::vector<std::vector<float>> embeds_;
    int frozen_ = 0;        // prefix length of final/consumed embeddings
    int consumed_hi_ = -1;  // highest position used by a step

    TtState<float> tt_;
    int steps_ = 0;
    int prompt_frames_ = 0;
    int pointer_ = 1;  // 1-based
    int prev_sem_;
    int last_b_ = -1;
    int streak_ = 0;
    bool closed_ = false, flushed_ = false, terminal_ = false;
    std::vector<float> spk_;

    std::vector<FrameOut> out_;
    bool have_arrival_ = false;
    uint64_t first_arrival_ns_ = 0;
    uint64_t first_decodable_ns_ = 0, last_emit_ns_ = 0;
    StageTimes times_;
};

// The non-streaming reference generator: all text known up front, same
// consumption-time look-ahead schedule and the same sampler draw sequence
// as the engine, without the incremental bookkeeping. With all words pushed
// before the first step, the engine's token log must match this bit for bit.
struct OfflineResult {
    std::vector<FrameOut> frames;  // decodable frames only
};

OfflineResult generate_offline(const Model<float>& m, const std::vector<int>& phonemes,
                               const std::vector<float>& speaker, const EngineOptions& opt,
                               const Prompt* prompt = nullptr);

// Token log: one line per decodable frame — index, 12 token IDs, then the
// emit timestamp (ns). Reproducibility hashing excludes the timestamp field.
void write_token_log(const std::string& path, const std::vector<FrameOut>& frames);
std::vector<FrameOut> read_token_log(const std::string& path);

}  // namespace streamtts
