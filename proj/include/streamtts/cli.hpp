#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "streamtts/engine.hpp"
#include "streamtts/trainer.hpp"

namespace streamtts {

// Word feed: all-at-once reproduces output streaming (full text known),
// fixed-interval word-by-word reproduces full streaming, timed replays
// recorded release offsets, stdin reads one word per line live.
struct FeedSchedule {
    enum class Mode { AllAtOnce, FixedInterval, Timed, Stdin };
    Mode mode = Mode::AllAtOnce;
    std::vector<std::string> words;
    double interval_ms = 0.0;
    std::vector<double> release_ms;  // Timed mode, non-decreasing

    void validate() const;
};

FeedSchedule feed_from_json(const std::string& text);

struct SynthOptions {
    std::string checkpoint;
    std::string out_wav;
    std::string token_log;
    std::optional<std::string> prompt_path;
    double temperature = 0.0;
    int top_k = 0;
    uint64_t seed = 0;
    int la_cap = 10;
    bool virtual_clock = false;
    bool quiet = false;
};

struct SynthResult {
    LatencyReport report;
    int frames = 0;
    size_t samples = 0;
};

struct BenchStageDelays {
    double pt_ms = 0, tt_ms = 0, sample_ms = 0, dt_ms = 0, decode_ms = 0;
};

struct BenchOptions {
    std::string checkpoint;
    std::string workload;  // json file
    int runs = 10;
    std::string report_path;
};

struct BenchReport {
    double fpl_ms_median = 0, fpl_ms_p95 = 0;
    double rtf_median = 0;
    int runs = 0, faulted = 0;
    bool call_count_identity = true;
    nlohmann::json json;  // full report incl. per-stage breakdown + config echo
};

Model<float> load_model_f32(const std::string& checkpoint_path);
Prompt prompt_from_utterance(const Utterance& u, const CodecSpec& spec);
Prompt load_prompt_json(const std::string& path, const CodecSpec& spec);

void run_corpus(const std::string& spec_path, const std::string& out_dir);

struct TrainCliOptions {
    std::string manifest;
    std::string out_checkpoint;
    std::string metrics_csv;
    std::optional<std::string> model_config_path;
    std::optional<std::string> train_config_path;
    std::optional<std::string> resume_path;
    // flag overrides (flags > config file > defaults)
    std::optional<bool> freeze_dt;
    std::optional<bool> use_speaker;
    std::optional<int> epochs;
    std::optional<uint64_t> seed;
};

void run_train(const TrainCliOptions& opt);

SynthResult run_synth(const SynthOptions& opt, const FeedSchedule& feed);

BenchReport run_bench(const BenchOptions& opt);

struct EvalCliOptions {
    std::string manifest;
    std::optional<std::string> checkpoint;  // single-model eval
    bool grid = false;                      // 2x2 freeze_dt x use_speaker
    int grid_steps = 60;
    std::optional<std::string> model_config_path;
    std::optional<std::string> train_config_path;
    std::string report_path;
};

void run_eval(const EvalCliOptions& opt);

}  // namespace streamtts
