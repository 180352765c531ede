#pragma once

#include <array>
#include <string>
#include <vector>

#include "streamtts/corpus.hpp"
#include "streamtts/engine.hpp"
#include "streamtts/model.hpp"

namespace streamtts {

struct TrainConfig {
    double peak_lr = 5e-4;
    int warmup_epochs = 1;  // linear warmup over the first epoch
    int epochs = 10;
    int batch_size = 4;
    int chunk_frames = 64;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double adam_eps = 1e-8;
    double min_lr_ratio = 0.1;  // cosine decays to this fraction of peak
    bool freeze_dt = false;
    bool use_speaker = true;
    uint64_t seed = 0;

    void validate() const;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

// warmup 0 -> peak over warmup steps, then cosine to min_lr_ratio * peak
double lr_at_step(const TrainConfig& cfg, int step, int steps_per_epoch);

// Decoupled-weight-decay Adam. Decay skips the RMSNorm gains; frozen
// parameters are untouched entirely.
class AdamW {
public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    void init(const ParameterStore<double>& ps);
    void step(ParameterStore<double>& ps, double lr);

    int t() const { return t_; }
    // serialization for resumable checkpoints
    const std::vector<std::vector<double>>& m() const { return m_; }
    const std::vector<std::vector<double>>& v() const { return v_; }
    void restore(int t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

private:
    double b1_ = 0.9, b2_ = 0.95, eps_ = 1e-8, wd_ = 0.1;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// A fixed-length training window cut from a same-speaker utterance stream.
struct Chunk {
    std::vector<int> phonemes;  // the coverage of the chunk's frames
    std::vector<int> la_limits;
    TokenGrid grid;
    std::vector<DurationToken> durations;
    int speaker_id = 0;
    std::vector<float> speaker_vec;
    std::string tag;
};

// Groups utterances by speaker, concatenates them in seeded order, and
// slices fixed-frame windows. Chunk boundaries land between frames; the
// phoneme window is exactly the coverage of the chunk's frames. The
// trailing remainder of each speaker stream is dropped.
std::vector<Chunk> make_chunks(const std::vector<Utterance>& utts, const CodecSpec& codec,
                               int chunk_frames, uint64_t seed, int la_cap = 10);

TrainItem<double> chunk_to_item(const Chunk& c);

// every 10th utterance held out for evaluation
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_corpus(
    const std::vector<Utterance>& utts);

struct TrainLog {
    // step, lr, loss_tt, loss_dt
    std::vector<std::array<double, 4>> rows;
};

void write_metrics_csv(const std::string& path, const TrainLog& log);

struct TrainerState {
    Model<double> model;
    TrainConfig cfg;
    AdamW opt;
    Rng rng;  // reserved stochastic state; saved so resumed runs replay exactly
    int step = 0;
    TrainLog log;

    int steps_per_epoch(int n_chunks) const;
    int total_steps(int n_chunks) const;
};

TrainerState make_trainer(const ModelConfig& mcfg, const TrainConfig& cfg, uint64_t model_seed);

// Runs until max_steps (or to completion when max_steps < 0). Aborts with a
// diagnostic snapshot next to `snapshot_path` if the loss goes non-finite.
void train_steps(TrainerState& st, const std::vector<Chunk>& chunks, int max_steps = -1,
                 const std::string& snapshot_path = "");

void save_trainer(const TrainerState& st, const std::string& path);
TrainerState load_trainer(const std::string& path);

struct EvalResult {
    double joint_accuracy = 0.0;
    double dt_accuracy = 0.0;
    double per_proxy = 0.0;
    int64_t joint_count = 0;
    int64_t dt_count = 0;
    int utterances = 0;
};

TokenGrid grid_from_frames(const std::vector<FrameOut>& frames, const CodecSpec& spec);

// Teacher-forced argmax accuracies over held-out chunks plus the
// free-running phoneme-error-rate proxy at temperature 0.
EvalResult evaluate(Model<double>& model, const std::vector<Chunk>& heldout_chunks,
                    const std::vector<Utterance>& heldout_utts, const CodecSpec& codec);

struct AblationRow {
    bool freeze_dt = false;
    bool use_speaker = false;
    EvalResult eval;
};

// The 2x2 freeze_dt x use_speaker grid, each cell trained from scratch for
// grid_steps and evaluated on the held-out split.
std::vector<AblationRow> run_ablation_grid(const ModelConfig& base_mcfg,
                                           const TrainConfig& base_tcfg,
                                           const std::vector<Utterance>& utts,
                                           const CodecSpec& codec, int grid_steps);

std::string ablation_report(const std::vector<AblationRow>& rows);

}  // namespace streamtts
