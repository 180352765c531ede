#pragma once

#include <optional>
#include <string>
#include <vector>

#include "streamtts/align.hpp"
#include "streamtts/codec.hpp"
#include "streamtts/params.hpp"
#include "streamtts/rng.hpp"
#include "streamtts/tensor.hpp"

namespace streamtts {

struct StackConfig {
    int d_model = 64;
    int layers = 2;
    int heads = 4;
    int d_ff = 128;
};

// Grid geometry (12 codebooks, 4 duration classes, look-ahead cap 10) is
// structural and never scales down; the toy preset only shrinks widths.
struct ModelConfig {
    int phoneme_vocab = 32;
    int semantic_vocab = 64;   // V_s
    int duration_vocab = 4;
    int acoustic_vocab = 64;   // V_a
    int codebooks = 12;        // Q
    int la_cap = 10;
    int speaker_dim = 16;
    bool use_speaker = true;    // condition DT on the speaker vector
    bool speaker_to_tt = false; // ablation extra: add the speaker to TT input
    double rope_base = 10000.0;
    double norm_eps = 1e-5;
    StackConfig pt, tt, dt;

    int joint_classes() const { return semantic_vocab * duration_vocab + 1; }
    int joint_pad_class() const { return semantic_vocab * duration_vocab; }
    int bos_semantic() const { return semantic_vocab; }

    void validate() const;

    static ModelConfig toy();
    // The paper-scale reference shape (TT 12x16x1024/4096, PT 6x8, DT
    // 4x8/8192); constructible for config echo, far too big to train here.
    static ModelConfig paper_reference();
};

ModelConfig model_config_from_json(const std::string& text);
std::string model_config_to_json(const ModelConfig& cfg);

// Joint semantic x duration class: class = semantic * 4 + packed duration,
// plus one PAD class at index V_s*4 used only as teacher-forcing filler.
struct JointToken {
    int semantic = 0;
    DurationToken duration{Shift::Stay, 1};

    int joint_class() const { return semantic * 4 + duration.packed_id(); }
    static JointToken from_class(int c) {
        return {c / 4, DurationToken::from_packed(c % 4)};
    }
    bool operator==(const JointToken&) const = default;
};

// Unit-norm speaker embedding.
struct SpeakerVector {
    std::vector<float> v;
    void validate(int dim) const;
};

// ----------------------------------------------------------------------
// Weight binding and the raw inference path.
// ----------------------------------------------------------------------

template <typename T>
struct StackView {
    StackConfig cfg;
    struct Layer {
        const T *attn_norm, *wq, *wk, *wv, *wo, *ff_norm, *wg, *wu, *wd;
    };
    std::vector<Layer> layers;
    const T* final_norm = nullptr;
};

template <typename T>
struct KvCache {
    int cols = 0;
    std::vector<std::vector<T>> k, v;  // per layer, row-major [cols x d]

    void init(int layers) {
        cols = 0;
        k.assign(layers, {});
        v.assign(layers, {});
    }
};

template <typename T>
struct Model {
    ModelConfig cfg;
    ParameterStore<T> params;

    StackView<T> pt, tt, dt;

    static Model make(const ModelConfig& cfg, uint64_t seed);
    static Model from_store(const ModelConfig& cfg, ParameterStore<T> store);

    void bind();  // resolve StackViews; call after params stop moving

    template <typename U>
    Model<U> cast() const {
        return Model<U>::from_store(cfg, params.template cast<U>());
    }
};

// One incremental decoder step: appends a column to the cache and returns
// the final-normed hidden row. Position is the cache length before the call.
template <typename T>
std::vector<T> stack_step(const StackView<T>& s, KvCache<T>& cache, const std::vector<T>& x,
                          double rope_base, double eps);

// Full-sequence forward with per-row attention windows; bit-identical to
// running stack_step row by row under causal windows.
template <typename T>
std::vector<T> stack_full(const StackView<T>& s, const std::vector<T>& x, int n,
                          const RowWindows& win, const std::vector<int>& positions,
                          double rope_base, double eps);

// ----------------------------------------------------------------------
// Phoneme transformer.
// ----------------------------------------------------------------------

// Contextual embeddings for every position of tokens[0..prefix_end], as if
// the buffer ended there (interior windows are [0, min(j+la_cap, end)]).
template <typename T>
std::vector<std::vector<T>> pt_prefix_forward(const Model<T>& m, const std::vector<int>& tokens,
                                              int prefix_end);

// Embedding i is the PT output at position i computed over the prefix
// [0, i + la_limits[i]]; nothing beyond that horizon can influence it.
template <typename T>
std::vector<std::vector<T>> pt_encode(const Model<T>& m, const std::vector<int>& tokens,
                                      const std::vector<int>& la_limits);

// ----------------------------------------------------------------------
// Temporal transformer.
// ----------------------------------------------------------------------

template <typename T>
struct TtState {
    KvCache<T> cache;
    int cols() const { return cache.cols; }
};

template <typename T>
struct TtStepOut {
    std::vector<T> h;       // final-normed hidden, feeds the depth transformer
    std::vector<T> logits;  // V_s*4 + 1 joint classes
};

// slot_b == nullptr selects the ZERO slot. expected_col, when >= 0, guards
// against cache drift.
template <typename T>
TtStepOut<T> tt_step(const Model<T>& m, TtState<T>& state, int prev_semantic,
                     const std::vector<T>& slot_a, const std::vector<T>* slot_b,
                     const std::vector<T>* spk = nullptr, int expected_col = -1);

// ----------------------------------------------------------------------
// Sampling.
// ----------------------------------------------------------------------

struct SampleOptions {
    double temperature = 0.0;  // 0 = argmax
    int top_k = 0;             // 0 = no truncation
};

// Samples a joint class. The PAD class is always masked; banned_classes adds
// stream-level constraints (e.g. count-2 at the last phoneme).
JointToken sample_joint(const std::vector<float>& logits, const SampleOptions& opt, Rng& rng,
                        const std::vector<int>& banned_classes = {});
JointToken sample_joint(const std::vector<double>& logits, const SampleOptions& opt, Rng& rng,
                        const std::vector<int>& banned_classes = {});

// class index sampled from arbitrary logits (codebook rows; no PAD handling)
int sample_class(const std::vector<double>& logits, const SampleOptions& opt, Rng& rng);

// ----------------------------------------------------------------------
// Depth transformer.
// ----------------------------------------------------------------------

// Generates the 11 acoustic tokens of one grid column, autoregressively
// along the codebook axis, conditioned on [speaker; h_t; semantic].
template <typename T>
std::vector<int> dt_generate(const Model<T>& m, const std::vector<T>& h_t, int semantic,
                             const std::vector<T>& spk, const SampleOptions& opt, Rng& rng);

// ----------------------------------------------------------------------
// Teacher-forced training graph.
// ----------------------------------------------------------------------

template <typename T>
struct TrainItem {
    std::vector<int> phonemes;
    std::vector<int> la_limits;
    TokenGrid grid;                        // delayed, frames() columns
    std::vector<DurationToken> durations;  // one per column
    std::vector<T> speaker;
    std::string tag;  // for error messages
};

struct NllNodes {
    int loss_tt = -1;    // scalar graph node: mean CE over joint classes
    int loss_dt = -1;    // scalar graph node: mean CE over rows 2..12, cols >= 2
    int tt_logits = -1;  // [T x (V_s*4+1)]
    int dt_logits = -1;  // [(T-1)*11 x V_a], row-major by column then codebook
    std::vector<int> tt_targets;
    std::vector<int> dt_targets;
};

// Builds PT (prefix forwards), TT and DT teacher-forced losses for one item
// into the graph. Gradients flow into every stack through the slots and h_t.
template <typename T>
NllNodes build_teacher_forced(Graph<T>& g, Model<T>& m, const TrainItem<T>& item);

// The spec-level operation: summed losses over a batch, no gradients.
template <typename T>
std::pair<double, double> teacher_forced_nll(Model<T>& m, const std::vector<TrainItem<T>>& batch);

// explicit instantiations live in model.cpp
extern template struct Model<float>;
extern template struct Model<double>;

}  // namespace streamtts
