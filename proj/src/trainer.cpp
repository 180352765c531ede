#include "streamtts/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "streamtts/checkpoint.hpp"

namespace streamtts {

void TrainConfig::validate() const {
    if (peak_lr <= 0.0) throw ValidationError("train: peak lr must be positive");
    if (epochs < 1 || batch_size < 1) throw ValidationError("train: bad epochs/batch");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
        throw ValidationError("train: warmup span exceeds total steps");
    if (chunk_frames < 8) throw ValidationError("train: chunk length must be at least 8");
    if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0) throw ValidationError("train: bad lr floor");
}

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ParseError(std::string("train config: ") + e.what());
    }
    TrainConfig c;
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.chunk_frames = j.value("chunk_frames", c.chunk_frames);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
    c.freeze_dt = j.value("freeze_dt", c.freeze_dt);
    c.use_speaker = j.value("use_speaker", c.use_speaker);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

std::string train_config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["peak_lr"] = c.peak_lr;
    j["warmup_epochs"] = c.warmup_epochs;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["chunk_frames"] = c.chunk_frames;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["weight_decay"] = c.weight_decay;
    j["adam_eps"] = c.adam_eps;
    j["min_lr_ratio"] = c.min_lr_ratio;
    j["freeze_dt"] = c.freeze_dt;
    j["use_speaker"] = c.use_speaker;
    j["seed"] = c.seed;
    return j.dump(2);
}

double lr_at_step(const TrainConfig& cfg, int step, int steps_per_epoch) {
    int warmup = cfg.warmup_epochs * steps_per_epoch;
    int total = cfg.epochs * steps_per_epoch;
    if (warmup > 0 && step < warmup)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (total <= warmup) return cfg.peak_lr;
    double prog = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    prog = std::min(prog, 1.0);
    double cosine = 0.5 * (1.0 + std::cos(M_PI * prog));
    return cfg.peak_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

// ----------------------------------------------------------------------
// AdamW.
// ----------------------------------------------------------------------

void AdamW::init(const ParameterStore<double>& ps) {
    t_ = 0;
    m_.assign(ps.size(), {});
    v_.assign(ps.size(), {});
    for (int i = 0; i < ps.size(); ++i) {
        m_[i].assign(ps.at(i).v.size(), 0.0);
        v_[i].assign(ps.at(i).v.size(), 0.0);
    }
}

void AdamW::step(ParameterStore<double>& ps, double lr) {
    if (static_cast<int>(m_.size()) != ps.size())
        throw StateError("optimizer not initialized for this parameter set");
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (int i = 0; i < ps.size(); ++i) {
        const std::string& name = ps.names()[i];
        if (ps.is_frozen(name)) continue;
        auto& p = ps.at(i);
        if (p.grad.empty()) continue;
        bool decay_this = wd_ > 0.0 && name.find("norm") == std::string::npos;
        for (size_t j = 0; j < p.v.size(); ++j) {
            double g = p.grad[j];
            m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
            v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
            double mh = m_[i][j] / bc1;
            double vh = v_[i][j] / bc2;
            double upd = lr * (mh / (std::sqrt(vh) + eps_));
            if (decay_this) upd += lr * wd_ * p.v[j];
            p.v[j] -= upd;
        }
    }
}

void AdamW::restore(int t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

// ----------------------------------------------------------------------
// Chunking.
// ----------------------------------------------------------------------

std::vector<Chunk> make_chunks(const std::vector<Utterance>& utts, const CodecSpec& codec,
                               int chunk_frames, uint64_t seed, int la_cap) {
    if (chunk_frames < 8) throw ValidationError("make_chunks: chunk length too small");
    std::map<int, std::vector<int>> by_speaker;
    for (int i = 0; i < static_cast<int>(utts.size()); ++i)
        by_speaker[utts[i].speaker_id].push_back(i);

    std::vector<Chunk> chunks;
    for (auto& [spk, idxs] : by_speaker) {
        // seeded concatenation order within the speaker
        Rng rng(Rng::mix(seed, Rng::mix(0xc0ffeeULL, static_cast<uint64_t>(spk))));
        for (size_t i = idxs.size(); i > 1; --i)
            std::swap(idxs[i - 1], idxs[rng.uniform_int(i)]);

        std::vector<int> phonemes;
        std::vector<DurationToken> durations;
        std::vector<int> semantic;
        std::vector<std::vector<int>> acoustic;
        for (int idx : idxs) {
            const Utterance& u = utts[idx];
            phonemes.insert(phonemes.end(), u.phonemes.begin(), u.phonemes.end());
            durations.insert(durations.end(), u.durations.begin(), u.durations.end());
            semantic.insert(semantic.end(), u.semantic.begin(), u.semantic.end());
            acoustic.insert(acoustic.end(), u.acoustic.begin(), u.acoustic.end());
        }
        int total = static_cast<int>(durations.size());
        if (total < chunk_frames) continue;
        // terminal-go utterance streams concatenate into one valid stream
        DecodeResult cov = decode_tokens(durations, static_cast<int>(phonemes.size()));

        for (int f0 = 0; f0 + chunk_frames <= total; f0 += chunk_frames) {
            int f1 = f0 + chunk_frames;
            int b0 = cov.coverage[f0].b;
            int e1 = cov.coverage[f1 - 1].e;
            Chunk c;
            c.phonemes.assign(phonemes.begin() + (b0 - 1), phonemes.begin() + e1);
            c.durations.assign(durations.begin() + f0, durations.begin() + f1);
            int w = static_cast<int>(c.phonemes.size());
            c.la_limits.resize(w);
            for (int i = 0; i < w; ++i) c.la_limits[i] = std::min(la_cap, w - 1 - i);
            c.grid = TokenGrid(codec.codebooks, chunk_frames);
            for (int t = 0; t < chunk_frames; ++t) c.grid.at(0, t) = semantic[f0 + t];
            for (int r = 1; r < codec.codebooks; ++r) {
                c.grid.at(r, 0) = codec.acoustic_pad();
                for (int t = 1; t < chunk_frames; ++t)
                    c.grid.at(r, t) = acoustic[f0 + t - 1][r - 1];
            }
            c.speaker_id = spk;
            c.speaker_vec = utts[idxs[0]].speaker_vec;
            c.tag = "spk" + std::to_string(spk) + "@" + std::to_string(f0);
            chunks.push_back(std::move(c));
        }
    }
    return chunks;
}

TrainItem<double> chunk_to_item(const Chunk& c) {
    TrainItem<double> item;
    item.phonemes = c.phonemes;
    item.la_limits = c.la_limits;
    item.grid = c.grid;
    item.durations = c.durations;
    item.speaker.assign(c.speaker_vec.begin(), c.speaker_vec.end());
    item.tag = c.tag;
    return item;
}

std::pair<std::vector<Utterance>, std::vector<Utterance>> split_corpus(
    const std::vector<Utterance>& utts) {
    std::vector<Utterance> train, held;
    for (size_t i = 0; i < utts.size(); ++i)
        (i % 10 == 0 ? held : train).push_back(utts[i]);
    return {train, held};
}

// ----------------------------------------------------------------------
// Training loop.
// ----------------------------------------------------------------------

void write_metrics_csv(const std::string& path, const TrainLog& log) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write metrics: " + path);
    f << "step,lr,loss_tt,loss_dt\n";
    char buf[128];
    for (const auto& r : log.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", static_cast<int>(r[0]), r[1],
                      r[2], r[3]);
        f << buf;
    }
}

int TrainerState::steps_per_epoch(int n_chunks) const {
    return (n_chunks + cfg.batch_size - 1) / cfg.batch_size;
}

int TrainerState::total_steps(int n_chunks) const {
    return steps_per_epoch(n_chunks) * cfg.epochs;
}

TrainerState make_trainer(const ModelConfig& mcfg, const TrainConfig& cfg, uint64_t model_seed) {
    cfg.validate();
    ModelConfig mc = mcfg;
    mc.use_speaker = cfg.use_speaker;
    TrainerState st{Model<double>::make(mc, model_seed), cfg,
                    AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
                    Rng(cfg.seed), 0, {}};
    if (cfg.freeze_dt) st.model.params.freeze_prefix("dt.");
    st.opt.init(st.model.params);
    return st;
}

void train_steps(TrainerState& st, const std::vector<Chunk>& chunks, int max_steps,
                 const std::string& snapshot_path) {
    if (chunks.empty()) throw ValidationError("train: no chunks");
    const int n = static_cast<int>(chunks.size());
    const int spe = st.steps_per_epoch(n);
    const int total = st.total_steps(n);
    int limit = max_steps < 0 ? total : std::min(total, st.step + max_steps);

    while (st.step < limit) {
        int epoch = st.step / spe;
        int step_in_epoch = st.step % spe;
        // stateless per-epoch order so resumed runs replay the same batches
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        Rng erng(Rng::mix(st.cfg.seed, Rng::mix(0xe70cULL, static_cast<uint64_t>(epoch))));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[erng.uniform_int(i)]);

        int lo = step_in_epoch * st.cfg.batch_size;
        int hi = std::min(n, lo + st.cfg.batch_size);
        int bsz = hi - lo;

        double lr = lr_at_step(st.cfg, st.step, spe);
        st.model.params.zero_grads();
        double tt_sum = 0.0, dt_sum = 0.0;
        for (int bi = lo; bi < hi; ++bi) {
            TrainItem<double> item = chunk_to_item(chunks[order[bi]]);
            Graph<double> g(true);
            NllNodes nodes = build_teacher_forced(g, st.model, item);
            int loss = g.add(g.scale(nodes.loss_tt, 1.0 / bsz), g.scale(nodes.loss_dt, 1.0 / bsz));
            tt_sum += g.val(nodes.loss_tt).v[0];
            dt_sum += g.val(nodes.loss_dt).v[0];
            g.backward(loss);
        }
        double loss_tt = tt_sum / bsz;
        double loss_dt = dt_sum / bsz;
        if (!std::isfinite(loss_tt) || !std::isfinite(loss_dt)) {
            if (!snapshot_path.empty()) save_trainer(st, snapshot_path + ".diag");
            throw StateError("train: non-finite loss at step " + std::to_string(st.step) +
                             (snapshot_path.empty() ? "" : ", snapshot written"));
        }
        st.opt.step(st.model.params, lr);
        st.log.rows.push_back({static_cast<double>(st.step), lr, loss_tt, loss_dt});
        ++st.step;
    }
}

void save_trainer(const TrainerState& st, const std::string& path) {
    // optimizer moments ride along as extra tensors after the model weights
    ParameterStore<double> all;
    for (int i = 0; i < st.model.params.size(); ++i)
        all.add(st.model.params.names()[i],
                Tensor<double>(st.model.params.at(i).shape, st.model.params.at(i).v));
    for (int i = 0; i < st.model.params.size(); ++i) {
        all.add("_opt.m." + st.model.params.names()[i],
                Tensor<double>(st.model.params.at(i).shape, st.opt.m()[i]));
        all.add("_opt.v." + st.model.params.names()[i],
                Tensor<double>(st.model.params.at(i).shape, st.opt.v()[i]));
    }
    nlohmann::json meta;
    meta["kind"] = "trainer";
    meta["model_config"] = nlohmann::json::parse(model_config_to_json(st.model.cfg));
    meta["train_config"] = nlohmann::json::parse(train_config_to_json(st.cfg));
    meta["step"] = st.step;
    meta["opt_t"] = st.opt.t();
    meta["rng_state"] = st.rng.save_state();
    save_checkpoint(path, all, meta);
}

TrainerState load_trainer(const std::string& path) {
    nlohmann::json meta;
    ParameterStore<double> all = load_checkpoint<double>(path, &meta);
    if (meta.value("kind", "") != "trainer")
        throw ParseError("checkpoint is not a trainer state: " + path);
    ModelConfig mcfg = model_config_from_json(meta.at("model_config").dump());
    TrainConfig tcfg = train_config_from_json(meta.at("train_config").dump());

    ParameterStore<double> weights;
    for (int i = 0; i < all.size(); ++i) {
        const std::string& name = all.names()[i];
        if (name.rfind("_opt.", 0) == 0) continue;
        weights.add(name, Tensor<double>(all.at(i).shape, all.at(i).v));
    }
    TrainerState st{Model<double>::from_store(mcfg, std::move(weights)), tcfg,
                    AdamW(tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay),
                    Rng(tcfg.seed), meta.at("step").get<int>(), {}};
    if (tcfg.freeze_dt) st.model.params.freeze_prefix("dt.");
    std::vector<std::vector<double>> m(st.model.params.size()), v(st.model.params.size());
    for (int i = 0; i < st.model.params.size(); ++i) {
        m[i] = all.get("_opt.m." + st.model.params.names()[i]).v;
        v[i] = all.get("_opt.v." + st.model.params.names()[i]).v;
    }
    st.opt.restore(meta.at("opt_t").get<int>(), std::move(m), std::move(v));
    st.rng.load_state(meta.at("rng_state").get<std::string>());
    return st;
}

// ----------------------------------------------------------------------
// Evaluation.
// ----------------------------------------------------------------------

TokenGrid grid_from_frames(const std::vector<FrameOut>& frames, const CodecSpec& spec) {
    TokenGrid g(spec.codebooks, static_cast<int>(frames.size()));
    for (int t = 0; t < g.cols; ++t) {
        g.at(0, t) = frames[t].tokens.at(0);
        for (int r = 1; r < spec.codebooks; ++r)
            g.at(r, t) = t == 0 ? spec.acoustic_pad() : frames[t - 1].tokens.at(r);
    }
    return g;
}

EvalResult evaluate(Model<double>& model, const std::vector<Chunk>& heldout_chunks,
                    const std::vector<Utterance>& heldout_utts, const CodecSpec& codec) {
    EvalResult res;
    int64_t joint_hit = 0, dt_hit = 0;
    for (const auto& c : heldout_chunks) {
        TrainItem<double> item = chunk_to_item(c);
        Graph<double> g(false);
        NllNodes nodes = build_teacher_forced(g, model, item);
        const auto& tl = g.val(nodes.tt_logits);
        int classes = tl.cols();
        for (int t = 0; t < tl.rows(); ++t) {
            const double* row = tl.v.data() + static_cast<size_t>(t) * classes;
            int best = 0;
            for (int j = 1; j < classes; ++j)
                if (row[j] > row[best]) best = j;
            if (best == nodes.tt_targets[t]) ++joint_hit;
            ++res.joint_count;
        }
        if (nodes.dt_logits >= 0) {
            const auto& dl = g.val(nodes.dt_logits);
            int va = dl.cols();
            for (int t = 0; t < dl.rows(); ++t) {
                const double* row = dl.v.data() + static_cast<size_t>(t) * va;
                int best = 0;
                for (int j = 1; j < va; ++j)
                    if (row[j] > row[best]) best = j;
                if (best == nodes.dt_targets[t]) ++dt_hit;
                ++res.dt_count;
            }
        }
    }
    res.joint_accuracy =
        res.joint_count ? static_cast<double>(joint_hit) / res.joint_count : 0.0;
    res.dt_accuracy = res.dt_count ? static_cast<double>(dt_hit) / res.dt_count : 0.0;

    // free-running proxy at temperature 0
    Model<float> fm = model.template cast<float>();
    double per_sum = 0.0;
    for (const auto& u : heldout_utts) {
        EngineOptions eo;
        eo.sampling.temperature = 0.0;
        OfflineResult gen = generate_offline(fm, u.phonemes, u.speaker_vec, eo);
        per_sum += phoneme_error_rate(u.phonemes, grid_from_frames(gen.frames, codec));
        ++res.utterances;
    }
    res.per_proxy = res.utterances ? per_sum / res.utterances : 0.0;
    return res;
}

std::vector<AblationRow> run_ablation_grid(const ModelConfig& base_mcfg,
                                           const TrainConfig& base_tcfg,
                                           const std::vector<Utterance>& utts,
                                           const CodecSpec& codec, int grid_steps) {
    auto [train_utts, held_utts] = split_corpus(utts);
    std::vector<AblationRow> rows;
    for (bool freeze_dt : {false, true}) {
        for (bool use_speaker : {false, true}) {
            TrainConfig tc = base_tcfg;
            tc.freeze_dt = freeze_dt;
            tc.use_speaker = use_speaker;
            auto chunks = make_chunks(train_utts, codec, tc.chunk_frames, tc.seed);
            auto held_chunks = make_chunks(held_utts, codec, tc.chunk_frames, tc.seed);
            TrainerState st = make_trainer(base_mcfg, tc, tc.seed);
            train_steps(st, chunks, grid_steps);
            AblationRow row;
            row.freeze_dt = freeze_dt;
            row.use_speaker = use_speaker;
            row.eval = evaluate(st.model, held_chunks, held_utts, codec);
            rows.push_back(row);
        }
    }
    return rows;
}

std::string ablation_report(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "freeze_dt,use_speaker,joint_accuracy,dt_accuracy,per_proxy\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.6f\n", r.freeze_dt ? 1 : 0,
                      r.use_speaker ? 1 : 0, r.eval.joint_accuracy, r.eval.dt_accuracy,
                      r.eval.per_proxy);
        os << buf;
    }
    return os.str();
}

}  // namespace streamtts
