#include "streamtts/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "streamtts/checkpoint.hpp"
#include "streamtts/queue.hpp"
#include "streamtts/wav.hpp"

namespace streamtts {

namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

double percentile(std::vector<double> v, double p) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    double idx = p * (v.size() - 1);
    size_t lo = static_cast<size_t>(idx);
    size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = idx - lo;
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace

void FeedSchedule::validate() const {
    if (mode == Mode::Timed) {
        if (release_ms.size() != words.size())
            throw ValidationError("feed: timed schedule needs one offset per word");
        for (size_t i = 1; i < release_ms.size(); ++i)
            if (release_ms[i] < release_ms[i - 1])
                throw ValidationError("feed: release offsets must be non-decreasing");
    }
    if (mode == Mode::FixedInterval && interval_ms < 0.0)
        throw ValidationError("feed: negative interval");
}

FeedSchedule feed_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ParseError(std::string("feed: ") + e.what());
    }
    FeedSchedule f;
    std::string mode = j.value("mode", "all_at_once");
    if (mode == "all_at_once") f.mode = FeedSchedule::Mode::AllAtOnce;
    else if (mode == "fixed_interval") f.mode = FeedSchedule::Mode::FixedInterval;
    else if (mode == "timed") f.mode = FeedSchedule::Mode::Timed;
    else if (mode == "stdin") f.mode = FeedSchedule::Mode::Stdin;
    else throw ParseError("feed: unknown mode " + mode);
    f.words = j.value("words", std::vector<std::string>{});
    f.interval_ms = j.value("interval_ms", 0.0);
    f.release_ms = j.value("release_ms", std::vector<double>{});
    f.validate();
    return f;
}

Model<float> load_model_f32(const std::string& checkpoint_path) {
    nlohmann::json meta;
    ParameterStore<float> all = load_checkpoint<float>(checkpoint_path, &meta);
    if (!meta.contains("model_config"))
        throw ParseError("checkpoint has no model config: " + checkpoint_path);
    ModelConfig cfg = model_config_from_json(meta.at("model_config").dump());
    ParameterStore<float> weights;
    for (int i = 0; i < all.size(); ++i) {
        const std::string& name = all.names()[i];
        if (name.rfind("_opt.", 0) == 0) continue;
        weights.add(name, Tensor<float>(all.at(i).shape, all.at(i).v));
    }
    return Model<float>::from_store(cfg, std::move(weights));
}

Prompt prompt_from_utterance(const Utterance& u, const CodecSpec& spec) {
    Prompt p;
    p.phonemes = u.phonemes;
    p.alignment = u.alignment;
    p.grid = u.grid(spec);
    p.speaker.v = u.speaker_vec;
    return p;
}

Prompt load_prompt_json(const std::string& path, const CodecSpec& spec) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception& e) {
        throw ParseError(std::string("prompt: ") + e.what());
    }
    Utterance u;
    u.phonemes = j.at("phonemes").get<std::vector<int>>();
    u.alignment.phoneme_ids = u.phonemes;
    u.alignment.end_frames = j.at("end_frames").get<std::vector<double>>();
    u.semantic = j.at("semantic").get<std::vector<int>>();
    u.acoustic = j.at("acoustic").get<std::vector<std::vector<int>>>();
    u.durations = encode_alignment(u.alignment);
    if (static_cast<int>(u.durations.size()) != u.frames())
        throw ValidationError("prompt: stream lengths disagree");
    u.speaker_vec = j.at("speaker").get<std::vector<float>>();
    return prompt_from_utterance(u, spec);
}

// ----------------------------------------------------------------------
// corpus
// ----------------------------------------------------------------------

void run_corpus(const std::string& spec_path, const std::string& out_dir) {
    CorpusSpec spec = corpus_spec_from_json(read_file(spec_path));
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output dir: " + out_dir);
    Lexicon lex = make_inventory();
    // the CLI ships with the repo lexicon next to the binary's data dir or cwd
    for (const char* cand : {"data/lexicon.tsv", "../data/lexicon.tsv"}) {
        if (fs::exists(cand)) {
            lex = load_lexicon(cand);
            break;
        }
    }
    if (lex.words.empty())
        throw IoError("corpus: lexicon data/lexicon.tsv not found from working directory");
    auto utts = generate_corpus(spec, lex);
    std::string manifest = (fs::path(out_dir) / "manifest.jsonl").string();
    write_manifest(manifest, spec, utts);
    int64_t frames = 0;
    for (const auto& u : utts) frames += u.frames();
    std::cout << "corpus: " << utts.size() << " utterances, " << frames << " frames, "
              << spec.speakers << " speakers -> " << manifest << "\n";
}

// ----------------------------------------------------------------------
// train
// ----------------------------------------------------------------------

void run_train(const TrainCliOptions& opt) {
    auto [spec, utts] = read_manifest(opt.manifest);
    ModelConfig mcfg = opt.model_config_path
                           ? model_config_from_json(read_file(*opt.model_config_path))
                           : ModelConfig::toy();
    TrainConfig tcfg = opt.train_config_path
                           ? train_config_from_json(read_file(*opt.train_config_path))
                           : TrainConfig{};
    if (opt.freeze_dt) tcfg.freeze_dt = *opt.freeze_dt;
    if (opt.use_speaker) tcfg.use_speaker = *opt.use_speaker;
    if (opt.epochs) tcfg.epochs = *opt.epochs;
    if (opt.seed) tcfg.seed = *opt.seed;
    tcfg.validate();
    mcfg.semantic_vocab = spec.codec.semantic_vocab;
    mcfg.acoustic_vocab = spec.codec.acoustic_vocab;

    auto [train_utts, held_utts] = split_corpus(utts);
    auto chunks = make_chunks(train_utts, spec.codec, tcfg.chunk_frames, tcfg.seed, mcfg.la_cap);
    if (chunks.empty()) throw ValidationError("train: corpus too small for the chunk length");

    TrainerState st = opt.resume_path ? load_trainer(*opt.resume_path)
                                      : make_trainer(mcfg, tcfg, tcfg.seed);
    std::cout << "train: " << chunks.size() << " chunks, "
              << st.total_steps(static_cast<int>(chunks.size())) << " steps, "
              << st.model.params.total_params() << " parameters\n";
    train_steps(st, chunks, -1, opt.out_checkpoint);
    save_trainer(st, opt.out_checkpoint);
    if (!opt.metrics_csv.empty()) write_metrics_csv(opt.metrics_csv, st.log);

    auto held_chunks = make_chunks(held_utts, spec.codec, tcfg.chunk_frames, tcfg.seed, mcfg.la_cap);
    EvalResult ev = evaluate(st.model, held_chunks, held_utts, spec.codec);
    std::cout << "train: done, step " << st.step << ", final loss_tt "
              << (st.log.rows.empty() ? 0.0 : st.log.rows.back()[2]) << ", loss_dt "
              << (st.log.rows.empty() ? 0.0 : st.log.rows.back()[3]) << "\n"
              << "eval: joint_acc " << ev.joint_accuracy << ", dt_acc " << ev.dt_accuracy
              << ", per " << ev.per_proxy << "\n";
}

// ----------------------------------------------------------------------
// synth
// ----------------------------------------------------------------------

namespace {

struct DecodedFrame {
    std::vector<float> samples;
};

// feeder + engine + codec consumer; the consumer runs on its own thread
// behind a bounded FIFO and never blocks the engine unless the FIFO fills
SynthResult synth_pipeline(const Model<float>& model, const Lexicon& lex, Clock& clock,
                           const EngineOptions& eopt, const FeedSchedule& feed,
                           const Prompt* prompt, const SynthOptions& opt) {
    CodecSpec cspec;
    cspec.semantic_vocab = model.cfg.semantic_vocab;
    cspec.acoustic_vocab = model.cfg.acoustic_vocab;
    cspec.validate();

    StreamEngine engine(model, lex, clock, eopt);
    if (prompt) engine.prefill_prompt(*prompt);

    BoundedQueue<FrameOut> fifo(16);
    std::vector<float> audio;
    std::mutex audio_mu;
    uint64_t decode_ns_total = 0;
    std::thread consumer([&] {
        SystemClock wall;
        while (auto fr = fifo.pop()) {
            uint64_t t0 = wall.now_ns();
            auto chunk = decode_frame(fr->tokens, cspec);
            uint64_t dt = wall.now_ns() - t0;
            std::lock_guard lk(audio_mu);
            audio.insert(audio.end(), chunk.begin(), chunk.end());
            decode_ns_total += dt;
        }
    });

    auto pump = [&](const FrameOut& fr) {
        if (fr.decodable) fifo.push(fr);
    };

    uint64_t t_start = clock.now_ns();
    if (feed.mode == FeedSchedule::Mode::Stdin) {
        std::string line;
        while (std::getline(std::cin, line)) {
            if (line == "<close>") break;
            if (line.empty()) continue;
            engine.push_word(line);
            while (auto fr = engine.try_step()) pump(*fr);
        }
        engine.close();
    } else if (feed.mode == FeedSchedule::Mode::AllAtOnce) {
        for (const auto& w : feed.words) engine.push_word(w);
        engine.close();
    } else {
        // fixed-interval or timed release against the injected clock
        std::vector<double> due;
        for (size_t i = 0; i < feed.words.size(); ++i)
            due.push_back(feed.mode == FeedSchedule::Mode::FixedInterval
                              ? feed.interval_ms * static_cast<double>(i)
                              : feed.release_ms[i]);
        size_t next = 0;
        while (next < feed.words.size()) {
            double elapsed_ms = static_cast<double>(clock.now_ns() - t_start) / 1e6;
            if (elapsed_ms >= due[next]) {
                engine.push_word(feed.words[next]);
                ++next;
                continue;
            }
            bool stepped = false;
            while (auto fr = engine.try_step()) {
                pump(*fr);
                stepped = true;
            }
            if (!stepped) {
                if (auto* vc = dynamic_cast<VirtualClock*>(&clock)) {
                    vc->advance_ns(static_cast<uint64_t>((due[next] - elapsed_ms) * 1e6));
                } else {
                    std::this_thread::sleep_for(std::chrono::microseconds(200));
                }
            }
        }
        engine.close();
    }
    while (!engine.finished()) {
        auto fr = engine.try_step();
        if (fr) pump(*fr);
        else break;
    }
    fifo.close();
    consumer.join();
    engine.note_decode(decode_ns_total);
    for (int i = 0; i < static_cast<int>(engine.emitted().size()); ++i) (void)i;

    if (!opt.out_wav.empty()) write_wav(opt.out_wav, audio, cspec.sample_rate);
    if (!opt.token_log.empty()) write_token_log(opt.token_log, engine.emitted());

    SynthResult res;
    res.frames = static_cast<int>(engine.emitted().size());
    res.samples = audio.size();
    if (res.frames > 0) res.report = engine.latency_report();
    return res;
}

}  // namespace

SynthResult run_synth(const SynthOptions& opt, const FeedSchedule& feed) {
    Model<float> model = load_model_f32(opt.checkpoint);
    Lexicon lex = make_inventory();
    for (const char* cand : {"data/lexicon.tsv", "../data/lexicon.tsv"})
        if (fs::exists(cand)) {
            lex = load_lexicon(cand);
            break;
        }

    EngineOptions eopt;
    eopt.sampling.temperature = opt.temperature;
    eopt.sampling.top_k = opt.top_k;
    eopt.seed = opt.seed;
    eopt.la_cap = opt.la_cap;
    if (opt.la_cap > model.cfg.la_cap)
        throw ValidationError("synth: la_cap exceeds the model cap");

    CodecSpec cspec;
    cspec.semantic_vocab = model.cfg.semantic_vocab;
    cspec.acoustic_vocab = model.cfg.acoustic_vocab;
    std::optional<Prompt> prompt;
    if (opt.prompt_path) prompt = load_prompt_json(*opt.prompt_path, cspec);

    SystemClock sys;
    VirtualClock virt;
    Clock& clock = opt.virtual_clock ? static_cast<Clock&>(virt) : sys;
    SynthResult res =
        synth_pipeline(model, lex, clock, eopt, feed, prompt ? &*prompt : nullptr, opt);
    if (!opt.quiet) {
        if (res.frames > 0)
            std::cout << "synth: " << res.frames << " frames, fpl_ms " << res.report.fpl_ms
                      << ", rtf " << res.report.rtf << "\n";
        else
            std::cout << "synth: no frames generated\n";
    }
    return res;
}

// ----------------------------------------------------------------------
// bench
// ----------------------------------------------------------------------

BenchReport run_bench(const BenchOptions& opt) {
    if (opt.runs < 10) throw ValidationError("bench: need at least 10 runs for medians");
    nlohmann::json wl;
    try {
        wl = nlohmann::json::parse(read_file(opt.workload));
    } catch (const IoError&) {
        throw;
    } catch (const std::exception& e) {
        throw ParseError(std::string("workload: ") + e.what());
    }

    Model<float> model = load_model_f32(opt.checkpoint);
    Lexicon lex = make_inventory();
    for (const char* cand : {"data/lexicon.tsv", "../data/lexicon.tsv"})
        if (fs::exists(cand)) {
            lex = load_lexicon(cand);
            break;
        }

    std::vector<std::string> words = wl.value("words", std::vector<std::string>{});
    if (words.empty()) throw ValidationError("workload: no words");
    double interval_ms = wl.value("interval_ms", 0.0);
    bool virt_mode = wl.contains("virtual_stage_delays_ms");
    BenchStageDelays delays;
    if (virt_mode) {
        const auto& d = wl["virtual_stage_delays_ms"];
        delays.pt_ms = d.value("pt", 0.0);
        delays.tt_ms = d.value("tt", 0.0);
        delays.sample_ms = d.value("sample", 0.0);
        delays.dt_ms = d.value("dt", 0.0);
        delays.decode_ms = d.value("decode", 0.0);
    }

    EngineOptions eopt;
    eopt.sampling.temperature = wl.value("temperature", 0.0);
    eopt.sampling.top_k = wl.value("top_k", 0);
    eopt.seed = wl.value("seed", 0);
    eopt.la_cap = wl.value("la_cap", 10);

    CodecSpec cspec;
    cspec.semantic_vocab = model.cfg.semantic_vocab;
    cspec.acoustic_vocab = model.cfg.acoustic_vocab;

    std::vector<double> fpls, rtfs;
    nlohmann::json run_rows = nlohmann::json::array();
    int faulted = 0;
    bool identity_ok = true;
    StageTimes accum;

    for (int run = 0; run < opt.runs; ++run) {
        SystemClock sys;
        VirtualClock virt;
        Clock& clock = virt_mode ? static_cast<Clock&>(virt) : sys;
        StreamEngine engine(model, lex, clock, eopt);
        if (virt_mode) {
            engine.stage_hook = [&](const char* stage) {
                double ms = 0.0;
                if (std::string_view(stage) == "pt") ms = delays.pt_ms;
                else if (std::string_view(stage) == "tt") ms = delays.tt_ms;
                else if (std::string_view(stage) == "sample") ms = delays.sample_ms;
                else if (std::string_view(stage) == "dt") ms = delays.dt_ms;
                virt.advance_ns(static_cast<uint64_t>(ms * 1e6));
            };
        }
        try {
            uint64_t t_start = clock.now_ns();
            size_t next = 0;
            bool closed = false;
            uint64_t first_written_ns = 0;
            int decoded_frames = 0;
            while (!engine.finished()) {
                if (!closed && next < words.size()) {
                    double elapsed_ms = static_cast<double>(clock.now_ns() - t_start) / 1e6;
                    double due = interval_ms * static_cast<double>(next);
                    if (elapsed_ms >= due) {
                        engine.push_word(words[next]);
                        ++next;
                        continue;
                    }
                }
                auto fr = engine.try_step();
                if (fr && fr->decodable) {
                    uint64_t d0 = clock.now_ns();
                    auto chunk = decode_frame(fr->tokens, cspec);
                    (void)chunk;
                    if (virt_mode)
                        virt.advance_ns(static_cast<uint64_t>(delays.decode_ms * 1e6));
                    engine.note_decode(clock.now_ns() - d0);
                    ++decoded_frames;
                    if (decoded_frames == 1) first_written_ns = clock.now_ns();
                } else if (!fr) {
                    if (!closed && next >= words.size()) {
                        engine.close();
                        closed = true;
                    } else if (!closed) {
                        if (virt_mode) {
                            double due = interval_ms * static_cast<double>(next);
                            double elapsed_ms =
                                static_cast<double>(clock.now_ns() - t_start) / 1e6;
                            if (due > elapsed_ms)
                                virt.advance_ns(static_cast<uint64_t>((due - elapsed_ms) * 1e6));
                        }
                    }
                }
            }
            LatencyReport rep = engine.latency_report();
            const StageTimes& lt = engine.ledger();
            bool identity = lt.tt_steps_at_first_decodable == 2 &&
                            lt.dt_columns_at_first_decodable == 2;
            identity_ok = identity_ok && identity;
            // FPL measured to the first fully decoded 80 ms chunk
            double fpl_ms =
                static_cast<double>(first_written_ns - rep.first_word_arrival_ns) / 1e6;
            double audio_s = 0.08 * decoded_frames;
            double rtf =
                (static_cast<double>(clock.now_ns() - rep.first_word_arrival_ns) / 1e9) / audio_s;
            fpls.push_back(fpl_ms);
            rtfs.push_back(rtf);
            accum.pt_ns += lt.pt_ns;
            accum.tt_ns += lt.tt_ns;
            accum.dt_ns += lt.dt_ns;
            accum.sample_ns += lt.sample_ns;
            accum.decode_ns += lt.decode_ns;
            accum.active_ns += lt.active_ns;
            accum.pt_passes += lt.pt_passes;
            accum.tt_steps += lt.tt_steps;
            accum.dt_columns += lt.dt_columns;
            accum.decodes += lt.decodes;
            run_rows.push_back({{"fpl_ms", fpl_ms},
                                {"rtf", rtf},
                                {"frames", decoded_frames},
                                {"call_count_identity", identity}});
        } catch (const std::exception& e) {
            ++faulted;
            run_rows.push_back({{"fault", e.what()}});
        }
    }

    BenchReport rep;
    rep.runs = opt.runs;
    rep.faulted = faulted;
    rep.call_count_identity = identity_ok;
    rep.fpl_ms_median = percentile(fpls, 0.5);
    rep.fpl_ms_p95 = percentile(fpls, 0.95);
    rep.rtf_median = percentile(rtfs, 0.5);
    rep.json = {{"fpl_ms", {{"median", rep.fpl_ms_median}, {"p95", rep.fpl_ms_p95}}},
                {"rtf", {{"median", rep.rtf_median}}},
                {"runs", run_rows},
                {"faulted", faulted},
                {"call_count_identity", identity_ok},
                {"stage_ns",
                 {{"pt", accum.pt_ns},
                  {"tt", accum.tt_ns},
                  {"dt", accum.dt_ns},
                  {"sample", accum.sample_ns},
                  {"decode", accum.decode_ns},
                  {"active", accum.active_ns}}},
                {"call_counts",
                 {{"pt_passes", accum.pt_passes},
                  {"tt_steps", accum.tt_steps},
                  {"dt_columns", accum.dt_columns},
                  {"decodes", accum.decodes}}},
                {"config_echo",
                 {{"workload", opt.workload},
                  {"temperature", eopt.sampling.temperature},
                  {"top_k", eopt.sampling.top_k},
                  {"seed", eopt.seed},
                  {"la_cap", eopt.la_cap},
                  {"interval_ms", interval_ms},
                  {"virtual_clock", virt_mode}}}};
    if (!opt.report_path.empty()) {
        std::ofstream f(opt.report_path, std::ios::binary);
        if (!f) throw IoError("cannot write report: " + opt.report_path);
        f << rep.json.dump(2) << "\n";
    }
    std::cout << "bench: fpl_ms median " << rep.fpl_ms_median << " p95 " << rep.fpl_ms_p95
              << ", rtf median " << rep.rtf_median << ", identity "
              << (identity_ok ? "ok" : "VIOLATED") << ", faulted " << faulted << "/" << opt.runs
              << "\n";
    return rep;
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

void run_eval(const EvalCliOptions& opt) {
    auto [spec, utts] = read_manifest(opt.manifest);
    if (opt.grid) {
        ModelConfig mcfg = opt.model_config_path
                               ? model_config_from_json(read_file(*opt.model_config_path))
                               : ModelConfig::toy();
        TrainConfig tcfg = opt.train_config_path
                               ? train_config_from_json(read_file(*opt.train_config_path))
                               : TrainConfig{};
        mcfg.semantic_vocab = spec.codec.semantic_vocab;
        mcfg.acoustic_vocab = spec.codec.acoustic_vocab;
        auto rows = run_ablation_grid(mcfg, tcfg, utts, spec.codec, opt.grid_steps);
        std::string report = ablation_report(rows);
        std::cout << report;
        if (!opt.report_path.empty()) {
            std::ofstream f(opt.report_path, std::ios::binary);
            if (!f) throw IoError("cannot write report: " + opt.report_path);
            f << report;
        }
        return;
    }
    if (!opt.checkpoint) throw ValidationError("eval: need --ckpt or --grid");
    TrainerState st = load_trainer(*opt.checkpoint);
    auto [train_utts, held_utts] = split_corpus(utts);
    auto held_chunks =
        make_chunks(held_utts, spec.codec, st.cfg.chunk_frames, st.cfg.seed, st.model.cfg.la_cap);
    EvalResult ev = evaluate(st.model, held_chunks, held_utts, spec.codec);
    std::cout << "eval: joint_acc " << ev.joint_accuracy << ", dt_acc " << ev.dt_accuracy
              << ", per " << ev.per_proxy << " (" << ev.utterances << " utterances)\n";
    if (!opt.report_path.empty()) {
        nlohmann::json j = {{"joint_accuracy", ev.joint_accuracy},
                            {"dt_accuracy", ev.dt_accuracy},
                            {"per_proxy", ev.per_proxy},
                            {"utterances", ev.utterances}};
        std::ofstream f(opt.report_path, std::ios::binary);
        if (!f) throw IoError("cannot write report: " + opt.report_path);
        f << j.dump(2) << "\n";
    }
}

}  // namespace streamtts
