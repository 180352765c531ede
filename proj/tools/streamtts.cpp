// Command-line front end: corpus generation, training, streaming synthesis,
// the latency bench, and evaluation. Exit codes: 0 ok, 2 validation,
// 3 generation fault, 4 I/O.

#include <iostream>

#include <CLI11.hpp>

#include "streamtts/cli.hpp"

using namespace streamtts;

int main(int argc, char** argv) {
    CLI::App app{"streamtts: full-stream zero-shot TTS on a toy codec"};
    app.require_subcommand(1);

    // corpus
    auto* corpus = app.add_subcommand("corpus", "generate a synthetic corpus");
    std::string corpus_spec, corpus_out;
    corpus->add_option("--spec", corpus_spec, "corpus spec json")->required();
    corpus->add_option("--out", corpus_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train the toy model");
    TrainCliOptions topt;
    std::string t_model_cfg, t_train_cfg, t_resume;
    bool t_freeze = false, t_no_speaker = false;
    int t_epochs = -1;
    uint64_t t_seed = 0;
    train->add_option("--corpus", topt.manifest, "corpus manifest.jsonl")->required();
    train->add_option("--out", topt.out_checkpoint, "output checkpoint")->required();
    train->add_option("--metrics", topt.metrics_csv, "metrics csv path");
    auto* o_mc = train->add_option("--model-config", t_model_cfg, "model config json");
    auto* o_tc = train->add_option("--train-config", t_train_cfg, "train config json");
    auto* o_rs = train->add_option("--resume", t_resume, "resume from trainer checkpoint");
    auto* o_fz = train->add_flag("--freeze-dt", t_freeze, "freeze depth transformer weights");
    auto* o_ns = train->add_flag("--no-speaker", t_no_speaker, "drop speaker conditioning");
    auto* o_ep = train->add_option("--epochs", t_epochs, "override epochs");
    auto* o_sd = train->add_option("--seed", t_seed, "override seed");

    // synth
    auto* synth = app.add_subcommand("synth", "stream synthesis from a word feed");
    SynthOptions sopt;
    std::string s_feed_file, s_words, s_prompt;
    bool s_stdin = false, s_word_by_word = false;
    double s_interval = 0.0;
    synth->add_option("--ckpt", sopt.checkpoint, "model/trainer checkpoint")->required();
    synth->add_option("--out", sopt.out_wav, "output wav");
    synth->add_option("--log", sopt.token_log, "token log path");
    synth->add_option("--feed", s_feed_file, "feed schedule json");
    synth->add_option("--words", s_words, "space-separated words (all at once)");
    synth->add_flag("--word-by-word", s_word_by_word, "release words at --interval-ms");
    synth->add_option("--interval-ms", s_interval, "release interval for --word-by-word");
    synth->add_flag("--stdin", s_stdin, "read words from stdin, <close> ends");
    auto* o_pr = synth->add_option("--prompt", s_prompt, "prompt json (voice cloning)");
    synth->add_option("--temperature", sopt.temperature, "sampling temperature (0 = argmax)");
    synth->add_option("--top-k", sopt.top_k, "top-k truncation (0 = off)");
    synth->add_option("--seed", sopt.seed, "sampling seed");
    synth->add_option("--la-cap", sopt.la_cap, "look-ahead cap (<= 10)");
    synth->add_flag("--virtual-clock", sopt.virtual_clock, "virtual timeline (testing)");

    // bench
    auto* bench = app.add_subcommand("bench", "first-packet latency / RTF bench");
    BenchOptions bopt;
    bench->add_option("--ckpt", bopt.checkpoint, "model/trainer checkpoint")->required();
    bench->add_option("--workload", bopt.workload, "workload json")->required();
    bench->add_option("--runs", bopt.runs, "number of runs (>= 10)");
    bench->add_option("--report", bopt.report_path, "report json path");

    // eval
    auto* eval = app.add_subcommand("eval", "held-out evaluation / ablation grid");
    EvalCliOptions eopt;
    std::string e_ckpt, e_mc, e_tc;
    eval->add_option("--corpus", eopt.manifest, "corpus manifest.jsonl")->required();
    auto* o_ec = eval->add_option("--ckpt", e_ckpt, "trainer checkpoint");
    eval->add_flag("--grid", eopt.grid, "run the 2x2 freeze_dt x use_speaker grid");
    eval->add_option("--grid-steps", eopt.grid_steps, "training steps per grid cell");
    auto* o_emc = eval->add_option("--model-config", e_mc, "model config json (grid)");
    auto* o_etc = eval->add_option("--train-config", e_tc, "train config json (grid)");
    eval->add_option("--report", eopt.report_path, "report path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*corpus) {
            run_corpus(corpus_spec, corpus_out);
        } else if (*train) {
            if (o_mc->count()) topt.model_config_path = t_model_cfg;
            if (o_tc->count()) topt.train_config_path = t_train_cfg;
            if (o_rs->count()) topt.resume_path = t_resume;
            if (o_fz->count()) topt.freeze_dt = t_freeze;
            if (o_ns->count()) topt.use_speaker = !t_no_speaker;
            if (o_ep->count()) topt.epochs = t_epochs;
            if (o_sd->count()) topt.seed = t_seed;
            run_train(topt);
        } else if (*synth) {
            FeedSchedule feed;
            if (!s_feed_file.empty()) {
                std::ifstream f(s_feed_file);
                if (!f) throw IoError("cannot open feed: " + s_feed_file);
                std::stringstream ss;
                ss << f.rdbuf();
                feed = feed_from_json(ss.str());
            } else if (s_stdin) {
                feed.mode = FeedSchedule::Mode::Stdin;
            } else {
                std::istringstream ws(s_words);
                std::string w;
                while (ws >> w) feed.words.push_back(w);
                feed.mode = s_word_by_word ? FeedSchedule::Mode::FixedInterval
                                           : FeedSchedule::Mode::AllAtOnce;
                feed.interval_ms = s_interval;
            }
            if (o_pr->count()) sopt.prompt_path = s_prompt;
            run_synth(sopt, feed);
        } else if (*bench) {
            run_bench(bopt);
        } else if (*eval) {
            if (o_ec->count()) eopt.checkpoint = e_ckpt;
            if (o_emc->count()) eopt.model_config_path = e_mc;
            if (o_etc->count()) eopt.train_config_path = e_tc;
            run_eval(eopt);
        }
    } catch (const GenerationFault& e) {
        std::cerr << "generation fault: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
