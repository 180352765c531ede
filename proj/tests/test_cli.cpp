#include <doctest.h>

#include <cstdlib>
#include <sys/wait.h>
#include <fstream>
#include <sstream>

#include "streamtts/checkpoint.hpp"
#include "streamtts/cli.hpp"
#include "streamtts/wav.hpp"

using namespace streamtts;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    f << content;
}

// token log lines with the trailing timestamp field removed
std::string log_tokens_only(const std::string& path) {
    std::ifstream f(path);
    std::string out, line;
    while (std::getline(f, line)) {
        auto last = line.rfind(',');
        out += line.substr(0, last);
        out += '\n';
    }
    return out;
}

std::string make_checkpoint(uint64_t seed) {
    TrainConfig tc;
    TrainerState st = make_trainer(ModelConfig::toy(), tc, seed);
    std::string path = "/tmp/streamtts_cli_" + std::to_string(seed) + ".ckpt";
    save_trainer(st, path);
    return path;
}

const char* kSentence = "the green bird will speak over the blue river";

}  // namespace

TEST_CASE("corpus command writes a byte-stable manifest") {
    spit("/tmp/streamtts_cspec.json",
         R"({"speakers": 4, "utterances": 20, "master_seed": 3})");
    run_corpus("/tmp/streamtts_cspec.json", "/tmp/streamtts_corpus_a");
    run_corpus("/tmp/streamtts_cspec.json", "/tmp/streamtts_corpus_b");
    CHECK(slurp("/tmp/streamtts_corpus_a/manifest.jsonl") ==
          slurp("/tmp/streamtts_corpus_b/manifest.jsonl"));
    auto [spec, utts] = read_manifest("/tmp/streamtts_corpus_a/manifest.jsonl");
    CHECK(utts.size() == 20);
}

TEST_CASE("synth: deterministic wav, schedule-equivalent token logs, replay") {
    std::string ckpt = make_checkpoint(1);

    SynthOptions so;
    so.checkpoint = ckpt;
    so.out_wav = "/tmp/streamtts_a.wav";
    so.token_log = "/tmp/streamtts_a.log";
    so.virtual_clock = true;
    so.quiet = true;
    FeedSchedule all;
    all.mode = FeedSchedule::Mode::AllAtOnce;
    std::istringstream ws(kSentence);
    std::string w;
    while (ws >> w) all.words.push_back(w);

    SynthResult r1 = run_synth(so, all);
    CHECK(r1.frames > 0);
    CHECK(r1.samples == static_cast<size_t>(r1.frames) * 1920);

    so.out_wav = "/tmp/streamtts_b.wav";
    so.token_log = "/tmp/streamtts_b.log";
    run_synth(so, all);
    CHECK(slurp("/tmp/streamtts_a.wav") == slurp("/tmp/streamtts_b.wav"));
    CHECK(log_tokens_only("/tmp/streamtts_a.log") == log_tokens_only("/tmp/streamtts_b.log"));

    // word-by-word release with identical consumption contexts matches
    FeedSchedule wbw = all;
    wbw.mode = FeedSchedule::Mode::FixedInterval;
    wbw.interval_ms = 0.0;
    so.out_wav = "/tmp/streamtts_c.wav";
    so.token_log = "/tmp/streamtts_c.log";
    run_synth(so, wbw);
    CHECK(log_tokens_only("/tmp/streamtts_a.log") == log_tokens_only("/tmp/streamtts_c.log"));

    // replaying the token log through the codec reproduces the wav bytes
    auto frames = read_token_log("/tmp/streamtts_a.log");
    CodecSpec cspec;
    std::vector<FrameTokens> toks;
    for (const auto& f : frames) toks.push_back(f.tokens);
    write_wav("/tmp/streamtts_replay.wav", decode_frames(toks, cspec), cspec.sample_rate);
    CHECK(slurp("/tmp/streamtts_a.wav") == slurp("/tmp/streamtts_replay.wav"));
}

TEST_CASE("synth accepts a prompt file") {
    std::string ckpt = make_checkpoint(2);
    Lexicon lex = load_lexicon(std::string(STREAMTTS_DATA_DIR) + "/lexicon.tsv");
    CorpusSpec cs;
    cs.speakers = 3;
    cs.utterances = 4;
    cs.master_seed = 9;
    Utterance u = generate_utterance(cs, lex, 1);
    nlohmann::json pj;
    pj["phonemes"] = u.phonemes;
    pj["end_frames"] = u.alignment.end_frames;
    pj["semantic"] = u.semantic;
    pj["acoustic"] = u.acoustic;
    pj["speaker"] = u.speaker_vec;
    spit("/tmp/streamtts_prompt.json", pj.dump());

    SynthOptions so;
    so.checkpoint = ckpt;
    so.out_wav = "/tmp/streamtts_p.wav";
    so.token_log = "/tmp/streamtts_p.log";
    so.prompt_path = "/tmp/streamtts_prompt.json";
    so.virtual_clock = true;
    so.quiet = true;
    FeedSchedule feed;
    feed.words = {"good", "morning"};
    SynthResult r = run_synth(so, feed);
    CHECK(r.frames > 0);
}

TEST_CASE("bench: virtual-clock FPL equals the injected stage delays exactly") {
    std::string ckpt = make_checkpoint(3);
    spit("/tmp/streamtts_wl.json", R"({
        "words": ["green", "mountain", "river"],
        "temperature": 0.0, "seed": 4,
        "virtual_stage_delays_ms": {"pt": 3.0, "tt": 1.0, "sample": 0.25, "dt": 2.0, "decode": 1.5}
    })");
    BenchOptions bo;
    bo.checkpoint = ckpt;
    bo.workload = "/tmp/streamtts_wl.json";
    bo.runs = 10;
    bo.report_path = "/tmp/streamtts_bench.json";
    BenchReport rep = run_bench(bo);
    CHECK(rep.runs == 10);
    CHECK(rep.faulted == 0);
    CHECK(rep.call_count_identity);
    // one pt pass for word 1, two full steps, one decode
    double want = 3.0 + 2 * (1.0 + 0.25 + 2.0) + 1.5;
    CHECK(rep.fpl_ms_median == doctest::Approx(want));
    CHECK(rep.fpl_ms_p95 == doctest::Approx(want));
    CHECK(slurp("/tmp/streamtts_bench.json").find("config_echo") != std::string::npos);

    bo.runs = 5;
    CHECK_THROWS_AS(run_bench(bo), ValidationError);
}

TEST_CASE("eval --grid smoke produces four rows") {
    spit("/tmp/streamtts_cspec2.json",
         R"({"speakers": 4, "utterances": 30, "master_seed": 5})");
    run_corpus("/tmp/streamtts_cspec2.json", "/tmp/streamtts_corpus_g");
    EvalCliOptions eo;
    eo.manifest = "/tmp/streamtts_corpus_g/manifest.jsonl";
    eo.grid = true;
    eo.grid_steps = 1;
    eo.report_path = "/tmp/streamtts_grid.csv";
    run_eval(eo);
    std::string rep = slurp("/tmp/streamtts_grid.csv");
    CHECK(std::count(rep.begin(), rep.end(), '\n') == 5);
}

TEST_CASE("cli binary: stdin feed and exit codes") {
    std::string ckpt = make_checkpoint(4);
    std::string bin = STREAMTTS_BIN;

    std::string cmd = "printf 'green\\nbird\\n<close>\\n' | " + bin + " synth --ckpt " + ckpt +
                      " --stdin --out /tmp/streamtts_e2e.wav --log /tmp/streamtts_e2e.log" +
                      " > /dev/null 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK_FALSE(slurp("/tmp/streamtts_e2e.wav").empty());

    // exit code 2: validation/parse problems
    std::string bad = bin + " corpus --spec /tmp/streamtts_nonexistent.json --out /tmp/x 2>/dev/null";
    int rc = std::system(bad.c_str());
    CHECK(WEXITSTATUS(rc) == 4);  // unreadable spec file is an I/O error
    spit("/tmp/streamtts_badspec.json", "{not json");
    std::string bad2 = bin + " corpus --spec /tmp/streamtts_badspec.json --out /tmp/x 2>/dev/null";
    rc = std::system(bad2.c_str());
    CHECK(WEXITSTATUS(rc) == 2);
}
