#include <doctest.h>

#include <cmath>

#include "streamtts/cli.hpp"
#include "streamtts/engine.hpp"

using namespace streamtts;

namespace {

Lexicon repo_lexicon() {
    return load_lexicon(std::string(STREAMTTS_DATA_DIR) + "/lexicon.tsv");
}

CorpusSpec small_spec() {
    CorpusSpec s;
    s.speakers = 4;
    s.utterances = 12;
    s.min_phonemes = 8;
    s.max_phonemes = 16;
    s.master_seed = 33;
    return s;
}

Model<float> toy_model(uint64_t seed) {
    return Model<float>::make(ModelConfig::toy(), seed);
}

std::vector<std::vector<int>> token_matrix(const std::vector<FrameOut>& frames) {
    std::vector<std::vector<int>> m;
    for (const auto& f : frames)
        if (f.decodable) m.push_back(f.tokens);
    return m;
}

void drain(StreamEngine& e) {
    while (e.try_step()) {
    }
}

JointToken always(Shift s, int count) {
    JointToken t;
    t.semantic = 11;
    t.duration = {s, count};
    return t;
}

}  // namespace

TEST_CASE("gating: no buffer no step; single-word stream waits at its last phoneme") {
    Model<float> m = toy_model(1);
    Lexicon lex = repo_lexicon();
    VirtualClock clock;
    StreamEngine e(m, lex, clock, {});
    CHECK_FALSE(e.try_step().has_value());

    e.push_word("hi");  // fallback HH IH
    CHECK(e.buffer_size() == 2);
    // steps may run while the pointer has a successor slot; at the last
    // phoneme with the stream open, the engine waits
    int guard = 0;
    while (e.try_step() && ++guard < 100) {
    }
    CHECK(e.pointer() >= e.buffer_size());  // at the tail phoneme or past it
    int steps_before = e.steps();
    CHECK_FALSE(e.try_step().has_value());
    CHECK(e.steps() == steps_before);

    e.push_word("there");
    CHECK(e.try_step().has_value());
}

TEST_CASE("close on an empty stream is an immediate terminal state") {
    Model<float> m = toy_model(2);
    Lexicon lex = repo_lexicon();
    VirtualClock clock;
    StreamEngine e(m, lex, clock, {});
    e.close();
    CHECK_FALSE(e.try_step().has_value());
    CHECK(e.finished());
    CHECK(e.emitted().empty());
    CHECK_THROWS_AS(e.push_word("late"), StateError);
    CHECK_THROWS_AS(e.close(), StateError);
}

TEST_CASE("single-phoneme utterance under a go-once policy: one content frame plus flush") {
    Model<float> m = toy_model(3);
    Lexicon lex = repo_lexicon();
    VirtualClock clock;
    EngineOptions opt;
    opt.joint_override = [](const std::vector<float>&, const std::vector<int>&) {
        return always(Shift::Go, 1);
    };
    StreamEngine e(m, lex, clock, opt);
    e.push_word("a");  // one phoneme
    CHECK(e.buffer_size() == 1);
    CHECK_FALSE(e.try_step().has_value());  // no slot_b and the stream is open
    e.close();
    auto f1 = e.try_step();  // first step: non-decodable marker
    REQUIRE(f1.has_value());
    CHECK_FALSE(f1->decodable);
    auto f2 = e.try_step();  // flush resolves frame 1
    REQUIRE(f2.has_value());
    CHECK(f2->decodable);
    CHECK(f2->frame_index == 1);
    CHECK_FALSE(e.try_step().has_value());
    CHECK(e.emitted().size() == 1);
    CHECK(e.steps() == 2);
}

TEST_CASE("forced-go guard fires at 25 frames per phoneme under a stay-forever policy") {
    Model<float> m = toy_model(4);
    Lexicon lex = repo_lexicon();
    VirtualClock clock;
    EngineOptions opt;
    opt.joint_override = [](const std::vector<float>&, const std::vector<int>& banned) {
        JointToken stay = always(Shift::Stay, 1);
        for (int b : banned)
            if (b == stay.joint_class()) return always(Shift::Go, 1);
        return stay;
    };
    StreamEngine e(m, lex, clock, opt);
    e.push_word("a");
    e.close();
    drain(e);
    CHECK(static_cast<int>(e.emitted().size()) == 25);  // 25 * M with M = 1
    CHECK(e.finished());
}

TEST_CASE("schedule equivalence: all words pushed up front equals offline generation") {
    Lexicon lex = repo_lexicon();
    CorpusSpec spec = small_spec();
    Model<float> m = toy_model(5);

    for (double temperature : {0.0, 0.8}) {
        for (uint64_t seed = 0; seed < 6; ++seed) {
            Utterance u = generate_utterance(spec, lex, seed);
            EngineOptions opt;
            opt.sampling.temperature = temperature;
            opt.sampling.top_k = 8;
            opt.seed = 1000 + seed;

            // word-by-word pushes, then steps: identical to one big push
            VirtualClock clock;
            StreamEngine e(m, lex, clock, opt);
            size_t i = 0;
            while (i < u.phonemes.size()) {
                size_t k = std::min<size_t>(2 + seed % 2, u.phonemes.size() - i);
                e.push_phonemes({u.phonemes.begin() + i, u.phonemes.begin() + i + k});
                i += k;
            }
            e.close();
            drain(e);
            CHECK(e.finished());

            VirtualClock clock2;
            StreamEngine e2(m, lex, clock2, opt);
            e2.push_phonemes(u.phonemes);
            e2.close();
            drain(e2);
            CHECK(token_matrix(e.emitted()) == token_matrix(e2.emitted()));

            // and to the straight-line offline generator
            std::vector<float> default_spk(
                m.cfg.speaker_dim, 1.0f / std::sqrt(static_cast<float>(m.cfg.speaker_dim)));
            OfflineResult off = generate_offline(m, u.phonemes, default_spk, opt);
            CHECK(token_matrix(e2.emitted()) == token_matrix(off.frames));
        }
    }
}

TEST_CASE("consumed embeddings freeze at their at-consumption values") {
    Lexicon lex = repo_lexicon();
    Model<float> m = toy_model(6);
    VirtualClock clock;
    StreamEngine e(m, lex, clock, {});
    e.push_word("cat");  // K AE T
    REQUIRE(e.buffer_size() == 3);
    auto step = e.try_step();  // consumes positions 0 and 1
    REQUIRE(step.has_value());
    std::vector<float> frozen0 = e.embedding(0);
    CHECK(e.frozen_positions() >= 2);

    e.push_word("mountain");
    e.push_word("morning");
    e.push_word("listen");
    CHECK(e.embedding(0) == frozen0);

    // a recompute-everything reference disagrees once the horizon fills
    std::vector<int> buf;
    for (const char* w : {"cat", "mountain", "morning", "listen"}) {
        auto p = phonemize_word(w, lex);
        buf.insert(buf.end(), p.begin(), p.end());
    }
    std::vector<int> la(buf.size());
    for (size_t i = 0; i < buf.size(); ++i)
        la[i] = static_cast<int>(std::min<size_t>(10, buf.size() - 1 - i));
    auto reference = pt_encode(m, buf, la);
    CHECK(reference[0] != frozen0);
}

TEST_CASE("editing words beyond the consumed+10 horizon never changes emitted frames") {
    Lexicon lex = repo_lexicon();
    CorpusSpec spec = small_spec();
    Model<float> m = toy_model(7);

    for (uint64_t trial = 0; trial < 5; ++trial) {
        Utterance u = generate_utterance(spec, lex, trial);
        EngineOptions opt;
        opt.sampling.temperature = 0.8;
        opt.sampling.top_k = 8;
        opt.seed = trial;

        VirtualClock ca, cb;
        StreamEngine a(m, lex, ca, opt), b(m, lex, cb, opt);
        a.push_phonemes(u.phonemes);
        b.push_phonemes(u.phonemes);
        for (int s = 0; s < 4; ++s) {
            auto fa = a.try_step();
            auto fb = b.try_step();
            CHECK(fa.has_value() == fb.has_value());
        }
        auto before = token_matrix(a.emitted());

        // the edited word lies beyond every consumed position + 10
        std::vector<int> tail_a(12, 5), tail_b(12, 9);
        a.push_phonemes(tail_a);
        b.push_phonemes(tail_b);
        CHECK(token_matrix(a.emitted()) == before);
        CHECK(token_matrix(b.emitted()) == before);

        // frames already out never change as generation continues
        a.close();
        b.close();
        drain(a);
        drain(b);
        auto full_a = token_matrix(a.emitted());
        CHECK(std::equal(before.begin(), before.end(), full_a.begin()));
    }
}

TEST_CASE("prompt prefill: bookkeeping and equivalence with the offline oracle") {
    Lexicon lex = repo_lexicon();
    CorpusSpec spec = small_spec();
    Model<float> m = toy_model(8);
    Utterance pu = generate_utterance(spec, lex, 7);
    Prompt prompt = prompt_from_utterance(pu, spec.codec);

    EngineOptions opt;
    opt.seed = 5;
    VirtualClock clock;
    StreamEngine e(m, lex, clock, opt);
    e.prefill_prompt(prompt);
    CHECK(e.steps() == pu.frames());
    CHECK(e.tt_cache_cols() == pu.frames());
    CHECK(e.pointer() == static_cast<int>(pu.phonemes.size()) + 1);
    CHECK(e.emitted().empty());

    Utterance tu = generate_utterance(spec, lex, 8);
    e.push_phonemes(tu.phonemes);
    e.close();
    drain(e);
    CHECK(e.finished());
    CHECK_FALSE(e.emitted().empty());
    for (const auto& f : e.emitted()) CHECK(f.frame_index > pu.frames());

    OfflineResult off = generate_offline(m, tu.phonemes, pu.speaker_vec, opt, &prompt);
    CHECK(token_matrix(e.emitted()) == token_matrix(off.frames));

    VirtualClock c2;
    StreamEngine e2(m, lex, c2, opt);
    Prompt empty;
    e2.prefill_prompt(empty);
    CHECK(e2.steps() == 0);
    CHECK(e2.buffer_size() == 0);

    CHECK_THROWS_AS(e.prefill_prompt(prompt), StateError);
}

TEST_CASE("latency ledger: call-count identity, virtual-clock FPL, breakdown") {
    Lexicon lex = repo_lexicon();
    Model<float> m = toy_model(9);
    VirtualClock clock;
    EngineOptions opt;
    StreamEngine e(m, lex, clock, opt);
    const uint64_t pt_ns = 3000000, tt_ns = 1000000, dt_ns = 2000000, sample_ns = 250000;
    e.stage_hook = [&](const char* stage) {
        std::string_view s(stage);
        if (s == "pt") clock.advance_ns(pt_ns);
        else if (s == "tt") clock.advance_ns(tt_ns);
        else if (s == "dt") clock.advance_ns(dt_ns);
        else if (s == "sample") clock.advance_ns(sample_ns);
    };
    e.push_word("mountain");
    e.close();
    drain(e);
    REQUIRE_FALSE(e.emitted().empty());

    const StageTimes& lt = e.ledger();
    CHECK(lt.tt_steps_at_first_decodable == 2);
    CHECK(lt.dt_columns_at_first_decodable == 2);
    CHECK(lt.pt_passes >= 1);

    LatencyReport rep = e.latency_report();
    // one pt pass for the single word, then two full steps to the first frame
    CHECK(rep.fpl_ms == doctest::Approx((pt_ns + 2 * (tt_ns + sample_ns + dt_ns)) / 1e6));
    double audio_s = 0.08 * rep.decodable_frames;
    double wall_s = static_cast<double>(rep.last_emit_ns - rep.first_word_arrival_ns) / 1e9;
    CHECK(rep.rtf == doctest::Approx(wall_s / audio_s));

    uint64_t staged = lt.pt_ns + lt.tt_ns + lt.dt_ns + lt.sample_ns + rep.stages.other_ns;
    CHECK(std::abs(static_cast<double>(staged) - static_cast<double>(lt.active_ns)) <=
          0.01 * std::max<double>(1.0, static_cast<double>(lt.active_ns)));
}

TEST_CASE("latency report without frames is an error") {
    Lexicon lex = repo_lexicon();
    Model<float> m = toy_model(10);
    VirtualClock clock;
    StreamEngine e(m, lex, clock, {});
    CHECK_THROWS_AS(e.latency_report(), StateError);
}

TEST_CASE("token log round trip preserves indices and tokens") {
    Lexicon lex = repo_lexicon();
    CorpusSpec spec = small_spec();
    Model<float> m = toy_model(11);
    Utterance u = generate_utterance(spec, lex, 2);
    EngineOptions opt;
    VirtualClock clock;
    StreamEngine e(m, lex, clock, opt);
    e.push_phonemes(u.phonemes);
    e.close();
    drain(e);
    write_token_log("/tmp/streamtts_tokens.log", e.emitted());
    auto back = read_token_log("/tmp/streamtts_tokens.log");
    REQUIRE(back.size() == e.emitted().size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].frame_index == e.emitted()[i].frame_index);
        CHECK(back[i].tokens == e.emitted()[i].tokens);
    }
}

TEST_CASE("rtf is 1.0 when the run takes exactly 0.08 s per generated frame") {
    Lexicon lex = repo_lexicon();
    Model<float> m = toy_model(12);
    EngineOptions opt;

    // first run to learn the step and frame counts of this model and seed
    VirtualClock c1;
    StreamEngine probe(m, lex, c1, opt);
    probe.push_word("mountain");
    probe.close();
    drain(probe);
    int total_steps = probe.steps();
    int frames = static_cast<int>(probe.emitted().size());
    REQUIRE(frames > 0);

    // second run: the final emission lands exactly at 0.08 * frames seconds
    VirtualClock c2;
    StreamEngine e(m, lex, c2, opt);
    int dt_calls = 0;
    e.stage_hook = [&](const char* stage) {
        if (std::string_view(stage) == "dt" && ++dt_calls == total_steps)
            c2.set_ns(static_cast<uint64_t>(0.08 * frames * 1e9));
    };
    e.push_word("mountain");
    e.close();
    drain(e);
    LatencyReport rep = e.latency_report();
    CHECK(rep.rtf == doctest::Approx(1.0).epsilon(1e-9));
}
