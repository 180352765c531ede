#include "streamtts/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

namespace streamtts {

// ----------------------------------------------------------------------
// Config.
// ----------------------------------------------------------------------

void ModelConfig::validate() const {
    if (codebooks != 12) throw ValidationError("model: codebooks must be 12");
    if (duration_vocab != 4) throw ValidationError("model: duration vocab must be 4");
    if (la_cap != 10) throw ValidationError("model: look-ahead cap must be 10");
    if (phoneme_vocab < 2 || semantic_vocab < 2 || acoustic_vocab < 2)
        throw ValidationError("model: vocab sizes too small");
    for (const StackConfig* s : {&pt, &tt, &dt}) {
        if (s->d_model % s->heads != 0)
            throw ValidationError("model: d_model must divide by heads");
        if ((s->d_model / s->heads) % 2 != 0)
            throw ValidationError("model: head dim must be even for rotary pairs");
    }
}

ModelConfig ModelConfig::toy() {
    ModelConfig c;
    c.pt = {64, 2, 4, 128};
    c.tt = {64, 2, 4, 128};
    c.dt = {64, 2, 4, 128};
    return c;
}

ModelConfig ModelConfig::paper_reference() {
    ModelConfig c;
    c.pt = {1024, 6, 8, 4096};
    c.tt = {1024, 12, 16, 4096};
    c.dt = {1024, 4, 8, 8192};
    c.phoneme_vocab = 128;
    c.semantic_vocab = 2048;
    c.acoustic_vocab = 2048;
    c.speaker_dim = 192;
    return c;
}

namespace {

nlohmann::json stack_to_json(const StackConfig& s) {
    return {{"d_model", s.d_model}, {"layers", s.layers}, {"heads", s.heads}, {"d_ff", s.d_ff}};
}

StackConfig stack_from_json(const nlohmann::json& j, StackConfig def) {
    def.d_model = j.value("d_model", def.d_model);
    def.layers = j.value("layers", def.layers);
    def.heads = j.value("heads", def.heads);
    def.d_ff = j.value("d_ff", def.d_ff);
    return def;
}

}  // namespace

ModelConfig model_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    ModelConfig c = ModelConfig::toy();
    c.phoneme_vocab = j.value("phoneme_vocab", c.phoneme_vocab);
    c.semantic_vocab = j.value("semantic_vocab", c.semantic_vocab);
    c.duration_vocab = j.value("duration_vocab", c.duration_vocab);
    c.acoustic_vocab = j.value("acoustic_vocab", c.acoustic_vocab);
    c.codebooks = j.value("codebooks", c.codebooks);
    c.la_cap = j.value("la_cap", c.la_cap);
    c.speaker_dim = j.value("speaker_dim", c.speaker_dim);
    c.use_speaker = j.value("use_speaker", c.use_speaker);
    c.speaker_to_tt = j.value("speaker_to_tt", c.speaker_to_tt);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    if (j.contains("pt")) c.pt = stack_from_json(j["pt"], c.pt);
    if (j.contains("tt")) c.tt = stack_from_json(j["tt"], c.tt);
    if (j.contains("dt")) c.dt = stack_from_json(j["dt"], c.dt);
    c.validate();
    return c;
}

std::string model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["phoneme_vocab"] = c.phoneme_vocab;
    j["semantic_vocab"] = c.semantic_vocab;
    j["duration_vocab"] = c.duration_vocab;
    j["acoustic_vocab"] = c.acoustic_vocab;
    j["codebooks"] = c.codebooks;
    j["la_cap"] = c.la_cap;
    j["speaker_dim"] = c.speaker_dim;
    j["use_speaker"] = c.use_speaker;
    j["speaker_to_tt"] = c.speaker_to_tt;
    j["rope_base"] = c.rope_base;
    j["norm_eps"] = c.norm_eps;
    j["pt"] = stack_to_json(c.pt);
    j["tt"] = stack_to_json(c.tt);
    j["dt"] = stack_to_json(c.dt);
    return j.dump(2);
}

void SpeakerVector::validate(int dim) const {
    if (static_cast<int>(v.size()) != dim)
        throw ValidationError("speaker vector: wrong dimension");
    double n2 = 0.0;
    for (float x : v) n2 += static_cast<double>(x) * x;
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
        throw ValidationError("speaker vector: not unit norm");
}

// ----------------------------------------------------------------------
// Parameter creation and binding.
// ----------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> init_matrix(Rng& rng, int rows, int cols, double scale) {
    Tensor<T> t = Tensor<T>::zeros({rows, cols});
    for (auto& x : t.v) x = static_cast<T>(rng.normal() * scale);
    return t;
}

template <typename T>
Tensor<T> init_ones(int d) {
    Tensor<T> t = Tensor<T>::zeros({1, d});
    std::fill(t.v.begin(), t.v.end(), T(1));
    return t;
}

template <typename T>
void add_stack_params(ParameterStore<T>& ps, Rng& rng, const std::string& prefix,
                      const StackConfig& s) {
    for (int l = 0; l < s.layers; ++l) {
        std::string p = prefix + ".l" + std::to_string(l) + ".";
        ps.add(p + "attn_norm", init_ones<T>(s.d_model));
        ps.add(p + "wq", init_matrix<T>(rng, s.d_model, s.d_model, 0.02));
        ps.add(p + "wk", init_matrix<T>(rng, s.d_model, s.d_model, 0.02));
        ps.add(p + "wv", init_matrix<T>(rng, s.d_model, s.d_model, 0.02));
        ps.add(p + "wo", init_matrix<T>(rng, s.d_model, s.d_model, 0.02));
        ps.add(p + "ff_norm", init_ones<T>(s.d_model));
        ps.add(p + "w_gate", init_matrix<T>(rng, s.d_model, s.d_ff, 0.02));
        ps.add(p + "w_up", init_matrix<T>(rng, s.d_model, s.d_ff, 0.02));
        ps.add(p + "w_down", init_matrix<T>(rng, s.d_ff, s.d_model, 0.02));
    }
    ps.add(prefix + ".final_norm", init_ones<T>(s.d_model));
}

}  // namespace

template <typename T>
Model<T> Model<T>::make(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    Rng rng(Rng::mix(seed, 0x4d4f44454cULL));
    add_stack_params(m.params, rng, "pt", cfg.pt);
    m.params.add("pt.embed", init_matrix<T>(rng, cfg.phoneme_vocab, cfg.pt.d_model, 0.02));
    add_stack_params(m.params, rng, "tt", cfg.tt);
    m.params.add("tt.sem_embed",
                 init_matrix<T>(rng, cfg.semantic_vocab + 1, cfg.tt.d_model, 0.02));
    m.params.add("tt.fusion", init_matrix<T>(rng, cfg.tt.d_model + 2 * cfg.pt.d_model,
                                             cfg.tt.d_model, 0.02));
    if (cfg.speaker_to_tt)
        m.params.add("tt.spk_proj", init_matrix<T>(rng, cfg.speaker_dim, cfg.tt.d_model, 0.02));
    m.params.add("tt.head", init_matrix<T>(rng, cfg.tt.d_model, cfg.joint_classes(), 0.02));
    add_stack_params(m.params, rng, "dt", cfg.dt);
    m.params.add("dt.spk_proj", init_matrix<T>(rng, cfg.speaker_dim, cfg.dt.d_model, 0.02));
    m.params.add("dt.h_proj", init_matrix<T>(rng, cfg.tt.d_model, cfg.dt.d_model, 0.02));
    m.params.add("dt.sem_embed",
                 init_matrix<T>(rng, cfg.semantic_vocab, cfg.dt.d_model, 0.02));
    for (int r = 1; r < cfg.codebooks - 1; ++r)
        m.params.add("dt.ac_embed." + std::to_string(r),
                     init_matrix<T>(rng, cfg.acoustic_vocab, cfg.dt.d_model, 0.02));
    for (int r = 1; r < cfg.codebooks; ++r)
        m.params.add("dt.head." + std::to_string(r),
                     init_matrix<T>(rng, cfg.dt.d_model, cfg.acoustic_vocab, 0.02));
    m.bind();
    return m;
}

template <typename T>
Model<T> Model<T>::from_store(const ModelConfig& cfg, ParameterStore<T> store) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    m.params = std::move(store);
    m.bind();
    return m;
}

template <typename T>
void Model<T>::bind() {
    auto bind_stack = [&](const std::string& prefix, const StackConfig& sc, StackView<T>& sv) {
        sv.cfg = sc;
        sv.layers.clear();
        for (int l = 0; l < sc.layers; ++l) {
            std::string p = prefix + ".l" + std::to_string(l) + ".";
            typename StackView<T>::Layer lw;
            lw.attn_norm = params.get(p + "attn_norm").v.data();
            lw.wq = params.get(p + "wq").v.data();
            lw.wk = params.get(p + "wk").v.data();
            lw.wv = params.get(p + "wv").v.data();
            lw.wo = params.get(p + "wo").v.data();
            lw.ff_norm = params.get(p + "ff_norm").v.data();
            lw.wg = params.get(p + "w_gate").v.data();
            lw.wu = params.get(p + "w_up").v.data();
            lw.wd = params.get(p + "w_down").v.data();
            sv.layers.push_back(lw);
        }
        sv.final_norm = params.get(prefix + ".final_norm").v.data();
    };
    bind_stack("pt", cfg.pt, pt);
    bind_stack("tt", cfg.tt, tt);
    bind_stack("dt", cfg.dt, dt);
}

// ----------------------------------------------------------------------
// Raw inference path.
// ----------------------------------------------------------------------

namespace {

template <typename T>
void ff_rows(const typename StackView<T>::Layer& lw, const std::vector<T>& xn, int n, int d,
             int dff, std::vector<T>& out) {
    std::vector<T> gate(static_cast<size_t>(n) * dff), up(static_cast<size_t>(n) * dff);
    matmul_raw(xn.data(), lw.wg, gate.data(), n, d, dff);
    matmul_raw(xn.data(), lw.wu, up.data(), n, d, dff);
    for (size_t i = 0; i < gate.size(); ++i)
        gate[i] = gate[i] * sigmoid_scalar(gate[i]) * up[i];
    out.assign(static_cast<size_t>(n) * d, T(0));
    matmul_raw(gate.data(), lw.wd, out.data(), n, dff, d);
}

}  // namespace

template <typename T>
std::vector<T> stack_step(const StackView<T>& s, KvCache<T>& cache, const std::vector<T>& x_in,
                          double rope_base, double eps) {
    const int d = s.cfg.d_model;
    const int heads = s.cfg.heads;
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    if (static_cast<int>(x_in.size()) != d) throw DimError("stack_step: bad input width");
    if (static_cast<int>(cache.k.size()) != s.cfg.layers)
        throw StateError("stack_step: cache layer count mismatch");
    const int pos = cache.cols;

    std::vector<T> x = x_in, xn(d), q(d), k(d), v(d), att(d), proj(d), ff;
    for (int l = 0; l < s.cfg.layers; ++l) {
        const auto& lw = s.layers[l];
        rmsnorm_raw(x.data(), lw.attn_norm, xn.data(), d, static_cast<T>(eps));
        matmul_raw(xn.data(), lw.wq, q.data(), 1, d, d);
        matmul_raw(xn.data(), lw.wk, k.data(), 1, d, d);
        matmul_raw(xn.data(), lw.wv, v.data(), 1, d, d);
        rope_raw(q.data(), d, heads, pos, rope_base);
        rope_raw(k.data(), d, heads, pos, rope_base);
        cache.k[l].insert(cache.k[l].end(), k.begin(), k.end());
        cache.v[l].insert(cache.v[l].end(), v.begin(), v.end());
        for (int h = 0; h < heads; ++h)
            attn_row_raw(q.data() + h * dh, cache.k[l].data() + h * dh,
                         cache.v[l].data() + h * dh, d, 0, pos, dh, scale,
                         att.data() + h * dh, static_cast<T*>(nullptr));
        matmul_raw(att.data(), lw.wo, proj.data(), 1, d, d);
        for (int i = 0; i < d; ++i) x[i] += proj[i];

        rmsnorm_raw(x.data(), lw.ff_norm, xn.data(), d, static_cast<T>(eps));
        ff_rows<T>(lw, xn, 1, d, s.cfg.d_ff, ff);
        for (int i = 0; i < d; ++i) x[i] += ff[i];
    }
    cache.cols = pos + 1;
    std::vector<T> y(d);
    rmsnorm_raw(x.data(), s.final_norm, y.data(), d, static_cast<T>(eps));
    return y;
}

template <typename T>
std::vector<T> stack_full(const StackView<T>& s, const std::vector<T>& x_in, int n,
                          const RowWindows& win, const std::vector<int>& positions,
                          double rope_base, double eps) {
    const int d = s.cfg.d_model;
    const int heads = s.cfg.heads;
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    if (static_cast<int>(x_in.size()) != static_cast<size_t>(n) * d)
        throw DimError("stack_full: bad input size");

    std::vector<T> x = x_in;
    std::vector<T> xn(x.size()), q(x.size()), k(x.size()), v(x.size()), att(x.size()),
        proj(x.size()), ff;
    for (int l = 0; l < s.cfg.layers; ++l) {
        const auto& lw = s.layers[l];
        for (int i = 0; i < n; ++i)
            rmsnorm_raw(x.data() + static_cast<size_t>(i) * d, lw.attn_norm,
                        xn.data() + static_cast<size_t>(i) * d, d, static_cast<T>(eps));
        matmul_raw(xn.data(), lw.wq, q.data(), n, d, d);
        matmul_raw(xn.data(), lw.wk, k.data(), n, d, d);
        matmul_raw(xn.data(), lw.wv, v.data(), n, d, d);
        for (int i = 0; i < n; ++i) {
            rope_raw(q.data() + static_cast<size_t>(i) * d, d, heads, positions[i], rope_base);
            rope_raw(k.data() + static_cast<size_t>(i) * d, d, heads, positions[i], rope_base);
        }
        for (int i = 0; i < n; ++i) {
            auto [lo, hi] = win.w[i];
            for (int h = 0; h < heads; ++h)
                attn_row_raw(q.data() + static_cast<size_t>(i) * d + h * dh, k.data() + h * dh,
                             v.data() + h * dh, d, lo, hi, dh, scale,
                             att.data() + static_cast<size_t>(i) * d + h * dh,
                             static_cast<T*>(nullptr));
        }
        matmul_raw(att.data(), lw.wo, proj.data(), n, d, d);
        for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

        for (int i = 0; i < n; ++i)
            rmsnorm_raw(x.data() + static_cast<size_t>(i) * d, lw.ff_norm,
                        xn.data() + static_cast<size_t>(i) * d, d, static_cast<T>(eps));
        ff_rows<T>(lw, xn, n, d, s.cfg.d_ff, ff);
        for (size_t i = 0; i < x.size(); ++i) x[i] += ff[i];
    }
    std::vector<T> y(x.size());
    for (int i = 0; i < n; ++i)
        rmsnorm_raw(x.data() + static_cast<size_t>(i) * d, s.final_norm,
                    y.data() + static_cast<size_t>(i) * d, d, static_cast<T>(eps));
    return y;
}

// ----------------------------------------------------------------------
// Phoneme transformer.
// ----------------------------------------------------------------------

template <typename T>
std::vector<std::vector<T>> pt_prefix_forward(const Model<T>& m, const std::vector<int>& tokens,
                                              int prefix_end) {
    const int d = m.cfg.pt.d_model;
    if (prefix_end < 0 || prefix_end >= static_cast<int>(tokens.size()))
        throw ValidationError("pt: prefix end out of range");
    int n = prefix_end + 1;
    std::vector<T> x(static_cast<size_t>(n) * d);
    const auto& table = m.params.get("pt.embed");
    for (int i = 0; i < n; ++i) {
        if (tokens[i] < 0 || tokens[i] >= m.cfg.phoneme_vocab)
            throw ValidationError("pt: phoneme id out of range");
        std::copy_n(table.v.data() + static_cast<size_t>(tokens[i]) * d, d,
                    x.data() + static_cast<size_t>(i) * d);
    }
    RowWindows win;
    std::vector<int> positions(n);
    for (int i = 0; i < n; ++i) {
        win.w.emplace_back(0, std::min(i + m.cfg.la_cap, prefix_end));
        positions[i] = i;
    }
    std::vector<T> y = stack_full(m.pt, x, n, win, positions, m.cfg.rope_base, m.cfg.norm_eps);
    std::vector<std::vector<T>> rows(n);
    for (int i = 0; i < n; ++i)
        rows[i].assign(y.begin() + static_cast<size_t>(i) * d,
                       y.begin() + static_cast<size_t>(i + 1) * d);
    return rows;
}

template <typename T>
std::vector<std::vector<T>> pt_encode(const Model<T>& m, const std::vector<int>& tokens,
                                      const std::vector<int>& la_limits) {
    if (tokens.size() != la_limits.size())
        throw ValidationError("pt_encode: la_limits size mismatch");
    int n = static_cast<int>(tokens.size());
    std::vector<std::vector<T>> out(n);
    std::map<int, std::vector<std::vector<T>>> by_end;
    for (int i = 0; i < n; ++i) {
        if (la_limits[i] < 0) throw ValidationError("pt_encode: negative look-ahead");
        int e = i + la_limits[i];
        if (e >= n) throw ValidationError("pt_encode: look-ahead beyond buffer");
        auto it = by_end.find(e);
        if (it == by_end.end())
            it = by_end.emplace(e, pt_prefix_forward(m, tokens, e)).first;
        out[i] = it->second[i];
    }
    return out;
}

// ----------------------------------------------------------------------
// Temporal transformer.
// ----------------------------------------------------------------------

namespace {

template <typename T>
std::vector<T> fuse_tt_input(const Model<T>& m, int prev_semantic, const std::vector<T>& slot_a,
                             const std::vector<T>* slot_b, const std::vector<T>* spk) {
    const int d_tt = m.cfg.tt.d_model;
    const int d_pt = m.cfg.pt.d_model;
    if (prev_semantic < 0 || prev_semantic > m.cfg.bos_semantic())
        throw ValidationError("tt: previous semantic out of range");
    if (static_cast<int>(slot_a.size()) != d_pt) throw DimError("tt: slot_a width");
    if (slot_b && static_cast<int>(slot_b->size()) != d_pt) throw DimError("tt: slot_b width");

    std::vector<T> cat(d_tt + 2 * d_pt, T(0));
    const auto& sem_table = m.params.get("tt.sem_embed");
    std::copy_n(sem_table.v.data() + static_cast<size_t>(prev_semantic) * d_tt, d_tt, cat.data());
    std::copy_n(slot_a.data(), d_pt, cat.data() + d_tt);
    if (slot_b) std::copy_n(slot_b->data(), d_pt, cat.data() + d_tt + d_pt);

    std::vector<T> x(d_tt, T(0));
    matmul_raw(cat.data(), m.params.get("tt.fusion").v.data(), x.data(), 1,
               d_tt + 2 * d_pt, d_tt);
    if (m.cfg.speaker_to_tt && spk) {
        std::vector<T> sp(d_tt, T(0));
        matmul_raw(spk->data(), m.params.get("tt.spk_proj").v.data(), sp.data(), 1,
                   m.cfg.speaker_dim, d_tt);
        for (int i = 0; i < d_tt; ++i) x[i] += sp[i];
    }
    return x;
}

}  // namespace

template <typename T>
TtStepOut<T> tt_step(const Model<T>& m, TtState<T>& state, int prev_semantic,
                     const std::vector<T>& slot_a, const std::vector<T>* slot_b,
                     const std::vector<T>* spk, int expected_col) {
    if (state.cache.k.empty()) state.cache.init(m.cfg.tt.layers);
    if (expected_col >= 0 && expected_col != state.cache.cols)
        throw StateError("tt_step: cache column mismatch (expected " +
                         std::to_string(expected_col) + ", cache at " +
                         std::to_string(state.cache.cols) + ")");
    std::vector<T> x = fuse_tt_input(m, prev_semantic, slot_a, slot_b, spk);
    TtStepOut<T> out;
    out.h = stack_step(m.tt, state.cache, x, m.cfg.rope_base, m.cfg.norm_eps);
    out.logits.assign(m.cfg.joint_classes(), T(0));
    matmul_raw(out.h.data(), m.params.get("tt.head").v.data(), out.logits.data(), 1,
               m.cfg.tt.d_model, m.cfg.joint_classes());
    return out;
}

// ----------------------------------------------------------------------
// Sampling.
// ----------------------------------------------------------------------

int sample_class(const std::vector<double>& logits, const SampleOptions& opt, Rng& rng) {
    const int n = static_cast<int>(logits.size());
    int finite = 0;
    for (double l : logits)
        if (std::isfinite(l)) ++finite;
    if (finite == 0) throw GenerationFault("sampling: all classes masked");

    if (opt.temperature <= 0.0) {
        int best = -1;
        for (int i = 0; i < n; ++i)
            if (std::isfinite(logits[i]) && (best < 0 || logits[i] > logits[best])) best = i;
        return best;
    }

    std::vector<double> l = logits;
    if (opt.top_k > 0 && opt.top_k < finite) {
        std::vector<int> idx;
        idx.reserve(n);
        for (int i = 0; i < n; ++i)
            if (std::isfinite(l[i])) idx.push_back(i);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (l[a] != l[b]) return l[a] > l[b];
            return a < b;
        });
        for (int r = opt.top_k; r < static_cast<int>(idx.size()); ++r)
            l[idx[r]] = -std::numeric_limits<double>::infinity();
    }

    double mx = -std::numeric_limits<double>::infinity();
    for (double x : l)
        if (std::isfinite(x)) mx = std::max(mx, x);
    std::vector<double> p(n, 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (std::isfinite(l[i])) {
            p[i] = std::exp((l[i] - mx) / opt.temperature);
            total += p[i];
        }
    }
    double r = rng.uniform() * total;
    double cum = 0.0;
    int last = -1;
    for (int i = 0; i < n; ++i) {
        if (p[i] <= 0.0) continue;
        cum += p[i];
        last = i;
        if (r < cum) return i;
    }
    return last;
}

namespace {

template <typename T>
JointToken sample_joint_impl(const std::vector<T>& logits, const SampleOptions& opt, Rng& rng,
                             const std::vector<int>& banned) {
    std::vector<double> l(logits.begin(), logits.end());
    l.back() = -std::numeric_limits<double>::infinity();  // PAD class
    for (int b : banned) {
        if (b < 0 || b >= static_cast<int>(l.size()))
            throw ValidationError("sample_joint: banned class out of range");
        l[b] = -std::numeric_limits<double>::infinity();
    }
    return JointToken::from_class(sample_class(l, opt, rng));
}

}  // namespace

JointToken sample_joint(const std::vector<float>& logits, const SampleOptions& opt, Rng& rng,
                        const std::vector<int>& banned_classes) {
    return sample_joint_impl(logits, opt, rng, banned_classes);
}

JointToken sample_joint(const std::vector<double>& logits, const SampleOptions& opt, Rng& rng,
                        const std::vector<int>& banned_classes) {
    return sample_joint_impl(logits, opt, rng, banned_classes);
}

// ----------------------------------------------------------------------
// Depth transformer.
// ----------------------------------------------------------------------

namespace {

template <typename T>
std::vector<std::vector<T>> dt_context_rows(const Model<T>& m, const std::vector<T>& h_t,
                                            int semantic, const std::vector<T>& spk) {
    const int d = m.cfg.dt.d_model;
    std::vector<std::vector<T>> rows(3, std::vector<T>(d, T(0)));
    if (m.cfg.use_speaker) {
        if (static_cast<int>(spk.size()) != m.cfg.speaker_dim)
            throw ValidationError("dt: speaker vector dimension mismatch");
        matmul_raw(spk.data(), m.params.get("dt.spk_proj").v.data(), rows[0].data(), 1,
                   m.cfg.speaker_dim, d);
    }
    if (static_cast<int>(h_t.size()) != m.cfg.tt.d_model) throw DimError("dt: bad hidden width");
    matmul_raw(h_t.data(), m.params.get("dt.h_proj").v.data(), rows[1].data(), 1,
               m.cfg.tt.d_model, d);
    if (semantic < 0 || semantic >= m.cfg.semantic_vocab)
        throw ValidationError("dt: semantic token out of range");
    const auto& sem_table = m.params.get("dt.sem_embed");
    std::copy_n(sem_table.v.data() + static_cast<size_t>(semantic) * d, d, rows[2].data());
    return rows;
}

}  // namespace

template <typename T>
std::vector<int> dt_generate(const Model<T>& m, const std::vector<T>& h_t, int semantic,
                             const std::vector<T>& spk, const SampleOptions& opt, Rng& rng) {
    const int d = m.cfg.dt.d_model;
    const int n_rows = m.cfg.codebooks - 1;  // 11 acoustic rows
    auto ctx = dt_context_rows(m, h_t, semantic, spk);

    KvCache<T> cache;
    cache.init(m.cfg.dt.layers);
    stack_step(m.dt, cache, ctx[0], m.cfg.rope_base, m.cfg.norm_eps);
    stack_step(m.dt, cache, ctx[1], m.cfg.rope_base, m.cfg.norm_eps);
    std::vector<T> y = stack_step(m.dt, cache, ctx[2], m.cfg.rope_base, m.cfg.norm_eps);

    std::vector<int> out(n_rows);
    for (int r = 1; r <= n_rows; ++r) {
        std::vector<T> logits(m.cfg.acoustic_vocab, T(0));
        matmul_raw(y.data(), m.params.get("dt.head." + std::to_string(r)).v.data(),
                   logits.data(), 1, d, m.cfg.acoustic_vocab);
        std::vector<double> ld(logits.begin(), logits.end());
        out[r - 1] = sample_class(ld, opt, rng);
        if (r < n_rows) {
            const auto& table = m.params.get("dt.ac_embed." + std::to_string(r));
            std::vector<T> emb(table.v.data() + static_cast<size_t>(out[r - 1]) * d,
                               table.v.data() + static_cast<size_t>(out[r - 1] + 1) * d);
            y = stack_step(m.dt, cache, emb, m.cfg.rope_base, m.cfg.norm_eps);
        }
    }
    return out;
}

// ----------------------------------------------------------------------
// Teacher-forced training graph.
// ----------------------------------------------------------------------

namespace {

// one graph node per named parameter per graph
template <typename T>
struct ParamNodes {
    Graph<T>& g;
    ParameterStore<T>& ps;
    std::map<std::string, int> cache;

    int operator()(const std::string& name) {
        auto it = cache.find(name);
        if (it != cache.end()) return it->second;
        int id = g.param(ps.get(name));
        cache[name] = id;
        return id;
    }
};

template <typename T>
int build_stack_graph(Graph<T>& g, ParamNodes<T>& pn, const std::string& prefix,
                      const StackConfig& sc, int x, const RowWindows& win,
                      const std::vector<int>& positions, double rope_base, double eps) {
    for (int l = 0; l < sc.layers; ++l) {
        std::string p = prefix + ".l" + std::to_string(l) + ".";
        int xn = g.rmsnorm(x, pn(p + "attn_norm"), eps);
        int q = g.rope(g.matmul(xn, pn(p + "wq")), positions, sc.heads, rope_base);
        int k = g.rope(g.matmul(xn, pn(p + "wk")), positions, sc.heads, rope_base);
        int v = g.matmul(xn, pn(p + "wv"));
        int att = g.attention(q, k, v, win, sc.heads);
        x = g.add(x, g.matmul(att, pn(p + "wo")));
        int fn = g.rmsnorm(x, pn(p + "ff_norm"), eps);
        int gate = g.silu(g.matmul(fn, pn(p + "w_gate")));
        int up = g.matmul(fn, pn(p + "w_up"));
        x = g.add(x, g.matmul(g.mul(gate, up), pn(p + "w_down")));
    }
    return g.rmsnorm(x, pn(prefix + ".final_norm"), eps);
}

}  // namespace

template <typename T>
NllNodes build_teacher_forced(Graph<T>& g, Model<T>& m, const TrainItem<T>& item) {
    const ModelConfig& cfg = m.cfg;
    const int M = static_cast<int>(item.phonemes.size());
    const int frames = static_cast<int>(item.durations.size());
    auto fail = [&](const std::string& why) {
        throw ValidationError("teacher_forced_nll [" + item.tag + "]: " + why);
    };
    if (M == 0) fail("no phonemes");
    if (frames == 0) fail("no frames");
    if (item.grid.rows != cfg.codebooks || item.grid.cols != frames)
        fail("grid shape disagrees with duration stream");
    if (static_cast<int>(item.la_limits.size()) != M) fail("la_limits size mismatch");
    DecodeResult cov;
    try {
        cov = decode_tokens(item.durations, M);
    } catch (const std::exception& e) {
        fail(std::string("duration stream invalid: ") + e.what());
    }
    for (int t = 0; t < frames; ++t)
        if (item.grid.at(0, t) < 0 || item.grid.at(0, t) >= cfg.semantic_vocab)
            fail("semantic token out of range at column " + std::to_string(t));
    for (int r = 1; r < cfg.codebooks; ++r) {
        if (item.grid.at(r, 0) != cfg.acoustic_vocab)
            fail("column 0 must hold ACOUSTIC_PAD in row " + std::to_string(r));
        for (int t = 1; t < frames; ++t)
            if (item.grid.at(r, t) < 0 || item.grid.at(r, t) >= cfg.acoustic_vocab)
                fail("acoustic token out of range");
    }

    ParamNodes<T> pn{g, m.params, {}};
    const int d_pt = cfg.pt.d_model;
    const int d_tt = cfg.tt.d_model;
    const int d_dt = cfg.dt.d_model;

    // phoneme transformer: one forward per distinct look-ahead horizon
    std::map<int, int> prefix_nodes;  // prefix end -> [end+1 x d_pt] node
    std::vector<std::pair<int, int>> pos_embed(M);  // (node, row) per position
    for (int i = 0; i < M; ++i) {
        if (item.la_limits[i] < 0) fail("negative la limit");
        int e = i + item.la_limits[i];
        if (e >= M) fail("la limit beyond window");
        auto it = prefix_nodes.find(e);
        if (it == prefix_nodes.end()) {
            int n = e + 1;
            std::vector<int> ids(item.phonemes.begin(), item.phonemes.begin() + n);
            int x = g.embed(pn("pt.embed"), ids);
            RowWindows win;
            std::vector<int> positions(n);
            for (int j = 0; j < n; ++j) {
                win.w.emplace_back(0, std::min(j + cfg.la_cap, e));
                positions[j] = j;
            }
            int y = build_stack_graph(g, pn, "pt", cfg.pt, x, win, positions, cfg.rope_base,
                                      cfg.norm_eps);
            it = prefix_nodes.emplace(e, y).first;
        }
        pos_embed[i] = {it->second, i};
    }

    // temporal transformer, full teacher-forced sequence
    int zero_pt = g.zeros({1, d_pt});
    std::vector<std::pair<int, int>> slot_a_src(frames), slot_b_src(frames);
    for (int t = 0; t < frames; ++t) {
        int b = cov.coverage[t].b;  // 1-based
        slot_a_src[t] = pos_embed[b - 1];
        slot_b_src[t] = (b < M) ? pos_embed[b] : std::pair<int, int>{zero_pt, 0};
    }
    std::vector<int> prev_sem(frames);
    prev_sem[0] = cfg.bos_semantic();
    for (int t = 1; t < frames; ++t) prev_sem[t] = item.grid.at(0, t - 1);

    int fused = g.matmul(
        g.concat_cols({g.embed(pn("tt.sem_embed"), prev_sem), g.stack_rows(slot_a_src),
                       g.stack_rows(slot_b_src)}),
        pn("tt.fusion"));
    int spk_leaf = -1;
    if (cfg.use_speaker || cfg.speaker_to_tt) {
        if (static_cast<int>(item.speaker.size()) != cfg.speaker_dim)
            fail("speaker vector dimension mismatch");
        spk_leaf = g.leaf(Tensor<T>({1, cfg.speaker_dim}, item.speaker));
    }
    if (cfg.speaker_to_tt) {
        int sp = g.matmul(spk_leaf, pn("tt.spk_proj"));
        std::vector<std::pair<int, int>> rep(frames, {sp, 0});
        fused = g.add(fused, g.stack_rows(rep));
    }
    std::vector<int> tt_pos(frames);
    for (int t = 0; t < frames; ++t) tt_pos[t] = t;
    int h = build_stack_graph(g, pn, "tt", cfg.tt, fused, RowWindows::causal(frames), tt_pos,
                              cfg.rope_base, cfg.norm_eps);

    NllNodes out;
    out.tt_logits = g.matmul(h, pn("tt.head"));
    out.tt_targets.resize(frames);
    for (int t = 0; t < frames; ++t)
        out.tt_targets[t] = item.grid.at(0, t) * 4 + item.durations[t].packed_id();
    auto [tt_ce, tt_count] = g.cross_entropy_sum(out.tt_logits, out.tt_targets);
    out.loss_tt = g.scale(tt_ce, 1.0 / tt_count);

    // depth transformer: every column >= 1 as one block-causal batch
    const int n_ac = cfg.codebooks - 1;
    if (frames < 2) {
        out.loss_dt = g.zeros({1});
        out.dt_logits = -1;
        return out;
    }
    int cols = frames - 1;
    int spk_row;
    if (cfg.use_speaker) {
        spk_row = g.matmul(spk_leaf, pn("dt.spk_proj"));
    } else {
        spk_row = g.zeros({1, d_dt});
    }
    int h_proj = g.matmul(h, pn("dt.h_proj"));
    std::vector<int> sem_ids(cols);
    for (int t = 1; t < frames; ++t) sem_ids[t - 1] = item.grid.at(0, t);
    int sem_emb = g.embed(pn("dt.sem_embed"), sem_ids);
    std::vector<int> ac_emb(n_ac - 1);
    for (int r = 1; r < n_ac; ++r) {
        std::vector<int> ids(cols);
        for (int t = 1; t < frames; ++t) ids[t - 1] = item.grid.at(r, t);
        ac_emb[r - 1] = g.embed(pn("dt.ac_embed." + std::to_string(r)), ids);
    }
    const int depth = 2 + n_ac;  // spk, h, sem, 10 acoustic embeds
    std::vector<std::pair<int, int>> dt_src;
    dt_src.reserve(static_cast<size_t>(cols) * depth);
    RowWindows dt_win;
    std::vector<int> dt_pos;
    for (int j = 0; j < cols; ++j) {
        int t = j + 1;
        dt_src.emplace_back(spk_row, 0);
        dt_src.emplace_back(h_proj, t);
        dt_src.emplace_back(sem_emb, j);
        for (int r = 1; r < n_ac; ++r) dt_src.emplace_back(ac_emb[r - 1], j);
        for (int p = 0; p < depth; ++p) {
            dt_win.w.emplace_back(j * depth, j * depth + p);
            dt_pos.push_back(p);
        }
    }
    int dt_out = build_stack_graph(g, pn, "dt", cfg.dt, g.stack_rows(dt_src), dt_win, dt_pos,
                                   cfg.rope_base, cfg.norm_eps);

    std::vector<int> head_logits(n_ac);
    for (int r = 1; r <= n_ac; ++r) {
        std::vector<std::pair<int, int>> rows(cols);
        for (int j = 0; j < cols; ++j) rows[j] = {dt_out, j * depth + r + 1};
        head_logits[r - 1] =
            g.matmul(g.stack_rows(rows), pn("dt.head." + std::to_string(r)));
    }
    std::vector<std::pair<int, int>> all_rows;
    all_rows.reserve(static_cast<size_t>(cols) * n_ac);
    out.dt_targets.reserve(static_cast<size_t>(cols) * n_ac);
    for (int j = 0; j < cols; ++j) {
        for (int r = 1; r <= n_ac; ++r) {
            all_rows.emplace_back(head_logits[r - 1], j);
            out.dt_targets.push_back(item.grid.at(r, j + 1));
        }
    }
    out.dt_logits = g.stack_rows(all_rows);
    auto [dt_ce, dt_count] = g.cross_entropy_sum(out.dt_logits, out.dt_targets);
    out.loss_dt = g.scale(dt_ce, 1.0 / dt_count);
    return out;
}

template <typename T>
std::pair<double, double> teacher_forced_nll(Model<T>& m, const std::vector<TrainItem<T>>& batch) {
    double tt_sum = 0.0, dt_sum = 0.0;
    int64_t tt_n = 0, dt_n = 0;
    for (const auto& item : batch) {
        Graph<T> g(false);
        NllNodes nodes = build_teacher_forced(g, m, item);
        int frames = static_cast<int>(item.durations.size());
        tt_sum += static_cast<double>(g.val(nodes.loss_tt).v[0]) * frames;
        tt_n += frames;
        if (frames >= 2) {
            int64_t cnt = static_cast<int64_t>(frames - 1) * (m.cfg.codebooks - 1);
            dt_sum += static_cast<double>(g.val(nodes.loss_dt).v[0]) * cnt;
            dt_n += cnt;
        }
    }
    return {tt_n ? tt_sum / tt_n : 0.0, dt_n ? dt_sum / dt_n : 0.0};
}

// ----------------------------------------------------------------------
// Explicit instantiations.
// ----------------------------------------------------------------------

template struct Model<float>;
template struct Model<double>;

template std::vector<float> stack_step(const StackView<float>&, KvCache<float>&,
                                       const std::vector<float>&, double, double);
template std::vector<double> stack_step(const StackView<double>&, KvCache<double>&,
                                        const std::vector<double>&, double, double);
template std::vector<float> stack_full(const StackView<float>&, const std::vector<float>&, int,
                                       const RowWindows&, const std::vector<int>&, double, double);
template std::vector<double> stack_full(const StackView<double>&, const std::vector<double>&, int,
                                        const RowWindows&, const std::vector<int>&, double,
                                        double);
template std::vector<std::vector<float>> pt_prefix_forward(const Model<float>&,
                                                           const std::vector<int>&, int);
template std::vector<std::vector<double>> pt_prefix_forward(const Model<double>&,
                                                            const std::vector<int>&, int);
template std::vector<std::vector<float>> pt_encode(const Model<float>&, const std::vector<int>&,
                                                   const std::vector<int>&);
template std::vector<std::vector<double>> pt_encode(const Model<double>&, const std::vector<int>&,
                                                    const std::vector<int>&);
template TtStepOut<float> tt_step(const Model<float>&, TtState<float>&, int,
                                  const std::vector<float>&, const std::vector<float>*,
                                  const std::vector<float>*, int);
template TtStepOut<double> tt_step(const Model<double>&, TtState<double>&, int,
                                   const std::vector<double>&, const std::vector<double>*,
                                   const std::vector<double>*, int);
template std::vector<int> dt_generate(const Model<float>&, const std::vector<float>&, int,
                                      const std::vector<float>&, const SampleOptions&, Rng&);
template std::vector<int> dt_generate(const Model<double>&, const std::vector<double>&, int,
                                      const std::vector<double>&, const SampleOptions&, Rng&);
template NllNodes build_teacher_forced(Graph<float>&, Model<float>&, const TrainItem<float>&);
template NllNodes build_teacher_forced(Graph<double>&, Model<double>&, const TrainItem<double>&);
template std::pair<double, double> teacher_forced_nll(Model<float>&,
                                                      const std::vector<TrainItem<float>>&);
template std::pair<double, double> teacher_forced_nll(Model<double>&,
                                                      const std::vector<TrainItem<double>>&);

}  // namespace streamtts
