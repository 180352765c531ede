#include <doctest.h>

#include <cmath>

#include "streamtts/rng.hpp"
#include "streamtts/tensor.hpp"

using namespace streamtts;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape s, double scale = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(s));
    for (auto& x : t.v) x = rng.normal() * scale;
    return t;
}

// central finite differences w.r.t. one input tensor of a scalar-valued
// computation; the oracle side of every gradient check
template <typename F>
std::vector<double> finite_diff(Tensor<double>& x, F eval, double h = 1e-5) {
    std::vector<double> g(x.v.size());
    for (size_t i = 0; i < x.v.size(); ++i) {
        double keep = x.v[i];
        x.v[i] = keep + h;
        double up = eval();
        x.v[i] = keep - h;
        double dn = eval();
        x.v[i] = keep;
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        double denom = std::max({std::abs(got[i]), std::abs(want[i]), 1e-6});
        worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Graph<double> g(false);
    int a = g.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    int b = g.leaf(Tensor<double>({2, 2}, {3, 4, 5, 6}));
    int c = g.matmul(a, b);
    CHECK(g.val(c).v == std::vector<double>{3, 4, 5, 6});

    int p = g.leaf(Tensor<double>({1, 2}, {1, 2}));
    int q = g.leaf(Tensor<double>({2, 1}, {3, 4}));
    int r = g.matmul(p, q);
    CHECK(g.val(r).v[0] == 11.0);
}

TEST_CASE("matmul shape mismatch raises") {
    Graph<double> g(false);
    int a = g.leaf(Tensor<double>::zeros({2, 3}));
    int b = g.leaf(Tensor<double>::zeros({2, 3}));
    CHECK_THROWS_AS(g.matmul(a, b), DimError);
}

TEST_CASE("matmul gradient: sum(A*B) vs finite differences and row-broadcast identity") {
    Rng rng(7);
    Tensor<double> ta = random_tensor(rng, {4, 5});
    Tensor<double> tb = random_tensor(rng, {5, 3});

    Graph<double> g(true);
    int a = g.leaf(ta), b = g.leaf(tb);
    int loss = g.sum(g.matmul(a, b));
    g.backward(loss);

    // d sum(AB) / dA[i,k] = sum_j B[k,j]: rows broadcast the column sums of B
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 5; ++k) {
            double colsum = 0;
            for (int j = 0; j < 3; ++j) colsum += tb.v[k * 3 + j];
            CHECK(g.grad(a)[i * 5 + k] == doctest::Approx(colsum).epsilon(1e-12));
        }

    auto fd = finite_diff(ta, [&] {
        Graph<double> gg(false);
        return gg.val(gg.sum(gg.matmul(gg.leaf(ta), gg.leaf(tb)))).v[0];
    });
    CHECK(max_rel_err(g.grad(a), fd) < 1e-4);
}

TEST_CASE("backward on non-scalar raises; sum and quadratic gradients") {
    Graph<double> g(true);
    int x = g.leaf(Tensor<double>({1, 3}, {1, 2, 3}));
    CHECK_THROWS_AS(g.backward(x), DimError);

    int s = g.sum(x);
    g.backward(s);
    CHECK(g.grad(x) == std::vector<double>{1, 1, 1});

    Graph<double> g2(true);
    int y = g2.leaf(Tensor<double>({1, 3}, {1, 2, 3}));
    int loss = g2.sum(g2.mul(y, y));
    g2.backward(loss);
    CHECK(g2.grad(y) == std::vector<double>{2, 4, 6});
}

TEST_CASE("rms_norm basics") {
    Graph<double> g(false);
    int w = g.leaf(Tensor<double>({1, 4}, {1, 1, 1, 1}));
    int x = g.leaf(Tensor<double>({1, 4}, {1, 1, 1, 1}));
    auto out = g.val(g.rmsnorm(x, w, 0.0)).v;
    for (double v : out) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    int w2 = g.leaf(Tensor<double>({1, 2}, {1, 1}));
    int x2 = g.leaf(Tensor<double>({1, 2}, {0, 0}));
    auto out2 = g.val(g.rmsnorm(x2, w2, 1e-5)).v;
    CHECK(out2[0] == 0.0);
    CHECK(out2[1] == 0.0);
}

TEST_CASE("rms_norm output RMS is 1 for unit weight") {
    Rng rng(3);
    Tensor<double> tx = random_tensor(rng, {1, 8});
    Tensor<double> ones = Tensor<double>::zeros({1, 8});
    std::fill(ones.v.begin(), ones.v.end(), 1.0);
    Graph<double> g(false);
    auto out = g.val(g.rmsnorm(g.leaf(tx), g.leaf(ones), 1e-12)).v;
    double ms = 0;
    for (double v : out) ms += v * v;
    CHECK(std::sqrt(ms / 8.0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("windowed attention equals dense additive-mask oracle") {
    Rng rng(11);
    const int t = 6, d = 4;
    Tensor<double> tq = random_tensor(rng, {t, d});
    Tensor<double> tk = random_tensor(rng, {t, d});
    Tensor<double> tv = random_tensor(rng, {t, d});

    RowWindows win;
    for (int i = 0; i < t; ++i) win.w.emplace_back(std::max(0, i - 2), i);

    Graph<double> g(false);
    auto got = g.val(g.attention(g.leaf(tq), g.leaf(tk), g.leaf(tv), win, 1)).v;

    // dense -inf mask oracle
    for (int i = 0; i < t; ++i) {
        std::vector<double> scores(t, -std::numeric_limits<double>::infinity());
        for (int j = std::max(0, i - 2); j <= i; ++j) {
            double acc = 0;
            for (int c = 0; c < d; ++c) acc += tq.v[i * d + c] * tk.v[j * d + c];
            scores[j] = acc / std::sqrt(static_cast<double>(d));
        }
        double mx = *std::max_element(scores.begin(), scores.end());
        double denom = 0;
        std::vector<double> p(t, 0.0);
        for (int j = 0; j < t; ++j) {
            if (std::isinf(scores[j])) continue;
            p[j] = std::exp(scores[j] - mx);
            denom += p[j];
        }
        for (int c = 0; c < d; ++c) {
            double want = 0;
            for (int j = 0; j < t; ++j) want += (p[j] / denom) * tv.v[j * d + c];
            CHECK(got[i * d + c] == doctest::Approx(want).epsilon(1e-10));
        }
    }
}

TEST_CASE("attention single position returns v row; strict causal row 0 attends itself") {
    Rng rng(5);
    Tensor<double> tq = random_tensor(rng, {1, 6});
    Tensor<double> tk = random_tensor(rng, {1, 6});
    Tensor<double> tv = random_tensor(rng, {1, 6});
    RowWindows win;
    win.w.emplace_back(0, 0);
    Graph<double> g(false);
    auto out = g.val(g.attention(g.leaf(tq), g.leaf(tk), g.leaf(tv), win, 2)).v;
    for (int i = 0; i < 6; ++i) CHECK(out[i] == doctest::Approx(tv.v[i]).epsilon(1e-15));

    // strict causal: row 0 of a longer sequence sees only itself
    Tensor<double> q3 = random_tensor(rng, {3, 6});
    Tensor<double> k3 = random_tensor(rng, {3, 6});
    Tensor<double> v3 = random_tensor(rng, {3, 6});
    Graph<double> g3(false);
    auto full = g3.val(g3.attention(g3.leaf(q3), g3.leaf(k3), g3.leaf(v3),
                                    RowWindows::causal(3), 2)).v;
    for (int i = 0; i < 6; ++i) CHECK(full[i] == doctest::Approx(v3.v[i]).epsilon(1e-15));
}

TEST_CASE("composite blocks pass central finite-difference gradient checks") {
    // attention block, SwiGLU feed-forward, rotary embedding, cross-entropy
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        int t = 2 + static_cast<int>(rng.uniform_int(4));
        int heads = 1 + static_cast<int>(rng.uniform_int(2));
        int d = heads * 2 * (1 + static_cast<int>(rng.uniform_int(2)));
        int dff = 2 + static_cast<int>(rng.uniform_int(6));
        int classes = 3 + static_cast<int>(rng.uniform_int(5));

        Tensor<double> tx = random_tensor(rng, {t, d});
        Tensor<double> twq = random_tensor(rng, {d, d}, 0.5);
        Tensor<double> twk = random_tensor(rng, {d, d}, 0.5);
        Tensor<double> twv = random_tensor(rng, {d, d}, 0.5);
        Tensor<double> twg = random_tensor(rng, {d, dff}, 0.5);
        Tensor<double> twu = random_tensor(rng, {d, dff}, 0.5);
        Tensor<double> twd = random_tensor(rng, {dff, d}, 0.5);
        Tensor<double> tnorm = random_tensor(rng, {1, d}, 0.4);
        Tensor<double> thead = random_tensor(rng, {d, classes}, 0.5);
        std::vector<int> targets(t);
        for (int i = 0; i < t; ++i) targets[i] = static_cast<int>(rng.uniform_int(classes));
        std::vector<int> positions(t);
        for (int i = 0; i < t; ++i) positions[i] = i;

        auto build = [&](Graph<double>& g) {
            int x = g.leaf(tx);
            int xn = g.rmsnorm(x, g.leaf(tnorm), 1e-5);
            int q = g.rope(g.matmul(xn, g.leaf(twq)), positions, heads, 10000.0);
            int k = g.rope(g.matmul(xn, g.leaf(twk)), positions, heads, 10000.0);
            int v = g.matmul(xn, g.leaf(twv));
            int att = g.attention(q, k, v, RowWindows::causal(t), heads);
            int gate = g.silu(g.matmul(att, g.leaf(twg)));
            int up = g.matmul(att, g.leaf(twu));
            int down = g.matmul(g.mul(gate, up), g.leaf(twd));
            int logits = g.matmul(g.add(x, down), g.leaf(thead));
            auto [ce, n] = g.cross_entropy_sum(logits, targets);
            return g.scale(ce, 1.0 / n);
        };

        Graph<double> g(true);
        int loss = build(g);
        g.backward(loss);
        auto fd = finite_diff(tx, [&] {
            Graph<double> gg(false);
            return gg.val(build(gg)).v[0];
        });
        CHECK(max_rel_err(g.grad(0), fd) < 1e-4);
    }
}

TEST_CASE("cross entropy: one-hot perfection and uniform logits") {
    const int classes = 64 * 4;
    Graph<double> g(false);
    Tensor<double> hot = Tensor<double>::zeros({2, classes});
    hot.v[5] = 200.0;
    hot.v[classes + 17] = 200.0;
    auto [ce, n] = g.cross_entropy_sum(g.leaf(hot), {5, 17});
    CHECK(g.val(g.scale(ce, 1.0 / n)).v[0] < 1e-6);

    Tensor<double> uni = Tensor<double>::zeros({3, classes});
    auto [ce2, n2] = g.cross_entropy_sum(g.leaf(uni), {0, 100, 255});
    CHECK(g.val(g.scale(ce2, 1.0 / n2)).v[0] ==
          doctest::Approx(std::log(static_cast<double>(classes))).epsilon(1e-9));
}

TEST_CASE("determinism: same seed twice gives bit-identical forward results") {
    auto run = [] {
        Rng rng(123);
        Tensor<double> a = random_tensor(rng, {8, 8});
        Tensor<double> b = random_tensor(rng, {8, 8});
        Graph<double> g(false);
        return g.val(g.matmul(g.leaf(a), g.leaf(b))).v;
    };
    CHECK(run() == run());
}
