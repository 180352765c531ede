#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "streamtts/errors.hpp"

namespace streamtts {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// Dense row-major tensor. Training runs in double, inference in float.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> v;
    bool requires_grad = false;
    std::vector<T> grad;  // same size as v when requires_grad

    Tensor() = default;
    Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (shape_numel(shape) != static_cast<int64_t>(v.size()))
            throw DimError("tensor: shape does not match value count");
    }

    static Tensor zeros(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.v.assign(shape_numel(t.shape), T(0));
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    void alloc_grad() {
        requires_grad = true;
        grad.assign(v.size(), T(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

// Per-row attention window [lo, hi], both inclusive. Causal masks are
// (0, i); the phoneme look-ahead masks are (0, min(i+la, n-1)); block
// diagonal batching uses (block_start, i).
struct RowWindows {
    std::vector<std::pair<int, int>> w;
    static RowWindows causal(int n) {
        RowWindows rw;
        rw.w.reserve(n);
        for (int i = 0; i < n; ++i) rw.w.emplace_back(0, i);
        return rw;
    }
};

// ----------------------------------------------------------------------
// Raw kernels. Summation order over the reduced dimension is ascending
// and identical between full-sequence and single-step code paths; the
// cache-equivalence guarantees depend on this, so do not reorder loops.
// ----------------------------------------------------------------------

// out[m x n] = a[m x k] * b[k x n]
template <typename T>
void matmul_raw(const T* a, const T* b, T* out, int m, int k, int n) {
    std::fill(out, out + static_cast<int64_t>(m) * n, T(0));
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * k;
        T* orow = out + static_cast<int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = b + static_cast<int64_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[m x k] = a[m x n] * b[k x n]^T   (rows of both operands contiguous)
template <typename T>
void matmul_abt_raw(const T* a, const T* b, T* out, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T* brow = b + static_cast<int64_t>(kk) * n;
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
            out[static_cast<int64_t>(i) * k + kk] = acc;
        }
    }
}

// out[k x n] = a[m x k]^T * b[m x n]
template <typename T>
void matmul_atb_raw(const T* a, const T* b, T* out, int m, int k, int n) {
    std::fill(out, out + static_cast<int64_t>(k) * n, T(0));
    for (int kk = 0; kk < k; ++kk) {
        T* orow = out + static_cast<int64_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            T av = a[static_cast<int64_t>(i) * k + kk];
            const T* brow = b + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

template <typename T>
void rmsnorm_raw(const T* x, const T* w, T* y, int d, T eps) {
    T ms = 0;
    for (int i = 0; i < d; ++i) ms += x[i] * x[i];
    ms = ms / static_cast<T>(d) + eps;
    T r = T(1) / std::sqrt(ms);
    for (int i = 0; i < d; ++i) y[i] = x[i] * r * w[i];
}

// In-place rotary embedding over one row of width d split into n_heads
// slices; pairs (2m, 2m+1) inside each head rotate by pos * base^(-2m/dh).
template <typename T>
void rope_raw(T* row, int d, int n_heads, int pos, double base) {
    int dh = d / n_heads;
    for (int h = 0; h < n_heads; ++h) {
        T* hp = row + h * dh;
        for (int m = 0; m < dh / 2; ++m) {
            double theta = pos * std::pow(base, -2.0 * m / dh);
            T c = static_cast<T>(std::cos(theta));
            T s = static_cast<T>(std::sin(theta));
            T x = hp[2 * m], y = hp[2 * m + 1];
            hp[2 * m] = x * c - y * s;
            hp[2 * m + 1] = x * s + y * c;
        }
    }
}

// Single attention row for one head: out = softmax(q . K^T * scale) * V over
// key indices [lo, hi]. K/V rows are strided by `stride` (full model width).
// probs, when non-null, receives hi-lo+1 softmax weights (saved for backward).
template <typename T>
void attn_row_raw(const T* q, const T* kbase, const T* vbase, int stride,
                  int lo, int hi, int dh, T scale, T* out, T* probs) {
    int n = hi - lo + 1;
    T mx = -std::numeric_limits<T>::infinity();
    std::vector<T> s(n);
    for (int j = 0; j < n; ++j) {
        const T* krow = kbase + static_cast<int64_t>(lo + j) * stride;
        T acc = 0;
        for (int t = 0; t < dh; ++t) acc += q[t] * krow[t];
        s[j] = acc * scale;
        if (s[j] > mx) mx = s[j];
    }
    T denom = 0;
    for (int j = 0; j < n; ++j) {
        s[j] = std::exp(s[j] - mx);
        denom += s[j];
    }
    for (int t = 0; t < dh; ++t) out[t] = T(0);
    for (int j = 0; j < n; ++j) {
        T p = s[j] / denom;
        if (probs) probs[j] = p;
        const T* vrow = vbase + static_cast<int64_t>(lo + j) * stride;
        for (int t = 0; t < dh; ++t) out[t] += p * vrow[t];
    }
}

template <typename T>
inline T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ----------------------------------------------------------------------
// Reverse-mode graph. A Wengert list: nodes are appended in evaluation
// order, so walking the list backwards is already a topological order.
// With recording off the same ops run forward-only (inference arenas).
// ----------------------------------------------------------------------

template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> t;
        std::vector<T> grad;             // allocated when recording
        std::function<void()> back;      // accumulates into parent grads
        Tensor<T>* sink = nullptr;       // external grad sink (parameters)
    };

    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    const Tensor<T>& val(int id) const { return nodes_[id].t; }
    const std::vector<T>& grad(int id) const { return nodes_[id].grad; }

    int leaf(Tensor<T> t) {
        return push(std::move(t), nullptr);
    }

    // Leaf tied to a parameter tensor; backward() accumulates into its grad.
    int param(Tensor<T>& p) {
        int id = push(Tensor<T>(p.shape, p.v), nullptr);
        if (recording_) nodes_[id].sink = &p;
        return id;
    }

    int zeros(Shape s) { return leaf(Tensor<T>::zeros(std::move(s))); }

    int matmul(int a, int b) {
        const Tensor<T>& ta = nodes_[a].t;
        const Tensor<T>& tb = nodes_[b].t;
        if (ta.cols() != tb.rows())
            throw DimError("matmul: inner dimensions disagree (" +
                           std::to_string(ta.cols()) + " vs " + std::to_string(tb.rows()) + ")");
        int m = ta.rows(), k = ta.cols(), n = tb.cols();
        Tensor<T> out = Tensor<T>::zeros({m, n});
        matmul_raw(ta.v.data(), tb.v.data(), out.v.data(), m, k, n);
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, a, b, id, m, k, n] {
                const auto& g = nodes_[id].grad;
                // dA += dC * B^T
                std::vector<T> da(static_cast<size_t>(m) * k);
                matmul_abt_raw(g.data(), nodes_[b].t.v.data(), da.data(), m, n, k);
                axpy(nodes_[a].grad, da);
                // dB += A^T * dC
                std::vector<T> db(static_cast<size_t>(k) * n);
                matmul_atb_raw(nodes_[a].t.v.data(), g.data(), db.data(), m, k, n);
                axpy(nodes_[b].grad, db);
            };
        }
        return id;
    }

    int add(int a, int b) {
        check_same_shape(a, b, "add");
        Tensor<T> out = nodes_[a].t;
        const auto& bv = nodes_[b].t.v;
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, a, b, id] {
                axpy(nodes_[a].grad, nodes_[id].grad);
                axpy(nodes_[b].grad, nodes_[id].grad);
            };
        }
        return id;
    }

    int mul(int a, int b) {
        check_same_shape(a, b, "mul");
        Tensor<T> out = nodes_[a].t;
        const auto& bv = nodes_[b].t.v;
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, a, b, id] {
                const auto& g = nodes_[id].grad;
                auto& ga = nodes_[a].grad;
                auto& gb = nodes_[b].grad;
                const auto& av = nodes_[a].t.v;
                const auto& bv2 = nodes_[b].t.v;
                for (size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * bv2[i];
                    gb[i] += g[i] * av[i];
                }
            };
        }
        return id;
    }

    int scale(int a, double c) {
        Tensor<T> out = nodes_[a].t;
        for (auto& x : out.v) x = static_cast<T>(x * c);
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, a, id, c] {
                const auto& g = nodes_[id].grad;
                auto& ga = nodes_[a].grad;
                for (size_t i = 0; i < g.size(); ++i) ga[i] += static_cast<T>(g[i] * c);
            };
        }
        return id;
    }

    int silu(int a) {
        Tensor<T> out = nodes_[a].t;
        for (auto& x : out.v) x = x * sigmoid_scalar(x);
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, a, id] {
                const auto& g = nodes_[id].grad;
                auto& ga = nodes_[a].grad;
                const auto& av = nodes_[a].t.v;
                for (size_t i = 0; i < g.size(); ++i) {
                    T s = sigmoid_scalar(av[i]);
                    ga[i] += g[i] * (s + av[i] * s * (T(1) - s));
                }
            };
        }
        return id;
    }

    // rows of x normalized by reciprocal RMS of the last dim, times weight
    int rmsnorm(int x, int w, double eps) {
        const Tensor<T>& tx = nodes_[x].t;
        const Tensor<T>& tw = nodes_[w].t;
        int d = tx.cols();
        if (d == 0 || tw.numel() != d)
            throw DimError("rmsnorm: weight length must equal last dimension");
        int n = tx.rows();
        Tensor<T> out = Tensor<T>::zeros({n, d});
        for (int i = 0; i < n; ++i)
            rmsnorm_raw(tx.v.data() + static_cast<int64_t>(i) * d, tw.v.data(),
                        out.v.data() + static_cast<int64_t>(i) * d, d, static_cast<T>(eps));
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, x, w, id, n, d, eps] {
                const auto& g = nodes_[id].grad;
                const auto& xv = nodes_[x].t.v;
                const auto& wv = nodes_[w].t.v;
                auto& gx = nodes_[x].grad;
                auto& gw = nodes_[w].grad;
                for (int i = 0; i < n; ++i) {
                    const T* xr = xv.data() + static_cast<int64_t>(i) * d;
                    const T* gr = g.data() + static_cast<int64_t>(i) * d;
                    T ms = 0;
                    for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
                    ms = ms / static_cast<T>(d) + static_cast<T>(eps);
                    T r = T(1) / std::sqrt(ms);
                    T dot = 0;
                    for (int j = 0; j < d; ++j) dot += gr[j] * wv[j] * xr[j];
                    T r3_d = r * r * r / static_cast<T>(d);
                    for (int j = 0; j < d; ++j) {
                        gx[static_cast<int64_t>(i) * d + j] +=
                            r * wv[j] * gr[j] - xr[j] * r3_d * dot;
                        gw[j] += gr[j] * xr[j] * r;
                    }
                }
            };
        }
        return id;
    }

    // rotary embedding; positions gives the absolute index per row
    int rope(int x, const std::vector<int>& positions, int n_heads, double base) {
        const Tensor<T>& tx = nodes_[x].t;
        int n = tx.rows(), d = tx.cols();
        if (static_cast<int>(positions.size()) != n)
            throw DimError("rope: positions size mismatch");
        Tensor<T> out = tx;
        for (int i = 0; i < n; ++i)
            rope_raw(out.v.data() + static_cast<int64_t>(i) * d, d, n_heads, positions[i], base);
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, x, id, positions, n_heads, base, n, d] {
                // rotation is orthogonal: rotate the gradient by -theta
                std::vector<T> g = nodes_[id].grad;
                for (int i = 0; i < n; ++i)
                    rope_raw(g.data() + static_cast<int64_t>(i) * d, d, n_heads, -positions[i], base);
                axpy(nodes_[x].grad, g);
            };
        }
        return id;
    }

    // Windowed multi-head attention. q, k, v are [n x d]; row i attends key
    // indices [win[i].first, win[i].second] per head.
    int attention(int q, int k, int v, const RowWindows& win, int n_heads) {
        const Tensor<T>& tq = nodes_[q].t;
        int n = tq.rows(), d = tq.cols();
        if (nodes_[k].t.rows() != n || nodes_[v].t.rows() != n)
            throw DimError("attention: q/k/v row mismatch");
        if (static_cast<int>(win.w.size()) != n)
            throw DimError("attention: window count mismatch");
        int dh = d / n_heads;
        T scale = T(1) / std::sqrt(static_cast<T>(dh));
        Tensor<T> out = Tensor<T>::zeros({n, d});
        // probs saved per row per head, concatenated
        auto probs = std::make_shared<std::vector<T>>();
        std::vector<int64_t> offs(static_cast<size_t>(n) * n_heads + 1, 0);
        int64_t total = 0;
        for (int i = 0; i < n; ++i) {
            auto [lo, hi] = win.w[i];
            if (lo < 0 || hi < lo || hi >= n)
                throw DimError("attention: window out of range");
            for (int h = 0; h < n_heads; ++h) {
                offs[static_cast<size_t>(i) * n_heads + h] = total;
                total += hi - lo + 1;
            }
        }
        offs.back() = total;
        probs->resize(recording_ ? total : 0);
        const T* kd = nodes_[k].t.v.data();
        const T* vd = nodes_[v].t.v.data();
        for (int i = 0; i < n; ++i) {
            auto [lo, hi] = win.w[i];
            for (int h = 0; h < n_heads; ++h) {
                attn_row_raw(tq.v.data() + static_cast<int64_t>(i) * d + h * dh,
                             kd + h * dh, vd + h * dh, d, lo, hi, dh, scale,
                             out.v.data() + static_cast<int64_t>(i) * d + h * dh,
                             recording_ ? probs->data() + offs[static_cast<size_t>(i) * n_heads + h]
                                        : nullptr);
            }
        }
        int id = push(std::move(out), nullptr);
        if (recording_) {
            auto windows = win.w;
            nodes_[id].back = [this, q, k, v, id, windows, n_heads, n, d, dh, scale, probs,
                               offs = std::move(offs)] {
                const auto& g = nodes_[id].grad;
                const auto& qv = nodes_[q].t.v;
                const auto& kv = nodes_[k].t.v;
                const auto& vv = nodes_[v].t.v;
                auto& gq = nodes_[q].grad;
                auto& gk = nodes_[k].grad;
                auto& gv = nodes_[v].grad;
                for (int i = 0; i < n; ++i) {
                    auto [lo, hi] = windows[i];
                    int m = hi - lo + 1;
                    for (int h = 0; h < n_heads; ++h) {
                        const T* p = probs->data() + offs[static_cast<size_t>(i) * n_heads + h];
                        const T* go = g.data() + static_cast<int64_t>(i) * d + h * dh;
                        const T* qr = qv.data() + static_cast<int64_t>(i) * d + h * dh;
                        std::vector<T> dp(m), ds(m);
                        T sum_pd = 0;
                        for (int j = 0; j < m; ++j) {
                            const T* vr = vv.data() + static_cast<int64_t>(lo + j) * d + h * dh;
                            T acc = 0;
                            for (int t = 0; t < dh; ++t) acc += go[t] * vr[t];
                            dp[j] = acc;
                            sum_pd += p[j] * dp[j];
                            T* gvr = gv.data() + static_cast<int64_t>(lo + j) * d + h * dh;
                            for (int t = 0; t < dh; ++t) gvr[t] += p[j] * go[t];
                        }
                        for (int j = 0; j < m; ++j) ds[j] = p[j] * (dp[j] - sum_pd);
                        T* gqr = gq.data() + static_cast<int64_t>(i) * d + h * dh;
                        for (int j = 0; j < m; ++j) {
                            const T* kr = kv.data() + static_cast<int64_t>(lo + j) * d + h * dh;
                            T* gkr = gk.data() + static_cast<int64_t>(lo + j) * d + h * dh;
                            for (int t = 0; t < dh; ++t) {
                                gqr[t] += scale * ds[j] * kr[t];
                                gkr[t] += scale * ds[j] * qr[t];
                            }
                        }
                    }
                }
            };
        }
        return id;
    }

    // gather rows of an embedding table
    int embed(int table, const std::vector<int>& ids) {
        const Tensor<T>& tt = nodes_[table].t;
        int v = tt.rows(), d = tt.cols();
        int n = static_cast<int>(ids.size());
        Tensor<T> out = Tensor<T>::zeros({n, d});
        for (int i = 0; i < n; ++i) {
            if (ids[i] < 0 || ids[i] >= v)
                throw DimError("embed: id " + std::to_string(ids[i]) + " out of range");
            std::copy_n(tt.v.data() + static_cast<int64_t>(ids[i]) * d, d,
                        out.v.data() + static_cast<int64_t>(i) * d);
        }
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, table, id, ids, d] {
                const auto& g = nodes_[id].grad;
                auto& gt = nodes_[table].grad;
                for (size_t i = 0; i < ids.size(); ++i)
                    for (int j = 0; j < d; ++j)
                        gt[static_cast<int64_t>(ids[i]) * d + j] +=
                            g[static_cast<int64_t>(i) * d + j];
            };
        }
        return id;
    }

    // new matrix whose row r is row src[r].second of node src[r].first
    int stack_rows(const std::vector<std::pair<int, int>>& src) {
        if (src.empty()) throw DimError("stack_rows: empty");
        int d = nodes_[src[0].first].t.cols();
        int n = static_cast<int>(src.size());
        Tensor<T> out = Tensor<T>::zeros({n, d});
        for (int i = 0; i < n; ++i) {
            const Tensor<T>& s = nodes_[src[i].first].t;
            if (s.cols() != d) throw DimError("stack_rows: width mismatch");
            if (src[i].second < 0 || src[i].second >= s.rows())
                throw DimError("stack_rows: row out of range");
            std::copy_n(s.v.data() + static_cast<int64_t>(src[i].second) * d, d,
                        out.v.data() + static_cast<int64_t>(i) * d);
        }
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, id, src, d] {
                const auto& g = nodes_[id].grad;
                for (size_t i = 0; i < src.size(); ++i) {
                    auto& gs = nodes_[src[i].first].grad;
                    for (int j = 0; j < d; ++j)
                        gs[static_cast<int64_t>(src[i].second) * d + j] +=
                            g[i * d + j];
                }
            };
        }
        return id;
    }

    int concat_cols(const std::vector<int>& parts) {
        if (parts.empty()) throw DimError("concat_cols: empty");
        int n = nodes_[parts[0]].t.rows();
        int dtot = 0;
        for (int p : parts) {
            if (nodes_[p].t.rows() != n) throw DimError("concat_cols: row mismatch");
            dtot += nodes_[p].t.cols();
        }
        Tensor<T> out = Tensor<T>::zeros({n, dtot});
        int off = 0;
        for (int p : parts) {
            int d = nodes_[p].t.cols();
            for (int i = 0; i < n; ++i)
                std::copy_n(nodes_[p].t.v.data() + static_cast<int64_t>(i) * d, d,
                            out.v.data() + static_cast<int64_t>(i) * dtot + off);
            off += d;
        }
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, id, parts, n, dtot] {
                const auto& g = nodes_[id].grad;
                int off2 = 0;
                for (int p : parts) {
                    int d = nodes_[p].t.cols();
                    auto& gp = nodes_[p].grad;
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < d; ++j)
                            gp[static_cast<int64_t>(i) * d + j] +=
                                g[static_cast<int64_t>(i) * dtot + off2 + j];
                    off2 += d;
                }
            };
        }
        return id;
    }

    // sum of -log softmax(logits)[target] over rows where target >= 0;
    // returns (scalar node, counted rows)
    std::pair<int, int> cross_entropy_sum(int logits, const std::vector<int>& targets) {
        const Tensor<T>& tl = nodes_[logits].t;
        int n = tl.rows(), c = tl.cols();
        if (static_cast<int>(targets.size()) != n)
            throw DimError("cross_entropy: target count mismatch");
        T loss = 0;
        int counted = 0;
        for (int i = 0; i < n; ++i) {
            if (targets[i] < 0) continue;
            if (targets[i] >= c) throw DimError("cross_entropy: target out of range");
            const T* row = tl.v.data() + static_cast<int64_t>(i) * c;
            T mx = row[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T denom = 0;
            for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
            loss += -(row[targets[i]] - mx - std::log(denom));
            ++counted;
        }
        Tensor<T> out({1}, {loss});
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, logits, id, targets, n, c] {
                T gs = nodes_[id].grad[0];
                const auto& lv = nodes_[logits].t.v;
                auto& gl = nodes_[logits].grad;
                for (int i = 0; i < n; ++i) {
                    if (targets[i] < 0) continue;
                    const T* row = lv.data() + static_cast<int64_t>(i) * c;
                    T mx = row[0];
                    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                    T denom = 0;
                    for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
                    for (int j = 0; j < c; ++j) {
                        T p = std::exp(row[j] - mx) / denom;
                        gl[static_cast<int64_t>(i) * c + j] +=
                            gs * (p - (j == targets[i] ? T(1) : T(0)));
                    }
                }
            };
        }
        return {id, counted};
    }

    int sum(int a) {
        const auto& av = nodes_[a].t.v;
        T s = 0;
        for (T x : av) s += x;
        Tensor<T> out({1}, {s});
        int id = push(std::move(out), nullptr);
        if (recording_) {
            nodes_[id].back = [this, a, id] {
                T g = nodes_[id].grad[0];
                for (auto& x : nodes_[a].grad) x += g;
            };
        }
        return id;
    }

    // Reverse sweep from a scalar loss. Populates grads of every reachable
    // node and accumulates parameter-leaf grads into their sink tensors.
    void backward(int loss) {
        if (!recording_) throw StateError("backward: graph is not recording");
        if (nodes_[loss].t.numel() != 1)
            throw DimError("backward: loss must be scalar");
        nodes_[loss].grad[0] = T(1);
        for (int i = loss; i >= 0; --i)
            if (nodes_[i].back) nodes_[i].back();
        for (auto& nd : nodes_) {
            if (nd.sink) {
                if (!nd.sink->requires_grad || nd.sink->grad.size() != nd.grad.size())
                    nd.sink->alloc_grad();
                for (size_t i = 0; i < nd.grad.size(); ++i) nd.sink->grad[i] += nd.grad[i];
            }
        }
    }

    void clear() { nodes_.clear(); }

private:
    int push(Tensor<T> t, std::nullptr_t) {
        Node nd;
        nd.t = std::move(t);
        if (recording_) nd.grad.assign(nd.t.v.size(), T(0));
        nodes_.push_back(std::move(nd));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void check_same_shape(int a, int b, const char* op) {
        if (nodes_[a].t.shape != nodes_[b].t.shape)
            throw DimError(std::string(op) + ": shape mismatch");
    }

    static void axpy(std::vector<T>& dst, const std::vector<T>& src) {
        for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }

    bool recording_;
    std::vector<Node> nodes_;
};

}  // namespace streamtts
