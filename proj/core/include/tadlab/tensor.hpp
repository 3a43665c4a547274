#pragma once

// Dense f32 tensors with reverse-mode autodiff and a bias-corrected Adam
// step. The graph is a shared_ptr DAG recorded op by op; backward() runs a
// topological sweep from a scalar loss. Everything is templated on the
// scalar so tests can instantiate the identical graph in double for
// finite-difference oracles; the product type is TensorT<float>.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tadlab/common.hpp"

namespace tadlab {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

template <class S>
struct TensorNodeT {
    std::vector<int> shape;
    std::vector<S> value;
    std::vector<S> grad;  // lazily sized; empty means all-zero
    bool requires_grad = false;
    bool needs_grad = false;  // requires_grad or depends on something that does
    std::vector<std::shared_ptr<TensorNodeT>> parents;
    std::function<void(TensorNodeT&)> backward_fn;

    size_t size() const { return value.size(); }
    std::vector<S>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), S(0));
        return grad;
    }
    void accumulate(const S* g, size_t n) {
        auto& dst = grad_buffer();
        for (size_t i = 0; i < n; ++i) dst[i] += g[i];
    }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// Disables graph recording in scope (decode, metric passes).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class S>
class TensorT {
public:
    using Node = TensorNodeT<S>;

    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static TensorT zeros(std::vector<int> shape) {
        return from(std::move(shape), {});
    }
    static TensorT from(std::vector<int> shape, std::vector<S> data) {
        auto n = std::make_shared<Node>();
        size_t want = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("tensor dims must be positive");
            want *= size_t(d);
        }
        n->shape = std::move(shape);
        if (data.empty()) data.assign(want, S(0));
        if (data.size() != want) throw ShapeError("data length does not match shape");
        n->value = std::move(data);
        return TensorT(std::move(n));
    }
    static TensorT scalar(S v) { return from({1}, {v}); }
    static TensorT randn(std::vector<int> shape, Rng& rng, double stddev) {
        size_t count = 1;
        for (int d : shape) count *= size_t(d);
        std::vector<S> data(count);
        for (auto& x : data) x = S(rng.normal(0.0, stddev));
        return from(std::move(shape), std::move(data));
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(size_t i) const { return node_->shape[i]; }
    size_t size() const { return node_->value.size(); }
    std::vector<S>& data() { return node_->value; }
    const std::vector<S>& data() const { return node_->value; }
    std::vector<S>& grad() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        node_->requires_grad = v;
        node_->needs_grad = v;
        return *this;
    }
    S item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor");
        return node_->value[0];
    }
    std::shared_ptr<Node> node() const { return node_; }

    int rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
    int cols() const { return node_->shape.back(); }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class S, class Backward>
TensorT<S> make_op(std::vector<int> shape, std::vector<S> value,
                   std::vector<TensorT<S>> parents, Backward&& bw) {
    auto out = TensorT<S>::from(std::move(shape), std::move(value));
    bool track = grad_mode();
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p.node()->needs_grad;
        track = any;
    }
    if (track) {
        auto n = out.node();
        n->needs_grad = true;
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::forward<Backward>(bw);
    }
    return out;
}

template <class S>
ECMap<S> as_mat(const TensorNodeT<S>& n) {
    if (n.shape.size() != 2) throw ShapeError("expected 2-d tensor");
    return ECMap<S>(n.value.data(), n.shape[0], n.shape[1]);
}

}  // namespace detail

// ---------------------------------------------------------------- basic ops

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    std::vector<S> out(a.size());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a, b}, [pa, pb](TensorNodeT<S>& n) {
        pa->accumulate(n.grad.data(), n.grad.size());
        pb->accumulate(n.grad.data(), n.grad.size());
    });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [pa, c](TensorNodeT<S>& n) {
        std::vector<S> g(n.grad.size());
        for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * c;
        pa->accumulate(g.data(), g.size());
    });
}

template <class S>
TensorT<S> sum(const TensorT<S>& a) {
    double acc = 0.0;
    for (S v : a.data()) acc += double(v);
    auto pa = a.node();
    return detail::make_op<S>({1}, {S(acc)}, {a}, [pa](TensorNodeT<S>& n) {
        std::vector<S> g(pa->size(), n.grad[0]);
        pa->accumulate(g.data(), g.size());
    });
}

// C = op(A) * op(B) with optional transposes; 2-d operands only.
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool ta = false, bool tb = false) {
    auto am = detail::as_mat<S>(*a.node());
    auto bm = detail::as_mat<S>(*b.node());
    const long m = ta ? am.cols() : am.rows();
    const long k = ta ? am.rows() : am.cols();
    const long kb = tb ? bm.cols() : bm.rows();
    const long n = tb ? bm.rows() : bm.cols();
    if (k != kb) throw ShapeError("matmul: inner dimensions differ");

    std::vector<S> out(size_t(m) * size_t(n));
    EMap<S> cm(out.data(), m, n);
    if (!ta && !tb) cm.noalias() = am * bm;
    else if (ta && !tb) cm.noalias() = am.transpose() * bm;
    else if (!ta && tb) cm.noalias() = am * bm.transpose();
    else cm.noalias() = am.transpose() * bm.transpose();

    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<S>({int(m), int(n)}, std::move(out), {a, b},
                              [pa, pb, ta, tb, m, n](TensorNodeT<S>& node) {
        ECMap<S> dc(node.grad.data(), m, n);
        auto am2 = detail::as_mat<S>(*pa);
        auto bm2 = detail::as_mat<S>(*pb);
        if (pa->needs_grad) {
            std::vector<S> ga(pa->size());
            EMap<S> gam(ga.data(), am2.rows(), am2.cols());
            if (!ta && !tb) gam.noalias() = dc * bm2.transpose();
            else if (ta && !tb) gam.noalias() = bm2 * dc.transpose();
            else if (!ta && tb) gam.noalias() = dc * bm2;
            else gam.noalias() = bm2.transpose() * dc.transpose();
            pa->accumulate(ga.data(), ga.size());
        }
        if (pb->needs_grad) {
            std::vector<S> gb(pb->size());
            EMap<S> gbm(gb.data(), bm2.rows(), bm2.cols());
            if (!ta && !tb) gbm.noalias() = am2.transpose() * dc;
            else if (ta && !tb) gbm.noalias() = am2 * dc;
            else if (!ta && tb) gbm.noalias() = dc.transpose() * am2;
            else gbm.noalias() = dc.transpose() * am2.transpose();
            pb->accumulate(gb.data(), gb.size());
        }
    });
}

// Gather rows of an embedding table; backward scatter-adds.
template <class S>
TensorT<S> rows(const TensorT<S>& table, const std::vector<int>& ids) {
    auto tm = detail::as_mat<S>(*table.node());
    const long d = tm.cols();
    std::vector<S> out(ids.size() * size_t(d));
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tm.rows()) throw ShapeError("rows: id out of range");
        std::copy_n(table.data().data() + size_t(ids[i]) * size_t(d), size_t(d),
                    out.data() + i * size_t(d));
    }
    auto pt = table.node();
    auto idcopy = ids;
    return detail::make_op<S>({int(ids.size()), int(d)}, std::move(out), {table},
                              [pt, idcopy, d](TensorNodeT<S>& n) {
        auto& g = pt->grad_buffer();
        for (size_t i = 0; i < idcopy.size(); ++i) {
            const S* src = n.grad.data() + i * size_t(d);
            S* dst = g.data() + size_t(idcopy[i]) * size_t(d);
            for (long j = 0; j < d; ++j) dst[size_t(j)] += src[size_t(j)];
        }
    });
}

template <class S>
TensorT<S> silu(const TensorT<S>& a) {
    std::vector<S> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) {
        S sig = S(1) / (S(1) + std::exp(-av[i]));
        out[i] = av[i] * sig;
    }
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a}, [pa](TensorNodeT<S>& n) {
        std::vector<S> g(n.grad.size());
        const auto& x = pa->value;
        for (size_t i = 0; i < g.size(); ++i) {
            S sig = S(1) / (S(1) + std::exp(-x[i]));
            g[i] = n.grad[i] * sig * (S(1) + x[i] * (S(1) - sig));
        }
        pa->accumulate(g.data(), g.size());
    });
}

// Row-wise RMS normalization with a learned per-channel gain.
template <class S>
TensorT<S> rmsnorm(const TensorT<S>& x, const TensorT<S>& gain, S eps = S(1e-5)) {
    auto xm = detail::as_mat<S>(*x.node());
    const long rows_n = xm.rows(), d = xm.cols();
    if (long(gain.size()) != d) throw ShapeError("rmsnorm: gain size mismatch");
    std::vector<S> out(x.size());
    std::vector<S> inv_rms(static_cast<size_t>(rows_n));
    const auto& gv = gain.data();
    for (long r = 0; r < rows_n; ++r) {
        double ss = 0.0;
        const S* row = x.data().data() + size_t(r) * size_t(d);
        for (long j = 0; j < d; ++j) ss += double(row[size_t(j)]) * double(row[size_t(j)]);
        S inv = S(1.0 / std::sqrt(ss / double(d) + double(eps)));
        inv_rms[size_t(r)] = inv;
        S* orow = out.data() + size_t(r) * size_t(d);
        for (long j = 0; j < d; ++j) orow[size_t(j)] = row[size_t(j)] * inv * gv[size_t(j)];
    }
    auto px = x.node();
    auto pg = gain.node();
    return detail::make_op<S>(x.shape(), std::move(out), {x, gain},
                              [px, pg, inv_rms, rows_n, d](TensorNodeT<S>& n) {
        const auto& gv = pg->value;
        std::vector<S> gx(px->size(), S(0));
        std::vector<S> gg(pg->size(), S(0));
        for (long r = 0; r < rows_n; ++r) {
            const S* xrow = px->value.data() + size_t(r) * size_t(d);
            const S* dy = n.grad.data() + size_t(r) * size_t(d);
            S inv = inv_rms[size_t(r)];
            double dot = 0.0;  // sum_i dy_i * g_i * x_i
            for (long j = 0; j < d; ++j) dot += double(dy[size_t(j)]) * double(gv[size_t(j)]) * double(xrow[size_t(j)]);
            S coef = S(dot / double(d)) * inv * inv * inv;
            S* gxrow = gx.data() + size_t(r) * size_t(d);
            for (long j = 0; j < d; ++j) {
                gxrow[size_t(j)] = dy[size_t(j)] * gv[size_t(j)] * inv - xrow[size_t(j)] * coef;
                gg[size_t(j)] += dy[size_t(j)] * xrow[size_t(j)] * inv;
            }
        }
        if (px->needs_grad) px->accumulate(gx.data(), gx.size());
        if (pg->needs_grad) pg->accumulate(gg.data(), gg.size());
    });
}

// Fused multi-head causal self-attention over a single sequence.
// q, k, v: (T x d), d = n_heads * head_dim. Softmax probabilities are cached
// per head for the backward pass.
template <class S>
TensorT<S> causal_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                            int n_heads) {
    auto qm = detail::as_mat<S>(*q.node());
    auto km = detail::as_mat<S>(*k.node());
    auto vm = detail::as_mat<S>(*v.node());
    const long T = qm.rows(), d = qm.cols();
    if (km.rows() != T || vm.rows() != T || km.cols() != d || vm.cols() != d)
        throw ShapeError("attention: q/k/v shape mismatch");
    if (d % n_heads != 0) throw ShapeError("attention: d_model not divisible by heads");
    const long hd = d / n_heads;
    const S inv_sqrt = S(1.0 / std::sqrt(double(hd)));

    std::vector<S> out(size_t(T) * size_t(d));
    EMap<S> om(out.data(), T, d);
    auto probs = std::make_shared<std::vector<EMat<S>>>();
    probs->reserve(size_t(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        auto qh = qm.middleCols(h * hd, hd);
        auto kh = km.middleCols(h * hd, hd);
        auto vh = vm.middleCols(h * hd, hd);
        EMat<S> scores = (qh * kh.transpose()) * inv_sqrt;  // T x T
        // causal mask + row-wise softmax, max-subtracted
        for (long i = 0; i < T; ++i) {
            S mx = scores(i, 0);
            for (long j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
            double denom = 0.0;
            for (long j = 0; j <= i; ++j) {
                S e = std::exp(scores(i, j) - mx);
                scores(i, j) = e;
                denom += double(e);
            }
            S inv_denom = S(1.0 / denom);
            for (long j = 0; j <= i; ++j) scores(i, j) *= inv_denom;
            for (long j = i + 1; j < T; ++j) scores(i, j) = S(0);
        }
        om.middleCols(h * hd, hd).noalias() = scores * vh;
        probs->push_back(std::move(scores));
    }

    auto pq = q.node();
    auto pk = k.node();
    auto pv = v.node();
    return detail::make_op<S>({int(T), int(d)}, std::move(out), {q, k, v},
                              [pq, pk, pv, probs, T, d, hd, n_heads, inv_sqrt](TensorNodeT<S>& n) {
        ECMap<S> dO(n.grad.data(), T, d);
        auto qm2 = detail::as_mat<S>(*pq);
        auto km2 = detail::as_mat<S>(*pk);
        auto vm2 = detail::as_mat<S>(*pv);
        std::vector<S> gq(pq->size(), S(0)), gk(pk->size(), S(0)), gv(pv->size(), S(0));
        EMap<S> gqm(gq.data(), T, d), gkm(gk.data(), T, d), gvm(gv.data(), T, d);
        for (int h = 0; h < n_heads; ++h) {
            const EMat<S>& P = (*probs)[size_t(h)];
            auto dOh = dO.middleCols(h * hd, hd);
            auto qh = qm2.middleCols(h * hd, hd);
            auto kh = km2.middleCols(h * hd, hd);
            auto vh = vm2.middleCols(h * hd, hd);
            gvm.middleCols(h * hd, hd).noalias() = P.transpose() * dOh;
            EMat<S> dP = dOh * vh.transpose();            // T x T
            EMat<S> dS = P.cwiseProduct(dP);              // start with P o dP
            Eigen::Matrix<S, Eigen::Dynamic, 1> rowsum = dS.rowwise().sum();
            // dS = P o (dP - rowsum); masked entries stay 0 because P is 0 there
            for (long i = 0; i < T; ++i)
                for (long j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - rowsum(i));
            for (long i = 0; i < T; ++i)
                for (long j = i + 1; j < T; ++j) dS(i, j) = S(0);
            gqm.middleCols(h * hd, hd).noalias() = (dS * kh) * inv_sqrt;
            gkm.middleCols(h * hd, hd).noalias() = (dS.transpose() * qh) * inv_sqrt;
        }
        if (pq->needs_grad) pq->accumulate(gq.data(), gq.size());
        if (pk->needs_grad) pk->accumulate(gk.data(), gk.size());
        if (pv->needs_grad) pv->accumulate(gv.data(), gv.size());
    });
}

// Summed cross-entropy over selected rows. targets[i] is the class index for
// row i or -1 to exclude the row from the loss. Gradient at a supervised row
// is softmax(row) - onehot(target); excluded rows get exactly zero.
template <class S>
TensorT<S> cross_entropy_rows(const TensorT<S>& logits, const std::vector<int>& targets) {
    auto lm = detail::as_mat<S>(*logits.node());
    const long T = lm.rows(), V = lm.cols();
    if (long(targets.size()) != T) throw ShapeError("cross_entropy_rows: target count mismatch");
    double loss = 0.0;
    for (long i = 0; i < T; ++i) {
        int t = targets[size_t(i)];
        if (t < 0) continue;
        if (t >= V) throw ShapeError("cross_entropy_rows: target out of range");
        const S* row = logits.data().data() + size_t(i) * size_t(V);
        S mx = row[0];
        for (long j = 1; j < V; ++j) mx = std::max(mx, row[size_t(j)]);
        double denom = 0.0;
        for (long j = 0; j < V; ++j) denom += std::exp(double(row[size_t(j)]) - double(mx));
        loss += std::log(denom) + double(mx) - double(row[size_t(t)]);
    }
    if (!std::isfinite(loss)) throw NumericError("cross_entropy_rows: non-finite loss");
    auto pl = logits.node();
    auto tcopy = targets;
    return detail::make_op<S>({1}, {S(loss)}, {logits}, [pl, tcopy, T, V](TensorNodeT<S>& n) {
        S dl = n.grad[0];
        std::vector<S> g(pl->size(), S(0));
        for (long i = 0; i < T; ++i) {
            int t = tcopy[size_t(i)];
            if (t < 0) continue;
            const S* row = pl->value.data() + size_t(i) * size_t(V);
            S* grow = g.data() + size_t(i) * size_t(V);
            S mx = row[0];
            for (long j = 1; j < V; ++j) mx = std::max(mx, row[size_t(j)]);
            double denom = 0.0;
            for (long j = 0; j < V; ++j) denom += std::exp(double(row[size_t(j)]) - double(mx));
            for (long j = 0; j < V; ++j)
                grow[size_t(j)] = S(std::exp(double(row[size_t(j)]) - double(mx)) / denom) * dl;
            grow[size_t(t)] -= dl;
        }
        pl->accumulate(g.data(), g.size());
    });
}

// Value-only row softmax (no graph); decode and metrics use it.
template <class S>
std::vector<S> softmax_row(std::span<const S> logits) {
    std::vector<S> p(logits.size());
    S mx = logits[0];
    for (S v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        denom += double(p[i]);
    }
    S inv = S(1.0 / denom);
    for (auto& v : p) v *= inv;
    return p;
}

// ----------------------------------------------------------------- backward

template <class S>
void backward(const TensorT<S>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
    if (!std::isfinite(double(loss.item()))) throw NumericError("backward: non-finite loss");

    using Node = TensorNodeT<S>;
    // iterative post-order topological sort
    std::vector<Node*> order;
    std::vector<std::pair<Node*, size_t>> stack;
    std::vector<Node*> seen;
    auto visited = [&](Node* n) {
        return std::find(seen.begin(), seen.end(), n) != seen.end();
    };
    Node* root = loss.node().get();
    if (!root->backward_fn && !root->requires_grad) {
        return;  // constant loss: nothing reachable, all grads stay zero
    }
    stack.push_back({root, 0});
    seen.push_back(root);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (!visited(p)) {
                seen.push_back(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // NaN propagating into parameters is an error state
    for (Node* n : order) {
        if (!n->requires_grad || n->grad.empty()) continue;
        for (S g : n->grad)
            if (!std::isfinite(double(g))) throw NumericError("backward: non-finite gradient");
    }
}

template <class S>
void zero_grad(std::vector<TensorT<S>>& params) {
    for (auto& p : params) {
        auto& g = p.grad();
        std::fill(g.begin(), g.end(), S(0));
    }
}

// Central-difference gradient estimate, one result buffer per parameter.
// f() must evaluate the objective from the parameters' current values.
template <class S, class F>
std::vector<std::vector<S>> finite_diff_grad(F&& f, std::vector<TensorT<S>> params, S step) {
    if (!(step > S(0))) throw std::invalid_argument("finite_diff_grad: step must be positive");
    std::vector<std::vector<S>> grads;
    grads.reserve(params.size());
    for (auto& p : params) {
        std::vector<S> g(p.size());
        auto& data = p.data();
        for (size_t i = 0; i < data.size(); ++i) {
            S saved = data[i];
            data[i] = saved + step;
            S up = f();
            data[i] = saved - step;
            S down = f();
            data[i] = saved;
            g[i] = (up - down) / (S(2) * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// Same, but only for selected (param, flat index) coordinates; keeps the
// oracle affordable on full models.
template <class S, class F>
std::vector<S> finite_diff_coords(F&& f, std::vector<TensorT<S>> params,
                                  const std::vector<std::pair<size_t, size_t>>& coords, S step) {
    std::vector<S> out;
    out.reserve(coords.size());
    for (auto [pi, ci] : coords) {
        auto& data = params[pi].data();
        S saved = data[ci];
        data[ci] = saved + step;
        S up = f();
        data[ci] = saved - step;
        S down = f();
        data[ci] = saved;
        out.push_back((up - down) / (S(2) * step));
    }
    return out;
}

// --------------------------------------------------------------------- Adam

struct OptimizerState {
    float learning_rate = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
    long step_count = 0;
    std::vector<std::vector<float>> m;  // first moments, shape-matched to params
    std::vector<std::vector<float>> v;  // second moments
};

void adam_init(OptimizerState& state, const std::vector<Tensor>& params);
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<float>>& grads,
               OptimizerState& state);
// convenience: reads each parameter's accumulated .grad
void adam_step(std::vector<Tensor>& params, OptimizerState& state);

}  // namespace tadlab
