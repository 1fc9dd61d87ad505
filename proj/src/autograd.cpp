#include "bgnn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "bgnn/bitcore.hpp"
#include "bgnn/gemm.hpp"
#include "bgnn/lsp.hpp"

namespace bgnn {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
    return nodes_[v.id];
}

template <typename T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
    if (!v.valid() || v.id >= nodes_.size()) throw Error("variable does not belong to this tape");
    return nodes_[v.id];
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& p) {
    Node n;
    n.value = p.value;
    n.param = &p;
    n.needs_grad = record_;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::span<const Var> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    if (record_) {
        for (Var v : inputs) n.needs_grad = n.needs_grad || node(v).needs_grad;
        if (n.needs_grad) n.fn = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
    return node(v).value;
}

template <typename T>
bool Tape<T>::needs_grad(Var v) const {
    return node(v).needs_grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
        n.grad = Tensor<T>(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

template <typename T>
const Tensor<T>* Tape<T>::grad_if_any(Var v) const {
    const Node& n = node(v);
    return n.has_grad ? &n.grad : nullptr;
}

template <typename T>
void Tape<T>::backward(Var loss) {
    const Node& n = node(loss);
    if (n.value.size() != 1) throw ShapeError("backward(loss) needs a single-element output");
    backward(loss, Tensor<T>(n.value.shape(), T(1)));
}

template <typename T>
void Tape<T>::backward(Var out, const Tensor<T>& seed) {
    if (!record_) throw Error("backward: the forward pass was not recorded on this tape");
    Node& root = node(out);
    if (!root.needs_grad) throw Error("backward: output does not depend on any trainable input");
    if (!seed.same_shape(root.value)) throw ShapeError("backward seed shape mismatch");
    Tensor<T>& g = grad(out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t id = out.id + 1; id-- > 0;) {
        Node& cur = nodes_[id];
        if (!cur.has_grad) continue;
        if (cur.fn) {
            cur.fn(*this, cur.grad);
            cur.grad = Tensor<T>();
            cur.has_grad = false;
        } else if (cur.param) {
            Parameter<T>& p = *cur.param;
            if (!p.grad.same_shape(p.value)) p.zero_grad();
            for (std::size_t i = 0; i < cur.grad.size(); ++i) p.grad[i] += cur.grad[i];
        }
    }
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Ops

namespace ad {

namespace {

template <typename T>
void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Index of the lower median of v[idx[0..n)] under (value, index) order.
template <typename T>
std::size_t lower_median_index(std::vector<std::size_t>& idx, const T* base, std::size_t stride) {
    const std::size_t n = idx.size();
    auto mid = idx.begin() + static_cast<std::ptrdiff_t>((n - 1) / 2);
    std::nth_element(idx.begin(), mid, idx.end(), [&](std::size_t a, std::size_t b) {
        const T va = base[a * stride];
        const T vb = base[b * stride];
        return va < vb || (va == vb && a < b);
    });
    return *mid;
}

}  // namespace

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    require<T>(A.same_shape(B), "add: shape mismatch " + shape_string(A.shape()) + " vs " +
                                    shape_string(B.shape()));
    Tensor<T> y = A;
    add_into(y, B);
    return t.record(std::move(y), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
        if (t.needs_grad(a)) add_into(t.grad(a), g);
        if (t.needs_grad(b)) add_into(t.grad(b), g);
    });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
    Tensor<T> y = t.value(a);
    for (auto& v : y.storage()) v *= s;
    return t.record(std::move(y), {a}, [a, s](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
    const auto& A = t.value(a);
    double acc = 0.0;
    for (auto v : A.storage()) acc += v;
    return t.record(Tensor<T>({1}, static_cast<T>(acc)), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad(a);
        for (auto& v : ga.storage()) v += g[0];
    });
}

template <typename T>
Var dot_const(Tape<T>& t, Var a, const Tensor<T>& w) {
    const auto& A = t.value(a);
    require<T>(A.same_shape(w), "dot_const: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < A.size(); ++i) acc += static_cast<double>(A[i]) * w[i];
    return t.record(Tensor<T>({1}, static_cast<T>(acc)), {a}, [a, w](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < w.size(); ++i) ga[i] += g[0] * w[i];
    });
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, bool packed) {
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    require<T>(X.cols() == W.cols(), "linear: input width " + std::to_string(X.cols()) +
                                         " vs weight " + shape_string(W.shape()));
    const std::size_t m = X.rows();
    const std::size_t in = X.cols();
    const std::size_t out = W.rows();
    Tensor<T> y = Tensor<T>::matrix(m, out);
    if (packed) {
        const IntMatrix raw =
            binary_gemm_int(pack_signs(X.data(), m, in), pack_signs(W.data(), out, in));
        for (std::size_t i = 0; i < raw.size(); ++i) y[i] = static_cast<T>(raw[i]);
    } else {
        gemm::nt(m, out, in, X.data(), W.data(), y.data());
    }
    return t.record(std::move(y), {x, w}, [x, w, m, in, out](Tape<T>& t, const Tensor<T>& g) {
        if (t.needs_grad(x)) gemm::nn(m, in, out, g.data(), t.value(w).data(), t.grad(x).data(), true);
        if (t.needs_grad(w)) gemm::tn(m, in, out, g.data(), t.value(x).data(), t.grad(w).data(), true);
    });
}

template <typename T>
Var slice_cols(Tape<T>& t, Var x, std::size_t begin, std::size_t end) {
    const auto& X = t.value(x);
    require<T>(begin <= end && end <= X.cols(), "slice_cols: range out of bounds");
    const std::size_t m = X.rows();
    const std::size_t c = X.cols();
    const std::size_t w = end - begin;
    Tensor<T> y = Tensor<T>::matrix(m, w);
    for (std::size_t r = 0; r < m; ++r)
        std::copy_n(X.data() + r * c + begin, w, y.data() + r * w);
    return t.record(std::move(y), {x}, [x, begin, m, c, w](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t q = 0; q < w; ++q) gx[r * c + begin + q] += g[r * w + q];
    });
}

template <typename T>
Var concat_cols(Tape<T>& t, std::span<const Var> parts) {
    require<T>(!parts.empty(), "concat_cols: nothing to concatenate");
    const std::size_t m = t.value(parts[0]).rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (Var p : parts) {
        require<T>(t.value(p).rows() == m, "concat_cols: row count mismatch");
        widths.push_back(t.value(p).cols());
        total += widths.back();
    }
    Tensor<T> y = Tensor<T>::matrix(m, total);
    std::size_t off = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
        const auto& P = t.value(parts[q]);
        for (std::size_t r = 0; r < m; ++r)
            std::copy_n(P.data() + r * widths[q], widths[q], y.data() + r * total + off);
        off += widths[q];
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return t.record(std::move(y), parts, [ins, widths, m, total](Tape<T>& t, const Tensor<T>& g) {
        std::size_t off = 0;
        for (std::size_t q = 0; q < ins.size(); ++q) {
            if (t.needs_grad(ins[q])) {
                auto& gp = t.grad(ins[q]);
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < widths[q]; ++c)
                        gp[r * widths[q] + c] += g[r * total + off + c];
            }
            off += widths[q];
        }
    });
}

template <typename T>
Var add_bias(Tape<T>& t, Var y, Var b) {
    const auto& Y = t.value(y);
    const auto& B = t.value(b);
    require<T>(B.size() == Y.cols(), "add_bias: bias size mismatch");
    Tensor<T> out = Y;
    const std::size_t c = Y.cols();
    for (std::size_t r = 0; r < Y.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] += B[j];
    return t.record(std::move(out), {y, b}, [y, b, c](Tape<T>& t, const Tensor<T>& g) {
        if (t.needs_grad(y)) add_into(t.grad(y), g);
        if (t.needs_grad(b)) {
            auto& gb = t.grad(b);
            for (std::size_t r = 0; r < g.size() / c; ++r)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
        }
    });
}

template <typename T>
Var add_node_to_edges(Tape<T>& t, Var edges, Var nodes, std::size_t k) {
    const auto& E = t.value(edges);
    const auto& N = t.value(nodes);
    require<T>(E.cols() == N.cols() && E.rows() == N.rows() * k,
               "add_node_to_edges: expected edges (n*k x c) and nodes (n x c)");
    const std::size_t c = E.cols();
    Tensor<T> y = E;
    for (std::size_t r = 0; r < E.rows(); ++r) {
        const T* nr = N.data() + (r / k) * c;
        T* yr = y.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) yr[j] += nr[j];
    }
    return t.record(std::move(y), {edges, nodes}, [edges, nodes, k, c](Tape<T>& t, const Tensor<T>& g) {
        if (t.needs_grad(edges)) add_into(t.grad(edges), g);
        if (t.needs_grad(nodes)) {
            auto& gn = t.grad(nodes);
            const std::size_t rows = g.size() / c;
            for (std::size_t r = 0; r < rows; ++r) {
                T* gr = gn.data() + (r / k) * c;
                const T* src = g.data() + r * c;
                for (std::size_t j = 0; j < c; ++j) gr[j] += src[j];
            }
        }
    });
}

template <typename T>
Var rescale(Tape<T>& t, Var y, Var alpha) {
    const auto& Y = t.value(y);
    const auto& A = t.value(alpha);
    const std::size_t c = Y.cols();
    require<T>(A.size() == c || A.size() == 1, "rescale: alpha does not broadcast over channels");
    const bool scalar = A.size() == 1;
    Tensor<T> out = Y;
    for (std::size_t r = 0; r < Y.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] *= A[scalar ? 0 : j];
    return t.record(std::move(out), {y, alpha}, [y, alpha, c, scalar](Tape<T>& t, const Tensor<T>& g) {
        const auto& Y = t.value(y);
        const auto& A = t.value(alpha);
        const std::size_t rows = c == 0 ? 0 : g.size() / c;
        std::vector<T> av(c);
        for (std::size_t j = 0; j < c; ++j) av[j] = A[scalar ? 0 : j];
        if (t.needs_grad(y)) {
            T* gy = t.grad(y).data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) gy[r * c + j] += g[r * c + j] * av[j];
        }
        if (t.needs_grad(alpha)) {
            std::vector<T> acc(c, T(0));
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) acc[j] += g[r * c + j] * Y[r * c + j];
            auto& ga = t.grad(alpha);
            for (std::size_t j = 0; j < c; ++j) ga[scalar ? 0 : j] += acc[j];
        }
    });
}

template <typename T>
Var rescale_rank1(Tape<T>& t, Var y, Var alpha, Var beta, Var gamma) {
    const auto& Y = t.value(y);
    const auto& A = t.value(alpha);
    const auto& Bt = t.value(beta);
    const auto& G = t.value(gamma);
    const std::size_t c = Y.cols();
    const std::size_t h = Bt.size();
    const std::size_t w = G.size();
    require<T>(A.size() == c, "rescale_rank1: alpha size must equal channels");
    require<T>(h > 0 && w > 0 && Y.rows() % (h * w) == 0,
               "rescale_rank1: beta x gamma does not tile the rows");
    Tensor<T> out = Y;
    for (std::size_t r = 0; r < Y.rows(); ++r) {
        const T bg = Bt[(r / w) % h] * G[r % w];
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] *= A[j] * bg;
    }
    return t.record(std::move(out), {y, alpha, beta, gamma},
                    [y, alpha, beta, gamma, c, h, w](Tape<T>& t, const Tensor<T>& g) {
        const auto& Y = t.value(y);
        const auto& A = t.value(alpha);
        const auto& Bt = t.value(beta);
        const auto& G = t.value(gamma);
        const bool gy = t.needs_grad(y), ga = t.needs_grad(alpha), gb = t.needs_grad(beta),
                   gg = t.needs_grad(gamma);
        Tensor<T>* dy = gy ? &t.grad(y) : nullptr;
        Tensor<T>* da = ga ? &t.grad(alpha) : nullptr;
        Tensor<T>* db = gb ? &t.grad(beta) : nullptr;
        Tensor<T>* dg = gg ? &t.grad(gamma) : nullptr;
        const std::size_t rows = Y.rows();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t hi = (r / w) % h;
            const std::size_t wi = r % w;
            const T bv = Bt[hi], gv = G[wi];
            for (std::size_t j = 0; j < c; ++j) {
                const T gr = g[r * c + j];
                const T yv = Y[r * c + j];
                if (dy) (*dy)[r * c + j] += gr * A[j] * bv * gv;
                if (da) (*da)[j] += gr * yv * bv * gv;
                if (db) (*db)[hi] += gr * yv * A[j] * gv;
                if (dg) (*dg)[wi] += gr * yv * A[j] * bv;
            }
        }
    });
}

template <typename T>
Var batch_norm(Tape<T>& t, Var x, Var scale_v, Var shift_v, BatchNormState<T>& st, bool training) {
    const auto& X = t.value(x);
    const auto& S = t.value(scale_v);
    const auto& B = t.value(shift_v);
    const std::size_t m = X.rows();
    const std::size_t c = X.cols();
    require<T>(S.size() == c && B.size() == c, "batch_norm: affine parameters sized " +
                                                   std::to_string(S.size()) + " for " +
                                                   std::to_string(c) + " channels");
    if (st.running_mean.size() != c) st.running_mean = Tensor<T>({c}, T(0));
    if (st.running_var.size() != c) st.running_var = Tensor<T>({c}, T(1));
    if (!(st.epsilon > 0.0)) throw ValueError("batch_norm: epsilon must be positive");

    std::vector<T> mean(c), inv_std(c);
    if (training) {
        if (m == 0) throw ValueError("batch_norm: empty batch in training mode");
        std::vector<double> mu(c, 0.0), var(c, 0.0);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < c; ++j) mu[j] += X[r * c + j];
        for (auto& v : mu) v /= static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < c; ++j) {
                const double d = X[r * c + j] - mu[j];
                var[j] += d * d;
            }
        for (std::size_t j = 0; j < c; ++j) {
            var[j] /= static_cast<double>(m);
            if (!std::isfinite(mu[j]) || !std::isfinite(var[j]))
                throw ValueError("batch_norm: non-finite batch statistics");
            mean[j] = static_cast<T>(mu[j]);
            inv_std[j] = static_cast<T>(1.0 / std::sqrt(var[j] + st.epsilon));
            st.running_mean[j] = static_cast<T>(st.momentum * st.running_mean[j] +
                                                (1.0 - st.momentum) * mu[j]);
            st.running_var[j] = static_cast<T>(st.momentum * st.running_var[j] +
                                               (1.0 - st.momentum) * var[j]);
        }
    } else {
        for (std::size_t j = 0; j < c; ++j) {
            const double rm = st.running_mean[j];
            const double rv = st.running_var[j];
            if (!std::isfinite(rm) || !std::isfinite(rv) || rv < 0.0)
                throw ValueError("batch_norm: non-finite or negative running statistics");
            mean[j] = static_cast<T>(rm);
            inv_std[j] = static_cast<T>(1.0 / std::sqrt(rv + st.epsilon));
        }
    }

    Tensor<T> xhat = Tensor<T>::matrix(m, c);
    Tensor<T> y = Tensor<T>::matrix(m, c);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            const T h = (X[r * c + j] - mean[j]) * inv_std[j];
            xhat[r * c + j] = h;
            y[r * c + j] = h * S[j] + B[j];
        }

    return t.record(std::move(y), {x, scale_v, shift_v},
                    [x, scale_v, shift_v, xhat = std::move(xhat), inv_std, m, c,
                     training](Tape<T>& t, const Tensor<T>& g) {
        const auto& S = t.value(scale_v);
        if (t.needs_grad(scale_v) || t.needs_grad(shift_v)) {
            std::vector<double> ds(c, 0.0), db(c, 0.0);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < c; ++j) {
                    ds[j] += static_cast<double>(g[r * c + j]) * xhat[r * c + j];
                    db[j] += g[r * c + j];
                }
            if (t.needs_grad(scale_v)) {
                auto& gs = t.grad(scale_v);
                for (std::size_t j = 0; j < c; ++j) gs[j] += static_cast<T>(ds[j]);
            }
            if (t.needs_grad(shift_v)) {
                auto& gb = t.grad(shift_v);
                for (std::size_t j = 0; j < c; ++j) gb[j] += static_cast<T>(db[j]);
            }
        }
        if (!t.needs_grad(x)) return;
        auto& gx = t.grad(x);
        if (!training) {
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * S[j] * inv_std[j];
            return;
        }
        std::vector<double> sum_d(c, 0.0), sum_dh(c, 0.0);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < c; ++j) {
                const double d = static_cast<double>(g[r * c + j]) * S[j];
                sum_d[j] += d;
                sum_dh[j] += d * xhat[r * c + j];
            }
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < c; ++j) {
                const double d = static_cast<double>(g[r * c + j]) * S[j];
                const double v = inv_std[j] * (d - inv_m * sum_d[j] - xhat[r * c + j] * inv_m * sum_dh[j]);
                gx[r * c + j] += static_cast<T>(v);
            }
    });
}

template <typename T>
Var relu(Tape<T>& t, Var x) {
    Tensor<T> y = t.value(x);
    for (auto& v : y.storage()) v = v > T(0) ? v : T(0);
    return t.record(std::move(y), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
        const auto& X = t.value(x);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += X[i] > T(0) ? g[i] : T(0);
    });
}

template <typename T>
Var prelu(Tape<T>& t, Var x, Var slope) {
    const auto& S = t.value(slope);
    require<T>(S.size() == 1, "prelu: slope must be a single value");
    const T a = S[0];
    Tensor<T> y = t.value(x);
    {
        T* py = y.data();
        const std::size_t n = y.size();
        for (std::size_t i = 0; i < n; ++i) py[i] = std::max(py[i], T(0)) + a * std::min(py[i], T(0));
    }
    return t.record(std::move(y), {x, slope}, [x, slope](Tape<T>& t, const Tensor<T>& g) {
        const T* px = t.value(x).data();
        const T* pg = g.data();
        const std::size_t n = g.size();
        const T a = t.value(slope)[0];
        if (t.needs_grad(x)) {
            T* gx = t.grad(x).data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += pg[i] * (px[i] >= T(0) ? T(1) : a);
        }
        if (t.needs_grad(slope)) {
            // Row-sized partial sums keep the accumulation order fixed.
            double acc = 0.0;
            constexpr std::size_t kChunk = 256;
            for (std::size_t i0 = 0; i0 < n; i0 += kChunk) {
                T part = T(0);
                const std::size_t i1 = std::min(n, i0 + kChunk);
                for (std::size_t i = i0; i < i1; ++i) part += pg[i] * std::min(px[i], T(0));
                acc += static_cast<double>(part);
            }
            t.grad(slope)[0] += static_cast<T>(acc);
        }
    });
}

template <typename T>
Var tanh(Tape<T>& t, Var x) {
    Tensor<T> y = t.value(x);
    for (auto& v : y.storage()) v = std::tanh(v);
    Var out = t.record(std::move(y), {x}, {});
    if (!t.recording() || !t.needs_grad(out)) return out;
    // Re-record with a closure that can see its own output.
    return t.record(t.value(out), {x}, [x, out](Tape<T>& t, const Tensor<T>& g) {
        const auto& Y = t.value(out);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - Y[i] * Y[i]);
    });
}

namespace {
template <typename T>
void ste_window(Tape<T>& t, Var x, const Tensor<T>& g) {
    const auto& X = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
        if (X[i] >= T(-1) && X[i] <= T(1)) gx[i] += g[i];
}
}  // namespace

template <typename T>
Var sign_ste(Tape<T>& t, Var x) {
    Tensor<T> y = t.value(x);
    for (auto& v : y.storage()) v = v >= T(0) ? T(1) : T(-1);
    return t.record(std::move(y), {x}, [x](Tape<T>& t, const Tensor<T>& g) { ste_window(t, x, g); });
}

template <typename T>
Var hardtanh(Tape<T>& t, Var x) {
    Tensor<T> y = t.value(x);
    for (auto& v : y.storage()) v = std::clamp(v, T(-1), T(1));
    return t.record(std::move(y), {x}, [x](Tape<T>& t, const Tensor<T>& g) { ste_window(t, x, g); });
}

template <typename T>
Var quantize(Tape<T>& t, Var x, Quantizer q) {
    switch (q) {
        case Quantizer::identity: return x;
        case Quantizer::tanh: return ad::tanh(t, x);
        case Quantizer::sign: return sign_ste(t, x);
        case Quantizer::hardtanh: return hardtanh(t, x);
    }
    return x;
}

template <typename T>
Var edge_diff(Tape<T>& t, Var x, const GraphTopology& topo) {
    const auto& X = t.value(x);
    require<T>(topo.nodes() == X.rows(), "edge_diff: topology covers " +
                                             std::to_string(topo.nodes()) + " nodes, features " +
                                             std::to_string(X.rows()));
    const std::size_t n = X.rows(), d = X.cols(), k = topo.k();
    Tensor<T> y = Tensor<T>::matrix(n * k, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < k; ++s) {
            const T* xi = X.data() + i * d;
            const T* xj = X.data() + topo.neighbour(i, s) * d;
            T* yr = y.data() + (i * k + s) * d;
            for (std::size_t c = 0; c < d; ++c) yr[c] = xj[c] - xi[c];
        }
    return t.record(std::move(y), {x}, [x, topo, n, d, k](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < k; ++s) {
                const T* gr = g.data() + (i * k + s) * d;
                T* gi = gx.data() + i * d;
                T* gj = gx.data() + topo.neighbour(i, s) * d;
                for (std::size_t c = 0; c < d; ++c) {
                    gj[c] += gr[c];
                    gi[c] -= gr[c];
                }
            }
    });
}

template <typename T>
Var edge_xor(Tape<T>& t, Var x, const GraphTopology& topo) {
    const auto& X = t.value(x);
    require<T>(topo.nodes() == X.rows(), "edge_xor: topology/feature node count differ");
    const std::size_t n = X.rows(), d = X.cols(), k = topo.k();
    Tensor<T> y = Tensor<T>::matrix(n * k, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < k; ++s) {
            const T* xi = X.data() + i * d;
            const T* xj = X.data() + topo.neighbour(i, s) * d;
            T* yr = y.data() + (i * k + s) * d;
            for (std::size_t c = 0; c < d; ++c) yr[c] = -xj[c] * xi[c];
        }
    return t.record(std::move(y), {x}, [x, topo, n, d, k](Tape<T>& t, const Tensor<T>& g) {
        const auto& X = t.value(x);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < k; ++s) {
                const std::size_t j = topo.neighbour(i, s);
                const T* gr = g.data() + (i * k + s) * d;
                for (std::size_t c = 0; c < d; ++c) {
                    gx[j * d + c] -= gr[c] * X[i * d + c];
                    gx[i * d + c] -= gr[c] * X[j * d + c];
                }
            }
    });
}

template <typename T>
Var max_neighbours(Tape<T>& t, Var edges, std::size_t k) {
    const auto& E = t.value(edges);
    require<T>(k > 0 && E.rows() % k == 0, "max_neighbours: rows are not a multiple of k");
    const std::size_t n = E.rows() / k, c = E.cols();
    Tensor<T> y = Tensor<T>::matrix(n, c);
    std::vector<std::uint32_t> arg(n * c, 0);
    for (std::size_t i = 0; i < n; ++i) {
        T* yr = y.data() + i * c;
        std::copy_n(E.data() + i * k * c, c, yr);
        for (std::size_t s = 1; s < k; ++s) {
            const T* er = E.data() + (i * k + s) * c;
            for (std::size_t j = 0; j < c; ++j)
                if (er[j] > yr[j]) {
                    yr[j] = er[j];
                    arg[i * c + j] = static_cast<std::uint32_t>(s);
                }
        }
    }
    return t.record(std::move(y), {edges}, [edges, arg = std::move(arg), n, c, k](Tape<T>& t, const Tensor<T>& g) {
        auto& ge = t.grad(edges);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) ge[(i * k + arg[i * c + j]) * c + j] += g[i * c + j];
    });
}

template <typename T>
Var mean_neighbours(Tape<T>& t, Var x, const GraphTopology& topo) {
    const auto& X = t.value(x);
    const std::size_t n = X.rows(), d = X.cols(), k = topo.k();
    require<T>(k == 0 || topo.nodes() == n, "mean_neighbours: topology/feature node count differ");
    Tensor<T> y = Tensor<T>::matrix(n, d);
    if (k > 0) {
        const T inv = T(1) / static_cast<T>(k);
        for (std::size_t i = 0; i < n; ++i) {
            T* yr = y.data() + i * d;
            for (std::size_t s = 0; s < k; ++s) {
                const T* xj = X.data() + topo.neighbour(i, s) * d;
                for (std::size_t c = 0; c < d; ++c) yr[c] += xj[c];
            }
            for (std::size_t c = 0; c < d; ++c) yr[c] *= inv;
        }
    }
    return t.record(std::move(y), {x}, [x, topo, n, d, k](Tape<T>& t, const Tensor<T>& g) {
        if (k == 0) return;
        auto& gx = t.grad(x);
        const T inv = T(1) / static_cast<T>(k);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t s = 0; s < k; ++s) {
                T* gj = gx.data() + topo.neighbour(i, s) * d;
                for (std::size_t c = 0; c < d; ++c) gj[c] += g[i * d + c] * inv;
            }
    });
}

template <typename T>
Var global_max_pool(Tape<T>& t, Var x, std::size_t graph_size) {
    const auto& X = t.value(x);
    if (graph_size == 0 || X.rows() == 0) throw ValueError("global_max_pool: empty graph");
    require<T>(X.rows() % graph_size == 0, "global_max_pool: rows are not whole graphs");
    const std::size_t b = X.rows() / graph_size, c = X.cols();
    Tensor<T> y = Tensor<T>::matrix(b, c);
    std::vector<std::uint32_t> arg(b * c, 0);
    for (std::size_t q = 0; q < b; ++q) {
        T* yr = y.data() + q * c;
        std::copy_n(X.data() + q * graph_size * c, c, yr);
        for (std::size_t r = 1; r < graph_size; ++r) {
            const T* xr = X.data() + (q * graph_size + r) * c;
            for (std::size_t j = 0; j < c; ++j)
                if (xr[j] > yr[j]) {
                    yr[j] = xr[j];
                    arg[q * c + j] = static_cast<std::uint32_t>(r);
                }
        }
    }
    return t.record(std::move(y), {x}, [x, arg = std::move(arg), b, c, graph_size](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        for (std::size_t q = 0; q < b; ++q)
            for (std::size_t j = 0; j < c; ++j)
                gx[(q * graph_size + arg[q * c + j]) * c + j] += g[q * c + j];
    });
}

template <typename T>
Var global_avg_pool(Tape<T>& t, Var x, std::size_t graph_size) {
    const auto& X = t.value(x);
    if (graph_size == 0 || X.rows() == 0) throw ValueError("global_avg_pool: empty graph");
    require<T>(X.rows() % graph_size == 0, "global_avg_pool: rows are not whole graphs");
    const std::size_t b = X.rows() / graph_size, c = X.cols();
    Tensor<T> y = Tensor<T>::matrix(b, c);
    for (std::size_t q = 0; q < b; ++q) {
        std::vector<double> acc(c, 0.0);
        for (std::size_t r = 0; r < graph_size; ++r) {
            const T* xr = X.data() + (q * graph_size + r) * c;
            for (std::size_t j = 0; j < c; ++j) acc[j] += xr[j];
        }
        for (std::size_t j = 0; j < c; ++j)
            y[q * c + j] = static_cast<T>(acc[j] / static_cast<double>(graph_size));
    }
    return t.record(std::move(y), {x}, [x, b, c, graph_size](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        const T inv = T(1) / static_cast<T>(graph_size);
        for (std::size_t q = 0; q < b; ++q)
            for (std::size_t r = 0; r < graph_size; ++r)
                for (std::size_t j = 0; j < c; ++j)
                    gx[(q * graph_size + r) * c + j] += g[q * c + j] * inv;
    });
}

template <typename T>
Var dropout(Tape<T>& t, Var x, const Tensor<T>& mask) {
    const auto& X = t.value(x);
    require<T>(X.same_shape(mask), "dropout: mask shape mismatch");
    Tensor<T> y = X;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
    return t.record(std::move(y), {x}, [x, mask](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

template <typename T>
Var l2_normalize_rows(Tape<T>& t, Var x) {
    const auto& X = t.value(x);
    const std::size_t m = X.rows(), c = X.cols();
    Tensor<T> y = Tensor<T>::matrix(m, c);
    std::vector<T> norms(m, T(0));
    for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += static_cast<double>(X[r * c + j]) * X[r * c + j];
        norms[r] = static_cast<T>(std::sqrt(acc));
        if (norms[r] > T(0))
            for (std::size_t j = 0; j < c; ++j) y[r * c + j] = X[r * c + j] / norms[r];
    }
    Var out = t.record(std::move(y), {x}, {});
    if (!t.recording() || !t.needs_grad(out)) return out;
    return t.record(t.value(out), {x}, [x, out, norms, m, c](Tape<T>& t, const Tensor<T>& g) {
        const auto& Y = t.value(out);
        auto& gx = t.grad(x);
        for (std::size_t r = 0; r < m; ++r) {
            if (norms[r] == T(0)) continue;
            double yg = 0.0;
            for (std::size_t j = 0; j < c; ++j) yg += static_cast<double>(Y[r * c + j]) * g[r * c + j];
            for (std::size_t j = 0; j < c; ++j)
                gx[r * c + j] += static_cast<T>((g[r * c + j] - Y[r * c + j] * yg) / norms[r]);
        }
    });
}

template <typename T>
Var balance(Tape<T>& t, Var x, BalanceMode mode, BalanceAxis axis, std::size_t group_rows) {
    if (mode == BalanceMode::none) return x;
    const auto& X = t.value(x);
    const std::size_t m = X.rows(), c = X.cols();
    if (m == 0 || c == 0) return x;
    // A "group" is a set of element offsets sharing one centring statistic.
    struct Group {
        std::size_t start, count, stride;
    };
    std::vector<Group> groups;
    if (axis == BalanceAxis::feature) {
        for (std::size_t r = 0; r < m; ++r) groups.push_back({r * c, c, 1});
    } else {
        const std::size_t gr = group_rows == 0 ? m : group_rows;
        require<T>(m % gr == 0, "balance: rows are not a whole number of groups");
        for (std::size_t q = 0; q < m / gr; ++q)
            for (std::size_t j = 0; j < c; ++j) groups.push_back({q * gr * c + j, gr, c});
    }
    Tensor<T> y = X;
    std::vector<std::size_t> pivot(groups.size(), 0);
    std::vector<std::size_t> idx;
    for (std::size_t q = 0; q < groups.size(); ++q) {
        const auto& grp = groups[q];
        T centre;
        if (mode == BalanceMode::mean) {
            double acc = 0.0;
            for (std::size_t e = 0; e < grp.count; ++e) acc += X[grp.start + e * grp.stride];
            centre = static_cast<T>(acc / static_cast<double>(grp.count));
        } else {
            idx.resize(grp.count);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            pivot[q] = lower_median_index(idx, X.data() + grp.start, grp.stride);
            centre = X[grp.start + pivot[q] * grp.stride];
        }
        for (std::size_t e = 0; e < grp.count; ++e) y[grp.start + e * grp.stride] -= centre;
    }
    return t.record(std::move(y), {x}, [x, mode, groups = std::move(groups), pivot = std::move(pivot)](
                                           Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        for (std::size_t q = 0; q < groups.size(); ++q) {
            const auto& grp = groups[q];
            double acc = 0.0;
            for (std::size_t e = 0; e < grp.count; ++e) {
                gx[grp.start + e * grp.stride] += g[grp.start + e * grp.stride];
                acc += g[grp.start + e * grp.stride];
            }
            if (mode == BalanceMode::mean) {
                const T sub = static_cast<T>(acc / static_cast<double>(grp.count));
                for (std::size_t e = 0; e < grp.count; ++e) gx[grp.start + e * grp.stride] -= sub;
            } else {
                gx[grp.start + pivot[q] * grp.stride] -= static_cast<T>(acc);
            }
        }
    });
}

template <typename T>
Var hamming_score(Tape<T>& t, Var x) {
    const auto& X = t.value(x);
    const std::size_t n = X.rows(), d = X.cols();
    Tensor<T> y = Tensor<T>::matrix(n, n);
    gemm::nt(n, n, d, X.data(), X.data(), y.data());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            y[i * n + j] = -(y[i * n + j] - (i == j ? static_cast<T>(d) : T(0)));
    return t.record(std::move(y), {x}, [x, n, d](Tape<T>& t, const Tensor<T>& g) {
        // dX = -(G + G^T) X
        Tensor<T> sym = Tensor<T>::matrix(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = -(g[i * n + j] + g[j * n + i]);
        gemm::nn(n, d, n, sym.data(), t.value(x).data(), t.grad(x).data(), true);
    });
}

namespace {
template <typename T>
std::vector<double> softmax_row(const T* z, std::size_t c, double inv_temp) {
    std::vector<double> p(c);
    double mx = -1e300;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(z[j]) * inv_temp);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        p[j] = std::exp(static_cast<double>(z[j]) * inv_temp - mx);
        s += p[j];
    }
    for (auto& v : p) v /= s;
    return p;
}
}  // namespace

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels) {
    const auto& Z = t.value(logits);
    const std::size_t b = Z.rows(), c = Z.cols();
    require<T>(labels.size() == b, "cross_entropy: label count mismatch");
    if (b == 0) throw ValueError("cross_entropy: empty batch");
    double loss = 0.0;
    std::vector<double> probs(b * c);
    for (std::size_t q = 0; q < b; ++q) {
        if (labels[q] < 0 || static_cast<std::size_t>(labels[q]) >= c)
            throw ValueError("cross_entropy: label out of range");
        const auto p = softmax_row(Z.data() + q * c, c, 1.0);
        loss -= std::log(std::max(p[static_cast<std::size_t>(labels[q])], 1e-300));
        std::copy(p.begin(), p.end(), probs.begin() + static_cast<std::ptrdiff_t>(q * c));
    }
    loss /= static_cast<double>(b);
    std::vector<int> lab(labels.begin(), labels.end());
    return t.record(Tensor<T>({1}, static_cast<T>(loss)), {logits},
                    [logits, probs = std::move(probs), lab = std::move(lab), b, c](Tape<T>& t, const Tensor<T>& g) {
        auto& gz = t.grad(logits);
        const double s = g[0] / static_cast<double>(b);
        for (std::size_t q = 0; q < b; ++q)
            for (std::size_t j = 0; j < c; ++j) {
                const double target = static_cast<std::size_t>(lab[q]) == j ? 1.0 : 0.0;
                gz[q * c + j] += static_cast<T>(s * (probs[q * c + j] - target));
            }
    });
}

template <typename T>
Var distill_kl(Tape<T>& t, Var student, const Tensor<T>& teacher_logits, T temperature) {
    const auto& Z = t.value(student);
    if (!(temperature > T(0))) throw ValueError("distill_kl: temperature must be positive");
    require<T>(Z.same_shape(teacher_logits), "distill_kl: class-count mismatch between student " +
                                                 shape_string(Z.shape()) + " and teacher " +
                                                 shape_string(teacher_logits.shape()));
    const std::size_t b = Z.rows(), c = Z.cols();
    const double temp = temperature;
    double loss = 0.0;
    std::vector<double> diff(b * c);
    for (std::size_t q = 0; q < b; ++q) {
        const auto ps = softmax_row(Z.data() + q * c, c, 1.0 / temp);
        const auto pt = softmax_row(teacher_logits.data() + q * c, c, 1.0 / temp);
        for (std::size_t j = 0; j < c; ++j) {
            if (pt[j] > 0.0) loss += pt[j] * (std::log(pt[j]) - std::log(std::max(ps[j], 1e-300)));
            diff[q * c + j] = ps[j] - pt[j];
        }
    }
    loss *= temp * temp / static_cast<double>(b);
    return t.record(Tensor<T>({1}, static_cast<T>(loss)), {student},
                    [student, diff = std::move(diff), b, temp](Tape<T>& t, const Tensor<T>& g) {
        auto& gz = t.grad(student);
        const double s = g[0] * temp / static_cast<double>(b);
        for (std::size_t i = 0; i < diff.size(); ++i) gz[i] += static_cast<T>(s * diff[i]);
    });
}

template <typename T>
Var lsp_loss(Tape<T>& t, Var student_x, const Tensor<T>& teacher_x,
             const GraphTopology& student_topo, const GraphTopology& teacher_topo,
             Similarity student_sim, Similarity teacher_sim) {
    const auto& Xs = t.value(student_x);
    const std::size_t n = Xs.rows();
    if (teacher_x.rows() != n || student_topo.nodes() != n || teacher_topo.nodes() != n)
        throw ShapeError("lsp_loss: student and teacher cover different node sets");
    const std::size_t d = Xs.cols();
    double total = 0.0;
    // Per node: union neighbourhood and dL/ds_j for the student scores.
    std::vector<std::vector<std::uint32_t>> hoods(n);
    std::vector<std::vector<double>> dscore(n);
    for (std::size_t i = 0; i < n; ++i) {
        hoods[i] = union_neighbourhood(student_topo, teacher_topo, i);
        const auto p = local_structure(Xs, i, hoods[i], student_sim);
        const auto q = local_structure(teacher_x, i, hoods[i], teacher_sim);
        double li = 0.0;
        for (std::size_t u = 0; u < p.size(); ++u)
            if (p[u] > 0.0) li += p[u] * (std::log(p[u]) - std::log(std::max(q[u], 1e-300)));
        total += li;
        dscore[i].resize(p.size());
        for (std::size_t u = 0; u < p.size(); ++u)
            dscore[i][u] = p[u] * (std::log(std::max(p[u], 1e-300)) - std::log(std::max(q[u], 1e-300)) - li);
    }
    const double loss = total / static_cast<double>(n);
    return t.record(Tensor<T>({1}, static_cast<T>(loss)), {student_x},
                    [student_x, hoods = std::move(hoods), dscore = std::move(dscore), n, d,
                     student_sim](Tape<T>& t, const Tensor<T>& g) {
        const auto& X = t.value(student_x);
        auto& gx = t.grad(student_x);
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t u = 0; u < hoods[i].size(); ++u) {
                const std::size_t j = hoods[i][u];
                const double sim = similarity(X.row(i), X.row(j), student_sim);
                const double coef = s * dscore[i][u] * sim;
                for (std::size_t c = 0; c < d; ++c) {
                    const double xi = X[i * d + c], xj = X[j * d + c];
                    double di, dj;
                    if (student_sim == Similarity::rbf_l2) {
                        di = -2.0 * (xi - xj);
                        dj = 2.0 * (xi - xj);
                    } else {
                        di = 0.5 * xj;
                        dj = 0.5 * xi;
                    }
                    gx[i * d + c] += static_cast<T>(coef * di);
                    gx[j * d + c] += static_cast<T>(coef * dj);
                }
            }
        }
    });
}

#define BGNN_AD_INST(T)                                                                          \
    template Var add<T>(Tape<T>&, Var, Var);                                                     \
    template Var scale<T>(Tape<T>&, Var, T);                                                     \
    template Var sum<T>(Tape<T>&, Var);                                                          \
    template Var dot_const<T>(Tape<T>&, Var, const Tensor<T>&);                                  \
    template Var linear<T>(Tape<T>&, Var, Var, bool);                                            \
    template Var slice_cols<T>(Tape<T>&, Var, std::size_t, std::size_t);                         \
    template Var concat_cols<T>(Tape<T>&, std::span<const Var>);                                 \
    template Var add_bias<T>(Tape<T>&, Var, Var);                                                \
    template Var add_node_to_edges<T>(Tape<T>&, Var, Var, std::size_t);                          \
    template Var rescale<T>(Tape<T>&, Var, Var);                                                 \
    template Var rescale_rank1<T>(Tape<T>&, Var, Var, Var, Var);                                 \
    template Var batch_norm<T>(Tape<T>&, Var, Var, Var, BatchNormState<T>&, bool);               \
    template Var relu<T>(Tape<T>&, Var);                                                         \
    template Var prelu<T>(Tape<T>&, Var, Var);                                                   \
    template Var tanh<T>(Tape<T>&, Var);                                                         \
    template Var sign_ste<T>(Tape<T>&, Var);                                                     \
    template Var hardtanh<T>(Tape<T>&, Var);                                                     \
    template Var quantize<T>(Tape<T>&, Var, Quantizer);                                          \
    template Var edge_diff<T>(Tape<T>&, Var, const GraphTopology&);                              \
    template Var edge_xor<T>(Tape<T>&, Var, const GraphTopology&);                               \
    template Var max_neighbours<T>(Tape<T>&, Var, std::size_t);                                  \
    template Var mean_neighbours<T>(Tape<T>&, Var, const GraphTopology&);                        \
    template Var global_max_pool<T>(Tape<T>&, Var, std::size_t);                                 \
    template Var global_avg_pool<T>(Tape<T>&, Var, std::size_t);                                 \
    template Var dropout<T>(Tape<T>&, Var, const Tensor<T>&);                                    \
    template Var l2_normalize_rows<T>(Tape<T>&, Var);                                            \
    template Var balance<T>(Tape<T>&, Var, BalanceMode, BalanceAxis, std::size_t);               \
    template Var hamming_score<T>(Tape<T>&, Var);                                                \
    template Var cross_entropy<T>(Tape<T>&, Var, std::span<const int>);                          \
    template Var distill_kl<T>(Tape<T>&, Var, const Tensor<T>&, T);                              \
    template Var lsp_loss<T>(Tape<T>&, Var, const Tensor<T>&, const GraphTopology&,              \
                             const GraphTopology&, Similarity, Similarity);

BGNN_AD_INST(float)
BGNN_AD_INST(double)
#undef BGNN_AD_INST

}  // namespace ad
}  // namespace bgnn
