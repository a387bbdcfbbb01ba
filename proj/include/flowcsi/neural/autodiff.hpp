// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tape-based reverse-mode differentiation over small dense tensors.
//
// Every tensor is an Eigen matrix of shape (channels, batch * length): column
// b * length + l holds the channel vector of sample b at position l. Dense
// feature vectors are the special case length == 1. Ops append a node to the
// tape with its value and, when any input needs a gradient, a closure that
// pushes the node's gradient back to its inputs.

#ifndef FLOWCSI_NEURAL_AUTODIFF_HPP
#define FLOWCSI_NEURAL_AUTODIFF_HPP

#include "flowcsi/common.hpp"
#include "flowcsi/neural/param_store.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace flowcsi::nn {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const RMat& value() const;
    Index batch() const;
    Index length() const;
    Index channels() const { return value().rows(); }
};

class Tape {
public:
    struct Node {
        RMat value;
        RMat grad;
        Index batch = 1;
        Index length = 1;
        std::string op;
        Index param_index = -1;
        bool requires_grad = false;
        std::function<void(Tape&, int)> backward;
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Input data. Set requires_grad to differentiate with respect to it.
    Var input(RMat value, Index batch, Index length, bool requires_grad = false) {
        if (value.cols() != batch * length) throw DimensionMismatch("input: cols != batch * length");
        return push(std::move(value), batch, length, "input", requires_grad && grad_enabled_);
    }

    Var scalar(double v, bool requires_grad = false) {
        RMat m(1, 1);
        m(0, 0) = v;
        return input(std::move(m), 1, 1, requires_grad);
    }

    Var param(const ParamStore& store, Index idx) {
        const RMat& v = store.value(idx);
        Var out = push(v, v.cols(), 1, "param:" + store.name(idx), grad_enabled_);
        nodes_[static_cast<std::size_t>(out.id)].param_index = idx;
        return out;
    }

    Var param(const ParamStore& store, const std::string& name) { return param(store, store.index_of(name)); }

    Var push(RMat value, Index batch, Index length, std::string op, bool requires_grad,
             std::function<void(Tape&, int)> backward = {}) {
        if (!value.allFinite()) {
            throw NonFiniteError("non-finite value produced by node #" + std::to_string(nodes_.size()) + " (" + op +
                                 ")");
        }
        Node n;
        n.value = std::move(value);
        n.batch = batch;
        n.length = length;
        n.op = std::move(op);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size() - 1)};
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    bool needs_grad(const Var& v) const { return node(v.id).requires_grad; }

    void accumulate(int id, const RMat& g) {
        Node& n = node(id);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    template <class Expr>
    void accumulate_expr(int id, const Expr& g) {
        Node& n = node(id);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards.
    void backward(const Var& loss) {
        const Node& l = node(loss.id);
        if (l.value.size() != 1) throw DimensionMismatch("backward needs a scalar loss");
        node(loss.id).grad = RMat::Ones(1, 1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, id);
            if (!node(id).grad.allFinite())
                throw NonFiniteError("non-finite gradient at node #" + std::to_string(id) + " (" + node(id).op + ")");
        }
    }

    const RMat& grad(const Var& v) const { return node(v.id).grad; }

    RMat grad_or_zero(const Var& v) const {
        const Node& n = node(v.id);
        if (n.grad.size() == 0) return RMat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    // Adds parameter gradients from this tape into `out`.
    void collect_param_grads(Gradients& out) const {
        for (const Node& n : nodes_) {
            if (n.param_index < 0 || n.grad.size() == 0) continue;
            out[static_cast<std::size_t>(n.param_index)] += n.grad;
        }
    }

    std::size_t size() const { return nodes_.size(); }
    bool grad_enabled() const { return grad_enabled_; }

private:
    bool grad_enabled_ = true;
    std::vector<Node> nodes_;
};

inline const RMat& Var::value() const { return tape->node(id).value; }
inline Index Var::batch() const { return tape->node(id).batch; }
inline Index Var::length() const { return tape->node(id).length; }

namespace detail {

inline bool any_grad(std::initializer_list<Var> vs) {
    for (const Var& v : vs)
        if (v.tape->needs_grad(v)) return true;
    return false;
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols())
        throw DimensionMismatch(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
    detail::same_shape(a, b, "add");
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return t.push(a.value() + b.value(), a.batch(), a.length(), "add", detail::any_grad({a, b}),
                  [ia, ib](Tape& tp, int self) {
                      const RMat g = tp.node(self).grad;
                      tp.accumulate(ia, g);
                      tp.accumulate(ib, g);
                  });
}

inline Var sub(Var a, Var b) {
    detail::same_shape(a, b, "sub");
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return t.push(a.value() - b.value(), a.batch(), a.length(), "sub", detail::any_grad({a, b}),
                  [ia, ib](Tape& tp, int self) {
                      const RMat g = tp.node(self).grad;
                      tp.accumulate(ia, g);
                      tp.accumulate_expr(ib, -g);
                  });
}

inline Var mul(Var a, Var b) {
    detail::same_shape(a, b, "mul");
    Tape& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return t.push(a.value().cwiseProduct(b.value()), a.batch(), a.length(), "mul", detail::any_grad({a, b}),
                  [ia, ib](Tape& tp, int self) {
                      const RMat g = tp.node(self).grad;
                      tp.accumulate_expr(ia, g.cwiseProduct(tp.node(ib).value));
                      tp.accumulate_expr(ib, g.cwiseProduct(tp.node(ia).value));
                  });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    const int ia = a.id;
    return t.push(a.value() * s, a.batch(), a.length(), "scale", detail::any_grad({a}),
                  [ia, s](Tape& tp, int self) { tp.accumulate_expr(ia, tp.node(self).grad * s); });
}

inline Var square(Var a) { return mul(a, a); }

inline Var silu(Var a) {
    Tape& t = *a.tape;
    const int ia = a.id;
    const RMat sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    RMat y = a.value().cwiseProduct(sig);
    return t.push(std::move(y), a.batch(), a.length(), "silu", detail::any_grad({a}),
                  [ia, sig](Tape& tp, int self) {
                      const auto& x = tp.node(ia).value.array();
                      const auto& s = sig.array();
                      // d/dx [x sigma(x)] = sigma + x sigma (1 - sigma)
                      RMat d = (s + x * s * (1.0 - s)).matrix();
                      tp.accumulate_expr(ia, tp.node(self).grad.cwiseProduct(d));
                  });
}

inline Var tanh(Var a) {
    Tape& t = *a.tape;
    const int ia = a.id;
    RMat y = a.value().array().tanh().matrix();
    return t.push(std::move(y), a.batch(), a.length(), "tanh", detail::any_grad({a}),
                  [ia](Tape& tp, int self) {
                      const RMat& yv = tp.node(self).value;
                      RMat d = (1.0 - yv.array().square()).matrix();
                      tp.accumulate_expr(ia, tp.node(self).grad.cwiseProduct(d));
                  });
}

// ---- reductions and losses ----

inline Var sum(Var a) {
    Tape& t = *a.tape;
    const int ia = a.id;
    RMat v(1, 1);
    v(0, 0) = a.value().sum();
    return t.push(std::move(v), 1, 1, "sum", detail::any_grad({a}), [ia](Tape& tp, int self) {
        const double g = tp.node(self).grad(0, 0);
        const RMat& x = tp.node(ia).value;
        tp.accumulate_expr(ia, RMat::Constant(x.rows(), x.cols(), g));
    });
}

// Sum of squared entries divided by the batch size, i.e. the batch mean of
// per-sample squared Euclidean norms.
inline Var mean_sample_sq_norm(Var a) {
    Tape& t = *a.tape;
    const int ia = a.id;
    const double inv_b = 1.0 / static_cast<double>(a.batch());
    RMat v(1, 1);
    v(0, 0) = a.value().squaredNorm() * inv_b;
    return t.push(std::move(v), 1, 1, "mean_sample_sq_norm", detail::any_grad({a}), [ia, inv_b](Tape& tp, int self) {
        const double g = tp.node(self).grad(0, 0);
        tp.accumulate_expr(ia, tp.node(ia).value * (2.0 * inv_b * g));
    });
}

inline Var mse_loss(Var pred, Var target) { return mean_sample_sq_norm(sub(pred, target)); }

// Batch mean of 1 - |h^H p|^2 / (||h||^2 ||p||^2) for dense stacked-real
// columns [Re; Im] (length == 1). Gradient flows to `pred` only.
inline Var chordal_loss(Var pred, Var target) {
    detail::same_shape(pred, target, "chordal_loss");
    if (pred.length() != 1 || pred.value().rows() % 2 != 0)
        throw DimensionMismatch("chordal_loss expects dense stacked-real columns");
    Tape& t = *pred.tape;
    const int ip = pred.id;
    const Index n = pred.value().rows() / 2;
    const Index nb = pred.value().cols();
    const RMat& p = pred.value();
    const RMat& h = target.value();
    RMat grad_p(p.rows(), p.cols());
    double total = 0.0;
    for (Index b = 0; b < nb; ++b) {
        cplx s(0.0, 0.0);
        double pp = 0.0, hh = 0.0;
        for (Index j = 0; j < n; ++j) {
            const cplx hj(h(j, b), h(n + j, b));
            const cplx pj(p(j, b), p(n + j, b));
            s += std::conj(hj) * pj;
            pp += std::norm(pj);
            hh += std::norm(hj);
        }
        if (pp <= 0.0 || hh <= 0.0) throw NonFiniteError("chordal_loss: zero-norm vector");
        const double a = std::norm(s);
        total += 1.0 - a / (hh * pp);
        // d/dp of a / (hh pp), written as combined complex gradient (d/dRe + i d/dIm).
        for (Index j = 0; j < n; ++j) {
            const cplx hj(h(j, b), h(n + j, b));
            const cplx pj(p(j, b), p(n + j, b));
            const cplx gf = (2.0 * s * hj) / (hh * pp) - (a * 2.0 * pj) / (hh * pp * pp);
            grad_p(j, b) = -gf.real();
            grad_p(n + j, b) = -gf.imag();
        }
    }
    const double inv_b = 1.0 / static_cast<double>(nb);
    RMat v(1, 1);
    v(0, 0) = total * inv_b;
    grad_p *= inv_b;
    return t.push(std::move(v), 1, 1, "chordal_loss", detail::any_grad({pred}),
                  [ip, grad_p](Tape& tp, int self) { tp.accumulate_expr(ip, grad_p * tp.node(self).grad(0, 0)); });
}

// ---- linear maps ----

// y = W x + b, W: (out, in), b: (out, 1). Applied to every column.
inline Var linear(Var x, Var w, Var bias) {
    const RMat& wv = w.value();
    if (wv.cols() != x.value().rows()) throw DimensionMismatch("linear: weight/input mismatch");
    if (bias.value().rows() != wv.rows() || bias.value().cols() != 1)
        throw DimensionMismatch("linear: bias shape");
    Tape& t = *x.tape;
    RMat y(wv.rows(), x.value().cols());
    y.noalias() = wv * x.value();
    y.colwise() += bias.value().col(0);
    const int ix = x.id, iw = w.id, ib = bias.id;
    return t.push(std::move(y), x.batch(), x.length(), "linear", detail::any_grad({x, w, bias}),
                  [ix, iw, ib](Tape& tp, int self) {
                      const RMat& g = tp.node(self).grad;
                      if (tp.node(iw).requires_grad) {
                          RMat gw(g.rows(), tp.node(ix).value.rows());
                          gw.noalias() = g * tp.node(ix).value.transpose();
                          tp.accumulate(iw, gw);
                      }
                      if (tp.node(ib).requires_grad) tp.accumulate_expr(ib, g.rowwise().sum());
                      if (tp.node(ix).requires_grad) {
                          RMat gx(tp.node(iw).value.cols(), g.cols());
                          gx.noalias() = tp.node(iw).value.transpose() * g;
                          tp.accumulate(ix, gx);
                      }
                  });
}

struct ConvGeometry {
    Index kernel = 3;
    Index stride = 1;
    Index padding = 1;

    Index out_length(Index in_length) const { return (in_length + 2 * padding - kernel) / stride + 1; }
};

// 1D convolution along the length axis with zero padding.
// Weight layout: (c_out, kernel * c_in), column j * c_in + ci holds tap j of input channel ci.
inline Var conv1d(Var x, Var w, Var bias, ConvGeometry geo) {
    const Index cin = x.value().rows();
    const Index nb = x.batch();
    const Index len = x.length();
    const Index k = geo.kernel;
    const Index lout = geo.out_length(len);
    const RMat& wv = w.value();
    if (wv.cols() != k * cin) throw DimensionMismatch("conv1d: weight/input channel mismatch");
    if (lout < 1) throw DimensionMismatch("conv1d: output length < 1");
    if (bias.value().rows() != wv.rows()) throw DimensionMismatch("conv1d: bias shape");

    RMat cols = RMat::Zero(k * cin, nb * lout);
    const RMat& xv = x.value();
    for (Index b = 0; b < nb; ++b)
        for (Index lo = 0; lo < lout; ++lo)
            for (Index j = 0; j < k; ++j) {
                const Index li = lo * geo.stride + j - geo.padding;
                if (li < 0 || li >= len) continue;
                cols.col(b * lout + lo).segment(j * cin, cin) = xv.col(b * len + li);
            }
    RMat y(wv.rows(), nb * lout);
    y.noalias() = wv * cols;
    y.colwise() += bias.value().col(0);

    Tape& t = *x.tape;
    const int ix = x.id, iw = w.id, ib = bias.id;
    const bool need = detail::any_grad({x, w, bias});
    return t.push(std::move(y), nb, lout, "conv1d", need,
                  [ix, iw, ib, cols = std::move(cols), geo, cin, nb, len, lout, k](Tape& tp, int self) {
                      const RMat& g = tp.node(self).grad;
                      if (tp.node(iw).requires_grad) {
                          RMat gw(g.rows(), cols.rows());
                          gw.noalias() = g * cols.transpose();
                          tp.accumulate(iw, gw);
                      }
                      if (tp.node(ib).requires_grad) tp.accumulate_expr(ib, g.rowwise().sum());
                      if (tp.node(ix).requires_grad) {
                          RMat gcols(cols.rows(), g.cols());
                          gcols.noalias() = tp.node(iw).value.transpose() * g;
                          RMat gx = RMat::Zero(cin, nb * len);
                          for (Index b = 0; b < nb; ++b)
                              for (Index lo = 0; lo < lout; ++lo)
                                  for (Index j = 0; j < k; ++j) {
                                      const Index li = lo * geo.stride + j - geo.padding;
                                      if (li < 0 || li >= len) continue;
                                      gx.col(b * len + li) += gcols.col(b * lout + lo).segment(j * cin, cin);
                                  }
                          tp.accumulate(ix, gx);
                      }
                  });
}

// ---- normalisation and reshaping ----

// Group normalisation over (channels in group) x length for each sample,
// followed by a per-channel affine map.
inline Var group_norm(Var x, Var gamma, Var beta, Index groups, double eps = 1e-5) {
    const RMat& xv = x.value();
    const Index c = xv.rows();
    if (groups < 1 || c % groups != 0) throw DimensionMismatch("group_norm: channels not divisible by groups");
    if (gamma.value().rows() != c || beta.value().rows() != c) throw DimensionMismatch("group_norm: affine shape");
    const Index cpg = c / groups;
    const Index nb = x.batch();
    const Index len = x.length();
    const double count = static_cast<double>(cpg * len);

    RMat xhat(c, xv.cols());
    RMat inv_std(groups, nb);
    for (Index b = 0; b < nb; ++b)
        for (Index g = 0; g < groups; ++g) {
            auto blk = xv.block(g * cpg, b * len, cpg, len);
            const double mean = blk.sum() / count;
            const double var = (blk.array() - mean).square().sum() / count;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std(g, b) = is;
            xhat.block(g * cpg, b * len, cpg, len) = ((blk.array() - mean) * is).matrix();
        }
    RMat y = xhat;
    for (Index r = 0; r < c; ++r) y.row(r) = (y.row(r).array() * gamma.value()(r, 0) + beta.value()(r, 0)).matrix();

    Tape& t = *x.tape;
    const int ix = x.id, ig = gamma.id, ibt = beta.id;
    return t.push(std::move(y), nb, len, "group_norm", detail::any_grad({x, gamma, beta}),
                  [ix, ig, ibt, xhat, inv_std, groups, cpg, nb, len, count](Tape& tp, int self) {
                      const RMat& gy = tp.node(self).grad;
                      if (tp.node(ig).requires_grad)
                          tp.accumulate_expr(ig, gy.cwiseProduct(xhat).rowwise().sum());
                      if (tp.node(ibt).requires_grad) tp.accumulate_expr(ibt, gy.rowwise().sum());
                      if (!tp.node(ix).requires_grad) return;
                      const RMat& gam = tp.node(ig).value;
                      RMat dxhat = gy;
                      for (Index r = 0; r < dxhat.rows(); ++r) dxhat.row(r) *= gam(r, 0);
                      RMat gx(dxhat.rows(), dxhat.cols());
                      for (Index b = 0; b < nb; ++b)
                          for (Index g = 0; g < groups; ++g) {
                              auto d = dxhat.block(g * cpg, b * len, cpg, len).array();
                              auto xh = xhat.block(g * cpg, b * len, cpg, len).array();
                              const double sd = d.sum();
                              const double sdx = (d * xh).sum();
                              gx.block(g * cpg, b * len, cpg, len) =
                                  ((count * d - sd - xh * sdx) * (inv_std(g, b) / count)).matrix();
                          }
                      tp.accumulate(ix, gx);
                  });
}

// x: (C, B*L), e: (C, B). Adds e[:, b] at every position of sample b.
inline Var add_per_sample(Var x, Var e) {
    const Index nb = x.batch();
    const Index len = x.length();
    if (e.value().rows() != x.value().rows() || e.value().cols() != nb)
        throw DimensionMismatch("add_per_sample: embedding shape");
    RMat y = x.value();
    for (Index b = 0; b < nb; ++b) y.middleCols(b * len, len).colwise() += e.value().col(b);
    Tape& t = *x.tape;
    const int ix = x.id, ie = e.id;
    return t.push(std::move(y), nb, len, "add_per_sample", detail::any_grad({x, e}),
                  [ix, ie, nb, len](Tape& tp, int self) {
                      const RMat& g = tp.node(self).grad;
                      tp.accumulate(ix, g);
                      if (tp.node(ie).requires_grad) {
                          RMat ge(g.rows(), nb);
                          for (Index b = 0; b < nb; ++b) ge.col(b) = g.middleCols(b * len, len).rowwise().sum();
                          tp.accumulate(ie, ge);
                      }
                  });
}

// Concatenation along the channel axis.
inline Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionMismatch("concat: no inputs");
    const Index cols = parts.front().value().cols();
    Index rows = 0;
    bool need = false;
    for (const Var& p : parts) {
        if (p.value().cols() != cols || p.length() != parts.front().length())
            throw DimensionMismatch("concat: column mismatch");
        rows += p.value().rows();
        need = need || p.tape->needs_grad(p);
    }
    RMat y(rows, cols);
    std::vector<std::pair<int, Index>> spans;
    Index off = 0;
    for (const Var& p : parts) {
        y.middleRows(off, p.value().rows()) = p.value();
        spans.emplace_back(p.id, off);
        off += p.value().rows();
    }
    Tape& t = *parts.front().tape;
    return t.push(std::move(y), parts.front().batch(), parts.front().length(), "concat", need,
                  [spans](Tape& tp, int self) {
                      const RMat& g = tp.node(self).grad;
                      for (const auto& [id, offset] : spans)
                          tp.accumulate_expr(id, g.middleRows(offset, tp.node(id).value.rows()));
                  });
}

// Nearest-neighbour x2 upsampling along length.
inline Var upsample2(Var x) {
    const Index nb = x.batch();
    const Index len = x.length();
    const RMat& xv = x.value();
    RMat y(xv.rows(), nb * len * 2);
    for (Index b = 0; b < nb; ++b)
        for (Index l = 0; l < len; ++l) {
            y.col(b * 2 * len + 2 * l) = xv.col(b * len + l);
            y.col(b * 2 * len + 2 * l + 1) = xv.col(b * len + l);
        }
    Tape& t = *x.tape;
    const int ix = x.id;
    return t.push(std::move(y), nb, 2 * len, "upsample2", detail::any_grad({x}), [ix, nb, len](Tape& tp, int self) {
        const RMat& g = tp.node(self).grad;
        RMat gx(g.rows(), nb * len);
        for (Index b = 0; b < nb; ++b)
            for (Index l = 0; l < len; ++l)
                gx.col(b * len + l) = g.col(b * 2 * len + 2 * l) + g.col(b * 2 * len + 2 * l + 1);
        tp.accumulate(ix, gx);
    });
}

// Average pooling by 2 along length.
inline Var avg_pool2(Var x) {
    const Index nb = x.batch();
    const Index len = x.length();
    if (len % 2 != 0) throw DimensionMismatch("avg_pool2: odd length");
    const Index half = len / 2;
    const RMat& xv = x.value();
    RMat y(xv.rows(), nb * half);
    for (Index b = 0; b < nb; ++b)
        for (Index l = 0; l < half; ++l) y.col(b * half + l) = 0.5 * (xv.col(b * len + 2 * l) + xv.col(b * len + 2 * l + 1));
    Tape& t = *x.tape;
    const int ix = x.id;
    return t.push(std::move(y), nb, half, "avg_pool2", detail::any_grad({x}), [ix, nb, len, half](Tape& tp, int self) {
        const RMat& g = tp.node(self).grad;
        RMat gx(g.rows(), nb * len);
        for (Index b = 0; b < nb; ++b)
            for (Index l = 0; l < half; ++l) {
                gx.col(b * len + 2 * l) = 0.5 * g.col(b * half + l);
                gx.col(b * len + 2 * l + 1) = 0.5 * g.col(b * half + l);
            }
        tp.accumulate(ix, gx);
    });
}

// Forward applies `forward_value` (e.g. a quantiser); backward passes the
// gradient through unchanged where the input lies in [lo, hi] and blocks it
// elsewhere (straight-through estimator).
inline Var straight_through(Var x, RMat forward_value, double lo = -1.0, double hi = 1.0) {
    if (forward_value.rows() != x.value().rows() || forward_value.cols() != x.value().cols())
        throw DimensionMismatch("straight_through: shape");
    Tape& t = *x.tape;
    const int ix = x.id;
    return t.push(std::move(forward_value), x.batch(), x.length(), "straight_through", detail::any_grad({x}),
                  [ix, lo, hi](Tape& tp, int self) {
                      const RMat& xv = tp.node(ix).value;
                      const RMat mask = ((xv.array() >= lo) && (xv.array() <= hi)).cast<double>().matrix();
                      tp.accumulate_expr(ix, tp.node(self).grad.cwiseProduct(mask));
                  });
}

// Learned-level quantiser output: out(l, b) = levels(l, idx(l, b)).
// Gradient reaches x through the straight-through path and the selected level
// directly.
inline Var select_levels(Var x, Var levels, const Eigen::MatrixXi& idx) {
    const RMat& lv = levels.value();
    const RMat& xv = x.value();
    if (idx.rows() != xv.rows() || idx.cols() != xv.cols() || lv.rows() != xv.rows())
        throw DimensionMismatch("select_levels: shape");
    RMat y(xv.rows(), xv.cols());
    for (Index c = 0; c < xv.cols(); ++c)
        for (Index r = 0; r < xv.rows(); ++r) y(r, c) = lv(r, idx(r, c));
    Tape& t = *x.tape;
    const int ix = x.id, il = levels.id;
    return t.push(std::move(y), x.batch(), x.length(), "select_levels", detail::any_grad({x, levels}),
                  [ix, il, idx](Tape& tp, int self) {
                      const RMat& g = tp.node(self).grad;
                      if (tp.node(ix).requires_grad) {
                          const RMat& xv2 = tp.node(ix).value;
                          const RMat mask =
                              ((xv2.array() >= -1.0) && (xv2.array() <= 1.0)).cast<double>().matrix();
                          tp.accumulate_expr(ix, g.cwiseProduct(mask));
                      }
                      if (tp.node(il).requires_grad) {
                          const RMat& lv2 = tp.node(il).value;
                          RMat gl = RMat::Zero(lv2.rows(), lv2.cols());
                          for (Index c = 0; c < g.cols(); ++c)
                              for (Index r = 0; r < g.rows(); ++r) gl(r, idx(r, c)) += g(r, c);
                          tp.accumulate(il, gl);
                      }
                  });
}

}  // namespace flowcsi::nn

#endif  // FLOWCSI_NEURAL_AUTODIFF_HPP
