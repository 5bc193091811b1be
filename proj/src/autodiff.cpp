#include "omoe/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "omoe/errors.hpp"

namespace omoe::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
    return MatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

void require_rank2(const Var& a, const char* op) {
    if (a.shape().size() != 2)
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

Tape& same_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
    return a.tape();
}

void add_into(Tensor& dst, const Tensor& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename F>
Var unary_elementwise(Var a, F&& f, std::function<double(double x, double y)> dfdx) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = f(av[i]);
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, dfdx](Tape& tape, NodeId self) {
        if (!tape.requires_grad(ia)) return;
        const Tensor& g = tape.grad(self);
        const Tensor& x = tape.value(ia);
        const Tensor& y = tape.value(self);
        Tensor& ga = tape.grad_ref(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    });
}

}  // namespace

// ---- Var / GradientMap / Tape --------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& GradientMap::at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(id));
    return it->second;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.is_leaf = true;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<NodeId> parents, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                     [this](NodeId p) { return nodes_[p].requires_grad; });
    node.parents = std::move(parents);
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_ref(NodeId id) {
    Node& node = nodes_[id];
    if (!node.has_grad) {
        node.grad = Tensor(node.value.shape(), 0.0);
        node.has_grad = true;
    }
    return node.grad;
}

GradientMap Tape::backward(Var loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
    if (consumed_) throw ContractError("tape already consumed by a previous backward pass");
    if (loss.value().numel() != 1)
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    consumed_ = true;

    if (nodes_[loss.id()].requires_grad) {
        grad_ref(loss.id())[0] = 1.0;
        for (NodeId id = loss.id() + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (!node.has_grad || !node.backward) continue;
            node.backward(*this, id);
        }
    }

    GradientMap out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        Node& node = nodes_[id];
        if (!node.is_leaf || !node.requires_grad) continue;
        out.grads_.emplace(id, node.has_grad ? node.grad : Tensor(node.value.shape(), 0.0));
    }
    return out;
}

// ---- operations ------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& tape = same_tape(a, b);
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    Tensor out(Shape{m, n});
    as_matrix(out, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
    const NodeId ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, NodeId self) {
        auto g = as_matrix(t.grad(self), m, n);
        if (t.requires_grad(ia))
            as_matrix(t.grad_ref(ia), m, k).noalias() += g * as_matrix(t.value(ib), k, n).transpose();
        if (t.requires_grad(ib))
            as_matrix(t.grad_ref(ib), k, n).noalias() += as_matrix(t.value(ia), m, k).transpose() * g;
    });
}

Var add(Var a, Var b) {
    Tape& tape = same_tape(a, b);
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    add_into(out, b.value());
    const NodeId ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
        if (t.requires_grad(ia)) add_into(t.grad_ref(ia), t.grad(self));
        if (t.requires_grad(ib)) add_into(t.grad_ref(ib), t.grad(self));
    });
}

Var sub(Var a, Var b) {
    Tape& tape = same_tape(a, b);
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    const NodeId ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) add_into(t.grad_ref(ia), g);
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_ref(ib);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& tape = same_tape(a, b);
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    const NodeId ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_ref(ia);
            const Tensor& bv = t.value(ib);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_ref(ib);
            const Tensor& av = t.value(ia);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double factor) {
    Tensor out = a.value();
    for (double& v : out.data()) v *= factor;
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, factor](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_ref(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * factor;
    });
}

Var add_row(Var a, Var row) {
    Tape& tape = same_tape(a, row);
    const std::size_t n = a.value().cols(), m = a.value().rows();
    if (row.value().numel() != n)
        throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not broadcast over " +
                             shape_str(a.shape()));
    Tensor out = a.value();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += row.value()[c];
    const NodeId ia = a.id(), ir = row.id();
    return tape.record(std::move(out), {ia, ir}, [ia, ir, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) add_into(t.grad_ref(ia), g);
        if (t.requires_grad(ir)) {
            Tensor& gr = t.grad_ref(ir);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c];
        }
    });
}

Var mul_row(Var a, Var row) {
    Tape& tape = same_tape(a, row);
    const std::size_t n = a.value().cols(), m = a.value().rows();
    if (row.value().numel() != n)
        throw DimensionError("mul_row: row " + shape_str(row.shape()) + " does not broadcast over " +
                             shape_str(a.shape()));
    Tensor out = a.value();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= row.value()[c];
    const NodeId ia = a.id(), ir = row.id();
    return tape.record(std::move(out), {ia, ir}, [ia, ir, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_ref(ia);
            const Tensor& rv = t.value(ir);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * rv[c];
        }
        if (t.requires_grad(ir)) {
            Tensor& gr = t.grad_ref(ir);
            const Tensor& av = t.value(ia);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c] * av[r * n + c];
        }
    });
}

Var mul_col(Var a, Var col) {
    Tape& tape = same_tape(a, col);
    const std::size_t n = a.value().cols(), m = a.value().rows();
    if (col.value().numel() != m)
        throw DimensionError("mul_col: column " + shape_str(col.shape()) + " does not broadcast over " +
                             shape_str(a.shape()));
    Tensor out = a.value();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= col.value()[r];
    const NodeId ia = a.id(), ic = col.id();
    return tape.record(std::move(out), {ia, ic}, [ia, ic, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_ref(ia);
            const Tensor& cv = t.value(ic);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * cv[r];
        }
        if (t.requires_grad(ic)) {
            Tensor& gc = t.grad_ref(ic);
            const Tensor& av = t.value(ia);
            for (std::size_t r = 0; r < m; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < n; ++c) acc += g[r * n + c] * av[r * n + c];
                gc[r] += acc;
            }
        }
    });
}

Var silu(Var a) {
    return unary_elementwise(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var square(Var a) {
    return unary_elementwise(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
    const Tensor& av = a.value();
    double total = 0.0;
    for (double v : av.data()) total += v;
    const NodeId ia = a.id();
    return a.tape().record(Tensor::scalar(total), {ia}, [ia](Tape& t, NodeId self) {
        const double g = t.grad(self)[0];
        for (double& v : t.grad_ref(ia).data()) v += g;
    });
}

Var mean(Var a) {
    const std::size_t n = a.value().numel();
    if (n == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(Var a) {
    const Tensor& av = a.value();
    const std::size_t m = av.rows(), n = av.cols();
    if (m == 0) throw DimensionError("mean_rows of an empty tensor");
    Tensor out(Shape{n});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c] += av[r * n + c];
    for (double& v : out.data()) v /= static_cast<double>(m);
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_ref(ia);
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[c] * inv;
    });
}

void check_finite(const Tensor& x, const char* what) {
    for (double v : x.data())
        if (std::isnan(v)) throw NumericError(std::string(what) + ": NaN input");
}

Tensor softmax_rows(const Tensor& x) {
    check_finite(x, "softmax");
    Tensor out(x.shape());
    const std::size_t m = x.rows(), n = x.cols();
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = &x.data()[r * n];
        double* o = &out.data()[r * n];
        const double mx = *std::max_element(in, in + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            o[c] = std::exp(in[c] - mx);
            total += o[c];
        }
        for (std::size_t c = 0; c < n; ++c) o[c] /= total;
    }
    return out;
}

Var softmax(Var a) {
    Tensor out = softmax_rows(a.value());
    const std::size_t m = out.rows(), n = out.cols();
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& ga = t.grad_ref(ia);
        for (std::size_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
        }
    });
}

Var logsumexp(Var a) {
    const Tensor& av = a.value();
    check_finite(av, "logsumexp");
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out(Shape{m});
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = &av.data()[r * n];
        const double mx = *std::max_element(in, in + n);
        double total = 0.0;
        for (std::size_t c = 0; c < n; ++c) total += std::exp(in[c] - mx);
        out[r] = mx + std::log(total);
    }
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        const Tensor& lse = t.value(self);
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_ref(ia);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r] * std::exp(x[r * n + c] - lse[r]);
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& tape = same_tape(x, gamma);
    same_tape(x, beta);
    const Tensor& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    if (gamma.value().numel() != n || beta.value().numel() != n)
        throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
    Tensor out(xv.shape());
    std::vector<double> xhat(m * n), inv_std(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = &xv.data()[r * n];
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += in[c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (in[c] - mu) * inv_std[r];
            out[r * n + c] = xhat[r * n + c] * gamma.value()[c] + beta.value()[c];
        }
    }
    const NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
    return tape.record(std::move(out), {ix, ig, ib},
                       [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, NodeId self) {
                           const Tensor& g = t.grad(self);
                           if (t.requires_grad(ig)) {
                               Tensor& gg = t.grad_ref(ig);
                               for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
                           }
                           if (t.requires_grad(ib)) {
                               Tensor& gb = t.grad_ref(ib);
                               for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                           }
                           if (t.requires_grad(ix)) {
                               Tensor& gx = t.grad_ref(ix);
                               const Tensor& gamma_v = t.value(ig);
                               const double inv_n = 1.0 / static_cast<double>(n);
                               for (std::size_t r = 0; r < m; ++r) {
                                   double sum_d = 0.0, sum_dx = 0.0;
                                   for (std::size_t c = 0; c < n; ++c) {
                                       const double d = g[r * n + c] * gamma_v[c];
                                       sum_d += d;
                                       sum_dx += d * xhat[r * n + c];
                                   }
                                   for (std::size_t c = 0; c < n; ++c) {
                                       const double d = g[r * n + c] * gamma_v[c];
                                       gx[r * n + c] +=
                                           inv_std[r] * (d - inv_n * sum_d - xhat[r * n + c] * inv_n * sum_dx);
                                   }
                               }
                           }
                       });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
    const Tensor& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out(Shape{rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m)
            throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                                 shape_str(xv.shape()));
        std::copy_n(&xv.data()[rows[i] * n], n, &out.data()[i * n]);
    }
    const NodeId ix = x.id();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return x.tape().record(std::move(out), {ix}, [ix, n, idx = std::move(idx)](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_ref(ix);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < n; ++c) gx[idx[i] * n + c] += g[i * n + c];
    });
}

Var embedding(Var table, std::span<const int> ids) {
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0) throw DimensionError("embedding: negative token id");
        rows[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(table, rows);
}

Var scatter_rows(Var x, std::size_t num_rows, std::span<const std::size_t> rows) {
    const Tensor& xv = x.value();
    const std::size_t n = xv.cols();
    if (xv.rows() != rows.size())
        throw DimensionError("scatter_rows: " + std::to_string(rows.size()) + " targets for " +
                             shape_str(xv.shape()));
    Tensor out(Shape{num_rows, n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= num_rows) throw DimensionError("scatter_rows: target row out of range");
        for (std::size_t c = 0; c < n; ++c) out[rows[i] * n + c] += xv[i * n + c];
    }
    const NodeId ix = x.id();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return x.tape().record(std::move(out), {ix}, [ix, n, idx = std::move(idx)](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_ref(ix);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < n; ++c) gx[i * n + c] += g[idx[i] * n + c];
    });
}

Var gather_elements(Var x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
    if (rows.size() != cols.size()) throw DimensionError("gather_elements: index lists differ in length");
    const Tensor& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out(Shape{rows.size()});
    std::vector<std::size_t> flat(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m || cols[i] >= n) throw DimensionError("gather_elements: index out of range");
        flat[i] = rows[i] * n + cols[i];
        out[i] = xv[flat[i]];
    }
    const NodeId ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, flat = std::move(flat)](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_ref(ix);
        for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += g[i];
    });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia},
                           [ia](Tape& t, NodeId self) { add_into(t.grad_ref(ia), t.grad(self)); });
}

Var transpose(Var a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m});
    as_matrix(out, n, m) = as_matrix(a.value(), m, n).transpose();
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& t, NodeId self) {
        as_matrix(t.grad_ref(ia), m, n) += as_matrix(t.grad(self), n, m).transpose();
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    require_rank2(a, "slice_rows");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (begin + count > m) throw DimensionError("slice_rows: range exceeds " + shape_str(a.shape()));
    Tensor out(Shape{count, n});
    std::copy_n(&a.value().data()[begin * n], count * n, out.data().data());
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, begin, count, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_ref(ia);
        for (std::size_t i = 0; i < count * n; ++i) ga[begin * n + i] += g[i];
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    require_rank2(a, "slice_cols");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    if (begin + count > n) throw DimensionError("slice_cols: range exceeds " + shape_str(a.shape()));
    Tensor out(Shape{m, count});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < count; ++c) out[r * count + c] = a.value()[r * n + begin + c];
    const NodeId ia = a.id();
    return a.tape().record(std::move(out), {ia}, [ia, begin, count, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad_ref(ia);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < count; ++c) ga[r * n + begin + c] += g[r * count + c];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t n = parts[0].value().cols();
    std::size_t m = 0;
    std::vector<NodeId> ids;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.shape()[1] != n) throw DimensionError("concat_rows: column counts differ");
        same_tape(parts[0], p);
        ids.push_back(p.id());
        offsets.push_back(m);
        m += p.shape()[0];
    }
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < parts.size(); ++i)
        std::copy(parts[i].value().data().begin(), parts[i].value().data().end(), &out.data()[offsets[i] * n]);
    return parts[0].tape().record(std::move(out), ids, [ids, offsets, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!t.requires_grad(ids[i])) continue;
            Tensor& gp = t.grad_ref(ids[i]);
            for (std::size_t j = 0; j < gp.numel(); ++j) gp[j] += g[offsets[i] * n + j];
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0].value().rows();
    std::size_t n = 0;
    std::vector<NodeId> ids;
    std::vector<std::size_t> offsets, widths;
    for (const Var& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
        same_tape(parts[0], p);
        ids.push_back(p.id());
        offsets.push_back(n);
        widths.push_back(p.shape()[1]);
        n += p.shape()[1];
    }
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < parts.size(); ++i)
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < widths[i]; ++c)
                out[r * n + offsets[i] + c] = parts[i].value()[r * widths[i] + c];
    return parts[0].tape().record(std::move(out), ids, [ids, offsets, widths, m, n](Tape& t, NodeId self) {
        const Tensor& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!t.requires_grad(ids[i])) continue;
            Tensor& gp = t.grad_ref(ids[i]);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < widths[i]; ++c) gp[r * widths[i] + c] += g[r * n + offsets[i] + c];
        }
    });
}

Var cross_entropy(Var logits, std::span<const int> labels, int ignore_label) {
    const Tensor& lv = logits.value();
    const std::size_t m = lv.rows(), v = lv.cols();
    if (labels.size() != m)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             shape_str(lv.shape()));
    check_finite(lv, "cross_entropy");
    std::size_t counted = 0;
    for (int label : labels) {
        if (label == ignore_label) continue;
        if (label < 0 || static_cast<std::size_t>(label) >= v)
            throw DimensionError("cross_entropy: label " + std::to_string(label) + " outside vocabulary");
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: every position is ignored");

    Tensor probs(Shape{m, v});
    double total = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        if (labels[r] == ignore_label) continue;
        const double* in = &lv.data()[r * v];
        const double mx = *std::max_element(in, in + v);
        double z = 0.0;
        for (std::size_t c = 0; c < v; ++c) z += std::exp(in[c] - mx);
        const double lse = mx + std::log(z);
        total += lse - in[labels[r]];
        for (std::size_t c = 0; c < v; ++c) probs[r * v + c] = std::exp(in[c] - lse);
    }
    const double inv = 1.0 / static_cast<double>(counted);
    const NodeId il = logits.id();
    std::vector<int> lab(labels.begin(), labels.end());
    return logits.tape().record(
        Tensor::scalar(total * inv), {il},
        [il, m, v, inv, ignore_label, lab = std::move(lab), probs = std::move(probs)](Tape& t, NodeId self) {
            const double g = t.grad(self)[0] * inv;
            Tensor& gl = t.grad_ref(il);
            for (std::size_t r = 0; r < m; ++r) {
                if (lab[r] == ignore_label) continue;
                for (std::size_t c = 0; c < v; ++c) gl[r * v + c] += g * probs[r * v + c];
                gl[r * v + static_cast<std::size_t>(lab[r])] -= g;
            }
        });
}

Var rope(Var x, std::span<const std::size_t> positions, std::size_t heads, std::size_t head_dim, double base) {
    const Tensor& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    if (head_dim % 2 != 0) throw ConfigError("rope: head dimension must be even, got " + std::to_string(head_dim));
    if (heads * head_dim != n) throw DimensionError("rope: heads x head_dim does not match " + shape_str(xv.shape()));
    if (positions.size() != m) throw DimensionError("rope: one position per row required");
    const std::size_t half = head_dim / 2;
    std::vector<double> cos_t(m * half), sin_t(m * half);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[r]) * freq;
            cos_t[r * half + i] = std::cos(angle);
            sin_t[r * half + i] = std::sin(angle);
        }
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t p = r * n + h * head_dim + 2 * i;
                const double c = cos_t[r * half + i], s = sin_t[r * half + i];
                out[p] = xv[p] * c - xv[p + 1] * s;
                out[p + 1] = xv[p] * s + xv[p + 1] * c;
            }
    const NodeId ix = x.id();
    return x.tape().record(std::move(out), {ix},
                           [ix, m, n, heads, head_dim, half, cos_t = std::move(cos_t),
                            sin_t = std::move(sin_t)](Tape& t, NodeId self) {
                               const Tensor& g = t.grad(self);
                               Tensor& gx = t.grad_ref(ix);
                               for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t h = 0; h < heads; ++h)
                                       for (std::size_t i = 0; i < half; ++i) {
                                           const std::size_t p = r * n + h * head_dim + 2 * i;
                                           const double c = cos_t[r * half + i], s = sin_t[r * half + i];
                                           gx[p] += g[p] * c + g[p + 1] * s;
                                           gx[p + 1] += -g[p] * s + g[p + 1] * c;
                                       }
                           });
}

Var causal_attention(Var q, Var k, Var v, const AttentionLayout& layout) {
    Tape& tape = same_tape(q, k);
    same_tape(q, v);
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t S = layout.num_seqs, T = layout.seq_len, H = layout.heads, D = layout.head_dim;
    const std::size_t width = H * D;
    if (q.value().rows() != S * T || q.value().cols() != width)
        throw DimensionError("causal_attention: layout does not match " + shape_str(q.shape()));
    if (!layout.visible_prefix.empty() && layout.visible_prefix.size() != S)
        throw DimensionError("causal_attention: one visible prefix length per sequence required");

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(D));
    std::vector<std::size_t> prefix(S, 0);
    if (!layout.visible_prefix.empty()) prefix = layout.visible_prefix;
    auto visible = [&prefix](std::size_t s, std::size_t i, std::size_t j) {
        return j <= i || (i < prefix[s] && j < prefix[s]);
    };

    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    Tensor out(Shape{S * T, width});
    std::vector<double> probs(S * H * T * T, 0.0);
    std::vector<double> row(T);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < T; ++i) {
                const double* qi = &qv.data()[(s * T + i) * width + h * D];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < T; ++j) {
                    if (!visible(s, i, j)) continue;
                    const double* kj = &kv.data()[(s * T + j) * width + h * D];
                    double dot = 0.0;
                    for (std::size_t d = 0; d < D; ++d) dot += qi[d] * kj[d];
                    row[j] = dot * inv_sqrt;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                double* p = &probs[((s * H + h) * T + i) * T];
                for (std::size_t j = 0; j < T; ++j) {
                    if (!visible(s, i, j)) continue;
                    p[j] = std::exp(row[j] - mx);
                    z += p[j];
                }
                double* oi = &out.data()[(s * T + i) * width + h * D];
                for (std::size_t j = 0; j < T; ++j) {
                    if (!visible(s, i, j)) continue;
                    p[j] /= z;
                    const double* vj = &vv.data()[(s * T + j) * width + h * D];
                    for (std::size_t d = 0; d < D; ++d) oi[d] += p[j] * vj[d];
                }
            }

    const NodeId iq = q.id(), ik = k.id(), iv = v.id();
    return tape.record(
        std::move(out), {iq, ik, iv},
        [iq, ik, iv, S, T, H, D, width, inv_sqrt, probs = std::move(probs)](Tape& t, NodeId self) {
            const Tensor& g = t.grad(self);
            const Tensor& qv = t.value(iq);
            const Tensor& kv = t.value(ik);
            const Tensor& vv = t.value(iv);
            // Scratch buffers stand in for inputs that take no gradient.
            Tensor scratch_q, scratch_k, scratch_v;
            auto target = [&t](NodeId id, Tensor& scratch) -> Tensor& {
                if (t.requires_grad(id)) return t.grad_ref(id);
                scratch = Tensor(t.value(id).shape());
                return scratch;
            };
            Tensor& gq = target(iq, scratch_q);
            Tensor& gk = target(ik, scratch_k);
            Tensor& gv = target(iv, scratch_v);
            std::vector<double> dp(T);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t i = 0; i < T; ++i) {
                        const double* p = &probs[((s * H + h) * T + i) * T];
                        const double* gi = &g.data()[(s * T + i) * width + h * D];
                        double weighted = 0.0;
                        for (std::size_t j = 0; j < T; ++j) {
                            if (p[j] == 0.0) {
                                dp[j] = 0.0;
                                continue;
                            }
                            const double* vj = &vv.data()[(s * T + j) * width + h * D];
                            double* gvj = &gv.data()[(s * T + j) * width + h * D];
                            double dot = 0.0;
                            for (std::size_t d = 0; d < D; ++d) {
                                dot += gi[d] * vj[d];
                                gvj[d] += p[j] * gi[d];
                            }
                            dp[j] = dot;
                            weighted += p[j] * dot;
                        }
                        const double* qi = &qv.data()[(s * T + i) * width + h * D];
                        double* gqi = &gq.data()[(s * T + i) * width + h * D];
                        for (std::size_t j = 0; j < T; ++j) {
                            if (p[j] == 0.0) continue;
                            const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                            const double* kj = &kv.data()[(s * T + j) * width + h * D];
                            double* gkj = &gk.data()[(s * T + j) * width + h * D];
                            for (std::size_t d = 0; d < D; ++d) {
                                gqi[d] += ds * kj[d];
                                gkj[d] += ds * qi[d];
                            }
                        }
                    }
        });
}

std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
    if (k > row.size())
        throw ConfigError("top-k: k=" + std::to_string(k) + " exceeds " + std::to_string(row.size()) + " entries");
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    idx.resize(k);
    return idx;
}

}  // namespace omoe::ad
