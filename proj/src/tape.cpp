#include "sda/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace sda {

const Matrix& Var::value() const {
    if (!tape_) throw std::logic_error("Var: unbound handle");
    return tape_->value(*this);
}

Var Tape::push(Matrix value, std::function<void(Tape&, int)> backprop) {
    if (!value.all_finite()) throw std::domain_error("Tape: non-finite node value");
    Node n;
    n.grad = Matrix::zeros_like(value);
    n.value = std::move(value);
    if (record_) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_tape(Var v) const {
    if (v.tape_ != this) throw std::logic_error("Tape: Var belongs to a different tape");
}

Var Tape::constant(Matrix value) {
    return push(std::move(value), {});
}

Var Tape::param(const std::string& name, Matrix value) {
    if (params_.count(name)) throw std::invalid_argument("Tape: duplicate parameter '" + name + "'");
    Var v = push(std::move(value), {});
    params_[name] = v.idx_;
    return v;
}

Var Tape::matmul(Var a, Var b) {
    check_tape(a);
    check_tape(b);
    const int ia = a.idx_, ib = b.idx_;
    Matrix out = sda::matmul(nodes_[ia].value, nodes_[ib].value);
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        t.nodes_[ia].grad += sda::matmul(g, sda::transpose(t.nodes_[ib].value));
        t.nodes_[ib].grad += sda::matmul(sda::transpose(t.nodes_[ia].value), g);
    });
}

Var Tape::add(Var a, Var b) {
    check_tape(a);
    check_tape(b);
    const int ia = a.idx_, ib = b.idx_;
    return push(nodes_[ia].value + nodes_[ib].value, [ia, ib](Tape& t, int self) {
        t.nodes_[ia].grad += t.nodes_[self].grad;
        t.nodes_[ib].grad += t.nodes_[self].grad;
    });
}

Var Tape::sub(Var a, Var b) {
    check_tape(a);
    check_tape(b);
    const int ia = a.idx_, ib = b.idx_;
    return push(nodes_[ia].value - nodes_[ib].value, [ia, ib](Tape& t, int self) {
        t.nodes_[ia].grad += t.nodes_[self].grad;
        t.nodes_[ib].grad -= t.nodes_[self].grad;
    });
}

Var Tape::scale(Var a, double c) {
    check_tape(a);
    const int ia = a.idx_;
    return push(sda::scale(nodes_[ia].value, c), [ia, c](Tape& t, int self) {
        t.nodes_[ia].grad += sda::scale(t.nodes_[self].grad, c);
    });
}

Var Tape::mul_scalar(Var a, Var s) {
    check_tape(a);
    check_tape(s);
    const int ia = a.idx_, is = s.idx_;
    const Matrix& sv = nodes_[is].value;
    if (sv.rows() != 1 || sv.cols() != 1) throw std::invalid_argument("mul_scalar: s must be 1x1");
    return push(sda::scale(nodes_[ia].value, sv(0, 0)), [ia, is](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        const double s00 = t.nodes_[is].value(0, 0);
        t.nodes_[ia].grad += sda::scale(g, s00);
        t.nodes_[is].grad(0, 0) += dot_all(g, t.nodes_[ia].value);
    });
}

Var Tape::hadamard(Var a, Var b) {
    check_tape(a);
    check_tape(b);
    const int ia = a.idx_, ib = b.idx_;
    return push(sda::hadamard(nodes_[ia].value, nodes_[ib].value), [ia, ib](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        t.nodes_[ia].grad += sda::hadamard(g, t.nodes_[ib].value);
        t.nodes_[ib].grad += sda::hadamard(g, t.nodes_[ia].value);
    });
}

Var Tape::transpose(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    return push(sda::transpose(nodes_[ia].value), [ia](Tape& t, int self) {
        t.nodes_[ia].grad += sda::transpose(t.nodes_[self].grad);
    });
}

Var Tape::softmax_rows(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    return push(sda::softmax_rows(nodes_[ia].value), [ia](Tape& t, int self) {
        // dx = y * (g - <g, y>_row)
        const Matrix& y = t.nodes_[self].value;
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (int i = 0; i < y.rows(); ++i) {
            double gy = 0.0;
            for (int j = 0; j < y.cols(); ++j) gy += g(i, j) * y(i, j);
            for (int j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - gy);
        }
    });
}

Var Tape::log_softmax_rows(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    return push(sda::log_softmax_rows(nodes_[ia].value), [ia](Tape& t, int self) {
        // dx = g - softmax(x) * rowsum(g)
        const Matrix& y = t.nodes_[self].value;
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (int i = 0; i < y.rows(); ++i) {
            double gs = 0.0;
            for (int j = 0; j < y.cols(); ++j) gs += g(i, j);
            for (int j = 0; j < y.cols(); ++j) gx(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
        }
    });
}

Var Tape::log(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    const Matrix& x = nodes_[ia].value;
    Matrix out = x;
    for (double& v : out.data()) v = std::log(v < kProbFloor ? kProbFloor : v);
    return push(std::move(out), [ia](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        const Matrix& x = t.nodes_[ia].value;
        Matrix& gx = t.nodes_[ia].grad;
        for (std::size_t i = 0; i < x.data().size(); ++i) {
            if (x.data()[i] >= kProbFloor) gx.data()[i] += g.data()[i] / x.data()[i];
        }
    });
}

Var Tape::tanh(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    Matrix out = nodes_[ia].value;
    for (double& v : out.data()) v = std::tanh(v);
    return push(std::move(out), [ia](Tape& t, int self) {
        const Matrix& y = t.nodes_[self].value;
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (std::size_t i = 0; i < y.data().size(); ++i) {
            gx.data()[i] += g.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
        }
    });
}

namespace {
double softplus_stable(double x) {
    // max(x,0) + log1p(exp(-|x|))
    return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
}
double sigmoid_stable(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
} // namespace

Var Tape::softplus(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    Matrix out = nodes_[ia].value;
    for (double& v : out.data()) v = softplus_stable(v);
    return push(std::move(out), [ia](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        const Matrix& x = t.nodes_[ia].value;
        Matrix& gx = t.nodes_[ia].grad;
        for (std::size_t i = 0; i < x.data().size(); ++i) {
            gx.data()[i] += g.data()[i] * sigmoid_stable(x.data()[i]);
        }
    });
}

Var Tape::sigmoid(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    Matrix out = nodes_[ia].value;
    for (double& v : out.data()) v = sigmoid_stable(v);
    return push(std::move(out), [ia](Tape& t, int self) {
        const Matrix& y = t.nodes_[self].value;
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (std::size_t i = 0; i < y.data().size(); ++i) {
            gx.data()[i] += g.data()[i] * y.data()[i] * (1.0 - y.data()[i]);
        }
    });
}

Var Tape::sum(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    Matrix out(1, 1, 0.0);
    out(0, 0) = nodes_[ia].value.sum();
    return push(std::move(out), [ia](Tape& t, int self) {
        const double g = t.nodes_[self].grad(0, 0);
        for (double& v : t.nodes_[ia].grad.data()) v += g;
    });
}

Var Tape::mean(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    const double n = static_cast<double>(nodes_[ia].value.size());
    Matrix out(1, 1, 0.0);
    out(0, 0) = nodes_[ia].value.sum() / n;
    return push(std::move(out), [ia, n](Tape& t, int self) {
        const double g = t.nodes_[self].grad(0, 0) / n;
        for (double& v : t.nodes_[ia].grad.data()) v += g;
    });
}

Var Tape::row_sums(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    const Matrix& x = nodes_[ia].value;
    Matrix out(x.rows(), 1);
    for (int i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (double v : x.row(i)) s += v;
        out(i, 0) = s;
    }
    return push(std::move(out), [ia](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (int i = 0; i < gx.rows(); ++i)
            for (int j = 0; j < gx.cols(); ++j) gx(i, j) += g(i, 0);
    });
}

Var Tape::l2_normalize_rows(Var a) {
    check_tape(a);
    const int ia = a.idx_;
    return push(sda::l2_normalize_rows(nodes_[ia].value), [ia](Tape& t, int self) {
        // Per row: dx = (g - y * <g, y>) / ||x||
        const Matrix& y = t.nodes_[self].value;
        const Matrix& g = t.nodes_[self].grad;
        const Matrix& x = t.nodes_[ia].value;
        Matrix& gx = t.nodes_[ia].grad;
        for (int i = 0; i < y.rows(); ++i) {
            double n2 = 0.0;
            for (double v : x.row(i)) n2 += v * v;
            const double inv_norm = 1.0 / std::sqrt(n2);
            double gy = 0.0;
            for (int j = 0; j < y.cols(); ++j) gy += g(i, j) * y(i, j);
            for (int j = 0; j < y.cols(); ++j) gx(i, j) += (g(i, j) - y(i, j) * gy) * inv_norm;
        }
    });
}

Var Tape::gather_rows(Var a, std::vector<int> idx) {
    check_tape(a);
    const int ia = a.idx_;
    const Matrix& x = nodes_[ia].value;
    Matrix out(static_cast<int>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.rows()) throw std::out_of_range("gather_rows: index out of range");
        std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(static_cast<int>(i)).begin());
    }
    return push(std::move(out), [ia, idx = std::move(idx)](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            auto grow = g.row(static_cast<int>(i));
            auto xrow = gx.row(idx[i]);
            for (int j = 0; j < g.cols(); ++j) xrow[j] += grow[j];
        }
    });
}

Var Tape::slice(Var a, int r0, int c0, int rows, int cols) {
    check_tape(a);
    const int ia = a.idx_;
    const Matrix& x = nodes_[ia].value;
    if (r0 < 0 || c0 < 0 || r0 + rows > x.rows() || c0 + cols > x.cols()) {
        throw std::out_of_range("slice: window out of range");
    }
    Matrix out(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out(i, j) = x(r0 + i, c0 + j);
    return push(std::move(out), [ia, r0, c0, rows, cols](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        Matrix& gx = t.nodes_[ia].grad;
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) gx(r0 + i, c0 + j) += g(i, j);
    });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    std::vector<int> ids;
    int rows = 0;
    const int cols = value(parts[0]).cols();
    for (Var p : parts) {
        check_tape(p);
        if (value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        ids.push_back(p.idx_);
        rows += value(p).rows();
    }
    Matrix out(rows, cols);
    int r = 0;
    for (int id : ids) {
        const Matrix& x = nodes_[id].value;
        for (int i = 0; i < x.rows(); ++i, ++r)
            std::copy(x.row(i).begin(), x.row(i).end(), out.row(r).begin());
    }
    return push(std::move(out), [ids = std::move(ids)](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        int r = 0;
        for (int id : ids) {
            Matrix& gx = t.nodes_[id].grad;
            for (int i = 0; i < gx.rows(); ++i, ++r)
                for (int j = 0; j < gx.cols(); ++j) gx(i, j) += g(r, j);
        }
    });
}

Var Tape::add_row_broadcast(Var a, Var row) {
    check_tape(a);
    check_tape(row);
    const int ia = a.idx_, ir = row.idx_;
    const Matrix& x = nodes_[ia].value;
    const Matrix& rv = nodes_[ir].value;
    if (rv.rows() != 1 || rv.cols() != x.cols()) {
        throw std::invalid_argument("add_row_broadcast: row must be 1 x cols(a)");
    }
    Matrix out = x;
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
    return push(std::move(out), [ia, ir](Tape& t, int self) {
        const Matrix& g = t.nodes_[self].grad;
        t.nodes_[ia].grad += g;
        Matrix& gr = t.nodes_[ir].grad;
        for (int i = 0; i < g.rows(); ++i)
            for (int j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    });
}

Var Tape::dot(Var a, Var b) {
    check_tape(a);
    check_tape(b);
    const int ia = a.idx_, ib = b.idx_;
    Matrix out(1, 1, 0.0);
    out(0, 0) = dot_all(nodes_[ia].value, nodes_[ib].value);
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const double g = t.nodes_[self].grad(0, 0);
        t.nodes_[ia].grad += sda::scale(t.nodes_[ib].value, g);
        t.nodes_[ib].grad += sda::scale(t.nodes_[ia].value, g);
    });
}

void Tape::backward(Var loss) {
    check_tape(loss);
    if (!record_) throw std::logic_error("Tape: backward on a non-recording tape");
    if (backward_done_) throw std::logic_error("Tape: backward already ran");
    const Matrix& lv = nodes_[loss.idx_].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("Tape: loss must be 1x1");
    backward_done_ = true;
    nodes_[loss.idx_].grad(0, 0) = 1.0;
    for (int i = loss.idx_; i >= 0; --i) {
        if (nodes_[i].backprop) nodes_[i].backprop(*this, i);
    }
}

const Matrix& Tape::grad(Var v) const {
    check_tape(v);
    if (!backward_done_) throw std::logic_error("Tape: grad before backward");
    return nodes_[v.idx_].grad;
}

const Matrix& Tape::grad(const std::string& param_name) const {
    auto it = params_.find(param_name);
    if (it == params_.end()) throw std::invalid_argument("Tape: unknown parameter '" + param_name + "'");
    if (!backward_done_) throw std::logic_error("Tape: grad before backward");
    return nodes_[it->second].grad;
}

Var Tape::param_var(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("Tape: unknown parameter '" + name + "'");
    return Var(const_cast<Tape*>(this), it->second);
}

} // namespace sda
