#include "sda/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace sda {

Matrix::Matrix(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) {
        throw std::invalid_argument("Matrix: negative dimension");
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r == 0 ? 0 : static_cast<int>(rows.begin()->size());
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != c) {
            throw std::invalid_argument("Matrix::from_rows: ragged rows");
        }
        std::copy(row.begin(), row.end(), m.row(i).begin());
        ++i;
    }
    return m;
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Matrix::frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
}

double Matrix::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Matrix::max_abs() const {
    double s = 0.0;
    for (double v : data_) s = std::max(s, std::fabs(v));
    return s;
}

Matrix& Matrix::operator+=(const Matrix& o) {
    if (!same_shape(o)) throw std::invalid_argument("Matrix +=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    if (!same_shape(o)) throw std::invalid_argument("Matrix -=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double c) {
    for (double& v : data_) v *= c;
    return *this;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions " + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()));
    }
    Matrix out(a.rows(), b.cols());
    const int n = a.rows(), k = a.cols(), m = b.cols();
    // i-k-j loop order keeps the inner loop contiguous in both b and out.
    for (int i = 0; i < n; ++i) {
        const double* arow = a.row(i).data();
        double* orow = out.row(i).data();
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b.row(kk).data();
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    out += b;
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    out -= b;
    return out;
}

Matrix scale(const Matrix& a, double c) {
    Matrix out = a;
    out *= c;
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

double dot_all(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("dot_all: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        s = std::max(s, std::fabs(a.data()[i] - b.data()[i]));
    return s;
}

bool approx_equal(const Matrix& a, const Matrix& b, double tol) {
    return a.same_shape(b) && max_abs_diff(a, b) <= tol;
}

bool exactly_equal(const Matrix& a, const Matrix& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i) {
        auto in = m.row(i);
        auto o = out.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double denom = 0.0;
        for (int j = 0; j < m.cols(); ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (int j = 0; j < m.cols(); ++j) o[j] /= denom;
    }
    return out;
}

Matrix log_softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i) {
        auto in = m.row(i);
        auto o = out.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double denom = 0.0;
        for (int j = 0; j < m.cols(); ++j) denom += std::exp(in[j] - mx);
        const double lse = mx + std::log(denom);
        for (int j = 0; j < m.cols(); ++j) o[j] = in[j] - lse;
    }
    return out;
}

Matrix l2_normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (int i = 0; i < m.rows(); ++i) {
        double n2 = 0.0;
        for (double v : m.row(i)) n2 += v * v;
        if (n2 == 0.0) throw std::domain_error("l2_normalize_rows: zero row " + std::to_string(i));
        const double inv = 1.0 / std::sqrt(n2);
        for (double& v : out.row(i)) v *= inv;
    }
    return out;
}

void quantize_f32_inplace(Matrix& m) {
    for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
}

double kl_div(std::span<const double> t, std::span<const double> p) {
    if (t.size() != p.size()) throw std::invalid_argument("kl_div: length mismatch");
    double ts = 0.0, ps = 0.0;
    for (std::size_t j = 0; j < t.size(); ++j) {
        if (t[j] < 0.0 || p[j] < 0.0) throw std::invalid_argument("kl_div: negative entry");
        ts += t[j];
        ps += p[j];
    }
    if (std::fabs(ts - 1.0) > 1e-9 || std::fabs(ps - 1.0) > 1e-9) {
        throw std::invalid_argument("kl_div: rows must sum to 1 within 1e-9");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < t.size(); ++j) {
        if (t[j] == 0.0) continue; // 0 * ln 0 = 0
        if (p[j] == 0.0) {
            throw std::domain_error("kl_div: p is zero on the support of t (missing epsilon flooring upstream)");
        }
        s += t[j] * (std::log(t[j]) - std::log(p[j]));
    }
    // Rounding can land a hair below zero on identical rows.
    if (s < 0.0 && s > -1e-12) s = 0.0;
    return s;
}

} // namespace sda
