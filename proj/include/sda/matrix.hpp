#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace sda {

// Dense row-major matrix of doubles. Values are immutable by convention once
// a matrix is handed to the tape or the encoder; copies are cheap at the
// sizes used here.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(int n);
    static Matrix zeros_like(const Matrix& m) { return Matrix(m.rows_, m.cols_); }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    std::span<double> row(int r) { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }
    std::span<const double> row(int r) const { return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const;
    double frobenius_norm() const;
    double sum() const;
    double max_abs() const;

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double c);

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);
Matrix hadamard(const Matrix& a, const Matrix& b);
double dot_all(const Matrix& a, const Matrix& b);

double max_abs_diff(const Matrix& a, const Matrix& b);
bool approx_equal(const Matrix& a, const Matrix& b, double tol);
bool exactly_equal(const Matrix& a, const Matrix& b);

// Stable row-wise softmax (max-subtraction). Each output row sums to 1
// within 1e-12 for arbitrary finite input.
Matrix softmax_rows(const Matrix& m);
Matrix log_softmax_rows(const Matrix& m);

// Rows scaled to unit L2 norm. Throws on a zero row.
Matrix l2_normalize_rows(const Matrix& m);

// Rounds every entry to the nearest 32-bit float (the precision used for
// bulk storage), so later f32 round-trips are exact.
void quantize_f32_inplace(Matrix& m);

// KL(t || p) over two probability rows with the 0*ln 0 = 0 convention.
// Throws if either row fails the simplex precondition, or if some p_j = 0
// where t_j > 0.
double kl_div(std::span<const double> t, std::span<const double> p);

// Probabilities are floored at this value before any log.
inline constexpr double kProbFloor = 1e-12;

} // namespace sda
