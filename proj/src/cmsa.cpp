#include "sda/cmsa.hpp"

#include <cmath>
#include <stdexcept>

namespace sda {

const char* to_string(TeacherTempMode m) {
    return m == TeacherTempMode::kMultiply ? "multiply" : "divide";
}

void validate_batch(const AlignmentBatch& batch) {
    if (!batch.e_t.same_shape(batch.e_v)) {
        throw std::invalid_argument("alignment batch: embedding shapes differ");
    }
    if (batch.e_t.rows() < 1) throw std::invalid_argument("alignment batch: empty");
    if (!(batch.tau > 0.0)) throw std::invalid_argument("alignment batch: tau must be positive");
    if (!batch.e_t.all_finite() || !batch.e_v.all_finite()) {
        throw std::invalid_argument("alignment batch: non-finite embeddings");
    }
}

Matrix similarity_matrix(const AlignmentBatch& batch) {
    validate_batch(batch);
    Matrix s = matmul(batch.e_t, transpose(batch.e_v));
    s *= 1.0 / batch.tau;
    return s;
}

namespace {

double teacher_coefficient(double tau, TeacherTempMode mode) {
    return mode == TeacherTempMode::kMultiply ? tau / 2.0 : 1.0 / (2.0 * tau);
}

Matrix teacher_logits(const AlignmentBatch& batch, TeacherTempMode mode) {
    Matrix z = matmul(batch.e_t, transpose(batch.e_t));
    z += matmul(batch.e_v, transpose(batch.e_v));
    z *= teacher_coefficient(batch.tau, mode);
    return z;
}

// sum_ij T_ij * (lnT_ij - log_softmax(S)_ij), i.e. the summed KL of every
// row of T against the matching row of softmax_rows(S).
Var directed_kl(Tape& tape, Var teacher, Var teacher_log, Var s) {
    Var p_log = tape.log_softmax_rows(s);
    return tape.sum(tape.hadamard(teacher, tape.sub(teacher_log, p_log)));
}

// The teacher logit matrix is symmetric, so the column-direction teacher
// (the soft target built on the transposed orientation) row-normalizes to
// the same T; only the student side is transposed.
Var loss_with_teacher_vars(Tape& tape, Var s, Var teacher, Var teacher_log) {
    const int n = s.value().rows();
    Var row_term = directed_kl(tape, teacher, teacher_log, s);
    Var col_term = directed_kl(tape, teacher, teacher_log, tape.transpose(s));
    return tape.scale(tape.add(row_term, col_term), 1.0 / (2.0 * n));
}

Var student_similarity(Tape& tape, Var e_t, Var e_v, double tau) {
    return tape.scale(tape.matmul(e_t, tape.transpose(e_v)), 1.0 / tau);
}

void check_loss_inputs(Var e_t, Var e_v, double tau) {
    if (!e_t.value().same_shape(e_v.value())) {
        throw std::invalid_argument("alignment loss: embedding shapes differ");
    }
    if (e_t.value().rows() < 2) {
        throw std::invalid_argument("alignment loss: batch must have N >= 2");
    }
    if (!(tau > 0.0)) throw std::invalid_argument("alignment loss: tau must be positive");
}

} // namespace

Matrix soft_target(const AlignmentBatch& batch, TeacherTempMode mode) {
    validate_batch(batch);
    return softmax_rows(teacher_logits(batch, mode));
}

Var cmsa_loss(Tape& tape, Var e_t, Var e_v, const CmsaOptions& opts) {
    check_loss_inputs(e_t, e_v, opts.tau);
    Var s = student_similarity(tape, e_t, e_v, opts.tau);
    if (opts.detach_teacher) {
        AlignmentBatch snapshot{e_t.value(), e_v.value(), opts.tau};
        Matrix t = soft_target(snapshot, opts.teacher_temp_mode);
        Var teacher = tape.constant(t);
        return loss_with_teacher_vars(tape, s, teacher, tape.log(teacher));
    }
    const double c = teacher_coefficient(opts.tau, opts.teacher_temp_mode);
    Var logits = tape.scale(
        tape.add(tape.matmul(e_t, tape.transpose(e_t)), tape.matmul(e_v, tape.transpose(e_v))), c);
    Var teacher = tape.softmax_rows(logits);
    Var teacher_log = tape.log_softmax_rows(logits);
    return loss_with_teacher_vars(tape, s, teacher, teacher_log);
}

Var cmsa_loss_with_teacher(Tape& tape, Var e_t, Var e_v, double tau, const Matrix& teacher) {
    check_loss_inputs(e_t, e_v, tau);
    if (teacher.rows() != e_t.value().rows() || teacher.cols() != e_t.value().rows()) {
        throw std::invalid_argument("alignment loss: teacher must be N x N");
    }
    Var s = student_similarity(tape, e_t, e_v, tau);
    Var t = tape.constant(teacher);
    return loss_with_teacher_vars(tape, s, t, tape.log(t));
}

Var infonce_loss(Tape& tape, Var e_t, Var e_v, double tau) {
    check_loss_inputs(e_t, e_v, tau);
    const int n = e_t.value().rows();
    Var s = student_similarity(tape, e_t, e_v, tau);
    Var eye = tape.constant(Matrix::identity(n));
    Var row_term = tape.sum(tape.hadamard(eye, tape.log_softmax_rows(s)));
    Var col_term = tape.sum(tape.hadamard(eye, tape.log_softmax_rows(tape.transpose(s))));
    return tape.scale(tape.add(row_term, col_term), -1.0 / (2.0 * n));
}

double matched_pair_cosine(const Matrix& e_t, const Matrix& e_v) {
    if (!e_t.same_shape(e_v)) throw std::invalid_argument("matched_pair_cosine: shapes differ");
    if (e_t.rows() == 0) throw std::invalid_argument("matched_pair_cosine: empty input");
    double total = 0.0;
    for (int i = 0; i < e_t.rows(); ++i) {
        double dot = 0.0, nt = 0.0, nv = 0.0;
        for (int j = 0; j < e_t.cols(); ++j) {
            dot += e_t(i, j) * e_v(i, j);
            nt += e_t(i, j) * e_t(i, j);
            nv += e_v(i, j) * e_v(i, j);
        }
        if (nt == 0.0 || nv == 0.0) throw std::domain_error("matched_pair_cosine: zero-norm row");
        total += dot / std::sqrt(nt * nv);
    }
    return total / e_t.rows();
}

} // namespace sda
