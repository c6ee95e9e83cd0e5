#pragma once

#include "sda/matrix.hpp"
#include "sda/tape.hpp"

namespace sda {

// Where the temperature enters the teacher logits: multiply scales the
// averaged intra-modal similarities by tau/2, divide scales them by 1/(2 tau)
// so the teacher sharpness tracks the student's.
enum class TeacherTempMode { kMultiply, kDivide };

const char* to_string(TeacherTempMode m);

// One batch of paired embeddings, rows aligned by item.
struct AlignmentBatch {
    Matrix e_t; // N x d_m
    Matrix e_v; // N x d_m
    double tau = 0.07;

    int size() const { return e_t.rows(); }
};

void validate_batch(const AlignmentBatch& batch);

// S_ij = (e_i^t . e_j^v) / tau.
Matrix similarity_matrix(const AlignmentBatch& batch);

// Row-stochastic teacher built from averaged intra-modal similarities:
// T_ij = softmax_j(c * (e_i^t . e_j^t + e_i^v . e_j^v)) with c set by mode.
// The logit matrix is symmetric, so the same T serves both loss directions.
Matrix soft_target(const AlignmentBatch& batch, TeacherTempMode mode = TeacherTempMode::kMultiply);

struct CmsaOptions {
    double tau = 0.07;
    TeacherTempMode teacher_temp_mode = TeacherTempMode::kMultiply;
    bool detach_teacher = true; // teacher treated as constant by default
};

// Structure-aware alignment loss, recorded on the tape:
//   L = (1/2N) sum_i [ KL(T_i ‖ P_i) + KL(T'_i ‖ P^T_i) ]
// with P = softmax_rows(S), P^T = softmax_rows(S^T), and T' the transposed
// teacher. Requires N >= 2.
Var cmsa_loss(Tape& tape, Var e_t, Var e_v, const CmsaOptions& opts);

// Same loss shape but with an injected row-stochastic teacher (used for the
// InfoNCE equivalence check: teacher = identity reduces KL to cross-entropy).
Var cmsa_loss_with_teacher(Tape& tape, Var e_t, Var e_v, double tau, const Matrix& teacher);

// Symmetric cross-entropy of S and S^T against the one-hot diagonal.
Var infonce_loss(Tape& tape, Var e_t, Var e_v, double tau);

// Mean cosine similarity of matched pairs (row i of e_t vs row i of e_v);
// the alignment health number reported by diagnostics.
double matched_pair_cosine(const Matrix& e_t, const Matrix& e_v);

} // namespace sda
