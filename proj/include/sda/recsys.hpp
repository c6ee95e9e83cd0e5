#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sda/adapt.hpp"
#include "sda/eval.hpp"
#include "sda/matrix.hpp"
#include "sda/store.hpp"
#include "sda/tape.hpp"

namespace sda {

enum class FusionMode { kConcatLinear, kTextOnly, kImageOnly, kIdOnly };
enum class RecModelKind { kBpr, kSeq };

const char* to_string(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);
const char* to_string(RecModelKind k);
RecModelKind parse_rec_model(const std::string& s);

// Projects per-item content embeddings into the recommender width d_r.
// concat_linear maps [e_t ; e_v] through a 2*d_m x d_r matrix; text_only /
// image_only project the single modality; id_only contributes a zero vector
// so the recommender sees no content at all.
struct FusionAdapter {
    FusionMode mode = FusionMode::kConcatLinear;
    int d_m = 0;
    int d_r = 0;
    Matrix projection{0, 0}; // in_width x d_r; empty for id_only
};

FusionAdapter make_fusion(FusionMode mode, int d_m, int d_r, std::uint64_t seed);

// e_t / e_v are n x d_m (row per item); result is n x d_r.
Matrix fuse(const FusionAdapter& fusion, const Matrix& e_t, const Matrix& e_v);

// Applies the fusion to two aligned embedding tables (same ids, same order).
Matrix fuse_tables(const FusionAdapter& fusion, const EmbeddingTable& text, const EmbeddingTable& image);

struct RecConfig {
    RecModelKind model = RecModelKind::kBpr;
    FusionMode fusion = FusionMode::kConcatLinear;
    int d_r = 64;
    int steps = 800;
    int batch_size = 64; // BPR triples or Seq sequences per step
    double learning_rate = 0.01;
    int neg_samples = 100; // sampled-softmax negatives per position (Seq)
    int max_seq_len = 50;
    double emb_init_std = 0.01;
    double clip_norm = 5.0;
    std::uint64_t seed = 3;
};

void validate_rec_config(const RecConfig& cfg);

// Matrix-factorization ranker trained with the pairwise logistic (BPR) loss:
// score(u, i) = p_u . (q_i + c_i) + b_i with frozen fused content c.
struct BprModel {
    std::vector<std::string> user_ids; // row order of user_emb
    std::vector<std::string> item_ids; // row order of item_emb / content
    std::map<std::string, int> user_index;
    int d_r = 0;
    Matrix user_emb{0, 0};  // |U| x d_r
    Matrix item_emb{0, 0};  // |I| x d_r
    Matrix item_bias{0, 0}; // |I| x 1
    Matrix content{0, 0};   // |I| x d_r, frozen

    int user_row(const std::string& user_id) const; // throws on unknown user
};

// (user_row, positive_item, negative_item) indices.
struct BprTriple {
    int user = 0;
    int pos = 0;
    int neg = 0;
};

// Mean pairwise loss -ln sigmoid(s_pos - s_neg) over the triples, recorded
// on the tape. params must hold "user_emb", "item_emb", "item_bias".
Var bpr_batch_loss(Tape& tape, const std::map<std::string, Var>& params, const Matrix& content,
                   const std::vector<BprTriple>& triples);

struct BprTrainResult {
    BprModel model;
    TrainLog log;
    int skipped_users = 0; // split users with no train interactions
};

// Positives are drawn from each user's train split, negatives uniformly from
// the items the user has not trained on.
BprTrainResult bpr_train(const LooSplit& split, const std::vector<std::string>& item_ids,
                         const Matrix& content, const RecConfig& cfg);

// Scores for every item, in item_ids order.
std::vector<double> score_all(const BprModel& model, const std::string& user_id);

// Next-item ranker: one causal self-attention block plus a pointwise
// feed-forward layer over the (item + content + position) input embeddings,
// trained with sampled softmax over 1 positive + neg_samples negatives at
// every position.
struct SeqModel {
    std::vector<std::string> item_ids;
    int d_r = 0;
    int max_len = 0;
    ParamMap params;      // item_emb, pos_emb, attn.*, ffn.*
    Matrix content{0, 0}; // |I| x d_r, frozen
};

// One training sequence: predict targets[p] from inputs[0..p].
struct SeqExample {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<std::vector<int>> negatives; // per position
};

// Hidden states (one row per input position) after the attention block and
// feed-forward layer, recorded on the tape. params must hold the SeqModel
// parameter names.
Var seq_hidden(Tape& tape, const std::map<std::string, Var>& params, const Matrix& content,
               const std::vector<int>& inputs, int max_len);

// Forward-only twin of seq_hidden.
Matrix seq_hidden_value(const SeqModel& model, const std::vector<int>& inputs);

// Mean sampled-softmax loss over all positions of all examples.
Var seq_batch_loss(Tape& tape, const std::map<std::string, Var>& params, const Matrix& content,
                   const std::vector<SeqExample>& batch, int max_len);

struct SeqTrainResult {
    SeqModel model;
    TrainLog log;
    int skipped_users = 0; // split users whose train sequence is shorter than 2
};

SeqTrainResult seq_train(const LooSplit& split, const std::vector<std::string>& item_ids,
                         const Matrix& content, const RecConfig& cfg);

// Scores every item as the continuation of the given item-id history.
std::vector<double> score_all(const SeqModel& model, const std::vector<std::string>& history);

} // namespace sda
