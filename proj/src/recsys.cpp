#include "sda/recsys.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <stdexcept>

#include "sda/adam.hpp"
#include "sda/rng.hpp"

namespace sda {

const char* to_string(FusionMode m) {
    switch (m) {
        case FusionMode::kConcatLinear: return "concat_linear";
        case FusionMode::kTextOnly: return "text_only";
        case FusionMode::kImageOnly: return "image_only";
        case FusionMode::kIdOnly: return "id_only";
    }
    return "?";
}

FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "concat_linear") return FusionMode::kConcatLinear;
    if (s == "text_only") return FusionMode::kTextOnly;
    if (s == "image_only") return FusionMode::kImageOnly;
    if (s == "id_only") return FusionMode::kIdOnly;
    throw std::invalid_argument("unknown fusion mode: " + s);
}

const char* to_string(RecModelKind k) {
    return k == RecModelKind::kBpr ? "bpr" : "seq";
}

RecModelKind parse_rec_model(const std::string& s) {
    if (s == "bpr") return RecModelKind::kBpr;
    if (s == "seq") return RecModelKind::kSeq;
    throw std::invalid_argument("unknown recommender model: " + s);
}

FusionAdapter make_fusion(FusionMode mode, int d_m, int d_r, std::uint64_t seed) {
    if (d_m < 1 || d_r < 1) throw std::invalid_argument("make_fusion: dims must be >= 1");
    FusionAdapter f;
    f.mode = mode;
    f.d_m = d_m;
    f.d_r = d_r;
    if (mode != FusionMode::kIdOnly) {
        const int in = mode == FusionMode::kConcatLinear ? 2 * d_m : d_m;
        Rng rng(derive_seed(seed, "fusion"));
        f.projection = gaussian_matrix(in, d_r, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    }
    return f;
}

Matrix fuse(const FusionAdapter& fusion, const Matrix& e_t, const Matrix& e_v) {
    if (!e_t.same_shape(e_v)) throw std::invalid_argument("fuse: modality shapes differ");
    if (e_t.cols() != fusion.d_m) throw std::invalid_argument("fuse: embedding width != fusion d_m");
    const int n = e_t.rows();
    switch (fusion.mode) {
        case FusionMode::kIdOnly: return Matrix(n, fusion.d_r);
        case FusionMode::kTextOnly: return matmul(e_t, fusion.projection);
        case FusionMode::kImageOnly: return matmul(e_v, fusion.projection);
        case FusionMode::kConcatLinear: {
            Matrix cat(n, 2 * fusion.d_m);
            for (int i = 0; i < n; ++i) {
                for (int c = 0; c < fusion.d_m; ++c) {
                    cat(i, c) = e_t(i, c);
                    cat(i, fusion.d_m + c) = e_v(i, c);
                }
            }
            return matmul(cat, fusion.projection);
        }
    }
    throw std::logic_error("fuse: unreachable");
}

Matrix fuse_tables(const FusionAdapter& fusion, const EmbeddingTable& text, const EmbeddingTable& image) {
    if (text.item_ids != image.item_ids) {
        throw std::invalid_argument("fuse_tables: text/image tables list different items");
    }
    return fuse(fusion, text.rows, image.rows);
}

void validate_rec_config(const RecConfig& cfg) {
    if (cfg.d_r < 1) throw std::invalid_argument("rec config: d_r must be >= 1");
    if (cfg.steps < 0) throw std::invalid_argument("rec config: steps must be >= 0");
    if (cfg.batch_size < 1) throw std::invalid_argument("rec config: batch_size must be >= 1");
    if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate)) {
        throw std::invalid_argument("rec config: learning_rate must be positive and finite");
    }
    if (cfg.neg_samples < 1) throw std::invalid_argument("rec config: neg_samples must be >= 1");
    if (cfg.max_seq_len < 2) throw std::invalid_argument("rec config: max_seq_len must be >= 2");
    if (cfg.emb_init_std < 0.0) throw std::invalid_argument("rec config: emb_init_std must be >= 0");
    if (!(cfg.clip_norm > 0.0)) throw std::invalid_argument("rec config: clip_norm must be positive");
}

namespace {

std::map<std::string, int> build_index(const std::vector<std::string>& ids) {
    std::map<std::string, int> index;
    for (int i = 0; i < static_cast<int>(ids.size()); ++i) {
        if (!index.emplace(ids[i], i).second) {
            throw std::invalid_argument("duplicate item id: " + ids[i]);
        }
    }
    return index;
}

Matrix gather_plain(const Matrix& m, const std::vector<int>& idx) {
    Matrix out(static_cast<int>(idx.size()), m.cols());
    for (int r = 0; r < out.rows(); ++r) {
        if (idx[r] < 0 || idx[r] >= m.rows()) throw std::out_of_range("gather: row out of range");
        for (int c = 0; c < m.cols(); ++c) out(r, c) = m(idx[r], c);
    }
    return out;
}

std::vector<int> iota_indices(int n) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

Matrix tanh_mat(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.data()) v = std::tanh(v);
    return out;
}

Matrix add_row_b(const Matrix& m, const Matrix& row) {
    Matrix out = m;
    for (int r = 0; r < m.rows(); ++r) {
        for (int c = 0; c < m.cols(); ++c) out(r, c) += row(0, c);
    }
    return out;
}

// 0 on and below the diagonal, a large negative penalty above: position p
// may attend to positions <= p only.
Matrix causal_mask(int n) {
    Matrix mask(n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = r + 1; c < n; ++c) mask(r, c) = -1e9;
    }
    return mask;
}

struct TrainerState {
    AdamOptimizer opt;
    TrainLog log;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    explicit TrainerState(const AdamConfig& cfg) : opt(cfg) {}

    void record(int step, double loss, double grad_norm) {
        StepLog sl;
        sl.step = step;
        sl.loss = loss;
        sl.grad_norm = grad_norm;
        log.steps.push_back(sl);
        if (step == 1) log.initial_loss = loss;
        log.final_loss = loss;
    }

    void finish() {
        log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void check_content(const Matrix& content, int n_items, int d_r) {
    if (content.rows() != n_items || content.cols() != d_r) {
        throw std::invalid_argument("content matrix must be n_items x d_r");
    }
    if (!content.all_finite()) throw std::invalid_argument("content matrix has non-finite entries");
}

} // namespace

int BprModel::user_row(const std::string& user_id) const {
    auto it = user_index.find(user_id);
    if (it == user_index.end()) throw std::invalid_argument("bpr: unknown user " + user_id);
    return it->second;
}

Var bpr_batch_loss(Tape& tape, const std::map<std::string, Var>& params, const Matrix& content,
                   const std::vector<BprTriple>& triples) {
    if (triples.empty()) throw std::invalid_argument("bpr_batch_loss: empty batch");
    const Var user_emb = params.at("user_emb");
    const Var item_emb = params.at("item_emb");
    const Var item_bias = params.at("item_bias");

    std::vector<int> users, pos, neg;
    for (const BprTriple& t : triples) {
        users.push_back(t.user);
        pos.push_back(t.pos);
        neg.push_back(t.neg);
    }

    const Var u = tape.gather_rows(user_emb, users);
    const Var y_pos = tape.add(tape.gather_rows(item_emb, pos), tape.constant(gather_plain(content, pos)));
    const Var y_neg = tape.add(tape.gather_rows(item_emb, neg), tape.constant(gather_plain(content, neg)));
    const Var s_pos = tape.add(tape.row_sums(tape.hadamard(u, y_pos)), tape.gather_rows(item_bias, pos));
    const Var s_neg = tape.add(tape.row_sums(tape.hadamard(u, y_neg)), tape.gather_rows(item_bias, neg));
    const Var margin = tape.sub(s_pos, s_neg);
    return tape.mean(tape.softplus(tape.scale(margin, -1.0)));
}

BprTrainResult bpr_train(const LooSplit& split, const std::vector<std::string>& item_ids,
                         const Matrix& content, const RecConfig& cfg) {
    validate_rec_config(cfg);
    const int n_items = static_cast<int>(item_ids.size());
    if (n_items < 2) throw std::invalid_argument("bpr_train: need at least 2 items");
    check_content(content, n_items, cfg.d_r);
    const std::map<std::string, int> item_index = build_index(item_ids);

    BprTrainResult result;
    BprModel& model = result.model;
    model.item_ids = item_ids;
    model.d_r = cfg.d_r;
    model.content = content;

    // Every split user gets an embedding row; users without train items are
    // never sampled and keep their initialization.
    std::vector<std::vector<int>> train_sets;
    std::vector<int> eligible;
    for (const UserSplit& us : split.users) {
        const int row = static_cast<int>(model.user_ids.size());
        model.user_ids.push_back(us.user_id);
        model.user_index[us.user_id] = row;
        std::vector<int> seen;
        for (const std::string& id : us.train) {
            auto it = item_index.find(id);
            if (it == item_index.end()) throw std::invalid_argument("bpr_train: item " + id + " not in catalog");
            seen.push_back(it->second);
        }
        std::sort(seen.begin(), seen.end());
        seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
        if (seen.empty()) {
            ++result.skipped_users;
        } else if (static_cast<int>(seen.size()) < n_items) {
            eligible.push_back(row);
        } else {
            ++result.skipped_users; // trained on everything: no negative exists
        }
        train_sets.push_back(std::move(seen));
    }
    const int n_users = static_cast<int>(model.user_ids.size());
    if (n_users == 0) throw std::invalid_argument("bpr_train: split has no users");

    {
        Rng init(derive_seed(cfg.seed, "bpr_init"));
        model.user_emb = gaussian_matrix(n_users, cfg.d_r, cfg.emb_init_std, init);
        model.item_emb = gaussian_matrix(n_items, cfg.d_r, cfg.emb_init_std, init);
        model.item_bias = Matrix(n_items, 1);
    }
    if (cfg.steps == 0 || eligible.empty()) return result;

    // Per-user train lists for positive sampling (with multiplicity removed
    // above; positives are uniform over distinct trained items).
    ParamMap params = {
        {"user_emb", model.user_emb}, {"item_emb", model.item_emb}, {"item_bias", model.item_bias}};
    AdamConfig adam;
    adam.lr = cfg.learning_rate;
    TrainerState state(adam);
    Rng rng(derive_seed(cfg.seed, "bpr_sampling"));

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<BprTriple> batch;
        batch.reserve(cfg.batch_size);
        while (static_cast<int>(batch.size()) < cfg.batch_size) {
            const int user = eligible[rng.uniform_int(0, static_cast<int>(eligible.size()) - 1)];
            const std::vector<int>& seen = train_sets[user];
            const int pos = seen[rng.uniform_int(0, static_cast<int>(seen.size()) - 1)];
            int neg = pos;
            while (std::binary_search(seen.begin(), seen.end(), neg)) {
                neg = static_cast<int>(rng.uniform_int(0, n_items - 1));
            }
            batch.push_back({user, pos, neg});
        }

        Tape tape;
        std::map<std::string, Var> vars;
        for (const auto& [name, value] : params) vars.emplace(name, tape.param(name, value));
        const Var loss = bpr_batch_loss(tape, vars, content, batch);
        tape.backward(loss);

        ParamMap grads;
        for (const auto& [name, var] : vars) grads.emplace(name, tape.grad(var));
        const double norm = clip_global_norm(grads, cfg.clip_norm);
        state.opt.step(params, grads);
        state.record(step, loss.value()(0, 0), norm);
    }
    state.finish();

    model.user_emb = params.at("user_emb");
    model.item_emb = params.at("item_emb");
    model.item_bias = params.at("item_bias");
    result.log = std::move(state.log);
    return result;
}

std::vector<double> score_all(const BprModel& model, const std::string& user_id) {
    const int row = model.user_row(user_id);
    Matrix p(1, model.d_r);
    for (int c = 0; c < model.d_r; ++c) p(0, c) = model.user_emb(row, c);
    const Matrix y = model.item_emb + model.content;
    const Matrix s = matmul(y, transpose(p)); // |I| x 1
    std::vector<double> scores(model.item_ids.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = s(static_cast<int>(i), 0) + model.item_bias(static_cast<int>(i), 0);
    }
    return scores;
}

namespace {

ParamMap init_seq_params(int n_items, const RecConfig& cfg) {
    Rng init(derive_seed(cfg.seed, "seq_init"));
    const double wstd = 1.0 / std::sqrt(static_cast<double>(cfg.d_r));
    ParamMap params;
    params.emplace("item_emb", gaussian_matrix(n_items, cfg.d_r, cfg.emb_init_std, init));
    params.emplace("pos_emb", gaussian_matrix(cfg.max_seq_len, cfg.d_r, cfg.emb_init_std, init));
    params.emplace("attn.wq", gaussian_matrix(cfg.d_r, cfg.d_r, wstd, init));
    params.emplace("attn.wk", gaussian_matrix(cfg.d_r, cfg.d_r, wstd, init));
    params.emplace("attn.wv", gaussian_matrix(cfg.d_r, cfg.d_r, wstd, init));
    params.emplace("attn.wo", gaussian_matrix(cfg.d_r, cfg.d_r, wstd, init));
    params.emplace("ffn.w1", gaussian_matrix(cfg.d_r, cfg.d_r, wstd, init));
    params.emplace("ffn.b1", Matrix(1, cfg.d_r));
    params.emplace("ffn.w2", gaussian_matrix(cfg.d_r, cfg.d_r, wstd, init));
    params.emplace("ffn.b2", Matrix(1, cfg.d_r));
    return params;
}

void check_seq_inputs(const std::vector<int>& inputs, int n_items, int max_len) {
    if (inputs.empty()) throw std::invalid_argument("seq: empty input sequence");
    if (static_cast<int>(inputs.size()) > max_len) {
        throw std::invalid_argument("seq: input longer than max_seq_len (window the sequence first)");
    }
    for (int idx : inputs) {
        if (idx < 0 || idx >= n_items) throw std::out_of_range("seq: item index out of range");
    }
}

} // namespace

Var seq_hidden(Tape& tape, const std::map<std::string, Var>& params, const Matrix& content,
               const std::vector<int>& inputs, int max_len) {
    const Var item_emb = params.at("item_emb");
    check_seq_inputs(inputs, item_emb.value().rows(), max_len);
    const int n = static_cast<int>(inputs.size());
    const int d = item_emb.value().cols();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Var x = tape.add(tape.gather_rows(item_emb, inputs), tape.constant(gather_plain(content, inputs)));
    x = tape.add(x, tape.gather_rows(params.at("pos_emb"), iota_indices(n)));

    const Var q = tape.matmul(x, params.at("attn.wq"));
    const Var k = tape.matmul(x, params.at("attn.wk"));
    const Var v = tape.matmul(x, params.at("attn.wv"));
    const Var scores = tape.add(tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_d),
                                tape.constant(causal_mask(n)));
    const Var attn = tape.matmul(tape.matmul(tape.softmax_rows(scores), v), params.at("attn.wo"));
    const Var h = tape.add(x, attn);

    const Var f1 = tape.tanh(tape.add_row_broadcast(tape.matmul(h, params.at("ffn.w1")), params.at("ffn.b1")));
    const Var f2 = tape.add_row_broadcast(tape.matmul(f1, params.at("ffn.w2")), params.at("ffn.b2"));
    return tape.add(h, f2);
}

Matrix seq_hidden_value(const SeqModel& model, const std::vector<int>& inputs) {
    const Matrix& item_emb = model.params.at("item_emb");
    check_seq_inputs(inputs, item_emb.rows(), model.max_len);
    const int n = static_cast<int>(inputs.size());
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(model.d_r));

    Matrix x = gather_plain(item_emb, inputs) + gather_plain(model.content, inputs);
    x += gather_plain(model.params.at("pos_emb"), iota_indices(n));

    const Matrix q = matmul(x, model.params.at("attn.wq"));
    const Matrix k = matmul(x, model.params.at("attn.wk"));
    const Matrix v = matmul(x, model.params.at("attn.wv"));
    const Matrix scores = scale(matmul(q, transpose(k)), inv_sqrt_d) + causal_mask(n);
    const Matrix attn = matmul(matmul(softmax_rows(scores), v), model.params.at("attn.wo"));
    const Matrix h = x + attn;

    const Matrix f1 = tanh_mat(add_row_b(matmul(h, model.params.at("ffn.w1")), model.params.at("ffn.b1")));
    const Matrix f2 = add_row_b(matmul(f1, model.params.at("ffn.w2")), model.params.at("ffn.b2"));
    return h + f2;
}

Var seq_batch_loss(Tape& tape, const std::map<std::string, Var>& params, const Matrix& content,
                   const std::vector<SeqExample>& batch, int max_len) {
    if (batch.empty()) throw std::invalid_argument("seq_batch_loss: empty batch");
    const Var item_emb = params.at("item_emb");
    const int d = item_emb.value().cols();

    Var total;
    int positions = 0;
    for (const SeqExample& ex : batch) {
        if (ex.inputs.size() != ex.targets.size() || ex.inputs.size() != ex.negatives.size()) {
            throw std::invalid_argument("seq_batch_loss: inputs/targets/negatives length mismatch");
        }
        const Var h = seq_hidden(tape, params, content, ex.inputs, max_len);
        for (std::size_t p = 0; p < ex.targets.size(); ++p) {
            std::vector<int> cands;
            cands.push_back(ex.targets[p]);
            cands.insert(cands.end(), ex.negatives[p].begin(), ex.negatives[p].end());
            const Var y = tape.add(tape.gather_rows(item_emb, cands), tape.constant(gather_plain(content, cands)));
            const Var h_p = tape.slice(h, static_cast<int>(p), 0, 1, d);
            const Var logits = tape.matmul(h_p, tape.transpose(y));
            const Var nll = tape.scale(tape.slice(tape.log_softmax_rows(logits), 0, 0, 1, 1), -1.0);
            total = total.valid() ? tape.add(total, nll) : nll;
            ++positions;
        }
    }
    if (positions == 0) throw std::invalid_argument("seq_batch_loss: batch has no scored positions");
    return tape.scale(total, 1.0 / positions);
}

SeqTrainResult seq_train(const LooSplit& split, const std::vector<std::string>& item_ids,
                         const Matrix& content, const RecConfig& cfg) {
    validate_rec_config(cfg);
    const int n_items = static_cast<int>(item_ids.size());
    if (n_items < 2) throw std::invalid_argument("seq_train: need at least 2 items");
    check_content(content, n_items, cfg.d_r);
    const std::map<std::string, int> item_index = build_index(item_ids);

    SeqTrainResult result;
    SeqModel& model = result.model;
    model.item_ids = item_ids;
    model.d_r = cfg.d_r;
    model.max_len = cfg.max_seq_len;
    model.content = content;
    model.params = init_seq_params(n_items, cfg);

    std::vector<std::vector<int>> sequences;
    for (const UserSplit& us : split.users) {
        std::vector<int> seq;
        for (const std::string& id : us.train) {
            auto it = item_index.find(id);
            if (it == item_index.end()) throw std::invalid_argument("seq_train: item " + id + " not in catalog");
            seq.push_back(it->second);
        }
        if (seq.size() < 2) {
            ++result.skipped_users;
            continue;
        }
        sequences.push_back(std::move(seq));
    }
    if (cfg.steps == 0 || sequences.empty()) return result;

    AdamConfig adam;
    adam.lr = cfg.learning_rate;
    TrainerState state(adam);
    Rng rng(derive_seed(cfg.seed, "seq_sampling"));

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<SeqExample> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::vector<int>& seq = sequences[rng.uniform_int(0, static_cast<int>(sequences.size()) - 1)];
            // Last window of at most max_len transitions.
            const int len = std::min<int>(static_cast<int>(seq.size()), cfg.max_seq_len + 1);
            const int start = static_cast<int>(seq.size()) - len;
            SeqExample ex;
            for (int i = 0; i + 1 < len; ++i) {
                const int target = seq[start + i + 1];
                ex.inputs.push_back(seq[start + i]);
                ex.targets.push_back(target);
                std::vector<int> negs;
                negs.reserve(cfg.neg_samples);
                while (static_cast<int>(negs.size()) < cfg.neg_samples) {
                    const int cand = static_cast<int>(rng.uniform_int(0, n_items - 1));
                    if (cand != target) negs.push_back(cand);
                }
                ex.negatives.push_back(std::move(negs));
            }
            batch.push_back(std::move(ex));
        }

        Tape tape;
        std::map<std::string, Var> vars;
        for (const auto& [name, value] : model.params) vars.emplace(name, tape.param(name, value));
        const Var loss = seq_batch_loss(tape, vars, content, batch, cfg.max_seq_len);
        tape.backward(loss);

        ParamMap grads;
        for (const auto& [name, var] : vars) grads.emplace(name, tape.grad(var));
        const double norm = clip_global_norm(grads, cfg.clip_norm);
        state.opt.step(model.params, grads);
        state.record(step, loss.value()(0, 0), norm);
    }
    state.finish();
    result.log = std::move(state.log);
    return result;
}

std::vector<double> score_all(const SeqModel& model, const std::vector<std::string>& history) {
    if (history.empty()) throw std::invalid_argument("seq score_all: empty history");
    const std::map<std::string, int> item_index = build_index(model.item_ids);
    std::vector<int> idx;
    for (const std::string& id : history) {
        auto it = item_index.find(id);
        if (it == item_index.end()) throw std::invalid_argument("seq score_all: item " + id + " not in catalog");
        idx.push_back(it->second);
    }
    if (static_cast<int>(idx.size()) > model.max_len) {
        idx.erase(idx.begin(), idx.end() - model.max_len);
    }

    const Matrix h = seq_hidden_value(model, idx);
    Matrix last(1, model.d_r);
    for (int c = 0; c < model.d_r; ++c) last(0, c) = h(h.rows() - 1, c);
    const Matrix y = model.params.at("item_emb") + model.content;
    const Matrix s = matmul(y, transpose(last));
    std::vector<double> scores(model.item_ids.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = s(static_cast<int>(i), 0);
    return scores;
}

} // namespace sda
