#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sda/adapters.hpp"
#include "sda/backbone.hpp"
#include "sda/cmsa.hpp"
#include "sda/data.hpp"

namespace sda {

enum class LossKind { kCmsa, kInfonce };

const char* to_string(LossKind k);

struct AdaptConfig {
    LossKind loss = LossKind::kCmsa;
    AdapterKind adapter = AdapterKind::kModa;
    // Which projections receive adapters, matched as a suffix against site
    // names; q/k by default.
    std::vector<std::string> target_projections = {"q_proj", "k_proj"};
    int batch_size = 32;
    int steps = 1000;
    double learning_rate = 1e-3;
    double tau = 0.07;
    TeacherTempMode teacher_temp_mode = TeacherTempMode::kMultiply;
    bool detach_teacher = true;
    ModaHyper moda;
    int lora_rank = 8;
    double clip_norm = 5.0; // global-norm gradient clip; safeguard, not tuning
    std::uint64_t seed = 1;
};

struct StepLog {
    int step = 0; // 1-based
    double loss = 0.0;
    double grad_norm = 0.0;        // global, before clipping
    double expert_grad_norm = 0.0; // B/A matrices
    double gate_grad_norm = 0.0;   // gate affine + modality embeddings
};

struct TrainLog {
    std::vector<StepLog> steps;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double wall_seconds = 0.0;
};

struct Stage1Result {
    AdapterSet adapters;
    TrainLog log;
};

// Loss went non-finite; carries the 1-based step where it happened.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int step, const std::string& what) : std::runtime_error(what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

// Seeded epoch shuffle; yields full batches only, so a short remainder is
// dropped each epoch.
class BatchSampler {
public:
    BatchSampler(int n_items, int batch_size, std::uint64_t seed);
    std::vector<int> next();
    int epochs_started() const { return epoch_; }

private:
    int n_;
    int batch_;
    int cursor_;
    int epoch_ = 0;
    std::uint64_t seed_;
    std::vector<int> order_;
};

// All batches of one epoch, in emission order (test/oracle view of the
// sampler's schedule).
std::vector<std::vector<int>> epoch_batches(int n_items, int batch_size, std::uint64_t seed, int epoch);

// Both towers' embeddings for the given catalog rows, recorded on the tape.
// Returns (E_t, E_v) stacked item-per-row.
std::pair<Var, Var> encode_batch(Tape& tape, const FrozenEncoder& encoder, const ItemCatalog& catalog,
                                 const std::vector<int>& idx, BoundAdapters* adapters);

// Stage 1: train only the adapter parameters against the alignment loss.
// The encoder is frozen throughout (its weight hash is unchanged). With
// adapter=none this returns an empty set and no training happens. steps=0 is
// allowed and returns the freshly initialized (untrained) adapters.
Stage1Result run_stage1(const FrozenEncoder& encoder, const ItemCatalog& catalog, const AdaptConfig& cfg);

// The adapter sites selected by the config's target projections.
std::vector<AdapterSite> select_sites(const FrozenEncoder& encoder, const std::vector<std::string>& target_projections);

// Fresh (untrained) adapter set as run_stage1 would initialize it.
AdapterSet init_adapters(const FrozenEncoder& encoder, const AdaptConfig& cfg);

} // namespace sda
