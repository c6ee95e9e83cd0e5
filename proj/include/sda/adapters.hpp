#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sda/backbone.hpp"
#include "sda/matrix.hpp"
#include "sda/tape.hpp"

namespace sda {

enum class AdapterKind { kNone, kLora, kModa };
enum class GateActivation { kSoftmax, kIdentity };

const char* to_string(AdapterKind k);
const char* to_string(GateActivation a);

struct ModaHyper {
    int rank = 8;      // total low-rank budget r, split evenly across experts
    int n_experts = 4; // must divide rank
    int gate_dim = 8;  // modality embedding width d_g
    GateActivation activation = GateActivation::kSoftmax;
};

// Mixture of low-rank experts at one projection site. The update is
//   delta(x) = sum_i w_i * (x B_i) A_i,   B_i: d_in x r_e, A_i: r_e x d_out
// with r_e = rank / n_experts and gate weights w = act(Emb_m W_g + b_g)
// depending only on which modality is passing through. No extra scaling is
// applied on top of the mixture.
struct ModaAdapter {
    int d_in = 0;
    int d_out = 0;
    int rank = 0;
    int n_experts = 0;
    int gate_dim = 0;
    GateActivation activation = GateActivation::kSoftmax;

    std::vector<Matrix> expert_b; // n_experts of d_in x r_e, zero-init
    std::vector<Matrix> expert_a; // n_experts of r_e x d_out, small gaussian
    Matrix gate_weight;           // gate_dim x n_experts
    Matrix gate_bias;             // 1 x n_experts
    std::map<std::string, Matrix> modality_embeddings; // name -> 1 x gate_dim
};

// Classic LoRA at one site: delta(x) = (x B) A, zero at init because B = 0.
struct LoraAdapter {
    int d_in = 0;
    int d_out = 0;
    int rank = 0;
    Matrix b; // d_in x rank
    Matrix a; // rank x d_out
};

struct AdapterParamCount {
    long long expert_params = 0; // B/A matrices
    long long gate_params = 0;   // gate affine + modality embeddings
    long long total() const { return expert_params + gate_params; }
};

ModaAdapter make_moda_adapter(int d_in, int d_out, const ModaHyper& hyper, std::uint64_t seed);
LoraAdapter make_lora_adapter(int d_in, int d_out, int rank, std::uint64_t seed);

// Gate weights for one modality, forward-only. 1 x n_experts.
Matrix gate_weights(const ModaAdapter& ad, const std::string& modality);

// Materialized update sum_i w_i B_i A_i (d_in x d_out); diagnostics only,
// the forward pass never forms this product.
Matrix delta_weight(const ModaAdapter& ad, const std::string& modality);
Matrix delta_weight(const LoraAdapter& ad);

// Forward-only adapted projection x W0 + delta(x) for a single row vector.
Matrix moda_forward(const ModaAdapter& ad, const Matrix& w0, const Matrix& x, const std::string& modality);
Matrix lora_forward(const LoraAdapter& ad, const Matrix& w0, const Matrix& x);

AdapterParamCount param_count(const ModaAdapter& ad);
AdapterParamCount param_count(const LoraAdapter& ad);

// One adapter per encoder site, all of the same kind. Parameters flatten to
// a name -> Matrix map ("<site>.<local>") for optimizers and checkpoints.
class AdapterSet {
public:
    AdapterSet() = default;

    static AdapterSet none();
    static AdapterSet moda(const std::vector<AdapterSite>& sites, const ModaHyper& hyper, std::uint64_t seed);
    static AdapterSet lora(const std::vector<AdapterSite>& sites, int rank, std::uint64_t seed);

    AdapterKind kind() const { return kind_; }
    bool empty() const { return kind_ == AdapterKind::kNone; }
    bool has_site(const std::string& name) const;
    std::vector<std::string> site_names() const; // sorted

    const ModaAdapter& moda_at(const std::string& site) const;
    ModaAdapter& moda_at(const std::string& site);
    const LoraAdapter& lora_at(const std::string& site) const;
    LoraAdapter& lora_at(const std::string& site);

    const ModaHyper& moda_hyper() const;
    int lora_rank() const;

    AdapterParamCount param_count() const;

    // Trainable state as a flat map; set_params requires exactly the same
    // keys and shapes as to_params produces.
    ParamMap to_params() const;
    void set_params(const ParamMap& params);

    // Register every parameter on a tape. The returned handle caches gate
    // weights per (site, modality) so repeated rows reuse one gate node.
    BoundAdapters bind(Tape& tape) const;

private:
    friend class BoundAdapters;
    AdapterKind kind_ = AdapterKind::kNone;
    ModaHyper hyper_;
    int lora_rank_ = 0;
    std::map<std::string, ModaAdapter> moda_;
    std::map<std::string, LoraAdapter> lora_;
};

// Tape-bound view of an AdapterSet: holds the Vars for every parameter and
// produces the recorded delta(h) contribution at a site.
class BoundAdapters {
public:
    bool has(const std::string& site) const;
    AdapterKind kind() const { return kind_; }

    // h: n x d_in rows passing through `site`; returns the n x d_out update.
    Var delta(Tape& tape, const std::string& site, Var h, Modality m);

    // Cached 1 x n_experts gate weights node (MoDA only).
    Var gate_weights_var(Tape& tape, const std::string& site, Modality m);

    // Full parameter name ("<site>.<local>") -> registered Var.
    Var param(const std::string& full_name) const;

private:
    friend class AdapterSet;
    struct SiteBinding {
        std::vector<Var> expert_b;
        std::vector<Var> expert_a;
        Var gate_weight;
        Var gate_bias;
        std::map<std::string, Var> modality_embeddings;
        GateActivation activation = GateActivation::kSoftmax;
        std::map<std::string, Var> gate_cache; // modality -> gate node
        Var lora_b;
        Var lora_a;
    };
    AdapterKind kind_ = AdapterKind::kNone;
    std::map<std::string, SiteBinding> sites_;
    std::map<std::string, Var> by_name_;
};

} // namespace sda
