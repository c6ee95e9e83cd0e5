#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sda/matrix.hpp"
#include "sda/tape.hpp"

namespace sda {

class AdapterSet;
class BoundAdapters;

enum class Modality { kText, kImage };

const char* to_string(Modality m);
Modality parse_modality(const std::string& s);

struct BackboneConfig {
    int layers = 2;
    int hidden_dim = 64;
    int token_count = 8;
    int feature_width = 16;
    int embed_dim = 32; // d_m
    bool normalize_embeddings = true;
    std::uint64_t seed = 17;
};

// A projection inside a tower that can host a low-rank adapter.
struct AdapterSite {
    std::string name; // layer{k}.{q|k|v|o}_proj
    int d_in = 0;
    int d_out = 0;
};

// Frozen dual-tower encoder. Both towers share the architecture but carry
// independent weights, so the raw text and image embedding spaces are
// unaligned by construction. Weights are drawn once from the seed and never
// change; adapters are the only trainable pieces.
//
// Inputs are token matrices (token_count x feature_width), mean-pooled after
// the layer stack and projected to embed_dim. Rows are treated as row
// vectors: a projection maps h -> h * W with W of shape d_in x d_out.
class FrozenEncoder {
public:
    explicit FrozenEncoder(const BackboneConfig& cfg);

    const BackboneConfig& config() const { return cfg_; }

    // Stable order, unique names: layer0.q_proj ... layer{L-1}.o_proj.
    // Site names are shared by both towers; the frozen weight behind a name
    // differs per tower.
    const std::vector<AdapterSite>& list_sites() const { return sites_; }
    const AdapterSite* find_site(const std::string& name) const;
    const Matrix& site_weight(const std::string& name, Modality tower) const;

    // Tape-recorded encode; adapters (if given) contribute their deltas at
    // their sites and may be trained through the result. Returns 1 x d_m.
    Var encode(Tape& tape, const Matrix& features, Modality m, BoundAdapters* adapters = nullptr) const;

    // Forward-only convenience wrapper.
    Matrix encode_value(const Matrix& features, Modality m, const AdapterSet* adapters = nullptr) const;

    // Hash of every frozen weight; unchanged by any amount of adaptation.
    std::uint64_t weight_hash() const;

private:
    struct Tower {
        std::vector<Matrix> site_weights; // aligned with sites_
        Matrix output_proj;               // hidden_dim x embed_dim
    };
    const Tower& tower(Modality m) const { return m == Modality::kText ? text_ : image_; }

    BackboneConfig cfg_;
    std::vector<AdapterSite> sites_;
    Tower text_;
    Tower image_;
};

} // namespace sda
