#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sda/adapt.hpp"
#include "sda/adapters.hpp"
#include "sda/backbone.hpp"
#include "sda/cmsa.hpp"
#include "sda/data.hpp"
#include "sda/matrix.hpp"

namespace sda {

// Per-modality decomposition of one adapter parameter's alignment-loss
// gradient. `text` is the gradient with the image branch held constant (and
// vice versa); with the detached teacher the two sum to the full gradient up
// to floating-point noise, and `decomposition_gap` reports the residual.
struct IsolatedGradients {
    std::string param; // full parameter name, e.g. layer1.q_proj.expert0.B
    Matrix text{0, 0};
    Matrix image{0, 0};
    Matrix full{0, 0};
    double decomposition_gap = 0.0;
};

// Which encoder branches stay recorded on the tape; a blocked branch
// contributes values but no gradient.
enum class BranchBlock { kNone, kBlockText, kBlockImage, kBlockBoth };

// Alignment loss over the given catalog rows with the chosen branch blocked,
// recorded on the tape against the bound adapters.
Var branch_blocked_loss(Tape& tape, const FrozenEncoder& encoder, const ItemCatalog& catalog,
                        const std::vector<int>& batch, BoundAdapters& bound, const CmsaOptions& opts,
                        BranchBlock block);

// Splits the alignment-loss gradient of `param` into its text-branch and
// image-branch parts over one probe batch. The adapter set must be non-empty
// and `param` one of its parameter names.
IsolatedGradients modality_isolated_gradients(const FrozenEncoder& encoder, const ItemCatalog& catalog,
                                              const std::vector<int>& batch, const AdapterSet& adapters,
                                              const CmsaOptions& opts, const std::string& param);

// Cosine between the text-isolated and image-isolated gradients at one site,
// probed on the first expert's B matrix (or the single B for LoRA). The
// cosine is undefined (defined = false) when either branch gradient has norm
// below 1e-12.
struct ConflictEntry {
    std::string site;
    std::string param;
    bool defined = false;
    double cosine = 0.0;
    double text_norm = 0.0;
    double image_norm = 0.0;
};

struct ConflictReport {
    AdapterKind kind = AdapterKind::kNone;
    std::uint64_t seed = 0;
    std::vector<int> batch; // probed catalog rows
    std::vector<ConflictEntry> entries;
};

// Default probe sites: q_proj and k_proj of the last encoder layer.
std::vector<std::string> default_conflict_sites(const FrozenEncoder& encoder);

// Measures per-site gradient conflict for one adapter set over a seeded
// probe batch drawn from the catalog.
ConflictReport conflict_report(const FrozenEncoder& encoder, const ItemCatalog& catalog,
                               const AdapterSet& adapters, const CmsaOptions& opts, int batch_size,
                               std::uint64_t seed, const std::vector<std::string>& sites = {});

std::string conflict_report_json(const ConflictReport& report);

} // namespace sda
