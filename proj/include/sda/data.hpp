#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sda/matrix.hpp"

namespace sda {

struct Item {
    std::string item_id;
    Matrix text_features;  // token_count x feature_width
    Matrix image_features; // token_count x feature_width
    int latent_cluster = -1; // ground truth for synthetic items, -1 = unknown
};

struct ItemCatalog {
    std::vector<Item> items;

    int size() const { return static_cast<int>(items.size()); }
    bool has(const std::string& item_id) const { return index_of.count(item_id) > 0; }
    int index(const std::string& item_id) const;
    void rebuild_index();

    std::map<std::string, int> index_of;
};

// Validates uniqueness of ids and uniform feature shapes, then indexes.
void validate_catalog(ItemCatalog& catalog);

struct Interaction {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;
};

struct InteractionLog {
    std::vector<Interaction> records;
    int size() const { return static_cast<int>(records.size()); }
};

struct SynthConfig {
    int n_items = 500;
    int n_users = 200;
    int n_clusters = 10;
    int token_count = 8;
    int feature_width = 16;
    int latent_dim = 16;
    // Rotation applied between the two modalities' latent maps; 0 = perfectly
    // aligned raw spaces, pi/2 = orthogonal (retrieval at chance).
    double misalignment_rotation_angle = 1.0471975511965976; // pi/3
    double tail_exponent = 1.2;       // Zipf popularity skew
    double target_tail_fraction = 0.3; // generator tunes the skew toward this
    int interactions_per_user = 30;
    double noise_scale = 0.05;
    double cluster_spread = 0.25; // within-cluster latent jitter
    std::uint64_t seed = 7;
};

void validate_synth_config(const SynthConfig& cfg);

struct SynthResult {
    ItemCatalog catalog;
    InteractionLog log;
    double tuned_tail_exponent = 0.0; // exponent actually used after tuning
};

// Items come from n_clusters latent centers; text tokens are a fixed linear
// map of the item latent, image tokens the same map after rotating the
// latent by the configured angle, both plus Gaussian noise. Users prefer a
// home cluster; item popularity within the preferred cluster follows a Zipf
// law whose exponent is tuned so roughly target_tail_fraction of items end
// up with fewer than four training interactions.
SynthResult generate(const SynthConfig& cfg);

// How often an item's text features land nearest (by cosine over mean-pooled
// tokens) to its own image features across the catalog. The oracle for the
// misalignment knob: 1.0 at angle 0 with no noise, chance at pi/2.
double cross_modal_retrieval_accuracy(const ItemCatalog& catalog);

// JSONL catalog: one object per line with item_id, text_features,
// image_features (token-major nested arrays, 32-bit values), latent_cluster
// (int or null). Malformed lines are reported with their line number.
void save_catalog(const ItemCatalog& catalog, const std::string& path);
ItemCatalog load_catalog(const std::string& path);

// CSV with header user_id,item_id,timestamp. Referential integrity against
// the catalog is checked when one is supplied.
void save_interactions(const InteractionLog& log, const std::string& path);
InteractionLog load_interactions(const std::string& path, const ItemCatalog* catalog = nullptr);

} // namespace sda
