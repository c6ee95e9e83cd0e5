#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sda/adapters.hpp"
#include "sda/backbone.hpp"
#include "sda/data.hpp"
#include "sda/matrix.hpp"
#include "sda/tape.hpp"

namespace sda {

// One modality's embeddings for a whole catalog, in catalog order. Values
// are kept at 32-bit precision (quantized when the table is built) so disk
// round-trips are bit-exact.
struct EmbeddingTable {
    std::string modality;              // "text" | "image"
    std::vector<std::string> item_ids; // row i embeds item_ids[i]
    Matrix rows{0, 0};                 // n_items x d_m
    // Free-form provenance (config hash, seed, adapter checkpoint id, ...)
    // persisted with the table so downstream stages can refuse stale inputs.
    std::map<std::string, std::string> provenance;

    int size() const { return rows.rows(); }
    int dim() const { return rows.cols(); }
    int index(const std::string& item_id) const; // throws if unknown
};

// Header line of JSON followed by little-endian float32 rows. Writes go to a
// temporary file first and rename into place, so readers never see a partial
// table. Truncated or oversized payloads and header/shape disagreements are
// rejected on load.
void save_embeddings(const EmbeddingTable& table, const std::string& path);
EmbeddingTable load_embeddings(const std::string& path);

// Named parameter blobs plus a flat config snapshot. The same format backs
// adapter and recommender checkpoints; `kind` says which. Saving what load
// returned reproduces the file byte for byte.
struct Checkpoint {
    std::string kind; // "adapters" | "bpr" | "seq"
    std::map<std::string, std::string> config;
    ParamMap params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Runs the frozen encoder (plus adapters, if any) over every item and
// returns the text and image tables in catalog order. Values are quantized
// to 32-bit floats. n_threads > 1 splits the catalog into contiguous chunks;
// the result is identical to the serial run.
std::pair<EmbeddingTable, EmbeddingTable> embed_catalog(const ItemCatalog& catalog,
                                                        const FrozenEncoder& encoder,
                                                        const AdapterSet& adapters,
                                                        int n_threads = 1);

// FNV-1a over a file's bytes, as a fixed-width hex string; the currency of
// provenance checks between pipeline stages.
std::string file_hash_hex(const std::string& path);
std::string hash_hex(std::uint64_t h);

// Writes content to path via a temporary sibling + rename.
void atomic_write_text(const std::string& path, const std::string& content);

} // namespace sda
