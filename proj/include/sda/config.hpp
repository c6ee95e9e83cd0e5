#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "sda/adapt.hpp"
#include "sda/backbone.hpp"
#include "sda/data.hpp"
#include "sda/recsys.hpp"

namespace sda {

// Bad configuration (file contents or flag values); maps to its own CLI exit
// code, distinct from data and divergence failures.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Missing, malformed, or provenance-mismatched input artifacts.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Every knob of the pipeline in one document. A single master seed feeds
// stable per-stage derived seeds; the per-stage seed fields inside the
// nested configs are outputs of resolve_run_config, not user-settable keys.
struct RunConfig {
    std::uint64_t seed = 7;

    SynthConfig data;
    BackboneConfig backbone;
    AdaptConfig adapt;
    RecConfig rec;

    int eval_k = 10;
    int eval_tail_threshold = 4;

    int diagnose_batch = 96;
    int diagnose_seeds = 10;
    // Adapter-training budget per diagnostic seed.  The probe runs early in
    // training, before convergence: once the loss plateaus the remaining
    // gradients are residual noise and the conflict statistic washes out.
    int diagnose_train_steps = 40;
};

// Parses the TOML-style document: [section] headers, key = value pairs,
// '#' comments, quoted or bare strings. Unknown sections or keys and
// malformed values raise ConfigError with the line number. The result is
// already resolved.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Applies one "section.key=value" (or "seed=value") override, then
// re-resolves. Bad paths or values raise ConfigError naming the override.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Derives per-stage seeds from the master seed and wires the cross-section
// invariants (the encoder's token grid matches the generator's).
void resolve_run_config(RunConfig& cfg);

// Canonical text form: fixed section/key order, normalized values. Stable
// under parse -> serialize round trips; the basis of config_hash.
std::string canonical_config(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

} // namespace sda
