#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "sda/adapt.hpp"

using namespace sda;

namespace {

BackboneConfig adapt_backbone() {
    BackboneConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 16;
    cfg.token_count = 4;
    cfg.feature_width = 8;
    cfg.embed_dim = 8;
    cfg.seed = 33;
    return cfg;
}

SynthConfig adapt_data() {
    SynthConfig cfg;
    cfg.n_items = 40;
    cfg.n_users = 10;
    cfg.n_clusters = 4;
    cfg.token_count = 4;
    cfg.feature_width = 8;
    cfg.latent_dim = 8;
    cfg.interactions_per_user = 6;
    cfg.seed = 19;
    return cfg;
}

AdaptConfig quick_adapt() {
    AdaptConfig cfg;
    cfg.batch_size = 8;
    cfg.steps = 40;
    cfg.learning_rate = 2e-3;
    cfg.moda.rank = 4;
    cfg.moda.n_experts = 2;
    cfg.moda.gate_dim = 4;
    cfg.seed = 3;
    return cfg;
}

} // namespace

TEST_SUITE("adapt") {

TEST_CASE("batch schedule: full batches only, seeded, covering the catalog") {
    auto batches = epoch_batches(10, 4, 5, 0);
    REQUIRE(batches.size() == 2); // remainder of 2 dropped
    std::set<int> seen;
    for (const auto& b : batches) {
        CHECK(b.size() == 4);
        for (int i : b) {
            CHECK(i >= 0);
            CHECK(i < 10);
            CHECK(seen.insert(i).second); // no repeats within an epoch
        }
    }
    CHECK(seen.size() == 8);

    CHECK(epoch_batches(10, 4, 5, 0) == batches); // same seed, same schedule
    CHECK(epoch_batches(10, 4, 6, 0) != batches);
    CHECK(epoch_batches(10, 4, 5, 1) != batches); // reshuffled per epoch

    BatchSampler sampler(10, 4, 5);
    CHECK(sampler.next() == batches[0]);
    CHECK(sampler.next() == batches[1]);
    auto epoch1 = epoch_batches(10, 4, 5, 1);
    CHECK(sampler.next() == epoch1[0]); // short remainder skipped
}

TEST_CASE("batch sampler rejects bad sizes") {
    CHECK_THROWS_AS(BatchSampler(10, 1, 5), std::invalid_argument);
    CHECK_THROWS_AS(BatchSampler(10, 11, 5), std::invalid_argument);
    CHECK_NOTHROW(BatchSampler(10, 10, 5));
}

TEST_CASE("site selection by projection suffix") {
    FrozenEncoder enc(adapt_backbone());
    auto sites = select_sites(enc, {"q_proj", "k_proj"});
    REQUIRE(sites.size() == 4);
    CHECK(sites[0].name == "layer0.q_proj");
    CHECK(sites[1].name == "layer0.k_proj");
    CHECK(sites[2].name == "layer1.q_proj");
    CHECK(sites[3].name == "layer1.k_proj");
    CHECK(select_sites(enc, {"o_proj"}).size() == 2);
    CHECK_THROWS_AS(select_sites(enc, {"z_proj"}), std::invalid_argument);
    CHECK_THROWS_AS(select_sites(enc, {}), std::invalid_argument);
}

TEST_CASE("adapter=none returns an empty set and raw embeddings") {
    FrozenEncoder enc(adapt_backbone());
    SynthResult data = generate(adapt_data());
    AdaptConfig cfg = quick_adapt();
    cfg.adapter = AdapterKind::kNone;
    Stage1Result r = run_stage1(enc, data.catalog, cfg);
    CHECK(r.adapters.empty());
    CHECK(r.log.steps.empty());
    const Item& item = data.catalog.items[0];
    Matrix raw = enc.encode_value(item.text_features, Modality::kText);
    Matrix via = enc.encode_value(item.text_features, Modality::kText, &r.adapters);
    CHECK(exactly_equal(raw, via));
}

TEST_CASE("training reduces the alignment loss on misaligned data") {
    FrozenEncoder enc(adapt_backbone());
    SynthResult data = generate(adapt_data());
    AdaptConfig cfg = quick_adapt();
    Stage1Result r = run_stage1(enc, data.catalog, cfg);
    REQUIRE(int(r.log.steps.size()) == cfg.steps);
    CHECK(r.log.final_loss < r.log.initial_loss);
    for (const StepLog& s : r.log.steps) {
        CHECK(std::isfinite(s.loss));
        CHECK(s.grad_norm >= 0.0);
    }
    // telemetry decomposes into the two parameter groups
    const StepLog& first = r.log.steps.front();
    const double combined = std::sqrt(first.expert_grad_norm * first.expert_grad_norm +
                                      first.gate_grad_norm * first.gate_grad_norm);
    CHECK(combined == doctest::Approx(first.grad_norm).epsilon(1e-9));
}

TEST_CASE("identical seeds give bit-identical adapters") {
    FrozenEncoder enc(adapt_backbone());
    SynthResult data = generate(adapt_data());
    AdaptConfig cfg = quick_adapt();
    cfg.steps = 15;
    Stage1Result a = run_stage1(enc, data.catalog, cfg);
    Stage1Result b = run_stage1(enc, data.catalog, cfg);
    ParamMap pa = a.adapters.to_params();
    ParamMap pb = b.adapters.to_params();
    REQUIRE(pa.size() == pb.size());
    for (const auto& [name, value] : pa) CHECK(exactly_equal(value, pb.at(name)));

    cfg.seed = 4;
    Stage1Result c = run_stage1(enc, data.catalog, cfg);
    bool any_diff = false;
    for (const auto& [name, value] : c.adapters.to_params()) {
        if (!exactly_equal(value, pa.at(name))) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("the backbone stays frozen through training") {
    FrozenEncoder enc(adapt_backbone());
    const std::uint64_t before = enc.weight_hash();
    SynthResult data = generate(adapt_data());
    AdaptConfig cfg = quick_adapt();
    cfg.steps = 10;
    run_stage1(enc, data.catalog, cfg);
    CHECK(enc.weight_hash() == before);
}

TEST_CASE("every ablation cell runs from config alone") {
    FrozenEncoder enc(adapt_backbone());
    SynthResult data = generate(adapt_data());
    for (LossKind loss : {LossKind::kCmsa, LossKind::kInfonce}) {
        for (AdapterKind kind : {AdapterKind::kModa, AdapterKind::kLora}) {
            AdaptConfig cfg = quick_adapt();
            cfg.steps = 3;
            cfg.loss = loss;
            cfg.adapter = kind;
            Stage1Result r = run_stage1(enc, data.catalog, cfg);
            CHECK(r.adapters.kind() == kind);
            CHECK(int(r.log.steps.size()) == 3);
            CHECK(std::isfinite(r.log.final_loss));
        }
    }
}

TEST_CASE("untrained adapters are a valid zero-step result") {
    FrozenEncoder enc(adapt_backbone());
    SynthResult data = generate(adapt_data());
    AdaptConfig cfg = quick_adapt();
    cfg.steps = 0;
    Stage1Result r = run_stage1(enc, data.catalog, cfg);
    CHECK(r.adapters.kind() == AdapterKind::kModa);
    CHECK(r.log.steps.empty());
    const Item& item = data.catalog.items[0];
    // zero-B init: embeddings still equal the raw encoder output
    Matrix raw = enc.encode_value(item.image_features, Modality::kImage);
    Matrix via = enc.encode_value(item.image_features, Modality::kImage, &r.adapters);
    CHECK(max_abs_diff(raw, via) == 0.0);
}

TEST_CASE("divergence aborts with the failing step index") {
    BackboneConfig bb = adapt_backbone();
    bb.normalize_embeddings = false; // unbounded embeddings so blow-up is possible
    FrozenEncoder enc(bb);
    SynthConfig dc = adapt_data();
    SynthResult data = generate(dc);
    AdaptConfig cfg = quick_adapt();
    // Steps this large make the expert matrix products overflow within a few
    // updates; the bounded nonlinearities keep anything smaller finite.
    cfg.learning_rate = 1e200;
    cfg.steps = 10;
    try {
        run_stage1(enc, data.catalog, cfg);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step() >= 1);
        CHECK(std::string(e.what()).find(std::to_string(e.step())) != std::string::npos);
    }
}

TEST_CASE("config validation") {
    FrozenEncoder enc(adapt_backbone());
    SynthResult data = generate(adapt_data());
    AdaptConfig cfg = quick_adapt();
    cfg.batch_size = 100; // larger than the catalog
    CHECK_THROWS_AS(run_stage1(enc, data.catalog, cfg), std::invalid_argument);
    cfg = quick_adapt();
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(run_stage1(enc, data.catalog, cfg), std::invalid_argument);
    cfg = quick_adapt();
    ItemCatalog empty;
    CHECK_THROWS_AS(run_stage1(enc, empty, cfg), std::invalid_argument);
}

} // TEST_SUITE
