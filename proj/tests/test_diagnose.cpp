#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "sda/adapt.hpp"
#include "sda/diagnose.hpp"
#include "sda/rng.hpp"

using namespace sda;

namespace {

SynthConfig small_synth() {
    SynthConfig cfg;
    cfg.n_items = 20;
    cfg.n_users = 8;
    cfg.n_clusters = 4;
    cfg.token_count = 4;
    cfg.feature_width = 8;
    cfg.latent_dim = 8;
    cfg.interactions_per_user = 8;
    cfg.seed = 31;
    return cfg;
}

BackboneConfig small_backbone() {
    BackboneConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 12;
    cfg.token_count = 4;
    cfg.feature_width = 8;
    cfg.embed_dim = 6;
    cfg.seed = 41;
    return cfg;
}

AdaptConfig small_adapt(AdapterKind kind) {
    AdaptConfig cfg;
    cfg.adapter = kind;
    cfg.moda.rank = 4;
    cfg.moda.n_experts = 2;
    cfg.moda.gate_dim = 4;
    cfg.lora_rank = 4;
    cfg.seed = 51;
    return cfg;
}

// Fresh adapters carry B = 0; perturb every parameter so gradients flow
// through non-degenerate weights.
AdapterSet randomized_adapters(const FrozenEncoder& encoder, AdapterKind kind, std::uint64_t seed) {
    AdapterSet set = init_adapters(encoder, small_adapt(kind));
    ParamMap params = set.to_params();
    Rng rng(seed);
    for (auto& [name, m] : params) {
        for (double& v : m.data()) v += rng.normal(0.0, 0.2);
    }
    set.set_params(params);
    return set;
}

std::vector<int> probe_batch(int n) {
    std::vector<int> batch;
    for (int i = 0; i < n; ++i) batch.push_back(i);
    return batch;
}

} // namespace

TEST_SUITE("diagnose") {

TEST_CASE("isolated gradients sum to the full gradient") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const CmsaOptions opts;

    for (AdapterKind kind : {AdapterKind::kModa, AdapterKind::kLora}) {
        CAPTURE(to_string(kind));
        const AdapterSet adapters = randomized_adapters(encoder, kind, 61);
        const std::string param =
            kind == AdapterKind::kModa ? "layer1.q_proj.expert0.B" : "layer1.q_proj.B";
        const IsolatedGradients iso =
            modality_isolated_gradients(encoder, synth.catalog, probe_batch(6), adapters, opts, param);
        CHECK(iso.decomposition_gap < 1e-8);
        CHECK(max_abs_diff(iso.full, iso.text + iso.image) < 1e-8);
        // Both branches really contribute: the halves differ from the total.
        CHECK(max_abs_diff(iso.full, iso.text) > 1e-10);
        CHECK(max_abs_diff(iso.full, iso.image) > 1e-10);
    }
}

TEST_CASE("blocking both branches zeroes the gradient") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 62);

    Tape tape;
    BoundAdapters bound = adapters.bind(tape);
    const Var loss = branch_blocked_loss(tape, encoder, synth.catalog, probe_batch(5), bound,
                                         CmsaOptions{}, BranchBlock::kBlockBoth);
    tape.backward(loss);
    for (const auto& [name, idx] : tape.params()) {
        (void)idx;
        CHECK(tape.grad(name).max_abs() == 0.0);
    }
}

TEST_CASE("blocked-branch loss values all match the unblocked loss") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 63);

    std::vector<double> values;
    for (BranchBlock block : {BranchBlock::kNone, BranchBlock::kBlockText, BranchBlock::kBlockImage,
                              BranchBlock::kBlockBoth}) {
        Tape tape;
        BoundAdapters bound = adapters.bind(tape);
        const Var loss =
            branch_blocked_loss(tape, encoder, synth.catalog, probe_batch(5), bound, CmsaOptions{}, block);
        values.push_back(loss.value()(0, 0));
    }
    for (double v : values) CHECK(v == doctest::Approx(values[0]).epsilon(1e-14));
}

TEST_CASE("text-isolated gradient matches a frozen-teacher finite difference") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 64);
    const std::vector<int> batch = probe_batch(5);
    const CmsaOptions opts;
    const std::string param = "layer0.k_proj.expert0.B";

    const IsolatedGradients iso =
        modality_isolated_gradients(encoder, synth.catalog, batch, adapters, opts, param);

    // Freeze the image embeddings and the teacher at the unperturbed point,
    // then difference the remaining scalar function of the probed matrix.
    const int n = static_cast<int>(batch.size());
    auto embed_rows = [&](const AdapterSet& set, Modality m) {
        Matrix rows(n, encoder.config().embed_dim);
        for (int i = 0; i < n; ++i) {
            const Item& item = synth.catalog.items[batch[i]];
            const Matrix e = encoder.encode_value(m == Modality::kText ? item.text_features : item.image_features,
                                                  m, &set);
            for (int c = 0; c < rows.cols(); ++c) rows(i, c) = e(0, c);
        }
        return rows;
    };
    const Matrix e_t0 = embed_rows(adapters, Modality::kText);
    const Matrix e_v0 = embed_rows(adapters, Modality::kImage);
    AlignmentBatch ab{e_t0, e_v0, opts.tau};
    const Matrix teacher = soft_target(ab, opts.teacher_temp_mode);

    auto loss_at = [&](const ParamMap& params) {
        AdapterSet moved = adapters;
        moved.set_params(params);
        const Matrix e_t = embed_rows(moved, Modality::kText);
        const Matrix s = scale(matmul(e_t, transpose(e_v0)), 1.0 / opts.tau);
        const Matrix p_rows = softmax_rows(s);
        const Matrix p_cols = softmax_rows(transpose(s));
        double loss = 0.0;
        for (int i = 0; i < n; ++i) {
            loss += kl_div(teacher.row(i), p_rows.row(i));
            loss += kl_div(teacher.row(i), p_cols.row(i));
        }
        return loss / (2.0 * n);
    };

    const ParamMap base = adapters.to_params();
    const double eps = 1e-5;
    Rng pick(65);
    const Matrix& b0 = base.at(param);
    for (int probe = 0; probe < 6; ++probe) {
        const int r = static_cast<int>(pick.uniform_int(0, b0.rows() - 1));
        const int c = static_cast<int>(pick.uniform_int(0, b0.cols() - 1));
        ParamMap up = base, down = base;
        up.at(param)(r, c) += eps;
        down.at(param)(r, c) -= eps;
        const double numeric = (loss_at(up) - loss_at(down)) / (2.0 * eps);
        const double analytic = iso.text(r, c);
        const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-8});
        CHECK(std::fabs(numeric - analytic) / denom < 1e-4);
    }
}

TEST_CASE("conflict report covers the last-layer q and k sites") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 66);

    const ConflictReport report = conflict_report(encoder, synth.catalog, adapters, CmsaOptions{}, 6, 17);
    CHECK(report.kind == AdapterKind::kModa);
    CHECK(report.seed == 17);
    CHECK(report.batch.size() == 6);
    REQUIRE(report.entries.size() == 2);
    CHECK(report.entries[0].site == "layer1.q_proj");
    CHECK(report.entries[0].param == "layer1.q_proj.expert0.B");
    CHECK(report.entries[1].site == "layer1.k_proj");
    for (const ConflictEntry& e : report.entries) {
        CHECK(e.defined);
        CHECK(e.cosine >= -1.0 - 1e-12);
        CHECK(e.cosine <= 1.0 + 1e-12);
        CHECK(e.text_norm > 0.0);
        CHECK(e.image_norm > 0.0);
    }
}

TEST_CASE("conflict report is deterministic in the seed") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kLora, 67);

    const ConflictReport a = conflict_report(encoder, synth.catalog, adapters, CmsaOptions{}, 5, 23);
    const ConflictReport b = conflict_report(encoder, synth.catalog, adapters, CmsaOptions{}, 5, 23);
    REQUIRE(a.entries.size() == b.entries.size());
    CHECK(a.batch == b.batch);
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].cosine == b.entries[i].cosine);
        CHECK(a.entries[i].param == a.entries[i].site + ".B"); // LoRA probe naming
    }
    const ConflictReport c = conflict_report(encoder, synth.catalog, adapters, CmsaOptions{}, 5, 24);
    CHECK(a.batch != c.batch);
}

TEST_CASE("conflict cosine ignores a uniform gradient rescaling") {
    // Cosine is computed from the two branch gradients; scaling the loss
    // (here via the 1/2N batch-size factor) must not move it.
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 68);
    const std::string param = "layer1.q_proj.expert0.B";
    const IsolatedGradients iso = modality_isolated_gradients(encoder, synth.catalog, probe_batch(4),
                                                              adapters, CmsaOptions{}, param);
    const double cos_raw = dot_all(iso.text, iso.image) / (iso.text.frobenius_norm() * iso.image.frobenius_norm());
    const Matrix t2 = scale(iso.text, 7.25);
    const Matrix v2 = scale(iso.image, 7.25);
    const double cos_scaled = dot_all(t2, v2) / (t2.frobenius_norm() * v2.frobenius_norm());
    CHECK(cos_raw == doctest::Approx(cos_scaled).epsilon(1e-12));
}

TEST_CASE("json report carries the cosine only when defined") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 69);
    const ConflictReport report = conflict_report(encoder, synth.catalog, adapters, CmsaOptions{}, 4, 5);
    const std::string json = conflict_report_json(report);
    CHECK(json.find("\"adapter\": \"moda\"") != std::string::npos);
    CHECK(json.find("\"cosine\"") != std::string::npos);

    ConflictReport undefined = report;
    undefined.entries[0].defined = false;
    undefined.entries.resize(1);
    const std::string json2 = conflict_report_json(undefined);
    CHECK(json2.find("\"cosine\"") == std::string::npos);
}

TEST_CASE("diagnostics validate their inputs") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet adapters = randomized_adapters(encoder, AdapterKind::kModa, 70);
    const CmsaOptions opts;

    CHECK_THROWS_AS((void)modality_isolated_gradients(encoder, synth.catalog, probe_batch(4),
                                                      AdapterSet::none(), opts, "x"),
                    std::invalid_argument);
    CHECK_THROWS_WITH_AS((void)modality_isolated_gradients(encoder, synth.catalog, probe_batch(4),
                                                           adapters, opts, "layer1.q_proj.expert9.B"),
                         doctest::Contains("unknown adapter parameter"), std::invalid_argument);
    CHECK_THROWS_AS((void)modality_isolated_gradients(encoder, synth.catalog, {0}, adapters, opts,
                                                      "layer1.q_proj.expert0.B"),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)conflict_report(encoder, synth.catalog, adapters, opts, 1, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)conflict_report(encoder, synth.catalog, adapters, opts, synth.catalog.size() + 1, 1),
                    std::invalid_argument);
    CHECK_THROWS_WITH_AS((void)conflict_report(encoder, synth.catalog, adapters, opts, 4, 1,
                                               {"layer7.q_proj"}),
                         doctest::Contains("no site"), std::invalid_argument);
}

} // TEST_SUITE
