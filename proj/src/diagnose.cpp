#include "sda/diagnose.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "sda/rng.hpp"

namespace sda {

namespace {

// Recorded embedding rows for one tower, or the same values as a constant
// when the branch is blocked; either way the numbers are identical, only the
// gradient path changes.
Var tower_rows(Tape& tape, const FrozenEncoder& encoder, const ItemCatalog& catalog,
               const std::vector<int>& batch, BoundAdapters& bound, Modality m, bool blocked) {
    std::vector<Var> rows;
    rows.reserve(batch.size());
    for (int idx : batch) {
        if (idx < 0 || idx >= catalog.size()) throw std::out_of_range("diagnose: batch row out of range");
        const Item& item = catalog.items[idx];
        const Matrix& feats = m == Modality::kText ? item.text_features : item.image_features;
        rows.push_back(encoder.encode(tape, feats, m, &bound));
    }
    Var stacked = tape.concat_rows(rows);
    if (blocked) return tape.constant(stacked.value());
    return stacked;
}

std::string probe_param(const AdapterSet& adapters, const std::string& site) {
    if (!adapters.has_site(site)) {
        throw std::invalid_argument("diagnose: adapter set has no site " + site);
    }
    return adapters.kind() == AdapterKind::kModa ? site + ".expert0.B" : site + ".B";
}

} // namespace

Var branch_blocked_loss(Tape& tape, const FrozenEncoder& encoder, const ItemCatalog& catalog,
                        const std::vector<int>& batch, BoundAdapters& bound, const CmsaOptions& opts,
                        BranchBlock block) {
    if (batch.size() < 2) throw std::invalid_argument("diagnose: batch must have at least 2 items");
    const bool block_text = block == BranchBlock::kBlockText || block == BranchBlock::kBlockBoth;
    const bool block_image = block == BranchBlock::kBlockImage || block == BranchBlock::kBlockBoth;
    Var e_t = tower_rows(tape, encoder, catalog, batch, bound, Modality::kText, block_text);
    Var e_v = tower_rows(tape, encoder, catalog, batch, bound, Modality::kImage, block_image);
    return cmsa_loss(tape, e_t, e_v, opts);
}

IsolatedGradients modality_isolated_gradients(const FrozenEncoder& encoder, const ItemCatalog& catalog,
                                              const std::vector<int>& batch, const AdapterSet& adapters,
                                              const CmsaOptions& opts, const std::string& param) {
    if (adapters.empty()) {
        throw std::invalid_argument("diagnose: adapter set is empty; nothing carries a gradient");
    }
    if (adapters.to_params().count(param) == 0) {
        throw std::invalid_argument("diagnose: unknown adapter parameter " + param);
    }

    auto grad_for = [&](BranchBlock block) {
        Tape tape;
        BoundAdapters bound = adapters.bind(tape);
        const Var loss = branch_blocked_loss(tape, encoder, catalog, batch, bound, opts, block);
        tape.backward(loss);
        return tape.grad(param);
    };

    IsolatedGradients out;
    out.param = param;
    out.text = grad_for(BranchBlock::kBlockImage);
    out.image = grad_for(BranchBlock::kBlockText);
    out.full = grad_for(BranchBlock::kNone);
    out.decomposition_gap = max_abs_diff(out.full, out.text + out.image);
    return out;
}

std::vector<std::string> default_conflict_sites(const FrozenEncoder& encoder) {
    const int last = encoder.config().layers - 1;
    const std::string prefix = "layer" + std::to_string(last) + ".";
    return {prefix + "q_proj", prefix + "k_proj"};
}

ConflictReport conflict_report(const FrozenEncoder& encoder, const ItemCatalog& catalog,
                               const AdapterSet& adapters, const CmsaOptions& opts, int batch_size,
                               std::uint64_t seed, const std::vector<std::string>& sites) {
    if (adapters.empty()) throw std::invalid_argument("conflict_report: adapter set is empty");
    if (batch_size < 2) throw std::invalid_argument("conflict_report: batch_size must be >= 2");
    if (batch_size > catalog.size()) {
        throw std::invalid_argument("conflict_report: batch_size exceeds catalog size");
    }

    ConflictReport report;
    report.kind = adapters.kind();
    report.seed = seed;

    std::vector<int> order(catalog.size());
    for (int i = 0; i < catalog.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "probe"));
    rng.shuffle(order);
    report.batch.assign(order.begin(), order.begin() + batch_size);

    for (const std::string& site : sites.empty() ? default_conflict_sites(encoder) : sites) {
        const std::string param = probe_param(adapters, site);
        const IsolatedGradients iso =
            modality_isolated_gradients(encoder, catalog, report.batch, adapters, opts, param);
        ConflictEntry entry;
        entry.site = site;
        entry.param = param;
        entry.text_norm = iso.text.frobenius_norm();
        entry.image_norm = iso.image.frobenius_norm();
        entry.defined = entry.text_norm >= 1e-12 && entry.image_norm >= 1e-12;
        if (entry.defined) {
            entry.cosine = dot_all(iso.text, iso.image) / (entry.text_norm * entry.image_norm);
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

std::string conflict_report_json(const ConflictReport& report) {
    nlohmann::json entries = nlohmann::json::array();
    for (const ConflictEntry& e : report.entries) {
        nlohmann::json j = {
            {"site", e.site},
            {"param", e.param},
            {"defined", e.defined},
            {"text_norm", e.text_norm},
            {"image_norm", e.image_norm},
        };
        if (e.defined) j["cosine"] = e.cosine;
        entries.push_back(std::move(j));
    }
    nlohmann::json j = {
        {"adapter", to_string(report.kind)},
        {"seed", report.seed},
        {"batch", report.batch},
        {"entries", entries},
    };
    return j.dump(2) + "\n";
}

} // namespace sda
