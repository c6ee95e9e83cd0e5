#include "sda/adapt.hpp"

#include <chrono>
#include <cmath>

#include "sda/adam.hpp"
#include "sda/grad_check.hpp"
#include "sda/rng.hpp"

namespace sda {

const char* to_string(LossKind k) {
    return k == LossKind::kCmsa ? "cmsa" : "infonce";
}

namespace {

std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "epoch|" + std::to_string(epoch)));
    rng.shuffle(order);
    return order;
}

bool is_gate_param(const std::string& name) {
    return name.find(".gate.") != std::string::npos || name.find(".emb.") != std::string::npos;
}

} // namespace

BatchSampler::BatchSampler(int n_items, int batch_size, std::uint64_t seed)
    : n_(n_items), batch_(batch_size), cursor_(0), seed_(seed) {
    if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
    if (batch_size > n_items) {
        throw std::invalid_argument("batch_size " + std::to_string(batch_size) + " exceeds catalog size " +
                                    std::to_string(n_items));
    }
}

std::vector<int> BatchSampler::next() {
    if (order_.empty() || cursor_ + batch_ > n_) {
        order_ = epoch_order(n_, seed_, epoch_);
        ++epoch_;
        cursor_ = 0;
    }
    std::vector<int> batch(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
    cursor_ += batch_;
    return batch;
}

std::vector<std::vector<int>> epoch_batches(int n_items, int batch_size, std::uint64_t seed, int epoch) {
    if (batch_size < 2 || batch_size > n_items) throw std::invalid_argument("invalid batch_size");
    std::vector<int> order = epoch_order(n_items, seed, epoch);
    std::vector<std::vector<int>> batches;
    for (int start = 0; start + batch_size <= n_items; start += batch_size) {
        batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
    }
    return batches;
}

std::pair<Var, Var> encode_batch(Tape& tape, const FrozenEncoder& encoder, const ItemCatalog& catalog,
                                 const std::vector<int>& idx, BoundAdapters* adapters) {
    if (idx.empty()) throw std::invalid_argument("encode_batch: empty index list");
    std::vector<Var> text_rows, image_rows;
    for (int i : idx) {
        const Item& item = catalog.items.at(i);
        text_rows.push_back(encoder.encode(tape, item.text_features, Modality::kText, adapters));
        image_rows.push_back(encoder.encode(tape, item.image_features, Modality::kImage, adapters));
    }
    return {tape.concat_rows(text_rows), tape.concat_rows(image_rows)};
}

std::vector<AdapterSite> select_sites(const FrozenEncoder& encoder,
                                      const std::vector<std::string>& target_projections) {
    if (target_projections.empty()) throw std::invalid_argument("no target projections configured");
    std::vector<AdapterSite> selected;
    for (const AdapterSite& site : encoder.list_sites()) {
        for (const std::string& suffix : target_projections) {
            const std::string want = "." + suffix;
            if (site.name.size() > want.size() &&
                site.name.compare(site.name.size() - want.size(), want.size(), want) == 0) {
                selected.push_back(site);
                break;
            }
        }
    }
    if (selected.empty()) {
        std::string joined;
        for (const std::string& s : target_projections) joined += (joined.empty() ? "" : ",") + s;
        throw std::invalid_argument("target projections [" + joined + "] match no encoder sites");
    }
    return selected;
}

AdapterSet init_adapters(const FrozenEncoder& encoder, const AdaptConfig& cfg) {
    if (cfg.adapter == AdapterKind::kNone) return AdapterSet::none();
    std::vector<AdapterSite> sites = select_sites(encoder, cfg.target_projections);
    const std::uint64_t init_seed = derive_seed(cfg.seed, "adapter_init");
    if (cfg.adapter == AdapterKind::kModa) return AdapterSet::moda(sites, cfg.moda, init_seed);
    return AdapterSet::lora(sites, cfg.lora_rank, init_seed);
}

Stage1Result run_stage1(const FrozenEncoder& encoder, const ItemCatalog& catalog, const AdaptConfig& cfg) {
    if (catalog.size() == 0) throw std::invalid_argument("stage 1: empty catalog");
    if (cfg.steps < 0) throw std::invalid_argument("stage 1: steps must be >= 0");
    if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("stage 1: learning_rate must be positive");
    if (!(cfg.tau > 0.0)) throw std::invalid_argument("stage 1: tau must be positive");

    const auto t0 = std::chrono::steady_clock::now();
    Stage1Result result;
    result.adapters = init_adapters(encoder, cfg);
    if (result.adapters.empty() || cfg.steps == 0) return result;

    BatchSampler sampler(catalog.size(), cfg.batch_size, derive_seed(cfg.seed, "batches"));
    ParamMap params = result.adapters.to_params();
    AdamOptimizer opt(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    CmsaOptions cmsa_opts{cfg.tau, cfg.teacher_temp_mode, cfg.detach_teacher};

    for (int step = 1; step <= cfg.steps; ++step) {
        result.adapters.set_params(params);
        std::vector<int> batch = sampler.next();
        Tape tape;
        BoundAdapters bound = result.adapters.bind(tape);
        Var loss;
        try {
            auto [e_t, e_v] = encode_batch(tape, encoder, catalog, batch, &bound);
            loss = cfg.loss == LossKind::kCmsa ? cmsa_loss(tape, e_t, e_v, cmsa_opts)
                                               : infonce_loss(tape, e_t, e_v, cfg.tau);
        } catch (const std::domain_error& e) {
            // The tape rejects non-finite intermediates; surface it as the
            // training-level event it is.
            throw DivergenceError(step, "stage 1 diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const double loss_value = loss.value()(0, 0);
        if (!std::isfinite(loss_value)) {
            throw DivergenceError(step, "stage 1 diverged at step " + std::to_string(step) +
                                            ": loss is not finite");
        }
        tape.backward(loss);

        ParamMap grads;
        double expert_sq = 0.0, gate_sq = 0.0;
        for (const auto& [name, value] : params) {
            Matrix g = tape.grad(name);
            const double sq = dot_all(g, g);
            (is_gate_param(name) ? gate_sq : expert_sq) += sq;
            grads.emplace(name, std::move(g));
        }
        StepLog entry;
        entry.step = step;
        entry.loss = loss_value;
        entry.grad_norm = clip_global_norm(grads, cfg.clip_norm);
        entry.expert_grad_norm = std::sqrt(expert_sq);
        entry.gate_grad_norm = std::sqrt(gate_sq);
        result.log.steps.push_back(entry);

        opt.step(params, grads);
    }
    result.adapters.set_params(params);
    result.log.initial_loss = result.log.steps.front().loss;
    result.log.final_loss = result.log.steps.back().loss;
    result.log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

} // namespace sda
