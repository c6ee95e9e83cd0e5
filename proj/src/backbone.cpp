#include "sda/backbone.hpp"

#include <cmath>
#include <stdexcept>

#include "sda/adapters.hpp"
#include "sda/rng.hpp"

namespace sda {

const char* to_string(Modality m) {
    return m == Modality::kText ? "text" : "image";
}

Modality parse_modality(const std::string& s) {
    if (s == "text") return Modality::kText;
    if (s == "image") return Modality::kImage;
    throw std::invalid_argument("unknown modality '" + s + "' (expected text or image)");
}

namespace {

void validate_config(const BackboneConfig& cfg) {
    if (cfg.layers < 1) throw std::invalid_argument("backbone layers must be >= 1");
    if (cfg.hidden_dim < 1 || cfg.token_count < 1 || cfg.feature_width < 1 || cfg.embed_dim < 1) {
        throw std::invalid_argument("backbone dimensions must be positive");
    }
}

} // namespace

FrozenEncoder::FrozenEncoder(const BackboneConfig& cfg) : cfg_(cfg) {
    validate_config(cfg);
    static const char* kProj[] = {"q_proj", "k_proj", "v_proj", "o_proj"};
    for (int layer = 0; layer < cfg.layers; ++layer) {
        for (const char* p : kProj) {
            AdapterSite site;
            site.name = "layer" + std::to_string(layer) + "." + p;
            site.d_in = (layer == 0 && p == kProj[0]) ? cfg.feature_width : cfg.hidden_dim;
            site.d_out = cfg.hidden_dim;
            sites_.push_back(site);
        }
    }
    auto build_tower = [&](const char* tag) {
        Tower t;
        for (const AdapterSite& site : sites_) {
            Rng rng(derive_seed(cfg.seed, std::string(tag) + "|" + site.name));
            t.site_weights.push_back(
                gaussian_matrix(site.d_in, site.d_out, 1.0 / std::sqrt(double(site.d_in)), rng));
        }
        Rng rng(derive_seed(cfg.seed, std::string(tag) + "|output_proj"));
        t.output_proj =
            gaussian_matrix(cfg.hidden_dim, cfg.embed_dim, 1.0 / std::sqrt(double(cfg.hidden_dim)), rng);
        return t;
    };
    text_ = build_tower("text");
    image_ = build_tower("image");
}

const AdapterSite* FrozenEncoder::find_site(const std::string& name) const {
    for (const AdapterSite& s : sites_) {
        if (s.name == name) return &s;
    }
    return nullptr;
}

const Matrix& FrozenEncoder::site_weight(const std::string& name, Modality m) const {
    for (std::size_t i = 0; i < sites_.size(); ++i) {
        if (sites_[i].name == name) return tower(m).site_weights[i];
    }
    throw std::invalid_argument("unknown adapter site '" + name + "'");
}

Var FrozenEncoder::encode(Tape& tape, const Matrix& features, Modality m, BoundAdapters* adapters) const {
    if (features.rows() < 1) throw std::invalid_argument("encode: empty feature matrix");
    const Tower& tw = tower(m);
    Var h = tape.constant(features);
    for (std::size_t i = 0; i < sites_.size(); ++i) {
        const AdapterSite& site = sites_[i];
        if (h.value().cols() != site.d_in) {
            throw std::invalid_argument("encode: feature width " + std::to_string(h.value().cols()) +
                                        " does not match d_in=" + std::to_string(site.d_in) + " at " +
                                        site.name);
        }
        Var out = tape.matmul(h, tape.constant(tw.site_weights[i]));
        if (adapters != nullptr && adapters->has(site.name)) {
            out = tape.add(out, adapters->delta(tape, site.name, h, m));
        }
        h = out;
        if (i % 4 == 3) h = tape.tanh(h); // end of a block
    }
    // Mean-pool token rows, then project to the shared embedding space.
    Matrix pool(1, features.rows());
    for (int c = 0; c < features.rows(); ++c) pool(0, c) = 1.0 / double(features.rows());
    Var e = tape.matmul(tape.constant(pool), h);
    e = tape.matmul(e, tape.constant(tw.output_proj));
    if (cfg_.normalize_embeddings) e = tape.l2_normalize_rows(e);
    return e;
}

Matrix FrozenEncoder::encode_value(const Matrix& features, Modality m, const AdapterSet* adapters) const {
    Tape tape(false);
    if (adapters != nullptr && !adapters->empty()) {
        BoundAdapters bound = adapters->bind(tape);
        return encode(tape, features, m, &bound).value();
    }
    return encode(tape, features, m, nullptr).value();
}

std::uint64_t FrozenEncoder::weight_hash() const {
    std::uint64_t h = kFnvOffset;
    auto mix = [&h](const Matrix& w) {
        h = fnv1a(w.data().data(), w.data().size() * sizeof(double), h);
    };
    for (const Tower* t : {&text_, &image_}) {
        for (const Matrix& w : t->site_weights) mix(w);
        mix(t->output_proj);
    }
    return h;
}

} // namespace sda
