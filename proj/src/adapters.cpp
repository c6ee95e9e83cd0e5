#include "sda/adapters.hpp"

#include <sstream>
#include <stdexcept>

#include "sda/rng.hpp"

namespace sda {

namespace {

constexpr double kExpertInitStd = 0.02;

void validate_hyper(const ModaHyper& h) {
    if (h.rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
    if (h.n_experts < 1) throw std::invalid_argument("n_experts must be >= 1");
    if (h.rank % h.n_experts != 0) {
        throw std::invalid_argument("n_experts=" + std::to_string(h.n_experts) +
                                    " must divide rank=" + std::to_string(h.rank));
    }
    if (h.gate_dim < 1) throw std::invalid_argument("gate_dim must be >= 1");
}

std::string unknown_modality_message(const ModaAdapter& ad, const std::string& modality) {
    std::ostringstream os;
    os << "no modality embedding for '" << modality << "'; registered:";
    for (const auto& [name, emb] : ad.modality_embeddings) os << " " << name;
    return os.str();
}

Matrix gate_logits(const ModaAdapter& ad, const Matrix& emb) {
    Matrix z = matmul(emb, ad.gate_weight);
    z += ad.gate_bias;
    return z;
}

} // namespace

const char* to_string(AdapterKind k) {
    switch (k) {
    case AdapterKind::kNone: return "none";
    case AdapterKind::kLora: return "lora";
    case AdapterKind::kModa: return "moda";
    }
    return "none";
}

const char* to_string(GateActivation a) {
    return a == GateActivation::kSoftmax ? "softmax" : "identity";
}

ModaAdapter make_moda_adapter(int d_in, int d_out, const ModaHyper& hyper, std::uint64_t seed) {
    validate_hyper(hyper);
    if (d_in < 1 || d_out < 1) throw std::invalid_argument("adapter dims must be positive");
    ModaAdapter ad;
    ad.d_in = d_in;
    ad.d_out = d_out;
    ad.rank = hyper.rank;
    ad.n_experts = hyper.n_experts;
    ad.gate_dim = hyper.gate_dim;
    ad.activation = hyper.activation;
    const int re = hyper.rank / hyper.n_experts;
    for (int i = 0; i < hyper.n_experts; ++i) {
        ad.expert_b.emplace_back(d_in, re); // zero so the update starts at 0
        Rng rng(derive_seed(seed, "expert" + std::to_string(i)));
        ad.expert_a.push_back(gaussian_matrix(re, d_out, kExpertInitStd, rng));
    }
    ad.gate_weight = Matrix(hyper.gate_dim, hyper.n_experts);
    ad.gate_bias = Matrix(1, hyper.n_experts);
    for (const char* name : {"image", "text"}) {
        Rng rng(derive_seed(seed, std::string("emb|") + name));
        ad.modality_embeddings[name] = gaussian_matrix(1, hyper.gate_dim, 1.0, rng);
    }
    return ad;
}

LoraAdapter make_lora_adapter(int d_in, int d_out, int rank, std::uint64_t seed) {
    if (rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
    if (d_in < 1 || d_out < 1) throw std::invalid_argument("adapter dims must be positive");
    LoraAdapter ad;
    ad.d_in = d_in;
    ad.d_out = d_out;
    ad.rank = rank;
    ad.b = Matrix(d_in, rank);
    Rng rng(derive_seed(seed, "expert0"));
    ad.a = gaussian_matrix(rank, d_out, kExpertInitStd, rng);
    return ad;
}

Matrix gate_weights(const ModaAdapter& ad, const std::string& modality) {
    auto it = ad.modality_embeddings.find(modality);
    if (it == ad.modality_embeddings.end()) {
        throw std::invalid_argument(unknown_modality_message(ad, modality));
    }
    Matrix z = gate_logits(ad, it->second);
    if (ad.activation == GateActivation::kSoftmax) return softmax_rows(z);
    return z;
}

Matrix delta_weight(const ModaAdapter& ad, const std::string& modality) {
    Matrix w = gate_weights(ad, modality);
    Matrix delta(ad.d_in, ad.d_out);
    for (int i = 0; i < ad.n_experts; ++i) {
        Matrix term = matmul(ad.expert_b[i], ad.expert_a[i]);
        term *= w(0, i);
        delta += term;
    }
    return delta;
}

Matrix delta_weight(const LoraAdapter& ad) {
    return matmul(ad.b, ad.a);
}

Matrix moda_forward(const ModaAdapter& ad, const Matrix& w0, const Matrix& x, const std::string& modality) {
    if (w0.rows() != ad.d_in || w0.cols() != ad.d_out) {
        throw std::invalid_argument("moda_forward: base weight shape does not match adapter");
    }
    if (x.cols() != ad.d_in) throw std::invalid_argument("moda_forward: input width mismatch");
    Matrix w = gate_weights(ad, modality);
    Matrix out = matmul(x, w0);
    for (int i = 0; i < ad.n_experts; ++i) {
        Matrix term = matmul(matmul(x, ad.expert_b[i]), ad.expert_a[i]);
        term *= w(0, i);
        out += term;
    }
    return out;
}

Matrix lora_forward(const LoraAdapter& ad, const Matrix& w0, const Matrix& x) {
    if (w0.rows() != ad.d_in || w0.cols() != ad.d_out) {
        throw std::invalid_argument("lora_forward: base weight shape does not match adapter");
    }
    if (x.cols() != ad.d_in) throw std::invalid_argument("lora_forward: input width mismatch");
    Matrix out = matmul(x, w0);
    out += matmul(matmul(x, ad.b), ad.a);
    return out;
}

AdapterParamCount param_count(const ModaAdapter& ad) {
    AdapterParamCount c;
    const int re = ad.rank / ad.n_experts;
    c.expert_params = static_cast<long long>(ad.n_experts) * (static_cast<long long>(ad.d_in) * re + static_cast<long long>(re) * ad.d_out);
    c.gate_params = static_cast<long long>(ad.gate_dim) * ad.n_experts + ad.n_experts +
                    static_cast<long long>(ad.modality_embeddings.size()) * ad.gate_dim;
    return c;
}

AdapterParamCount param_count(const LoraAdapter& ad) {
    AdapterParamCount c;
    c.expert_params = static_cast<long long>(ad.d_in) * ad.rank + static_cast<long long>(ad.rank) * ad.d_out;
    c.gate_params = 0;
    return c;
}

AdapterSet AdapterSet::none() {
    return AdapterSet();
}

AdapterSet AdapterSet::moda(const std::vector<AdapterSite>& sites, const ModaHyper& hyper, std::uint64_t seed) {
    validate_hyper(hyper);
    if (sites.empty()) throw std::invalid_argument("adapter set needs at least one site");
    AdapterSet set;
    set.kind_ = AdapterKind::kModa;
    set.hyper_ = hyper;
    for (const AdapterSite& s : sites) {
        if (set.moda_.count(s.name) > 0) throw std::invalid_argument("duplicate adapter site '" + s.name + "'");
        set.moda_.emplace(s.name, make_moda_adapter(s.d_in, s.d_out, hyper, derive_seed(seed, s.name)));
    }
    return set;
}

AdapterSet AdapterSet::lora(const std::vector<AdapterSite>& sites, int rank, std::uint64_t seed) {
    if (sites.empty()) throw std::invalid_argument("adapter set needs at least one site");
    AdapterSet set;
    set.kind_ = AdapterKind::kLora;
    set.lora_rank_ = rank;
    for (const AdapterSite& s : sites) {
        if (set.lora_.count(s.name) > 0) throw std::invalid_argument("duplicate adapter site '" + s.name + "'");
        set.lora_.emplace(s.name, make_lora_adapter(s.d_in, s.d_out, rank, derive_seed(seed, s.name)));
    }
    return set;
}

bool AdapterSet::has_site(const std::string& name) const {
    return moda_.count(name) > 0 || lora_.count(name) > 0;
}

std::vector<std::string> AdapterSet::site_names() const {
    std::vector<std::string> names;
    for (const auto& [name, ad] : moda_) names.push_back(name);
    for (const auto& [name, ad] : lora_) names.push_back(name);
    return names;
}

const ModaAdapter& AdapterSet::moda_at(const std::string& site) const {
    auto it = moda_.find(site);
    if (it == moda_.end()) throw std::invalid_argument("no moda adapter at site '" + site + "'");
    return it->second;
}

ModaAdapter& AdapterSet::moda_at(const std::string& site) {
    auto it = moda_.find(site);
    if (it == moda_.end()) throw std::invalid_argument("no moda adapter at site '" + site + "'");
    return it->second;
}

const LoraAdapter& AdapterSet::lora_at(const std::string& site) const {
    auto it = lora_.find(site);
    if (it == lora_.end()) throw std::invalid_argument("no lora adapter at site '" + site + "'");
    return it->second;
}

LoraAdapter& AdapterSet::lora_at(const std::string& site) {
    auto it = lora_.find(site);
    if (it == lora_.end()) throw std::invalid_argument("no lora adapter at site '" + site + "'");
    return it->second;
}

const ModaHyper& AdapterSet::moda_hyper() const {
    if (kind_ != AdapterKind::kModa) throw std::logic_error("adapter set is not moda");
    return hyper_;
}

int AdapterSet::lora_rank() const {
    if (kind_ != AdapterKind::kLora) throw std::logic_error("adapter set is not lora");
    return lora_rank_;
}

AdapterParamCount AdapterSet::param_count() const {
    AdapterParamCount total;
    for (const auto& [name, ad] : moda_) {
        AdapterParamCount c = sda::param_count(ad);
        total.expert_params += c.expert_params;
        total.gate_params += c.gate_params;
    }
    for (const auto& [name, ad] : lora_) {
        AdapterParamCount c = sda::param_count(ad);
        total.expert_params += c.expert_params;
    }
    return total;
}

ParamMap AdapterSet::to_params() const {
    ParamMap out;
    for (const auto& [site, ad] : moda_) {
        for (int i = 0; i < ad.n_experts; ++i) {
            out[site + ".expert" + std::to_string(i) + ".B"] = ad.expert_b[i];
            out[site + ".expert" + std::to_string(i) + ".A"] = ad.expert_a[i];
        }
        out[site + ".gate.weight"] = ad.gate_weight;
        out[site + ".gate.bias"] = ad.gate_bias;
        for (const auto& [mod, emb] : ad.modality_embeddings) out[site + ".emb." + mod] = emb;
    }
    for (const auto& [site, ad] : lora_) {
        out[site + ".B"] = ad.b;
        out[site + ".A"] = ad.a;
    }
    return out;
}

void AdapterSet::set_params(const ParamMap& params) {
    ParamMap expected = to_params();
    if (params.size() != expected.size()) {
        throw std::invalid_argument("set_params: expected " + std::to_string(expected.size()) +
                                    " tensors, got " + std::to_string(params.size()));
    }
    for (const auto& [name, value] : params) {
        auto it = expected.find(name);
        if (it == expected.end()) throw std::invalid_argument("set_params: unexpected tensor '" + name + "'");
        if (!value.same_shape(it->second)) {
            throw std::invalid_argument("set_params: shape mismatch for '" + name + "'");
        }
    }
    auto take = [&params](const std::string& name) { return params.at(name); };
    for (auto& [site, ad] : moda_) {
        for (int i = 0; i < ad.n_experts; ++i) {
            ad.expert_b[i] = take(site + ".expert" + std::to_string(i) + ".B");
            ad.expert_a[i] = take(site + ".expert" + std::to_string(i) + ".A");
        }
        ad.gate_weight = take(site + ".gate.weight");
        ad.gate_bias = take(site + ".gate.bias");
        for (auto& [mod, emb] : ad.modality_embeddings) emb = take(site + ".emb." + mod);
    }
    for (auto& [site, ad] : lora_) {
        ad.b = take(site + ".B");
        ad.a = take(site + ".A");
    }
}

BoundAdapters AdapterSet::bind(Tape& tape) const {
    BoundAdapters bound;
    bound.kind_ = kind_;
    for (const auto& [site, ad] : moda_) {
        BoundAdapters::SiteBinding sb;
        sb.activation = ad.activation;
        for (int i = 0; i < ad.n_experts; ++i) {
            sb.expert_b.push_back(tape.param(site + ".expert" + std::to_string(i) + ".B", ad.expert_b[i]));
            sb.expert_a.push_back(tape.param(site + ".expert" + std::to_string(i) + ".A", ad.expert_a[i]));
        }
        sb.gate_weight = tape.param(site + ".gate.weight", ad.gate_weight);
        sb.gate_bias = tape.param(site + ".gate.bias", ad.gate_bias);
        for (const auto& [mod, emb] : ad.modality_embeddings) {
            sb.modality_embeddings[mod] = tape.param(site + ".emb." + mod, emb);
        }
        bound.sites_.emplace(site, std::move(sb));
    }
    for (const auto& [site, ad] : lora_) {
        BoundAdapters::SiteBinding sb;
        sb.lora_b = tape.param(site + ".B", ad.b);
        sb.lora_a = tape.param(site + ".A", ad.a);
        bound.sites_.emplace(site, std::move(sb));
    }
    for (const auto& [name, idx] : tape.params()) bound.by_name_.emplace(name, tape.param_var(name));
    return bound;
}

bool BoundAdapters::has(const std::string& site) const {
    return sites_.count(site) > 0;
}

Var BoundAdapters::gate_weights_var(Tape& tape, const std::string& site, Modality m) {
    auto it = sites_.find(site);
    if (it == sites_.end()) throw std::invalid_argument("no adapter bound at site '" + site + "'");
    if (kind_ != AdapterKind::kModa) throw std::logic_error("gate weights only exist for moda adapters");
    SiteBinding& sb = it->second;
    const std::string mod = to_string(m);
    auto cached = sb.gate_cache.find(mod);
    if (cached != sb.gate_cache.end()) return cached->second;
    auto eit = sb.modality_embeddings.find(mod);
    if (eit == sb.modality_embeddings.end()) {
        throw std::invalid_argument("no modality embedding for '" + mod + "' at site '" + site + "'");
    }
    Var z = tape.add(tape.matmul(eit->second, sb.gate_weight), sb.gate_bias);
    Var w = sb.activation == GateActivation::kSoftmax ? tape.softmax_rows(z) : z;
    sb.gate_cache.emplace(mod, w);
    return w;
}

Var BoundAdapters::delta(Tape& tape, const std::string& site, Var h, Modality m) {
    auto it = sites_.find(site);
    if (it == sites_.end()) throw std::invalid_argument("no adapter bound at site '" + site + "'");
    SiteBinding& sb = it->second;
    if (kind_ == AdapterKind::kLora) {
        return tape.matmul(tape.matmul(h, sb.lora_b), sb.lora_a);
    }
    Var w = gate_weights_var(tape, site, m);
    Var out;
    for (std::size_t i = 0; i < sb.expert_b.size(); ++i) {
        Var term = tape.matmul(tape.matmul(h, sb.expert_b[i]), sb.expert_a[i]);
        Var wi = tape.slice(w, 0, static_cast<int>(i), 1, 1);
        term = tape.mul_scalar(term, wi);
        out = out.valid() ? tape.add(out, term) : term;
    }
    return out;
}

Var BoundAdapters::param(const std::string& full_name) const {
    auto it = by_name_.find(full_name);
    if (it == by_name_.end()) throw std::invalid_argument("no bound parameter named '" + full_name + "'");
    return it->second;
}

} // namespace sda
