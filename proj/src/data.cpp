#include "sda/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "sda/rng.hpp"

namespace sda {

using nlohmann::json;

int ItemCatalog::index(const std::string& item_id) const {
    auto it = index_of.find(item_id);
    if (it == index_of.end()) throw std::invalid_argument("unknown item_id '" + item_id + "'");
    return it->second;
}

void ItemCatalog::rebuild_index() {
    index_of.clear();
    for (int i = 0; i < size(); ++i) index_of.emplace(items[i].item_id, i);
}

void validate_catalog(ItemCatalog& catalog) {
    catalog.rebuild_index();
    if (catalog.index_of.size() != catalog.items.size()) {
        throw std::invalid_argument("catalog contains duplicate item_ids");
    }
    for (const Item& it : catalog.items) {
        if (it.item_id.empty()) throw std::invalid_argument("catalog contains an empty item_id");
        const Item& first = catalog.items.front();
        if (!it.text_features.same_shape(first.text_features) ||
            !it.image_features.same_shape(first.image_features)) {
            throw std::invalid_argument("catalog feature shapes are not uniform (item '" + it.item_id + "')");
        }
        if (!it.text_features.all_finite() || !it.image_features.all_finite()) {
            throw std::invalid_argument("catalog features contain non-finite values (item '" + it.item_id + "')");
        }
    }
}

void validate_synth_config(const SynthConfig& cfg) {
    if (cfg.n_items < 1 || cfg.n_users < 1 || cfg.n_clusters < 1) {
        throw std::invalid_argument("synth config: counts must be >= 1");
    }
    if (cfg.token_count < 1 || cfg.feature_width < 1 || cfg.latent_dim < 1) {
        throw std::invalid_argument("synth config: dimensions must be >= 1");
    }
    if (cfg.latent_dim % 2 != 0) {
        throw std::invalid_argument("synth config: latent_dim must be even (paired rotation planes)");
    }
    if (cfg.feature_width < cfg.latent_dim) {
        throw std::invalid_argument("synth config: feature_width must be >= latent_dim");
    }
    if (cfg.misalignment_rotation_angle < 0.0 || cfg.misalignment_rotation_angle > 3.14159265358979324) {
        throw std::invalid_argument("synth config: rotation angle must lie in [0, pi]");
    }
    if (cfg.tail_exponent < 0.0) throw std::invalid_argument("synth config: tail_exponent must be >= 0");
    if (cfg.target_tail_fraction < 0.0 || cfg.target_tail_fraction >= 1.0) {
        throw std::invalid_argument("synth config: target_tail_fraction must lie in [0, 1)");
    }
    if (cfg.interactions_per_user < 1) {
        throw std::invalid_argument("synth config: interactions_per_user must be >= 1");
    }
    if (cfg.noise_scale < 0.0 || cfg.cluster_spread < 0.0) {
        throw std::invalid_argument("synth config: scales must be >= 0");
    }
}

namespace {

// Rows made orthonormal (Gram-Schmidt); requires cols >= rows.
Matrix orthonormal_rows(int rows, int cols, Rng& rng) {
    Matrix m = gaussian_matrix(rows, cols, 1.0, rng);
    for (int r = 0; r < rows; ++r) {
        for (int prev = 0; prev < r; ++prev) {
            double d = 0.0;
            for (int c = 0; c < cols; ++c) d += m(r, c) * m(prev, c);
            for (int c = 0; c < cols; ++c) m(r, c) -= d * m(prev, c);
        }
        double norm = 0.0;
        for (int c = 0; c < cols; ++c) norm += m(r, c) * m(r, c);
        norm = std::sqrt(norm);
        if (norm < 1e-9) throw std::runtime_error("orthonormalization failed (degenerate draw)");
        for (int c = 0; c < cols; ++c) m(r, c) /= norm;
    }
    return m;
}

// Plane rotation by `angle` on every consecutive coordinate pair, so
// <z, rotate(z)> = cos(angle) * |z|^2 for every z.
std::vector<double> rotate_latent(const std::vector<double>& z, double angle) {
    std::vector<double> out(z.size());
    const double c = std::cos(angle), s = std::sin(angle);
    for (std::size_t i = 0; i + 1 < z.size(); i += 2) {
        out[i] = c * z[i] - s * z[i + 1];
        out[i + 1] = s * z[i] + c * z[i + 1];
    }
    return out;
}

std::string item_name(int i, int n_items) {
    int width = 1;
    for (int v = n_items - 1; v >= 10; v /= 10) ++width;
    std::string digits = std::to_string(i);
    return "item_" + std::string(width - digits.size(), '0') + digits;
}

struct PopularityModel {
    std::vector<double> weight;              // per item
    std::vector<std::vector<int>> by_cluster; // item indices per cluster
};

PopularityModel build_popularity(const std::vector<int>& clusters, int n_clusters, double exponent,
                                 std::uint64_t seed) {
    const int n = static_cast<int>(clusters.size());
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "popularity"));
    rng.shuffle(order);
    PopularityModel pm;
    pm.weight.assign(n, 0.0);
    for (int rank = 0; rank < n; ++rank) {
        pm.weight[order[rank]] = 1.0 / std::pow(double(rank + 1), exponent);
    }
    pm.by_cluster.assign(n_clusters, {});
    for (int i = 0; i < n; ++i) pm.by_cluster[clusters[i]].push_back(i);
    return pm;
}

int sample_weighted(const std::vector<int>& ids, const std::vector<double>& weight, Rng& rng) {
    double total = 0.0;
    for (int id : ids) total += weight[id];
    double u = rng.uniform(0.0, total);
    double acc = 0.0;
    for (int id : ids) {
        acc += weight[id];
        if (u <= acc) return id;
    }
    return ids.back();
}

InteractionLog sample_interactions(const SynthConfig& cfg, const std::vector<int>& clusters,
                                   const std::vector<std::string>& ids, double exponent) {
    PopularityModel pm = build_popularity(clusters, cfg.n_clusters, exponent, cfg.seed);
    std::vector<int> all(cfg.n_items);
    for (int i = 0; i < cfg.n_items; ++i) all[i] = i;
    InteractionLog log;
    Rng rng(derive_seed(cfg.seed, "interactions"));
    for (int u = 0; u < cfg.n_users; ++u) {
        const int home = u % cfg.n_clusters;
        std::string user = "user_" + std::to_string(u);
        for (int t = 0; t < cfg.interactions_per_user; ++t) {
            const bool in_home = rng.uniform() < 0.8 && !pm.by_cluster[home].empty();
            int item = sample_weighted(in_home ? pm.by_cluster[home] : all, pm.weight, rng);
            log.records.push_back({user, ids[item], t + 1});
        }
    }
    return log;
}

// Fraction of items seen fewer than 4 times when each user's last two
// interactions are held out (mirrors the leave-one-out split).
double train_tail_fraction(const InteractionLog& log, const std::vector<std::string>& ids) {
    std::map<std::string, int> per_user;
    for (const Interaction& r : log.records) per_user[r.user_id]++;
    std::map<std::string, int> seen; // running per-user position
    std::map<std::string, int> train_count;
    for (const Interaction& r : log.records) {
        int pos = seen[r.user_id]++;
        if (pos < per_user[r.user_id] - 2) train_count[r.item_id]++;
    }
    int tail = 0;
    for (const std::string& id : ids) {
        auto it = train_count.find(id);
        if (it == train_count.end() || it->second < 4) ++tail;
    }
    return double(tail) / double(ids.size());
}

} // namespace

SynthResult generate(const SynthConfig& cfg) {
    validate_synth_config(cfg);
    Rng center_rng(derive_seed(cfg.seed, "centers"));
    Matrix centers = gaussian_matrix(cfg.n_clusters, cfg.latent_dim, 1.0, center_rng);

    // One orthonormal latent->token map per token row, shared by both
    // modalities; the image side sees the rotated latent.
    std::vector<Matrix> token_maps;
    for (int k = 0; k < cfg.token_count; ++k) {
        Rng rng(derive_seed(cfg.seed, "token_map|" + std::to_string(k)));
        token_maps.push_back(orthonormal_rows(cfg.latent_dim, cfg.feature_width, rng));
    }

    SynthResult out;
    Rng item_rng(derive_seed(cfg.seed, "items"));
    std::vector<int> clusters(cfg.n_items);
    std::vector<std::string> ids(cfg.n_items);
    for (int i = 0; i < cfg.n_items; ++i) {
        const int c = i % cfg.n_clusters;
        clusters[i] = c;
        ids[i] = item_name(i, cfg.n_items);
        std::vector<double> z(cfg.latent_dim);
        for (int d = 0; d < cfg.latent_dim; ++d) {
            z[d] = centers(c, d) + cfg.cluster_spread * item_rng.normal();
        }
        std::vector<double> zr = rotate_latent(z, cfg.misalignment_rotation_angle);
        Item item;
        item.item_id = ids[i];
        item.latent_cluster = c;
        item.text_features = Matrix(cfg.token_count, cfg.feature_width);
        item.image_features = Matrix(cfg.token_count, cfg.feature_width);
        for (int k = 0; k < cfg.token_count; ++k) {
            const Matrix& m = token_maps[k];
            for (int w = 0; w < cfg.feature_width; ++w) {
                double tv = 0.0, iv = 0.0;
                for (int d = 0; d < cfg.latent_dim; ++d) {
                    tv += z[d] * m(d, w);
                    iv += zr[d] * m(d, w);
                }
                item.text_features(k, w) = tv + cfg.noise_scale * item_rng.normal();
                item.image_features(k, w) = iv + cfg.noise_scale * item_rng.normal();
            }
        }
        quantize_f32_inplace(item.text_features);
        quantize_f32_inplace(item.image_features);
        out.catalog.items.push_back(std::move(item));
    }
    validate_catalog(out.catalog);

    // Sharper Zipf exponents push more items under the 4-interaction tail
    // threshold; walk upward until the requested fraction is met.
    double exponent = cfg.tail_exponent;
    out.log = sample_interactions(cfg, clusters, ids, exponent);
    for (int attempt = 0; attempt < 12; ++attempt) {
        if (train_tail_fraction(out.log, ids) >= cfg.target_tail_fraction) break;
        exponent += 0.25;
        out.log = sample_interactions(cfg, clusters, ids, exponent);
    }
    out.tuned_tail_exponent = exponent;
    return out;
}

double cross_modal_retrieval_accuracy(const ItemCatalog& catalog) {
    const int n = catalog.size();
    if (n == 0) throw std::invalid_argument("retrieval accuracy: empty catalog");
    auto pooled = [](const Matrix& feats) {
        std::vector<double> v(feats.cols(), 0.0);
        for (int r = 0; r < feats.rows(); ++r) {
            for (int c = 0; c < feats.cols(); ++c) v[c] += feats(r, c);
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0) {
            for (double& x : v) x /= norm;
        }
        return v;
    };
    std::vector<std::vector<double>> text(n), image(n);
    for (int i = 0; i < n; ++i) {
        text[i] = pooled(catalog.items[i].text_features);
        image[i] = pooled(catalog.items[i].image_features);
    }
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        int best = -1;
        double best_score = -2.0;
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < text[i].size(); ++c) s += text[i][c] * image[j][c];
            if (s > best_score) {
                best_score = s;
                best = j;
            }
        }
        if (best == i) ++hits;
    }
    return double(hits) / double(n);
}

namespace {

json features_to_json(const Matrix& m) {
    json rows = json::array();
    for (int r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (int c = 0; c < m.cols(); ++c) row.push_back(static_cast<float>(m(r, c)));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix features_from_json(const json& rows, const std::string& context) {
    if (!rows.is_array() || rows.empty()) {
        throw std::invalid_argument(context + ": features must be a non-empty array of rows");
    }
    const int nr = static_cast<int>(rows.size());
    if (!rows[0].is_array() || rows[0].empty()) {
        throw std::invalid_argument(context + ": feature rows must be non-empty arrays");
    }
    const int nc = static_cast<int>(rows[0].size());
    Matrix m(nr, nc);
    for (int r = 0; r < nr; ++r) {
        const json& row = rows[r];
        if (!row.is_array() || static_cast<int>(row.size()) != nc) {
            throw std::invalid_argument(context + ": ragged feature rows");
        }
        for (int c = 0; c < nc; ++c) {
            if (!row[c].is_number()) throw std::invalid_argument(context + ": non-numeric feature");
            m(r, c) = static_cast<double>(static_cast<float>(row[c].get<double>()));
        }
    }
    return m;
}

[[noreturn]] void line_error(const std::string& path, int line, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

} // namespace

void save_catalog(const ItemCatalog& catalog, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const Item& it : catalog.items) {
        json o;
        o["item_id"] = it.item_id;
        o["text_features"] = features_to_json(it.text_features);
        o["image_features"] = features_to_json(it.image_features);
        if (it.latent_cluster >= 0) {
            o["latent_cluster"] = it.latent_cluster;
        } else {
            o["latent_cluster"] = nullptr;
        }
        out << o.dump() << "\n";
    }
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

ItemCatalog load_catalog(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open catalog '" + path + "'");
    ItemCatalog catalog;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json o = json::parse(line, nullptr, false);
        if (o.is_discarded()) line_error(path, lineno, "invalid JSON");
        if (!o.is_object() || !o.contains("item_id") || !o["item_id"].is_string()) {
            line_error(path, lineno, "missing string field 'item_id'");
        }
        Item item;
        item.item_id = o["item_id"].get<std::string>();
        try {
            item.text_features = features_from_json(o.at("text_features"), "text_features");
            item.image_features = features_from_json(o.at("image_features"), "image_features");
        } catch (const std::exception& e) {
            line_error(path, lineno, e.what());
        }
        if (o.contains("latent_cluster") && !o["latent_cluster"].is_null()) {
            if (!o["latent_cluster"].is_number_integer()) {
                line_error(path, lineno, "latent_cluster must be an integer or null");
            }
            item.latent_cluster = o["latent_cluster"].get<int>();
        }
        catalog.items.push_back(std::move(item));
    }
    try {
        validate_catalog(catalog);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return catalog;
}

void save_interactions(const InteractionLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "user_id,item_id,timestamp\n";
    for (const Interaction& r : log.records) {
        if (r.user_id.find(',') != std::string::npos || r.item_id.find(',') != std::string::npos) {
            throw std::invalid_argument("ids containing commas cannot be saved as CSV");
        }
        out << r.user_id << "," << r.item_id << "," << r.timestamp << "\n";
    }
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

InteractionLog load_interactions(const std::string& path, const ItemCatalog* catalog) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open interactions '" + path + "'");
    InteractionLog log;
    std::string line;
    int lineno = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            if (line != "user_id,item_id,timestamp") {
                line_error(path, lineno, "expected header 'user_id,item_id,timestamp'");
            }
            saw_header = true;
            continue;
        }
        const auto c1 = line.find(',');
        const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
            line_error(path, lineno, "expected exactly 3 comma-separated fields");
        }
        Interaction r;
        r.user_id = line.substr(0, c1);
        r.item_id = line.substr(c1 + 1, c2 - c1 - 1);
        const std::string ts = line.substr(c2 + 1);
        if (r.user_id.empty() || r.item_id.empty()) line_error(path, lineno, "empty user_id or item_id");
        auto [p, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), r.timestamp);
        if (ec != std::errc() || p != ts.data() + ts.size()) {
            line_error(path, lineno, "timestamp '" + ts + "' is not an integer");
        }
        if (catalog != nullptr && !catalog->has(r.item_id)) {
            line_error(path, lineno, "interaction references unknown item '" + r.item_id + "'");
        }
        log.records.push_back(std::move(r));
    }
    return log;
}

} // namespace sda
