#include "sda/config.hpp"

#include <cctype>
#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "sda/rng.hpp"
#include "sda/store.hpp"

namespace sda {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Strips a trailing comment that is not inside a double-quoted string.
std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    throw ConfigError(where + ": " + what);
}

std::int64_t to_int(const std::string& raw, const std::string& where) {
    const std::string v = trim(raw);
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) fail(where, "expected an integer, got '" + v + "'");
    return out;
}

std::uint64_t to_uint(const std::string& raw, const std::string& where) {
    const std::string v = trim(raw);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        fail(where, "expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double to_double(const std::string& raw, const std::string& where) {
    const std::string v = trim(raw);
    if (v.empty()) fail(where, "expected a number");
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size() || !std::isfinite(out)) {
        fail(where, "expected a finite number, got '" + v + "'");
    }
    return out;
}

bool to_bool(const std::string& raw, const std::string& where) {
    const std::string v = trim(raw);
    if (v == "true") return true;
    if (v == "false") return false;
    fail(where, "expected true or false, got '" + v + "'");
}

std::string to_string_value(const std::string& raw, const std::string& where) {
    std::string v = trim(raw);
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') {
        v = v.substr(1, v.size() - 2);
        if (v.find('"') != std::string::npos) fail(where, "embedded quotes are not supported");
        return v;
    }
    if (v.find('"') != std::string::npos) fail(where, "unbalanced quotes");
    if (v.empty()) fail(where, "expected a value");
    return v;
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream is(value);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) parts.push_back(cur);
    }
    return parts;
}

using Setter = std::function<void(RunConfig&, const std::string& value, const std::string& where)>;
using KeyTable = std::map<std::string, std::map<std::string, Setter>>;

const KeyTable& key_table() {
    static const KeyTable table = [] {
        KeyTable t;
        auto& top = t[""];
        top["seed"] = [](RunConfig& c, const std::string& v, const std::string& w) { c.seed = to_uint(v, w); };

        auto& data = t["data"];
        data["n_items"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.n_items = static_cast<int>(to_int(v, w));
        };
        data["n_users"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.n_users = static_cast<int>(to_int(v, w));
        };
        data["n_clusters"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.n_clusters = static_cast<int>(to_int(v, w));
        };
        data["token_count"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.token_count = static_cast<int>(to_int(v, w));
        };
        data["feature_width"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.feature_width = static_cast<int>(to_int(v, w));
        };
        data["latent_dim"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.latent_dim = static_cast<int>(to_int(v, w));
        };
        data["misalignment_rotation_angle"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.misalignment_rotation_angle = to_double(v, w);
        };
        data["tail_exponent"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.tail_exponent = to_double(v, w);
        };
        data["target_tail_fraction"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.target_tail_fraction = to_double(v, w);
        };
        data["interactions_per_user"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.interactions_per_user = static_cast<int>(to_int(v, w));
        };
        data["noise_scale"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.noise_scale = to_double(v, w);
        };
        data["cluster_spread"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.data.cluster_spread = to_double(v, w);
        };

        auto& backbone = t["backbone"];
        backbone["layers"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.backbone.layers = static_cast<int>(to_int(v, w));
        };
        backbone["hidden_dim"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.backbone.hidden_dim = static_cast<int>(to_int(v, w));
        };
        backbone["embed_dim"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.backbone.embed_dim = static_cast<int>(to_int(v, w));
        };
        backbone["normalize_embeddings"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.backbone.normalize_embeddings = to_bool(v, w);
        };

        auto& adapt = t["adapt"];
        adapt["loss"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            const std::string s = to_string_value(v, w);
            if (s == "cmsa") c.adapt.loss = LossKind::kCmsa;
            else if (s == "infonce") c.adapt.loss = LossKind::kInfonce;
            else fail(w, "loss must be cmsa or infonce, got '" + s + "'");
        };
        adapt["adapter"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            const std::string s = to_string_value(v, w);
            if (s == "moda") c.adapt.adapter = AdapterKind::kModa;
            else if (s == "lora") c.adapt.adapter = AdapterKind::kLora;
            else if (s == "none") c.adapt.adapter = AdapterKind::kNone;
            else fail(w, "adapter must be moda, lora, or none, got '" + s + "'");
        };
        adapt["target_projections"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            const auto parts = split_list(to_string_value(v, w));
            if (parts.empty()) fail(w, "target_projections must list at least one projection");
            c.adapt.target_projections = parts;
        };
        adapt["batch_size"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.batch_size = static_cast<int>(to_int(v, w));
        };
        adapt["steps"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.steps = static_cast<int>(to_int(v, w));
        };
        adapt["learning_rate"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.learning_rate = to_double(v, w);
        };
        adapt["tau"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.tau = to_double(v, w);
        };
        adapt["teacher_temp_mode"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            const std::string s = to_string_value(v, w);
            if (s == "multiply") c.adapt.teacher_temp_mode = TeacherTempMode::kMultiply;
            else if (s == "divide") c.adapt.teacher_temp_mode = TeacherTempMode::kDivide;
            else fail(w, "teacher_temp_mode must be multiply or divide, got '" + s + "'");
        };
        adapt["detach_teacher"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.detach_teacher = to_bool(v, w);
        };
        adapt["rank"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.moda.rank = static_cast<int>(to_int(v, w));
        };
        adapt["n_experts"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.moda.n_experts = static_cast<int>(to_int(v, w));
        };
        adapt["gate_dim"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.moda.gate_dim = static_cast<int>(to_int(v, w));
        };
        adapt["gate_activation"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            const std::string s = to_string_value(v, w);
            if (s == "softmax") c.adapt.moda.activation = GateActivation::kSoftmax;
            else if (s == "identity") c.adapt.moda.activation = GateActivation::kIdentity;
            else fail(w, "gate_activation must be softmax or identity, got '" + s + "'");
        };
        adapt["clip_norm"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.adapt.clip_norm = to_double(v, w);
        };

        auto& rec = t["rec"];
        rec["model"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            try {
                c.rec.model = parse_rec_model(to_string_value(v, w));
            } catch (const std::invalid_argument& e) {
                fail(w, e.what());
            }
        };
        rec["fusion"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            try {
                c.rec.fusion = parse_fusion_mode(to_string_value(v, w));
            } catch (const std::invalid_argument& e) {
                fail(w, e.what());
            }
        };
        rec["d_r"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.d_r = static_cast<int>(to_int(v, w));
        };
        rec["steps"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.steps = static_cast<int>(to_int(v, w));
        };
        rec["batch_size"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.batch_size = static_cast<int>(to_int(v, w));
        };
        rec["learning_rate"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.learning_rate = to_double(v, w);
        };
        rec["neg_samples"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.neg_samples = static_cast<int>(to_int(v, w));
        };
        rec["max_seq_len"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.max_seq_len = static_cast<int>(to_int(v, w));
        };
        rec["emb_init_std"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.emb_init_std = to_double(v, w);
        };
        rec["clip_norm"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.rec.clip_norm = to_double(v, w);
        };

        auto& eval = t["eval"];
        eval["k"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.eval_k = static_cast<int>(to_int(v, w));
        };
        eval["tail_threshold"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.eval_tail_threshold = static_cast<int>(to_int(v, w));
        };

        auto& diagnose = t["diagnose"];
        diagnose["batch_size"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.diagnose_batch = static_cast<int>(to_int(v, w));
        };
        diagnose["seeds"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.diagnose_seeds = static_cast<int>(to_int(v, w));
        };
        diagnose["train_steps"] = [](RunConfig& c, const std::string& v, const std::string& w) {
            c.diagnose_train_steps = static_cast<int>(to_int(v, w));
        };

        return t;
    }();
    return table;
}

void apply_key(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value,
               const std::string& where) {
    const KeyTable& table = key_table();
    const auto sec = table.find(section);
    if (sec == table.end()) fail(where, "unknown section [" + section + "]");
    const auto entry = sec->second.find(key);
    if (entry == sec->second.end()) {
        const std::string qualified = section.empty() ? key : section + "." + key;
        fail(where, "unknown key '" + qualified + "'");
    }
    entry->second(cfg, value, where);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string where = "line " + std::to_string(line_no);
        std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(where, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) fail(where, "empty section name");
            if (key_table().find(section) == key_table().end()) {
                fail(where, "unknown section [" + section + "]");
            }
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) fail(where, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(where, "empty key");
        apply_key(cfg, section, key, value, where);
    }
    resolve_run_config(cfg);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const std::string where = "override '" + assignment + "'";
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos) fail(where, "expected section.key=value");
    const std::string path = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    const std::size_t dot = path.find('.');
    const std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
    const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
    apply_key(cfg, section, key, value, where);
    resolve_run_config(cfg);
}

void resolve_run_config(RunConfig& cfg) {
    cfg.data.seed = derive_seed(cfg.seed, "data");
    cfg.backbone.seed = derive_seed(cfg.seed, "backbone");
    cfg.backbone.token_count = cfg.data.token_count;
    cfg.backbone.feature_width = cfg.data.feature_width;
    cfg.adapt.seed = derive_seed(cfg.seed, "adapt");
    cfg.adapt.lora_rank = cfg.adapt.moda.rank;
    cfg.rec.seed = derive_seed(cfg.seed, "rec");
}

std::string canonical_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "seed = " << cfg.seed << "\n";

    os << "\n[data]\n";
    os << "n_items = " << cfg.data.n_items << "\n";
    os << "n_users = " << cfg.data.n_users << "\n";
    os << "n_clusters = " << cfg.data.n_clusters << "\n";
    os << "token_count = " << cfg.data.token_count << "\n";
    os << "feature_width = " << cfg.data.feature_width << "\n";
    os << "latent_dim = " << cfg.data.latent_dim << "\n";
    os << "misalignment_rotation_angle = " << fmt_double(cfg.data.misalignment_rotation_angle) << "\n";
    os << "tail_exponent = " << fmt_double(cfg.data.tail_exponent) << "\n";
    os << "target_tail_fraction = " << fmt_double(cfg.data.target_tail_fraction) << "\n";
    os << "interactions_per_user = " << cfg.data.interactions_per_user << "\n";
    os << "noise_scale = " << fmt_double(cfg.data.noise_scale) << "\n";
    os << "cluster_spread = " << fmt_double(cfg.data.cluster_spread) << "\n";

    os << "\n[backbone]\n";
    os << "layers = " << cfg.backbone.layers << "\n";
    os << "hidden_dim = " << cfg.backbone.hidden_dim << "\n";
    os << "embed_dim = " << cfg.backbone.embed_dim << "\n";
    os << "normalize_embeddings = " << (cfg.backbone.normalize_embeddings ? "true" : "false") << "\n";

    os << "\n[adapt]\n";
    os << "loss = \"" << to_string(cfg.adapt.loss) << "\"\n";
    os << "adapter = \"" << to_string(cfg.adapt.adapter) << "\"\n";
    os << "target_projections = \"";
    for (std::size_t i = 0; i < cfg.adapt.target_projections.size(); ++i) {
        if (i) os << ",";
        os << cfg.adapt.target_projections[i];
    }
    os << "\"\n";
    os << "batch_size = " << cfg.adapt.batch_size << "\n";
    os << "steps = " << cfg.adapt.steps << "\n";
    os << "learning_rate = " << fmt_double(cfg.adapt.learning_rate) << "\n";
    os << "tau = " << fmt_double(cfg.adapt.tau) << "\n";
    os << "teacher_temp_mode = \"" << to_string(cfg.adapt.teacher_temp_mode) << "\"\n";
    os << "detach_teacher = " << (cfg.adapt.detach_teacher ? "true" : "false") << "\n";
    os << "rank = " << cfg.adapt.moda.rank << "\n";
    os << "n_experts = " << cfg.adapt.moda.n_experts << "\n";
    os << "gate_dim = " << cfg.adapt.moda.gate_dim << "\n";
    os << "gate_activation = \"" << to_string(cfg.adapt.moda.activation) << "\"\n";
    os << "clip_norm = " << fmt_double(cfg.adapt.clip_norm) << "\n";

    os << "\n[rec]\n";
    os << "model = \"" << to_string(cfg.rec.model) << "\"\n";
    os << "fusion = \"" << to_string(cfg.rec.fusion) << "\"\n";
    os << "d_r = " << cfg.rec.d_r << "\n";
    os << "steps = " << cfg.rec.steps << "\n";
    os << "batch_size = " << cfg.rec.batch_size << "\n";
    os << "learning_rate = " << fmt_double(cfg.rec.learning_rate) << "\n";
    os << "neg_samples = " << cfg.rec.neg_samples << "\n";
    os << "max_seq_len = " << cfg.rec.max_seq_len << "\n";
    os << "emb_init_std = " << fmt_double(cfg.rec.emb_init_std) << "\n";
    os << "clip_norm = " << fmt_double(cfg.rec.clip_norm) << "\n";

    os << "\n[eval]\n";
    os << "k = " << cfg.eval_k << "\n";
    os << "tail_threshold = " << cfg.eval_tail_threshold << "\n";

    os << "\n[diagnose]\n";
    os << "batch_size = " << cfg.diagnose_batch << "\n";
    os << "seeds = " << cfg.diagnose_seeds << "\n";
    os << "train_steps = " << cfg.diagnose_train_steps << "\n";
    return os.str();
}

std::string config_hash(const RunConfig& cfg) {
    return hash_hex(fnv1a(canonical_config(cfg)));
}

} // namespace sda
