#include "sda/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "sda/adapt.hpp"
#include "sda/config.hpp"
#include "sda/data.hpp"
#include "sda/diagnose.hpp"
#include "sda/eval.hpp"
#include "sda/recsys.hpp"
#include "sda/rng.hpp"
#include "sda/store.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sda {

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Relative paths for data artifacts are taken against SDA_DATA_DIR when it
// is set; --config paths are deliberately left untouched.
std::string resolve_data_path(const std::string& path) {
    if (path.empty()) return path;
    if (fs::path(path).is_absolute()) return path;
    const char* base = std::getenv("SDA_DATA_DIR");
    if (base == nullptr || *base == '\0') return path;
    return (fs::path(base) / path).string();
}

struct StageArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;

    std::string data;
    std::string out;
    std::string adapters;
    std::string embeddings;
    std::string rec;
    std::string target = "test";
    bool force = false;
};

// Registers the flags every stage shares. Commands that read upstream
// artifacts also get --data; --out always exists.
void add_config_flags(CLI::App* sub, StageArgs& a) {
    sub->add_option("--config", a.config_path, "TOML-style run configuration file");
    a.seed_opt = sub->add_option("--seed", a.seed, "Master seed (overrides the config file)");
    sub->add_option("--set", a.sets, "Override one key, e.g. --set data.n_items=100")
        ->type_name("SECTION.KEY=VALUE");
    sub->add_flag("--force", a.force, "Overwrite existing output files");
}

RunConfig build_config(const StageArgs& a) {
    RunConfig cfg = a.config_path.empty() ? parse_run_config("") : load_run_config(a.config_path);
    if (a.seed_opt != nullptr && a.seed_opt->count() > 0) {
        cfg.seed = a.seed;
        resolve_run_config(cfg);
    }
    for (const auto& s : a.sets) apply_override(cfg, s);
    return cfg;
}

fs::path out_dir_of(const StageArgs& a) {
    const std::string out = a.out.empty() ? a.data : a.out;
    if (out.empty()) throw ConfigError("--out (or --data) is required");
    return fs::path(resolve_data_path(out));
}

fs::path data_dir_of(const StageArgs& a) {
    if (a.data.empty()) throw ConfigError("--data is required");
    return fs::path(resolve_data_path(a.data));
}

// Refuses to clobber existing outputs unless --force was given.
void claim_outputs(const std::vector<fs::path>& paths, bool force) {
    if (!force) {
        for (const auto& p : paths) {
            if (fs::exists(p)) {
                throw DataError("output already exists: " + p.string() + " (use --force to overwrite)");
            }
        }
    }
    for (const auto& p : paths) fs::create_directories(p.parent_path().empty() ? "." : p.parent_path());
}

fs::path require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw DataError(what + " not found: " + p.string());
    return p;
}

// Both hashes are shown so the operator can see which side went stale.
void check_hash(const std::string& recorded, const std::string& actual, const std::string& artifact,
                const std::string& input) {
    if (recorded != actual) {
        throw DataError(artifact + " was built against a different " + input + " (recorded " + recorded +
                        ", found " + actual + ")");
    }
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

double median_of(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string train_log_csv(const TrainLog& log, bool adapter_columns) {
    std::ostringstream os;
    os << (adapter_columns ? "step,loss,grad_norm,expert_grad_norm,gate_grad_norm" : "step,loss,grad_norm")
       << "\n";
    for (const StepLog& s : log.steps) {
        os << s.step << "," << fmt_g17(s.loss) << "," << fmt_g17(s.grad_norm);
        if (adapter_columns) os << "," << fmt_g17(s.expert_grad_norm) << "," << fmt_g17(s.gate_grad_norm);
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Artifact helpers

ItemCatalog load_catalog_checked(const fs::path& path, const RunConfig& cfg) {
    ItemCatalog catalog = load_catalog(require_file(path, "catalog").string());
    if (catalog.size() == 0) throw DataError("catalog is empty: " + path.string());
    const Matrix& f = catalog.items.front().text_features;
    if (f.rows() != cfg.data.token_count || f.cols() != cfg.data.feature_width) {
        throw DataError("catalog feature grid is " + std::to_string(f.rows()) + "x" +
                        std::to_string(f.cols()) + " but the config expects " +
                        std::to_string(cfg.data.token_count) + "x" + std::to_string(cfg.data.feature_width));
    }
    return catalog;
}

struct LoadedAdapters {
    AdapterSet set;            // empty when no checkpoint was given
    std::string file_hash = "none";
    std::string kind = "none";
};

// Restores an adapter checkpoint against the current encoder, refusing when
// it was trained on a different catalog or different frozen weights.
LoadedAdapters load_adapters_checked(const std::string& path, const FrozenEncoder& encoder,
                                     const std::string& catalog_hash) {
    LoadedAdapters out;
    if (path.empty()) return out;
    const fs::path p = require_file(resolve_data_path(path), "adapter checkpoint");
    const Checkpoint ckpt = load_checkpoint(p.string());
    if (ckpt.kind != "adapters") {
        throw DataError(p.string() + " is a '" + ckpt.kind + "' checkpoint, expected 'adapters'");
    }
    check_hash(ckpt.config.at("catalog_hash"), catalog_hash, p.string(), "catalog");
    check_hash(ckpt.config.at("backbone_hash"), hash_hex(encoder.weight_hash()), p.string(), "frozen encoder");
    const RunConfig trained = parse_run_config(ckpt.config.at("run_config"));
    out.set = init_adapters(encoder, trained.adapt);
    if (!out.set.empty()) out.set.set_params(ckpt.params);
    out.file_hash = file_hash_hex(p.string());
    out.kind = ckpt.config.at("adapter");
    return out;
}

EmbeddingTable load_embeddings_checked(const fs::path& path, const std::string& modality,
                                       const std::string& catalog_hash) {
    EmbeddingTable t = load_embeddings(require_file(path, modality + " embeddings").string());
    if (t.modality != modality) {
        throw DataError(path.string() + " holds '" + t.modality + "' embeddings, expected '" + modality + "'");
    }
    check_hash(t.provenance.at("catalog_hash"), catalog_hash, path.string(), "catalog");
    return t;
}

// Builds the frozen per-item content matrix for the recommender, in catalog
// order. id_only needs no embedding files at all.
struct ContentResult {
    Matrix content{0, 0};
    std::string emb_text_hash = "none";
    std::string emb_image_hash = "none";
};

ContentResult build_content(const RunConfig& cfg, const ItemCatalog& catalog, const fs::path& emb_dir,
                            const std::string& catalog_hash) {
    ContentResult out;
    if (cfg.rec.fusion == FusionMode::kIdOnly) {
        out.content = Matrix(catalog.size(), cfg.rec.d_r);
        return out;
    }
    const fs::path text_path = emb_dir / "embeddings_text.bin";
    const fs::path image_path = emb_dir / "embeddings_image.bin";
    const EmbeddingTable text = load_embeddings_checked(text_path, "text", catalog_hash);
    const EmbeddingTable image = load_embeddings_checked(image_path, "image", catalog_hash);
    if (text.size() != catalog.size()) {
        throw DataError("embedding table covers " + std::to_string(text.size()) + " items, catalog has " +
                        std::to_string(catalog.size()));
    }
    const FusionAdapter fusion =
        make_fusion(cfg.rec.fusion, text.dim(), cfg.rec.d_r, derive_seed(cfg.seed, "fusion"));
    out.content = fuse_tables(fusion, text, image);
    out.emb_text_hash = file_hash_hex(text_path.string());
    out.emb_image_hash = file_hash_hex(image_path.string());
    return out;
}

struct LoadedRecommender {
    RecModelKind kind = RecModelKind::kBpr;
    BprModel bpr;
    SeqModel seq;
    std::string file_hash;
};

// Rebuilds a trained recommender from its checkpoint. Ids are reconstructed
// from the catalog and the interaction split, which the recorded hashes pin
// to the exact files used at training time.
LoadedRecommender load_recommender_checked(const fs::path& path, const ItemCatalog& catalog,
                                           const LooSplit& split, const std::string& catalog_hash,
                                           const std::string& interactions_hash) {
    const Checkpoint ckpt = load_checkpoint(require_file(path, "recommender checkpoint").string());
    if (ckpt.kind != "bpr" && ckpt.kind != "seq") {
        throw DataError(path.string() + " is a '" + ckpt.kind + "' checkpoint, expected 'bpr' or 'seq'");
    }
    check_hash(ckpt.config.at("catalog_hash"), catalog_hash, path.string(), "catalog");
    check_hash(ckpt.config.at("interactions_hash"), interactions_hash, path.string(), "interaction log");

    std::vector<std::string> item_ids;
    item_ids.reserve(catalog.items.size());
    for (const Item& it : catalog.items) item_ids.push_back(it.item_id);

    LoadedRecommender out;
    out.file_hash = file_hash_hex(path.string());
    const int d_r = std::stoi(ckpt.config.at("d_r"));
    if (ckpt.kind == "bpr") {
        out.kind = RecModelKind::kBpr;
        BprModel& m = out.bpr;
        m.item_ids = item_ids;
        m.d_r = d_r;
        m.user_emb = ckpt.params.at("user_emb");
        m.item_emb = ckpt.params.at("item_emb");
        m.item_bias = ckpt.params.at("item_bias");
        m.content = ckpt.params.at("content");
        for (const UserSplit& u : split.users) {
            m.user_index[u.user_id] = static_cast<int>(m.user_ids.size());
            m.user_ids.push_back(u.user_id);
        }
        if (m.user_emb.rows() != static_cast<int>(m.user_ids.size())) {
            throw DataError(path.string() + " holds " + std::to_string(m.user_emb.rows()) +
                            " user rows but the interaction split yields " + std::to_string(m.user_ids.size()));
        }
    } else {
        out.kind = RecModelKind::kSeq;
        SeqModel& m = out.seq;
        m.item_ids = item_ids;
        m.d_r = d_r;
        m.max_len = std::stoi(ckpt.config.at("max_seq_len"));
        m.content = ckpt.params.at("content");
        for (const auto& [name, mat] : ckpt.params) {
            if (name != "content") m.params[name] = mat;
        }
    }
    return out;
}

ScoreFn make_score_fn(const LoadedRecommender& rec, EvalTarget target) {
    if (rec.kind == RecModelKind::kBpr) {
        const BprModel* m = &rec.bpr;
        return [m](const UserSplit& u) { return score_all(*m, u.user_id); };
    }
    const SeqModel* m = &rec.seq;
    return [m, target](const UserSplit& u) {
        std::vector<std::string> history = u.train;
        if (target == EvalTarget::kTest) history.push_back(u.valid);
        return score_all(*m, history);
    };
}

EvalTarget parse_target(const std::string& s) {
    if (s == "test") return EvalTarget::kTest;
    if (s == "valid") return EvalTarget::kValid;
    throw ConfigError("--target must be test or valid, got '" + s + "'");
}

void print_eval_table(std::ostream& err, const EvalReport& r) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s  %10s  %10s  %7s\n", "split", ("H@" + std::to_string(r.k)).c_str(),
                  ("N@" + std::to_string(r.k)).c_str(), "users");
    err << line;
    std::snprintf(line, sizeof(line), "%-8s  %10.4f  %10.4f  %7d\n", "overall", r.overall.hit, r.overall.ndcg,
                  r.overall.users);
    err << line;
    if (r.tail.present) {
        std::snprintf(line, sizeof(line), "%-8s  %10.4f  %10.4f  %7d\n", "tail", r.tail.hit, r.tail.ndcg,
                      r.tail.users);
        err << line;
    } else {
        err << "tail      (no tail targets among evaluated users)\n";
    }
}

// ---------------------------------------------------------------------------
// Stage bodies

int cmd_generate(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    validate_synth_config(cfg.data);
    const fs::path dir = out_dir_of(a);
    const fs::path catalog_path = dir / "catalog.jsonl";
    const fs::path inter_path = dir / "interactions.csv";
    const fs::path manifest_path = dir / "manifest.json";
    claim_outputs({catalog_path, inter_path, manifest_path}, a.force);

    const SynthResult synth = generate(cfg.data);
    save_catalog(synth.catalog, catalog_path.string());
    save_interactions(synth.log, inter_path.string());

    json manifest;
    manifest["config"] = canonical_config(cfg);
    manifest["config_hash"] = config_hash(cfg);
    manifest["seed"] = cfg.seed;
    manifest["tuned_tail_exponent"] = synth.tuned_tail_exponent;
    manifest["files"]["catalog.jsonl"] = file_hash_hex(catalog_path.string());
    manifest["files"]["interactions.csv"] = file_hash_hex(inter_path.string());
    atomic_write_text(manifest_path.string(), dump_json(manifest));

    err << "wrote " << catalog_path.string() << " (" << synth.catalog.size() << " items), "
        << inter_path.string() << " (" << synth.log.size() << " records)\n";
    json result;
    result["command"] = "generate";
    result["out"] = dir.string();
    result["items"] = synth.catalog.size();
    result["interactions"] = synth.log.size();
    result["tuned_tail_exponent"] = synth.tuned_tail_exponent;
    result["config_hash"] = config_hash(cfg);
    out << dump_json(result);
    return 0;
}

int cmd_adapt(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    const fs::path data = data_dir_of(a);
    const fs::path dir = out_dir_of(a);
    const fs::path ckpt_path = dir / "adapters.ckpt";
    const fs::path log_path = dir / "adapt_log.csv";
    claim_outputs({ckpt_path, log_path}, a.force);

    const fs::path catalog_path = data / "catalog.jsonl";
    const ItemCatalog catalog = load_catalog_checked(catalog_path, cfg);
    const FrozenEncoder encoder(cfg.backbone);
    const Stage1Result stage1 = run_stage1(encoder, catalog, cfg.adapt);

    Checkpoint ckpt;
    ckpt.kind = "adapters";
    ckpt.config["run_config"] = canonical_config(cfg);
    ckpt.config["config_hash"] = config_hash(cfg);
    ckpt.config["seed"] = std::to_string(cfg.seed);
    ckpt.config["adapter"] = to_string(cfg.adapt.adapter);
    ckpt.config["loss"] = to_string(cfg.adapt.loss);
    ckpt.config["catalog_hash"] = file_hash_hex(catalog_path.string());
    ckpt.config["backbone_hash"] = hash_hex(encoder.weight_hash());
    ckpt.params = stage1.adapters.to_params();
    save_checkpoint(ckpt, ckpt_path.string());
    atomic_write_text(log_path.string(), train_log_csv(stage1.log, true));

    err << "stage-1 adaptation: " << cfg.adapt.steps << " steps, loss " << stage1.log.initial_loss << " -> "
        << stage1.log.final_loss << " (" << stage1.log.wall_seconds << "s)\n";
    const AdapterParamCount counts = stage1.adapters.param_count();
    json result;
    result["command"] = "adapt";
    result["adapter"] = to_string(cfg.adapt.adapter);
    result["loss"] = to_string(cfg.adapt.loss);
    result["steps"] = cfg.adapt.steps;
    result["initial_loss"] = stage1.log.initial_loss;
    result["final_loss"] = stage1.log.final_loss;
    result["expert_params"] = counts.expert_params;
    result["gate_params"] = counts.gate_params;
    result["checkpoint"] = ckpt_path.string();
    out << dump_json(result);
    return 0;
}

int cmd_embed(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    const fs::path data = data_dir_of(a);
    const fs::path dir = out_dir_of(a);
    const fs::path text_path = dir / "embeddings_text.bin";
    const fs::path image_path = dir / "embeddings_image.bin";
    claim_outputs({text_path, image_path}, a.force);

    const fs::path catalog_path = data / "catalog.jsonl";
    const ItemCatalog catalog = load_catalog_checked(catalog_path, cfg);
    const std::string catalog_hash = file_hash_hex(catalog_path.string());
    const FrozenEncoder encoder(cfg.backbone);
    const LoadedAdapters adapters = load_adapters_checked(a.adapters, encoder, catalog_hash);

    auto [text, image] = embed_catalog(catalog, encoder, adapters.set);
    const std::map<std::string, std::string> provenance = {
        {"config", canonical_config(cfg)},
        {"config_hash", config_hash(cfg)},
        {"seed", std::to_string(cfg.seed)},
        {"catalog_hash", catalog_hash},
        {"backbone_hash", hash_hex(encoder.weight_hash())},
        {"adapters_hash", adapters.file_hash},
        {"adapter_kind", adapters.kind},
    };
    text.provenance = provenance;
    image.provenance = provenance;
    save_embeddings(text, text_path.string());
    save_embeddings(image, image_path.string());

    err << "embedded " << catalog.size() << " items at dim " << text.dim() << " (adapters: " << adapters.kind
        << ")\n";
    json result;
    result["command"] = "embed";
    result["items"] = text.size();
    result["dim"] = text.dim();
    result["adapter_kind"] = adapters.kind;
    result["files"] = {text_path.string(), image_path.string()};
    out << dump_json(result);
    return 0;
}

int cmd_train_rec(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    validate_rec_config(cfg.rec);
    const fs::path data = data_dir_of(a);
    const fs::path emb_dir = a.embeddings.empty() ? data : fs::path(resolve_data_path(a.embeddings));
    const fs::path dir = out_dir_of(a);
    const fs::path ckpt_path = dir / "recommender.ckpt";
    const fs::path log_path = dir / "rec_log.csv";
    claim_outputs({ckpt_path, log_path}, a.force);

    const fs::path catalog_path = data / "catalog.jsonl";
    const fs::path inter_path = data / "interactions.csv";
    const ItemCatalog catalog = load_catalog_checked(catalog_path, cfg);
    const InteractionLog log = load_interactions(require_file(inter_path, "interaction log").string(), &catalog);
    const std::string catalog_hash = file_hash_hex(catalog_path.string());
    const std::string interactions_hash = file_hash_hex(inter_path.string());
    const ContentResult content = build_content(cfg, catalog, emb_dir, catalog_hash);

    std::vector<std::string> item_ids;
    item_ids.reserve(catalog.items.size());
    for (const Item& it : catalog.items) item_ids.push_back(it.item_id);
    const LooSplit split = split_loo(log);
    if (split.users.empty()) throw DataError("no user has the 3+ interactions needed for a split");

    Checkpoint ckpt;
    ckpt.config["run_config"] = canonical_config(cfg);
    ckpt.config["config_hash"] = config_hash(cfg);
    ckpt.config["seed"] = std::to_string(cfg.seed);
    ckpt.config["model"] = to_string(cfg.rec.model);
    ckpt.config["fusion"] = to_string(cfg.rec.fusion);
    ckpt.config["d_r"] = std::to_string(cfg.rec.d_r);
    ckpt.config["max_seq_len"] = std::to_string(cfg.rec.max_seq_len);
    ckpt.config["catalog_hash"] = catalog_hash;
    ckpt.config["interactions_hash"] = interactions_hash;
    ckpt.config["emb_text_hash"] = content.emb_text_hash;
    ckpt.config["emb_image_hash"] = content.emb_image_hash;

    TrainLog train_log;
    int skipped = 0;
    if (cfg.rec.model == RecModelKind::kBpr) {
        BprTrainResult r = bpr_train(split, item_ids, content.content, cfg.rec);
        ckpt.kind = "bpr";
        ckpt.params["user_emb"] = r.model.user_emb;
        ckpt.params["item_emb"] = r.model.item_emb;
        ckpt.params["item_bias"] = r.model.item_bias;
        ckpt.params["content"] = r.model.content;
        train_log = r.log;
        skipped = r.skipped_users;
    } else {
        SeqTrainResult r = seq_train(split, item_ids, content.content, cfg.rec);
        ckpt.kind = "seq";
        ckpt.params = r.model.params;
        ckpt.params["content"] = r.model.content;
        train_log = r.log;
        skipped = r.skipped_users;
    }
    save_checkpoint(ckpt, ckpt_path.string());
    atomic_write_text(log_path.string(), train_log_csv(train_log, false));

    err << "trained " << ckpt.kind << " recommender: " << cfg.rec.steps << " steps, loss "
        << train_log.initial_loss << " -> " << train_log.final_loss << " (" << train_log.wall_seconds << "s)\n";
    json result;
    result["command"] = "train-rec";
    result["model"] = ckpt.kind;
    result["fusion"] = to_string(cfg.rec.fusion);
    result["steps"] = cfg.rec.steps;
    result["initial_loss"] = train_log.initial_loss;
    result["final_loss"] = train_log.final_loss;
    result["split_users"] = split.users.size();
    result["skipped_users"] = skipped;
    result["checkpoint"] = ckpt_path.string();
    out << dump_json(result);
    return 0;
}

int cmd_eval(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    const EvalTarget target = parse_target(a.target);
    const fs::path data = data_dir_of(a);
    const fs::path dir = out_dir_of(a);
    const fs::path metrics_path = dir / "metrics.json";
    const fs::path per_user_path = dir / "per_user.csv";
    claim_outputs({metrics_path, per_user_path}, a.force);

    const fs::path catalog_path = data / "catalog.jsonl";
    const fs::path inter_path = data / "interactions.csv";
    const ItemCatalog catalog = load_catalog_checked(catalog_path, cfg);
    const InteractionLog log = load_interactions(require_file(inter_path, "interaction log").string(), &catalog);
    const LooSplit split = split_loo(log);

    const fs::path rec_path = a.rec.empty() ? data / "recommender.ckpt" : fs::path(resolve_data_path(a.rec));
    const LoadedRecommender rec =
        load_recommender_checked(rec_path, catalog, split, file_hash_hex(catalog_path.string()),
                                 file_hash_hex(inter_path.string()));

    std::vector<std::string> item_ids;
    item_ids.reserve(catalog.items.size());
    for (const Item& it : catalog.items) item_ids.push_back(it.item_id);
    const EvalReport report = evaluate(make_score_fn(rec, target), split, item_ids, cfg.eval_k,
                                       cfg.eval_tail_threshold, target);

    json metrics;
    metrics["config"] = canonical_config(cfg);
    metrics["config_hash"] = config_hash(cfg);
    metrics["seed"] = cfg.seed;
    metrics["target"] = a.target;
    metrics["recommender_hash"] = rec.file_hash;
    metrics["report"] = json::parse(report_json(report));
    atomic_write_text(metrics_path.string(), dump_json(metrics));
    atomic_write_text(per_user_path.string(), per_user_csv(report));

    print_eval_table(err, report);
    const std::string payload = report_json(report);
    out << payload;
    if (payload.empty() || payload.back() != '\n') out << "\n";
    return 0;
}

int cmd_diagnose(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    const fs::path data = data_dir_of(a);
    const fs::path dir = out_dir_of(a);
    const fs::path report_path = dir / "diagnose.json";
    claim_outputs({report_path}, a.force);

    const fs::path catalog_path = data / "catalog.jsonl";
    const ItemCatalog catalog = load_catalog_checked(catalog_path, cfg);
    const std::string catalog_hash = file_hash_hex(catalog_path.string());
    const FrozenEncoder encoder(cfg.backbone);
    const CmsaOptions opts{cfg.adapt.tau, cfg.adapt.teacher_temp_mode, cfg.adapt.detach_teacher};

    const auto entries_json = [](const ConflictReport& r) {
        json arr = json::array();
        for (const ConflictEntry& e : r.entries) {
            json row;
            row["site"] = e.site;
            row["param"] = e.param;
            row["defined"] = e.defined;
            if (e.defined) row["cosine"] = e.cosine;
            row["text_norm"] = e.text_norm;
            row["image_norm"] = e.image_norm;
            arr.push_back(row);
        }
        return arr;
    };

    json seeds = json::array();
    std::map<std::string, std::vector<double>> cosines; // kind -> all defined cosines
    for (int i = 0; i < cfg.diagnose_seeds; ++i) {
        const std::uint64_t sub = derive_seed(cfg.seed, "diagnose|" + std::to_string(i));
        json row;
        row["seed_index"] = i;
        for (const AdapterKind kind : {AdapterKind::kModa, AdapterKind::kLora}) {
            AdaptConfig ac = cfg.adapt;
            ac.adapter = kind;
            ac.steps = cfg.diagnose_train_steps;
            ac.seed = sub;
            const Stage1Result stage1 = run_stage1(encoder, catalog, ac);
            const ConflictReport r =
                conflict_report(encoder, catalog, stage1.adapters, opts, cfg.diagnose_batch, sub);
            row[to_string(kind)] = entries_json(r);
            for (const ConflictEntry& e : r.entries) {
                if (e.defined) cosines[to_string(kind)].push_back(e.cosine);
            }
        }
        seeds.push_back(row);
        err << "diagnose seed " << i + 1 << "/" << cfg.diagnose_seeds << " done\n";
    }

    json result;
    result["command"] = "diagnose";
    result["config"] = canonical_config(cfg);
    result["config_hash"] = config_hash(cfg);
    result["seed"] = cfg.seed;
    result["catalog_hash"] = catalog_hash;
    result["train_steps"] = cfg.diagnose_train_steps;
    result["batch_size"] = cfg.diagnose_batch;
    result["seeds"] = seeds;
    for (const auto& [kind, values] : cosines) {
        result["median_cosine"][kind] = median_of(values);
        result["defined_probes"][kind] = values.size();
    }

    if (!a.adapters.empty()) {
        const LoadedAdapters trained = load_adapters_checked(a.adapters, encoder, catalog_hash);
        if (trained.set.empty()) {
            throw DataError("adapter checkpoint " + a.adapters + " holds no adapters to probe");
        }
        const ConflictReport r =
            conflict_report(encoder, catalog, trained.set, opts, cfg.diagnose_batch, cfg.seed);
        result["trained_adapters"]["checkpoint_hash"] = trained.file_hash;
        result["trained_adapters"]["kind"] = trained.kind;
        result["trained_adapters"]["entries"] = entries_json(r);
    }

    atomic_write_text(report_path.string(), dump_json(result));
    out << dump_json(result);
    return 0;
}

// One ablation arm: the adapter kind / alignment loss / training budget that
// defines it, applied on top of the shared base config.
struct AblateVariant {
    std::string name;
    AdapterKind adapter;
    LossKind loss;
    bool train_adapters;
};

const std::vector<AblateVariant>& ablate_variants() {
    static const std::vector<AblateVariant> v = {
        {"full", AdapterKind::kModa, LossKind::kCmsa, true},
        {"wo_cmsa", AdapterKind::kModa, LossKind::kCmsa, false},
        {"wo_moda", AdapterKind::kLora, LossKind::kCmsa, true},
        {"wo_both", AdapterKind::kNone, LossKind::kCmsa, false},
        {"wo_soft_target", AdapterKind::kModa, LossKind::kInfonce, true},
    };
    return v;
}

json run_ablate_variant(const RunConfig& base, const AblateVariant& variant, const FrozenEncoder& encoder,
                        const ItemCatalog& catalog, const LooSplit& split,
                        const std::vector<std::string>& item_ids) {
    RunConfig cfg = base;
    cfg.adapt.adapter = variant.adapter;
    cfg.adapt.loss = variant.loss;
    if (!variant.train_adapters) cfg.adapt.steps = 0;

    const Stage1Result stage1 = run_stage1(encoder, catalog, cfg.adapt);
    const auto [text, image] = embed_catalog(catalog, encoder, stage1.adapters);
    const FusionAdapter fusion =
        make_fusion(cfg.rec.fusion, text.dim(), cfg.rec.d_r, derive_seed(cfg.seed, "fusion"));
    const Matrix content = cfg.rec.fusion == FusionMode::kIdOnly ? Matrix(catalog.size(), cfg.rec.d_r)
                                                                 : fuse_tables(fusion, text, image);

    EvalReport report;
    if (cfg.rec.model == RecModelKind::kBpr) {
        const BprTrainResult r = bpr_train(split, item_ids, content, cfg.rec);
        const BprModel* m = &r.model;
        report = evaluate([m](const UserSplit& u) { return score_all(*m, u.user_id); }, split, item_ids,
                          cfg.eval_k, cfg.eval_tail_threshold, EvalTarget::kTest);
    } else {
        const SeqTrainResult r = seq_train(split, item_ids, content, cfg.rec);
        const SeqModel* m = &r.model;
        report = evaluate(
            [m](const UserSplit& u) {
                std::vector<std::string> history = u.train;
                history.push_back(u.valid);
                return score_all(*m, history);
            },
            split, item_ids, cfg.eval_k, cfg.eval_tail_threshold, EvalTarget::kTest);
    }

    json row;
    row["variant"] = variant.name;
    row["adapter"] = to_string(variant.adapter);
    row["loss"] = to_string(variant.loss);
    row["adapter_trained"] = variant.train_adapters;
    row["report"] = json::parse(report_json(report));
    return row;
}

int cmd_ablate(const StageArgs& a, std::ostream& out, std::ostream& err) {
    const RunConfig cfg = build_config(a);
    validate_rec_config(cfg.rec);
    const fs::path data = data_dir_of(a);
    const fs::path dir = out_dir_of(a);
    const fs::path report_path = dir / "ablation.json";
    claim_outputs({report_path}, a.force);

    const fs::path catalog_path = data / "catalog.jsonl";
    const fs::path inter_path = data / "interactions.csv";
    const ItemCatalog catalog = load_catalog_checked(catalog_path, cfg);
    const InteractionLog log = load_interactions(require_file(inter_path, "interaction log").string(), &catalog);
    const LooSplit split = split_loo(log);
    if (split.users.empty()) throw DataError("no user has the 3+ interactions needed for a split");
    const FrozenEncoder encoder(cfg.backbone);
    std::vector<std::string> item_ids;
    item_ids.reserve(catalog.items.size());
    for (const Item& it : catalog.items) item_ids.push_back(it.item_id);

    json result;
    result["command"] = "ablate";
    result["config"] = canonical_config(cfg);
    result["config_hash"] = config_hash(cfg);
    result["seed"] = cfg.seed;
    result["variants"] = json::array();

    // Partial results are flushed before a failing variant aborts the run.
    for (const AblateVariant& variant : ablate_variants()) {
        err << "ablate variant " << variant.name << "...\n";
        json row;
        try {
            row = run_ablate_variant(cfg, variant, encoder, catalog, split, item_ids);
        } catch (...) {
            atomic_write_text(report_path.string(), dump_json(result));
            err << "variant " << variant.name << " failed; partial results kept at " << report_path.string()
                << "\n";
            throw;
        }
        result["variants"].push_back(row);
        const fs::path variant_dir = dir / "ablate" / variant.name;
        fs::create_directories(variant_dir);
        atomic_write_text((variant_dir / "metrics.json").string(), dump_json(row));
    }

    // Relative-drop deltas vs. the full configuration, averaged over the two
    // overall metrics; a non-positive full metric contributes zero.
    const json& full = result["variants"][0]["report"]["overall"];
    const double full_hit = full["hit"].get<double>();
    const double full_ndcg = full["ndcg"].get<double>();
    for (json& row : result["variants"]) {
        const json& overall = row["report"]["overall"];
        double acc = 0.0;
        if (full_hit > 0.0) acc += (full_hit - overall["hit"].get<double>()) / full_hit;
        if (full_ndcg > 0.0) acc += (full_ndcg - overall["ndcg"].get<double>()) / full_ndcg;
        row["delta_pct"] = 100.0 * acc / 2.0;
    }

    atomic_write_text(report_path.string(), dump_json(result));
    err << "\n" << std::string(56, '-') << "\n";
    char line[200];
    std::snprintf(line, sizeof(line), "%-16s  %8s  %8s  %8s\n", "variant",
                  ("H@" + std::to_string(cfg.eval_k)).c_str(), ("N@" + std::to_string(cfg.eval_k)).c_str(),
                  "delta");
    err << line;
    for (const json& row : result["variants"]) {
        const json& overall = row["report"]["overall"];
        std::snprintf(line, sizeof(line), "%-16s  %8.4f  %8.4f  %7.2f%%\n",
                      row["variant"].get<std::string>().c_str(), overall["hit"].get<double>(),
                      overall["ndcg"].get<double>(), row["delta_pct"].get<double>());
        err << line;
    }
    out << dump_json(result);
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"SDA: structural and disentangled adaptation for recommendation"};
    app.name("sda");
    app.require_subcommand(1);

    StageArgs generate_args, adapt_args, embed_args, train_args, eval_args, diagnose_args, ablate_args;

    CLI::App* generate = app.add_subcommand("generate", "Synthesize an item catalog and interaction log");
    add_config_flags(generate, generate_args);
    generate->add_option("--out", generate_args.out, "Output directory")->required();
    generate->callback([&] { cmd_generate(generate_args, out, err); });

    CLI::App* adapt = app.add_subcommand("adapt", "Stage 1: train alignment adapters on a catalog");
    add_config_flags(adapt, adapt_args);
    adapt->add_option("--data", adapt_args.data, "Directory holding catalog.jsonl")->required();
    adapt->add_option("--out", adapt_args.out, "Output directory (defaults to --data)");
    adapt->callback([&] { cmd_adapt(adapt_args, out, err); });

    CLI::App* embed = app.add_subcommand("embed", "Embed every catalog item with the frozen encoder");
    add_config_flags(embed, embed_args);
    embed->add_option("--data", embed_args.data, "Directory holding catalog.jsonl")->required();
    embed->add_option("--adapters", embed_args.adapters,
                      "Adapter checkpoint to apply (omit for the raw backbone)");
    embed->add_option("--out", embed_args.out, "Output directory (defaults to --data)");
    embed->callback([&] { cmd_embed(embed_args, out, err); });

    CLI::App* train = app.add_subcommand("train-rec", "Stage 2: train the downstream recommender");
    add_config_flags(train, train_args);
    train->add_option("--data", train_args.data, "Directory holding catalog.jsonl + interactions.csv")
        ->required();
    train->add_option("--embeddings", train_args.embeddings,
                      "Directory holding embeddings_*.bin (defaults to --data)");
    train->add_option("--out", train_args.out, "Output directory (defaults to --data)");
    train->callback([&] { cmd_train_rec(train_args, out, err); });

    CLI::App* evalc = app.add_subcommand("eval", "Leave-one-out ranking evaluation");
    add_config_flags(evalc, eval_args);
    evalc->add_option("--data", eval_args.data, "Directory holding catalog.jsonl + interactions.csv")
        ->required();
    evalc->add_option("--rec", eval_args.rec, "Recommender checkpoint (defaults to <data>/recommender.ckpt)");
    evalc->add_option("--out", eval_args.out, "Output directory (defaults to --data)");
    evalc->add_option("--target", eval_args.target, "Which held-out item to rank: test or valid")
        ->default_val("test");
    evalc->callback([&] { cmd_eval(eval_args, out, err); });

    CLI::App* diagnose = app.add_subcommand("diagnose", "Gradient-conflict diagnostic (MoDA vs LoRA)");
    add_config_flags(diagnose, diagnose_args);
    diagnose->add_option("--data", diagnose_args.data, "Directory holding catalog.jsonl")->required();
    diagnose->add_option("--adapters", diagnose_args.adapters, "Also probe this trained adapter checkpoint");
    diagnose->add_option("--out", diagnose_args.out, "Output directory (defaults to --data)");
    diagnose->callback([&] { cmd_diagnose(diagnose_args, out, err); });

    CLI::App* ablate = app.add_subcommand("ablate", "Run the five-variant component ablation");
    add_config_flags(ablate, ablate_args);
    ablate->add_option("--data", ablate_args.data, "Directory holding catalog.jsonl + interactions.csv")
        ->required();
    ablate->add_option("--out", ablate_args.out, "Output directory (defaults to --data)");
    ablate->callback([&] { cmd_ablate(ablate_args, out, err); });

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::runtime_error& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace sda
