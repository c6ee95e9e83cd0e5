#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <unistd.h>

#include "doctest.h"
#include "sda/adapt.hpp"
#include "sda/rng.hpp"
#include "sda/store.hpp"

using namespace sda;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("sda_store_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

SynthConfig small_synth() {
    SynthConfig cfg;
    cfg.n_items = 24;
    cfg.n_users = 10;
    cfg.n_clusters = 4;
    cfg.token_count = 4;
    cfg.feature_width = 8;
    cfg.latent_dim = 8;
    cfg.interactions_per_user = 8;
    cfg.seed = 5;
    return cfg;
}

BackboneConfig small_backbone() {
    BackboneConfig cfg;
    cfg.layers = 2;
    cfg.hidden_dim = 16;
    cfg.token_count = 4;
    cfg.feature_width = 8;
    cfg.embed_dim = 8;
    cfg.seed = 21;
    return cfg;
}

EmbeddingTable sample_table() {
    EmbeddingTable t;
    t.modality = "text";
    t.item_ids = {"a", "b", "c"};
    t.rows = Matrix(3, 4);
    double v = 0.125;
    for (double& x : t.rows.data()) {
        x = v;
        v = v * -1.5 + 0.25;
    }
    quantize_f32_inplace(t.rows);
    t.provenance = {{"config_hash", "deadbeef"}, {"seed", "7"}};
    return t;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

} // namespace

TEST_SUITE("store") {

TEST_CASE("embedding table round trip preserves everything") {
    TempDir dir;
    const EmbeddingTable t = sample_table();
    const std::string path = dir.file("emb.bin");
    save_embeddings(t, path);

    const EmbeddingTable back = load_embeddings(path);
    CHECK(back.modality == "text");
    CHECK(back.item_ids == t.item_ids);
    CHECK(exactly_equal(back.rows, t.rows)); // values were f32-quantized up front
    CHECK(back.provenance == t.provenance);
}

TEST_CASE("embedding table save is byte-idempotent") {
    TempDir dir;
    const EmbeddingTable t = sample_table();
    save_embeddings(t, dir.file("a.bin"));
    save_embeddings(load_embeddings(dir.file("a.bin")), dir.file("b.bin"));
    CHECK(read_file(dir.file("a.bin")) == read_file(dir.file("b.bin")));
}

TEST_CASE("embedding table index lookups") {
    const EmbeddingTable t = sample_table();
    CHECK(t.index("b") == 1);
    CHECK_THROWS_AS((void)t.index("zz"), std::invalid_argument);
    CHECK(t.size() == 3);
    CHECK(t.dim() == 4);
}

TEST_CASE("truncated embedding payload is rejected") {
    TempDir dir;
    const std::string path = dir.file("emb.bin");
    save_embeddings(sample_table(), path);

    const std::string bytes = read_file(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
    out.close();

    CHECK_THROWS_WITH_AS((void)load_embeddings(path), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("trailing bytes after the payload are rejected") {
    TempDir dir;
    const std::string path = dir.file("emb.bin");
    save_embeddings(sample_table(), path);
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "x";
    out.close();
    CHECK_THROWS_WITH_AS((void)load_embeddings(path), doctest::Contains("trailing"), std::runtime_error);
}

TEST_CASE("wrong format and version are rejected") {
    TempDir dir;
    const std::string path = dir.file("emb.bin");
    {
        std::ofstream out(path, std::ios::binary);
        out << R"({"format":"sda.checkpoint","version":1})" << "\n";
    }
    CHECK_THROWS_WITH_AS((void)load_embeddings(path), doctest::Contains("not a sda.embeddings"),
                         std::runtime_error);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << R"({"format":"sda.embeddings","version":9})" << "\n";
    }
    CHECK_THROWS_WITH_AS((void)load_embeddings(path), doctest::Contains("version"), std::runtime_error);
}

TEST_CASE("header shape disagreements are rejected") {
    TempDir dir;
    const std::string path = dir.file("emb.bin");
    {
        std::ofstream out(path, std::ios::binary);
        out << R"({"format":"sda.embeddings","version":1,"modality":"text","count":2,"dim":2,"item_ids":["a"]})"
            << "\n";
    }
    CHECK_THROWS_WITH_AS((void)load_embeddings(path), doctest::Contains("item_ids"), std::runtime_error);
}

TEST_CASE("checkpoint round trip and byte idempotence") {
    TempDir dir;
    Checkpoint ckpt;
    ckpt.kind = "adapters";
    ckpt.config = {{"adapter", "moda"}, {"seed", "11"}};
    Rng rng(3);
    ckpt.params.emplace("w.b", gaussian_matrix(4, 3, 1.0, rng));
    ckpt.params.emplace("w.a", gaussian_matrix(3, 5, 0.02, rng));

    const std::string path = dir.file("ck.bin");
    save_checkpoint(ckpt, path);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.kind == "adapters");
    CHECK(back.config == ckpt.config);
    REQUIRE(back.params.size() == 2);
    CHECK(exactly_equal(back.params.at("w.b"), ckpt.params.at("w.b")));
    CHECK(exactly_equal(back.params.at("w.a"), ckpt.params.at("w.a")));

    save_checkpoint(back, dir.file("ck2.bin"));
    CHECK(read_file(path) == read_file(dir.file("ck2.bin")));
}

TEST_CASE("checkpoint restores trained adapters exactly") {
    TempDir dir;
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    AdaptConfig cfg;
    cfg.batch_size = 8;
    cfg.steps = 3;
    cfg.moda.rank = 4;
    cfg.moda.n_experts = 2;
    cfg.moda.gate_dim = 4;
    const Stage1Result stage1 = run_stage1(encoder, synth.catalog, cfg);

    Checkpoint ckpt;
    ckpt.kind = "adapters";
    ckpt.params = stage1.adapters.to_params();
    const std::string path = dir.file("adapters.ckpt");
    save_checkpoint(ckpt, path);

    AdapterSet restored = init_adapters(encoder, cfg);
    restored.set_params(load_checkpoint(path).params);
    const Matrix before = encoder.encode_value(synth.catalog.items[0].text_features, Modality::kText,
                                               &stage1.adapters);
    const Matrix after = encoder.encode_value(synth.catalog.items[0].text_features, Modality::kText, &restored);
    CHECK(exactly_equal(before, after));
}

TEST_CASE("truncated checkpoint is rejected") {
    TempDir dir;
    Checkpoint ckpt;
    ckpt.kind = "bpr";
    ckpt.params.emplace("m", Matrix(2, 2));
    const std::string path = dir.file("ck.bin");
    save_checkpoint(ckpt, path);
    const std::string bytes = read_file(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
    out.close();
    CHECK_THROWS_WITH_AS((void)load_checkpoint(path), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("embed_catalog is deterministic and thread-count invariant") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const AdapterSet none = AdapterSet::none();

    const auto [t1, v1] = embed_catalog(synth.catalog, encoder, none, 1);
    const auto [t3, v3] = embed_catalog(synth.catalog, encoder, none, 3);
    CHECK(exactly_equal(t1.rows, t3.rows));
    CHECK(exactly_equal(v1.rows, v3.rows));
    CHECK(t1.item_ids == t3.item_ids);

    CHECK(t1.size() == synth.catalog.size());
    CHECK(t1.dim() == encoder.config().embed_dim);
    CHECK(t1.modality == "text");
    CHECK(v1.modality == "image");
    for (int i = 0; i < synth.catalog.size(); ++i) {
        CHECK(t1.item_ids[i] == synth.catalog.items[i].item_id);
    }
}

TEST_CASE("zero-initialized adapters embed identically to no adapters") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    AdaptConfig cfg;
    cfg.moda.rank = 4;
    cfg.moda.n_experts = 2;
    cfg.moda.gate_dim = 4;
    const AdapterSet fresh = init_adapters(encoder, cfg); // B = 0 everywhere

    const auto [t_none, v_none] = embed_catalog(synth.catalog, encoder, AdapterSet::none());
    const auto [t_fresh, v_fresh] = embed_catalog(synth.catalog, encoder, fresh);
    CHECK(exactly_equal(t_none.rows, t_fresh.rows));
    CHECK(exactly_equal(v_none.rows, v_fresh.rows));
}

TEST_CASE("embedded values are exactly representable as float32") {
    const SynthResult synth = generate(small_synth());
    FrozenEncoder encoder(small_backbone());
    const auto [text, image] = embed_catalog(synth.catalog, encoder, AdapterSet::none());
    for (double v : text.rows.data()) {
        CHECK(v == static_cast<double>(static_cast<float>(v)));
    }

    TempDir dir;
    save_embeddings(text, dir.file("t.bin"));
    CHECK(exactly_equal(load_embeddings(dir.file("t.bin")).rows, text.rows));
    save_embeddings(image, dir.file("v.bin"));
    CHECK(exactly_equal(load_embeddings(dir.file("v.bin")).rows, image.rows));
}

TEST_CASE("file hashing is stable and content sensitive") {
    TempDir dir;
    atomic_write_text(dir.file("x.txt"), "hello");
    atomic_write_text(dir.file("y.txt"), "hello");
    atomic_write_text(dir.file("z.txt"), "hellp");
    CHECK(file_hash_hex(dir.file("x.txt")) == file_hash_hex(dir.file("y.txt")));
    CHECK(file_hash_hex(dir.file("x.txt")) != file_hash_hex(dir.file("z.txt")));
    CHECK(file_hash_hex(dir.file("x.txt")).size() == 16);
    CHECK_THROWS_AS((void)file_hash_hex(dir.file("missing.txt")), std::runtime_error);
}

TEST_CASE("atomic writes leave no temp files behind") {
    TempDir dir;
    atomic_write_text(dir.file("out.json"), "{}\n");
    save_embeddings(sample_table(), dir.file("emb.bin"));
    int entries = 0;
    for (const auto& e : fs::directory_iterator(dir.path)) {
        (void)e;
        ++entries;
    }
    CHECK(entries == 2);
    CHECK(read_file(dir.file("out.json")) == "{}\n");
}

} // TEST_SUITE
