#include "sda/store.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "sda/rng.hpp"

namespace sda {

static_assert(std::endian::native == std::endian::little,
              "binary tables are written little-endian and read back without swapping");

namespace {

using nlohmann::json;

constexpr int kEmbeddingVersion = 1;
constexpr int kCheckpointVersion = 1;
constexpr const char* kEmbeddingFormat = "sda.embeddings";
constexpr const char* kCheckpointFormat = "sda.checkpoint";

std::string temp_sibling(const std::string& path) {
    std::ostringstream os;
    os << path << ".tmp." << ::getpid();
    return os.str();
}

void commit_temp(const std::string& temp, const std::string& path) {
    std::error_code ec;
    std::filesystem::rename(temp, path, ec);
    if (ec) {
        std::filesystem::remove(temp);
        throw std::runtime_error(path + ": rename failed: " + ec.message());
    }
}

// One JSON header line, then a raw payload produced by `body`.
template <typename Body>
void write_with_header(const std::string& path, const json& header, Body&& body) {
    const std::string temp = temp_sibling(path);
    {
        std::ofstream out(temp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error(path + ": cannot open for writing");
        out << header.dump() << '\n';
        body(out);
        out.flush();
        if (!out) {
            std::filesystem::remove(temp);
            throw std::runtime_error(path + ": write failed");
        }
    }
    commit_temp(temp, path);
}

json read_header(std::istream& in, const std::string& path, const char* format, int version) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": missing header line");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": bad header: " + e.what());
    }
    if (!header.is_object() || header.value("format", "") != format) {
        throw std::runtime_error(path + ": not a " + std::string(format) + " file");
    }
    const int got = header.value("version", -1);
    if (got != version) {
        throw std::runtime_error(path + ": unsupported version " + std::to_string(got) +
                                 " (expected " + std::to_string(version) + ")");
    }
    return header;
}

void read_exact(std::istream& in, char* dst, std::size_t n, const std::string& path) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw std::runtime_error(path + ": truncated payload");
    }
}

void expect_eof(std::istream& in, const std::string& path) {
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0) {
        throw std::runtime_error(path + ": trailing bytes after payload");
    }
}

std::map<std::string, std::string> string_map(const json& j, const std::string& path, const char* field) {
    std::map<std::string, std::string> out;
    if (j.is_null()) return out;
    if (!j.is_object()) throw std::runtime_error(path + ": " + field + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!v.is_string()) throw std::runtime_error(path + ": " + field + "." + k + " must be a string");
        out[k] = v.get<std::string>();
    }
    return out;
}

} // namespace

int EmbeddingTable::index(const std::string& item_id) const {
    for (std::size_t i = 0; i < item_ids.size(); ++i) {
        if (item_ids[i] == item_id) return static_cast<int>(i);
    }
    throw std::invalid_argument("embedding table (" + modality + "): unknown item " + item_id);
}

void save_embeddings(const EmbeddingTable& table, const std::string& path) {
    if (static_cast<int>(table.item_ids.size()) != table.rows.rows()) {
        throw std::invalid_argument("save_embeddings: ids/rows mismatch");
    }
    json header = {
        {"format", kEmbeddingFormat},
        {"version", kEmbeddingVersion},
        {"modality", table.modality},
        {"count", table.rows.rows()},
        {"dim", table.rows.cols()},
        {"item_ids", table.item_ids},
        {"provenance", table.provenance},
    };
    write_with_header(path, header, [&](std::ofstream& out) {
        std::vector<float> buf(table.rows.data().size());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(table.rows.data()[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    });
}

EmbeddingTable load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    const json header = read_header(in, path, kEmbeddingFormat, kEmbeddingVersion);

    EmbeddingTable table;
    table.modality = header.value("modality", "");
    const int count = header.value("count", -1);
    const int dim = header.value("dim", -1);
    if (count < 0 || dim <= 0) throw std::runtime_error(path + ": bad count/dim in header");
    if (!header.contains("item_ids") || !header["item_ids"].is_array() ||
        static_cast<int>(header["item_ids"].size()) != count) {
        throw std::runtime_error(path + ": item_ids does not match count");
    }
    for (const auto& id : header["item_ids"]) table.item_ids.push_back(id.get<std::string>());
    table.provenance = string_map(header.value("provenance", json::object()), path, "provenance");

    table.rows = Matrix(count, dim);
    std::vector<float> buf(static_cast<std::size_t>(count) * dim);
    read_exact(in, reinterpret_cast<char*>(buf.data()), buf.size() * sizeof(float), path);
    expect_eof(in, path);
    for (std::size_t i = 0; i < buf.size(); ++i) table.rows.data()[i] = static_cast<double>(buf[i]);
    return table;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json blobs = json::array();
    for (const auto& [name, m] : ckpt.params) { // std::map: sorted, stable layout
        blobs.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    }
    json header = {
        {"format", kCheckpointFormat},
        {"version", kCheckpointVersion},
        {"kind", ckpt.kind},
        {"config", ckpt.config},
        {"params", blobs},
    };
    write_with_header(path, header, [&](std::ofstream& out) {
        for (const auto& [name, m] : ckpt.params) {
            out.write(reinterpret_cast<const char*>(m.data().data()),
                      static_cast<std::streamsize>(m.data().size() * sizeof(double)));
        }
    });
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    const json header = read_header(in, path, kCheckpointFormat, kCheckpointVersion);

    Checkpoint ckpt;
    ckpt.kind = header.value("kind", "");
    ckpt.config = string_map(header.value("config", json::object()), path, "config");
    if (!header.contains("params") || !header["params"].is_array()) {
        throw std::runtime_error(path + ": missing params list");
    }
    for (const auto& blob : header["params"]) {
        const std::string name = blob.value("name", "");
        const int rows = blob.value("rows", -1);
        const int cols = blob.value("cols", -1);
        if (name.empty() || rows < 0 || cols < 0) {
            throw std::runtime_error(path + ": bad param descriptor");
        }
        if (ckpt.params.count(name)) throw std::runtime_error(path + ": duplicate param " + name);
        Matrix m(rows, cols);
        read_exact(in, reinterpret_cast<char*>(m.data().data()), m.data().size() * sizeof(double), path);
        ckpt.params.emplace(name, std::move(m));
    }
    expect_eof(in, path);
    return ckpt;
}

std::pair<EmbeddingTable, EmbeddingTable> embed_catalog(const ItemCatalog& catalog,
                                                        const FrozenEncoder& encoder,
                                                        const AdapterSet& adapters,
                                                        int n_threads) {
    if (n_threads < 1) throw std::invalid_argument("embed_catalog: n_threads must be >= 1");
    const int n = catalog.size();
    const int d = encoder.config().embed_dim;
    EmbeddingTable text;
    text.modality = "text";
    EmbeddingTable image;
    image.modality = "image";
    text.rows = Matrix(n, d);
    image.rows = Matrix(n, d);
    for (const Item& item : catalog.items) {
        text.item_ids.push_back(item.item_id);
        image.item_ids.push_back(item.item_id);
    }

    auto worker = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            const Matrix et = encoder.encode_value(catalog.items[i].text_features, Modality::kText, &adapters);
            const Matrix ev = encoder.encode_value(catalog.items[i].image_features, Modality::kImage, &adapters);
            for (int c = 0; c < d; ++c) {
                text.rows(i, c) = et(0, c);
                image.rows(i, c) = ev(0, c);
            }
        }
    };

    if (n_threads == 1 || n < 2 * n_threads) {
        worker(0, n);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n + n_threads - 1) / n_threads;
        for (int t = 0; t < n_threads; ++t) {
            const int begin = t * chunk;
            const int end = std::min(n, begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(worker, begin, end);
        }
        for (std::thread& th : pool) th.join();
    }

    quantize_f32_inplace(text.rows);
    quantize_f32_inplace(image.rows);
    return {std::move(text), std::move(image)};
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open for hashing");
    std::uint64_t h = kFnvOffset;
    char buf[8192];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    return hash_hex(h);
}

void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string temp = temp_sibling(path);
    {
        std::ofstream out(temp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error(path + ": cannot open for writing");
        out << content;
        out.flush();
        if (!out) {
            std::filesystem::remove(temp);
            throw std::runtime_error(path + ": write failed");
        }
    }
    commit_temp(temp, path);
}

} // namespace sda
