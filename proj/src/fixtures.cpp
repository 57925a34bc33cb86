#include "kvrelay/fixtures.hpp"

#include <fstream>
#include <sstream>

#include "kvrelay/error.hpp"

namespace kvrelay {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

Matrix matrix_from_json(const json& rows, std::size_t expected_rows, std::size_t cols) {
    if (!rows.is_array() || rows.size() != expected_rows) {
        throw Error(ErrorCode::ShapeMismatch, "fixture matrix has wrong row count");
    }
    Matrix m(expected_rows, cols);
    for (std::size_t r = 0; r < expected_rows; ++r) {
        const auto& row = rows[r];
        if (!row.is_array() || row.size() != cols) {
            throw Error(ErrorCode::ShapeMismatch, "fixture matrix has wrong row width");
        }
        for (std::size_t c = 0; c < cols; ++c) {
            if (!row[c].is_number()) throw Error(ErrorCode::ConfigError, "fixture matrix entry is not a number");
            m(r, c) = row[c].get<double>();
        }
    }
    return m;
}

// Nested [outer][inner] list of matrices, flattened outer-major.
std::vector<Matrix> grid_from_json(const json& doc, std::size_t outer, std::size_t inner, std::size_t rows,
                                   std::size_t cols, const char* what) {
    if (!doc.is_array() || doc.size() != outer) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": wrong outer dimension");
    }
    std::vector<Matrix> out;
    out.reserve(outer * inner);
    for (const auto& group : doc) {
        if (!group.is_array() || group.size() != inner) {
            throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": wrong inner dimension");
        }
        for (const auto& m : group) out.push_back(matrix_from_json(m, rows, cols));
    }
    return out;
}

json grid_to_json(const std::vector<Matrix>& mats, std::size_t outer, std::size_t inner) {
    json doc = json::array();
    for (std::size_t o = 0; o < outer; ++o) {
        json group = json::array();
        for (std::size_t i = 0; i < inner; ++i) group.push_back(matrix_to_json(mats[o * inner + i]));
        doc.push_back(std::move(group));
    }
    return doc;
}

const json& member(const json& doc, const char* name) {
    if (!doc.is_object() || !doc.contains(name)) {
        throw Error(ErrorCode::ConfigError, std::string("fixture lacks field '") + name + "'");
    }
    return doc.at(name);
}

template <typename T>
T field(const json& doc, const char* name) {
    const json& value = member(doc, name);
    try {
        return value.get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("fixture field '") + name + "': " + e.what());
    }
}

IndexList index_list_field(const json& doc, const char* name) {
    return IndexList(field<std::vector<Position>>(doc, name));
}

}  // namespace

json kv_cache_to_json(const KvCache& cache) {
    const auto& s = cache.shape();
    json doc = json::object();
    doc["num_layers"] = s.num_layers;
    doc["num_kv_heads"] = s.num_kv_heads;
    doc["key_dim"] = s.key_dim;
    doc["value_dim"] = s.value_dim;
    doc["positions"] = cache.positions().values();
    doc["keys"] = grid_to_json(cache.all_keys(), s.num_layers, s.num_kv_heads);
    doc["values"] = grid_to_json(cache.all_values(), s.num_layers, s.num_kv_heads);
    return doc;
}

KvCache kv_cache_from_json(const json& doc) {
    KvShape s{field<std::size_t>(doc, "num_layers"), field<std::size_t>(doc, "num_kv_heads"),
              field<std::size_t>(doc, "key_dim"), field<std::size_t>(doc, "value_dim")};
    IndexList positions = index_list_field(doc, "positions");
    auto keys = grid_from_json(member(doc, "keys"), s.num_layers, s.num_kv_heads, positions.size(), s.key_dim, "keys");
    auto values =
        grid_from_json(member(doc, "values"), s.num_layers, s.num_kv_heads, positions.size(), s.value_dim, "values");
    return KvCache(s, std::move(positions), std::move(keys), std::move(values));
}

json attention_to_json(const AttentionRecord& attn) {
    json doc = json::object();
    doc["num_layers"] = attn.num_layers();
    doc["num_query_heads"] = attn.num_query_heads();
    doc["kv_group_size"] = attn.kv_group_size();
    doc["query_positions"] = attn.query_positions().values();
    doc["key_positions"] = attn.key_positions().values();
    doc["weights"] = grid_to_json(attn.all_weights(), attn.num_layers(), attn.num_query_heads());
    return doc;
}

AttentionRecord attention_from_json(const json& doc) {
    const auto layers = field<std::size_t>(doc, "num_layers");
    const auto heads = field<std::size_t>(doc, "num_query_heads");
    const auto group = field<std::size_t>(doc, "kv_group_size");
    IndexList rows = index_list_field(doc, "query_positions");
    IndexList cols = index_list_field(doc, "key_positions");
    auto weights = grid_from_json(member(doc, "weights"), layers, heads, rows.size(), cols.size(), "weights");
    return AttentionRecord(layers, heads, group, std::move(rows), std::move(cols), std::move(weights));
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
    }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void write_episode_fixtures(const std::filesystem::path& dir, const EpisodeSource& source) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
    json manifest = json::object();
    manifest["rounds"] = json::array();
    for (std::size_t i = 1; i <= source.num_rounds(); ++i) {
        const RoundInput r = source.round(static_cast<int>(i));
        const std::string kv_name = "round_" + std::to_string(i) + ".kv.json";
        const std::string attn_name = "round_" + std::to_string(i) + ".attn.json";
        write_text_file(dir / kv_name, kv_cache_to_json(r.local).dump() + "\n");
        write_text_file(dir / attn_name, attention_to_json(r.attention).dump() + "\n");
        json entry = json::object();
        entry["kv"] = kv_name;
        entry["attention"] = attn_name;
        entry["prompt"] = r.prompt.values();
        entry["generation"] = r.generation.values();
        entry["padding"] = r.padding.values();
        manifest["rounds"].push_back(std::move(entry));
    }
    write_text_file(dir / kEpisodeManifest, manifest.dump(2) + "\n");
}

FixtureEpisode::FixtureEpisode(const std::filesystem::path& dir) {
    const json manifest = read_json_file(dir / kEpisodeManifest);
    if (!manifest.contains("rounds") || !manifest["rounds"].is_array()) {
        throw Error(ErrorCode::ConfigError, "episode manifest lacks a rounds array");
    }
    for (const auto& entry : manifest["rounds"]) {
        RoundInput r;
        r.local = kv_cache_from_json(read_json_file(dir / field<std::string>(entry, "kv")));
        r.attention = attention_from_json(read_json_file(dir / field<std::string>(entry, "attention")));
        r.prompt = index_list_field(entry, "prompt");
        r.generation = index_list_field(entry, "generation");
        r.padding = entry.contains("padding") ? index_list_field(entry, "padding") : IndexList{};
        rounds_.push_back(std::move(r));
    }
}

RoundInput FixtureEpisode::round(int index) const {
    if (index < 1 || static_cast<std::size_t>(index) > rounds_.size()) {
        throw Error(ErrorCode::InvalidArgument, "round " + std::to_string(index) + " outside the fixture episode");
    }
    return rounds_[static_cast<std::size_t>(index - 1)];
}

}  // namespace kvrelay
