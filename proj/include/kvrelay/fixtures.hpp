#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvrelay/kv_cache.hpp"
#include "kvrelay/relay.hpp"
#include "kvrelay/scoring.hpp"

namespace kvrelay {

// KV fixture:        {num_layers, num_kv_heads, key_dim, value_dim, positions,
//                     keys[layer][head][token][dim], values[...]}
// Attention fixture: {num_layers, num_query_heads, kv_group_size,
//                     query_positions, key_positions,
//                     weights[layer][query_head][gen_step][position]}
// Episode manifest:  {rounds: [{kv, attention, prompt, generation, padding}]}
// with kv/attention given as paths relative to the manifest.

nlohmann::json kv_cache_to_json(const KvCache& cache);
KvCache kv_cache_from_json(const nlohmann::json& doc);

nlohmann::json attention_to_json(const AttentionRecord& attn);
AttentionRecord attention_from_json(const nlohmann::json& doc);

nlohmann::json read_json_file(const std::filesystem::path& path);
/// Writes `text` verbatim; throws IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);

inline constexpr const char* kEpisodeManifest = "episode.json";

/// Writes one KV and one attention fixture per round plus the manifest.
void write_episode_fixtures(const std::filesystem::path& dir, const EpisodeSource& source);

/// Episode backed by fixture files written by write_episode_fixtures.
class FixtureEpisode final : public EpisodeSource {
public:
    explicit FixtureEpisode(const std::filesystem::path& dir);

    std::size_t num_rounds() const override { return rounds_.size(); }
    RoundInput round(int index) const override;

private:
    std::vector<RoundInput> rounds_;
};

}  // namespace kvrelay
