#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvrelay/relay.hpp"
#include "kvrelay/synthetic.hpp"

namespace kvrelay {

/// A simulation run: which episodes to relay, with which methods, and where
/// the reports go.
struct RunConfig {
    ChainConfig chain;
    EpisodeSpec episode;
    std::size_t episode_count = 4;
    /// When nonempty, episodes are read from these fixture directories and
    /// `episode` / `episode_count` are ignored.
    std::vector<std::filesystem::path> fixture_dirs;
    std::vector<std::string> methods{"full",          "streaming",        "h2o_global",
                                     "h2o_layerwise", "h2o_headwise",     "h2o_obf_global",
                                     "h2o_obf_layerwise", "h2o_obf_headwise"};
    std::filesystem::path output = "kvrelay_out";
    int verbosity = 0;
    bool emit_fixtures = false;
    unsigned jobs = 0;  // 0: one per hardware thread
};

/// Parses a config document. Missing keys keep their defaults; unknown keys
/// are rejected. Relative fixture paths resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Spec for synthetic episode `index`: the configured shape with a seed
/// derived from the chain seed and the episode index.
EpisodeSpec episode_spec(const RunConfig& config, std::size_t index);

struct MethodSummary {
    std::string method;
    double rho_achieved = 0.0;
    double r_eff = 0.0;
    double mean_final_message_len = 0.0;
    double obf_skip_rate = 0.0;
};

/// Runs every (method, episode) chain and writes
///   <out>/<method>/episode_NNN.{json,csv}, <out>/summary.{csv,json}
/// plus <out>/fixtures/episode_NNN/ with emit_fixtures. Nothing is written
/// unless every chain succeeds.
std::vector<MethodSummary> run_simulation(const RunConfig& config);

std::string summary_to_csv(const std::vector<MethodSummary>& rows);

struct BenchmarkLength {
    const char* name;
    std::size_t total_prompt_len;
};

/// Total prompt lengths over a three-agent chain for the reference benchmarks.
const std::vector<BenchmarkLength>& reference_benchmarks();

/// Text table of compression_ratio(L, 32, 3) per reference benchmark.
std::string ratio_table();

}  // namespace kvrelay
