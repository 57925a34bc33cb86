#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kvrelay/compressors.hpp"
#include "kvrelay/kv_cache.hpp"
#include "kvrelay/scoring.hpp"

namespace kvrelay {

/// Everything one agent round contributes: its local cache (prompt, padding
/// and generated positions) and the attention its generation steps produced.
struct RoundInput {
    KvCache local;
    AttentionRecord attention;
    IndexList prompt;  // includes padding
    IndexList generation;
    IndexList padding;
};

/// Supplies per-round local states for a relay chain.
class EpisodeSource {
public:
    virtual ~EpisodeSource() = default;
    virtual std::size_t num_rounds() const = 0;
    /// Round index starts at 1.
    virtual RoundInput round(int index) const = 0;
};

struct ChainConfig {
    std::size_t num_agents = 3;
    std::size_t latent_steps = 40;
    CompressionConfig compression;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RoundReport {
    int round = 0;
    std::size_t prompt_len = 0;
    std::size_t kept_prompt = 0;
    std::size_t gen_len = 0;
    std::size_t message_len = 0;
    double rho_achieved = 0.0;
    double r_eff = 0.0;
    std::size_t obf_units = 0;
    std::size_t obf_skipped = 0;
};

struct ObfSummary {
    std::size_t units = 0;
    std::size_t skipped = 0;
    double skip_rate = 0.0;
    double mean_delta_norm = 0.0;
    double max_demand_ratio = 0.0;
};

struct RelayTotals {
    std::size_t total_prompt_len = 0;  // L
    std::size_t relayed_prompt_tokens = 0;
    std::size_t sink_len = 0;
    std::size_t total_states = 0;  // Σ (prompt + generation) over rounds
    std::size_t final_message_len = 0;
    double rho_achieved = 0.0;     // relayed prompt tokens / L
    double rho_all_states = 0.0;   // |M_final| / total_states
    double r_eff = 0.0;
};

struct RelayReport {
    std::string method;
    std::vector<RoundReport> rounds;
    RelayTotals totals;
    ObfSummary obf;
    /// Per-round backfill traces, kept for verbose reports.
    std::vector<ObfTrace> traces;
};

struct ChainResult {
    RelayMessage message;
    RelayReport report;
};

/// Runs `chain.num_agents` rounds, compressing each round's local states at
/// the relay boundary and appending them to the message. Inherited history
/// is passed through untouched. Throws NumericalFailure when a relayed
/// block breaks key immutability, the length recursion, or contains
/// non-finite values.
ChainResult run_chain(const EpisodeSource& source, const ChainConfig& chain);

/// Mean over samples of min(1, k / prompt length).
double effective_retention_ratio(std::span<const std::size_t> prompt_lengths, std::size_t k);

/// 100 · rounds · k / L, rounded to one decimal.
double compression_ratio(std::size_t total_prompt_len, std::size_t k, std::size_t rounds);

}  // namespace kvrelay
