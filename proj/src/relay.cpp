#include "kvrelay/relay.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "kvrelay/error.hpp"

namespace kvrelay {

void ChainConfig::validate() const {
    if (num_agents == 0) throw Error(ErrorCode::ChainEmpty, "chain needs at least one agent");
    if (latent_steps == 0) throw Error(ErrorCode::InvalidArgument, "latent_steps must be >= 1");
    compression.validate();
}

namespace {

void check_relayed_block(const KvCache& local, const KvCache& block, int round) {
    for (std::size_t u = 0; u < block.shape().num_units(); ++u) {
        const Matrix& kb = block.all_keys()[u];
        const Matrix& kl = local.all_keys()[u];
        for (std::size_t r = 0; r < block.length(); ++r) {
            const auto src = local.positions().find(block.positions()[r]);
            if (!src || !std::equal(kb.row(r).begin(), kb.row(r).end(), kl.row(*src).begin())) {
                throw Error(ErrorCode::NumericalFailure,
                            "round " + std::to_string(round) + ": relayed keys are not a row selection");
            }
        }
        for (double x : block.all_values()[u].data()) {
            if (!std::isfinite(x)) {
                throw Error(ErrorCode::NumericalFailure,
                            "round " + std::to_string(round) + ": non-finite relayed value");
            }
        }
    }
}

double nominal_retention(const CompressionConfig& cfg, std::size_t budget, std::size_t prompt_len) {
    switch (cfg.method) {
        case Method::Full: return 1.0;
        case Method::Streaming: return 0.0;
        case Method::H2O:
        case Method::H2OObf: break;
    }
    const std::size_t k = cfg.budget_k.value_or(budget);
    return prompt_len == 0 ? 1.0 : std::min(1.0, static_cast<double>(k) / static_cast<double>(prompt_len));
}

}  // namespace

ChainResult run_chain(const EpisodeSource& source, const ChainConfig& chain) {
    chain.validate();
    if (source.num_rounds() < chain.num_agents) {
        throw Error(ErrorCode::InvalidArgument, "episode has fewer rounds than agents in the chain");
    }
    const CompressionConfig& cfg = chain.compression;

    std::optional<RelayMessage> message;
    RelayReport report;
    report.method = method_name(cfg.method, cfg.granularity);
    double r_eff_sum = 0.0;
    double delta_norm_sum = 0.0;

    for (std::size_t i = 1; i <= chain.num_agents; ++i) {
        const int round = static_cast<int>(i);
        const RoundInput input = source.round(round);
        if (input.generation.size() != chain.latent_steps) {
            throw Error(ErrorCode::InvalidArgument, "round " + std::to_string(round) + " generated " +
                                                        std::to_string(input.generation.size()) +
                                                        " states, expected " + std::to_string(chain.latent_steps));
        }
        if (!message) message.emplace(input.local.shape());

        const RoleMap roles =
            decompose(*message, round, input.prompt, input.generation, cfg.sink_size, input.padding);
        CompressionResult compressed = compress(input.local, roles, input.attention, cfg);
        check_relayed_block(input.local, compressed.retained, round);

        const std::size_t previous_len = message->length();
        const std::size_t sink_added = round == 1 ? roles.sink.size() : 0;
        RoundRecord record{round, compressed.selection.keep, roles.generation, sink_added + roles.prompt.size()};
        *message = message->append(compressed.retained, record, round == 1 ? roles.sink : IndexList{});

        RoundReport row;
        row.round = round;
        row.prompt_len = record.prompt_length;
        row.kept_prompt = compressed.selection.keep.size();
        row.gen_len = roles.generation.size();
        row.message_len = message->length();
        row.rho_achieved = row.prompt_len == 0 ? 0.0
                                               : static_cast<double>(row.kept_prompt) / static_cast<double>(row.prompt_len);
        row.r_eff = nominal_retention(cfg, compressed.budget, row.prompt_len);
        row.obf_units = compressed.obf.units.size();
        row.obf_skipped = compressed.obf.skipped_count();

        if (row.message_len != previous_len + sink_added + row.kept_prompt + row.gen_len) {
            throw Error(ErrorCode::NumericalFailure, "message length recursion broken at round " + std::to_string(round));
        }

        for (const auto& u : compressed.obf.units) {
            if (!u.skipped) delta_norm_sum += norm2(u.scaled);
            report.obf.max_demand_ratio = std::max(report.obf.max_demand_ratio, u.demand_ratio);
        }
        report.obf.units += row.obf_units;
        report.obf.skipped += row.obf_skipped;

        r_eff_sum += row.r_eff;
        report.totals.total_prompt_len += row.prompt_len;
        report.totals.relayed_prompt_tokens += row.kept_prompt;
        report.totals.total_states += row.prompt_len + row.gen_len;
        report.rounds.push_back(row);
        report.traces.push_back(std::move(compressed.obf));
    }

    auto& totals = report.totals;
    totals.sink_len = message->sink().size();
    totals.final_message_len = message->length();
    totals.rho_achieved = totals.total_prompt_len == 0
                              ? 0.0
                              : static_cast<double>(totals.relayed_prompt_tokens) /
                                    static_cast<double>(totals.total_prompt_len);
    totals.rho_all_states = totals.total_states == 0 ? 0.0
                                                      : static_cast<double>(totals.final_message_len) /
                                                            static_cast<double>(totals.total_states);
    totals.r_eff = r_eff_sum / static_cast<double>(report.rounds.size());
    const std::size_t applied = report.obf.units - report.obf.skipped;
    report.obf.skip_rate =
        report.obf.units == 0 ? 0.0 : static_cast<double>(report.obf.skipped) / static_cast<double>(report.obf.units);
    report.obf.mean_delta_norm = applied == 0 ? 0.0 : delta_norm_sum / static_cast<double>(applied);

    return ChainResult{std::move(*message), std::move(report)};
}

double effective_retention_ratio(std::span<const std::size_t> prompt_lengths, std::size_t k) {
    if (prompt_lengths.empty()) throw Error(ErrorCode::EmptyList, "no prompt lengths");
    double sum = 0.0;
    for (std::size_t len : prompt_lengths) {
        if (len == 0) throw Error(ErrorCode::InvalidArgument, "prompt lengths must be >= 1");
        sum += std::min(1.0, static_cast<double>(k) / static_cast<double>(len));
    }
    return sum / static_cast<double>(prompt_lengths.size());
}

double compression_ratio(std::size_t total_prompt_len, std::size_t k, std::size_t rounds) {
    if (total_prompt_len == 0) throw Error(ErrorCode::ZeroLength, "total prompt length is zero");
    if (total_prompt_len < rounds) {
        throw Error(ErrorCode::InvalidArgument, "total prompt length shorter than the number of rounds");
    }
    const double pct = 100.0 * static_cast<double>(rounds * k) / static_cast<double>(total_prompt_len);
    return std::round(pct * 10.0) / 10.0;
}

}  // namespace kvrelay
