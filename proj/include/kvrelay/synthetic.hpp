#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "kvrelay/matrix.hpp"
#include "kvrelay/relay.hpp"

namespace kvrelay {

/// Counter-based generator: the n-th draw of stream `key` is the n-th output
/// of SplitMix64 seeded with `key`, i.e. mix64(key + (n + 1) · 0x9E3779B97F4A7C15).
/// Stream keys are derived by folding tags into the seed with mix64. Normal
/// draws use Box-Muller on draws 2n and 2n + 1.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}
    static CounterRng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t bits(std::uint64_t n) const;
    /// Uniform in the open interval (0, 1).
    double uniform(std::uint64_t n) const;
    double normal(std::uint64_t n) const;

private:
    std::uint64_t key_;
};

std::uint64_t mix64(std::uint64_t z);

enum class ValueStructure {
    Gaussian,
    /// Every per-head value matrix has rank structure_rank.
    LowRank,
    /// Prompt values span a structure_rank subspace, so any kept set of at
    /// least that many prompt rows contains every deleted row in its span.
    PlantedInSpan,
};

std::string_view to_string(ValueStructure v);
ValueStructure parse_value_structure(std::string_view name);

struct EpisodeSpec {
    std::uint64_t seed = 0;
    std::size_t num_layers = 2;
    std::size_t num_kv_heads = 2;
    std::size_t kv_group_size = 2;
    std::size_t key_dim = 64;
    std::size_t value_dim = 64;
    std::vector<std::size_t> prompt_lens{180, 160, 184};
    /// Left padding per round; empty means no padding.
    std::vector<std::size_t> pad_lens;
    std::size_t gen_len = 40;
    ValueStructure value_structure = ValueStructure::Gaussian;
    std::size_t structure_rank = 2;

    void validate() const;
    std::size_t num_rounds() const { return prompt_lens.size(); }
    std::size_t pad_len(std::size_t round_index0) const;
};

/// softmax(scale · q_t · Kᵀ) per query row.
Matrix tiny_attention_forward(const Matrix& keys, const Matrix& queries, double scale);

/// Columns [begin, end) a query row may attend to; others get weight 0.
struct ColumnWindow {
    std::size_t begin = 0;
    std::size_t end = 0;
};

Matrix tiny_attention_forward(const Matrix& keys, const Matrix& queries, double scale,
                              std::span<const ColumnWindow> windows);

/// Local states of round `round` (1-based). Positions are laid out as
/// padding, prompt, generation, continuing after all earlier rounds.
RoundInput generate_episode(const EpisodeSpec& spec, int round);

class SyntheticEpisode final : public EpisodeSource {
public:
    explicit SyntheticEpisode(EpisodeSpec spec);

    std::size_t num_rounds() const override { return spec_.num_rounds(); }
    RoundInput round(int index) const override { return generate_episode(spec_, index); }
    const EpisodeSpec& spec() const noexcept { return spec_; }

private:
    EpisodeSpec spec_;
};

}  // namespace kvrelay
