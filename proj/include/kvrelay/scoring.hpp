#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "kvrelay/kv_cache.hpp"
#include "kvrelay/matrix.hpp"
#include "kvrelay/numerics.hpp"

namespace kvrelay {

/// Post-softmax attention from generation steps (rows) to attended
/// positions (columns), one matrix per (layer, query head). Query head q
/// reads from KV head q / kv_group_size.
class AttentionRecord {
public:
    AttentionRecord() = default;
    AttentionRecord(std::size_t num_layers, std::size_t num_query_heads, std::size_t kv_group_size,
                    IndexList query_positions, IndexList key_positions, std::vector<Matrix> weights);

    std::size_t num_layers() const noexcept { return num_layers_; }
    std::size_t num_query_heads() const noexcept { return num_query_heads_; }
    std::size_t kv_group_size() const noexcept { return kv_group_size_; }
    std::size_t num_kv_heads() const noexcept { return num_query_heads_ / kv_group_size_; }
    const IndexList& query_positions() const noexcept { return query_positions_; }
    const IndexList& key_positions() const noexcept { return key_positions_; }
    const Matrix& weights(std::size_t layer, std::size_t query_head) const;
    const std::vector<Matrix>& all_weights() const noexcept { return weights_; }

private:
    std::size_t num_layers_ = 0;
    std::size_t num_query_heads_ = 0;
    std::size_t kv_group_size_ = 1;
    IndexList query_positions_;
    IndexList key_positions_;
    std::vector<Matrix> weights_;
};

/// Largest |row sum − 1| or negative entry magnitude across all rows.
double max_row_stochastic_error(const AttentionRecord& attn);

enum class Granularity { Headwise, Layerwise, Global };

std::string_view to_string(Granularity g);

/// Attention mass per (unit, position). Units are (layer, kv-head) pairs in
/// layer-major order for Headwise, layers for Layerwise, a single unit for
/// Global.
struct MassTable {
    Granularity granularity = Granularity::Headwise;
    std::size_t num_layers = 0;
    std::size_t num_kv_heads = 0;
    IndexList positions;
    std::vector<std::vector<double>> masses;  // [unit][slot in positions]

    std::size_t num_units() const { return masses.size(); }
    double at(std::size_t unit, Position p) const;
    ScoreMap scores(std::size_t unit) const;
};

/// A_j^{(l,h)} = Σ_{t∈gen} a_{t,j}, summed over the query heads of each KV head.
MassTable attention_mass_headwise(const AttentionRecord& attn, const IndexList& gen, const IndexList& prompt);

MassTable aggregate_layerwise(const MassTable& head_masses);
MassTable aggregate_global(const MassTable& head_masses);

struct Demand {
    double keep = 0.0;
    double del = 0.0;
};

/// Per-unit (Σ_keep A_t, Σ_del A_t).
std::vector<Demand> demand_sums(const MassTable& masses, const IndexList& keep, const IndexList& del);

}  // namespace kvrelay
