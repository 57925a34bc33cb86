#include "kvrelay/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvrelay/error.hpp"

namespace kvrelay {

AttentionRecord::AttentionRecord(std::size_t num_layers, std::size_t num_query_heads,
                                 std::size_t kv_group_size, IndexList query_positions,
                                 IndexList key_positions, std::vector<Matrix> weights)
    : num_layers_(num_layers),
      num_query_heads_(num_query_heads),
      kv_group_size_(kv_group_size),
      query_positions_(std::move(query_positions)),
      key_positions_(std::move(key_positions)),
      weights_(std::move(weights)) {
    if (num_layers_ == 0 || num_query_heads_ == 0 || kv_group_size_ == 0) {
        throw Error(ErrorCode::ShapeMismatch, "attention dimensions must be positive");
    }
    if (num_query_heads_ % kv_group_size_ != 0) {
        throw Error(ErrorCode::ShapeMismatch, "query heads not divisible by kv_group_size");
    }
    if (weights_.size() != num_layers_ * num_query_heads_) {
        throw Error(ErrorCode::ShapeMismatch, "expected one weight matrix per (layer, query head)");
    }
    for (const auto& w : weights_) {
        if (w.rows() != query_positions_.size() || w.cols() != key_positions_.size()) {
            throw Error(ErrorCode::ShapeMismatch, "attention matrix shape differs from position lists");
        }
    }
}

const Matrix& AttentionRecord::weights(std::size_t layer, std::size_t query_head) const {
    if (layer >= num_layers_ || query_head >= num_query_heads_) {
        throw Error(ErrorCode::InvalidArgument, "(layer, query head) out of range");
    }
    return weights_[layer * num_query_heads_ + query_head];
}

double max_row_stochastic_error(const AttentionRecord& attn) {
    double worst = 0.0;
    for (const auto& w : attn.all_weights()) {
        for (std::size_t r = 0; r < w.rows(); ++r) {
            double s = 0.0;
            for (double x : w.row(r)) {
                if (x < 0.0) worst = std::max(worst, -x);
                s += x;
            }
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    return worst;
}

std::string_view to_string(Granularity g) {
    switch (g) {
        case Granularity::Headwise: return "headwise";
        case Granularity::Layerwise: return "layerwise";
        case Granularity::Global: return "global";
    }
    return "unknown";
}

double MassTable::at(std::size_t unit, Position p) const {
    auto slot = positions.find(p);
    if (!slot) throw Error(ErrorCode::UnknownPosition, "no mass for position " + std::to_string(p));
    return masses.at(unit)[*slot];
}

ScoreMap MassTable::scores(std::size_t unit) const {
    ScoreMap out;
    const auto& row = masses.at(unit);
    for (std::size_t i = 0; i < positions.size(); ++i) out.emplace(positions[i], row[i]);
    return out;
}

MassTable attention_mass_headwise(const AttentionRecord& attn, const IndexList& gen, const IndexList& prompt) {
    if (gen.empty()) throw Error(ErrorCode::InvalidArgument, "attention mass needs generation rows");
    std::vector<std::size_t> rows;
    for (Position t : gen) {
        auto r = attn.query_positions().find(t);
        if (!r) throw Error(ErrorCode::UnknownPosition, "no attention row for position " + std::to_string(t));
        rows.push_back(*r);
    }
    std::vector<std::size_t> cols;
    for (Position j : prompt) {
        auto c = attn.key_positions().find(j);
        if (!c) throw Error(ErrorCode::MissingColumn, "no attention column for position " + std::to_string(j));
        cols.push_back(*c);
    }

    MassTable table;
    table.granularity = Granularity::Headwise;
    table.num_layers = attn.num_layers();
    table.num_kv_heads = attn.num_kv_heads();
    table.positions = prompt;
    table.masses.assign(table.num_layers * table.num_kv_heads, std::vector<double>(prompt.size(), 0.0));
    for (std::size_t l = 0; l < attn.num_layers(); ++l) {
        for (std::size_t q = 0; q < attn.num_query_heads(); ++q) {
            auto& unit = table.masses[l * table.num_kv_heads + q / attn.kv_group_size()];
            const Matrix& w = attn.weights(l, q);
            for (std::size_t r : rows) {
                auto wrow = w.row(r);
                for (std::size_t j = 0; j < cols.size(); ++j) unit[j] += wrow[cols[j]];
            }
        }
    }
    return table;
}

namespace {

void require_headwise(const MassTable& t) {
    if (t.granularity != Granularity::Headwise) {
        throw Error(ErrorCode::WrongGranularity, "aggregation expects a headwise mass table");
    }
}

}  // namespace

MassTable aggregate_layerwise(const MassTable& head_masses) {
    require_headwise(head_masses);
    MassTable out{Granularity::Layerwise, head_masses.num_layers, head_masses.num_kv_heads,
                  head_masses.positions, {}};
    out.masses.assign(head_masses.num_layers, std::vector<double>(head_masses.positions.size(), 0.0));
    for (std::size_t l = 0; l < head_masses.num_layers; ++l) {
        for (std::size_t h = 0; h < head_masses.num_kv_heads; ++h) {
            const auto& src = head_masses.masses[l * head_masses.num_kv_heads + h];
            for (std::size_t j = 0; j < src.size(); ++j) out.masses[l][j] += src[j];
        }
    }
    return out;
}

MassTable aggregate_global(const MassTable& head_masses) {
    require_headwise(head_masses);
    MassTable out{Granularity::Global, head_masses.num_layers, head_masses.num_kv_heads,
                  head_masses.positions, {}};
    out.masses.assign(1, std::vector<double>(head_masses.positions.size(), 0.0));
    for (const auto& src : head_masses.masses) {
        for (std::size_t j = 0; j < src.size(); ++j) out.masses[0][j] += src[j];
    }
    return out;
}

std::vector<Demand> demand_sums(const MassTable& masses, const IndexList& keep, const IndexList& del) {
    if (!disjoint(keep, del)) throw Error(ErrorCode::PositionOverlap, "keep and delete sets overlap");
    std::vector<Demand> out(masses.num_units());
    for (std::size_t u = 0; u < masses.num_units(); ++u) {
        for (Position p : keep) out[u].keep += masses.at(u, p);
        for (Position p : del) out[u].del += masses.at(u, p);
    }
    return out;
}

}  // namespace kvrelay
