#include "kvrelay/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "kvrelay/error.hpp"

namespace kvrelay {

namespace {

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

enum StreamKind : std::uint64_t { kKeyStream = 1, kValueStream = 2, kQueryStream = 3, kBasisStream = 4, kCoefStream = 5 };

}  // namespace

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

CounterRng CounterRng::stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t key = mix64(seed + kGoldenGamma);
    for (std::uint64_t tag : tags) key = mix64(key ^ (tag + kGoldenGamma));
    return CounterRng(key);
}

std::uint64_t CounterRng::bits(std::uint64_t n) const { return mix64(key_ + (n + 1) * kGoldenGamma); }

double CounterRng::uniform(std::uint64_t n) const {
    return (static_cast<double>(bits(n) >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal(std::uint64_t n) const {
    const double u1 = uniform(2 * n);
    const double u2 = uniform(2 * n + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string_view to_string(ValueStructure v) {
    switch (v) {
        case ValueStructure::Gaussian: return "gaussian";
        case ValueStructure::LowRank: return "low_rank";
        case ValueStructure::PlantedInSpan: return "planted_in_span";
    }
    return "unknown";
}

ValueStructure parse_value_structure(std::string_view name) {
    if (name == "gaussian") return ValueStructure::Gaussian;
    if (name == "low_rank") return ValueStructure::LowRank;
    if (name == "planted_in_span") return ValueStructure::PlantedInSpan;
    throw Error(ErrorCode::ConfigError, "unknown value structure '" + std::string(name) + "'");
}

void EpisodeSpec::validate() const {
    if (num_layers == 0 || num_kv_heads == 0 || kv_group_size == 0 || key_dim == 0 || value_dim == 0) {
        throw Error(ErrorCode::InvalidArgument, "episode dimensions must be >= 1");
    }
    if (prompt_lens.empty()) throw Error(ErrorCode::InvalidArgument, "episode needs at least one round");
    if (gen_len == 0) throw Error(ErrorCode::InvalidArgument, "gen_len must be >= 1");
    if (!pad_lens.empty() && pad_lens.size() != prompt_lens.size()) {
        throw Error(ErrorCode::InvalidArgument, "pad_lens must match prompt_lens in length");
    }
    if (value_structure != ValueStructure::Gaussian && structure_rank == 0) {
        throw Error(ErrorCode::InvalidArgument, "structure_rank must be >= 1");
    }
}

std::size_t EpisodeSpec::pad_len(std::size_t round_index0) const {
    return pad_lens.empty() ? 0 : pad_lens.at(round_index0);
}

Matrix tiny_attention_forward(const Matrix& keys, const Matrix& queries, double scale) {
    std::vector<ColumnWindow> windows(queries.rows(), ColumnWindow{0, keys.rows()});
    return tiny_attention_forward(keys, queries, scale, windows);
}

Matrix tiny_attention_forward(const Matrix& keys, const Matrix& queries, double scale,
                              std::span<const ColumnWindow> windows) {
    if (keys.cols() != queries.cols()) {
        throw Error(ErrorCode::DimensionMismatch, "query and key widths differ");
    }
    if (windows.size() != queries.rows()) {
        throw Error(ErrorCode::DimensionMismatch, "one attention window per query row required");
    }
    Matrix out(queries.rows(), keys.rows());
    for (std::size_t t = 0; t < queries.rows(); ++t) {
        const auto [begin, end] = windows[t];
        if (begin >= end || end > keys.rows()) {
            throw Error(ErrorCode::InvalidArgument, "attention window must be a nonempty column range");
        }
        auto row = out.row(t);
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = begin; j < end; ++j) {
            row[j] = scale * dot(queries.row(t), keys.row(j));
            peak = std::max(peak, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = begin; j < end; ++j) {
            row[j] = std::exp(row[j] - peak);
            total += row[j];
        }
        for (std::size_t j = begin; j < end; ++j) row[j] /= total;
    }
    return out;
}

namespace {

Matrix gaussian_matrix(const CounterRng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = rng.normal(r * cols + c);
    return m;
}

// Rows [row_begin, row_end) of `out` become Z·B/√r with Gaussian Z and B.
void fill_low_rank(Matrix& out, std::size_t row_begin, std::size_t row_end, std::size_t rank,
                   const CounterRng& coef, const CounterRng& basis) {
    const Matrix b = gaussian_matrix(basis, rank, out.cols());
    const double norm = 1.0 / std::sqrt(static_cast<double>(rank));
    for (std::size_t t = row_begin; t < row_end; ++t) {
        auto row = out.row(t);
        std::fill(row.begin(), row.end(), 0.0);
        for (std::size_t k = 0; k < rank; ++k) {
            const double z = coef.normal(t * rank + k) * norm;
            for (std::size_t i = 0; i < row.size(); ++i) row[i] += z * b(k, i);
        }
    }
}

}  // namespace

RoundInput generate_episode(const EpisodeSpec& spec, int round) {
    spec.validate();
    if (round < 1 || static_cast<std::size_t>(round) > spec.num_rounds()) {
        throw Error(ErrorCode::InvalidArgument, "round " + std::to_string(round) + " outside the episode");
    }
    const std::size_t r0 = static_cast<std::size_t>(round - 1);
    Position offset = 0;
    for (std::size_t j = 0; j < r0; ++j) {
        offset += static_cast<Position>(spec.pad_len(j) + spec.prompt_lens[j] + spec.gen_len);
    }
    const std::size_t pad = spec.pad_len(r0);
    const std::size_t prompt = spec.prompt_lens[r0];
    const std::size_t gen = spec.gen_len;
    const std::size_t total = pad + prompt + gen;
    const auto at = [&](std::size_t local) { return offset + static_cast<Position>(local); };

    RoundInput out;
    out.padding = IndexList::range(at(0), at(pad));
    out.prompt = IndexList::range(at(0), at(pad + prompt));
    out.generation = IndexList::range(at(pad + prompt), at(total));
    const IndexList positions = IndexList::range(at(0), at(total));

    const KvShape shape{spec.num_layers, spec.num_kv_heads, spec.key_dim, spec.value_dim};
    const auto rid = static_cast<std::uint64_t>(round);
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        for (std::size_t h = 0; h < spec.num_kv_heads; ++h) {
            const auto stream = [&](std::uint64_t kind) { return CounterRng::stream(spec.seed, {rid, l, h, kind}); };
            keys.push_back(gaussian_matrix(stream(kKeyStream), total, spec.key_dim));
            Matrix v = gaussian_matrix(stream(kValueStream), total, spec.value_dim);
            switch (spec.value_structure) {
                case ValueStructure::Gaussian: break;
                case ValueStructure::LowRank:
                    fill_low_rank(v, 0, total, spec.structure_rank, stream(kCoefStream), stream(kBasisStream));
                    break;
                case ValueStructure::PlantedInSpan:
                    fill_low_rank(v, pad, pad + prompt, spec.structure_rank, stream(kCoefStream),
                                  stream(kBasisStream));
                    break;
            }
            values.push_back(std::move(v));
        }
    }

    // Generation step s sees the unpadded prompt and generation steps up to s.
    std::vector<ColumnWindow> windows(gen);
    for (std::size_t s = 0; s < gen; ++s) windows[s] = ColumnWindow{pad, pad + prompt + s + 1};
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.key_dim));
    const std::size_t query_heads = spec.num_kv_heads * spec.kv_group_size;
    std::vector<Matrix> weights;
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
        for (std::size_t q = 0; q < query_heads; ++q) {
            const Matrix queries =
                gaussian_matrix(CounterRng::stream(spec.seed, {rid, l, q, kQueryStream}), gen, spec.key_dim);
            const Matrix& k = keys[l * spec.num_kv_heads + q / spec.kv_group_size];
            weights.push_back(tiny_attention_forward(k, queries, scale, windows));
        }
    }

    out.local = KvCache(shape, positions, std::move(keys), std::move(values));
    out.attention = AttentionRecord(spec.num_layers, query_heads, spec.kv_group_size, out.generation, positions,
                                    std::move(weights));
    return out;
}

SyntheticEpisode::SyntheticEpisode(EpisodeSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

}  // namespace kvrelay
