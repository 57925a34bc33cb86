#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <vector>

#include "kvrelay/matrix.hpp"

namespace kvrelay {

/// Global token position. Unique across the whole relay chain and never
/// renumbered after selection.
using Position = std::int64_t;

/// Strictly increasing list of global positions.
class IndexList {
public:
    IndexList() = default;
    explicit IndexList(std::vector<Position> indices);
    IndexList(std::initializer_list<Position> indices) : IndexList(std::vector<Position>(indices)) {}

    /// Positions [begin, end).
    static IndexList range(Position begin, Position end);

    std::size_t size() const noexcept { return indices_.size(); }
    bool empty() const noexcept { return indices_.empty(); }
    Position operator[](std::size_t i) const { return indices_[i]; }
    Position front() const { return indices_.front(); }
    Position back() const { return indices_.back(); }
    auto begin() const noexcept { return indices_.begin(); }
    auto end() const noexcept { return indices_.end(); }
    const std::vector<Position>& values() const noexcept { return indices_; }

    bool contains(Position p) const;
    /// Slot of `p` in the list, if present.
    std::optional<std::size_t> find(Position p) const;

    bool operator==(const IndexList&) const = default;

private:
    std::vector<Position> indices_;
};

IndexList set_union(const IndexList& a, const IndexList& b);
IndexList set_difference(const IndexList& a, const IndexList& b);
IndexList set_intersection(const IndexList& a, const IndexList& b);
bool disjoint(const IndexList& a, const IndexList& b);
bool is_subset(const IndexList& sub, const IndexList& super);
/// First `n` entries (or all when n exceeds the size).
IndexList take_front(const IndexList& list, std::size_t n);

struct KvShape {
    std::size_t num_layers = 0;
    std::size_t num_kv_heads = 0;
    std::size_t key_dim = 0;
    std::size_t value_dim = 0;

    /// Flattened per-token state width D_KV.
    std::size_t state_width() const { return num_layers * num_kv_heads * (key_dim + value_dim); }
    std::size_t num_units() const { return num_layers * num_kv_heads; }
    bool operator==(const KvShape&) const = default;
};

/// Immutable layered KV cache. Every (layer, head) pair holds a T×d_k key
/// matrix and a T×d_v value matrix over the same ordered global positions.
class KvCache {
public:
    KvCache() = default;
    KvCache(KvShape shape, IndexList positions, std::vector<Matrix> keys, std::vector<Matrix> values);

    static KvCache empty(KvShape shape);

    const KvShape& shape() const noexcept { return shape_; }
    std::size_t length() const noexcept { return positions_.size(); }
    const IndexList& positions() const noexcept { return positions_; }

    const Matrix& keys(std::size_t layer, std::size_t head) const { return keys_[unit(layer, head)]; }
    const Matrix& values(std::size_t layer, std::size_t head) const { return values_[unit(layer, head)]; }
    const std::vector<Matrix>& all_keys() const noexcept { return keys_; }
    const std::vector<Matrix>& all_values() const noexcept { return values_; }

    std::size_t unit(std::size_t layer, std::size_t head) const;

    bool operator==(const KvCache&) const = default;

private:
    KvShape shape_;
    IndexList positions_;
    std::vector<Matrix> keys_;
    std::vector<Matrix> values_;
};

/// Row subset of `cache` at the given global positions; positions are kept.
KvCache select(const KvCache& cache, const IndexList& idx);

/// Row-wise concatenation; every position of `a` must precede those of `b`.
KvCache concat(const KvCache& a, const KvCache& b);

/// Same keys and positions, new per-unit value matrices.
KvCache replace_values(const KvCache& cache, std::vector<Matrix> values);

/// Partition of the positions visible to one agent round.
struct RoleMap {
    int round = 1;
    IndexList sink;
    IndexList history;
    IndexList prompt;
    IndexList generation;
    IndexList padding;

    IndexList all_positions() const;
};

struct RoundRecord {
    int round = 0;
    IndexList retained_prompt;
    IndexList generation;
    std::size_t prompt_length = 0;
};

/// Cumulative relay message M_i together with a record of each round.
class RelayMessage {
public:
    explicit RelayMessage(KvShape shape) : cache_(KvCache::empty(shape)) {}

    const KvCache& cache() const noexcept { return cache_; }
    const IndexList& sink() const noexcept { return sink_; }
    const std::vector<RoundRecord>& rounds() const noexcept { return rounds_; }
    std::size_t length() const noexcept { return cache_.length(); }

    /// Appends a relayed block. `sink` is only accepted on the first round and
    /// its positions must be part of `block`.
    RelayMessage append(const KvCache& block, RoundRecord record, const IndexList& sink = {}) const;

private:
    KvCache cache_;
    IndexList sink_;
    std::vector<RoundRecord> rounds_;
};

/// Splits the positions seen at `round` into sink, inherited history, local
/// prompt, generation, and padding. `padding` must be a subset of
/// `local_prompt`.
RoleMap decompose(const RelayMessage& message, int round, const IndexList& local_prompt,
                  const IndexList& local_generation, std::size_t sink_size,
                  const IndexList& padding = {});

}  // namespace kvrelay
