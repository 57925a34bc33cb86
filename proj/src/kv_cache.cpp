#include "kvrelay/kv_cache.hpp"

#include <algorithm>
#include <iterator>
#include <string>

#include "kvrelay/error.hpp"

namespace kvrelay {

IndexList::IndexList(std::vector<Position> indices) : indices_(std::move(indices)) {
    for (std::size_t i = 1; i < indices_.size(); ++i) {
        if (indices_[i] <= indices_[i - 1]) {
            throw Error(ErrorCode::InvalidArgument,
                        "index list not strictly increasing at slot " + std::to_string(i));
        }
    }
}

IndexList IndexList::range(Position begin, Position end) {
    std::vector<Position> v;
    for (Position p = begin; p < end; ++p) v.push_back(p);
    return IndexList(std::move(v));
}

bool IndexList::contains(Position p) const {
    return std::binary_search(indices_.begin(), indices_.end(), p);
}

std::optional<std::size_t> IndexList::find(Position p) const {
    auto it = std::lower_bound(indices_.begin(), indices_.end(), p);
    if (it == indices_.end() || *it != p) return std::nullopt;
    return static_cast<std::size_t>(it - indices_.begin());
}

IndexList set_union(const IndexList& a, const IndexList& b) {
    std::vector<Position> out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return IndexList(std::move(out));
}

IndexList set_difference(const IndexList& a, const IndexList& b) {
    std::vector<Position> out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return IndexList(std::move(out));
}

IndexList set_intersection(const IndexList& a, const IndexList& b) {
    std::vector<Position> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return IndexList(std::move(out));
}

bool disjoint(const IndexList& a, const IndexList& b) { return set_intersection(a, b).empty(); }

bool is_subset(const IndexList& sub, const IndexList& super) {
    return std::includes(super.begin(), super.end(), sub.begin(), sub.end());
}

IndexList take_front(const IndexList& list, std::size_t n) {
    n = std::min(n, list.size());
    return IndexList(std::vector<Position>(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(n)));
}

KvCache::KvCache(KvShape shape, IndexList positions, std::vector<Matrix> keys,
                 std::vector<Matrix> values)
    : shape_(shape), positions_(std::move(positions)), keys_(std::move(keys)), values_(std::move(values)) {
    if (shape_.num_layers == 0 || shape_.num_kv_heads == 0 || shape_.key_dim == 0 ||
        shape_.value_dim == 0) {
        throw Error(ErrorCode::ShapeMismatch, "cache dimensions must be positive");
    }
    const std::size_t units = shape_.num_units();
    if (keys_.size() != units || values_.size() != units) {
        throw Error(ErrorCode::ShapeMismatch, "expected one key and value matrix per (layer, head)");
    }
    const std::size_t t = positions_.size();
    for (std::size_t u = 0; u < units; ++u) {
        if (keys_[u].rows() != t || keys_[u].cols() != shape_.key_dim) {
            throw Error(ErrorCode::ShapeMismatch, "key matrix " + std::to_string(u) + " has wrong shape");
        }
        if (values_[u].rows() != t || values_[u].cols() != shape_.value_dim) {
            throw Error(ErrorCode::ShapeMismatch, "value matrix " + std::to_string(u) + " has wrong shape");
        }
    }
}

KvCache KvCache::empty(KvShape shape) {
    std::vector<Matrix> keys(shape.num_units(), Matrix(0, shape.key_dim));
    std::vector<Matrix> values(shape.num_units(), Matrix(0, shape.value_dim));
    return KvCache(shape, IndexList{}, std::move(keys), std::move(values));
}

std::size_t KvCache::unit(std::size_t layer, std::size_t head) const {
    if (layer >= shape_.num_layers || head >= shape_.num_kv_heads) {
        throw Error(ErrorCode::InvalidArgument, "(layer, head) out of range");
    }
    return layer * shape_.num_kv_heads + head;
}

namespace {

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), src.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        auto from = src.row(rows[r]);
        std::copy(from.begin(), from.end(), out.row(r).begin());
    }
    return out;
}

Matrix stack_rows(const Matrix& top, const Matrix& bottom) {
    Matrix out(top.rows() + bottom.rows(), top.cols());
    for (std::size_t r = 0; r < top.rows(); ++r) {
        std::copy(top.row(r).begin(), top.row(r).end(), out.row(r).begin());
    }
    for (std::size_t r = 0; r < bottom.rows(); ++r) {
        std::copy(bottom.row(r).begin(), bottom.row(r).end(), out.row(top.rows() + r).begin());
    }
    return out;
}

}  // namespace

KvCache select(const KvCache& cache, const IndexList& idx) {
    std::vector<std::size_t> rows;
    rows.reserve(idx.size());
    for (Position p : idx) {
        auto slot = cache.positions().find(p);
        if (!slot) {
            throw Error(ErrorCode::UnknownPosition, "position " + std::to_string(p) + " not in cache");
        }
        rows.push_back(*slot);
    }
    const std::size_t units = cache.shape().num_units();
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    keys.reserve(units);
    values.reserve(units);
    for (std::size_t u = 0; u < units; ++u) {
        keys.push_back(gather_rows(cache.all_keys()[u], rows));
        values.push_back(gather_rows(cache.all_values()[u], rows));
    }
    return KvCache(cache.shape(), idx, std::move(keys), std::move(values));
}

KvCache concat(const KvCache& a, const KvCache& b) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "concat of caches with different dimensions");
    }
    if (a.length() > 0 && b.length() > 0 && a.positions().back() >= b.positions().front()) {
        throw Error(ErrorCode::PositionOverlap, "concat operands interleave in position");
    }
    std::vector<Position> pos(a.positions().begin(), a.positions().end());
    pos.insert(pos.end(), b.positions().begin(), b.positions().end());
    const std::size_t units = a.shape().num_units();
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    keys.reserve(units);
    values.reserve(units);
    for (std::size_t u = 0; u < units; ++u) {
        keys.push_back(stack_rows(a.all_keys()[u], b.all_keys()[u]));
        values.push_back(stack_rows(a.all_values()[u], b.all_values()[u]));
    }
    return KvCache(a.shape(), IndexList(std::move(pos)), std::move(keys), std::move(values));
}

KvCache replace_values(const KvCache& cache, std::vector<Matrix> values) {
    return KvCache(cache.shape(), cache.positions(), cache.all_keys(), std::move(values));
}

IndexList RoleMap::all_positions() const {
    return set_union(set_union(set_union(sink, history), set_union(prompt, generation)), padding);
}

RelayMessage RelayMessage::append(const KvCache& block, RoundRecord record, const IndexList& sink) const {
    if (!rounds_.empty() && record.round <= rounds_.back().round) {
        throw Error(ErrorCode::InvalidArgument, "round records must be appended in order");
    }
    if (!sink.empty()) {
        if (!rounds_.empty()) {
            throw Error(ErrorCode::InvalidArgument, "sink can only be set by the first round");
        }
        if (!is_subset(sink, block.positions())) {
            throw Error(ErrorCode::UnknownPosition, "sink positions missing from relayed block");
        }
    }
    const IndexList expected = set_union(set_union(sink, record.retained_prompt), record.generation);
    if (expected != block.positions()) {
        throw Error(ErrorCode::InvalidArgument,
                    "relayed block positions differ from sink + retained prompt + generation");
    }
    RelayMessage next(*this);
    next.cache_ = concat(cache_, block);
    if (!sink.empty()) next.sink_ = sink;
    next.rounds_.push_back(std::move(record));
    return next;
}

RoleMap decompose(const RelayMessage& message, int round, const IndexList& local_prompt,
                  const IndexList& local_generation, std::size_t sink_size, const IndexList& padding) {
    if (round < 1) throw Error(ErrorCode::InvalidArgument, "round index starts at 1");
    if (!disjoint(local_prompt, local_generation)) {
        throw Error(ErrorCode::PositionOverlap, "local prompt and generation overlap");
    }
    const IndexList& inherited = message.cache().positions();
    if (!disjoint(inherited, local_prompt) || !disjoint(inherited, local_generation)) {
        throw Error(ErrorCode::PositionOverlap, "local positions collide with the inherited message");
    }
    if (!is_subset(padding, local_prompt)) {
        throw Error(ErrorCode::InvalidArgument, "padding must lie inside the local prompt");
    }

    RoleMap roles;
    roles.round = round;
    roles.generation = local_generation;
    roles.padding = padding;
    const IndexList content = set_difference(local_prompt, padding);
    if (round == 1) {
        if (!inherited.empty()) {
            throw Error(ErrorCode::InvalidArgument, "round 1 cannot inherit a message");
        }
        if (sink_size > content.size()) {
            throw Error(ErrorCode::SinkTooLarge, "sink of " + std::to_string(sink_size) +
                                                     " exceeds prompt of " + std::to_string(content.size()));
        }
        roles.sink = take_front(content, sink_size);
        roles.prompt = set_difference(content, roles.sink);
    } else {
        roles.sink = message.sink();
        roles.history = set_difference(inherited, roles.sink);
        roles.prompt = content;
    }
    return roles;
}

}  // namespace kvrelay
