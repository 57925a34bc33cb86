#include "kvrelay/compressors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "kvrelay/error.hpp"

namespace kvrelay {

std::string_view to_string(Method m) {
    switch (m) {
        case Method::Full: return "full";
        case Method::Streaming: return "streaming";
        case Method::H2O: return "h2o";
        case Method::H2OObf: return "h2o_obf";
    }
    return "unknown";
}

std::string_view to_string(SkipReason r) {
    switch (r) {
        case SkipReason::None: return "none";
        case SkipReason::NoDeleted: return "no_deleted";
        case SkipReason::EmptyKeep: return "empty_keep";
        case SkipReason::NegligibleResidual: return "negligible_residual";
        case SkipReason::ZeroRank: return "zero_rank";
    }
    return "unknown";
}

void CompressionConfig::validate() const {
    if (pca_rank == 0) throw Error(ErrorCode::InvalidArgument, "pca_rank must be >= 1");
    if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "epsilon must be > 0");
    if (!is_eviction()) return;
    if (!budget_k && !budget_ratio) throw Error(ErrorCode::BudgetUnset, "eviction needs budget_k or budget_ratio");
    if (budget_k && budget_ratio) {
        throw Error(ErrorCode::InvalidArgument, "set exactly one of budget_k and budget_ratio");
    }
    if (budget_ratio && !(*budget_ratio > 0.0 && *budget_ratio <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "budget_ratio must lie in (0, 1]");
    }
}

std::size_t CompressionConfig::budget_for(std::size_t eligible) const {
    switch (method) {
        case Method::Full: return eligible;
        case Method::Streaming: return 0;
        case Method::H2O:
        case Method::H2OObf: break;
    }
    if (budget_k) return std::min(*budget_k, eligible);
    if (budget_ratio) {
        if (eligible == 0) return 0;
        const auto k = static_cast<std::size_t>(std::llround(*budget_ratio * static_cast<double>(eligible)));
        return std::min(std::max<std::size_t>(1, k), eligible);
    }
    throw Error(ErrorCode::BudgetUnset, "eviction needs budget_k or budget_ratio");
}

MethodSpec parse_method_name(std::string_view name) {
    if (name == "full") return {Method::Full, Granularity::Global};
    if (name == "streaming") return {Method::Streaming, Granularity::Global};
    static const std::map<std::string_view, MethodSpec> table = {
        {"h2o", {Method::H2O, Granularity::Global}},
        {"h2o_obf", {Method::H2OObf, Granularity::Global}},
        {"h2o_global", {Method::H2O, Granularity::Global}},
        {"h2o_layerwise", {Method::H2O, Granularity::Layerwise}},
        {"h2o_headwise", {Method::H2O, Granularity::Headwise}},
        {"h2o_obf_global", {Method::H2OObf, Granularity::Global}},
        {"h2o_obf_layerwise", {Method::H2OObf, Granularity::Layerwise}},
        {"h2o_obf_headwise", {Method::H2OObf, Granularity::Headwise}},
    };
    auto it = table.find(name);
    if (it == table.end()) throw Error(ErrorCode::ConfigError, "unknown method '" + std::string(name) + "'");
    return it->second;
}

std::string method_name(Method method, Granularity granularity) {
    if (method == Method::Full || method == Method::Streaming) return std::string(to_string(method));
    return std::string(to_string(method)) + "_" + std::string(to_string(granularity));
}

std::size_t ObfTrace::skipped_count() const {
    return static_cast<std::size_t>(
        std::count_if(units.begin(), units.end(), [](const ObfUnitTrace& u) { return u.skipped; }));
}

SelectionResult h2o_select(const MassTable& masses, const IndexList& eligible, std::size_t k) {
    SelectionResult out;
    out.granularity = masses.granularity;
    out.scores = masses;
    for (std::size_t u = 0; u < masses.num_units(); ++u) {
        out.unit_keep.push_back(top_k_indices(masses.scores(u), k, eligible));
    }

    if (masses.num_units() == 1) {
        out.keep = out.unit_keep.front();
    } else {
        struct Candidate {
            std::size_t votes = 0;
            double mass = 0.0;
            Position position = 0;
        };
        std::vector<Candidate> ranked;
        ranked.reserve(eligible.size());
        for (Position p : eligible) {
            Candidate c{0, 0.0, p};
            for (std::size_t u = 0; u < masses.num_units(); ++u) {
                if (out.unit_keep[u].contains(p)) ++c.votes;
                c.mass += masses.at(u, p);
            }
            ranked.push_back(c);
        }
        const std::size_t take = std::min(k, ranked.size());
        std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take), ranked.end(),
                          [](const Candidate& a, const Candidate& b) {
                              if (a.votes != b.votes) return a.votes > b.votes;
                              if (a.mass != b.mass) return a.mass > b.mass;
                              return a.position < b.position;
                          });
        std::vector<Position> picked;
        for (std::size_t i = 0; i < take; ++i) picked.push_back(ranked[i].position);
        std::sort(picked.begin(), picked.end());
        out.keep = IndexList(std::move(picked));
    }
    out.deleted = set_difference(eligible, out.keep);
    return out;
}

ResidualSplit obf_residual(const Matrix& v_keep, const Matrix& v_del) {
    if (v_keep.rows() == 0) throw Error(ErrorCode::EmptyKeep, "backfill needs at least one retained row");
    if (v_del.cols() != v_keep.cols()) {
        throw Error(ErrorCode::DimensionMismatch, "retained and deleted values differ in width");
    }
    ResidualSplit out;
    out.basis = orthonormal_basis(v_keep);
    out.residual = project_out(v_del, out.basis);
    return out;
}

std::vector<double> obf_summary(const Matrix& residual, std::span<const double> deleted_masses, double epsilon) {
    if (deleted_masses.size() != residual.rows()) {
        throw Error(ErrorCode::DimensionMismatch, "one mass per deleted row required");
    }
    double total = 0.0;
    for (double a : deleted_masses) total += a;
    std::vector<double> summary(residual.cols(), 0.0);
    for (std::size_t j = 0; j < residual.rows(); ++j) {
        const double w = deleted_masses[j] / (total + epsilon);
        auto row = residual.row(j);
        for (std::size_t i = 0; i < row.size(); ++i) summary[i] += w * row[i];
    }
    return summary;
}

std::vector<double> obf_project(std::span<const double> summary, const PrincipalSubspace& subspace) {
    if (subspace.ambient_dim != summary.size()) {
        throw Error(ErrorCode::DimensionMismatch, "summary and subspace differ in dimension");
    }
    std::vector<double> out(summary.size(), 0.0);
    for (std::size_t k = 0; k < subspace.rank(); ++k) {
        auto c = subspace.rows.row(k);
        const double coeff = dot(summary, c);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeff * c[i];
    }
    return out;
}

std::vector<double> obf_scale(std::span<const double> injection, const Demand& demand, double epsilon) {
    const double ratio = demand.del / (demand.keep + epsilon);
    std::vector<double> out(injection.begin(), injection.end());
    for (double& x : out) x *= ratio;
    return out;
}

Matrix obf_inject(const Matrix& v_keep, std::span<const double> delta) {
    if (delta.size() != v_keep.cols()) {
        throw Error(ErrorCode::DimensionMismatch, "injection vector width differs from values");
    }
    Matrix out = v_keep;
    for (std::size_t t = 0; t < out.rows(); ++t) {
        auto row = out.row(t);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] += delta[i];
    }
    return out;
}

double negligible_residual_threshold(const Matrix& v_del) { return 1e-10 * (1.0 + frobenius_norm(v_del)); }

ObfUnitTrace obf_unit(const Matrix& v_keep, const Matrix& v_del, std::span<const double> deleted_masses,
                      const Demand& demand, std::size_t pca_rank, double epsilon) {
    ObfUnitTrace trace;
    const std::size_t d = v_keep.cols();
    trace.scaled.assign(d, 0.0);
    trace.demand = demand;
    trace.demand_ratio = demand.del / (demand.keep + epsilon);
    trace.keep_demand_vanished = demand.keep <= epsilon;

    if (v_del.rows() == 0) {
        trace.skip_reason = SkipReason::NoDeleted;
        return trace;
    }
    if (v_keep.rows() == 0) {
        trace.skip_reason = SkipReason::EmptyKeep;
        return trace;
    }
    const auto split = obf_residual(v_keep, v_del);
    trace.basis_rank = split.basis.rank;
    trace.residual_norm = frobenius_norm(split.residual);
    if (trace.residual_norm <= negligible_residual_threshold(v_del)) {
        trace.skip_reason = SkipReason::NegligibleResidual;
        return trace;
    }
    const auto subspace = principal_subspace(split.residual, pca_rank);
    trace.principal_rank = subspace.rank();
    if (subspace.rank() == 0) {
        trace.skip_reason = SkipReason::ZeroRank;
        return trace;
    }

    double total = 0.0;
    for (double a : deleted_masses) total += a;
    trace.weights.reserve(deleted_masses.size());
    for (double a : deleted_masses) trace.weights.push_back(a / (total + epsilon));
    trace.summary = obf_summary(split.residual, deleted_masses, epsilon);
    trace.injection = obf_project(trace.summary, subspace);
    trace.scaled = obf_scale(trace.injection, demand, epsilon);
    trace.skipped = false;
    trace.skip_reason = SkipReason::None;
    return trace;
}

namespace {

Matrix rows_at(const Matrix& m, const IndexList& source_positions, const IndexList& wanted) {
    Matrix out(wanted.size(), m.cols());
    for (std::size_t r = 0; r < wanted.size(); ++r) {
        const auto slot = source_positions.find(wanted[r]);
        if (!slot) throw Error(ErrorCode::UnknownPosition, "position " + std::to_string(wanted[r]) + " not in cache");
        auto src = m.row(*slot);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

}  // namespace

CompressionResult compress(const KvCache& local, const RoleMap& roles, const AttentionRecord& attn,
                           const CompressionConfig& cfg) {
    cfg.validate();
    const IndexList& eligible = roles.prompt;
    const bool first_round = roles.round == 1;
    const IndexList local_sink = first_round ? roles.sink : IndexList{};

    CompressionResult result;
    result.budget = cfg.budget_for(eligible.size());
    result.selection.granularity = cfg.granularity;

    MassTable head_masses;
    switch (cfg.method) {
        case Method::Full:
            result.selection.keep = eligible;
            break;
        case Method::Streaming:
            result.selection.deleted = eligible;
            break;
        case Method::H2O:
        case Method::H2OObf: {
            if (eligible.empty()) break;
            head_masses = attention_mass_headwise(attn, roles.generation, eligible);
            MassTable table = head_masses;
            if (cfg.granularity == Granularity::Layerwise) table = aggregate_layerwise(head_masses);
            if (cfg.granularity == Granularity::Global) table = aggregate_global(head_masses);
            result.selection = h2o_select(table, eligible, result.budget);
            break;
        }
    }

    const IndexList retained_positions =
        set_union(set_union(local_sink, result.selection.keep), roles.generation);
    KvCache block = select(local, retained_positions);

    if (cfg.method != Method::H2OObf || eligible.empty()) {
        result.retained = std::move(block);
        return result;
    }

    const auto& keep = result.selection.keep;
    const auto& del = result.selection.deleted;
    const auto demands = demand_sums(head_masses, keep, del);
    std::vector<Matrix> values = block.all_values();
    const KvShape& shape = local.shape();
    for (std::size_t l = 0; l < shape.num_layers; ++l) {
        for (std::size_t h = 0; h < shape.num_kv_heads; ++h) {
            const std::size_t unit = local.unit(l, h);
            const Matrix& v = local.values(l, h);
            const Matrix v_keep = rows_at(v, local.positions(), keep);
            const Matrix v_del = rows_at(v, local.positions(), del);
            std::vector<double> del_masses;
            del_masses.reserve(del.size());
            for (Position p : del) del_masses.push_back(head_masses.at(unit, p));

            ObfUnitTrace trace = obf_unit(v_keep, v_del, del_masses, demands[unit], cfg.pca_rank, cfg.epsilon);
            trace.layer = l;
            trace.kv_head = h;
            if (!trace.skipped) {
                for (Position p : keep) {
                    auto row = values[unit].row(*block.positions().find(p));
                    for (std::size_t i = 0; i < row.size(); ++i) row[i] += trace.scaled[i];
                }
            }
            result.obf.units.push_back(std::move(trace));
        }
    }
    result.retained = replace_values(block, std::move(values));
    return result;
}

}  // namespace kvrelay
