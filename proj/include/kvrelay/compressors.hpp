#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvrelay/kv_cache.hpp"
#include "kvrelay/numerics.hpp"
#include "kvrelay/scoring.hpp"

namespace kvrelay {

enum class Method { Full, Streaming, H2O, H2OObf };

std::string_view to_string(Method m);

/// Compression operator parameters for one relay boundary.
struct CompressionConfig {
    Method method = Method::H2O;
    Granularity granularity = Granularity::Global;
    std::optional<std::size_t> budget_k = 32;
    std::optional<double> budget_ratio;
    std::size_t pca_rank = 8;
    double epsilon = 1e-12;
    std::size_t sink_size = 4;

    bool is_eviction() const { return method == Method::H2O || method == Method::H2OObf; }
    void validate() const;
    /// Number of prompt tokens kept out of `eligible` candidates.
    std::size_t budget_for(std::size_t eligible) const;
};

/// Method names accepted on the command line, e.g. "h2o_obf_layerwise".
/// Bare "h2o" and "h2o_obf" select global granularity.
struct MethodSpec {
    Method method = Method::Full;
    Granularity granularity = Granularity::Global;
};
MethodSpec parse_method_name(std::string_view name);
std::string method_name(Method method, Granularity granularity);

struct SelectionResult {
    IndexList keep;
    IndexList deleted;
    Granularity granularity = Granularity::Global;
    /// Top-k set each unit would pick on its own (one entry for global).
    std::vector<IndexList> unit_keep;
    /// Scores the selection was ranked by; empty for full and streaming.
    MassTable scores;
};

enum class SkipReason { None, NoDeleted, EmptyKeep, NegligibleResidual, ZeroRank };

std::string_view to_string(SkipReason r);

struct ObfUnitTrace {
    std::size_t layer = 0;
    std::size_t kv_head = 0;
    std::size_t basis_rank = 0;
    double residual_norm = 0.0;
    std::size_t principal_rank = 0;
    std::vector<double> weights;
    std::vector<double> summary;
    std::vector<double> injection;  // Δ
    std::vector<double> scaled;     // δ
    Demand demand;
    double demand_ratio = 0.0;
    /// Retained demand at or below ε, so the ratio is dominated by 1/ε.
    bool keep_demand_vanished = false;
    bool skipped = true;
    SkipReason skip_reason = SkipReason::NoDeleted;
};

struct ObfTrace {
    std::vector<ObfUnitTrace> units;

    std::size_t skipped_count() const;
};

struct CompressionResult {
    KvCache retained;
    SelectionResult selection;
    ObfTrace obf;
    std::size_t budget = 0;
};

/// Compresses one round's local states. The retained block is
/// sink (round 1 only) ∥ kept prompt ∥ generation; keys are always exact row
/// copies and only h2o_obf alters the kept prompt values.
CompressionResult compress(const KvCache& local, const RoleMap& roles, const AttentionRecord& attn,
                           const CompressionConfig& cfg);

/// Top-k selection over `eligible`. A single-unit table ranks directly. With
/// several units each unit ranks on its own, then the dense shared set is
/// reconciled by summing per-unit keep votes (ties: higher total mass, then
/// lower position).
SelectionResult h2o_select(const MassTable& masses, const IndexList& eligible, std::size_t k);

struct ResidualSplit {
    OrthoBasis basis;
    Matrix residual;
};

ResidualSplit obf_residual(const Matrix& v_keep, const Matrix& v_del);
std::vector<double> obf_summary(const Matrix& residual, std::span<const double> deleted_masses, double epsilon);
std::vector<double> obf_project(std::span<const double> summary, const PrincipalSubspace& subspace);
std::vector<double> obf_scale(std::span<const double> injection, const Demand& demand, double epsilon);
Matrix obf_inject(const Matrix& v_keep, std::span<const double> delta);

/// Full backfill pipeline for one (layer, kv-head): residual, principal
/// subspace, weighted summary, projection, and demand scaling. Returns the
/// trace; `scaled` holds δ (all zeros when skipped).
ObfUnitTrace obf_unit(const Matrix& v_keep, const Matrix& v_del, std::span<const double> deleted_masses,
                      const Demand& demand, std::size_t pca_rank, double epsilon);

/// ‖R‖_F at or below this is treated as no residual.
double negligible_residual_threshold(const Matrix& v_del);

}  // namespace kvrelay
