#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <vector>

#include "kvrelay/kv_cache.hpp"
#include "kvrelay/matrix.hpp"

namespace kvrelay {

/// d×r matrix with orthonormal columns spanning the row space of its input.
struct OrthoBasis {
    Matrix basis;
    std::size_t rank = 0;

    std::size_t ambient_dim() const { return basis.rows(); }
};

/// Top right singular vectors (as rows) of a matrix, with their singular
/// values in non-increasing order.
struct PrincipalSubspace {
    Matrix rows;
    std::vector<double> singular_values;
    std::size_t ambient_dim = 0;

    std::size_t rank() const { return singular_values.size(); }
};

struct SingularValueDecomposition {
    std::vector<double> singular_values;  // non-increasing
    Matrix right_vectors;                 // d×d, column j pairs with singular_values[j]
};

/// Default relative rank tolerance for an m×n matrix: max(m, n) · machine epsilon.
double default_rank_tolerance(std::size_t rows, std::size_t cols);

/// Flips `v` so that its first entry of non-negligible magnitude is positive.
void canonicalize_sign(std::span<double> v);

/// Orthonormal basis for the row space of the K×d matrix `m`, via Householder
/// QR with column pivoting on mᵀ. Columns whose remaining norm falls to
/// max(K, d)·eps times the leading pivot are truncated.
OrthoBasis orthonormal_basis(const Matrix& m);

/// x − (x Q) Qᵀ.
Matrix project_out(const Matrix& x, const OrthoBasis& q);

/// One-sided Jacobi SVD. Only the singular values and right singular
/// vectors are kept.
SingularValueDecomposition jacobi_svd(const Matrix& m);

/// Right singular vectors for the min(max_rank, rank) largest singular values.
/// `rank_tol` is relative to σ_max; defaults to default_rank_tolerance.
PrincipalSubspace principal_subspace(const Matrix& r_mat, std::size_t max_rank,
                                     std::optional<double> rank_tol = std::nullopt);

/// Number of singular values above tol · σ_max (0 for a zero matrix).
std::size_t numeric_rank(const Matrix& m, double tol);

using ScoreMap = std::map<Position, double>;

/// The min(k, |eligible|) eligible positions with the largest scores, ties
/// going to the smaller position, returned in ascending position order.
IndexList top_k_indices(const ScoreMap& scores, std::size_t k, const IndexList& eligible);

}  // namespace kvrelay
