#include "kvrelay/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "kvrelay/error.hpp"

namespace kvrelay {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr int kMaxJacobiSweeps = 80;

// Magnitude below which an entry is ignored when picking the sign of a unit
// vector. Keeps rounding noise in leading entries from flipping the result.
constexpr double kSignTolerance = 1e-10;

}  // namespace

double default_rank_tolerance(std::size_t rows, std::size_t cols) {
    return static_cast<double>(std::max(rows, cols)) * kEps;
}

void canonicalize_sign(std::span<double> v) {
    double max_abs = 0.0;
    for (double x : v) max_abs = std::max(max_abs, std::abs(x));
    if (max_abs == 0.0) return;
    for (double x : v) {
        if (std::abs(x) > kSignTolerance * max_abs) {
            if (x < 0.0) {
                for (double& y : v) y = -y;
            }
            return;
        }
    }
}

OrthoBasis orthonormal_basis(const Matrix& m) {
    if (m.rows() == 0) throw Error(ErrorCode::EmptyInput, "orthonormal_basis of a matrix with no rows");
    if (m.cols() == 0) throw Error(ErrorCode::EmptyInput, "orthonormal_basis of a matrix with no columns");

    // Factor A = mᵀ (d×K) so that the column space of A is the row space of m.
    const std::size_t d = m.cols();
    const std::size_t n = m.rows();
    Matrix a = m.transpose();
    const std::size_t steps = std::min(d, n);

    std::vector<std::vector<double>> reflectors;
    reflectors.reserve(steps);
    double threshold = -1.0;

    auto tail_norm = [&](std::size_t col, std::size_t from) {
        double scale = 0.0;
        double ssq = 1.0;
        for (std::size_t i = from; i < d; ++i) {
            const double ax = std::abs(a(i, col));
            if (ax == 0.0) continue;
            if (scale < ax) {
                ssq = 1.0 + ssq * (scale / ax) * (scale / ax);
                scale = ax;
            } else {
                ssq += (ax / scale) * (ax / scale);
            }
        }
        return scale * std::sqrt(ssq);
    };

    for (std::size_t k = 0; k < steps; ++k) {
        std::size_t pivot = k;
        double pivot_norm = -1.0;
        for (std::size_t j = k; j < n; ++j) {
            const double nj = tail_norm(j, k);
            if (nj > pivot_norm) {
                pivot_norm = nj;
                pivot = j;
            }
        }
        if (threshold < 0.0) {
            threshold = default_rank_tolerance(d, n) * pivot_norm;
        }
        if (pivot_norm <= threshold || pivot_norm == 0.0) break;

        if (pivot != k) {
            for (std::size_t i = 0; i < d; ++i) std::swap(a(i, k), a(i, pivot));
        }

        // Reflector H = I - 2 v vᵀ mapping a[k:, k] onto alpha · e_k.
        const double alpha = a(k, k) >= 0.0 ? -pivot_norm : pivot_norm;
        std::vector<double> v(d, 0.0);
        for (std::size_t i = k; i < d; ++i) v[i] = a(i, k);
        v[k] -= alpha;
        const double vnorm = norm2(v);
        for (double& x : v) x /= vnorm;

        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < d; ++i) s += v[i] * a(i, j);
            for (std::size_t i = k; i < d; ++i) a(i, j) -= 2.0 * s * v[i];
        }
        reflectors.push_back(std::move(v));
    }

    const std::size_t r = reflectors.size();
    Matrix q(d, r);
    for (std::size_t j = 0; j < r; ++j) q(j, j) = 1.0;
    for (std::size_t k = r; k-- > 0;) {
        const auto& v = reflectors[k];
        for (std::size_t j = 0; j < r; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < d; ++i) s += v[i] * q(i, j);
            for (std::size_t i = k; i < d; ++i) q(i, j) -= 2.0 * s * v[i];
        }
    }

    std::vector<double> col(d);
    for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t i = 0; i < d; ++i) col[i] = q(i, j);
        canonicalize_sign(col);
        for (std::size_t i = 0; i < d; ++i) q(i, j) = col[i];
    }
    return OrthoBasis{std::move(q), r};
}

Matrix project_out(const Matrix& x, const OrthoBasis& q) {
    if (x.cols() != q.ambient_dim()) {
        throw Error(ErrorCode::DimensionMismatch, "project_out: x has " + std::to_string(x.cols()) +
                                                      " columns, basis lives in dimension " +
                                                      std::to_string(q.ambient_dim()));
    }
    Matrix coeffs = matmul(x, q.basis);  // N×r
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < q.rank; ++j) {
            const double c = coeffs(i, j);
            for (std::size_t t = 0; t < x.cols(); ++t) out(i, t) -= c * q.basis(t, j);
        }
    }
    return out;
}

SingularValueDecomposition jacobi_svd(const Matrix& m) {
    const std::size_t rows = m.rows();
    const std::size_t d = m.cols();
    // Column-major working copy: cols[j] is column j of m.
    std::vector<std::vector<double>> cols(d, std::vector<double>(rows));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) cols[j][i] = m(i, j);
    std::vector<std::vector<double>> v(d, std::vector<double>(d, 0.0));
    for (std::size_t j = 0; j < d; ++j) v[j][j] = 1.0;

    auto rotate = [](std::vector<double>& x, std::vector<double>& y, double c, double s) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double xi = x[i];
            const double yi = y[i];
            x[i] = c * xi - s * yi;
            y[i] = s * xi + c * yi;
        }
    };

    for (int sweep = 0; sweep < kMaxJacobiSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double alpha = dot(cols[p], cols[p]);
                const double beta = dot(cols[q], cols[q]);
                const double gamma = dot(cols[p], cols[q]);
                if (alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(cols[p], cols[q], c, s);
                rotate(v[p], v[q], c, s);
                rotated = true;
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(d);
    for (std::size_t j = 0; j < d; ++j) sigma[j] = norm2(cols[j]);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SingularValueDecomposition out;
    out.singular_values.reserve(d);
    out.right_vectors = Matrix(d, d);
    for (std::size_t k = 0; k < d; ++k) {
        const std::size_t j = order[k];
        out.singular_values.push_back(sigma[j]);
        for (std::size_t i = 0; i < d; ++i) out.right_vectors(i, k) = v[j][i];
    }
    return out;
}

namespace {

std::size_t rank_from_values(const std::vector<double>& sigma, double tol) {
    if (sigma.empty() || sigma.front() == 0.0) return 0;
    const double cutoff = tol * sigma.front();
    return static_cast<std::size_t>(
        std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s > cutoff; }));
}

}  // namespace

PrincipalSubspace principal_subspace(const Matrix& r_mat, std::size_t max_rank,
                                     std::optional<double> rank_tol) {
    if (max_rank == 0) throw Error(ErrorCode::InvalidArgument, "principal_subspace needs max_rank >= 1");
    PrincipalSubspace out;
    out.ambient_dim = r_mat.cols();
    out.rows = Matrix(0, r_mat.cols());
    if (r_mat.empty()) return out;

    const auto svd = jacobi_svd(r_mat);
    const double tol = rank_tol.value_or(default_rank_tolerance(r_mat.rows(), r_mat.cols()));
    const std::size_t p = std::min(max_rank, rank_from_values(svd.singular_values, tol));

    out.rows = Matrix(p, r_mat.cols());
    for (std::size_t k = 0; k < p; ++k) {
        auto row = out.rows.row(k);
        for (std::size_t i = 0; i < r_mat.cols(); ++i) row[i] = svd.right_vectors(i, k);
        canonicalize_sign(row);
        out.singular_values.push_back(svd.singular_values[k]);
    }
    return out;
}

std::size_t numeric_rank(const Matrix& m, double tol) {
    if (tol < 0.0) throw Error(ErrorCode::InvalidArgument, "numeric_rank tolerance must be >= 0");
    if (m.empty()) return 0;
    return rank_from_values(jacobi_svd(m).singular_values, tol);
}

IndexList top_k_indices(const ScoreMap& scores, std::size_t k, const IndexList& eligible) {
    std::vector<std::pair<double, Position>> ranked;
    ranked.reserve(eligible.size());
    for (Position p : eligible) {
        auto it = scores.find(p);
        if (it == scores.end()) {
            throw Error(ErrorCode::UnknownPosition, "no score for eligible position " + std::to_string(p));
        }
        if (std::isnan(it->second)) {
            throw Error(ErrorCode::InvalidArgument, "NaN score at position " + std::to_string(p));
        }
        ranked.emplace_back(it->second, p);
    }
    const std::size_t take = std::min(k, ranked.size());
    auto better = [](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first > y.first;
        return x.second < y.second;
    };
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(take), ranked.end(), better);
    std::vector<Position> picked;
    picked.reserve(take);
    for (std::size_t i = 0; i < take; ++i) picked.push_back(ranked[i].second);
    std::sort(picked.begin(), picked.end());
    return IndexList(std::move(picked));
}

}  // namespace kvrelay
