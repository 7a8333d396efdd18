#pragma once

// Seeded sampling and dense linear-algebra kernels shared by every module.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace flute {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Raised when an input matrix violates a numerical precondition
/// (non-finite entries, out-of-range rank, zero normalisation).
class NumericalError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

/// Raised on inconsistent shapes between collaborating objects.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Counter-based random numbers
// ---------------------------------------------------------------------------

namespace detail {

// Philox4x32-10 block function (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMulA = 0xD2511F53u;
    constexpr std::uint32_t kMulB = 0xCD9E8D57u;
    constexpr std::uint32_t kWeylA = 0x9E3779B9u;
    constexpr std::uint32_t kWeylB = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t{kMulA} * ctr[0];
        const std::uint64_t p1 = std::uint64_t{kMulB} * ctr[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kWeylA;
        key[1] += kWeylB;
    }
    return ctr;
}

}  // namespace detail

/// Identifies one independent random sequence. The pair (seed, stream_id)
/// keys a Philox generator, so a stream's output never depends on which
/// other streams were consumed first or on which thread consumes it.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    friend bool operator==(const RngStream&, const RngStream&) = default;
};

/// Stream-id namespaces, so that one user seed can feed several purposes
/// without two purposes ever sharing a sequence.
enum class StreamPurpose : std::uint64_t {
    kGroundTruthLeft = 1,
    kGroundTruthRight = 2,
    kClientData = 3,
    kInitRepresentation = 4,
    kInitHeads = 5,
    kClassMeans = 6,
    kClassAssignment = 7,
    kClassSamples = 8,
    kClientSampling = 9,
    kTest = 15,
};

inline RngStream make_stream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t index = 0) {
    return {seed, (static_cast<std::uint64_t>(purpose) << 48) | (index & 0xFFFFFFFFFFFFull)};
}

/// Sequential reader over a counter-based stream. Cheap to construct;
/// copying it forks the position.
class CounterRng {
  public:
    using result_type = std::uint32_t;

    explicit CounterRng(RngStream stream) : stream_(stream) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        if (lane_ == 4) {
            refill();
        }
        return block_[lane_++];
    }

    /// Uniform double in (0, 1) with 53 random bits.
    double uniform_open() {
        const std::uint64_t hi = (*this)();
        const std::uint64_t lo = (*this)();
        const std::uint64_t bits = ((hi << 32) | lo) >> 11;
        return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller; pairs are cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform_open();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Unbiased integer in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound) {
        if (bound <= 1) {
            return 0;
        }
        const std::uint64_t span = std::uint64_t{1} << 32;
        if (bound <= span) {
            const std::uint64_t limit = span - span % bound;
            for (;;) {
                const std::uint64_t draw = (*this)();
                if (draw < limit) {
                    return draw % bound;
                }
            }
        }
        throw std::invalid_argument("CounterRng::below: bound exceeds 2^32");
    }

  private:
    void refill() {
        const std::array<std::uint32_t, 4> ctr{
            static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
            static_cast<std::uint32_t>(stream_.stream_id),
            static_cast<std::uint32_t>(stream_.stream_id >> 32)};
        const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(stream_.seed),
                                               static_cast<std::uint32_t>(stream_.seed >> 32)};
        block_ = detail::philox4x32(ctr, key);
        ++counter_;
        lane_ = 0;
    }

    RngStream stream_;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> block_{};
    int lane_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// rows x cols matrix of IID Normal(0, std^2) entries, filled row by row.
inline Matrix seeded_gaussian(Index rows, Index cols, double std_dev, RngStream stream) {
    if (rows < 1 || cols < 1) {
        throw ShapeError("seeded_gaussian: rows and cols must be >= 1");
    }
    if (!(std_dev >= 0.0)) {
        throw std::invalid_argument("seeded_gaussian: std must be >= 0");
    }
    Matrix out(rows, cols);
    CounterRng rng(stream);
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            out(i, j) = std_dev * rng.normal();
        }
    }
    return out;
}

/// Draws `count` distinct indices from [0, population) in ascending order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t population, std::size_t count,
                                                           RngStream stream) {
    if (count > population) {
        throw std::invalid_argument("sample_without_replacement: count exceeds population");
    }
    std::vector<std::size_t> pool(population);
    for (std::size_t i = 0; i < population; ++i) {
        pool[i] = i;
    }
    CounterRng rng(stream);
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(population - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

inline double spectral_norm(const Matrix& a) {
    if (a.size() == 0) {
        return 0.0;
    }
    Eigen::JacobiSVD<Matrix> svd(a);
    return svd.singularValues()(0);
}

/// Singular values of `a`, nonincreasing, length min(rows, cols).
inline Vector singular_values(const Matrix& a) {
    if (a.size() == 0) {
        return Vector();
    }
    Eigen::JacobiSVD<Matrix> svd(a);
    return svd.singularValues();
}

struct SvdResult {
    Matrix left_vectors;   // d x r
    Vector singular_values;  // r, nonincreasing
    Matrix right_vectors;  // M x r

    Index rank_bound() const { return singular_values.size(); }

    /// Number of singular values above rel_tol * s_1.
    Index numerical_rank(double rel_tol = 1e-12) const {
        if (singular_values.size() == 0 || singular_values(0) == 0.0) {
            return 0;
        }
        const double cut = rel_tol * singular_values(0);
        Index r = 0;
        while (r < singular_values.size() && singular_values(r) > cut) {
            ++r;
        }
        return r;
    }
};

/// Full orthogonal bases alongside the singular values; the leading
/// min(rows, cols) columns coincide with full_svd's output.
struct FullBases {
    Matrix left;   // d x d
    Vector singular_values;
    Matrix right;  // M x M
};

namespace detail {

// Flip each singular pair so the largest-magnitude entry of the left
// vector is nonnegative (first index wins ties).
inline void canonicalize_signs(Matrix& u, Matrix& v, Index pairs) {
    for (Index j = 0; j < pairs; ++j) {
        Index arg = 0;
        double best = -1.0;
        for (Index i = 0; i < u.rows(); ++i) {
            const double mag = std::abs(u(i, j));
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        if (u(arg, j) < 0.0) {
            u.col(j) = -u.col(j);
            v.col(j) = -v.col(j);
        }
    }
}

inline void require_finite(const Matrix& a, const char* where) {
    if (!a.allFinite()) {
        throw NumericalError(std::string(where) + ": matrix has non-finite entries");
    }
}

}  // namespace detail

inline FullBases full_bases(const Matrix& a) {
    detail::require_finite(a, "full_bases");
    if (a.size() == 0) {
        throw ShapeError("full_bases: empty matrix");
    }
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    FullBases out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
    detail::canonicalize_signs(out.left, out.right, out.singular_values.size());
    // Completion columns have no paired partner; canonicalize them alone.
    for (Index j = out.singular_values.size(); j < out.left.cols(); ++j) {
        Index arg = 0;
        out.left.col(j).cwiseAbs().maxCoeff(&arg);
        if (out.left(arg, j) < 0.0) {
            out.left.col(j) = -out.left.col(j);
        }
    }
    for (Index j = out.singular_values.size(); j < out.right.cols(); ++j) {
        Index arg = 0;
        out.right.col(j).cwiseAbs().maxCoeff(&arg);
        if (out.right(arg, j) < 0.0) {
            out.right.col(j) = -out.right.col(j);
        }
    }
    return out;
}

/// Thin SVD with deterministic signs. Two-sided Jacobi, so small singular
/// values keep high relative accuracy.
inline SvdResult full_svd(const Matrix& a) {
    detail::require_finite(a, "full_svd");
    if (a.size() == 0) {
        throw ShapeError("full_svd: empty matrix");
    }
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    SvdResult out{svd.matrixU(), svd.singularValues(), svd.matrixV()};
    detail::canonicalize_signs(out.left_vectors, out.right_vectors, out.singular_values.size());
    return out;
}

struct TruncatedSvd {
    Matrix u_k;
    Vector lambda_k;
    Matrix v_k;
    Matrix approx;  // U_k diag(lambda_k) V_k^T
};

inline TruncatedSvd truncate(const SvdResult& svd, Index k) {
    if (k < 1 || k > svd.rank_bound()) {
        throw std::out_of_range("truncated_svd: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(svd.rank_bound()) + "]");
    }
    TruncatedSvd out;
    out.u_k = svd.left_vectors.leftCols(k);
    out.lambda_k = svd.singular_values.head(k);
    out.v_k = svd.right_vectors.leftCols(k);
    out.approx = out.u_k * out.lambda_k.asDiagonal() * out.v_k.transpose();
    return out;
}

/// Best rank-k Frobenius approximation of `a`.
inline TruncatedSvd truncated_svd(const Matrix& a, Index k) { return truncate(full_svd(a), k); }

/// Orthonormal basis of the column space of a tall matrix via Householder QR.
inline Matrix orthonormal_columns(const Matrix& a) {
    Eigen::HouseholderQR<Matrix> qr(a);
    return qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
}

}  // namespace flute
