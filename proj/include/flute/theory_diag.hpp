#pragma once

// Symmetric reparameterisation of the factored iterate and the diagnostics
// built on it: absorbing regions, inverse SNR, distance to the optimum,
// entry-time bound and the empirical-vs-population gradient discrepancy.
//
// Conventions. With Phi = U Lambda V^T (full orthogonal U, V), the rotated
// factors B~ = U^T B and W~ = W V are zero-padded to dbar = max(d, M) and
// stacked as
//     Theta = [ (B* + W*^T)/sqrt2 ; (B* - W*^T)/sqrt2 ]      (2 dbar x k).
// Under exact gradients the FLUTE step with gamma1 = 1/4, gamma2 = 1/8 and
// eta_l = eta_r = eta becomes
//     Theta+ = Theta + (eta/2) LambdaTilde Theta - (eta/2) Theta Theta^T Theta,
// with LambdaTilde = diag(2 Lambda*, -2 Lambda*).

#include "flute/metrics.hpp"
#include "flute/model.hpp"
#include "flute/synthgen.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <span>

namespace flute {

struct LambdaTilde {
    Vector sorted;        // 2 dbar eigenvalues, nonincreasing
    Vector diagonal;      // same values in block order diag(2 Lambda*, -2 Lambda*)
    Vector top_k;         // the k leading values
    Vector lambda_k;      // singular values lambda_1..lambda_k of Phi (zero-padded)
    double delta_star = 0.0;
    Index d_bar = 0;
    Index k = 0;
    bool degenerate = false;  // delta_star is zero up to rounding

    double lambda_star(Index i) const { return sorted(i - 1); }
};

/// Spectrum of LambdaTilde for target rank k, 1 <= k <= dbar.
inline LambdaTilde lambda_tilde(const GroundTruth& gt, Index k) {
    const Index dbar = gt.d_over();
    if (k < 1 || k > dbar) {
        throw std::out_of_range("lambda_tilde: k=" + std::to_string(k) + " outside [1, " + std::to_string(dbar) + "]");
    }
    LambdaTilde lt;
    lt.d_bar = dbar;
    lt.k = k;
    lt.diagonal = Vector::Zero(2 * dbar);
    for (Index i = 0; i < gt.d_under(); ++i) {
        lt.diagonal(i) = 2.0 * gt.svd.singular_values(i);
        lt.diagonal(dbar + i) = -2.0 * gt.svd.singular_values(i);
    }
    lt.sorted = lt.diagonal;
    std::sort(lt.sorted.begin(), lt.sorted.end(), std::greater<>());
    lt.top_k = lt.sorted.head(k);
    lt.lambda_k = Vector::Zero(k);
    for (Index i = 0; i < k; ++i) {
        lt.lambda_k(i) = gt.lambda(i + 1);
    }
    lt.delta_star = lt.sorted(k - 1) - lt.sorted(k);
    lt.degenerate = lt.delta_star <= 1e-12 * std::max(1.0, lt.sorted(0));
    return lt;
}

struct ThetaState {
    Matrix theta;    // 2 dbar x k
    Matrix b_tilde;  // dbar x k, padded U^T B
    Matrix w_tilde;  // k x dbar, padded W V
    Index k = 0;

    auto theta_k() const { return theta.topRows(k); }
    auto theta_res() const { return theta.bottomRows(theta.rows() - k); }
};

inline ThetaState theta_from_blocks(const Matrix& b_star, const Matrix& w_star) {
    const Index dbar = b_star.rows();
    const Index k = b_star.cols();
    ThetaState ts;
    ts.k = k;
    ts.b_tilde = b_star;
    ts.w_tilde = w_star;
    ts.theta.resize(2 * dbar, k);
    const double s = 1.0 / std::sqrt(2.0);
    ts.theta.topRows(dbar) = s * (b_star + w_star.transpose());
    ts.theta.bottomRows(dbar) = s * (b_star - w_star.transpose());
    return ts;
}

inline ThetaState build_theta(const FactoredModel& model, const GroundTruth& gt) {
    model.check_shapes();
    if (model.d() != gt.d() || model.clients() != gt.clients()) {
        throw ShapeError("build_theta: model dimensions do not match ground truth");
    }
    const Index dbar = gt.d_over();
    const Index k = model.k();
    Matrix b_star = Matrix::Zero(dbar, k);
    Matrix w_star = Matrix::Zero(k, dbar);
    b_star.topRows(gt.d()) = gt.bases.left.transpose() * model.b;
    w_star.leftCols(gt.clients()) = model.w * gt.bases.right;
    return theta_from_blocks(b_star, w_star);
}

/// Maps a Theta back to (B, W) in the original coordinates (inverse of
/// build_theta on the unpadded part).
inline FactoredModel model_from_theta(const Matrix& theta, const GroundTruth& gt) {
    const Index dbar = gt.d_over();
    const double s = 1.0 / std::sqrt(2.0);
    const Matrix b_star = s * (theta.topRows(dbar) + theta.bottomRows(dbar));
    const Matrix w_star_t = s * (theta.topRows(dbar) - theta.bottomRows(dbar));
    FactoredModel model;
    model.b = gt.bases.left * b_star.topRows(gt.d());
    model.w = w_star_t.topRows(gt.clients()).transpose() * gt.bases.right.transpose();
    return model;
}

inline Matrix theta_population_step(const Matrix& theta, const LambdaTilde& lt, double eta) {
    if (theta.rows() != lt.diagonal.size()) {
        throw ShapeError("theta_population_step: Theta has " + std::to_string(theta.rows()) + " rows, expected " +
                         std::to_string(lt.diagonal.size()));
    }
    return theta + 0.5 * eta * (lt.diagonal.asDiagonal() * theta) -
           0.5 * eta * (theta * (theta.transpose() * theta));
}

struct RegionFlags {
    bool in_r = false;
    bool in_rs = false;
    double sigma1_sq_theta = 0.0;
    double sigma1_sq_res = 0.0;
    double sigmak_sq_k = 0.0;
    bool degenerate_gap = false;
};

namespace detail {

inline double smallest_singular_value(const Matrix& a) {
    const Vector s = singular_values(a);
    return s.size() == 0 ? 0.0 : s(s.size() - 1);
}

// a <= b with slack 1e-12 relative to max(1, |b|).
inline bool le_slack(double a, double b) { return a <= b + 1e-12 * std::max(1.0, std::abs(b)); }

}  // namespace detail

/// R:   sigma1^2(Theta) <= 2 l*_1, sigma1^2(Theta_res) <= l*_k - D/2, sigmak^2(Theta_k) >= D/4.
/// R_s: the first two conditions only.
inline RegionFlags region_membership(const ThetaState& ts, const LambdaTilde& lt) {
    RegionFlags f;
    f.degenerate_gap = lt.degenerate;
    f.sigma1_sq_theta = std::pow(spectral_norm(ts.theta), 2);
    f.sigma1_sq_res = std::pow(spectral_norm(ts.theta_res()), 2);
    f.sigmak_sq_k = std::pow(detail::smallest_singular_value(ts.theta_k()), 2);
    const double l1 = lt.lambda_star(1);
    const double lk = lt.lambda_star(lt.k);
    const double delta = lt.delta_star;
    f.in_rs = detail::le_slack(f.sigma1_sq_theta, 2.0 * l1) && detail::le_slack(f.sigma1_sq_res, lk - delta / 2.0);
    f.in_r = f.in_rs && detail::le_slack(delta / 4.0, f.sigmak_sq_k);
    return f;
}

struct SnrAndDistance {
    std::optional<double> inv_snr;  // nullopt when sigma_k(Theta_k) = 0
    double d_spec = 0.0;
    double d_full_frob = 0.0;
    double bridge_lhs = 0.0;
};

inline SnrAndDistance snr_and_dist(const ThetaState& ts, const LambdaTilde& lt) {
    SnrAndDistance out;
    const Index k = ts.k;
    const Matrix tk = ts.theta_k();
    const double sk = detail::smallest_singular_value(tk);
    if (sk > 0.0) {
        out.inv_snr = std::pow(spectral_norm(ts.theta_res()), 2) / (sk * sk);
    }
    const Matrix dk = tk * tk.transpose() - Matrix(lt.top_k.asDiagonal());
    out.d_spec = spectral_norm(dk);

    Matrix target = Matrix::Zero(ts.theta.rows(), ts.theta.rows());
    target.topLeftCorner(k, k) = lt.top_k.asDiagonal();
    out.d_full_frob = (ts.theta * ts.theta.transpose() - target).norm();

    const Index dbar = ts.b_tilde.rows();
    Matrix opt = Matrix::Zero(dbar, dbar);
    opt.topLeftCorner(k, k) = lt.lambda_k.asDiagonal();
    out.bridge_lhs = (ts.b_tilde * ts.w_tilde - opt).norm();
    return out;
}

/// log(D / (4 sigmak^2(Theta_k^0))) / (2 log(1 + (eta/2)(l*_k - D/2))); +inf when sigma_k = 0.
inline double t_region(const ThetaState& theta0, const LambdaTilde& lt, double eta) {
    const double lk = lt.lambda_star(lt.k);
    const double delta = lt.delta_star;
    if (!(lk > delta / 2.0)) {
        throw std::invalid_argument("t_region: requires lambda*_k > Delta/2");
    }
    if (!(eta > 0.0)) {
        throw std::invalid_argument("t_region: eta must be > 0");
    }
    const double sk = detail::smallest_singular_value(theta0.theta_k());
    if (sk == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return std::log(delta / (4.0 * sk * sk)) / (2.0 * std::log1p(0.5 * eta * (lk - delta / 2.0)));
}

struct GradientDiscrepancy {
    Matrix q;        // d x k
    Matrix q_tilde;  // k x M
    double q_norm = 0.0;
    double q_tilde_norm = 0.0;
    double q_norm_per_eta = 0.0;
    double q_tilde_norm_per_eta = 0.0;
};

/// Difference between the empirical and the population data step:
///   Q  = eta sum_i (I - X_i^T X_i / N)(B w_i - phi_i) w_i^T + eta sum_i X_i^T E_i w_i^T / N
///   q~_i = eta B^T (I - X_i^T X_i / N)(B w_i - phi_i) + eta B^T X_i^T E_i / N
/// with E_i = y_i - X_i phi_i. Norms are spectral.
inline GradientDiscrepancy gradient_discrepancy(const FactoredModel& model, const GroundTruth& gt,
                                                std::span<const ClientShard> shards, double eta) {
    model.check_shapes();
    if (static_cast<Index>(shards.size()) != model.clients() || model.d() != gt.d()) {
        throw ShapeError("gradient_discrepancy: need one shard per client and matching d");
    }
    GradientDiscrepancy out;
    out.q = Matrix::Zero(model.d(), model.k());
    out.q_tilde = Matrix::Zero(model.k(), model.clients());
    for (Index i = 0; i < model.clients(); ++i) {
        const auto& shard = shards[static_cast<std::size_t>(i)];
        const double n = static_cast<double>(shard.samples());
        const Vector wi = model.w.col(i);
        const Vector resid = model.b * wi - gt.phi.col(i);
        const Vector noise = shard.recovered_noise(gt);
        const Vector cov_resid = shard.x.transpose() * (shard.x * resid) / n;
        const Vector noise_corr = shard.x.transpose() * noise / n;
        const Vector direction = eta * (resid - cov_resid + noise_corr);
        out.q.noalias() += direction * wi.transpose();
        out.q_tilde.col(i) = model.b.transpose() * direction;
    }
    out.q_norm = spectral_norm(out.q);
    out.q_tilde_norm = spectral_norm(out.q_tilde);
    out.q_norm_per_eta = eta > 0.0 ? out.q_norm / eta : 0.0;
    out.q_tilde_norm_per_eta = eta > 0.0 ? out.q_tilde_norm / eta : 0.0;
    return out;
}

/// Fills the theory columns of a trace row. Q is evaluated only when
/// shards are supplied (empirical runs).
inline void fill_theory(RoundRecord& rec, const FactoredModel& model, const GroundTruth& gt,
                        const LambdaTilde& lt, std::span<const ClientShard> shards, double eta) {
    const ThetaState ts = build_theta(model, gt);
    const RegionFlags flags = region_membership(ts, lt);
    const SnrAndDistance sd = snr_and_dist(ts, lt);
    rec.in_r = flags.in_r;
    rec.in_rs = flags.in_rs;
    rec.inv_snr = sd.inv_snr;
    rec.d_spec = sd.d_spec;
    rec.delta_zero_warning = lt.degenerate;
    rec.theory_available = true;
    if (!shards.empty()) {
        const auto gd = gradient_discrepancy(model, gt, shards, eta);
        rec.q_norm = gd.q_norm;
        rec.q_tilde_norm = gd.q_tilde_norm;
    }
}

}  // namespace flute
