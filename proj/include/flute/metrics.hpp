#pragma once

// Errors of a factored model against the ground truth and the rank-k optimum.

#include "flute/model.hpp"
#include "flute/synthgen.hpp"

#include <optional>

namespace flute {

/// One trace row of a linear run. Theory fields are meaningful only when
/// `theory_available` is set.
struct RoundRecord {
    std::size_t t = 0;
    double avg_err_gt = 0.0;
    double avg_err_opt = 0.0;
    double frob_to_opt = 0.0;
    bool in_r = false;
    bool in_rs = false;
    std::optional<double> inv_snr;  // nullopt encodes +inf
    double d_spec = 0.0;
    double q_norm = 0.0;
    double q_tilde_norm = 0.0;
    bool delta_zero_warning = false;
    bool theory_available = false;
};

struct LinearErrors {
    double avg_err_gt = 0.0;
    double avg_err_opt = 0.0;
    double frob_to_opt = 0.0;
};

/// Phi_k, the best rank-k approximation; equals Phi when k >= min(d, M).
inline Matrix rank_k_optimum(const GroundTruth& gt, Index k) {
    if (k < 1) {
        throw std::out_of_range("rank_k_optimum: k must be >= 1");
    }
    if (k >= gt.d_under()) {
        return gt.phi;
    }
    return truncate(gt.svd, k).approx;
}

inline LinearErrors linear_metrics(const FactoredModel& model, const GroundTruth& gt, const Matrix& phi_k) {
    model.check_shapes();
    if (model.d() != gt.d() || model.clients() != gt.clients() || phi_k.rows() != gt.d() ||
        phi_k.cols() != gt.clients()) {
        throw ShapeError("linear_metrics: model, ground truth and optimum disagree on (d, M)");
    }
    const Matrix product = model.b * model.w;
    LinearErrors out;
    const auto m = static_cast<double>(gt.clients());
    for (Index i = 0; i < gt.clients(); ++i) {
        out.avg_err_gt += (product.col(i) - gt.phi.col(i)).norm();
        out.avg_err_opt += (product.col(i) - phi_k.col(i)).norm();
    }
    out.avg_err_gt /= m;
    out.avg_err_opt /= m;
    out.frob_to_opt = (product - phi_k).norm();
    return out;
}

inline LinearErrors linear_metrics(const FactoredModel& model, const GroundTruth& gt, Index k) {
    return linear_metrics(model, gt, rank_k_optimum(gt, k));
}

}  // namespace flute
