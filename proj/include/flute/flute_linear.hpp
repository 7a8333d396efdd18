#pragma once

// Linear FLUTE: clients send half-gradients of their squared loss, the
// server takes a data step and then a separate step on the regulariser
//     -gamma1 ||B W||_F^2 + gamma2 (||B^T B||_F^2 + ||W W^T||_F^2)
// evaluated at the pre-round iterate.

#include "flute/metrics.hpp"
#include "flute/model.hpp"
#include "flute/parallel.hpp"
#include "flute/synthgen.hpp"
#include "flute/theory_diag.hpp"

#include <optional>
#include <span>
#include <vector>

namespace flute {

enum class GradientMode { kEmpirical, kPopulation };

struct FluteConfig {
    Index k = 2;
    double eta_l = 0.03;
    double eta_r = 0.03;
    double gamma1 = 0.25;
    double gamma2 = 0.125;
    std::optional<double> alpha;  // defaults to 1 / (10 d)
    std::size_t rounds = 1000;
    std::size_t record_stride = 1;
    GradientMode mode = GradientMode::kEmpirical;
    std::uint64_t seed = 1;

    double alpha_for(Index d) const { return alpha.value_or(1.0 / (10.0 * static_cast<double>(d))); }

    void validate() const {
        if (k < 1) throw std::invalid_argument("FluteConfig: k must be >= 1");
        if (!(eta_l > 0.0)) throw std::invalid_argument("FluteConfig: eta_l must be > 0");
        if (!(eta_r > 0.0)) throw std::invalid_argument("FluteConfig: eta_r must be > 0");
        if (!(gamma1 >= 0.0)) throw std::invalid_argument("FluteConfig: gamma1 must be >= 0");
        if (!(gamma2 >= 0.0)) throw std::invalid_argument("FluteConfig: gamma2 must be >= 0");
        if (alpha && !(*alpha >= 0.0)) throw std::invalid_argument("FluteConfig: alpha must be >= 0");
        if (rounds < 1) throw std::invalid_argument("FluteConfig: rounds must be >= 1");
        if (record_stride < 1) throw std::invalid_argument("FluteConfig: record_stride must be >= 1");
    }
};

/// Entries of B and W IID N(0, alpha^2), from separate streams.
inline FactoredModel init_factored(Index d, Index k, Index clients, double alpha, std::uint64_t seed) {
    if (!(alpha >= 0.0)) {
        throw std::invalid_argument("init_factored: alpha must be >= 0");
    }
    return {seeded_gaussian(d, k, alpha, make_stream(seed, StreamPurpose::kInitRepresentation)),
            seeded_gaussian(k, clients, alpha, make_stream(seed, StreamPurpose::kInitHeads))};
}

// ---------------------------------------------------------------------------
// Objective pieces
// ---------------------------------------------------------------------------

/// (1/2)(1/N) ||X B w - y||^2, whose gradient local_gradients returns.
inline double half_local_loss(const Matrix& b, const Vector& w, const ClientShard& shard) {
    return 0.5 * (shard.x * (b * w) - shard.y).squaredNorm() / static_cast<double>(shard.samples());
}

inline double regularizer_value(const Matrix& b, const Matrix& w, double gamma1, double gamma2) {
    const Matrix btb = b.transpose() * b;
    const Matrix wwt = w * w.transpose();
    return -gamma1 * (b * w).squaredNorm() + gamma2 * (btb.squaredNorm() + wwt.squaredNorm());
}

/// ||B^T B - W W^T||_F^2.
inline double balance_penalty(const Matrix& b, const Matrix& w) {
    return (b.transpose() * b - w * w.transpose()).squaredNorm();
}

struct ModelGradient {
    Matrix b;
    Matrix w;
};

/// Exact gradient of regularizer_value.
inline ModelGradient regularizer_gradients(const Matrix& b, const Matrix& w, double gamma1, double gamma2) {
    const Matrix wwt = w * w.transpose();
    const Matrix btb = b.transpose() * b;
    return {-2.0 * gamma1 * b * wwt + 4.0 * gamma2 * b * btb, -2.0 * gamma1 * btb * w + 4.0 * gamma2 * wwt * w};
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct ClientGradient {
    Matrix g_b;  // d x k
    Vector g_w;  // k
};

/// Half-gradients of the client loss: G_B = X^T r w^T / N, g_w = B^T X^T r / N, r = X B w - y.
inline ClientGradient local_gradients(const Matrix& b, const Vector& w, const ClientShard& shard) {
    if (b.rows() != shard.x.cols() || b.cols() != w.size() || shard.x.rows() != shard.y.size()) {
        throw ShapeError("local_gradients: inconsistent shapes");
    }
    const double n = static_cast<double>(shard.samples());
    const Vector resid = shard.x * (b * w) - shard.y;
    const Vector xtr = shard.x.transpose() * resid / n;
    return {xtr * w.transpose(), b.transpose() * xtr};
}

/// Aggregated data gradient handed to the server: sum_i G_B,i and the
/// per-client head gradients stacked as columns.
struct GradientSum {
    Matrix g_b;  // d x k
    Matrix g_w;  // k x M
};

/// G_B = (B W - Phi) W^T, G_W = B^T (B W - Phi).
inline GradientSum population_gradients(const Matrix& b, const Matrix& w, const Matrix& phi) {
    if (b.cols() != w.rows() || b.rows() != phi.rows() || w.cols() != phi.cols()) {
        throw ShapeError("population_gradients: inconsistent shapes");
    }
    const Matrix resid = b * w - phi;
    return {resid * w.transpose(), b.transpose() * resid};
}

/// Fixed-order reduction: ascending client index, sequential accumulation.
inline GradientSum aggregate(std::span<const ClientGradient> grads, Index d, Index k) {
    GradientSum sum{Matrix::Zero(d, k), Matrix::Zero(k, static_cast<Index>(grads.size()))};
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const auto& g = grads[i];
        if (g.g_b.rows() != d || g.g_b.cols() != k || g.g_w.size() != k) {
            throw ShapeError("aggregate: client " + std::to_string(i) + " gradient has wrong shape");
        }
        sum.g_b += g.g_b;
        sum.g_w.col(static_cast<Index>(i)) = g.g_w;
    }
    return sum;
}

inline std::vector<ClientGradient> all_local_gradients(const FactoredModel& model,
                                                       std::span<const ClientShard> shards,
                                                       const Execution& exec) {
    if (static_cast<Index>(shards.size()) != model.clients()) {
        throw ShapeError("all_local_gradients: " + std::to_string(shards.size()) + " shards for " +
                         std::to_string(model.clients()) + " clients");
    }
    std::vector<ClientGradient> grads(shards.size());
    parallel_for(shards.size(), exec, [&](std::size_t i) {
        grads[i] = local_gradients(model.b, model.w.col(static_cast<Index>(i)), shards[i]);
    });
    return grads;
}

/// Data step followed by the regulariser step; both regulariser gradients
/// are taken at the incoming (B, W).
inline FactoredModel server_step(const FactoredModel& model, const GradientSum& grads, const FluteConfig& cfg) {
    model.check_shapes();
    if (grads.g_b.rows() != model.b.rows() || grads.g_b.cols() != model.b.cols() ||
        grads.g_w.rows() != model.w.rows() || grads.g_w.cols() != model.w.cols()) {
        throw ShapeError("server_step: gradient shapes do not match the model");
    }
    const ModelGradient reg = regularizer_gradients(model.b, model.w, cfg.gamma1, cfg.gamma2);
    FactoredModel next;
    next.b = model.b - cfg.eta_l * grads.g_b - cfg.eta_r * reg.b;
    next.w = model.w - cfg.eta_l * grads.g_w - cfg.eta_r * reg.w;
    return next;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LinearTrainResult {
    FactoredModel model;
    std::vector<RoundRecord> trace;
    bool diverged = false;
    std::size_t diverged_at = 0;
};

/// Shared recorder for linear methods: errors always, theory columns when
/// the target rank admits a LambdaTilde.
class LinearRecorder {
  public:
    LinearRecorder(const GroundTruth& gt, Index k, std::span<const ClientShard> shards, double eta)
        : gt_(gt), phi_k_(rank_k_optimum(gt, k)), shards_(shards), eta_(eta) {
        if (k <= gt.d_over()) {
            lt_ = lambda_tilde(gt, k);
        }
    }

    RoundRecord record(std::size_t t, const FactoredModel& model) const {
        RoundRecord rec;
        rec.t = t;
        const LinearErrors err = linear_metrics(model, gt_, phi_k_);
        rec.avg_err_gt = err.avg_err_gt;
        rec.avg_err_opt = err.avg_err_opt;
        rec.frob_to_opt = err.frob_to_opt;
        if (lt_) {
            fill_theory(rec, model, gt_, *lt_, shards_, eta_);
        }
        return rec;
    }

    const std::optional<LambdaTilde>& lambda() const { return lt_; }

  private:
    const GroundTruth& gt_;
    Matrix phi_k_;
    std::span<const ClientShard> shards_;
    double eta_;
    std::optional<LambdaTilde> lt_;
};

inline bool should_record(std::size_t t, std::size_t rounds, std::size_t stride) {
    return t % stride == 0 || t == rounds;
}

/// One round: broadcast, client gradients (or exact ones), server step.
inline FactoredModel flute_round(const FactoredModel& model, const FluteConfig& cfg, const GroundTruth& gt,
                                 std::span<const ClientShard> shards, const Execution& exec) {
    if (cfg.mode == GradientMode::kPopulation) {
        return server_step(model, population_gradients(model.b, model.w, gt.phi), cfg);
    }
    const auto grads = all_local_gradients(model, shards, exec);
    return server_step(model, aggregate(grads, model.d(), model.k()), cfg);
}

inline LinearTrainResult flute_train(const FluteConfig& cfg, const GroundTruth& gt,
                                     std::span<const ClientShard> shards, FactoredModel init,
                                     const Execution& exec = {}) {
    cfg.validate();
    init.check_shapes();
    if (init.d() != gt.d() || init.clients() != gt.clients() || init.k() != cfg.k) {
        throw ShapeError("flute_train: initial model does not match (d, k, M)");
    }
    if (cfg.mode == GradientMode::kEmpirical && static_cast<Index>(shards.size()) != gt.clients()) {
        throw std::invalid_argument("flute_train: empirical mode needs one shard per client");
    }
    const std::span<const ClientShard> diag_shards =
        cfg.mode == GradientMode::kEmpirical ? shards : std::span<const ClientShard>{};
    const LinearRecorder recorder(gt, cfg.k, diag_shards, cfg.eta_l);

    LinearTrainResult result;
    result.model = std::move(init);
    result.trace.push_back(recorder.record(0, result.model));
    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        FactoredModel next = flute_round(result.model, cfg, gt, shards, exec);
        if (!next.finite()) {
            result.diverged = true;
            result.diverged_at = t;
            break;
        }
        result.model = std::move(next);
        if (should_record(t, cfg.rounds, cfg.record_stride)) {
            result.trace.push_back(recorder.record(t, result.model));
        }
    }
    return result;
}

inline LinearTrainResult flute_train(const FluteConfig& cfg, const GroundTruth& gt,
                                     std::span<const ClientShard> shards, const Execution& exec = {}) {
    cfg.validate();
    return flute_train(cfg, gt, shards, init_factored(gt.d(), cfg.k, gt.clients(), cfg.alpha_for(gt.d()), cfg.seed),
                       exec);
}

}  // namespace flute
