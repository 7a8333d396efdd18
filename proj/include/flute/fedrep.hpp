#pragma once

// FedRep baseline: per-round exact (or iterative) head fit with the
// representation frozen, one local representation step, server average.

#include "flute/flute_linear.hpp"

#include <variant>

namespace flute {

struct ExactLeastSquares {};

struct HeadGradientSteps {
    std::size_t count = 10;
    double step = 0.1;
};

using HeadMode = std::variant<ExactLeastSquares, HeadGradientSteps>;

struct SpectralInitMode {};

struct RandomInitMode {
    std::optional<double> alpha;  // defaults to 1 / (10 d), as FLUTE
};

using InitMode = std::variant<SpectralInitMode, RandomInitMode>;

struct FedRepConfig {
    Index k = 2;
    double eta = 0.03;
    HeadMode head_mode = ExactLeastSquares{};
    InitMode init_mode = SpectralInitMode{};
    std::size_t rounds = 1000;
    std::size_t record_stride = 1;
    std::uint64_t seed = 1;

    void validate() const {
        if (k < 1) throw std::invalid_argument("FedRepConfig: k must be >= 1");
        if (!(eta > 0.0)) throw std::invalid_argument("FedRepConfig: eta must be > 0");
        if (rounds < 1) throw std::invalid_argument("FedRepConfig: rounds must be >= 1");
        if (record_stride < 1) throw std::invalid_argument("FedRepConfig: record_stride must be >= 1");
        if (const auto* g = std::get_if<HeadGradientSteps>(&head_mode); g && !(g->step > 0.0)) {
            throw std::invalid_argument("FedRepConfig: head step must be > 0");
        }
        if (const auto* r = std::get_if<RandomInitMode>(&init_mode); r && r->alpha && !(*r->alpha >= 0.0)) {
            throw std::invalid_argument("FedRepConfig: alpha must be >= 0");
        }
    }
};

struct SpectralInit {
    Matrix basis;  // d x k, orthonormal columns
    bool degenerate = false;
};

/// Top-k eigenvectors of (1/(M N)) sum_ij y_ij^2 x_ij x_ij^T. Signs follow
/// the SVD convention (largest-magnitude entry nonnegative). A zero moment
/// matrix yields the first k canonical directions and sets `degenerate`.
inline SpectralInit spectral_init(std::span<const ClientShard> shards, Index k) {
    if (shards.empty()) {
        throw std::invalid_argument("spectral_init: no shards");
    }
    const Index d = shards.front().x.cols();
    if (k < 1 || k > d) {
        throw std::out_of_range("spectral_init: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
    }
    Matrix moment = Matrix::Zero(d, d);
    double total = 0.0;
    for (const auto& shard : shards) {
        const Matrix weighted = shard.x.transpose() * shard.y.cwiseAbs2().asDiagonal();
        moment.noalias() += weighted * shard.x;
        total += static_cast<double>(shard.samples());
    }
    moment /= total;

    SpectralInit out;
    if (moment.cwiseAbs().maxCoeff() == 0.0) {
        out.basis = Matrix::Identity(d, k);
        out.degenerate = true;
        return out;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(moment);
    out.basis.resize(d, k);
    for (Index j = 0; j < k; ++j) {
        out.basis.col(j) = eig.eigenvectors().col(d - 1 - j);
    }
    Matrix unused = Matrix::Zero(k, k);
    detail::canonicalize_signs(out.basis, unused, k);
    const Vector& ev = eig.eigenvalues();
    out.degenerate = k < d && std::abs(ev(d - k) - ev(d - k - 1)) <= 1e-12 * std::abs(ev(d - 1));
    return out;
}

struct HeadFit {
    Vector w;
    bool rank_deficient = false;
};

/// argmin_w ||X B w - y||^2, minimum-norm when X B is rank deficient.
inline HeadFit exact_head(const Matrix& b, const ClientShard& shard) {
    const Matrix xb = shard.x * b;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(xb);
    return {cod.solve(shard.y), cod.rank() < b.cols()};
}

struct FedRepTrainResult {
    FactoredModel model;
    std::vector<RoundRecord> trace;
    bool diverged = false;
    std::size_t diverged_at = 0;
    std::size_t rank_deficient_heads = 0;
    bool degenerate_init = false;
};

inline FactoredModel fedrep_initial_model(const FedRepConfig& cfg, const GroundTruth& gt,
                                          std::span<const ClientShard> shards, bool* degenerate = nullptr) {
    if (const auto* r = std::get_if<RandomInitMode>(&cfg.init_mode)) {
        const double alpha = r->alpha.value_or(1.0 / (10.0 * static_cast<double>(gt.d())));
        return init_factored(gt.d(), cfg.k, gt.clients(), alpha, cfg.seed);
    }
    const SpectralInit si = spectral_init(shards, cfg.k);
    if (degenerate != nullptr) {
        *degenerate = si.degenerate;
    }
    return {si.basis, Matrix::Zero(cfg.k, gt.clients())};
}

inline FedRepTrainResult fedrep_train(const FedRepConfig& cfg, const GroundTruth& gt,
                                      std::span<const ClientShard> shards, const Execution& exec = {}) {
    cfg.validate();
    if (shards.empty() || static_cast<Index>(shards.size()) != gt.clients()) {
        throw std::invalid_argument("fedrep_train: need one shard per client");
    }
    FedRepTrainResult result;
    result.model = fedrep_initial_model(cfg, gt, shards, &result.degenerate_init);
    const LinearRecorder recorder(gt, cfg.k, shards, cfg.eta);
    result.trace.push_back(recorder.record(0, result.model));

    const std::size_t m = shards.size();
    std::vector<Matrix> local_b(m);
    std::vector<HeadFit> heads(m);
    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        const FactoredModel& cur = result.model;
        parallel_for(m, exec, [&](std::size_t i) {
            const auto& shard = shards[i];
            const auto col = static_cast<Index>(i);
            HeadFit fit;
            if (std::holds_alternative<ExactLeastSquares>(cfg.head_mode)) {
                fit = exact_head(cur.b, shard);
            } else {
                const auto& steps = std::get<HeadGradientSteps>(cfg.head_mode);
                fit.w = cur.w.col(col);
                for (std::size_t s = 0; s < steps.count; ++s) {
                    fit.w -= steps.step * local_gradients(cur.b, fit.w, shard).g_w;
                }
            }
            local_b[i] = cur.b - cfg.eta * local_gradients(cur.b, fit.w, shard).g_b;
            heads[i] = std::move(fit);
        });

        FactoredModel next{Matrix::Zero(cur.d(), cur.k()), Matrix(cur.k(), cur.clients())};
        for (std::size_t i = 0; i < m; ++i) {
            next.b += local_b[i];
            next.w.col(static_cast<Index>(i)) = heads[i].w;
            result.rank_deficient_heads += heads[i].rank_deficient ? 1 : 0;
        }
        next.b /= static_cast<double>(m);
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

}  // namespace flute
