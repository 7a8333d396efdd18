#pragma once

// General FLUTE at toy scale: a one-hidden-layer ReLU representation shared
// by all clients, a linear head (H_i, b_i) per client, softmax
// cross-entropy with feature, head and neural-collapse penalties, client
// sampling, and a server step on the neural-collapse penalty of the heads.

#include "flute/numerics.hpp"
#include "flute/parallel.hpp"
#include "flute/synthgen.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace flute {

// ---------------------------------------------------------------------------
// Neural-collapse penalty
// ---------------------------------------------------------------------------

/// (1/sqrt(s-1)) (u u^T) .* (I_m - (1/s) 1 1^T).
inline Matrix nc_target(const Vector& u, Index scale) {
    const Index m = u.size();
    const double s = static_cast<double>(scale);
    Matrix centred = Matrix::Identity(m, m) - Matrix::Constant(m, m, 1.0 / s);
    return (u * u.transpose()).cwiseProduct(centred) / std::sqrt(s - 1.0);
}

namespace detail {

inline void check_nc_args(const Matrix& h, const Vector& u, Index scale) {
    if (h.cols() != u.size()) {
        throw ShapeError("nc_penalty: H has " + std::to_string(h.cols()) + " columns, u has " +
                         std::to_string(u.size()) + " entries");
    }
    if (scale < 2) {
        throw std::invalid_argument("nc_penalty: class count for scale must be >= 2");
    }
    if (u.cwiseAbs().sum() == 0.0) {
        throw std::invalid_argument("nc_penalty: indicator u is all zero");
    }
}

struct NcParts {
    Matrix gram;
    double gram_norm = 0.0;
    Matrix diff;  // gram / gram_norm - target
    double value = 0.0;
};

inline NcParts nc_parts(const Matrix& h, const Vector& u, Index scale) {
    check_nc_args(h, u, scale);
    NcParts p;
    p.gram = h.transpose() * h;
    p.gram_norm = p.gram.norm();
    if (p.gram_norm == 0.0) {
        throw NumericalError("nc_penalty: H^T H is zero, normalisation undefined");
    }
    p.diff = p.gram / p.gram_norm - nc_target(u, scale);
    p.value = p.diff.norm();
    return p;
}

}  // namespace detail

/// || H^T H / ||H^T H||_F - target(u, s) ||_F.
inline double nc_penalty(const Matrix& h, const Vector& u, Index scale) {
    return detail::nc_parts(h, u, scale).value;
}

/// Gradient of nc_penalty w.r.t. H. With G = H^T H, n = ||G||, D the
/// difference matrix and p = ||D||:  2 H S / p,  S = (D - (G/n) <D, G/n>) / n.
/// Zero at a zero-penalty point.
inline Matrix nc_gradient(const Matrix& h, const Vector& u, Index scale) {
    const auto p = detail::nc_parts(h, u, scale);
    if (p.value == 0.0) {
        return Matrix::Zero(h.rows(), h.cols());
    }
    const Matrix normalized = p.gram / p.gram_norm;
    const double inner = p.diff.cwiseProduct(normalized).sum();
    const Matrix s = (p.diff - inner * normalized) / p.gram_norm;
    return 2.0 * h * s / p.value;
}

struct Nc2Metrics {
    double global_nc2 = 0.0;
    double local_nc2 = 0.0;
};

inline Nc2Metrics nc2_metrics(std::span<const Matrix> heads, std::span<const Vector> indicators, Index m,
                              Index m_prime) {
    if (heads.size() != indicators.size() || heads.empty()) {
        throw ShapeError("nc2_metrics: need one indicator per head and at least one head");
    }
    Nc2Metrics out;
    for (std::size_t i = 0; i < heads.size(); ++i) {
        if (heads[i].cols() != m) {
            throw ShapeError("nc2_metrics: head has wrong class count");
        }
        out.global_nc2 += nc_penalty(heads[i], indicators[i], m);
        out.local_nc2 += nc_penalty(heads[i], indicators[i], m_prime);
    }
    out.global_nc2 /= static_cast<double>(heads.size());
    out.local_nc2 /= static_cast<double>(heads.size());
    return out;
}

// ---------------------------------------------------------------------------
// Model and local objective
// ---------------------------------------------------------------------------

struct GeneralModel {
    Matrix v1;  // k x dim
    Vector c1;  // k
    std::vector<Matrix> heads;   // per client, k x m
    std::vector<Vector> biases;  // per client, m
};

/// Parameters one client trains on: the shared representation and its head.
struct ClientParams {
    Matrix v1;
    Vector c1;
    Matrix h;
    Vector b;
};

struct GeneralConfig {
    Index hidden = 16;  // feature dimension k of the representation
    double lambda1 = 1e-3;
    double lambda2 = 1e-3;
    double lambda3 = 1e-2;
    std::size_t local_epochs = 2;
    double sample_ratio = 0.5;
    double eta_l = 0.1;
    double eta_r = 0.5;
    std::size_t rounds = 200;
    std::size_t record_stride = 1;
    bool realized_average = false;  // average over the realised batch instead of 1/(r M)
    double head_init_std = 0.1;
    std::uint64_t seed = 1;

    void validate() const {
        if (hidden < 1) throw std::invalid_argument("GeneralConfig: hidden must be >= 1");
        if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !(lambda3 >= 0.0)) {
            throw std::invalid_argument("GeneralConfig: lambda1..3 must be >= 0");
        }
        if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) {
            throw std::invalid_argument("GeneralConfig: sample_ratio must lie in (0, 1]");
        }
        if (!(eta_l >= 0.0) || !(eta_r >= 0.0)) throw std::invalid_argument("GeneralConfig: eta_l, eta_r must be >= 0");
        if (rounds < 1) throw std::invalid_argument("GeneralConfig: rounds must be >= 1");
        if (record_stride < 1) throw std::invalid_argument("GeneralConfig: record_stride must be >= 1");
        if (local_epochs < 1) throw std::invalid_argument("GeneralConfig: local_epochs must be >= 1");
    }

    std::size_t batch_size(std::size_t clients) const {
        const auto n = static_cast<std::size_t>(std::ceil(sample_ratio * static_cast<double>(clients) - 1e-9));
        return std::clamp<std::size_t>(n, 1, clients);
    }
};

/// He-scaled representation weights, zero biases, N(0, head_init_std^2) heads.
inline GeneralModel init_general(Index dim, Index classes, std::size_t clients, const GeneralConfig& cfg) {
    GeneralModel model;
    model.v1 = seeded_gaussian(cfg.hidden, dim, std::sqrt(2.0 / static_cast<double>(dim)),
                               make_stream(cfg.seed, StreamPurpose::kInitRepresentation));
    model.c1 = Vector::Zero(cfg.hidden);
    for (std::size_t i = 0; i < clients; ++i) {
        model.heads.push_back(
            seeded_gaussian(cfg.hidden, classes, cfg.head_init_std, make_stream(cfg.seed, StreamPurpose::kInitHeads, i)));
        model.biases.push_back(Vector::Zero(classes));
    }
    return model;
}

/// Row-wise softmax of logits (n x m).
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const double top = logits.row(r).maxCoeff();
        const Eigen::RowVectorXd e = (logits.row(r).array() - top).exp().matrix();
        p.row(r) = e / e.sum();
    }
    return p;
}

struct LocalObjective {
    double loss = 0.0;
    ClientParams grad;
};

namespace detail {

inline void check_client_shapes(const ClientParams& p, const ClassShard& shard) {
    const Index k = p.v1.rows();
    const Index m = p.h.cols();
    if (p.c1.size() != k || p.h.rows() != k || p.b.size() != m || p.v1.cols() != shard.features.cols() ||
        shard.indicator.size() != m || static_cast<Index>(shard.labels.size()) != shard.samples()) {
        throw ShapeError("local objective: parameter shapes do not match the shard");
    }
}

}  // namespace detail

/// Full-batch loss of client i and its gradient w.r.t. all four groups:
///   mean CE(H^T psi(x) + b, y) + l1 mean ||psi(x)||^2 + l2 ||H||_F^2 + l3 NC(H, u, m),
/// psi(x) = ReLU(V1 x + c1).
inline LocalObjective local_objective(const ClientParams& p, const ClassShard& shard, const GeneralConfig& cfg) {
    detail::check_client_shapes(p, shard);
    const Index n = shard.samples();
    const Index m = p.h.cols();
    const double inv_n = 1.0 / static_cast<double>(n);

    const Matrix pre = (shard.features * p.v1.transpose()).rowwise() + p.c1.transpose();  // n x k
    const Matrix feat = pre.cwiseMax(0.0);
    const Matrix logits = (feat * p.h).rowwise() + p.b.transpose();  // n x m
    const Matrix prob = softmax_rows(logits);

    LocalObjective out;
    double ce = 0.0;
    Matrix dlogits = prob;
    for (Index r = 0; r < n; ++r) {
        const int label = shard.labels[static_cast<std::size_t>(r)];
        const double top = logits.row(r).maxCoeff();
        const double lse = top + std::log((logits.row(r).array() - top).exp().sum());
        ce += lse - logits(r, label);
        dlogits(r, label) -= 1.0;
    }
    dlogits *= inv_n;
    const auto nc = detail::nc_parts(p.h, shard.indicator, m);
    out.loss = ce * inv_n + cfg.lambda1 * feat.squaredNorm() * inv_n + cfg.lambda2 * p.h.squaredNorm() +
               cfg.lambda3 * nc.value;

    out.grad.h = feat.transpose() * dlogits + 2.0 * cfg.lambda2 * p.h;
    if (cfg.lambda3 != 0.0) {
        out.grad.h += cfg.lambda3 * nc_gradient(p.h, shard.indicator, m);
    }
    out.grad.b = dlogits.colwise().sum().transpose();
    Matrix dfeat = dlogits * p.h.transpose() + (2.0 * cfg.lambda1 * inv_n) * feat;
    const Matrix dpre = dfeat.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    out.grad.v1 = dpre.transpose() * shard.features;
    out.grad.c1 = dpre.colwise().sum().transpose();
    return out;
}

struct LocalStep {
    ClientParams params;
    double loss = 0.0;  // at the incoming parameters
};

/// One simultaneous gradient step on (V1, c1, H, b) at rate eta_l.
inline LocalStep local_train_step(const ClientParams& p, const ClassShard& shard, const GeneralConfig& cfg) {
    const LocalObjective obj = local_objective(p, shard, cfg);
    LocalStep step;
    step.loss = obj.loss;
    step.params.v1 = p.v1 - cfg.eta_l * obj.grad.v1;
    step.params.c1 = p.c1 - cfg.eta_l * obj.grad.c1;
    step.params.h = p.h - cfg.eta_l * obj.grad.h;
    step.params.b = p.b - cfg.eta_l * obj.grad.b;
    return step;
}

/// Fraction of the shard classified correctly by argmax over all m logits.
inline double client_accuracy(const ClientParams& p, const ClassShard& shard) {
    const Matrix feat = ((shard.features * p.v1.transpose()).rowwise() + p.c1.transpose()).cwiseMax(0.0);
    const Matrix logits = (feat * p.h).rowwise() + p.b.transpose();
    Index hits = 0;
    for (Index r = 0; r < logits.rows(); ++r) {
        Index arg = 0;
        logits.row(r).maxCoeff(&arg);
        hits += arg == shard.labels[static_cast<std::size_t>(r)] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct GeneralRecord {
    std::size_t t = 0;
    double acc = 0.0;
    double global_nc2 = 0.0;
    double local_nc2 = 0.0;
    std::vector<std::size_t> sampled;
};

struct GeneralTrainResult {
    GeneralModel model;
    std::vector<GeneralRecord> trace;
    bool diverged = false;
    std::size_t diverged_at = 0;
};

inline ClientParams client_view(const GeneralModel& model, std::size_t i) {
    return {model.v1, model.c1, model.heads[i], model.biases[i]};
}

inline GeneralRecord general_record(std::size_t t, const GeneralModel& model, std::span<const ClassShard> shards,
                                    Index m, Index m_prime) {
    GeneralRecord rec;
    rec.t = t;
    for (std::size_t i = 0; i < shards.size(); ++i) {
        rec.acc += client_accuracy(client_view(model, i), shards[i]);
    }
    rec.acc /= static_cast<double>(shards.size());
    std::vector<Vector> indicators;
    for (const auto& shard : shards) {
        indicators.push_back(shard.indicator);
    }
    const Nc2Metrics nc = nc2_metrics(model.heads, indicators, m, m_prime);
    rec.global_nc2 = nc.global_nc2;
    rec.local_nc2 = nc.local_nc2;
    return rec;
}

inline bool general_model_finite(const GeneralModel& model) {
    if (!model.v1.allFinite() || !model.c1.allFinite()) {
        return false;
    }
    for (std::size_t i = 0; i < model.heads.size(); ++i) {
        if (!model.heads[i].allFinite() || !model.biases[i].allFinite()) {
            return false;
        }
    }
    return true;
}

/// Per round: sample ceil(r M) clients without replacement, run local
/// epochs on each from the broadcast representation, set the representation
/// to (1/(r M)) times the sum of the returned ones, then take one step of
/// the neural-collapse penalty on every returned head.
inline GeneralTrainResult general_flute_train(const GeneralConfig& cfg, std::span<const ClassShard> shards,
                                              GeneralModel init, const Execution& exec = {}) {
    cfg.validate();
    if (shards.empty()) {
        throw std::invalid_argument("general_flute_train: no shards");
    }
    const std::size_t clients = shards.size();
    const Index m = shards.front().indicator.size();
    const auto m_prime = static_cast<Index>(shards.front().class_set.size());
    if (init.heads.size() != clients || init.biases.size() != clients) {
        throw ShapeError("general_flute_train: one head per shard required");
    }

    GeneralTrainResult result;
    result.model = std::move(init);
    result.trace.push_back(general_record(0, result.model, shards, m, m_prime));

    const std::size_t batch = cfg.batch_size(clients);
    const double scale = cfg.realized_average ? 1.0 / static_cast<double>(batch)
                                              : 1.0 / (cfg.sample_ratio * static_cast<double>(clients));
    std::vector<ClientParams> local(batch);
    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        const auto sampled =
            sample_without_replacement(clients, batch, make_stream(cfg.seed, StreamPurpose::kClientSampling, t));
        const GeneralModel& cur = result.model;
        parallel_for(batch, exec, [&](std::size_t j) {
            const std::size_t i = sampled[j];
            ClientParams p = client_view(cur, i);
            for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
                p = local_train_step(p, shards[i], cfg).params;
            }
            local[j] = std::move(p);
        });

        GeneralModel next = cur;
        next.v1.setZero();
        next.c1.setZero();
        for (std::size_t j = 0; j < batch; ++j) {
            next.v1 += local[j].v1;
            next.c1 += local[j].c1;
        }
        next.v1 *= scale;
        next.c1 *= scale;
        for (std::size_t j = 0; j < batch; ++j) {
            const std::size_t i = sampled[j];
            Matrix h = local[j].h;
            if (cfg.eta_r != 0.0 && h.allFinite() && h.squaredNorm() > 0.0) {
                h -= cfg.eta_r * nc_gradient(h, shards[i].indicator, m);
            }
            next.heads[i] = std::move(h);
            next.biases[i] = local[j].b;
        }
        if (!general_model_finite(next)) {
            result.diverged = true;
            result.diverged_at = t;
            break;
        }
        result.model = std::move(next);
        if (t % cfg.record_stride == 0 || t == cfg.rounds) {
            auto rec = general_record(t, result.model, shards, m, m_prime);
            rec.sampled = sampled;
            result.trace.push_back(std::move(rec));
        }
    }
    return result;
}

inline GeneralTrainResult general_flute_train(const GeneralConfig& cfg, std::span<const ClassShard> shards,
                                              const Execution& exec = {}) {
    cfg.validate();
    if (shards.empty()) {
        throw std::invalid_argument("general_flute_train: no shards");
    }
    return general_flute_train(
        cfg, shards, init_general(shards.front().features.cols(), shards.front().indicator.size(), shards.size(), cfg),
        exec);
}

}  // namespace flute
