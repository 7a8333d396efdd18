#include "flute/flute_linear.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace flute {
namespace {

using testing::finite_difference;
using testing::random_matrix;
using testing::relative_error;

ClientShard make_shard(const Matrix& x, const Vector& y, std::size_t index = 0) {
    ClientShard s;
    s.index = index;
    s.x = x;
    s.y = y;
    return s;
}

// X with X^T X / N = I exactly.
Matrix isotropic_design(Index n, Index d, std::uint64_t seed) {
    return std::sqrt(static_cast<double>(n)) * orthonormal_columns(random_matrix(n, d, seed));
}

TEST(LocalGradients, MatchFiniteDifferences) {
    const ClientShard shard = make_shard(random_matrix(12, 4, 1), random_matrix(12, 1, 2).col(0));
    const Matrix b = random_matrix(4, 2, 3);
    const Vector w = random_matrix(2, 1, 4).col(0);
    const ClientGradient g = local_gradients(b, w, shard);
    const Matrix fd_b = finite_difference([&](const Matrix& bb) { return half_local_loss(bb, w, shard); }, b);
    const Matrix fd_w = finite_difference([&](const Matrix& ww) { return half_local_loss(b, ww.col(0), shard); },
                                          Matrix(w));
    EXPECT_LT(relative_error(g.g_b, fd_b), 1e-7);
    EXPECT_LT(relative_error(Matrix(g.g_w), fd_w), 1e-7);
}

TEST(LocalGradients, IsotropicNoiselessEqualsPopulation) {
    const GroundTruth gt = GroundTruth::from_phi(random_matrix(4, 3, 5));
    const FactoredModel model{random_matrix(4, 2, 6), random_matrix(2, 3, 7)};
    std::vector<ClientShard> shards;
    for (Index i = 0; i < 3; ++i) {
        const Matrix x = isotropic_design(20, 4, 10 + static_cast<std::uint64_t>(i));
        shards.push_back(make_shard(x, x * gt.phi.col(i), static_cast<std::size_t>(i)));
    }
    const auto grads = all_local_gradients(model, shards, {});
    const GradientSum emp = aggregate(grads, 4, 2);
    const GradientSum pop = population_gradients(model.b, model.w, gt.phi);
    EXPECT_LT((emp.g_b - pop.g_b).norm(), 1e-12);
    EXPECT_LT((emp.g_w - pop.g_w).norm(), 1e-12);
}

TEST(PopulationGradients, SmallHandExample) {
    // B = e1, W = 2, phi = e2: residual (2, -1).
    const Matrix b = (Matrix(2, 1) << 1.0, 0.0).finished();
    const Matrix w = (Matrix(1, 1) << 2.0).finished();
    const Matrix phi = (Matrix(2, 1) << 0.0, 1.0).finished();
    const GradientSum g = population_gradients(b, w, phi);
    EXPECT_DOUBLE_EQ(g.g_b(0, 0), 4.0);
    EXPECT_DOUBLE_EQ(g.g_b(1, 0), -2.0);
    EXPECT_DOUBLE_EQ(g.g_w(0, 0), 2.0);
}

TEST(Aggregate, RejectsWrongShape) {
    std::vector<ClientGradient> grads{{Matrix::Zero(3, 2), Vector::Zero(2)}, {Matrix::Zero(3, 1), Vector::Zero(2)}};
    EXPECT_THROW(aggregate(grads, 3, 2), ShapeError);
}

TEST(Regularizer, GradientMatchesFiniteDifferences) {
    const Matrix b = random_matrix(5, 3, 8);
    const Matrix w = random_matrix(3, 4, 9);
    const ModelGradient g = regularizer_gradients(b, w, 0.3, 0.2);
    const Matrix fd_b = finite_difference([&](const Matrix& bb) { return regularizer_value(bb, w, 0.3, 0.2); }, b);
    const Matrix fd_w = finite_difference([&](const Matrix& ww) { return regularizer_value(b, ww, 0.3, 0.2); }, w);
    EXPECT_LT(relative_error(g.b, fd_b), 1e-7);
    EXPECT_LT(relative_error(g.w, fd_w), 1e-7);
}

TEST(Regularizer, ReducesToBalancePenaltyWhenGammaOneIsTwiceGammaTwo) {
    // k = 1, B = (1, 1), W = (1, 2): ||B^T B||^2 + ||W W^T||^2 = 4 + 25 = 9 + 2 * 10.
    const Matrix b = (Matrix(2, 1) << 1.0, 1.0).finished();
    const Matrix w = (Matrix(1, 2) << 1.0, 2.0).finished();
    EXPECT_DOUBLE_EQ(balance_penalty(b, w), 9.0);
    EXPECT_NEAR(regularizer_value(b, w, 0.25, 0.125), 9.0 / 8.0, 1e-14);
    for (std::uint64_t s = 0; s < 20; ++s) {
        const Matrix bb = random_matrix(6, 3, 100 + s);
        const Matrix ww = random_matrix(3, 5, 200 + s);
        EXPECT_NEAR(regularizer_value(bb, ww, 0.25, 0.125), balance_penalty(bb, ww) / 8.0,
                    1e-10 * std::max(1.0, balance_penalty(bb, ww)));
    }
}

TEST(ServerStep, MatchesClosedForm) {
    const FactoredModel model{random_matrix(5, 2, 11), random_matrix(2, 4, 12)};
    const GradientSum g{random_matrix(5, 2, 13), random_matrix(2, 4, 14)};
    FluteConfig cfg;
    cfg.eta_l = 0.05;
    cfg.eta_r = 0.02;
    cfg.gamma1 = 0.3;
    cfg.gamma2 = 0.1;
    const FactoredModel next = server_step(model, g, cfg);
    const Matrix& b = model.b;
    const Matrix& w = model.w;
    const Matrix b_expected = b - 0.05 * g.g_b + 2 * 0.3 * 0.02 * b * w * w.transpose() -
                              4 * 0.1 * 0.02 * b * b.transpose() * b;
    const Matrix w_expected = w - 0.05 * g.g_w + 2 * 0.3 * 0.02 * b.transpose() * b * w -
                              4 * 0.1 * 0.02 * w * w.transpose() * w;
    EXPECT_LT((next.b - b_expected).norm(), 1e-12);
    EXPECT_LT((next.w - w_expected).norm(), 1e-12);
}

TEST(ServerStep, ZeroStepSizesLeaveModelUnchanged) {
    const FactoredModel model{random_matrix(4, 2, 15), random_matrix(2, 3, 16)};
    FluteConfig cfg;
    cfg.eta_l = 0.0;
    cfg.eta_r = 0.0;
    const FactoredModel next = server_step(model, {random_matrix(4, 2, 17), random_matrix(2, 3, 18)}, cfg);
    EXPECT_EQ(next.b, model.b);
    EXPECT_EQ(next.w, model.w);
}

TEST(FluteRound, ZeroIsAFixedPoint) {
    const GroundTruth gt = make_ground_truth(4, 3, 1);
    const auto shards = make_client_shards(gt, 10, 0.1, 1);
    const FactoredModel zero{Matrix::Zero(4, 2), Matrix::Zero(2, 3)};
    FluteConfig cfg;
    const FactoredModel next = flute_round(zero, cfg, gt, shards, {});
    EXPECT_EQ(next.b.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(next.w.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FluteRound, EmpiricalStepIsPopulationStepPlusDiscrepancy) {
    const GroundTruth gt = make_ground_truth(5, 4, 3);
    const auto shards = make_client_shards(gt, 30, 0.2, 3);
    const FactoredModel model{random_matrix(5, 2, 19), random_matrix(2, 4, 20)};
    FluteConfig emp;
    FluteConfig pop = emp;
    pop.mode = GradientMode::kPopulation;
    const FactoredModel a = flute_round(model, emp, gt, shards, {});
    const FactoredModel b = flute_round(model, pop, gt, {}, {});
    const GradientDiscrepancy q = gradient_discrepancy(model, gt, shards, emp.eta_l);
    EXPECT_LT((a.b - (b.b + q.q)).norm(), 1e-10);
    EXPECT_LT((a.w - (b.w + q.q_tilde)).norm(), 1e-10);
}

TEST(FluteTrain, SingleRoundIsOneServerStep) {
    const GroundTruth gt = make_ground_truth(4, 5, 2);
    const auto shards = make_client_shards(gt, 15, 0.1, 2);
    FluteConfig cfg;
    cfg.rounds = 1;
    const FactoredModel init = init_factored(4, 2, 5, cfg.alpha_for(4), cfg.seed);
    const auto result = flute_train(cfg, gt, shards, init);
    const auto grads = all_local_gradients(init, shards, {});
    const FactoredModel expected = server_step(init, aggregate(grads, 4, 2), cfg);
    EXPECT_EQ(result.model.b, expected.b);
    EXPECT_EQ(result.model.w, expected.w);
    ASSERT_EQ(result.trace.size(), 2u);
    EXPECT_EQ(result.trace[0].t, 0u);
    EXPECT_EQ(result.trace[1].t, 1u);
}

TEST(FluteTrain, InitScaleAndDefaults) {
    FluteConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.alpha_for(10), 0.01);
    const FactoredModel m = init_factored(200, 5, 100, 0.01, 1);
    const double var = m.b.squaredNorm() / static_cast<double>(m.b.size());
    EXPECT_NEAR(var, 1e-4, 1e-5);
}

TEST(FluteTrain, DeterministicAcrossRunsAndThreads) {
    const GroundTruth gt = make_ground_truth(6, 8, 4);
    const auto shards = make_client_shards(gt, 20, 0.1, 4);
    FluteConfig cfg;
    cfg.k = 3;
    cfg.rounds = 40;
    cfg.record_stride = 7;
    const auto a = flute_train(cfg, gt, shards, Execution{1});
    const auto b = flute_train(cfg, gt, shards, Execution{4});
    EXPECT_EQ(a.model.b, b.model.b);
    EXPECT_EQ(a.model.w, b.model.w);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    // t = 0, 7, ..., 35 and the final round 40.
    EXPECT_EQ(a.trace.size(), 7u);
    EXPECT_EQ(a.trace.back().t, 40u);
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].avg_err_gt, b.trace[i].avg_err_gt);
        EXPECT_EQ(a.trace[i].q_norm, b.trace[i].q_norm);
    }
}

TEST(FluteTrain, PopulationModeConvergesToOptimum) {
    const GroundTruth gt = make_ground_truth(6, 5, 5);
    FluteConfig cfg;
    cfg.k = 2;
    cfg.mode = GradientMode::kPopulation;
    cfg.rounds = 3000;
    cfg.record_stride = 3000;
    const auto r = flute_train(cfg, gt, {});
    EXPECT_LT(r.trace.back().frob_to_opt, 1e-8);
    EXPECT_LT(r.trace.back().d_spec, 1e-8);
    EXPECT_EQ(r.trace.back().q_norm, 0.0);
}

TEST(FluteTrain, DivergenceStopsTrace) {
    const GroundTruth gt = make_ground_truth(4, 4, 6);
    FluteConfig cfg;
    cfg.mode = GradientMode::kPopulation;
    cfg.eta_l = 50.0;
    cfg.eta_r = 50.0;
    cfg.alpha = 1.0;
    cfg.rounds = 200;
    const auto r = flute_train(cfg, gt, {});
    EXPECT_TRUE(r.diverged);
    EXPECT_GT(r.diverged_at, 0u);
    EXPECT_TRUE(r.model.finite());
    EXPECT_EQ(r.trace.back().t + 1, r.diverged_at);
}

TEST(FluteConfig, Validation) {
    FluteConfig cfg;
    cfg.eta_l = -1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.k = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace flute
