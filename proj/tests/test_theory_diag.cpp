#include "flute/flute_linear.hpp"
#include "flute/theory_diag.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace flute {
namespace {

using testing::random_matrix;

FactoredModel balanced_optimum(const GroundTruth& gt, Index k, double scale = 1.0) {
    const auto t = truncate(gt.svd, k);
    const Vector root = t.lambda_k.cwiseSqrt();
    return {scale * t.u_k * root.asDiagonal(), scale * root.asDiagonal() * t.v_k.transpose()};
}

FluteConfig population_config(Index k, double eta) {
    FluteConfig cfg;
    cfg.k = k;
    cfg.eta_l = eta;
    cfg.eta_r = eta;
    cfg.mode = GradientMode::kPopulation;
    return cfg;
}

TEST(LambdaTilde, HarmonicSpectrum) {
    const GroundTruth gt = make_ground_truth(10, 15, 1);
    const LambdaTilde lt = lambda_tilde(gt, 2);
    EXPECT_EQ(lt.d_bar, 15);
    EXPECT_EQ(lt.sorted.size(), 30);
    EXPECT_NEAR(lt.lambda_star(1), 20.0, 1e-10);
    EXPECT_NEAR(lt.lambda_star(2), 40.0 / 3.0, 1e-10);
    EXPECT_NEAR(lt.delta_star, 10.0 / 3.0, 1e-10);
    EXPECT_FALSE(lt.degenerate);
}

TEST(LambdaTilde, MultisetIsPlusMinusTwiceSingularValuesPaddedWithZeros) {
    const GroundTruth gt = make_ground_truth(4, 7, 2);
    const LambdaTilde lt = lambda_tilde(gt, 3);
    std::vector<double> expected;
    for (Index i = 1; i <= 4; ++i) {
        expected.push_back(2.0 * gt.lambda(i));
        expected.push_back(-2.0 * gt.lambda(i));
    }
    for (int i = 0; i < 6; ++i) expected.push_back(0.0);
    std::sort(expected.begin(), expected.end(), std::greater<>());
    ASSERT_EQ(lt.sorted.size(), static_cast<Index>(expected.size()));
    for (std::size_t i = 0; i < expected.size(); ++i) {
        EXPECT_NEAR(lt.sorted(static_cast<Index>(i)), expected[i], 1e-12);
    }
    EXPECT_THROW(lambda_tilde(gt, 8), std::out_of_range);
}

TEST(LambdaTilde, EqualSingularValuesAreDegenerate) {
    const GroundTruth gt = GroundTruth::from_phi(Matrix::Identity(3, 3));
    EXPECT_TRUE(lambda_tilde(gt, 1).degenerate);
    EXPECT_TRUE(gt.gap_degenerate(1));
}

TEST(Theta, ShapesAndRoundTrip) {
    const GroundTruth gt = make_ground_truth(4, 6, 3);
    const FactoredModel m{random_matrix(4, 2, 1), random_matrix(2, 6, 2)};
    const ThetaState ts = build_theta(m, gt);
    EXPECT_EQ(ts.theta.rows(), 12);
    EXPECT_EQ(ts.theta.cols(), 2);
    EXPECT_EQ(ts.b_tilde.rows(), 6);
    EXPECT_EQ(ts.w_tilde.cols(), 6);
    const FactoredModel back = model_from_theta(ts.theta, gt);
    EXPECT_LT((back.b - m.b).norm(), 1e-12);
    EXPECT_LT((back.w - m.w).norm(), 1e-12);
}

TEST(Theta, GramIdentity) {
    const GroundTruth gt = make_ground_truth(5, 3, 4);
    for (std::uint64_t s = 0; s < 100; ++s) {
        const FactoredModel m{random_matrix(5, 2, 300 + s), random_matrix(2, 3, 400 + s)};
        const ThetaState ts = build_theta(m, gt);
        const Matrix lhs = ts.theta.transpose() * ts.theta;
        const Matrix rhs = m.b.transpose() * m.b + m.w * m.w.transpose();
        EXPECT_LT((lhs - rhs).norm(), 1e-10 * std::max(1.0, rhs.norm()));
    }
}

TEST(Theta, PaddingPreservesSpectra) {
    const GroundTruth gt = make_ground_truth(3, 8, 5);
    const FactoredModel m{random_matrix(3, 2, 6), random_matrix(2, 8, 7)};
    const ThetaState ts = build_theta(m, gt);
    EXPECT_LT((singular_values(ts.b_tilde) - singular_values(m.b)).norm(), 1e-12);
    EXPECT_LT((singular_values(ts.w_tilde) - singular_values(m.w)).norm(), 1e-12);
}

TEST(Theta, PopulationStepMatchesModelStep) {
    for (const auto& [d, m] : std::vector<std::pair<Index, Index>>{{5, 5}, {6, 4}, {3, 7}}) {
        const GroundTruth gt = make_ground_truth(d, m, 6);
        const Index k = 2;
        const LambdaTilde lt = lambda_tilde(gt, k);
        const FluteConfig cfg = population_config(k, 0.02);
        FactoredModel model{random_matrix(d, k, 8), random_matrix(k, m, 9)};
        Matrix theta = build_theta(model, gt).theta;
        for (int step = 1; step <= 50; ++step) {
            model = flute_round(model, cfg, gt, {}, {});
            theta = theta_population_step(theta, lt, cfg.eta_l);
            if (step == 5 || step == 50) {
                EXPECT_LT((build_theta(model, gt).theta - theta).norm(), 1e-10 * std::max(1.0, theta.norm()))
                    << "d=" << d << " M=" << m << " step=" << step;
            }
        }
    }
}

TEST(Theta, OptimumIsAFixedPoint) {
    const GroundTruth gt = make_ground_truth(6, 4, 7);
    const LambdaTilde lt = lambda_tilde(gt, 2);
    const ThetaState ts = build_theta(balanced_optimum(gt, 2), gt);
    EXPECT_LT((theta_population_step(ts.theta, lt, 0.03) - ts.theta).norm(), 1e-12);
    const SnrAndDistance sd = snr_and_dist(ts, lt);
    EXPECT_LT(sd.d_spec, 1e-12);
    ASSERT_TRUE(sd.inv_snr.has_value());
    EXPECT_LT(*sd.inv_snr, 1e-20);
    EXPECT_LT(sd.bridge_lhs, 1e-12);
    const RegionFlags f = region_membership(ts, lt);
    EXPECT_TRUE(f.in_r);
    EXPECT_TRUE(f.in_rs);
}

TEST(Region, ZeroIsInRsButNotR) {
    const GroundTruth gt = make_ground_truth(6, 4, 7);
    const LambdaTilde lt = lambda_tilde(gt, 2);
    const ThetaState ts = build_theta({Matrix::Zero(6, 2), Matrix::Zero(2, 4)}, gt);
    const RegionFlags f = region_membership(ts, lt);
    EXPECT_TRUE(f.in_rs);
    EXPECT_FALSE(f.in_r);
    EXPECT_FALSE(snr_and_dist(ts, lt).inv_snr.has_value());
}

TEST(Region, BoundariesAreInclusive) {
    const GroundTruth gt = make_ground_truth(6, 4, 7);
    const LambdaTilde lt = lambda_tilde(gt, 1);
    const Index dbar = lt.d_bar;
    // sigma_1^2(Theta) exactly 2 lambda*_1.
    ThetaState ts;
    ts.k = 1;
    ts.theta = Matrix::Zero(2 * dbar, 1);
    ts.theta(0, 0) = std::sqrt(2.0 * lt.lambda_star(1));
    EXPECT_TRUE(region_membership(ts, lt).in_rs);
    ts.theta(0, 0) *= 1.0 + 1e-6;
    EXPECT_FALSE(region_membership(ts, lt).in_rs);
    // sigma_k^2(Theta_k) exactly Delta/4.
    ts.theta(0, 0) = std::sqrt(lt.delta_star / 4.0);
    EXPECT_TRUE(region_membership(ts, lt).in_r);
    ts.theta(0, 0) *= 1.0 - 1e-6;
    EXPECT_FALSE(region_membership(ts, lt).in_r);
}

TEST(SnrAndDistance, ScaledOptimum) {
    const GroundTruth gt = make_ground_truth(5, 5, 8);
    const LambdaTilde lt = lambda_tilde(gt, 1);
    for (const double c : {0.5, 0.9, 1.3}) {
        const ThetaState ts = build_theta(balanced_optimum(gt, 1, c), gt);
        EXPECT_NEAR(snr_and_dist(ts, lt).d_spec, std::abs(c * c - 1.0) * lt.lambda_star(1), 1e-10);
    }
}

TEST(TRegion, HandComputedValue) {
    // lambda*_2 = 0.6, Delta = 0.2, eta = 0.03, sigma_2^2(Theta_2) = 0.002:
    // log(25) / (2 log(1.0075)).
    Matrix phi = Matrix::Zero(3, 3);
    phi(0, 0) = 1.0;
    phi(1, 1) = 0.3;
    phi(2, 2) = 0.2;
    const GroundTruth g = GroundTruth::from_phi(phi);
    const LambdaTilde lt = lambda_tilde(g, 2);
    ASSERT_NEAR(lt.lambda_star(2), 0.6, 1e-14);
    ASSERT_NEAR(lt.delta_star, 0.2, 1e-14);
    ThetaState ts;
    ts.k = 2;
    ts.theta = Matrix::Zero(6, 2);
    ts.theta(0, 0) = std::sqrt(0.002);
    ts.theta(1, 1) = std::sqrt(0.002);
    EXPECT_NEAR(t_region(ts, lt, 0.03), 215.39543846969752, 1e-9);
    const double doubled = t_region(ts, lt, 0.06);
    EXPECT_NEAR(t_region(ts, lt, 0.03) / doubled, 2.0, 0.1);
    ts.theta(1, 1) = 0.0;
    EXPECT_TRUE(std::isinf(t_region(ts, lt, 0.03)));
    EXPECT_THROW(t_region(ts, lt, 0.0), std::invalid_argument);
}

TEST(GradientDiscrepancy, VanishesForIsotropicNoiselessDesign) {
    const GroundTruth gt = make_ground_truth(4, 3, 9);
    std::vector<ClientShard> shards;
    for (Index i = 0; i < 3; ++i) {
        ClientShard s;
        s.index = static_cast<std::size_t>(i);
        s.x = std::sqrt(16.0) * orthonormal_columns(random_matrix(16, 4, 20 + static_cast<std::uint64_t>(i)));
        s.y = s.x * gt.phi.col(i);
        shards.push_back(s);
    }
    const FactoredModel m{random_matrix(4, 2, 10), random_matrix(2, 3, 11)};
    const auto q = gradient_discrepancy(m, gt, shards, 0.03);
    EXPECT_LT(q.q_norm, 1e-12);
    EXPECT_LT(q.q_tilde_norm, 1e-12);
}

TEST(GradientDiscrepancy, ShrinksWithSampleSize) {
    const GroundTruth gt = make_ground_truth(5, 6, 10);
    const FactoredModel m{random_matrix(5, 2, 12), random_matrix(2, 6, 13)};
    auto mean_q = [&](Index n) {
        double total = 0.0;
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto shards = make_client_shards(gt, n, 0.3, 50 + s);
            total += gradient_discrepancy(m, gt, shards, 0.03).q_norm;
        }
        return total / 5.0;
    };
    const double small = mean_q(100);
    const double large = mean_q(10000);
    // Expected ratio is sqrt(100) = 10.
    EXPECT_LT(large, small / 4.0);
}

TEST(PopulationDynamics, RegionIsAbsorbingAndErrorsCoVanish) {
    const GroundTruth gt = make_ground_truth(6, 4, 11);
    const Index k = 2;
    const LambdaTilde lt = lambda_tilde(gt, k);
    const FluteConfig cfg = population_config(k, 0.02);
    FactoredModel model = balanced_optimum(gt, k, 0.7);
    model.b += 0.05 * random_matrix(6, k, 14);
    ASSERT_TRUE(region_membership(build_theta(model, gt), lt).in_r);
    double prev_d = snr_and_dist(build_theta(model, gt), lt).d_spec;
    for (int t = 0; t < 1500; ++t) {
        model = flute_round(model, cfg, gt, {}, {});
        const ThetaState ts = build_theta(model, gt);
        ASSERT_TRUE(region_membership(ts, lt).in_r) << "left R at step " << t + 1;
        prev_d = snr_and_dist(ts, lt).d_spec;
    }
    const SnrAndDistance sd = snr_and_dist(build_theta(model, gt), lt);
    EXPECT_LT(prev_d, 1e-8);
    ASSERT_TRUE(sd.inv_snr.has_value());
    EXPECT_LT(*sd.inv_snr, 1e-8);
}

TEST(FillTheory, PopulationRunsLeaveQAtZero) {
    const GroundTruth gt = make_ground_truth(4, 4, 12);
    const FactoredModel m{random_matrix(4, 2, 15), random_matrix(2, 4, 16)};
    RoundRecord rec;
    fill_theory(rec, m, gt, lambda_tilde(gt, 2), {}, 0.03);
    EXPECT_TRUE(rec.theory_available);
    EXPECT_EQ(rec.q_norm, 0.0);
    EXPECT_GT(rec.d_spec, 0.0);
}

}  // namespace
}  // namespace flute
