#include "pamdp/distributions.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

namespace pamdp {
namespace {

Tensor row(std::initializer_list<double> v) { return Tensor::row(std::vector<double>(v)); }

std::vector<double> frequencies(std::size_t n, int draws, const std::function<std::size_t()>& draw) {
    std::vector<double> f(n, 0.0);
    for (int i = 0; i < draws; ++i) f[draw()] += 1.0;
    for (double& v : f) v /= draws;
    return f;
}

TEST(Categorical, DegenerateProbabilitiesAlwaysPickTheMass) {
    Rng rng(1);
    const std::vector<double> p{1.0, 0.0, 0.0};
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(categorical_sample(p, rng), 0u);
    EXPECT_THROW(categorical_sample(std::vector<double>{0.0, 0.0}, rng), DistributionError);
}

TEST(Categorical, EmpiricalFrequencies) {
    Rng rng(2);
    const std::vector<double> half{0.5, 0.5};
    auto f = frequencies(2, 100000, [&] { return categorical_sample(half, rng); });
    EXPECT_GE(f[0], 0.49);
    EXPECT_LE(f[0], 0.51);

    const std::vector<double> p{0.2, 0.3, 0.5};
    f = frequencies(3, 100000, [&] { return categorical_sample(p, rng); });
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(f[i], p[i], 0.01);
}

TEST(GumbelMax, NoiseCanDominate) {
    const std::vector<double> lp(3, std::log(1.0 / 3.0));
    EXPECT_EQ(gumbel_max_sample(lp, GumbelNoise{{3.0, 0.0, 0.0}}), 0u);
    EXPECT_EQ(gumbel_max_sample(lp, GumbelNoise{{0.0, 0.0, 0.0}}), 0u);  // tie -> lowest index
    EXPECT_EQ(gumbel_max_sample(lp, GumbelNoise{{0.0, 1.0, 1.0}}), 1u);
}

TEST(GumbelMax, RecordedNoiseIsReproducible) {
    Rng rng(3);
    const std::vector<double> lp{std::log(0.2), std::log(0.3), std::log(0.5)};
    for (int i = 0; i < 100; ++i) {
        const auto g = sample_gumbel(3, rng);
        EXPECT_EQ(gumbel_max_sample(lp, g), gumbel_max_sample(lp, GumbelNoise{g.g}));
    }
}

TEST(GumbelMax, MarginalLawMatchesCategorical) {
    Rng rng(4);
    const std::vector<double> p{0.2, 0.3, 0.5};
    const std::vector<double> lp{std::log(0.2), std::log(0.3), std::log(0.5)};
    auto f = frequencies(3, 100000, [&] { return gumbel_max_sample(lp, sample_gumbel(3, rng)); });
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(f[i], p[i], 0.01);
}

TEST(GumbelNoise, StaysFiniteAtClampedExtremes) {
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) {
        for (double g : sample_gumbel(4, rng).g) ASSERT_TRUE(std::isfinite(g));
    }
    // The clamp bounds the largest possible value.
    EXPECT_NEAR(-std::log(-std::log(1.0 - kGumbelClamp)), 27.631, 1e-3);
}

TEST(GumbelSoftmax, UniformAtUnitTemperature) {
    const std::vector<double> lp(3, std::log(1.0 / 3.0));
    for (double v : gumbel_softmax(lp, GumbelNoise{{0, 0, 0}}, 1.0)) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(GumbelSoftmax, LowTemperatureApproachesOneHot) {
    const std::vector<double> lp{std::log(0.2), std::log(0.3), std::log(0.5)};
    const auto y = gumbel_softmax(lp, GumbelNoise{{0.1, -0.2, 0.05}}, 0.01);
    EXPECT_GT(*std::max_element(y.begin(), y.end()), 0.999);
}

TEST(GumbelSoftmax, RejectsNonPositiveTemperature) {
    const std::vector<double> lp{0.0, 0.0};
    EXPECT_THROW(gumbel_softmax(lp, GumbelNoise{{0, 0}}, 0.0), std::invalid_argument);
    EXPECT_THROW(gumbel_softmax(lp, GumbelNoise{{0, 0}}, -1.0), std::invalid_argument);
}

TEST(GumbelSoftmax, ArgmaxAgreesWithGumbelMax) {
    Rng rng(6);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t n = 2 + rng.index(5);
        std::vector<double> logits(n);
        for (double& v : logits) v = 3.0 * rng.normal();
        const auto lp = Categorical::from_logits(logits).log_probs();
        const auto g = sample_gumbel(n, rng);
        const double t = std::exp(rng.uniform(std::log(1e-3), std::log(1e3)));
        const auto y = gumbel_softmax(lp, g, t);
        const auto hard = gumbel_max_sample(lp, g);
        ASSERT_EQ(static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin()), hard);
    }
}

TEST(GumbelSoftmax, GradientMatchesFiniteDifferences) {
    const Vector lp0 = (Vector(4) << -1.2, -0.8, -2.0, -1.5).finished();
    const Tensor noise = row({0.3, -0.7, 1.1, 0.2});
    const Tensor weights = row({0.5, -1.0, 2.0, 0.25});
    auto f = [&](const Vector& v) {
        std::vector<double> lp(v.data(), v.data() + v.size());
        const auto y = gumbel_softmax(lp, GumbelNoise{noise.vec()}, 0.7);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
        return s;
    };
    Graph g;
    Var lp = g.leaf(Tensor::row(std::vector<double>(lp0.data(), lp0.data() + lp0.size())));
    Var loss = ad::sum_all(ad::mul(ad::gumbel_softmax(lp, noise, 0.7), g.leaf(weights)));
    EXPECT_NEAR(loss.value().item(), f(lp0), 1e-14);
    const Vector grad = flat_gradient(loss, std::vector<Var>{lp});
    EXPECT_LT(oracle::rel_error(grad, oracle::numeric_gradient(f, lp0)), 1e-6);
}

TEST(KlCategorical, Examples) {
    const Categorical a{{1.0, 0.0}};
    const Categorical u{{0.5, 0.5}};
    EXPECT_EQ(kl_categorical(u, u), 0.0);
    EXPECT_NEAR(kl_categorical(a, u), 0.693147, 1e-6);
    EXPECT_NEAR(kl_categorical(u, Categorical{{0.25, 0.75}}), 0.143841, 1e-6);
    EXPECT_THROW(kl_categorical(u, a), DistributionError);
}

TEST(KlDiagGaussian, Examples) {
    const DiagGaussian p{{0.0}, {0.0}};
    EXPECT_EQ(kl_diag_gaussian(p, p), 0.0);
    EXPECT_NEAR(kl_diag_gaussian(p, DiagGaussian{{1.0}, {0.0}}), 0.5, 1e-15);
    EXPECT_NEAR(kl_diag_gaussian(p, DiagGaussian{{0.0}, {std::log(2.0)}}), 0.318147, 1e-6);
    EXPECT_THROW(kl_diag_gaussian(p, DiagGaussian{{0.0, 0.0}, {0.0, 0.0}}), ShapeError);
}

TEST(KlProperties, NonNegativeOnRandomPairs) {
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> l1(4), l2(4);
        for (std::size_t k = 0; k < 4; ++k) {
            l1[k] = rng.normal();
            l2[k] = rng.normal();
        }
        const auto p = Categorical::from_logits(l1);
        const auto q = Categorical::from_logits(l2);
        EXPECT_GE(kl_categorical(p, q), 0.0);
        EXPECT_NEAR(kl_categorical(p, p), 0.0, 1e-15);
        const DiagGaussian gp{{l1[0], l1[1]}, {l1[2], l1[3]}};
        const DiagGaussian gq{{l2[0], l2[1]}, {l2[2], l2[3]}};
        EXPECT_GE(kl_diag_gaussian(gp, gq), 0.0);
        EXPECT_EQ(kl_diag_gaussian(gp, gp), 0.0);
    }
}

TEST(LogProbJoint, UniformCategoricalStandardNormal) {
    const Categorical c{{0.5, 0.5}};
    const DiagGaussian g{{0.0}, {0.0}};
    const std::vector<Bounds> unit{Bounds{-1.0, 1.0}};
    // At x = 0 the tanh and affine Jacobians are both 1.
    const double lp = log_prob_joint(c, g, ParamAction{0, {0.0}}, unit);
    EXPECT_NEAR(lp, std::log(0.5) - 0.5 * std::log(2.0 * std::numbers::pi), 1e-12);
    EXPECT_NEAR(lp, -1.612, 1e-3);
}

TEST(LogProbJoint, DeterministicCategoricalLeavesParameterTerm) {
    const DiagGaussian g{{0.3}, {-0.5}};
    const std::vector<Bounds> unit{Bounds{-1.0, 1.0}};
    const ParamAction a{1, {0.4}};
    EXPECT_NEAR(log_prob_joint(Categorical{{0.0, 1.0}}, g, a, unit),
                tanh_gaussian_log_prob(g, std::vector<double>{0.4}), 1e-15);
    EXPECT_THROW(log_prob_joint(Categorical{{0.0, 1.0}}, g, ParamAction{2, {0.4}}, unit),
                 std::out_of_range);
}

TEST(LogProbJoint, NormalizesOverTheJointSpace) {
    // Two actions: action 0 has a 1-dim parameter in [0, 6], action 1 has none.
    const Categorical c{{0.35, 0.65}};
    const DiagGaussian g{{0.4}, {-0.3}};
    const std::vector<Bounds> b{Bounds{0.0, 6.0}};
    const std::size_t cells = 200000;
    const double h = b[0].width() / static_cast<double>(cells);
    double mass = 0.0;
    for (std::size_t i = 0; i < cells; ++i) {
        const double x = b[0].low + (static_cast<double>(i) + 0.5) * h;
        mass += std::exp(log_prob_joint(c, g, ParamAction{0, {x}}, b)) * h;
    }
    const DiagGaussian none{{}, {}};
    mass += std::exp(log_prob_joint(c, none, ParamAction{1, {}}, {}));
    EXPECT_NEAR(mass, 1.0, 1e-3);
}

TEST(TanhGaussian, SamplesStayInsideTheOpenCube) {
    Rng rng(8);
    const DiagGaussian g{{0.5, -2.0, 0.0}, {1.0, 0.5, -1.0}};
    for (int i = 0; i < 20000; ++i) {
        std::vector<double> u;
        const auto y = tanh_gaussian_sample(g, rng, &u);
        for (std::size_t k = 0; k < y.size(); ++k) {
            ASSERT_GT(y[k], -1.0);
            ASSERT_LT(y[k], 1.0);
            ASSERT_EQ(y[k], std::tanh(u[k]));
        }
    }
}

TEST(DiagGaussian, LogStdIsClamped) {
    const DiagGaussian g{{0.0}, {-50.0}};
    EXPECT_DOUBLE_EQ(g.std_at(0), std::exp(kLogStdMin));
    const DiagGaussian h{{0.0}, {50.0}};
    EXPECT_DOUBLE_EQ(h.std_at(0), std::exp(kLogStdMax));
}

}  // namespace
}  // namespace pamdp
