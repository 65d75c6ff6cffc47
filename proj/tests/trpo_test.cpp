#include "pamdp/envs/platform.hpp"
#include "pamdp/envs/toy.hpp"
#include "pamdp/toy_tables.hpp"
#include "pamdp/trpo.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace pamdp {
namespace {

using namespace fixture;

// ------------------------------------------------------------------ at Theta'

TEST(Surrogate, EqualsMeanAdvantageAtBehavior) {
    ToyPamdp toy;
    Rng rng(1);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    const auto b = toy_batch(pi, 300, 2);
    Graph g;
    auto bound = bind(g, pi.params());
    EXPECT_NEAR(surrogate_loss(pi, bound, b).value().item(), 0.0, 1e-9);
}

TEST(Surrogate, GraphValueMatchesNumericEvaluation) {
    ToyPamdp toy;
    Rng rng(1);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    const auto b = toy_batch(pi, 300, 2);
    perturb(pi, 0.1, 3);
    Graph g;
    auto bound = bind(g, pi.params());
    EXPECT_NEAR(surrogate_loss(pi, bound, b).value().item(), numeric_surrogate(pi, b), 1e-12);
}

TEST(Surrogate, GradientAtBehaviorIsTheScoreFunctionEstimator) {
    ToyPamdp toy;
    Rng rng(4);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    const auto b = toy_batch(pi, 300, 5);
    const Vector grad = graph_gradient(pi, b, kSurrogate);
    // mean_r grad ln pi(a_r, u_r | s_r) A_r by finite differences of the numeric log-density.
    auto score = at_theta(pi, [&] {
        double s = 0.0;
        for (std::size_t r = 0; r < b.size(); ++r) {
            const std::size_t a = b.actions[r];
            std::vector<double> u(b.u.row_values(r).begin(),
                                  b.u.row_values(r).begin() + static_cast<std::ptrdiff_t>(pi.spec().param_dims[a]));
            s += pi.log_prob_u(b.states.row_values(r), a, u) * b.advantages[r];
        }
        return s / static_cast<double>(b.size());
    });
    EXPECT_LT(oracle::rel_error(grad, oracle::numeric_gradient(score, pi.params().flat())), 1e-6);
}

TEST(Surrogate, OneStateDiscreteGradientMatchesEnumeration) {
    // One state (s = 1.5), two parameterless actions, linear logits z = s W + b.
    PamdpSpec spec{.state_dim = 1, .discrete_actions = 2, .param_dims = {0, 0},
                   .param_bounds = {{}, {}}, .horizon = 1, .gamma = 0.5};
    Rng rng(6);
    HierarchicalPolicy pi(spec, tiny({}), rng);
    const double s = 1.5;
    const double adv[2] = {0.8, -0.3};

    RolloutBatch b;
    b.states = Tensor(2, 1, s);
    b.actions = {0, 1};
    b.onehot = Tensor(2, 2, std::vector<double>{1, 0, 0, 1});
    b.u = Tensor(2, 1);
    b.mask = Tensor(2, 1);
    snapshot_behavior(pi, b);
    // Rows weighted by the behavior probabilities make the surrogate equal
    // sum_a pi(a) A(a) exactly.
    for (std::size_t a = 0; a < 2; ++a) b.advantages.push_back(2.0 * b.old_probs(a, a) * adv[a]);

    const Vector grad = graph_gradient(pi, b, kSurrogate);

    // d/dz_k sum_a pi(a) A(a) = pi(k) (A(k) - sum_a pi(a) A(a)); W0 = (1 x 2), b0 = (1 x 2).
    const auto p = pi.probs(std::vector<double>{s});
    const double mean_a = p[0] * adv[0] + p[1] * adv[1];
    Vector expected = Vector::Zero(grad.size());
    for (std::size_t k = 0; k < 2; ++k) {
        const double dz = p[k] * (adv[k] - mean_a);
        expected[static_cast<Eigen::Index>(k)] = dz * s;       // W0[0, k]
        expected[static_cast<Eigen::Index>(2 + k)] = dz;       // b0[0, k]
    }
    EXPECT_LT(oracle::rel_error(grad, expected), 1e-8);
}

TEST(KlEstimators, ZeroWithZeroGradientAtBehavior) {
    ToyPamdp toy;
    Rng rng(7);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    const auto b = toy_batch(pi, 300, 8);
    for (KlEstimator mode : kAllModes) {
        Vector grad;
        const std::vector<RolloutBatch> one{b};
        const double kl = chunked_value(pi, one, kl_objective(mode), &grad);
        EXPECT_NEAR(kl, 0.0, 1e-7) << to_string(mode);
        EXPECT_LT(grad.lpNorm<Eigen::Infinity>(), 1e-7) << to_string(mode);
    }
}

TEST(KlEstimators, GraphValuesMatchNumericEvaluation) {
    PlatformEnv env;
    Rng rng(9);
    HierarchicalPolicy pi(env.spec(), tiny({4}), rng);
    RolloutBatch b = collect_rollouts(env, pi, 200, 0.99, rng);
    perturb(pi, 0.2, 10);
    for (KlEstimator mode : kAllModes) {
        Graph g;
        auto bound = bind(g, pi.params());
        EXPECT_NEAR(estimate_kl(pi, bound, b, mode).value().item(), numeric_kl(pi, b, mode), 1e-12)
            << to_string(mode);
    }
}

TEST(KlEstimators, OneStateAnalyticIsTheExactKl) {
    ToyPamdp toy;
    Rng rng(11);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    RolloutBatch b;
    b.states = Tensor::row(one_hot(3, 1));
    b.actions = {1};
    b.onehot = Tensor::row(one_hot(2, 1));
    b.u = Tensor(1, 1);
    b.mask = Tensor(1, 1);
    snapshot_behavior(pi, b);
    const HierarchicalPolicy old = pi;
    perturb(pi, 0.3, 12);

    const std::vector<double> s = one_hot(3, 1);
    const Categorical pc{old.probs(s)};
    const Categorical qc{pi.probs(s)};
    // Only action 0 has a parameter.
    const double expected = kl_categorical(pc, qc) + pc.probs[0] * kl_diag_gaussian(old.conditional(s, 0), pi.conditional(s, 0));
    Graph g;
    auto bound = bind(g, pi.params());
    EXPECT_NEAR(estimate_kl(pi, bound, b, KlEstimator::ChainRuleAnalytic).value().item(), expected, 1e-13);
    EXPECT_GT(expected, 0.0);
}

TEST(KlEstimators, AnalyticModeRejectsMissingBehaviorMeans) {
    ToyPamdp toy;
    Rng rng(13);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    auto b = toy_batch(pi, 50, 14);
    b.old_means.pop_back();
    Graph g;
    auto bound = bind(g, pi.params());
    EXPECT_THROW(estimate_kl(pi, bound, b, KlEstimator::ChainRuleAnalytic), ShapeError);
}

TEST(KlEstimators, AnalyticAndSampledAgreeAndAnalyticHasLowerVariance) {
    PlatformEnv env;
    Rng rng(15);
    HierarchicalPolicy behavior(env.spec(), tiny({6}), rng);
    HierarchicalPolicy target = behavior;
    perturb(target, 0.15, 16);
    // 10^5 (s, a) samples; states from behavior rollouts, a ~ pi_old(. | s).
    RolloutBatch b = collect_rollouts(env, behavior, 100000, 0.99, rng);
    ASSERT_GT(b.size(), 50000u);
    std::vector<double> sampled(b.size());
    std::vector<double> analytic(b.size());
    for (std::size_t r = 0; r < b.size(); ++r) {
        const auto row = b.rows(r, r + 1);
        sampled[r] = numeric_kl(target, row, KlEstimator::ChainRuleSampled);
        analytic[r] = numeric_kl(target, row, KlEstimator::ChainRuleAnalytic);
    }
    auto stats = [](const std::vector<double>& v) {
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - m) * (x - m);
        return std::pair{m, var / static_cast<double>(v.size() - 1)};
    };
    const auto [ms, vs] = stats(sampled);
    const auto [ma, va] = stats(analytic);
    const double se = std::sqrt((vs + va) / static_cast<double>(b.size()));
    EXPECT_LT(std::abs(ms - ma), 3.0 * se);
    EXPECT_LT(va, vs);
}

// --------------------------------------------------------- finite differences

TEST(Gradients, SurrogateAndKlEstimatorsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ToyPamdp toy;
        Rng rng(100 + seed);
        HierarchicalPolicy pi(toy.spec(), tiny(), rng);
        ASSERT_LE(pi.params().size(), 100u);
        const auto b = toy_batch(pi, 60, 200 + seed);
        perturb(pi, 0.2, 300 + seed);
        const Vector theta = pi.params().flat();
        {
            const Vector fd = oracle::numeric_gradient(at_theta(pi, [&] { return numeric_surrogate(pi, b); }), theta);
            EXPECT_LT(oracle::rel_error(graph_gradient(pi, b, kSurrogate), fd), 1e-5) << "surrogate seed " << seed;
        }
        for (KlEstimator mode : kAllModes) {
            const Vector fd = oracle::numeric_gradient(at_theta(pi, [&] { return numeric_kl(pi, b, mode); }), theta);
            EXPECT_LT(oracle::rel_error(graph_gradient(pi, b, kl_objective(mode)), fd), 1e-5)
                << to_string(mode) << " seed " << seed;
        }
    }
}

// ------------------------------------------------------------------ Fisher

TEST(Fisher, ZeroVectorGivesZero) {
    ToyPamdp toy;
    Rng rng(17);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    const std::vector<RolloutBatch> chunks{toy_batch(pi, 100, 18)};
    const Vector zero = Vector::Zero(static_cast<Eigen::Index>(pi.params().size()));
    EXPECT_EQ(fisher_vector_product(pi, chunks, zero, KlEstimator::ChainRuleAnalytic, 0.1).norm(), 0.0);
}

TEST(Fisher, MatchesExplicitKlHessian) {
    ToyPamdp toy;
    Rng rng(19);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    ASSERT_LE(pi.params().size(), 50u);
    const auto b = toy_batch(pi, 200, 20);
    const std::vector<RolloutBatch> chunks{b};
    const Vector theta = pi.params().flat();
    for (KlEstimator mode : kAllModes) {
        const Eigen::MatrixXd h =
            oracle::numeric_hessian(at_theta(pi, [&] { return numeric_kl(pi, b, mode); }), theta);
        Rng vr(21);
        for (int trial = 0; trial < 3; ++trial) {
            Vector v(theta.size());
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = vr.normal();
            const Vector fv = fisher_vector_product(pi, chunks, v, mode, 0.0);
            EXPECT_LT(oracle::rel_error(fv, h * v), 1e-3) << to_string(mode);
        }
    }
}

TEST(Fisher, PositiveSemidefiniteWithDamping) {
    PlatformEnv env;
    Rng rng(22);
    HierarchicalPolicy pi(env.spec(), tiny({6}), rng);
    const std::vector<RolloutBatch> chunks{collect_rollouts(env, pi, 300, 0.99, rng)};
    for (KlEstimator mode : kAllModes) {
        for (int trial = 0; trial < 5; ++trial) {
            Vector v(static_cast<Eigen::Index>(pi.params().size()));
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
            EXPECT_GE(v.dot(fisher_vector_product(pi, chunks, v, mode, 0.1)), 0.0);
        }
    }
}

TEST(Fisher, TapeReusingOperatorAndChunkingAgree) {
    PlatformEnv env;
    Rng rng(23);
    HierarchicalPolicy pi(env.spec(), tiny({6}), rng);
    const auto b = collect_rollouts(env, pi, 500, 0.99, rng);
    const std::vector<RolloutBatch> whole{b};
    const auto pieces = b.chunks(97);
    FisherOperator op(pi, b, KlEstimator::ChainRuleAnalytic, 0.1);
    for (int trial = 0; trial < 3; ++trial) {
        Vector v(static_cast<Eigen::Index>(pi.params().size()));
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
        const Vector ref = fisher_vector_product(pi, whole, v, KlEstimator::ChainRuleAnalytic, 0.1);
        EXPECT_LT(oracle::rel_error(op(v), ref), 1e-12);
        EXPECT_LT(oracle::rel_error(fisher_vector_product(pi, pieces, v, KlEstimator::ChainRuleAnalytic, 0.1), ref),
                  1e-12);
    }
}

// ---------------------------------------------------------------------- CG

TEST(ConjugateGradient, IdentitySolvesInOneIteration) {
    const Vector b = (Vector(3) << 1.0, -2.0, 0.5).finished();
    const auto res = conjugate_gradient([](const Vector& v) { return v; }, b, 10);
    EXPECT_EQ(res.iterations, 1u);
    EXPECT_LT((res.x - b).norm(), 1e-15);
}

TEST(ConjugateGradient, ZeroRightHandSide) {
    const auto res = conjugate_gradient([](const Vector& v) { return Vector(2.0 * v); }, Vector::Zero(4), 10);
    EXPECT_EQ(res.x.norm(), 0.0);
}

TEST(ConjugateGradient, MatchesDirectSolveOnRandomSpdSystems) {
    Rng rng(24);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::MatrixXd m(8, 8);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
        const Eigen::MatrixXd a = m * m.transpose() + Eigen::MatrixXd::Identity(8, 8);
        Vector b(8);
        for (Eigen::Index i = 0; i < 8; ++i) b[i] = rng.normal();
        const auto res = conjugate_gradient([&](const Vector& v) { return Vector(a * v); }, b, 8, 1e-30);
        const Vector direct = a.ldlt().solve(b);
        EXPECT_LT(oracle::rel_error(res.x, direct), 1e-8);
        EXPECT_LE(res.iterations, 8u);
    }
}

TEST(ConjugateGradient, NonFiniteOperatorAborts) {
    const Vector b = Vector::Ones(3);
    const double inf = std::numeric_limits<double>::infinity();
    EXPECT_THROW(conjugate_gradient([&](const Vector& v) { return Vector(v * inf); }, b, 5), NonFiniteError);
}

// --------------------------------------------------------------- the update

TEST(TrpoUpdate, ZeroAdvantageLeavesPolicyUnchanged) {
    ToyPamdp toy;
    Rng rng(25);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    auto b = toy_batch(pi, 200, 26);
    std::fill(b.advantages.begin(), b.advantages.end(), 0.0);
    const Vector before = pi.params().flat();
    const auto rep = trpo_update(pi, b, TrustRegionConfig{});
    EXPECT_FALSE(rep.accepted);
    EXPECT_EQ(pi.params().flat(), before);
}

TEST(TrpoUpdate, AcceptedStepsRespectTheTrustRegion) {
    PlatformEnv env;
    Rng rng(27);
    HierarchicalPolicy pi(env.spec(), tiny({16}), rng);
    for (double delta : {0.005, 0.05}) {
        for (KlEstimator mode : kAllModes) {
            auto b = collect_rollouts(env, pi, 1000, 0.99, rng);
            normalize(b.advantages);
            TrustRegionConfig cfg;
            cfg.delta = delta;
            cfg.kl_estimator = mode;
            const auto rep = trpo_update(pi, b, cfg);
            if (!rep.accepted) continue;
            EXPECT_LE(rep.kl, delta);
            EXPECT_LE(rep.kl_analytic, 1.5 * delta);
            EXPECT_GT(rep.surrogate_after, rep.surrogate_before);
            EXPECT_LE(rep.backtracks, cfg.max_backtracks);
        }
    }
}

TEST(TrpoUpdate, ImprovesTheToyPolicy) {
    ToyPamdp toy;
    Rng rng(28);
    PatrpoConfig cfg;
    cfg.policy = tiny({32}, 1e-2);
    cfg.trust_region.gamma = toy.spec().gamma;
    PatrpoAgent agent(toy.spec(), cfg, rng);
    const double j0 = toy_exact_policy_value(toy, toy_table_stochastic(toy, agent.policy()));
    for (int i = 0; i < 30; ++i) agent.train_epoch(toy, 2000, rng);
    const double j1 = toy_exact_policy_value(toy, toy_table_stochastic(toy, agent.policy()));
    EXPECT_GE(j1, 1.5 * j0) << "J0 " << j0 << " J30 " << j1;
}

// ---------------------------------------------------------------- baseline

TEST(Baseline, ConstantReturnsAreLearned) {
    Rng rng(29);
    VBaseline v(3, CriticConfig{.hidden = {16}, .hidden_activation = Activation::Tanh, .final_scale = 1.0}, rng);
    Tensor states(256, 3);
    for (double& x : states.values()) x = rng.normal();
    const std::vector<double> targets(256, 0.7);
    AdamState adam;
    fit_baseline(v, adam, states, targets, BaselineConfig{.epochs = 300, .lr = 1e-2}, rng);
    const Tensor pred = v.evaluate(states);
    for (std::size_t r = 0; r < 256; ++r) ASSERT_NEAR(pred[r], 0.7, 1e-2);
}

TEST(Baseline, LossDecreasesAndReducesAdvantageVariance) {
    PlatformEnv env;
    Rng rng(30);
    HierarchicalPolicy pi(env.spec(), tiny({8}), rng);
    const auto b = collect_rollouts(env, pi, 5000, 0.99, rng);
    VBaseline v(env.spec().state_dim, PatrpoConfig{}.baseline, rng);
    AdamState adam;
    const auto hist = fit_baseline(v, adam, b.states, b.returns, BaselineConfig{}, rng);
    EXPECT_LT(hist.back(), hist.front());
    const Tensor pred = v.evaluate(b.states);
    auto variance = [](const std::vector<double>& x) {
        const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        double s = 0.0;
        for (double y : x) s += (y - m) * (y - m);
        return s / static_cast<double>(x.size());
    };
    std::vector<double> adv(b.size());
    for (std::size_t r = 0; r < b.size(); ++r) adv[r] = b.returns[r] - pred[r];
    EXPECT_LT(variance(adv), variance(b.returns));
}

TEST(Rollouts, OnlyCompleteEpisodesAreKept) {
    ToyPamdp toy;
    Rng rng(31);
    HierarchicalPolicy pi(toy.spec(), tiny(), rng);
    const auto b = collect_rollouts(toy, pi, 1001, 0.9, rng);
    EXPECT_EQ(b.steps_collected, 1001u);
    EXPECT_LE(b.size(), 1001u);
    // Each kept episode ends with return-to-go equal to its final reward.
    std::size_t terminal_rows = 0;
    for (std::size_t r = 0; r < b.size(); ++r) {
        if (r + 1 == b.size() || b.states(r + 1, 0) == 1.0) ++terminal_rows;
    }
    EXPECT_GE(terminal_rows, b.episode_returns.size());
}

TEST(ToyTables, GumbelTableMatchesMonteCarlo) {
    ToyPamdp toy;
    Rng rng(32);
    HierarchicalPolicy pi(toy.spec(), tiny({8}, 1.0), rng);
    const double exact = toy_exact_policy_value(toy, toy_table_gumbel(toy, pi, 1.0));
    ActOptions noiseless;
    noiseless.param_noise = 0.0;
    double sum = 0.0;
    double sum_sq = 0.0;
    const int episodes = 100000;
    for (int e = 0; e < episodes; ++e) {
        auto s = toy.reset(rng);
        double ret = 0.0;
        double disc = 1.0;
        for (;;) {
            auto r = toy.step(pi.act(s, rng, ActMode::GumbelRecorded, noiseless).action);
            ret += disc * r.reward;
            disc *= 0.9;
            s = r.state;
            if (r.terminal) break;
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    const double mean = sum / episodes;
    const double se = std::sqrt((sum_sq / episodes - mean * mean) / episodes);
    EXPECT_LT(std::abs(mean - exact), 4.0 * se + 2e-3) << "exact " << exact << " mc " << mean;
}

TEST(ToyTables, StochasticTableMatchesMonteCarlo) {
    ToyPamdp toy;
    Rng rng(33);
    HierarchicalPolicyConfig cfg = tiny({8}, 1.0);
    cfg.init_log_std = -0.5;
    HierarchicalPolicy pi(toy.spec(), cfg, rng);
    const double exact = toy_exact_policy_value(toy, toy_table_stochastic(toy, pi));
    double sum = 0.0;
    double sum_sq = 0.0;
    const int episodes = 100000;
    for (int e = 0; e < episodes; ++e) {
        auto s = toy.reset(rng);
        double ret = 0.0;
        double disc = 1.0;
        for (;;) {
            auto r = toy.step(pi.act(s, rng, ActMode::Stochastic).action);
            ret += disc * r.reward;
            disc *= 0.9;
            s = r.state;
            if (r.terminal) break;
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    const double mean = sum / episodes;
    const double se = std::sqrt((sum_sq / episodes - mean * mean) / episodes);
    EXPECT_LT(std::abs(mean - exact), 3.0 * se) << "exact " << exact << " mc " << mean;
}

}  // namespace
}  // namespace pamdp
