#include "pamdp/envs/platform.hpp"
#include "pamdp/envs/toy.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <map>
#include <set>
#include <tuple>

namespace pamdp {
namespace {

ParamAction act(std::size_t a, std::vector<double> x = {}) { return {a, std::move(x)}; }

// ---------------------------------------------------------------- toy chain

TEST(Toy, ResetIsStateZero) {
    ToyPamdp toy;
    Rng rng(1);
    EXPECT_EQ(toy.reset(rng), (std::vector<double>{1.0, 0.0, 0.0}));
    EXPECT_EQ(toy.state(), 0u);
}

TEST(Toy, HittingTheTargetRewardsAndAdvances) {
    ToyPamdp toy;
    Rng rng(1);
    toy.reset(rng);
    auto r = toy.step(act(0, {0.7}));
    EXPECT_EQ(r.reward, 1.0);
    EXPECT_FALSE(r.terminal);
    EXPECT_EQ(toy.state(), 1u);
}

TEST(Toy, MissStaysAndQuitTerminates) {
    ToyPamdp toy;
    Rng rng(1);
    toy.reset(rng);
    auto miss = toy.step(act(0, {0.0}));
    EXPECT_EQ(miss.reward, 0.0);
    EXPECT_EQ(toy.state(), 0u);
    auto quit = toy.step(act(1));
    EXPECT_DOUBLE_EQ(quit.reward, 0.1);
    EXPECT_TRUE(quit.terminal);
    EXPECT_THROW(toy.step(act(1)), EpisodeOver);
}

TEST(Toy, OutOfBoundsParameterIsClampedAndCounted) {
    ToyPamdp toy;
    Rng rng(1);
    toy.reset(rng);
    toy.step(act(0, {3.0}));
    EXPECT_EQ(toy.clamp_count(), 1u);
    EXPECT_THROW(toy.step(act(0, {})), ShapeError);
    EXPECT_THROW(toy.step(act(2)), std::out_of_range);
}

TEST(Toy, HorizonEndsEpisode) {
    ToyPamdp toy;
    Rng rng(1);
    toy.reset(rng);
    StepResult r;
    for (int i = 0; i < 6; ++i) r = toy.step(act(0, {-1.0}));
    EXPECT_TRUE(r.terminal);
}

TEST(GaussLegendre, IntegratesPolynomialsExactly) {
    auto [x, w] = gauss_legendre(21);
    double sum_w = 0.0;
    double x40 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sum_w += w[i];
        x40 += w[i] * std::pow(x[i], 40);
    }
    EXPECT_NEAR(sum_w, 2.0, 1e-13);
    EXPECT_NEAR(x40, 2.0 / 41.0, 1e-13);
}

std::vector<ToyStatePolicy> point_policy(const std::vector<double>& points, double p_quit) {
    std::vector<ToyStatePolicy> table(points.size());
    for (std::size_t s = 0; s < points.size(); ++s) {
        table[s].probs = {1.0 - p_quit, p_quit};
        table[s].param_atoms = {{points[s], 1.0}};
    }
    return table;
}

TEST(ToyExactValue, OptimalDeterministicPolicy) {
    ToyPamdp toy;
    const auto table = point_policy({0.7, -0.4, 0.2}, 0.0);
    // 1 + 0.9 + 0.81
    EXPECT_NEAR(toy_exact_policy_value(toy, table), 2.71, 1e-12);
    EXPECT_NEAR(toy.optimal_value(), 2.71, 1e-12);
}

TEST(ToyExactValue, AlwaysQuitting) {
    ToyPamdp toy;
    EXPECT_NEAR(toy_exact_policy_value(toy, point_policy({0, 0, 0}, 1.0)), 0.1, 1e-15);
}

TEST(ToyExactValue, ZeroDiscountGivesExpectedFirstReward) {
    ToyConfig cfg;
    cfg.gamma = 1e-12;
    ToyPamdp toy(cfg);
    std::vector<ToyStatePolicy> table(3);
    for (auto& t : table) {
        t.probs = {0.5, 0.5};
        t.param_density = [](double) { return 0.5; };
    }
    // 0.5 * P(hit) + 0.5 * 0.1 with P(hit) = 0.3 * 0.5
    EXPECT_NEAR(toy_exact_policy_value(toy, table), 0.5 * 0.15 + 0.05, 1e-9);
}

TEST(ToyExactValue, UniformRandomPolicyMatchesMonteCarlo) {
    ToyPamdp toy;
    std::vector<ToyStatePolicy> table(3);
    for (auto& t : table) {
        t.probs = {0.5, 0.5};
        t.param_density = [](double) { return 0.5; };
    }
    const double exact = toy_exact_policy_value(toy, table);

    Rng rng(2024);
    const int episodes = 1000000;
    double sum = 0.0;
    double sum_sq = 0.0;
    for (int e = 0; e < episodes; ++e) {
        toy.reset(rng);
        double ret = 0.0;
        double disc = 1.0;
        for (;;) {
            const bool quit = rng.uniform() < 0.5;
            auto r = quit ? toy.step(act(1)) : toy.step(act(0, {rng.uniform(-1.0, 1.0)}));
            ret += disc * r.reward;
            disc *= 0.9;
            if (r.terminal) break;
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    const double mean = sum / episodes;
    const double se = std::sqrt((sum_sq / episodes - mean * mean) / episodes);
    EXPECT_LT(std::abs(mean - exact), 3.0 * se) << "exact " << exact << " mc " << mean;
}

TEST(ToyExactValue, RefusesInstancesAboveLimits) {
    ToyPamdp big(ToyConfig{.targets = {0.1, 0.2, 0.3, 0.4}});
    EXPECT_THROW(toy_exact_policy_value(big, point_policy({0, 0, 0, 0}, 0.0)),
                 std::invalid_argument);
    ToyPamdp toy;
    EXPECT_THROW(toy_exact_policy_value(toy, point_policy({0, 0, 0}, 0.0), 22),
                 std::invalid_argument);
}

// ------------------------------------------------------------------ platform

TEST(Platform, ResetObservation) {
    PlatformEnv env;
    Rng rng(3);
    auto obs = env.reset(rng);
    ASSERT_EQ(obs.size(), PlatformEnv::kObsDim);
    EXPECT_EQ(env.agent_x(), 0.0);
    EXPECT_DOUBLE_EQ(obs[0], -1.0);           // x normalized
    EXPECT_EQ(obs[1], 0.0);                   // on the ground
    EXPECT_EQ(obs[2], 1.0);                   // grounded
    EXPECT_EQ(obs[3], 1.0);                   // platform one-hot
    EXPECT_EQ(obs[4] + obs[5], 0.0);
    EXPECT_DOUBLE_EQ(obs[6], 1.0);            // enemy at 12.5, clipped at scale 10
    EXPECT_EQ(obs[7], -1.0);                  // walking toward the start
    EXPECT_DOUBLE_EQ(obs[8], 1.0);            // 25 to the edge, clipped
    Rng other(3);
    PlatformEnv env2;
    EXPECT_EQ(env2.reset(other), obs);
}

TEST(Platform, RunningIntoEnemyEndsWithPartialProgress) {
    PlatformEnv env;
    Rng rng(3);
    env.reset(rng);
    double ret = 0.0;
    StepResult r;
    do {
        r = env.step(act(PlatformEnv::Run, {6.0}));
        ret += r.reward;
    } while (!r.terminal);
    EXPECT_TRUE(env.hit_enemy());
    EXPECT_GT(ret, 0.0);
    EXPECT_LT(ret, 1.0);
    EXPECT_NEAR(ret, env.agent_x() / env.course_length(), 1e-12);
}

TEST(Platform, RunningOffTheEdgeFalls) {
    PlatformConfig cfg;
    cfg.enemy_platforms = {};
    PlatformEnv env(cfg);
    Rng rng(3);
    env.reset(rng);
    StepResult r;
    for (int i = 0; i < 4; ++i) r = env.step(act(PlatformEnv::Run, {6.0}));  // x = 24
    EXPECT_FALSE(r.terminal);
    r = env.step(act(PlatformEnv::Run, {6.0}));
    EXPECT_TRUE(r.terminal);
    EXPECT_TRUE(env.fell());
}

TEST(Platform, ObservationsAreBounded) {
    PlatformEnv env;
    Rng rng(5);
    for (int ep = 0; ep < 200; ++ep) {
        auto obs = env.reset(rng);
        for (;;) {
            for (double v : obs) {
                ASSERT_TRUE(std::isfinite(v));
                ASSERT_LE(std::abs(v), 1.0);
            }
            const std::size_t a = rng.index(3);
            const auto& b = env.spec().param_bounds[a][0];
            auto r = env.step(act(a, {rng.uniform(b.low, b.high)}));
            ASSERT_GE(r.reward, 0.0);
            obs = r.state;
            if (r.terminal) break;
        }
    }
}

// Breadth-first search over a grid of actions, deduplicating on the full
// simulator state. Returns the shortest completing action sequence, if any.
std::optional<std::vector<ParamAction>> solve(const PlatformConfig& cfg,
                                              const std::set<std::size_t>& allowed) {
    using Key = std::tuple<long, std::vector<long>>;
    struct Node {
        PlatformEnv env;
        std::vector<ParamAction> plan;
    };
    PlatformEnv start(cfg);
    Rng rng(0);
    start.reset(rng);
    std::deque<Node> frontier{{start, {}}};
    std::set<Key> seen;
    auto key = [](const PlatformEnv& e) {
        std::vector<long> en;
        for (double v : e.enemy_positions()) en.push_back(std::lround(v * 4));
        for (double d : e.enemy_directions()) en.push_back(std::lround(d));
        return Key{std::lround(e.agent_x() * 4), en};
    };
    while (!frontier.empty()) {
        Node node = std::move(frontier.front());
        frontier.pop_front();
        if (node.plan.size() > 60) continue;
        for (std::size_t a : allowed) {
            const double hi = node.env.spec().param_bounds[a][0].high;
            for (double x = 0.0; x <= hi + 1e-9; x += 1.0) {
                Node next{node.env, node.plan};
                auto r = next.env.step(act(a, {x}));
                next.plan.push_back(act(a, {x}));
                if (next.env.reached_goal()) return next.plan;
                if (r.terminal) continue;
                if (!seen.insert(key(next.env)).second) continue;
                frontier.push_back(std::move(next));
            }
        }
    }
    return std::nullopt;
}

TEST(Platform, CompletionNeedsJumpAndLeap) {
    PlatformConfig cfg;
    auto plan = solve(cfg, {PlatformEnv::Run, PlatformEnv::Jump, PlatformEnv::Leap});
    ASSERT_TRUE(plan.has_value());

    // Replaying the plan collects exactly the full course.
    PlatformEnv env(cfg);
    Rng rng(0);
    env.reset(rng);
    double ret = 0.0;
    for (const auto& a : *plan) ret += env.step(a).reward;
    EXPECT_TRUE(env.reached_goal());
    EXPECT_NEAR(ret, 1.0, 1e-12);

    EXPECT_FALSE(solve(cfg, {PlatformEnv::Run, PlatformEnv::Jump}).has_value());
    EXPECT_FALSE(solve(cfg, {PlatformEnv::Run, PlatformEnv::Leap}).has_value());
}

TEST(Platform, DeterministicGivenActionSequence) {
    PlatformEnv a;
    PlatformEnv b;
    Rng ra(1);
    Rng rb(99);
    a.reset(ra);
    b.reset(rb);
    Rng actions(17);
    for (int i = 0; i < 50; ++i) {
        const std::size_t k = actions.index(3);
        const double x = actions.uniform(0.0, 6.0);
        auto r1 = a.step(act(k, {x}));
        auto r2 = b.step(act(k, {x}));
        EXPECT_EQ(r1.state, r2.state);
        EXPECT_EQ(r1.reward, r2.reward);
        if (r1.terminal) {
            a.reset(ra);
            b.reset(rb);
        }
    }
}

}  // namespace
}  // namespace pamdp
