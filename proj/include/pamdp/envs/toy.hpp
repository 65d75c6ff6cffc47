#pragma once

#include "pamdp/envs/pamdp.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

namespace pamdp {

struct ToyConfig {
    std::vector<double> targets{0.7, -0.4, 0.2};
    double tolerance = 0.15;
    double quit_reward = 0.1;
    std::size_t horizon = 6;
    double gamma = 0.9;
};

/// Small chain PAMDP whose policy value can be computed exactly.
///
/// In state s, action 0 with parameter x in [-1, 1] earns 1 and advances when
/// |x - targets[s]| <= tolerance, otherwise earns 0 and stays. Succeeding in the
/// last state ends the episode. Action 1 has no parameters, earns quit_reward
/// and ends the episode.
class ToyPamdp final : public Environment {
public:
    explicit ToyPamdp(ToyConfig cfg = {}) : cfg_(std::move(cfg)) {
        spec_.state_dim = cfg_.targets.size();
        spec_.discrete_actions = 2;
        spec_.param_dims = {1, 0};
        spec_.param_bounds = {{Bounds{-1.0, 1.0}}, {}};
        spec_.horizon = cfg_.horizon;
        spec_.gamma = cfg_.gamma;
        spec_.validate();
    }

    const PamdpSpec& spec() const override { return spec_; }
    const ToyConfig& config() const { return cfg_; }
    std::string name() const override { return "toy"; }
    std::unique_ptr<Environment> clone() const override { return std::make_unique<ToyPamdp>(*this); }

    std::size_t num_states() const { return cfg_.targets.size(); }
    std::size_t state() const { return state_; }

    std::vector<double> reset(Rng&) override {
        state_ = 0;
        steps_ = 0;
        done_ = false;
        return observe();
    }

    StepResult step(const ParamAction& raw) override {
        if (done_) throw EpisodeOver("step() called on a finished episode");
        const ParamAction action = sanitize(raw);
        ++steps_;
        StepResult r;
        if (action.discrete == 1) {
            r.reward = cfg_.quit_reward;
            done_ = true;
        } else if (std::abs(action.params[0] - cfg_.targets[state_]) <= cfg_.tolerance) {
            r.reward = 1.0;
            ++state_;
            if (state_ == num_states()) done_ = true;
        }
        if (steps_ >= cfg_.horizon) done_ = true;
        r.terminal = done_;
        r.state = observe();
        return r;
    }

    /// Discounted return of the policy that always hits the target.
    double optimal_value() const {
        double v = 0.0;
        double disc = 1.0;
        const std::size_t n = std::min(num_states(), cfg_.horizon);
        for (std::size_t k = 0; k < n; ++k, disc *= cfg_.gamma) v += disc;
        return std::max(v, cfg_.quit_reward);
    }

private:
    std::vector<double> observe() const {
        std::vector<double> obs(num_states(), 0.0);
        if (state_ < num_states()) obs[state_] = 1.0;
        return obs;
    }

    ToyConfig cfg_;
    PamdpSpec spec_;
    std::size_t state_ = 0;
    std::size_t steps_ = 0;
    bool done_ = false;
};

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(std::size_t n) {
    std::vector<double> x(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
        double z = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) /
                            (static_cast<double>(n) + 0.5));
        double dp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0;
            double p1 = 0.0;
            for (std::size_t k = 1; k <= n; ++k) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * static_cast<double>(k) - 1.0) * z * p1 -
                      (static_cast<double>(k) - 1.0) * p2) /
                     static_cast<double>(k);
            }
            dp = static_cast<double>(n) * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    return {x, w};
}

/// Behavior of a policy in one toy state. The parameter law (conditional on
/// action 0) is given as a density over [-1, 1], as the exact mass of an
/// interval, or as weighted atoms; the first one present is used.
struct ToyStatePolicy {
    std::array<double, 2> probs{0.5, 0.5};
    std::function<double(double)> param_density;
    std::function<double(double, double)> param_interval_mass;  // P(lo <= x <= hi)
    std::vector<std::pair<double, double>> param_atoms;         // (x, mass)
};

struct ToyOracleLimits {
    static constexpr std::size_t max_states = 3;
    static constexpr std::size_t max_actions = 2;
    static constexpr std::size_t max_quadrature_points = 21;
};

/// Exact expected discounted return J of a stationary policy on the toy chain:
/// parameter success probabilities by Gauss-Legendre quadrature over the target
/// window, then enumeration of every (action, outcome) branch up to the horizon.
inline double toy_exact_policy_value(const ToyPamdp& toy, std::span<const ToyStatePolicy> policy,
                                     std::size_t quadrature_points = 21) {
    const auto& cfg = toy.config();
    if (toy.num_states() > ToyOracleLimits::max_states ||
        toy.spec().discrete_actions > ToyOracleLimits::max_actions ||
        quadrature_points > ToyOracleLimits::max_quadrature_points || quadrature_points == 0) {
        throw std::invalid_argument("toy_exact_policy_value: instance exceeds enumeration limits");
    }
    if (policy.size() != toy.num_states()) {
        throw std::invalid_argument("toy_exact_policy_value: need one policy entry per state");
    }
    const auto [nodes, weights] = gauss_legendre(quadrature_points);
    const Bounds& b = toy.spec().param_bounds[0][0];

    std::vector<double> success(toy.num_states());
    for (std::size_t s = 0; s < toy.num_states(); ++s) {
        const auto& p = policy[s];
        if (std::abs(p.probs[0] + p.probs[1] - 1.0) > 1e-9 || p.probs[0] < 0 || p.probs[1] < 0) {
            throw std::invalid_argument("toy_exact_policy_value: action probabilities must form a simplex");
        }
        const double lo = std::max(b.low, cfg.targets[s] - cfg.tolerance);
        const double hi = std::min(b.high, cfg.targets[s] + cfg.tolerance);
        double q = 0.0;
        if (p.param_interval_mass) {
            q = p.param_interval_mass(lo, hi);
        } else if (p.param_density) {
            const double half = 0.5 * (hi - lo);
            const double mid = 0.5 * (hi + lo);
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                q += weights[k] * half * p.param_density(mid + half * nodes[k]);
            }
        } else {
            for (const auto& [x, mass] : p.param_atoms) {
                if (x >= lo && x <= hi) q += mass;
            }
        }
        success[s] = std::clamp(q, 0.0, 1.0);
    }

    // Branches: quit (terminal), hit (advance), miss (stay).
    const std::function<double(std::size_t, std::size_t)> enumerate =
        [&](std::size_t s, std::size_t steps_left) -> double {
        if (steps_left == 0 || s >= toy.num_states()) return 0.0;
        const auto& p = policy[s];
        const double hit = 1.0 + cfg.gamma * enumerate(s + 1, steps_left - 1);
        const double miss = cfg.gamma * enumerate(s, steps_left - 1);
        return p.probs[1] * cfg.quit_reward +
               p.probs[0] * (success[s] * hit + (1.0 - success[s]) * miss);
    };
    return enumerate(0, cfg.horizon);
}

}  // namespace pamdp
