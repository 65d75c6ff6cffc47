#pragma once

// Policy tables for exact evaluation of learned policies on the toy chain.

#include "pamdp/envs/toy.hpp"
#include "pamdp/policies.hpp"

#include <cmath>
#include <vector>

namespace pamdp {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// a ~ pi^d(. | s), x = tanh(u) with u ~ N(mu(s, onehot(a)), sigma): the law PATRPO optimizes.
inline std::vector<ToyStatePolicy> toy_table_stochastic(const ToyPamdp& toy, const HierarchicalPolicy& pi) {
    std::vector<ToyStatePolicy> table(toy.num_states());
    const double sigma = std::exp(std::clamp(pi.log_std_values()[0], kLogStdMin, kLogStdMax));
    for (std::size_t s = 0; s < toy.num_states(); ++s) {
        const auto state = one_hot(toy.num_states(), s);
        const auto p = pi.probs(state);
        table[s].probs = {p[0], p[1]};
        const double mu = pi.mean(state, one_hot(2, 0))[0];
        table[s].param_interval_mass = [mu, sigma](double lo, double hi) {
            auto cdf = [&](double x) {
                if (x >= 1.0) return 1.0;
                if (x <= -1.0) return 0.0;
                return normal_cdf((std::atanh(x) - mu) / sigma);
            };
            return cdf(hi) - cdf(lo);
        };
    }
    return table;
}

/// The Gumbel-driven policy without exploration noise: a = argmax(g + ln p) and
/// x = tanh(mu(s, gumbel_softmax(ln p, g, t))). With two actions only
/// g0 - g1 ~ Logistic(0, 1) matters; conditional on a = 0 its CDF value is
/// uniform above F(ln p1 - ln p0), which is integrated with Gauss-Legendre atoms.
inline std::vector<ToyStatePolicy> toy_table_gumbel(const ToyPamdp& toy, const HierarchicalPolicy& pi,
                                                    double temperature, std::size_t nodes = 64) {
    std::vector<ToyStatePolicy> table(toy.num_states());
    const auto [xs, ws] = gauss_legendre(nodes);
    for (std::size_t s = 0; s < toy.num_states(); ++s) {
        const auto state = one_hot(toy.num_states(), s);
        const auto p = pi.probs(state);
        table[s].probs = {p[0], p[1]};
        const double lp0 = std::log(p[0]);
        const double lp1 = std::log(p[1]);
        const double f_c = 1.0 / (1.0 + std::exp(-(lp1 - lp0)));
        for (std::size_t k = 0; k < nodes; ++k) {
            const double v = f_c + (1.0 - f_c) * 0.5 * (xs[k] + 1.0);
            const double diff = std::log(v) - std::log1p(-v);
            const double soft0 = 1.0 / (1.0 + std::exp(-(lp0 + diff - lp1) / temperature));
            const double x = std::tanh(pi.mean(state, std::vector<double>{soft0, 1.0 - soft0})[0]);
            table[s].param_atoms.emplace_back(x, 0.5 * ws[k]);
        }
    }
    return table;
}

/// Deterministic (argmax action, squashed mean) policy.
inline std::vector<ToyStatePolicy> toy_table_greedy(const ToyPamdp& toy, const HierarchicalPolicy& pi) {
    std::vector<ToyStatePolicy> table(toy.num_states());
    Rng unused(0);
    for (std::size_t s = 0; s < toy.num_states(); ++s) {
        const auto r = pi.act(one_hot(toy.num_states(), s), unused, ActMode::Greedy);
        table[s].probs = r.action.discrete == 0 ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
        table[s].param_atoms = {{std::tanh(pi.mean(one_hot(toy.num_states(), s), one_hot(2, 0))[0]), 1.0}};
    }
    return table;
}

/// Deterministic flat-actor policy.
inline std::vector<ToyStatePolicy> toy_table_paddpg(const ToyPamdp& toy, const PaddpgActor& actor) {
    std::vector<ToyStatePolicy> table(toy.num_states());
    for (std::size_t s = 0; s < toy.num_states(); ++s) {
        const auto out = actor.evaluate(one_hot(toy.num_states(), s));
        const auto a = actor.decode(out);
        table[s].probs = a.discrete == 0 ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
        const double x = std::clamp(out[actor.slice_offset(0)], -1.0, 1.0);
        table[s].param_atoms = {{x, 1.0}};
    }
    return table;
}

}  // namespace pamdp
