#pragma once

// TRPO fixtures shared by the unit tests and the acceptance binary: tiny
// policies, toy batches and tape-free numeric evaluations of the surrogate and
// KL estimators.

#include "pamdp/envs/toy.hpp"
#include "pamdp/trpo.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace pamdp::fixture {

inline HierarchicalPolicyConfig tiny(std::vector<std::size_t> hidden = {3}, double head_scale = 1.0) {
    HierarchicalPolicyConfig cfg;
    cfg.discrete_hidden = hidden;
    cfg.param_hidden = hidden;
    cfg.head_scale = head_scale;
    return cfg;
}

inline RolloutBatch toy_batch(const HierarchicalPolicy& pi, std::size_t steps, std::uint64_t seed) {
    ToyPamdp toy;
    Rng rng(seed);
    RolloutBatch b = collect_rollouts(toy, pi, steps, 0.9, rng);
    normalize(b.advantages);
    return b;
}

/// Moves the policy away from its snapshot so Theta != Theta'.
inline void perturb(HierarchicalPolicy& pi, double scale, std::uint64_t seed) {
    Rng rng(seed);
    Vector theta = pi.params().flat();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += scale * rng.normal();
    pi.params().assign(theta);
}

// Independent numeric evaluations built only from the distribution closed forms
// and the policy's tape-free forward pass.

inline double numeric_surrogate(const HierarchicalPolicy& pi, const RolloutBatch& b) {
    double s = 0.0;
    for (std::size_t r = 0; r < b.size(); ++r) {
        const auto state = b.states.row_values(r);
        const std::size_t a = b.actions[r];
        std::vector<double> u(b.u.row_values(r).begin(),
                              b.u.row_values(r).begin() + static_cast<std::ptrdiff_t>(pi.spec().param_dims[a]));
        s += std::exp(pi.log_prob_u(state, a, u) - b.old_log_prob[r]) * b.advantages[r];
    }
    return s / static_cast<double>(b.size());
}

inline DiagGaussian old_gaussian(const RolloutBatch& b, std::size_t r, std::size_t a, std::size_t m) {
    DiagGaussian g;
    for (std::size_t c = 0; c < m; ++c) {
        g.mean.push_back(b.old_means[a](r, c));
        g.log_std.push_back(b.old_log_std[c]);
    }
    return g;
}

inline double numeric_kl(const HierarchicalPolicy& pi, const RolloutBatch& b, KlEstimator mode) {
    double s = 0.0;
    for (std::size_t r = 0; r < b.size(); ++r) {
        const auto state = b.states.row_values(r);
        const std::size_t a = b.actions[r];
        const Categorical old_c{{b.old_probs.row_values(r).begin(), b.old_probs.row_values(r).end()}};
        const Categorical new_c{pi.probs(state)};
        switch (mode) {
            case KlEstimator::SampledJoint: {
                std::vector<double> u(b.u.row_values(r).begin(),
                                      b.u.row_values(r).begin() + static_cast<std::ptrdiff_t>(pi.spec().param_dims[a]));
                const double d = pi.log_prob_u(state, a, u) - b.old_log_prob[r];
                s += std::exp(d) - 1.0 - d;
                break;
            }
            case KlEstimator::ChainRuleSampled: {
                const std::size_t m = pi.spec().param_dims[a];
                s += kl_categorical(old_c, new_c) + kl_diag_gaussian(old_gaussian(b, r, a, m), pi.conditional(state, a));
                break;
            }
            case KlEstimator::ChainRuleAnalytic: {
                s += kl_categorical(old_c, new_c);
                for (std::size_t k = 0; k < pi.num_actions(); ++k) {
                    const std::size_t m = pi.spec().param_dims[k];
                    s += old_c.probs[k] * kl_diag_gaussian(old_gaussian(b, r, k, m), pi.conditional(state, k));
                }
                break;
            }
        }
    }
    return s / static_cast<double>(b.size());
}

inline std::function<double(const Vector&)> at_theta(HierarchicalPolicy& pi, std::function<double()> f) {
    return [&pi, f](const Vector& theta) {
        const Vector saved = pi.params().flat();
        pi.params().assign(theta);
        const double v = f();
        pi.params().assign(saved);
        return v;
    };
}

inline Vector graph_gradient(const HierarchicalPolicy& pi, const RolloutBatch& b, const BatchObjective& f) {
    Vector grad;
    const std::vector<RolloutBatch> one{b};
    chunked_value(pi, one, f, &grad);
    return grad;
}

inline const BatchObjective kSurrogate = [](const HierarchicalPolicy& p, std::span<const Var> bound,
                                           const RolloutBatch& b) {
    return surrogate_loss(p, bound, b);
};

inline BatchObjective kl_objective(KlEstimator mode) {
    return [mode](const HierarchicalPolicy& p, std::span<const Var> bound, const RolloutBatch& b) {
        return estimate_kl(p, bound, b, mode);
    };
}

inline constexpr KlEstimator kAllModes[] = {KlEstimator::SampledJoint, KlEstimator::ChainRuleSampled,
                                            KlEstimator::ChainRuleAnalytic};

}  // namespace pamdp::fixture
