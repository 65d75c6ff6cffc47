#pragma once

#include "pamdp/distributions.hpp"
#include "pamdp/random.hpp"
#include "pamdp/types.hpp"

#include <algorithm>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pamdp {

/// Static description of a parameterized-action MDP.
struct PamdpSpec {
    std::size_t state_dim = 1;
    std::size_t discrete_actions = 1;
    std::vector<std::size_t> param_dims;           // m_a per discrete action
    std::vector<std::vector<Bounds>> param_bounds;  // [a][dim]
    std::size_t horizon = 1;
    double gamma = 0.99;

    std::size_t max_param_dim() const {
        return param_dims.empty() ? 0 : *std::max_element(param_dims.begin(), param_dims.end());
    }
    std::size_t total_param_dim() const {
        std::size_t n = 0;
        for (auto m : param_dims) n += m;
        return n;
    }

    void validate() const {
        if (state_dim == 0) throw std::invalid_argument("state_dim must be positive");
        if (discrete_actions == 0) throw std::invalid_argument("need at least one discrete action");
        if (param_dims.size() != discrete_actions || param_bounds.size() != discrete_actions) {
            throw std::invalid_argument("param_dims/param_bounds must have one entry per action");
        }
        for (std::size_t a = 0; a < discrete_actions; ++a) {
            if (param_bounds[a].size() != param_dims[a]) {
                throw std::invalid_argument("bounds count does not match m_a for action " +
                                            std::to_string(a));
            }
            for (const auto& b : param_bounds[a]) {
                if (!std::isfinite(b.low) || !std::isfinite(b.high) || !(b.low < b.high)) {
                    throw std::invalid_argument("parameter bounds must be finite with low < high");
                }
            }
        }
        if (horizon == 0) throw std::invalid_argument("horizon must be positive");
        if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0, 1)");
    }
};

struct Transition {
    std::vector<double> state;
    ParamAction action;
    double reward = 0.0;
    std::vector<double> next_state;
    bool terminal = false;
    std::optional<GumbelNoise> noise;  // recorded by Gumbel-driven behavior policies
    std::vector<double> action_repr;   // behavior-time action vector, when the learner needs one
    std::vector<double> soft_repr;     // behavior-time soft simplex ++ parameters, Gumbel-driven only
};

struct StepResult {
    std::vector<double> state;
    double reward = 0.0;
    bool terminal = false;
};

class EpisodeOver : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Episodic environment with parameterized actions.
class Environment {
public:
    virtual ~Environment() = default;

    virtual const PamdpSpec& spec() const = 0;
    virtual std::vector<double> reset(Rng& rng) = 0;
    virtual StepResult step(const ParamAction& action) = 0;
    virtual std::unique_ptr<Environment> clone() const = 0;
    virtual std::string name() const = 0;

    /// Number of parameter values that arrived out of bounds and were clamped.
    std::size_t clamp_count() const { return clamps_; }

protected:
    /// Validates the discrete index and parameter count; clamps values into bounds.
    ParamAction sanitize(const ParamAction& action) {
        const auto& s = spec();
        if (action.discrete >= s.discrete_actions) {
            throw std::out_of_range("discrete action " + std::to_string(action.discrete) +
                                    " out of range");
        }
        if (action.params.size() != s.param_dims[action.discrete]) {
            throw ShapeError("action " + std::to_string(action.discrete) + " expects " +
                             std::to_string(s.param_dims[action.discrete]) + " parameters, got " +
                             std::to_string(action.params.size()));
        }
        ParamAction out = action;
        for (std::size_t i = 0; i < out.params.size(); ++i) {
            const Bounds& b = s.param_bounds[action.discrete][i];
            if (std::isnan(out.params[i])) throw NonFiniteError("NaN action parameter");
            if (!b.contains(out.params[i])) {
                ++clamps_;
                out.params[i] = b.clamp(out.params[i]);
            }
        }
        return out;
    }

private:
    std::size_t clamps_ = 0;
};

}  // namespace pamdp
