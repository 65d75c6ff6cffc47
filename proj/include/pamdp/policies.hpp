#pragma once

#include "pamdp/diffcore/mlp.hpp"
#include "pamdp/distributions.hpp"
#include "pamdp/envs/pamdp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace pamdp {

inline Tensor state_row(std::span<const double> s) { return Tensor::row(s); }

inline std::vector<double> one_hot(std::size_t n, std::size_t i) {
    std::vector<double> v(n, 0.0);
    v.at(i) = 1.0;
    return v;
}

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct HierarchicalPolicyConfig {
    std::vector<std::size_t> discrete_hidden{200, 100, 50};
    std::vector<std::size_t> param_hidden{200, 100, 50};
    Activation hidden_activation = Activation::Tanh;
    double init_log_std = -1.0;
    double head_scale = 1e-2;  // output layers start near zero: uniform actions, centered params
};

enum class ActMode { Stochastic, GumbelRecorded, Greedy };

struct ActOptions {
    double param_noise = 0.1;   // GumbelRecorded exploration std, as a fraction of each range
    double temperature = 1.0;   // Gumbel-Softmax temperature for the parameter-head input
    const GumbelNoise* replay_noise = nullptr;  // reuse recorded noise instead of drawing
};

struct ActResult {
    ParamAction action;
    std::vector<double> probs;        // discrete policy at the state
    std::vector<double> action_repr;  // what the parameter head saw: one-hot or soft simplex
    std::vector<double> pre_squash;   // Stochastic: u for the chosen action's m_a dims
    std::vector<double> unit_params;  // all m_max parameters in (-1, 1) as executed
    std::optional<GumbelNoise> noise;
};

/// pi(a, x | s) = pi^d(a | s) pi^c(x | a, s).
///
/// Parameter layout Theta = [theta_a, theta_x, log_std]: the discrete MLP
/// (state -> n logits), the parameter MLP ((state ++ action representation) ->
/// m_max pre-squash means), then a free 1 x m_max log standard deviation.
/// Action a uses the first m_a parameter outputs; the rest are ignored.
/// Parameters are tanh(u) mapped affinely into each dimension's bounds.
class HierarchicalPolicy {
public:
    HierarchicalPolicy() = default;

    HierarchicalPolicy(const PamdpSpec& spec, const HierarchicalPolicyConfig& cfg, Rng& rng)
        : spec_(spec), cfg_(cfg) {
        spec_.validate();
        const std::size_t n = spec_.discrete_actions;
        m_max_ = std::max<std::size_t>(spec_.max_param_dim(), 1);
        discrete_ = Mlp({.input_dim = spec_.state_dim,
                         .hidden_sizes = cfg_.discrete_hidden,
                         .output_dim = n,
                         .hidden_activation = cfg_.hidden_activation},
                        params_, "pi_d", rng, cfg_.head_scale);
        discrete_tensors_ = params_.count();
        param_ = Mlp({.input_dim = spec_.state_dim + n,
                      .hidden_sizes = cfg_.param_hidden,
                      .output_dim = m_max_,
                      .hidden_activation = cfg_.hidden_activation},
                     params_, "pi_c", rng, cfg_.head_scale);
        log_std_index_ = params_.add("log_std", Tensor(1, m_max_, cfg_.init_log_std));
    }

    const PamdpSpec& spec() const { return spec_; }
    const HierarchicalPolicyConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    std::size_t num_actions() const { return spec_.discrete_actions; }
    std::size_t param_outputs() const { return m_max_; }
    /// Number of scalars in theta_a; theta_x and log_std follow.
    std::size_t discrete_param_count() const { return params_.offset(discrete_tensors_); }

    // ---- graph builders; `bound` is bind(g, params()) ----

    Var logits(std::span<const Var> bound, Var states) const { return discrete_.forward(bound, states); }
    Var log_probs(std::span<const Var> bound, Var states) const {
        return ad::log_softmax(logits(bound, states));
    }
    /// Pre-squash means, N x m_max.
    Var means(std::span<const Var> bound, Var states, Var action_repr) const {
        return param_.forward(bound, ad::concat_cols(states, action_repr));
    }
    /// Clamped log std, 1 x m_max.
    Var log_std(std::span<const Var> bound) const {
        return ad::clamp(bound[log_std_index_], kLogStdMin, kLogStdMax);
    }

    // ---- numeric evaluation ----

    std::vector<double> probs(std::span<const double> state) const {
        return Categorical::from_logits(discrete_.evaluate(params_, state_row(state)).vec()).probs;
    }
    std::vector<double> mean(std::span<const double> state, std::span<const double> action_repr) const {
        std::vector<double> in(state.begin(), state.end());
        in.insert(in.end(), action_repr.begin(), action_repr.end());
        return param_.evaluate(params_, Tensor::row(in)).vec();
    }
    std::vector<double> log_std_values() const { return params_.tensor(log_std_index_).vec(); }

    /// Batched logits, N x n.
    Tensor logits_batch(const Tensor& states) const { return discrete_.evaluate(params_, states); }
    /// Batched pre-squash means, N x m_max.
    Tensor means_batch(const Tensor& states, const Tensor& action_repr) const {
        RowMatrix in(states.rows(), states.cols() + action_repr.cols());
        in << states.mat(), action_repr.mat();
        return param_.evaluate(params_, Tensor(in));
    }

    /// Pre-squash Gaussian of action a at a state (first m_a dimensions).
    DiagGaussian conditional(std::span<const double> state, std::size_t a) const {
        const auto mu = mean(state, one_hot(num_actions(), a));
        const auto ls = log_std_values();
        const std::size_t m = spec_.param_dims[a];
        return DiagGaussian{{mu.begin(), mu.begin() + static_cast<std::ptrdiff_t>(m)},
                            {ls.begin(), ls.begin() + static_cast<std::ptrdiff_t>(m)}};
    }

    /// Maps unit-space parameters (all m_max) to the environment action for a.
    ParamAction to_action(std::size_t a, std::span<const double> unit) const {
        ParamAction out{a, {}};
        for (std::size_t i = 0; i < spec_.param_dims[a]; ++i) {
            const Bounds& b = spec_.param_bounds[a][i];
            out.params.push_back(b.clamp(b.from_unit(unit[i])));
        }
        return out;
    }

    ActResult act(std::span<const double> state, Rng& rng, ActMode mode,
                  const ActOptions& opts = {}) const {
        ActResult r;
        const std::size_t n = num_actions();
        const auto raw_logits = discrete_.evaluate(params_, state_row(state)).vec();
        const auto cat = Categorical::from_logits(raw_logits);
        r.probs = cat.probs;
        std::size_t a = 0;
        switch (mode) {
            case ActMode::Stochastic: {
                a = categorical_sample(r.probs, rng);
                r.action_repr = one_hot(n, a);
                const auto mu = mean(state, r.action_repr);
                const auto ls = log_std_values();
                r.unit_params.resize(m_max_);
                for (std::size_t i = 0; i < m_max_; ++i) {
                    const double u = mu[i] + std::exp(std::clamp(ls[i], kLogStdMin, kLogStdMax)) * rng.normal();
                    if (i < spec_.param_dims[a]) r.pre_squash.push_back(u);
                    r.unit_params[i] = std::tanh(u);
                }
                break;
            }
            case ActMode::GumbelRecorded: {
                GumbelNoise g = opts.replay_noise ? *opts.replay_noise : sample_gumbel(n, rng);
                const auto lp = cat.log_probs();
                a = gumbel_max_sample(lp, g);
                r.action_repr = gumbel_softmax(lp, g, opts.temperature);
                const auto mu = mean(state, r.action_repr);
                r.unit_params.resize(m_max_);
                for (std::size_t i = 0; i < m_max_; ++i) {
                    const double y = std::tanh(mu[i]) + 2.0 * opts.param_noise * rng.normal();
                    r.unit_params[i] = std::clamp(y, -1.0, 1.0);
                }
                r.noise = std::move(g);
                break;
            }
            case ActMode::Greedy: {
                a = argmax(r.probs);
                r.action_repr = one_hot(n, a);
                const auto mu = mean(state, r.action_repr);
                r.unit_params.resize(m_max_);
                for (std::size_t i = 0; i < m_max_; ++i) r.unit_params[i] = std::tanh(mu[i]);
                break;
            }
        }
        r.action = to_action(a, r.unit_params);
        return r;
    }

    /// Joint log-density of an executed action given its pre-squash values,
    /// in u-space (the tanh and affine Jacobians do not depend on Theta).
    double log_prob_u(std::span<const double> state, std::size_t a, std::span<const double> u) const {
        const auto p = probs(state);
        return std::log(p[a]) + conditional(state, a).log_prob(u);
    }

private:
    PamdpSpec spec_;
    HierarchicalPolicyConfig cfg_;
    ParamSet params_;
    Mlp discrete_;
    Mlp param_;
    std::size_t m_max_ = 1;
    std::size_t discrete_tensors_ = 0;
    std::size_t log_std_index_ = 0;
};

/// Per-row sum over the masked dims of the diagonal Gaussian log-density of `u`.
/// All arguments are N x m except `log_std` (1 x m); returns N x 1.
inline Var gaussian_log_prob(Var u, Var mean, Var log_std, const Tensor& mask) {
    const std::size_t rows = mean.rows();
    Var ls = ad::broadcast_rows(log_std, rows);
    Var z = ad::mul(ad::sub(u, mean), ad::exp(ad::neg(ls)));
    Var per_dim = ad::add_scalar(ad::sub(ad::scale(ad::square(z), -0.5), ls),
                                 -0.5 * std::log(2.0 * std::numbers::pi));
    return ad::row_sum(ad::mul_const(per_dim, mask));
}

/// KL(old || new) of diagonal Gaussians per row over masked dims, N x 1.
/// `old_mean` N x m and `old_log_std` 1 x m are constants.
inline Var gaussian_kl(const Tensor& old_mean, const Tensor& old_log_std, Var new_mean,
                       Var new_log_std, const Tensor& mask) {
    Graph& g = *new_mean.graph();
    const std::size_t rows = new_mean.rows();
    Var ls_new = ad::broadcast_rows(new_log_std, rows);
    Var ls_old = ad::broadcast_rows(g.leaf(old_log_std), rows);
    Var var_old = ad::exp(ad::scale(ls_old, 2.0));
    Var diff = ad::sub(g.leaf(old_mean), new_mean);
    Var num = ad::add(var_old, ad::square(diff));
    Var quotient = ad::mul(num, ad::exp(ad::scale(ls_new, -2.0)));
    Var per_dim = ad::add_scalar(ad::add(ad::sub(ls_new, ls_old), ad::scale(quotient, 0.5)), -0.5);
    return ad::row_sum(ad::mul_const(per_dim, mask));
}

/// KL(old || new) of categoricals per row, N x 1; `old_probs` is constant.
inline Var categorical_kl(const Tensor& old_probs, Var new_log_probs) {
    Tensor old_log = old_probs;
    for (double& v : old_log.values()) v = v > 0.0 ? std::log(v) : 0.0;
    Graph& g = *new_log_probs.graph();
    Var diff = ad::sub(g.leaf(old_log), new_log_probs);
    return ad::row_sum(ad::mul_const(diff, old_probs));
}

struct CriticConfig {
    std::vector<std::size_t> hidden{400, 300};
    Activation hidden_activation = Activation::ReLU;
    double final_scale = 0.05;
};

/// Q(s, action vector) for any fixed-width action representation.
class QCritic {
public:
    QCritic() = default;
    QCritic(std::size_t state_dim, std::size_t action_dim, const CriticConfig& cfg, Rng& rng)
        : state_dim_(state_dim), action_dim_(action_dim) {
        net_ = Mlp({.input_dim = state_dim + action_dim,
                    .hidden_sizes = cfg.hidden,
                    .output_dim = 1,
                    .hidden_activation = cfg.hidden_activation},
                   params_, "q", rng, cfg.final_scale);
    }

    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_dim() const { return action_dim_; }

    /// N x 1
    Var q(std::span<const Var> bound, Var states, Var actions) const {
        if (actions.cols() != action_dim_) throw ShapeError("QCritic: action width mismatch");
        return net_.forward(bound, ad::concat_cols(states, actions));
    }

    Tensor evaluate(const Tensor& states, const Tensor& actions) const {
        if (actions.cols() != action_dim_ || states.rows() != actions.rows()) {
            throw ShapeError("QCritic: input shape mismatch");
        }
        RowMatrix in(states.rows(), states.cols() + actions.cols());
        in << states.mat(), actions.mat();
        return net_.evaluate(params_, Tensor(in));
    }

private:
    std::size_t state_dim_ = 0;
    std::size_t action_dim_ = 0;
    ParamSet params_;
    Mlp net_;
};

/// V(s), regressed on empirical returns.
class VBaseline {
public:
    VBaseline() = default;
    VBaseline(std::size_t state_dim, const CriticConfig& cfg, Rng& rng) {
        net_ = Mlp({.input_dim = state_dim,
                    .hidden_sizes = cfg.hidden,
                    .output_dim = 1,
                    .hidden_activation = cfg.hidden_activation},
                   params_, "v", rng, cfg.final_scale);
    }

    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    Var value(std::span<const Var> bound, Var states) const { return net_.forward(bound, states); }
    Tensor evaluate(const Tensor& states) const { return net_.evaluate(params_, states); }

private:
    ParamSet params_;
    Mlp net_;
};

/// Hausknecht-Stone bounded-gradient rule. `grad` is an ascent direction; a
/// component pushing p up is scaled by (high - p)/(high - low), one pushing it
/// down by (p - low)/(high - low).
inline std::vector<double> invert_gradient(std::span<const double> grad, std::span<const double> params,
                                           std::span<const Bounds> bounds) {
    if (grad.size() != params.size() || params.size() != bounds.size()) {
        throw ShapeError("invert_gradient: size mismatch");
    }
    std::vector<double> out(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const Bounds& b = bounds[i];
        if (!b.contains(params[i])) throw std::domain_error("invert_gradient: parameter outside bounds");
        const double f = grad[i] > 0.0 ? (b.high - params[i]) / b.width() : (params[i] - b.low) / b.width();
        out[i] = grad[i] * f;
    }
    return out;
}

struct PaddpgExploration {
    double epsilon = 0.0;      // probability of a uniformly random output vector
    double param_noise = 0.1;  // Gaussian std on the chosen slice, fraction of range
};

struct PaddpgAct {
    ParamAction action;
    std::vector<double> output;  // n action values then all parameters in unit space; the critic's input
};

/// Flat actor: state -> (n action values, then sum_a m_a parameters grouped by
/// action). Parameters live in unit space [-1, 1] and are mapped to bounds on
/// execution. Outputs are linear; the invert-gradient rule keeps them bounded.
class PaddpgActor {
public:
    PaddpgActor() = default;
    PaddpgActor(const PamdpSpec& spec, const CriticConfig& cfg, Rng& rng) : spec_(spec) {
        spec_.validate();
        net_ = Mlp({.input_dim = spec_.state_dim,
                    .hidden_sizes = cfg.hidden,
                    .output_dim = output_dim(),
                    .hidden_activation = cfg.hidden_activation},
                   params_, "actor", rng, cfg.final_scale);
    }

    const PamdpSpec& spec() const { return spec_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    std::size_t output_dim() const { return spec_.discrete_actions + spec_.total_param_dim(); }

    /// Index of the first parameter output of action a.
    std::size_t slice_offset(std::size_t a) const {
        if (a >= spec_.discrete_actions) throw std::out_of_range("slice_offset: bad action");
        std::size_t off = spec_.discrete_actions;
        for (std::size_t b = 0; b < a; ++b) off += spec_.param_dims[b];
        return off;
    }

    Var forward(std::span<const Var> bound, Var states) const { return net_.forward(bound, states); }
    std::vector<double> evaluate(std::span<const double> state) const {
        return net_.evaluate(params_, state_row(state)).vec();
    }
    Tensor evaluate_batch(const Tensor& states) const { return net_.evaluate(params_, states); }

    ParamAction decode(std::span<const double> output) const {
        const std::size_t n = spec_.discrete_actions;
        const std::size_t a = argmax(output.first(n));
        ParamAction out{a, {}};
        const std::size_t off = slice_offset(a);
        for (std::size_t i = 0; i < spec_.param_dims[a]; ++i) {
            const Bounds& b = spec_.param_bounds[a][i];
            out.params.push_back(b.clamp(b.from_unit(std::clamp(output[off + i], -1.0, 1.0))));
        }
        return out;
    }

    PaddpgAct act(std::span<const double> state, Rng& rng, const PaddpgExploration& ex) const {
        PaddpgAct r;
        const std::size_t n = spec_.discrete_actions;
        if (ex.epsilon > 0.0 && rng.uniform() < ex.epsilon) {
            r.output.resize(output_dim());
            for (double& v : r.output) v = rng.uniform(-1.0, 1.0);
        } else {
            r.output = evaluate(state);
            const std::size_t a = argmax(std::span<const double>(r.output).first(n));
            const std::size_t off = slice_offset(a);
            for (std::size_t i = 0; i < spec_.param_dims[a]; ++i) {
                r.output[off + i] += 2.0 * ex.param_noise * rng.normal();
            }
            for (std::size_t i = n; i < r.output.size(); ++i) r.output[i] = std::clamp(r.output[i], -1.0, 1.0);
        }
        r.action = decode(r.output);
        return r;
    }

private:
    PamdpSpec spec_;
    ParamSet params_;
    Mlp net_;
};

}  // namespace pamdp
