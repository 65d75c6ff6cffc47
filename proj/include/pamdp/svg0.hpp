#pragma once

#include "pamdp/diffcore/adam.hpp"
#include "pamdp/envs/pamdp.hpp"
#include "pamdp/policies.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_set>
#include <vector>

namespace pamdp {

/// FIFO ring of transitions.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 10'000'000) : capacity_(capacity) {
        if (capacity_ == 0) throw std::invalid_argument("replay capacity must be positive");
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return data_.size(); }
    std::size_t total_pushed() const { return pushed_; }

    void push(Transition t) {
        if (data_.size() < capacity_) {
            data_.push_back(std::move(t));
        } else {
            data_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
        ++pushed_;
    }

    /// i = 0 is the oldest stored transition.
    const Transition& at(std::size_t i) const { return data_.at((head_ + i) % data_.size()); }

    /// k distinct indices (relative to the oldest), uniformly at random.
    std::vector<std::size_t> sample_indices(std::size_t k, Rng& rng) const {
        if (k > size()) throw std::invalid_argument("minibatch larger than replay contents");
        std::vector<std::size_t> out;
        out.reserve(k);
        // Floyd's algorithm: distinct without materializing a permutation.
        std::unordered_set<std::size_t> chosen;
        for (std::size_t j = size() - k; j < size(); ++j) {
            const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
            const std::size_t pick = chosen.contains(t) ? j : t;
            chosen.insert(pick);
            out.push_back(pick);
        }
        return out;
    }

    std::vector<const Transition*> sample(std::size_t k, Rng& rng) const {
        std::vector<const Transition*> out;
        for (std::size_t i : sample_indices(k, rng)) out.push_back(&at(i));
        return out;
    }

private:
    std::size_t capacity_;
    std::vector<Transition> data_;
    std::size_t head_ = 0;
    std::size_t pushed_ = 0;
};

enum class NoiseMode { Recorded, Fresh };

struct Svg0Config {
    HierarchicalPolicyConfig policy{.discrete_hidden = {400, 300},
                                    .param_hidden = {400, 300},
                                    .hidden_activation = Activation::ReLU,
                                    .init_log_std = -1.0,
                                    .head_scale = 1e-2};
    CriticConfig critic;
    double critic_lr = 1e-3;
    double actor_lr = 1e-5;
    double temperature = 1.0;
    std::size_t minibatch = 64;
    double target_tau = 0.001;
    bool use_targets = true;
    double gamma = 0.99;
    double param_noise = 0.1;  // fraction of each parameter range
    NoiseMode noise_mode = NoiseMode::Recorded;
    std::size_t replay_capacity = 10'000'000;
    std::size_t warmup = 10'000;
    std::size_t update_every = 1;  // environment steps per gradient update
    bool critic_soft_inputs = true;  // also regress Q at the behavior-time soft simplex

    void validate() const {
        if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
        if (minibatch == 0) throw std::invalid_argument("minibatch must be positive");
        if (!(target_tau > 0.0 && target_tau <= 1.0)) throw std::invalid_argument("target_tau must lie in (0, 1]");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
        if (update_every == 0) throw std::invalid_argument("update_every must be positive");
        if (critic_lr <= 0.0 || actor_lr <= 0.0) throw std::invalid_argument("learning rates must be positive");
        if (param_noise < 0.0) throw std::invalid_argument("param_noise must be nonnegative");
    }
};

/// Stacks rows of equal-width vectors.
inline Tensor stack_rows(const std::vector<const Transition*>& batch,
                         const std::function<const std::vector<double>&(const Transition&)>& field) {
    const std::size_t cols = field(*batch.front()).size();
    Tensor out(batch.size(), cols);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const auto& v = field(*batch[r]);
        if (v.size() != cols) throw ShapeError("stack_rows: ragged transition field");
        std::copy(v.begin(), v.end(), out.row_values(r).begin());
    }
    return out;
}

/// Critic input for an executed action: onehot(a) ++ unit-space parameters.
inline std::vector<double> hard_action_repr(std::size_t n, std::size_t a, std::span<const double> unit_params) {
    auto v = one_hot(n, a);
    v.insert(v.end(), unit_params.begin(), unit_params.end());
    return v;
}

/// Greedy target actions: onehot(argmax pi^d(s)) ++ tanh(mu(s, onehot)), N x (n + m_max).
inline Tensor greedy_action_batch(const HierarchicalPolicy& pi, const Tensor& states) {
    const std::size_t n = pi.num_actions();
    const Tensor logits = pi.logits_batch(states);
    Tensor onehot(states.rows(), n);
    for (std::size_t r = 0; r < states.rows(); ++r) onehot(r, argmax(logits.row_values(r))) = 1.0;
    const Tensor mu = pi.means_batch(states, onehot);
    Tensor out(states.rows(), n + mu.cols());
    for (std::size_t r = 0; r < states.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) out(r, c) = onehot(r, c);
        for (std::size_t c = 0; c < mu.cols(); ++c) out(r, n + c) = std::tanh(mu(r, c));
    }
    return out;
}

/// r + gamma (1 - terminal) Q_target(s', a'), N x 1.
inline Tensor td_targets(const std::vector<const Transition*>& batch, const QCritic& target_critic,
                         const Tensor& next_actions, double gamma) {
    const Tensor next_states = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& {
        return t.next_state;
    });
    const Tensor q_next = target_critic.evaluate(next_states, next_actions);
    Tensor y(batch.size(), 1);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        y[r] = batch[r]->reward + (batch[r]->terminal ? 0.0 : gamma * q_next[r]);
    }
    if (!y.all_finite()) throw NonFiniteError("non-finite TD target");
    return y;
}

/// One Adam step on mean (Q(s, action) - y)^2; returns the loss before the step.
inline double regress_critic(QCritic& critic, AdamState& adam, const Tensor& states, const Tensor& actions,
                             const Tensor& targets, double lr) {
    Graph g;
    auto bound = bind(g, critic.params());
    Var err = ad::sub(critic.q(bound, g.leaf(states), g.leaf(actions)), g.leaf(targets));
    Var loss = ad::mean_all(ad::square(err));
    Vector theta = critic.params().flat();
    adam_step(theta, flat_gradient(loss, bound), adam, lr);
    critic.params().assign(theta);
    return loss.value().item();
}

/// TD step for the hierarchical critic. Target actions come from the target
/// policy in greedy one-hot form.
inline double critic_update(QCritic& critic, const QCritic& target_critic, const HierarchicalPolicy& target_policy,
                            const std::vector<const Transition*>& batch, const Svg0Config& cfg, AdamState& adam) {
    const Tensor states = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& { return t.state; });
    const Tensor next_states = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& {
        return t.next_state;
    });
    const Tensor y = td_targets(batch, target_critic, greedy_action_batch(target_policy, next_states), cfg.gamma);
    const Tensor hard = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& { return t.action_repr; });
    if (!cfg.critic_soft_inputs) return regress_critic(critic, adam, states, hard, y, cfg.critic_lr);

    // Rows with recorded soft inputs enter twice: once hard, once soft.
    std::vector<std::size_t> soft_rows;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        if (!batch[r]->soft_repr.empty()) soft_rows.push_back(r);
    }
    Tensor s2(batch.size() + soft_rows.size(), states.cols());
    Tensor a2(batch.size() + soft_rows.size(), hard.cols());
    Tensor y2(batch.size() + soft_rows.size(), 1);
    s2.mat().topRows(static_cast<Eigen::Index>(batch.size())) = states.mat();
    a2.mat().topRows(static_cast<Eigen::Index>(batch.size())) = hard.mat();
    y2.mat().topRows(static_cast<Eigen::Index>(batch.size())) = y.mat();
    for (std::size_t k = 0; k < soft_rows.size(); ++k) {
        const std::size_t r = soft_rows[k];
        const std::size_t row = batch.size() + k;
        std::copy(batch[r]->state.begin(), batch[r]->state.end(), s2.row_values(row).begin());
        std::copy(batch[r]->soft_repr.begin(), batch[r]->soft_repr.end(), a2.row_values(row).begin());
        y2[row] = y[r];
    }
    return regress_critic(critic, adam, s2, a2, y2, cfg.critic_lr);
}

/// Mean over the batch of Q(s, f(s, eta), pi_x(s, f(s, eta))) on a tape, with
/// f = Gumbel-Softmax of the discrete head. `noise` is N x n.
inline Var reparam_objective(const HierarchicalPolicy& pi, std::span<const Var> policy_bound, const QCritic& critic,
                             std::span<const Var> critic_bound, Var states, const Tensor& noise, double temperature) {
    Var soft = ad::gumbel_softmax(pi.log_probs(policy_bound, states), noise, temperature);
    Var x = ad::tanh(pi.means(policy_bound, states, soft));
    return ad::mean_all(critic.q(critic_bound, states, ad::concat_cols(soft, x)));
}

/// Gradient ascent step on the reparameterized objective. The critic is read,
/// never written. Returns the objective before the step.
inline double actor_update(HierarchicalPolicy& pi, const QCritic& critic, const std::vector<const Transition*>& batch,
                           const Svg0Config& cfg, AdamState& adam, NoiseMode mode, Rng& rng) {
    const std::size_t n = pi.num_actions();
    const Tensor states = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& { return t.state; });
    Tensor noise(batch.size(), n);
    for (std::size_t r = 0; r < batch.size(); ++r) {
        if (mode == NoiseMode::Recorded) {
            if (!batch[r]->noise) throw std::invalid_argument("recorded-noise update on a transition without noise");
            if (batch[r]->noise->g.size() != n) throw ShapeError("recorded noise has the wrong width");
            std::copy(batch[r]->noise->g.begin(), batch[r]->noise->g.end(), noise.row_values(r).begin());
        } else {
            const auto g = sample_gumbel(n, rng);
            std::copy(g.g.begin(), g.g.end(), noise.row_values(r).begin());
        }
    }
    Graph g;
    auto pb = bind(g, pi.params());
    auto cb = bind(g, critic.params());
    Var obj = reparam_objective(pi, pb, critic, cb, g.leaf(states), noise, cfg.temperature);
    Vector theta = pi.params().flat();
    adam_step(theta, -flat_gradient(obj, pb), adam, cfg.actor_lr);
    pi.params().assign(theta);
    return obj.value().item();
}

struct ReparamCheck {
    Vector reparam_mean;
    Vector score_mean;
    Vector reparam_var;  // per-component sample variance of single-sample estimates
    Vector score_var;
};

/// Two Monte-Carlo estimators of d E[Q(a)] / d logits for a ~ softmax(logits):
/// the Gumbel-Softmax pathwise gradient of Q(soft) and the score-function
/// gradient Q(onehot(a)) d ln p(a) / d logits. `q` maps an N x n batch of
/// simplex points to N x 1 on the tape.
inline ReparamCheck reparam_gradient_check(std::span<const double> logits, double temperature,
                                           const std::function<Var(Var)>& q, std::size_t samples, Rng& rng) {
    const std::size_t n = logits.size();
    Tensor noise(samples, n);
    for (std::size_t r = 0; r < samples; ++r) {
        const auto g = sample_gumbel(n, rng);
        std::copy(g.g.begin(), g.g.end(), noise.row_values(r).begin());
    }
    Tensor z(samples, n);
    for (std::size_t r = 0; r < samples; ++r) std::copy(logits.begin(), logits.end(), z.row_values(r).begin());

    // Per-sample gradients: every row has its own copy of the logits.
    Graph g;
    Var zr = g.leaf(z);
    Var soft = ad::gumbel_softmax(ad::log_softmax(zr), noise, temperature);
    const Tensor reparam = g.gradients(ad::sum_all(q(soft)), std::vector<Var>{zr})[0].value();

    const auto lp = Categorical::from_logits(logits).log_probs();
    Tensor hard(samples, n);
    for (std::size_t r = 0; r < samples; ++r) {
        hard(r, gumbel_max_sample(lp, GumbelNoise{{noise.row_values(r).begin(), noise.row_values(r).end()}})) = 1.0;
    }
    Graph h;
    const Tensor qa = q(h.leaf(hard)).value();
    Var zs = h.leaf(z);
    Var logp = ad::row_sum(ad::mul_const(ad::log_softmax(zs), hard));
    const Tensor score = h.gradients(ad::sum_all(ad::mul_const(logp, qa)), std::vector<Var>{zs})[0].value();

    auto moments = [&](const Tensor& t, Vector& mean, Vector& var) {
        const auto m = t.mat();
        mean = m.colwise().mean().transpose();
        var = ((m.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(samples - 1))
                  .transpose();
    };
    ReparamCheck out;
    moments(reparam, out.reparam_mean, out.reparam_var);
    moments(score, out.score_mean, out.score_var);
    return out;
}

struct OffPolicyEpoch {
    std::size_t episodes = 0;
    double mean_return = std::numeric_limits<double>::quiet_NaN();
    std::size_t env_steps = 0;  // cumulative
    std::size_t updates = 0;    // cumulative
    double critic_loss = std::numeric_limits<double>::quiet_NaN();
    double mean_q = std::numeric_limits<double>::quiet_NaN();
    double actor_objective = std::numeric_limits<double>::quiet_NaN();
    std::size_t replay_mismatches = 0;  // recorded-noise replays that picked a different action
};

/// Accumulates per-epoch means of update statistics.
struct RunningMean {
    double sum = 0.0;
    std::size_t count = 0;
    void add(double v) {
        sum += v;
        ++count;
    }
    double value() const { return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN(); }
};

/// PASVG(0): acts with recorded Gumbel noise, learns Q by TD and the policy by
/// differentiating Q through the Gumbel-Softmax relaxation.
class Svg0Agent {
public:
    Svg0Agent(const PamdpSpec& spec, const Svg0Config& cfg, Rng& rng)
        : cfg_(cfg), policy_(spec, cfg.policy, rng),
          critic_(spec.state_dim, spec.discrete_actions + policy_.param_outputs(), cfg.critic, rng),
          target_policy_(policy_), target_critic_(critic_), replay_(cfg.replay_capacity) {
        cfg_.validate();
    }

    const Svg0Config& config() const { return cfg_; }
    HierarchicalPolicy& policy() { return policy_; }
    const HierarchicalPolicy& policy() const { return policy_; }
    QCritic& critic() { return critic_; }
    const ReplayBuffer& replay() const { return replay_; }
    std::size_t updates() const { return updates_; }
    std::size_t env_steps() const { return env_steps_; }

    ActOptions act_options() const {
        ActOptions o;
        o.param_noise = cfg_.param_noise;
        o.temperature = cfg_.temperature;
        return o;
    }

    /// Runs `steps` environment steps, continuing the current episode across
    /// calls, with gradient updates interleaved after warmup.
    OffPolicyEpoch train_epoch(Environment& env, std::size_t steps, Rng& rng) {
        OffPolicyEpoch out;
        RunningMean critic_loss, actor_obj;
        double returns_sum = 0.0;
        const std::size_t n = env.spec().discrete_actions;
        if (obs_.empty()) obs_ = env.reset(rng);
        for (std::size_t t = 0; t < steps; ++t) {
            const ActResult r = policy_.act(obs_, rng, ActMode::GumbelRecorded, act_options());

            // Audit: the recorded noise must reproduce the executed action.
            ActOptions replay = act_options();
            replay.replay_noise = &*r.noise;
            Rng scratch(0);
            if (policy_.act(obs_, scratch, ActMode::GumbelRecorded, replay).action.discrete != r.action.discrete) {
                ++out.replay_mismatches;
            }

            const StepResult step = env.step(r.action);
            Transition tr;
            tr.state = obs_;
            tr.action = r.action;
            tr.reward = step.reward;
            tr.next_state = step.state;
            tr.terminal = step.terminal;
            tr.noise = r.noise;
            tr.action_repr = hard_action_repr(n, r.action.discrete, r.unit_params);
            tr.soft_repr = r.action_repr;
            tr.soft_repr.insert(tr.soft_repr.end(), r.unit_params.begin(), r.unit_params.end());
            replay_.push(std::move(tr));
            ++env_steps_;
            episode_return_ += step.reward;
            if (step.terminal) {
                returns_sum += episode_return_;
                ++out.episodes;
                episode_return_ = 0.0;
                obs_ = env.reset(rng);
            } else {
                obs_ = step.state;
            }

            if (replay_.size() >= std::max(cfg_.warmup, cfg_.minibatch) && env_steps_ % cfg_.update_every == 0) {
                const auto batch = replay_.sample(cfg_.minibatch, rng);
                critic_loss.add(critic_update(critic_, cfg_.use_targets ? target_critic_ : critic_,
                                              cfg_.use_targets ? target_policy_ : policy_, batch, cfg_, critic_adam_));
                actor_obj.add(actor_update(policy_, critic_, batch, cfg_, actor_adam_, cfg_.noise_mode, rng));
                if (cfg_.use_targets) {
                    target_critic_.params().soft_update(critic_.params(), cfg_.target_tau);
                    target_policy_.params().soft_update(policy_.params(), cfg_.target_tau);
                }
                ++updates_;
            }
        }
        out.env_steps = env_steps_;
        out.updates = updates_;
        if (out.episodes) out.mean_return = returns_sum / static_cast<double>(out.episodes);
        out.critic_loss = critic_loss.value();
        out.actor_objective = actor_obj.value();
        out.mean_q = out.actor_objective;
        return out;
    }

private:
    Svg0Config cfg_;
    HierarchicalPolicy policy_;
    QCritic critic_;
    HierarchicalPolicy target_policy_;
    QCritic target_critic_;
    ReplayBuffer replay_;
    AdamState critic_adam_;
    AdamState actor_adam_;
    std::vector<double> obs_;
    double episode_return_ = 0.0;
    std::size_t env_steps_ = 0;
    std::size_t updates_ = 0;
};

}  // namespace pamdp
