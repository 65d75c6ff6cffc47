#pragma once

#include "pamdp/svg0.hpp"

#include <algorithm>
#include <limits>
#include <vector>

namespace pamdp {

struct PaddpgConfig {
    CriticConfig actor{.hidden = {400, 300}, .hidden_activation = Activation::ReLU, .final_scale = 0.05};
    CriticConfig critic;
    double critic_lr = 1e-3;
    double actor_lr = 1e-5;
    std::size_t minibatch = 64;
    double target_tau = 0.001;
    double gamma = 0.99;
    double param_noise = 0.1;
    double epsilon_start = 1.0;
    double epsilon_end = 0.1;
    std::size_t epsilon_anneal_steps = 10'000;
    std::size_t replay_capacity = 10'000'000;
    std::size_t warmup = 10'000;
    std::size_t update_every = 1;

    void validate() const {
        if (minibatch == 0) throw std::invalid_argument("minibatch must be positive");
        if (!(target_tau > 0.0 && target_tau <= 1.0)) throw std::invalid_argument("target_tau must lie in (0, 1]");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in [0, 1)");
        if (update_every == 0) throw std::invalid_argument("update_every must be positive");
        if (critic_lr <= 0.0 || actor_lr <= 0.0) throw std::invalid_argument("learning rates must be positive");
        if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0)) {
            throw std::invalid_argument("epsilon must lie in [0, 1]");
        }
    }

    /// Linear anneal from epsilon_start to epsilon_end over the first anneal steps.
    double epsilon_at(std::size_t step) const {
        if (epsilon_anneal_steps == 0 || step >= epsilon_anneal_steps) return epsilon_end;
        const double f = static_cast<double>(step) / static_cast<double>(epsilon_anneal_steps);
        return epsilon_start + f * (epsilon_end - epsilon_start);
    }
};

/// Clamps every parameter slice of a batch of actor outputs into [-1, 1].
inline Tensor clamp_param_slices(Tensor out, std::size_t n) {
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row_values(r);
        for (std::size_t c = n; c < row.size(); ++c) row[c] = std::clamp(row[c], -1.0, 1.0);
    }
    return out;
}

/// Applies the invert-gradient rule to the parameter columns of an N x out
/// ascent-gradient batch; action-value columns pass through. Outputs beyond
/// the unit box are evaluated at their clamped value.
inline Tensor invert_param_gradients(const Tensor& grad, const Tensor& outputs, std::size_t n) {
    Tensor out = grad;
    const std::size_t m = grad.cols() - n;
    const std::vector<Bounds> unit(m, Bounds{-1.0, 1.0});
    for (std::size_t r = 0; r < grad.rows(); ++r) {
        std::vector<double> p(m);
        for (std::size_t c = 0; c < m; ++c) p[c] = std::clamp(outputs(r, n + c), -1.0, 1.0);
        const auto g = grad.row_values(r).subspan(n);
        const auto inv = invert_gradient(g, p, unit);
        std::copy(inv.begin(), inv.end(), out.row_values(r).begin() + static_cast<std::ptrdiff_t>(n));
    }
    return out;
}

/// Actor step: descend sum(out * -G') / N, where G' is the critic's input
/// gradient with parameter columns inverted. The critic is read only.
/// Returns mean Q at the pre-step outputs.
inline double paddpg_actor_step(PaddpgActor& actor, const QCritic& critic, const Tensor& states, double lr,
                                AdamState& adam) {
    const std::size_t n = actor.spec().discrete_actions;
    const Tensor raw = actor.evaluate_batch(states);
    Tensor ascent;
    double mean_q = 0.0;
    {
        Graph g;
        auto cb = bind(g, critic.params());
        Var a = g.leaf(clamp_param_slices(raw, n));
        Var q = critic.q(cb, g.leaf(states), a);
        mean_q = q.value().mat().mean();
        ascent = g.gradients(ad::sum_all(q), std::vector<Var>{a})[0].value();
    }
    Tensor weights = invert_param_gradients(ascent, raw, n);
    weights.mat() *= -1.0 / static_cast<double>(states.rows());

    Graph g;
    auto ab = bind(g, actor.params());
    Var loss = ad::sum_all(ad::mul_const(actor.forward(ab, g.leaf(states)), std::move(weights)));
    Vector theta = actor.params().flat();
    adam_step(theta, flat_gradient(loss, ab), adam, lr);
    actor.params().assign(theta);
    return mean_q;
}

struct PaddpgLosses {
    double critic_loss = 0.0;
    double mean_q = 0.0;
};

/// Critic TD step on (state ++ output vector), then an actor step along the
/// inverted critic input-gradient, then target soft updates.
inline PaddpgLosses paddpg_update(PaddpgActor& actor, QCritic& critic, PaddpgActor& target_actor,
                                  QCritic& target_critic, const std::vector<const Transition*>& batch,
                                  const PaddpgConfig& cfg, AdamState& actor_adam, AdamState& critic_adam) {
    const std::size_t n = actor.spec().discrete_actions;
    const Tensor states = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& { return t.state; });
    const Tensor next_states = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& {
        return t.next_state;
    });
    const Tensor actions = stack_rows(batch, [](const Transition& t) -> const std::vector<double>& {
        return t.action_repr;
    });

    PaddpgLosses out;
    const Tensor next_out = clamp_param_slices(target_actor.evaluate_batch(next_states), n);
    const Tensor y = td_targets(batch, target_critic, next_out, cfg.gamma);
    out.critic_loss = regress_critic(critic, critic_adam, states, actions, y, cfg.critic_lr);

    out.mean_q = paddpg_actor_step(actor, critic, states, cfg.actor_lr, actor_adam);

    target_critic.params().soft_update(critic.params(), cfg.target_tau);
    target_actor.params().soft_update(actor.params(), cfg.target_tau);
    return out;
}

class PaddpgAgent {
public:
    PaddpgAgent(const PamdpSpec& spec, const PaddpgConfig& cfg, Rng& rng)
        : cfg_(cfg), actor_(spec, cfg.actor, rng), critic_(spec.state_dim, actor_.output_dim(), cfg.critic, rng),
          target_actor_(actor_), target_critic_(critic_), replay_(cfg.replay_capacity) {
        cfg_.validate();
    }

    const PaddpgConfig& config() const { return cfg_; }
    PaddpgActor& actor() { return actor_; }
    const PaddpgActor& actor() const { return actor_; }
    QCritic& critic() { return critic_; }
    const ReplayBuffer& replay() const { return replay_; }
    std::size_t updates() const { return updates_; }
    std::size_t env_steps() const { return env_steps_; }

    OffPolicyEpoch train_epoch(Environment& env, std::size_t steps, Rng& rng) {
        OffPolicyEpoch out;
        RunningMean critic_loss, mean_q;
        double returns_sum = 0.0;
        if (obs_.empty()) obs_ = env.reset(rng);
        for (std::size_t t = 0; t < steps; ++t) {
            const PaddpgAct act =
                actor_.act(obs_, rng, PaddpgExploration{cfg_.epsilon_at(env_steps_), cfg_.param_noise});
            const StepResult step = env.step(act.action);
            Transition tr;
            tr.state = obs_;
            tr.action = act.action;
            tr.reward = step.reward;
            tr.next_state = step.state;
            tr.terminal = step.terminal;
            tr.action_repr = act.output;
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
                const auto l = paddpg_update(actor_, critic_, target_actor_, target_critic_,
                                             replay_.sample(cfg_.minibatch, rng), cfg_, actor_adam_, critic_adam_);
                critic_loss.add(l.critic_loss);
                mean_q.add(l.mean_q);
                ++updates_;
            }
        }
        out.env_steps = env_steps_;
        out.updates = updates_;
        if (out.episodes) out.mean_return = returns_sum / static_cast<double>(out.episodes);
        out.critic_loss = critic_loss.value();
        out.mean_q = mean_q.value();
        out.actor_objective = out.mean_q;  // Q at the actor's own (clamped) outputs
        return out;
    }

private:
    PaddpgConfig cfg_;
    PaddpgActor actor_;
    QCritic critic_;
    PaddpgActor target_actor_;
    QCritic target_critic_;
    ReplayBuffer replay_;
    AdamState actor_adam_;
    AdamState critic_adam_;
    std::vector<double> obs_;
    double episode_return_ = 0.0;
    std::size_t env_steps_ = 0;
    std::size_t updates_ = 0;
};

}  // namespace pamdp
