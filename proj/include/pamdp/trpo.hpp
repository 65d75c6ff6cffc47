#pragma once

#include "pamdp/diffcore/adam.hpp"
#include "pamdp/envs/pamdp.hpp"
#include "pamdp/policies.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pamdp {

enum class KlEstimator { SampledJoint, ChainRuleSampled, ChainRuleAnalytic };

inline std::string to_string(KlEstimator k) {
    switch (k) {
        case KlEstimator::SampledJoint: return "sampled_joint";
        case KlEstimator::ChainRuleSampled: return "chain_rule_sampled";
        case KlEstimator::ChainRuleAnalytic: return "chain_rule_analytic";
    }
    return "?";
}

inline KlEstimator kl_estimator_from_string(const std::string& s) {
    if (s == "sampled_joint") return KlEstimator::SampledJoint;
    if (s == "chain_rule_sampled") return KlEstimator::ChainRuleSampled;
    if (s == "chain_rule_analytic") return KlEstimator::ChainRuleAnalytic;
    throw std::invalid_argument("unknown kl estimator '" + s + "'");
}

struct TrustRegionConfig {
    double delta = 0.005;
    std::size_t cg_iters = 10;
    double cg_damping = 0.1;
    double backtrack_ratio = 0.8;
    std::size_t max_backtracks = 10;
    KlEstimator kl_estimator = KlEstimator::ChainRuleAnalytic;
    double gamma = 0.99;
    std::size_t batch_size = 10000;
    std::size_t chunk_rows = 2500;  // rows per tape; bounds memory, results are exact
    std::size_t fvp_stride = 1;     // Fisher products use every k-th row of the batch
    double log_ratio_clamp = 20.0;

    void validate() const {
        if (!(delta > 0.0)) throw std::invalid_argument("trust region delta must be positive");
        if (cg_iters == 0) throw std::invalid_argument("cg_iters must be positive");
        if (cg_damping < 0.0) throw std::invalid_argument("cg_damping must be nonnegative");
        if (!(backtrack_ratio > 0.0 && backtrack_ratio < 1.0)) {
            throw std::invalid_argument("backtrack_ratio must lie in (0, 1)");
        }
        if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0, 1)");
        if (fvp_stride == 0) throw std::invalid_argument("fvp_stride must be positive");
        if (batch_size == 0 || chunk_rows == 0) throw std::invalid_argument("batch sizes must be positive");
    }
};

/// Transitions of complete episodes plus a frozen snapshot of the behavior policy.
struct RolloutBatch {
    Tensor states;                      // N x d
    std::vector<std::size_t> actions;   // N
    Tensor onehot;                      // N x n
    Tensor u;                           // N x m_max, pre-squash values (zero past m_a)
    Tensor mask;                        // N x m_max, 1 on the executed action's dims
    std::vector<double> returns;        // discounted return-to-go
    std::vector<double> advantages;

    Tensor old_probs;                   // N x n
    std::vector<Tensor> old_means;      // per discrete action, N x m_max
    Tensor old_log_std;                 // 1 x m_max
    std::vector<double> old_log_prob;   // ln pi_old(a, u | s)

    std::vector<double> episode_returns;  // undiscounted
    std::size_t steps_collected = 0;      // including the dropped trailing episode

    std::size_t size() const { return actions.size(); }

    /// Old means at the executed action, N x m_max.
    Tensor old_taken_means() const {
        Tensor out(size(), u.cols());
        for (std::size_t r = 0; r < size(); ++r) {
            for (std::size_t c = 0; c < u.cols(); ++c) out(r, c) = old_means[actions[r]](r, c);
        }
        return out;
    }

    /// Rows [begin, end) as a standalone batch (episode statistics are not copied).
    RolloutBatch rows(std::size_t begin, std::size_t end) const {
        auto slice = [&](const Tensor& t) {
            Tensor out(end - begin, t.cols());
            out.mat() = t.mat().middleRows(static_cast<Eigen::Index>(begin),
                                           static_cast<Eigen::Index>(end - begin));
            return out;
        };
        auto part = [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            return V(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end));
        };
        RolloutBatch b;
        b.states = slice(states);
        b.actions = part(actions);
        b.onehot = slice(onehot);
        b.u = slice(u);
        b.mask = slice(mask);
        b.returns = part(returns);
        b.advantages = part(advantages);
        b.old_probs = slice(old_probs);
        for (const auto& m : old_means) b.old_means.push_back(slice(m));
        b.old_log_std = old_log_std;
        b.old_log_prob = part(old_log_prob);
        return b;
    }

    /// Every k-th row, starting at row 0.
    RolloutBatch strided(std::size_t k) const {
        if (k <= 1) return rows(0, size());
        std::vector<Eigen::Index> idx;
        for (std::size_t r = 0; r < size(); r += k) idx.push_back(static_cast<Eigen::Index>(r));
        auto pick = [&](const Tensor& t) {
            Tensor out(idx.size(), t.cols());
            out.mat() = t.mat()(idx, Eigen::all);
            return out;
        };
        auto pick_vec = [&](const auto& v) {
            std::decay_t<decltype(v)> out;
            for (auto i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
            return out;
        };
        RolloutBatch b;
        b.states = pick(states);
        b.actions = pick_vec(actions);
        b.onehot = pick(onehot);
        b.u = pick(u);
        b.mask = pick(mask);
        b.returns = pick_vec(returns);
        b.advantages = pick_vec(advantages);
        b.old_probs = pick(old_probs);
        for (const auto& m : old_means) b.old_means.push_back(pick(m));
        b.old_log_std = old_log_std;
        b.old_log_prob = pick_vec(old_log_prob);
        return b;
    }

    std::vector<RolloutBatch> chunks(std::size_t rows_per_chunk) const {
        std::vector<RolloutBatch> out;
        for (std::size_t b = 0; b < size(); b += rows_per_chunk) {
            out.push_back(rows(b, std::min(size(), b + rows_per_chunk)));
        }
        return out;
    }
};

inline Tensor action_mask(const PamdpSpec& spec, std::size_t m_max, std::span<const std::size_t> actions) {
    Tensor mask(actions.size(), m_max);
    for (std::size_t r = 0; r < actions.size(); ++r) {
        for (std::size_t c = 0; c < spec.param_dims[actions[r]]; ++c) mask(r, c) = 1.0;
    }
    return mask;
}

/// Records the current policy as the behavior snapshot of `batch`.
inline void snapshot_behavior(const HierarchicalPolicy& pi, RolloutBatch& batch) {
    const std::size_t n = pi.num_actions();
    const std::size_t rows = batch.size();
    const Tensor logits = pi.logits_batch(batch.states);
    batch.old_probs = Tensor(rows, n);
    std::vector<double> log_pa(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto c = Categorical::from_logits(logits.row_values(r));
        for (std::size_t a = 0; a < n; ++a) batch.old_probs(r, a) = c.probs[a];
        log_pa[r] = std::log(c.probs[batch.actions[r]]);
    }
    batch.old_means.clear();
    for (std::size_t a = 0; a < n; ++a) {
        Tensor repr(rows, n);
        for (std::size_t r = 0; r < rows; ++r) repr(r, a) = 1.0;
        batch.old_means.push_back(pi.means_batch(batch.states, repr));
    }
    const auto ls = pi.log_std_values();
    batch.old_log_std = Tensor::row(ls);
    batch.old_log_prob.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t a = batch.actions[r];
        const std::size_t m = pi.spec().param_dims[a];
        DiagGaussian g;
        std::vector<double> u(m);
        for (std::size_t c = 0; c < m; ++c) {
            g.mean.push_back(batch.old_means[a](r, c));
            g.log_std.push_back(ls[c]);
            u[c] = batch.u(r, c);
        }
        batch.old_log_prob[r] = log_pa[r] + g.log_prob(u);
    }
}

/// Runs `steps` environment steps with fresh episodes under the stochastic
/// policy. Only complete episodes (terminal or horizon) enter the batch.
inline RolloutBatch collect_rollouts(Environment& env, const HierarchicalPolicy& pi, std::size_t steps,
                                     double gamma, Rng& rng) {
    const auto& spec = env.spec();
    const std::size_t n = spec.discrete_actions;
    const std::size_t m_max = pi.param_outputs();
    std::vector<double> states;
    std::vector<std::size_t> actions;
    std::vector<double> us;
    std::vector<double> rewards;
    std::vector<double> returns;
    RolloutBatch batch;

    std::vector<double> ep_states;
    std::vector<std::size_t> ep_actions;
    std::vector<double> ep_u;
    std::vector<double> ep_rewards;
    auto obs = env.reset(rng);
    for (std::size_t t = 0; t < steps; ++t) {
        const auto r = pi.act(obs, rng, ActMode::Stochastic);
        ep_states.insert(ep_states.end(), obs.begin(), obs.end());
        ep_actions.push_back(r.action.discrete);
        std::vector<double> u(m_max, 0.0);
        std::copy(r.pre_squash.begin(), r.pre_squash.end(), u.begin());
        ep_u.insert(ep_u.end(), u.begin(), u.end());
        const auto step = env.step(r.action);
        ep_rewards.push_back(step.reward);
        ++batch.steps_collected;
        obs = step.state;
        if (step.terminal) {
            std::vector<double> rtg(ep_rewards.size());
            double acc = 0.0;
            for (std::size_t k = ep_rewards.size(); k-- > 0;) rtg[k] = acc = ep_rewards[k] + gamma * acc;
            states.insert(states.end(), ep_states.begin(), ep_states.end());
            actions.insert(actions.end(), ep_actions.begin(), ep_actions.end());
            us.insert(us.end(), ep_u.begin(), ep_u.end());
            returns.insert(returns.end(), rtg.begin(), rtg.end());
            batch.episode_returns.push_back(std::accumulate(ep_rewards.begin(), ep_rewards.end(), 0.0));
            ep_states.clear();
            ep_actions.clear();
            ep_u.clear();
            ep_rewards.clear();
            obs = env.reset(rng);
        }
    }
    const std::size_t rows = actions.size();
    batch.states = Tensor(rows, spec.state_dim, states);
    batch.actions = std::move(actions);
    batch.onehot = Tensor(rows, n);
    for (std::size_t r = 0; r < rows; ++r) batch.onehot(r, batch.actions[r]) = 1.0;
    batch.u = Tensor(rows, m_max, us);
    batch.mask = action_mask(spec, m_max, batch.actions);
    batch.returns = std::move(returns);
    batch.advantages = batch.returns;
    snapshot_behavior(pi, batch);
    return batch;
}

inline void normalize(std::vector<double>& v) {
    if (v.empty()) return;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    for (double& x : v) x = (x - mean) / (sd + 1e-8);
}

// ---------------------------------------------------------------- objectives

/// ln pi_Theta(a, u | s) per row, N x 1.
inline Var log_prob_rows(const HierarchicalPolicy& pi, std::span<const Var> bound, const RolloutBatch& b,
                         Var states) {
    Graph& g = *states.graph();
    Var lp_a = ad::row_sum(ad::mul_const(pi.log_probs(bound, states), b.onehot));
    Var mu = pi.means(bound, states, g.leaf(b.onehot));
    Var lp_x = gaussian_log_prob(g.leaf(b.u), mu, pi.log_std(bound), b.mask);
    return ad::add(lp_a, lp_x);
}

/// Mean over rows of exp(ln pi_Theta - ln pi_Theta') * A. The log-ratio is
/// clamped to +-clamp; `clamp_events` counts rows that hit the clamp.
inline Var surrogate_loss(const HierarchicalPolicy& pi, std::span<const Var> bound, const RolloutBatch& b,
                          double clamp = 20.0, std::size_t* clamp_events = nullptr) {
    if (b.size() == 0) throw std::invalid_argument("surrogate_loss: empty batch");
    if (b.old_log_prob.size() != b.size()) throw std::invalid_argument("surrogate_loss: no behavior snapshot");
    Graph& g = *bound[0].graph();
    Var states = g.leaf(b.states);
    Var log_ratio = ad::sub(log_prob_rows(pi, bound, b, states), g.leaf(Tensor::column(b.old_log_prob)));
    if (clamp_events) {
        for (double v : log_ratio.value().values()) *clamp_events += std::abs(v) > clamp ? 1 : 0;
    }
    Var ratio = ad::exp(ad::clamp(log_ratio, -clamp, clamp));
    return ad::mean_all(ad::mul_const(ratio, Tensor::column(b.advantages)));
}

/// Differentiable estimate of E_s KL(pi_Theta' || pi_Theta) on the batch.
///
/// ChainRuleSampled: KL of the discrete heads plus the Gaussian KL of the
/// executed action. ChainRuleAnalytic: KL of the discrete heads plus the
/// Gaussian KL of every action weighted by pi_Theta'(a | s). SampledJoint: the
/// single-sample joint estimator (r - 1) - ln r with r = pi_Theta / pi_Theta' at
/// the executed (a, u); unbiased, zero with zero gradient at Theta = Theta'.
inline Var estimate_kl(const HierarchicalPolicy& pi, std::span<const Var> bound, const RolloutBatch& b,
                       KlEstimator mode) {
    if (b.size() == 0) throw std::invalid_argument("estimate_kl: empty batch");
    Graph& g = *bound[0].graph();
    Var states = g.leaf(b.states);
    switch (mode) {
        case KlEstimator::SampledJoint: {
            Var d = ad::sub(log_prob_rows(pi, bound, b, states), g.leaf(Tensor::column(b.old_log_prob)));
            return ad::mean_all(ad::sub(ad::add_scalar(ad::exp(d), -1.0), d));
        }
        case KlEstimator::ChainRuleSampled: {
            Var kl_d = categorical_kl(b.old_probs, pi.log_probs(bound, states));
            Var mu = pi.means(bound, states, g.leaf(b.onehot));
            Var kl_c = gaussian_kl(b.old_taken_means(), b.old_log_std, mu, pi.log_std(bound), b.mask);
            return ad::mean_all(ad::add(kl_d, kl_c));
        }
        case KlEstimator::ChainRuleAnalytic: {
            const std::size_t n = pi.num_actions();
            if (b.old_means.size() != n) {
                throw ShapeError("estimate_kl: analytic mode needs behavior means for all " +
                                 std::to_string(n) + " actions");
            }
            Var total = categorical_kl(b.old_probs, pi.log_probs(bound, states));
            Var ls = pi.log_std(bound);
            for (std::size_t a = 0; a < n; ++a) {
                const std::size_t m = pi.spec().param_dims[a];
                if (m == 0) continue;
                if (b.old_means[a].cols() != pi.param_outputs() || b.old_means[a].rows() != b.size()) {
                    throw ShapeError("estimate_kl: behavior means have the wrong shape");
                }
                Tensor repr(b.size(), n);
                Tensor mask(b.size(), pi.param_outputs());
                Tensor weight(b.size(), 1);
                for (std::size_t r = 0; r < b.size(); ++r) {
                    repr(r, a) = 1.0;
                    for (std::size_t c = 0; c < m; ++c) mask(r, c) = 1.0;
                    weight(r, 0) = b.old_probs(r, a);
                }
                Var mu = pi.means(bound, states, g.leaf(repr));
                Var kl_a = gaussian_kl(b.old_means[a], b.old_log_std, mu, ls, mask);
                total = ad::add(total, ad::mul_const(kl_a, weight));
            }
            return ad::mean_all(total);
        }
    }
    throw std::logic_error("unreachable");
}

// ------------------------------------------------------------ chunked driver

/// Evaluates a per-batch scalar `f` chunk by chunk and combines the row-weighted
/// means; optionally returns the matching gradient with respect to Theta.
using BatchObjective = std::function<Var(const HierarchicalPolicy&, std::span<const Var>, const RolloutBatch&)>;

inline double chunked_value(const HierarchicalPolicy& pi, std::span<const RolloutBatch> chunks,
                            const BatchObjective& f, Vector* grad = nullptr) {
    std::size_t total = 0;
    for (const auto& c : chunks) total += c.size();
    double value = 0.0;
    if (grad) *grad = Vector::Zero(static_cast<Eigen::Index>(pi.params().size()));
    for (const auto& c : chunks) {
        const double w = static_cast<double>(c.size()) / static_cast<double>(total);
        Graph g;
        auto bound = bind(g, pi.params());
        Var v = f(pi, bound, c);
        value += w * v.value().item();
        if (grad) *grad += w * flat_gradient(v, bound);
    }
    return value;
}

/// (Hessian of the KL estimate at Theta = Theta') v + damping v. The batch's
/// behavior snapshot must be the current policy.
inline Vector fisher_vector_product(const HierarchicalPolicy& pi, std::span<const RolloutBatch> chunks,
                                    const Vector& v, KlEstimator mode, double damping) {
    std::size_t total = 0;
    for (const auto& c : chunks) total += c.size();
    Vector out = damping * v;
    for (const auto& c : chunks) {
        const double w = static_cast<double>(c.size()) / static_cast<double>(total);
        Graph g;
        auto bound = bind(g, pi.params());
        Var kl = estimate_kl(pi, bound, c, mode);
        out += w * hessian_vector_product(kl, bound, v);
    }
    return out;
}

/// Tape-reusing Fisher operator for one small batch: the KL gradient is recorded
/// once and each product only differentiates <grad, v> again.
class FisherOperator {
public:
    FisherOperator(const HierarchicalPolicy& pi, const RolloutBatch& batch, KlEstimator mode, double damping)
        : damping_(damping) {
        bound_ = bind(g_, pi.params());
        Var kl = estimate_kl(pi, bound_, batch, mode);
        grads_ = g_.gradients(kl, bound_);
        mark_ = g_.size();
    }

    Vector operator()(const Vector& v) {
        Var acc;
        Eigen::Index pos = 0;
        for (std::size_t i = 0; i < bound_.size(); ++i) {
            const Tensor& shape = bound_[i].value();
            Tensor chunk(shape.rows(), shape.cols());
            for (std::size_t k = 0; k < chunk.size(); ++k) chunk[k] = v[pos++];
            Var term = ad::sum_all(ad::mul_const(grads_[i], std::move(chunk)));
            acc = acc.valid() ? ad::add(acc, term) : term;
        }
        Vector out = flat_gradient(acc, bound_) + damping_ * v;
        g_.rewind(mark_);
        return out;
    }

private:
    Graph g_;
    std::vector<Var> bound_;
    std::vector<Var> grads_;
    std::size_t mark_ = 0;
    double damping_;
};

struct CgResult {
    Vector x;
    std::size_t iterations = 0;
    std::vector<double> residual_norms;  // ||b - A x_k||^2 per iteration, starting at k = 0
};

/// Solves A x = b for symmetric positive (semi-)definite A given as a product.
inline CgResult conjugate_gradient(const std::function<Vector(const Vector&)>& av, const Vector& b,
                                   std::size_t iters, double tol = 1e-10) {
    CgResult res;
    res.x = Vector::Zero(b.size());
    Vector r = b;
    Vector p = b;
    double rr = r.squaredNorm();
    res.residual_norms.push_back(rr);
    for (std::size_t k = 0; k < iters && rr > tol; ++k) {
        const Vector ap = av(p);
        const double pap = p.dot(ap);
        if (!std::isfinite(pap)) throw NonFiniteError("conjugate gradient: non-finite operator product");
        if (pap <= 0.0) break;  // direction of zero curvature: nothing more to gain
        const double alpha = rr / pap;
        res.x += alpha * p;
        r -= alpha * ap;
        const double rr_new = r.squaredNorm();
        if (!res.x.allFinite() || !std::isfinite(rr_new)) throw NonFiniteError("conjugate gradient diverged");
        p = r + (rr_new / rr) * p;
        rr = rr_new;
        res.residual_norms.push_back(rr);
        res.iterations = k + 1;
    }
    return res;
}

struct UpdateReport {
    double surrogate_before = 0.0;
    double surrogate_after = 0.0;
    double kl = 0.0;           // configured estimator at the accepted point
    double kl_analytic = 0.0;  // re-measured with the chain-rule analytic estimator
    double expected_improve = 0.0;
    double grad_norm = 0.0;
    std::size_t backtracks = 0;
    std::size_t cg_iterations = 0;
    std::size_t clamp_events = 0;
    bool accepted = false;
    std::string note;
};

/// One natural-gradient step with backtracking. The batch's behavior snapshot
/// must equal the current policy.
inline UpdateReport trpo_update(HierarchicalPolicy& pi, const RolloutBatch& batch, const TrustRegionConfig& cfg) {
    cfg.validate();
    UpdateReport rep;
    const auto chunks = batch.chunks(cfg.chunk_rows);
    const double clamp = cfg.log_ratio_clamp;
    auto surrogate = [&](const HierarchicalPolicy& p, std::span<const Var> bound, const RolloutBatch& b) {
        return surrogate_loss(p, bound, b, clamp);
    };
    auto kl_fn = [&](KlEstimator mode) {
        return [mode](const HierarchicalPolicy& p, std::span<const Var> bound, const RolloutBatch& b) {
            return estimate_kl(p, bound, b, mode);
        };
    };

    Vector grad;
    rep.surrogate_before = chunked_value(pi, chunks, surrogate, &grad);
    rep.surrogate_after = rep.surrogate_before;
    rep.grad_norm = grad.norm();
    if (!(rep.grad_norm > 1e-12)) {
        rep.note = "zero gradient";
        return rep;
    }

    // A Fisher subsample that fits one tape keeps it across all products.
    const RolloutBatch fisher_rows = batch.strided(cfg.fvp_stride);
    const auto fisher_chunks = fisher_rows.chunks(cfg.chunk_rows);
    std::optional<FisherOperator> fisher_op;
    if (fisher_chunks.size() == 1) fisher_op.emplace(pi, fisher_chunks.front(), cfg.kl_estimator, cfg.cg_damping);
    auto fvp = [&](const Vector& v) {
        if (fisher_op) return (*fisher_op)(v);
        return fisher_vector_product(pi, fisher_chunks, v, cfg.kl_estimator, cfg.cg_damping);
    };
    const CgResult cg = conjugate_gradient(fvp, grad, cfg.cg_iters);
    rep.cg_iterations = cg.iterations;
    const Vector& d = cg.x;
    const double shs = d.dot(fvp(d));
    if (!(shs > 0.0)) {
        rep.note = "non-positive curvature";
        return rep;
    }
    const double beta = std::sqrt(2.0 * cfg.delta / shs);
    const Vector full = beta * d;
    rep.expected_improve = grad.dot(full);
    const Vector theta0 = pi.params().flat();

    double frac = 1.0;
    for (std::size_t k = 0; k <= cfg.max_backtracks; ++k, frac *= cfg.backtrack_ratio) {
        pi.params().assign(theta0 + frac * full);
        std::size_t clamps = 0;
        double surr = 0.0;
        for (const auto& c : chunks) {
            Graph g;
            auto bound = bind(g, pi.params());
            surr += static_cast<double>(c.size()) / static_cast<double>(batch.size()) *
                    surrogate_loss(pi, bound, c, clamp, &clamps).value().item();
        }
        rep.clamp_events += clamps;
        const double kl = chunked_value(pi, chunks, kl_fn(cfg.kl_estimator));
        if (surr - rep.surrogate_before > 0.0 && kl <= cfg.delta) {
            rep.accepted = true;
            rep.backtracks = k;
            rep.surrogate_after = surr;
            rep.kl = kl;
            rep.kl_analytic = cfg.kl_estimator == KlEstimator::ChainRuleAnalytic
                                  ? kl
                                  : chunked_value(pi, chunks, kl_fn(KlEstimator::ChainRuleAnalytic));
            return rep;
        }
    }
    pi.params().assign(theta0);
    rep.backtracks = cfg.max_backtracks;
    rep.note = "line search rejected every candidate";
    return rep;
}

// ------------------------------------------------------------------ baseline

struct BaselineConfig {
    std::size_t epochs = 5;
    double lr = 1e-3;
    std::size_t minibatch = 64;
};

/// Regresses V(s) on `targets` with minibatch Adam. Returns the mean squared
/// error over the data after each epoch (entry 0 is before training).
inline std::vector<double> fit_baseline(VBaseline& v, AdamState& adam, const Tensor& states,
                                        std::span<const double> targets, const BaselineConfig& cfg, Rng& rng) {
    const std::size_t rows = states.rows();
    if (targets.size() != rows) throw ShapeError("fit_baseline: target count mismatch");
    auto mse = [&] {
        const Tensor pred = v.evaluate(states);
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += (pred[r] - targets[r]) * (pred[r] - targets[r]);
        return rows ? s / static_cast<double>(rows) : 0.0;
    };
    std::vector<double> history{mse()};
    if (rows == 0) return history;
    std::vector<std::size_t> order(rows);
    std::iota(order.begin(), order.end(), 0);
    Vector theta = v.params().flat();
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < rows; start += cfg.minibatch) {
            const std::size_t end = std::min(rows, start + cfg.minibatch);
            Tensor xs(end - start, states.cols());
            Tensor ys(end - start, 1);
            for (std::size_t k = start; k < end; ++k) {
                xs.mat().row(static_cast<Eigen::Index>(k - start)) =
                    states.mat().row(static_cast<Eigen::Index>(order[k]));
                ys(k - start, 0) = targets[order[k]];
            }
            Graph g;
            auto bound = bind(g, v.params());
            Var err = ad::sub(v.value(bound, g.leaf(xs)), g.leaf(ys));
            Var loss = ad::mean_all(ad::square(err));
            adam_step(theta, flat_gradient(loss, bound), adam, cfg.lr);
            v.params().assign(theta);
        }
        history.push_back(mse());
    }
    return history;
}

/// Mean entropy of the discrete head plus the conditional entropy of the
/// executed action's Gaussian (pre-squash), over the batch.
inline double policy_entropy(const HierarchicalPolicy& pi, const RolloutBatch& b) {
    if (b.size() == 0) return 0.0;
    const Tensor logits = pi.logits_batch(b.states);
    const auto ls = pi.log_std_values();
    double h = 0.0;
    for (std::size_t r = 0; r < b.size(); ++r) {
        h += Categorical::from_logits(logits.row_values(r)).entropy();
        const std::size_t m = pi.spec().param_dims[b.actions[r]];
        DiagGaussian g{std::vector<double>(m, 0.0), {ls.begin(), ls.begin() + static_cast<std::ptrdiff_t>(m)}};
        h += g.entropy();
    }
    return h / static_cast<double>(b.size());
}

// --------------------------------------------------------------------- agent

struct PatrpoConfig {
    HierarchicalPolicyConfig policy;
    CriticConfig baseline{.hidden = {64, 64}, .hidden_activation = Activation::Tanh, .final_scale = 1.0};
    BaselineConfig baseline_fit;
    TrustRegionConfig trust_region;
};

struct PatrpoEpoch {
    std::size_t episodes = 0;
    double mean_return = std::numeric_limits<double>::quiet_NaN();
    std::size_t batch_rows = 0;
    double baseline_loss = 0.0;
    double entropy = 0.0;
    UpdateReport update;
};

class PatrpoAgent {
public:
    PatrpoAgent(const PamdpSpec& spec, const PatrpoConfig& cfg, Rng& rng)
        : cfg_(cfg), policy_(spec, cfg.policy, rng), baseline_(spec.state_dim, cfg.baseline, rng) {
        cfg_.trust_region.validate();
    }

    HierarchicalPolicy& policy() { return policy_; }
    const HierarchicalPolicy& policy() const { return policy_; }
    VBaseline& baseline() { return baseline_; }

    /// Collects `steps` environment steps, fits the baseline, takes one trust-region step.
    PatrpoEpoch train_epoch(Environment& env, std::size_t steps, Rng& rng) {
        PatrpoEpoch out;
        RolloutBatch batch = collect_rollouts(env, policy_, steps, cfg_.trust_region.gamma, rng);
        out.episodes = batch.episode_returns.size();
        out.batch_rows = batch.size();
        if (!batch.episode_returns.empty()) {
            out.mean_return = std::accumulate(batch.episode_returns.begin(), batch.episode_returns.end(), 0.0) /
                              static_cast<double>(batch.episode_returns.size());
        }
        if (batch.size() == 0) {
            out.update.note = "no complete episode";
            return out;
        }
        const auto hist = fit_baseline(baseline_, baseline_adam_, batch.states, batch.returns, cfg_.baseline_fit, rng);
        out.baseline_loss = hist.back();
        const Tensor v = baseline_.evaluate(batch.states);
        for (std::size_t r = 0; r < batch.size(); ++r) batch.advantages[r] = batch.returns[r] - v[r];
        normalize(batch.advantages);
        out.entropy = policy_entropy(policy_, batch);
        out.update = trpo_update(policy_, batch, cfg_.trust_region);
        return out;
    }

private:
    PatrpoConfig cfg_;
    HierarchicalPolicy policy_;
    VBaseline baseline_;
    AdamState baseline_adam_;
};

}  // namespace pamdp
