#pragma once

#include "pamdp/diffcore/graph.hpp"
#include "pamdp/random.hpp"
#include "pamdp/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pamdp {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kGumbelClamp = 1e-12;

class DistributionError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Recorded Gumbel(0, 1) perturbation, one value per discrete action.
struct GumbelNoise {
    std::vector<double> g;
    bool operator==(const GumbelNoise&) const = default;
};

inline GumbelNoise sample_gumbel(std::size_t n, Rng& rng) {
    GumbelNoise noise;
    noise.g.resize(n);
    for (double& v : noise.g) {
        const double u = std::clamp(rng.uniform(), kGumbelClamp, 1.0 - kGumbelClamp);
        v = -std::log(-std::log(u));
    }
    return noise;
}

struct Categorical {
    std::vector<double> probs;

    static Categorical from_logits(std::span<const double> logits) {
        Categorical c;
        c.probs.assign(logits.begin(), logits.end());
        const double mx = *std::max_element(c.probs.begin(), c.probs.end());
        double total = 0.0;
        for (double& p : c.probs) total += (p = std::exp(p - mx));
        for (double& p : c.probs) p /= total;
        return c;
    }

    std::size_t size() const { return probs.size(); }

    std::vector<double> log_probs() const {
        std::vector<double> out(probs.size());
        std::transform(probs.begin(), probs.end(), out.begin(), [](double p) { return std::log(p); });
        return out;
    }

    double entropy() const {
        double h = 0.0;
        for (double p : probs) {
            if (p > 0.0) h -= p * std::log(p);
        }
        return h;
    }
};

inline void check_simplex(std::span<const double> probs) {
    if (probs.empty()) throw DistributionError("empty probability vector");
    double total = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) throw DistributionError("invalid probability entry");
        total += p;
    }
    if (total <= 0.0) throw DistributionError("degenerate simplex (all zero)");
    if (std::abs(total - 1.0) > 1e-9) {
        throw DistributionError("probabilities sum to " + std::to_string(total));
    }
}

/// Index i with probability probs[i], by inverse CDF.
inline std::size_t categorical_sample(std::span<const double> probs, Rng& rng) {
    check_simplex(probs);
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] > 0.0) last_positive = i;
        acc += probs[i];
        if (u < acc) return i;
    }
    return last_positive;
}

/// argmax_i (g_i + log_probs_i); ties go to the lowest index.
inline std::size_t gumbel_max_sample(std::span<const double> log_probs, const GumbelNoise& noise) {
    if (noise.g.size() != log_probs.size()) throw ShapeError("gumbel noise size mismatch");
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < log_probs.size(); ++i) {
        if (std::isnan(log_probs[i])) throw DistributionError("non-finite log-probability");
        const double v = noise.g[i] + log_probs[i];
        if (v > best_v) {
            best_v = v;
            best = i;
        }
    }
    return best;
}

/// softmax((g + log_probs) / t)
inline std::vector<double> gumbel_softmax(std::span<const double> log_probs,
                                          const GumbelNoise& noise, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("gumbel_softmax temperature must be positive");
    if (noise.g.size() != log_probs.size()) throw ShapeError("gumbel noise size mismatch");
    std::vector<double> z(log_probs.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (noise.g[i] + log_probs[i]) / t;
    return Categorical::from_logits(z).probs;
}

namespace ad {

/// Differentiable Gumbel-Softmax over rows: softmax((log_probs + noise) / t).
inline Var gumbel_softmax(Var log_probs, const Tensor& noise, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("gumbel_softmax temperature must be positive");
    Var shifted = add(log_probs, log_probs.graph()->leaf(noise));
    return softmax(scale(shifted, 1.0 / t));
}

}  // namespace ad

/// KL(p || q) = sum p_i ln(p_i / q_i), with 0 ln 0 = 0.
inline double kl_categorical(const Categorical& p, const Categorical& q) {
    if (p.size() != q.size()) throw ShapeError("kl_categorical: support size mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.probs[i] <= 0.0) continue;
        if (q.probs[i] <= 0.0) throw DistributionError("kl_categorical: q has zero mass where p > 0");
        kl += p.probs[i] * std::log(p.probs[i] / q.probs[i]);
    }
    return std::max(kl, 0.0);
}

/// Diagonal Gaussian with a state-independent log standard deviation.
struct DiagGaussian {
    std::vector<double> mean;
    std::vector<double> log_std;

    std::size_t dim() const { return mean.size(); }

    double std_at(std::size_t i) const {
        return std::exp(std::clamp(log_std[i], kLogStdMin, kLogStdMax));
    }

    double log_prob(std::span<const double> x) const {
        if (x.size() != mean.size()) throw ShapeError("DiagGaussian::log_prob dimension mismatch");
        double lp = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double ls = std::clamp(log_std[i], kLogStdMin, kLogStdMax);
            const double z = (x[i] - mean[i]) / std::exp(ls);
            lp += -0.5 * z * z - ls - 0.5 * std::log(2.0 * std::numbers::pi);
        }
        return lp;
    }

    std::vector<double> sample(Rng& rng) const {
        std::vector<double> out(mean.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = mean[i] + std_at(i) * rng.normal();
        return out;
    }

    double entropy() const {
        double h = 0.0;
        for (std::size_t i = 0; i < mean.size(); ++i) {
            h += std::clamp(log_std[i], kLogStdMin, kLogStdMax) +
                 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
        }
        return h;
    }
};

inline double kl_diag_gaussian(const DiagGaussian& p, const DiagGaussian& q) {
    if (p.dim() != q.dim() || p.log_std.size() != p.dim() || q.log_std.size() != q.dim()) {
        throw ShapeError("kl_diag_gaussian: dimension mismatch");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.dim(); ++i) {
        const double sp = p.std_at(i);
        const double sq = q.std_at(i);
        const double d = p.mean[i] - q.mean[i];
        kl += std::log(sq / sp) + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5;
    }
    return std::max(kl, 0.0);
}

/// tanh(u) with u drawn from the Gaussian; values lie in (-1, 1).
inline std::vector<double> tanh_gaussian_sample(const DiagGaussian& g, Rng& rng,
                                                std::vector<double>* pre_squash = nullptr) {
    auto u = g.sample(rng);
    std::vector<double> y(u.size());
    std::transform(u.begin(), u.end(), y.begin(), [](double v) { return std::tanh(v); });
    if (pre_squash) *pre_squash = std::move(u);
    return y;
}

/// Density of y = tanh(u), u ~ g, evaluated at y in (-1, 1)^m.
inline double tanh_gaussian_log_prob(const DiagGaussian& g, std::span<const double> y) {
    std::vector<double> u(y.size());
    double log_jac = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double yi = std::clamp(y[i], -1.0 + 1e-15, 1.0 - 1e-15);
        u[i] = std::atanh(yi);
        log_jac += std::log1p(-yi * yi);
    }
    return g.log_prob(u) - log_jac;
}

/// ln pi^d(a|s) + ln pi^c(x|a,s) for an action expressed in environment units.
/// `conditional` is the pre-squash Gaussian of the chosen action; x maps to
/// (-1, 1) through each dimension's bounds before the tanh density applies.
inline double log_prob_joint(const Categorical& discrete, const DiagGaussian& conditional,
                             const ParamAction& action, std::span<const Bounds> bounds) {
    if (action.discrete >= discrete.size()) {
        throw std::out_of_range("log_prob_joint: discrete action " + std::to_string(action.discrete) +
                                " out of range");
    }
    if (action.params.size() != conditional.dim() || bounds.size() != conditional.dim()) {
        throw ShapeError("log_prob_joint: parameter dimension mismatch");
    }
    const double pa = discrete.probs[action.discrete];
    if (pa <= 0.0) return -std::numeric_limits<double>::infinity();
    double lp = std::log(pa);
    if (conditional.dim() == 0) return lp;
    std::vector<double> y(action.params.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = bounds[i].to_unit(action.params[i]);
        lp -= std::log(0.5 * bounds[i].width());
    }
    return lp + tanh_gaussian_log_prob(conditional, y);
}

}  // namespace pamdp
