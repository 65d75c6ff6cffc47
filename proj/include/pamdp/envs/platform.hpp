#pragma once

#include "pamdp/envs/pamdp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace pamdp {

struct PlatformConfig {
    std::vector<double> platform_widths{25.0, 30.0, 30.0};
    std::vector<double> gap_widths{6.0, 8.0};
    std::vector<std::size_t> enemy_platforms{0, 1};
    double enemy_speed = 2.0;
    double enemy_inset = 5.0;  // enemies patrol their platform minus this margin on each side
    double enemy_height = 2.0;
    double contact_distance = 1.5;

    double run_max = 6.0;
    double jump_max = 6.0;
    double leap_max = 12.0;
    std::size_t jump_ticks = 3;
    std::size_t leap_ticks = 5;
    double jump_height = 4.0;
    double leap_height = 1.0;

    std::size_t horizon = 200;
    double gamma = 0.99;
    double distance_scale = 10.0;  // observation scaling for distances
};

/// Side-scrolling platform course with three parameterized actions:
/// run (grounded, cannot pass enemies or gaps), jump (high hop, passes enemies),
/// leap (long low arc, crosses gaps). Each parameter is the horizontal distance
/// covered by the action. The reward is forward progress divided by the course
/// length, so an episode's return lies in [0, 1] and equals 1 only at the goal.
class PlatformEnv final : public Environment {
public:
    enum Action : std::size_t { Run = 0, Jump = 1, Leap = 2 };

    static constexpr std::size_t kObsDim = 9;

    explicit PlatformEnv(PlatformConfig cfg = {}) : cfg_(std::move(cfg)) {
        if (cfg_.platform_widths.size() != 3 || cfg_.gap_widths.size() != 2) {
            throw std::invalid_argument("platform course needs 3 platforms and 2 gaps");
        }
        double x = 0.0;
        for (std::size_t i = 0; i < cfg_.platform_widths.size(); ++i) {
            starts_.push_back(x);
            x += cfg_.platform_widths[i];
            ends_.push_back(x);
            if (i < cfg_.gap_widths.size()) x += cfg_.gap_widths[i];
        }
        length_ = x;
        for (std::size_t p : cfg_.enemy_platforms) {
            if (p >= starts_.size()) throw std::invalid_argument("enemy platform out of range");
            const double lo = starts_[p] + cfg_.enemy_inset;
            const double hi = ends_[p] - cfg_.enemy_inset;
            if (!(lo < hi)) throw std::invalid_argument("enemy inset leaves no patrol range");
            patrols_.push_back({p, lo, hi});
        }

        spec_.state_dim = kObsDim;
        spec_.discrete_actions = 3;
        spec_.param_dims = {1, 1, 1};
        spec_.param_bounds = {{Bounds{0.0, cfg_.run_max}},
                              {Bounds{0.0, cfg_.jump_max}},
                              {Bounds{0.0, cfg_.leap_max}}};
        spec_.horizon = cfg_.horizon;
        spec_.gamma = cfg_.gamma;
        spec_.validate();
    }

    const PamdpSpec& spec() const override { return spec_; }
    const PlatformConfig& config() const { return cfg_; }
    std::string name() const override { return "platform"; }
    std::unique_ptr<Environment> clone() const override {
        return std::make_unique<PlatformEnv>(*this);
    }

    double course_length() const { return length_; }
    double agent_x() const { return x_; }
    const std::vector<double>& enemy_positions() const { return enemy_x_; }
    const std::vector<double>& enemy_directions() const { return enemy_dir_; }
    bool reached_goal() const { return goal_; }
    bool fell() const { return fell_; }
    bool hit_enemy() const { return hit_; }

    /// Agent at x = 0 on the first platform; enemies at the middle of their
    /// patrol, walking toward the start. The course is deterministic.
    std::vector<double> reset(Rng&) override {
        x_ = 0.0;
        steps_ = 0;
        done_ = goal_ = fell_ = hit_ = false;
        enemy_x_.clear();
        enemy_dir_.clear();
        for (const auto& p : patrols_) {
            enemy_x_.push_back(0.5 * (p.lo + p.hi));
            enemy_dir_.push_back(-1.0);
        }
        return observe();
    }

    StepResult step(const ParamAction& raw) override {
        if (done_) throw EpisodeOver("step() called on a finished episode");
        const ParamAction action = sanitize(raw);
        const double start_x = x_;
        const double distance = action.params[0];

        std::size_t ticks = 1;
        double height = 0.0;
        if (action.discrete == Jump) {
            ticks = cfg_.jump_ticks;
            height = cfg_.jump_height;
        } else if (action.discrete == Leap) {
            ticks = cfg_.leap_ticks;
            height = cfg_.leap_height;
        }
        const bool grounded_motion = action.discrete == Run;
        const bool clears_enemies = height > cfg_.enemy_height;
        const double speed = distance / static_cast<double>(ticks);
        const int takeoff_platform = platform_at(x_);

        for (std::size_t t = 0; t < ticks && !done_; ++t) {
            const double x0 = x_;
            const double x1 = x0 + speed;
            std::vector<double> e0 = enemy_x_;
            move_enemies();
            x_ = x1;

            if (x_ >= length_) {
                x_ = length_;
                goal_ = done_ = true;
                break;
            }
            if (grounded_motion && takeoff_platform >= 0 &&
                x1 > ends_[static_cast<std::size_t>(takeoff_platform)]) {
                // Walked off the edge.
                x_ = std::min(x1, starts_[static_cast<std::size_t>(takeoff_platform) + 1]);
                fell_ = done_ = true;
                break;
            }
            const bool landing = t + 1 == ticks;
            if (!clears_enemies || landing) {
                for (std::size_t k = 0; k < patrols_.size(); ++k) {
                    const auto& p = patrols_[k];
                    const bool on_platform = platform_at(x1) == static_cast<int>(p.platform) ||
                                             (!clears_enemies &&
                                              platform_at(x0) == static_cast<int>(p.platform));
                    if (!on_platform) continue;
                    const double r1 = x1 - enemy_x_[k];
                    bool contact = std::abs(r1) < cfg_.contact_distance;
                    if (!clears_enemies) {
                        const double r0 = x0 - e0[k];
                        contact = contact || (r0 * r1 <= 0.0) || std::abs(r0) < cfg_.contact_distance;
                    }
                    if (contact) {
                        hit_ = done_ = true;
                        break;
                    }
                }
            }
            if (!done_ && landing && platform_at(x_) < 0) {
                fell_ = done_ = true;
            }
        }

        ++steps_;
        if (steps_ >= cfg_.horizon) done_ = true;
        StepResult r;
        r.reward = goal_ ? (length_ - start_x) / length_ : std::max(0.0, x_ - start_x) / length_;
        r.terminal = done_;
        r.state = observe();
        return r;
    }

    /// Index of the platform under x, or -1 over a gap.
    int platform_at(double x) const {
        for (std::size_t i = 0; i < starts_.size(); ++i) {
            if (x >= starts_[i] && x <= ends_[i]) return static_cast<int>(i);
        }
        return -1;
    }

private:
    struct Patrol {
        std::size_t platform;
        double lo;
        double hi;
    };

    void move_enemies() {
        for (std::size_t k = 0; k < patrols_.size(); ++k) {
            double e = enemy_x_[k] + enemy_dir_[k] * cfg_.enemy_speed;
            if (e > patrols_[k].hi) {
                e = 2.0 * patrols_[k].hi - e;
                enemy_dir_[k] = -1.0;
            } else if (e < patrols_[k].lo) {
                e = 2.0 * patrols_[k].lo - e;
                enemy_dir_[k] = 1.0;
            }
            enemy_x_[k] = e;
        }
    }

    std::vector<double> observe() const {
        std::vector<double> obs(kObsDim, 0.0);
        const double s = cfg_.distance_scale;
        obs[0] = 2.0 * x_ / length_ - 1.0;
        obs[1] = 0.0;  // decisions are only taken on the ground
        obs[2] = fell_ ? 0.0 : 1.0;
        const int p = platform_at(x_);
        if (p >= 0) obs[3 + static_cast<std::size_t>(p)] = 1.0;
        obs[6] = 1.0;
        obs[7] = 0.0;
        for (std::size_t k = 0; k < patrols_.size(); ++k) {
            if (static_cast<int>(patrols_[k].platform) == p) {
                obs[6] = std::clamp((enemy_x_[k] - x_) / s, -1.0, 1.0);
                obs[7] = enemy_dir_[k];
            }
        }
        obs[8] = p >= 0 ? std::clamp((ends_[static_cast<std::size_t>(p)] - x_) / s, 0.0, 1.0) : 0.0;
        return obs;
    }

    PlatformConfig cfg_;
    PamdpSpec spec_;
    std::vector<double> starts_;
    std::vector<double> ends_;
    std::vector<Patrol> patrols_;
    double length_ = 0.0;

    double x_ = 0.0;
    std::vector<double> enemy_x_;
    std::vector<double> enemy_dir_;
    std::size_t steps_ = 0;
    bool done_ = false;
    bool goal_ = false;
    bool fell_ = false;
    bool hit_ = false;
};

}  // namespace pamdp
