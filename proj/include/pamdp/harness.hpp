#pragma once

// Experiment orchestration: configs, multi-seed runs, CSV/JSON artifacts.

#include "pamdp/envs/platform.hpp"
#include "pamdp/envs/toy.hpp"
#include "pamdp/paddpg.hpp"
#include "pamdp/svg0.hpp"
#include "pamdp/toy_tables.hpp"
#include "pamdp/trpo.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

extern char** environ;

namespace pamdp {

namespace fs = std::filesystem;
using nlohmann::json;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Algorithm { Patrpo, Pasvg0, Paddpg };

// ------------------------------------------------------------------ enums <-> strings

inline std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::Patrpo: return "patrpo";
        case Algorithm::Pasvg0: return "pasvg0";
        case Algorithm::Paddpg: return "paddpg";
    }
    return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
    if (s == "patrpo") return Algorithm::Patrpo;
    if (s == "pasvg0") return Algorithm::Pasvg0;
    if (s == "paddpg") return Algorithm::Paddpg;
    throw ConfigError("unknown algorithm '" + s + "' (patrpo, pasvg0, paddpg)");
}

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::ReLU: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Softmax: return "softmax";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::ReLU;
    if (s == "tanh") return Activation::Tanh;
    throw ConfigError("hidden activation must be relu or tanh, got '" + s + "'");
}

inline std::string to_string(NoiseMode m) { return m == NoiseMode::Recorded ? "recorded" : "fresh"; }

inline NoiseMode noise_mode_from_string(const std::string& s) {
    if (s == "recorded") return NoiseMode::Recorded;
    if (s == "fresh") return NoiseMode::Fresh;
    throw ConfigError("noise_mode must be recorded or fresh, got '" + s + "'");
}

// ------------------------------------------------------------------ strict JSON reading

/// Reads known keys from one JSON object and rejects any key it was not asked about.
class JsonReader {
public:
    JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where(key) + ": " + e.what());
        }
    }

    template <class T, class Parse>
    void get_enum(const std::string& key, T& out, Parse parse) {
        std::string s;
        if (!j_.contains(key)) return;
        get(key, s);
        out = parse(s);
    }

    void get_activation(const std::string& key, Activation& out) { get_enum(key, out, activation_from_string); }

    /// Nested object; `f` reads it with its own reader.
    void sub(const std::string& key, const std::function<void(JsonReader&)>& f) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        JsonReader r(j_.at(key), where(key));
        f(r);
        r.finish();
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.contains(k)) throw ConfigError("unknown config key " + where(k));
        }
    }

private:
    std::string where(const std::string& key = "") const {
        std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
        return p.empty() ? "<root>" : p;
    }
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

// ------------------------------------------------------------------ experiment config

struct ExperimentConfig {
    Algorithm algorithm = Algorithm::Patrpo;
    std::string env = "platform";  // platform | toy
    std::size_t epochs = 100;
    std::size_t steps_per_epoch = 10'000;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::string output_dir = "results";
    PlatformConfig platform;
    ToyConfig toy;
    PatrpoConfig patrpo;
    Svg0Config pasvg0;
    PaddpgConfig paddpg;

    void validate() const {
        if (env != "platform" && env != "toy") throw ConfigError("env must be platform or toy, got '" + env + "'");
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be positive");
        if (seeds.empty()) throw ConfigError("need at least one seed");
        if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
            throw ConfigError("seeds must be distinct");
        }
        try {
            make_environment()->spec().validate();
            switch (algorithm) {
                case Algorithm::Patrpo: patrpo.trust_region.validate(); break;
                case Algorithm::Pasvg0: pasvg0.validate(); break;
                case Algorithm::Paddpg: paddpg.validate(); break;
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(std::string("invalid config: ") + e.what());
        }
        auto hidden_ok = [](const std::vector<std::size_t>& h) {
            return !h.empty() && std::all_of(h.begin(), h.end(), [](std::size_t v) { return v > 0; });
        };
        const bool nets_ok = hidden_ok(patrpo.policy.discrete_hidden) && hidden_ok(patrpo.policy.param_hidden) &&
                             hidden_ok(patrpo.baseline.hidden) && hidden_ok(pasvg0.policy.discrete_hidden) &&
                             hidden_ok(pasvg0.policy.param_hidden) && hidden_ok(pasvg0.critic.hidden) &&
                             hidden_ok(paddpg.actor.hidden) && hidden_ok(paddpg.critic.hidden);
        if (!nets_ok) throw ConfigError("hidden layer sizes must be nonempty and positive");
        if (patrpo.baseline_fit.minibatch == 0 || patrpo.baseline_fit.lr <= 0.0) {
            throw ConfigError("baseline_fit needs a positive minibatch and learning rate");
        }
    }

    std::unique_ptr<Environment> make_environment() const {
        if (env == "toy") return std::make_unique<ToyPamdp>(toy);
        return std::make_unique<PlatformEnv>(platform);
    }
};

inline json policy_to_json(const HierarchicalPolicyConfig& c) {
    return {{"discrete_hidden", c.discrete_hidden},
            {"param_hidden", c.param_hidden},
            {"hidden_activation", to_string(c.hidden_activation)},
            {"init_log_std", c.init_log_std},
            {"head_scale", c.head_scale}};
}

inline void policy_from_json(JsonReader& r, HierarchicalPolicyConfig& c) {
    r.get("discrete_hidden", c.discrete_hidden);
    r.get("param_hidden", c.param_hidden);
    r.get_activation("hidden_activation", c.hidden_activation);
    r.get("init_log_std", c.init_log_std);
    r.get("head_scale", c.head_scale);
}

inline json net_to_json(const CriticConfig& c) {
    return {{"hidden", c.hidden}, {"hidden_activation", to_string(c.hidden_activation)}, {"final_scale", c.final_scale}};
}

inline void net_from_json(JsonReader& r, CriticConfig& c) {
    r.get("hidden", c.hidden);
    r.get_activation("hidden_activation", c.hidden_activation);
    r.get("final_scale", c.final_scale);
}

inline json to_json(const ExperimentConfig& c) {
    const auto& tr = c.patrpo.trust_region;
    const auto& sv = c.pasvg0;
    const auto& pd = c.paddpg;
    return {
        {"algorithm", to_string(c.algorithm)},
        {"env", c.env},
        {"epochs", c.epochs},
        {"steps_per_epoch", c.steps_per_epoch},
        {"seeds", c.seeds},
        {"output_dir", c.output_dir},
        {"platform",
         {{"platform_widths", c.platform.platform_widths},
          {"gap_widths", c.platform.gap_widths},
          {"enemy_platforms", c.platform.enemy_platforms},
          {"enemy_speed", c.platform.enemy_speed},
          {"enemy_inset", c.platform.enemy_inset},
          {"enemy_height", c.platform.enemy_height},
          {"contact_distance", c.platform.contact_distance},
          {"run_max", c.platform.run_max},
          {"jump_max", c.platform.jump_max},
          {"leap_max", c.platform.leap_max},
          {"jump_ticks", c.platform.jump_ticks},
          {"leap_ticks", c.platform.leap_ticks},
          {"jump_height", c.platform.jump_height},
          {"leap_height", c.platform.leap_height},
          {"distance_scale", c.platform.distance_scale},
          {"horizon", c.platform.horizon},
          {"gamma", c.platform.gamma}}},
        {"toy",
         {{"targets", c.toy.targets},
          {"tolerance", c.toy.tolerance},
          {"quit_reward", c.toy.quit_reward},
          {"horizon", c.toy.horizon},
          {"gamma", c.toy.gamma}}},
        {"patrpo",
         {{"policy", policy_to_json(c.patrpo.policy)},
          {"baseline", net_to_json(c.patrpo.baseline)},
          {"baseline_fit",
           {{"epochs", c.patrpo.baseline_fit.epochs},
            {"lr", c.patrpo.baseline_fit.lr},
            {"minibatch", c.patrpo.baseline_fit.minibatch}}},
          {"trust_region",
           {{"delta", tr.delta},
            {"cg_iters", tr.cg_iters},
            {"cg_damping", tr.cg_damping},
            {"backtrack_ratio", tr.backtrack_ratio},
            {"max_backtracks", tr.max_backtracks},
            {"kl_estimator", to_string(tr.kl_estimator)},
            {"gamma", tr.gamma},
            {"chunk_rows", tr.chunk_rows},
            {"fvp_stride", tr.fvp_stride},
            {"log_ratio_clamp", tr.log_ratio_clamp}}}}},
        {"pasvg0",
         {{"policy", policy_to_json(sv.policy)},
          {"critic", net_to_json(sv.critic)},
          {"critic_lr", sv.critic_lr},
          {"actor_lr", sv.actor_lr},
          {"temperature", sv.temperature},
          {"minibatch", sv.minibatch},
          {"target_tau", sv.target_tau},
          {"use_targets", sv.use_targets},
          {"gamma", sv.gamma},
          {"param_noise", sv.param_noise},
          {"noise_mode", to_string(sv.noise_mode)},
          {"replay_capacity", sv.replay_capacity},
          {"warmup", sv.warmup},
          {"update_every", sv.update_every},
          {"critic_soft_inputs", sv.critic_soft_inputs}}},
        {"paddpg",
         {{"actor", net_to_json(pd.actor)},
          {"critic", net_to_json(pd.critic)},
          {"critic_lr", pd.critic_lr},
          {"actor_lr", pd.actor_lr},
          {"minibatch", pd.minibatch},
          {"target_tau", pd.target_tau},
          {"gamma", pd.gamma},
          {"param_noise", pd.param_noise},
          {"epsilon_start", pd.epsilon_start},
          {"epsilon_end", pd.epsilon_end},
          {"epsilon_anneal_steps", pd.epsilon_anneal_steps},
          {"replay_capacity", pd.replay_capacity},
          {"warmup", pd.warmup},
          {"update_every", pd.update_every}}},
    };
}

/// Starts from the defaults and overrides whatever the document sets. Unknown
/// keys and ill-typed values are errors.
inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    JsonReader r(j, "");
    r.get_enum("algorithm", c.algorithm, algorithm_from_string);
    r.get("env", c.env);
    r.get("epochs", c.epochs);
    r.get("steps_per_epoch", c.steps_per_epoch);
    r.get("seeds", c.seeds);
    r.get("output_dir", c.output_dir);
    r.sub("platform", [&](JsonReader& p) {
        auto& e = c.platform;
        p.get("platform_widths", e.platform_widths);
        p.get("gap_widths", e.gap_widths);
        p.get("enemy_platforms", e.enemy_platforms);
        p.get("enemy_speed", e.enemy_speed);
        p.get("enemy_inset", e.enemy_inset);
        p.get("enemy_height", e.enemy_height);
        p.get("contact_distance", e.contact_distance);
        p.get("run_max", e.run_max);
        p.get("jump_max", e.jump_max);
        p.get("leap_max", e.leap_max);
        p.get("jump_ticks", e.jump_ticks);
        p.get("leap_ticks", e.leap_ticks);
        p.get("jump_height", e.jump_height);
        p.get("leap_height", e.leap_height);
        p.get("distance_scale", e.distance_scale);
        p.get("horizon", e.horizon);
        p.get("gamma", e.gamma);
    });
    r.sub("toy", [&](JsonReader& p) {
        p.get("targets", c.toy.targets);
        p.get("tolerance", c.toy.tolerance);
        p.get("quit_reward", c.toy.quit_reward);
        p.get("horizon", c.toy.horizon);
        p.get("gamma", c.toy.gamma);
    });
    r.sub("patrpo", [&](JsonReader& p) {
        p.sub("policy", [&](JsonReader& q) { policy_from_json(q, c.patrpo.policy); });
        p.sub("baseline", [&](JsonReader& q) { net_from_json(q, c.patrpo.baseline); });
        p.sub("baseline_fit", [&](JsonReader& q) {
            q.get("epochs", c.patrpo.baseline_fit.epochs);
            q.get("lr", c.patrpo.baseline_fit.lr);
            q.get("minibatch", c.patrpo.baseline_fit.minibatch);
        });
        p.sub("trust_region", [&](JsonReader& q) {
            auto& t = c.patrpo.trust_region;
            q.get("delta", t.delta);
            q.get("cg_iters", t.cg_iters);
            q.get("cg_damping", t.cg_damping);
            q.get("backtrack_ratio", t.backtrack_ratio);
            q.get("max_backtracks", t.max_backtracks);
            q.get_enum("kl_estimator", t.kl_estimator, [](const std::string& s) {
                try {
                    return kl_estimator_from_string(s);
                } catch (const std::exception& e) {
                    throw ConfigError(e.what());
                }
            });
            q.get("gamma", t.gamma);
            q.get("chunk_rows", t.chunk_rows);
            q.get("fvp_stride", t.fvp_stride);
            q.get("log_ratio_clamp", t.log_ratio_clamp);
        });
    });
    r.sub("pasvg0", [&](JsonReader& p) {
        auto& s = c.pasvg0;
        p.sub("policy", [&](JsonReader& q) { policy_from_json(q, s.policy); });
        p.sub("critic", [&](JsonReader& q) { net_from_json(q, s.critic); });
        p.get("critic_lr", s.critic_lr);
        p.get("actor_lr", s.actor_lr);
        p.get("temperature", s.temperature);
        p.get("minibatch", s.minibatch);
        p.get("target_tau", s.target_tau);
        p.get("use_targets", s.use_targets);
        p.get("gamma", s.gamma);
        p.get("param_noise", s.param_noise);
        p.get_enum("noise_mode", s.noise_mode, noise_mode_from_string);
        p.get("replay_capacity", s.replay_capacity);
        p.get("warmup", s.warmup);
        p.get("update_every", s.update_every);
        p.get("critic_soft_inputs", s.critic_soft_inputs);
    });
    r.sub("paddpg", [&](JsonReader& p) {
        auto& s = c.paddpg;
        p.sub("actor", [&](JsonReader& q) { net_from_json(q, s.actor); });
        p.sub("critic", [&](JsonReader& q) { net_from_json(q, s.critic); });
        p.get("critic_lr", s.critic_lr);
        p.get("actor_lr", s.actor_lr);
        p.get("minibatch", s.minibatch);
        p.get("target_tau", s.target_tau);
        p.get("gamma", s.gamma);
        p.get("param_noise", s.param_noise);
        p.get("epsilon_start", s.epsilon_start);
        p.get("epsilon_end", s.epsilon_end);
        p.get("epsilon_anneal_steps", s.epsilon_anneal_steps);
        p.get("replay_capacity", s.replay_capacity);
        p.get("warmup", s.warmup);
        p.get("update_every", s.update_every);
    });
    r.finish();
    return c;
}

/// PAMDP_A__B=value sets key b inside section a ("__" separates levels, names
/// are lowercased). The value is parsed as JSON, falling back to a string.
inline json apply_env_overrides(json j, const std::map<std::string, std::string>& env) {
    const std::string prefix = "PAMDP_";
    for (const auto& [name, value] : env) {
        if (name.rfind(prefix, 0) != 0) continue;
        std::string path = name.substr(prefix.size());
        std::transform(path.begin(), path.end(), path.begin(), [](unsigned char ch) { return std::tolower(ch); });
        std::string pointer = "/";
        for (std::size_t i = 0; i < path.size(); ++i) {
            if (path.compare(i, 2, "__") == 0) {
                pointer += '/';
                ++i;
            } else {
                pointer += path[i];
            }
        }
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;
        }
        j[json::json_pointer(pointer)] = parsed;
    }
    return j;
}

inline std::map<std::string, std::string> process_environment() {
    std::map<std::string, std::string> out;
    for (char** e = environ; e && *e; ++e) {
        const std::string kv(*e);
        const auto eq = kv.find('=');
        if (eq != std::string::npos) out[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    return out;
}

/// Reads a config file, applies PAMDP_* overrides and validates.
inline ExperimentConfig load_config(const std::string& path,
                                    const std::map<std::string, std::string>& env = process_environment()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c = config_from_json(apply_env_overrides(std::move(j), env));
    c.validate();
    return c;
}

// ------------------------------------------------------------------ content addressing

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of everything that determines a seed's trajectory (not the seed list
/// or where results go).
inline std::string config_hash(const ExperimentConfig& c) {
    json j = to_json(c);
    j.erase("seeds");
    j.erase("output_dir");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

inline fs::path run_directory(const ExperimentConfig& c) {
    return fs::path(c.output_dir) / (to_string(c.algorithm) + "-" + c.env + "-" + config_hash(c));
}

// ------------------------------------------------------------------ CSV

inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    std::size_t column(const std::string& name) const {
        const auto it = std::find(columns.begin(), columns.end(), name);
        if (it == columns.end()) throw std::out_of_range("no column " + name);
        return static_cast<std::size_t>(it - columns.begin());
    }
    bool has(const std::string& name) const {
        return std::find(columns.begin(), columns.end(), name) != columns.end();
    }
    std::vector<double> values(const std::string& name) const {
        const std::size_t c = column(name);
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(r[c]);
        return out;
    }

    std::string to_csv() const {
        std::ostringstream out;
        for (std::size_t i = 0; i < columns.size(); ++i) out << (i ? "," : "") << columns[i];
        out << '\n';
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << format_number(r[i]);
            out << '\n';
        }
        return out.str();
    }
};

inline Table read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    Table t;
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        return out;
    };
    if (!std::getline(in, line)) throw std::runtime_error("empty csv " + path.string());
    t.columns = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        for (const auto& cell : split(line)) row.push_back(cell == "nan" ? std::nan("") : std::stod(cell));
        if (row.size() != t.columns.size()) throw std::runtime_error("ragged row in " + path.string());
        t.rows.push_back(std::move(row));
    }
    return t;
}

/// Writes via a temporary file and rename, so readers never see partial files.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ------------------------------------------------------------------ training one seed

struct SeedResult {
    std::uint64_t seed = 0;
    Table curve;
    double wall_seconds = 0.0;
    bool reused = false;
};

struct RunOptions {
    bool quiet = false;
    bool write_checkpoint = true;
};

/// Exact discounted value of the algorithm's evaluation policy on the toy chain.
struct ToyValues {
    double natural = 0.0;  // the policy the algorithm optimizes, exploration noise excluded
    double greedy = 0.0;
};

inline ToyValues toy_values(const ToyPamdp& toy, const HierarchicalPolicy& pi, Algorithm alg, double temperature) {
    ToyValues v;
    const auto greedy = toy_table_greedy(toy, pi);
    v.greedy = toy_exact_policy_value(toy, greedy);
    if (alg == Algorithm::Patrpo) {
        const auto t = toy_table_stochastic(toy, pi);
        v.natural = toy_exact_policy_value(toy, t);
    } else {
        const auto t = toy_table_gumbel(toy, pi, temperature);
        v.natural = toy_exact_policy_value(toy, t);
    }
    return v;
}

/// Trains one seed and returns its learning curve. Nothing is written here.
inline SeedResult train_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts = {},
                             const fs::path& checkpoint = {}) {
    SeedResult res;
    res.seed = seed;
    const auto start = std::chrono::steady_clock::now();
    auto env = cfg.make_environment();
    const bool toy = cfg.env == "toy";
    const ToyPamdp* toy_env = toy ? dynamic_cast<const ToyPamdp*>(env.get()) : nullptr;
    Rng init_rng(seed * 0x9e3779b97f4a7c15ULL + 1);
    Rng run_rng = init_rng.split();

    auto log = [&](std::size_t epoch, double ret) {
        if (opts.quiet) return;
        std::cerr << to_string(cfg.algorithm) << " " << cfg.env << " seed " << seed << " epoch " << epoch + 1 << "/"
                  << cfg.epochs << " return " << format_number(ret) << "\n";
    };

    switch (cfg.algorithm) {
        case Algorithm::Patrpo: {
            PatrpoAgent agent(env->spec(), cfg.patrpo, init_rng);
            res.curve.columns = {"epoch",       "env_steps",   "episodes",         "mean_return",   "batch_rows",
                                 "kl",          "kl_analytic", "delta",            "surrogate_before",
                                 "surrogate_after", "expected_improve", "grad_norm", "backtracks", "accepted",
                                 "cg_iterations", "clamp_events", "entropy", "baseline_loss"};
            if (toy) res.curve.columns.insert(res.curve.columns.end(), {"exact_value", "exact_value_greedy"});
            for (std::size_t e = 0; e < cfg.epochs; ++e) {
                const PatrpoEpoch r = agent.train_epoch(*env, cfg.steps_per_epoch, run_rng);
                const auto& u = r.update;
                std::vector<double> row = {double(e),
                                           double((e + 1) * cfg.steps_per_epoch),
                                           double(r.episodes),
                                           r.mean_return,
                                           double(r.batch_rows),
                                           u.kl,
                                           u.kl_analytic,
                                           cfg.patrpo.trust_region.delta,
                                           u.surrogate_before,
                                           u.surrogate_after,
                                           u.expected_improve,
                                           u.grad_norm,
                                           double(u.backtracks),
                                           u.accepted ? 1.0 : 0.0,
                                           double(u.cg_iterations),
                                           double(u.clamp_events),
                                           r.entropy,
                                           r.baseline_loss};
                if (toy) {
                    const auto v = toy_values(*toy_env, agent.policy(), cfg.algorithm, 1.0);
                    row.push_back(v.natural);
                    row.push_back(v.greedy);
                }
                res.curve.rows.push_back(std::move(row));
                log(e, r.mean_return);
            }
            if (!checkpoint.empty()) {
                save_checkpoint(checkpoint.string(), agent.policy().params(), {{"network", "hierarchical_policy"}});
            }
            break;
        }
        case Algorithm::Pasvg0:
        case Algorithm::Paddpg: {
            const bool svg = cfg.algorithm == Algorithm::Pasvg0;
            std::unique_ptr<Svg0Agent> sv;
            std::unique_ptr<PaddpgAgent> pd;
            if (svg) {
                sv = std::make_unique<Svg0Agent>(env->spec(), cfg.pasvg0, init_rng);
            } else {
                pd = std::make_unique<PaddpgAgent>(env->spec(), cfg.paddpg, init_rng);
            }
            res.curve.columns = {"epoch",       "env_steps", "episodes",        "mean_return", "updates",
                                 "critic_loss", "mean_q",    "actor_objective", "replay_mismatches",
                                 "epsilon"};
            if (toy) res.curve.columns.insert(res.curve.columns.end(), {"exact_value", "exact_value_greedy"});
            for (std::size_t e = 0; e < cfg.epochs; ++e) {
                const OffPolicyEpoch r = svg ? sv->train_epoch(*env, cfg.steps_per_epoch, run_rng)
                                             : pd->train_epoch(*env, cfg.steps_per_epoch, run_rng);
                const double eps = svg ? 0.0 : cfg.paddpg.epsilon_at(pd->env_steps());
                std::vector<double> row = {double(e),         double(r.env_steps), double(r.episodes),
                                           r.mean_return,     double(r.updates),   r.critic_loss,
                                           r.mean_q,          r.actor_objective,   double(r.replay_mismatches),
                                           eps};
                if (toy) {
                    if (svg) {
                        const auto v = toy_values(*toy_env, sv->policy(), cfg.algorithm, cfg.pasvg0.temperature);
                        row.push_back(v.natural);
                        row.push_back(v.greedy);
                    } else {
                        const double v = toy_exact_policy_value(*toy_env, toy_table_paddpg(*toy_env, pd->actor()));
                        row.push_back(v);
                        row.push_back(v);
                    }
                }
                res.curve.rows.push_back(std::move(row));
                log(e, r.mean_return);
            }
            if (!checkpoint.empty()) {
                if (svg) {
                    save_checkpoint(checkpoint.string(), sv->policy().params(), {{"network", "hierarchical_policy"}});
                } else {
                    save_checkpoint(checkpoint.string(), pd->actor().params(), {{"network", "paddpg_actor"}});
                }
            }
            break;
        }
    }
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

// ------------------------------------------------------------------ aggregation

inline double finite_mean(const std::vector<double>& v) {
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v) {
        if (std::isfinite(x)) {
            s += x;
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : std::nan("");
}

/// Sample standard deviation (n - 1) over the finite entries; 0 for a single value.
inline double finite_std(const std::vector<double>& v) {
    const double m = finite_mean(v);
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v) {
        if (std::isfinite(x)) {
            s += (x - m) * (x - m);
            ++n;
        }
    }
    if (n == 0) return std::nan("");
    return n > 1 ? std::sqrt(s / static_cast<double>(n - 1)) : 0.0;
}

/// Per-epoch mean and std across seeds of every non-index column.
inline Table aggregate(const std::vector<Table>& curves) {
    if (curves.empty()) throw std::invalid_argument("aggregate: no curves");
    Table out;
    out.columns = {"epoch", "seeds"};
    const auto& cols = curves.front().columns;
    for (const auto& c : cols) {
        if (c == "epoch") continue;
        out.columns.push_back(c + "_mean");
        out.columns.push_back(c + "_std");
    }
    const std::size_t epochs = curves.front().rows.size();
    for (const auto& t : curves) {
        if (t.columns != cols || t.rows.size() != epochs) throw std::invalid_argument("aggregate: curve shapes differ");
    }
    for (std::size_t e = 0; e < epochs; ++e) {
        std::vector<double> row = {curves.front().rows[e][0], double(curves.size())};
        for (std::size_t c = 0; c < cols.size(); ++c) {
            if (cols[c] == "epoch") continue;
            std::vector<double> v;
            for (const auto& t : curves) v.push_back(t.rows[e][c]);
            row.push_back(finite_mean(v));
            row.push_back(finite_std(v));
        }
        out.rows.push_back(std::move(row));
    }
    return out;
}

/// Mean of the last k entries (finite only).
inline double tail_mean(const std::vector<double>& v, std::size_t k) {
    const std::size_t n = std::min(k, v.size());
    return finite_mean(std::vector<double>(v.end() - static_cast<std::ptrdiff_t>(n), v.end()));
}

inline std::size_t best_index(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::isfinite(v[i]) && (!std::isfinite(v[best]) || v[i] > v[best])) best = i;
    }
    return best;
}

struct ExperimentResult {
    fs::path directory;
    std::vector<SeedResult> seeds;
    Table aggregate;
    json summary;
};

inline json summarize(const ExperimentConfig& cfg, const std::vector<SeedResult>& seeds, const Table& agg) {
    const std::size_t tail = std::min<std::size_t>(10, cfg.epochs);
    json per_seed = json::array();
    std::vector<double> finals, tails;
    for (const auto& s : seeds) {
        const auto ret = s.curve.values("mean_return");
        const std::size_t b = best_index(ret);
        json j = {{"seed", s.seed},
                  {"best_epoch", b},
                  {"best_return", ret[b]},
                  {"final_return", ret.back()},
                  {"final10_return", tail_mean(ret, tail)},
                  {"wall_seconds", s.wall_seconds},
                  {"reused", s.reused}};
        if (s.curve.has("exact_value")) {
            const auto ev = s.curve.values("exact_value");
            j["final_exact_value"] = ev.back();
            j["best_exact_value"] = ev[best_index(ev)];
        }
        if (s.curve.has("replay_mismatches")) {
            double m = 0.0;
            for (double x : s.curve.values("replay_mismatches")) m += x;
            j["replay_mismatches"] = m;
        }
        if (s.curve.has("kl_analytic")) {
            const auto kl = s.curve.values("kl_analytic");
            const auto acc = s.curve.values("accepted");
            double worst = 0.0;
            std::size_t accepted = 0;
            for (std::size_t i = 0; i < kl.size(); ++i) {
                if (acc[i] > 0.5) {
                    ++accepted;
                    worst = std::max(worst, kl[i] / cfg.patrpo.trust_region.delta);
                }
            }
            j["accepted_updates"] = accepted;
            j["max_kl_over_delta"] = worst;
        }
        finals.push_back(ret.back());
        tails.push_back(tail_mean(ret, tail));
        per_seed.push_back(j);
    }
    const auto agg_ret = agg.values("mean_return_mean");
    const std::size_t best = best_index(agg_ret);
    double wall = 0.0;
    for (const auto& s : seeds) wall += s.wall_seconds;
    return {{"algorithm", to_string(cfg.algorithm)},
            {"env", cfg.env},
            {"config_hash", config_hash(cfg)},
            {"epochs", cfg.epochs},
            {"steps_per_epoch", cfg.steps_per_epoch},
            {"seeds", per_seed},
            {"aggregate",
             {{"best_epoch", best},
              {"best_return", agg_ret[best]},
              {"final_return_mean", finite_mean(finals)},
              {"final_return_std", finite_std(finals)},
              {"final10_return_mean", finite_mean(tails)},
              {"final10_return_std", finite_std(tails)}}},
            {"wall_seconds", wall}};
}

/// Runs every seed of `cfg` into its content-addressed directory. A seed whose
/// curve already exists (same config hash) is reused, never overwritten.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    cfg.validate();
    ExperimentResult out;
    out.directory = run_directory(cfg);
    fs::create_directories(out.directory);
    json resolved = to_json(cfg);
    const fs::path config_path = out.directory / "config.json";
    if (fs::exists(config_path)) {
        json existing = json::parse(read_file(config_path));
        existing.erase("seeds");
        existing.erase("output_dir");
        json mine = resolved;
        mine.erase("seeds");
        mine.erase("output_dir");
        if (existing != mine) throw std::runtime_error("config hash collision in " + out.directory.string());
    }
    write_file_atomic(config_path, resolved.dump(2) + "\n");

    std::vector<Table> curves;
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path csv = out.directory / ("seed-" + std::to_string(seed) + ".csv");
        SeedResult s;
        if (fs::exists(csv)) {
            s.seed = seed;
            s.curve = read_csv(csv);
            s.reused = true;
            if (s.curve.rows.size() != cfg.epochs) {
                throw std::runtime_error(csv.string() + " exists but is incomplete; remove it to rerun");
            }
            if (!opts.quiet) std::cerr << "reusing " << csv.string() << "\n";
        } else {
            const fs::path ckpt =
                opts.write_checkpoint ? out.directory / ("seed-" + std::to_string(seed) + ".ckpt") : fs::path{};
            s = train_seed(cfg, seed, opts, ckpt);
            write_file_atomic(csv, s.curve.to_csv());
            write_file_atomic(out.directory / ("seed-" + std::to_string(seed) + ".json"),
                              json{{"seed", seed}, {"wall_seconds", s.wall_seconds}}.dump(2) + "\n");
        }
        if (s.reused) {
            const fs::path meta = out.directory / ("seed-" + std::to_string(seed) + ".json");
            if (fs::exists(meta)) s.wall_seconds = json::parse(read_file(meta)).value("wall_seconds", 0.0);
        }
        curves.push_back(s.curve);
        out.seeds.push_back(std::move(s));
    }
    out.aggregate = aggregate(curves);
    out.summary = summarize(cfg, out.seeds, out.aggregate);
    std::string tag;
    for (auto s : cfg.seeds) tag += (tag.empty() ? "" : "-") + std::to_string(s);
    write_file_atomic(out.directory / ("aggregate-seeds-" + tag + ".csv"), out.aggregate.to_csv());
    write_file_atomic(out.directory / ("summary-seeds-" + tag + ".json"), out.summary.dump(2) + "\n");
    return out;
}

// ------------------------------------------------------------------ comparisons

struct Comparison {
    fs::path directory;
    std::vector<std::string> labels;
    std::vector<ExperimentResult> runs;
    Table combined;
};

/// Joins the mean/std return columns of several runs by epoch.
inline Table combine(const std::vector<std::string>& labels, const std::vector<ExperimentResult>& runs) {
    Table t;
    t.columns = {"epoch"};
    for (const auto& l : labels) {
        t.columns.push_back(l + "_return_mean");
        t.columns.push_back(l + "_return_std");
        t.columns.push_back(l + "_kl_analytic_mean");
    }
    const std::size_t epochs = runs.front().aggregate.rows.size();
    for (std::size_t e = 0; e < epochs; ++e) {
        std::vector<double> row = {double(e)};
        for (const auto& r : runs) {
            const auto& a = r.aggregate;
            row.push_back(a.rows[e][a.column("mean_return_mean")]);
            row.push_back(a.rows[e][a.column("mean_return_std")]);
            row.push_back(a.has("kl_analytic_mean") ? a.rows[e][a.column("kl_analytic_mean")] : std::nan(""));
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline std::string comparison_name(const std::string& kind, const ExperimentConfig& base) {
    ExperimentConfig c = base;
    c.patrpo.trust_region.kl_estimator = KlEstimator::ChainRuleAnalytic;
    c.patrpo.trust_region.delta = 0.0;
    std::string tag;
    for (auto s : base.seeds) tag += (tag.empty() ? "" : "-") + std::to_string(s);
    return kind + "-" + c.env + "-" + config_hash(c) + "-seeds-" + tag;
}

/// Repeated KL estimates on a fixed policy pair: mean and std over batches for
/// each estimator.
inline Table kl_variance_table(const ExperimentConfig& base, std::size_t batches, std::size_t batch_steps,
                               std::uint64_t seed) {
    auto env = base.make_environment();
    Rng rng(seed);
    HierarchicalPolicy old_pi(env->spec(), base.patrpo.policy, rng);
    HierarchicalPolicy new_pi = old_pi;
    Vector theta = new_pi.params().flat();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.02 * rng.normal();
    new_pi.params().assign(theta);

    const std::vector<KlEstimator> modes = {KlEstimator::SampledJoint, KlEstimator::ChainRuleSampled,
                                            KlEstimator::ChainRuleAnalytic};
    std::vector<std::vector<double>> est(modes.size());
    for (std::size_t b = 0; b < batches; ++b) {
        RolloutBatch batch = collect_rollouts(*env, old_pi, batch_steps, base.patrpo.trust_region.gamma, rng);
        for (std::size_t m = 0; m < modes.size(); ++m) {
            Graph g;
            auto bound = bind(g, new_pi.params());
            est[m].push_back(estimate_kl(new_pi, bound, batch, modes[m]).value().item());
        }
    }
    Table t;
    t.columns = {"estimator", "mean", "std", "batches"};
    for (std::size_t m = 0; m < modes.size(); ++m) {
        t.rows.push_back({double(m), finite_mean(est[m]), finite_std(est[m]), double(batches)});
    }
    return t;
}

inline Comparison compare_kl_estimators(const ExperimentConfig& base, const RunOptions& opts = {}) {
    if (base.algorithm != Algorithm::Patrpo) throw ConfigError("compare-kl requires algorithm patrpo");
    Comparison out;
    for (KlEstimator k : {KlEstimator::SampledJoint, KlEstimator::ChainRuleSampled, KlEstimator::ChainRuleAnalytic}) {
        ExperimentConfig c = base;
        c.patrpo.trust_region.kl_estimator = k;
        out.labels.push_back(to_string(k));
        out.runs.push_back(run_experiment(c, opts));
    }
    out.combined = combine(out.labels, out.runs);
    out.directory = fs::path(base.output_dir) / comparison_name("compare-kl", base);
    write_file_atomic(out.directory / "combined.csv", out.combined.to_csv());
    const Table var = kl_variance_table(base, 100, 1000, 12345);
    std::string csv = "estimator,mean,std,batches\n";
    for (const auto& r : var.rows) {
        csv += to_string(static_cast<KlEstimator>(static_cast<int>(r[0]))) + "," + format_number(r[1]) + "," +
               format_number(r[2]) + "," + format_number(r[3]) + "\n";
    }
    write_file_atomic(out.directory / "kl_variance.csv", csv);
    json runs = json::array();
    for (std::size_t i = 0; i < out.runs.size(); ++i) {
        runs.push_back({{"label", out.labels[i]}, {"directory", out.runs[i].directory.string()},
                        {"summary", out.runs[i].summary}});
    }
    write_file_atomic(out.directory / "summary.json", json{{"runs", runs}}.dump(2) + "\n");
    return out;
}

inline Comparison compare_step_sizes(const ExperimentConfig& base, const std::vector<double>& deltas,
                                     const RunOptions& opts = {}) {
    if (base.algorithm != Algorithm::Patrpo) throw ConfigError("compare-delta requires algorithm patrpo");
    if (deltas.empty()) throw ConfigError("compare-delta needs at least one delta");
    Comparison out;
    for (double d : deltas) {
        ExperimentConfig c = base;
        c.patrpo.trust_region.delta = d;
        c.validate();
        char label[40];
        std::snprintf(label, sizeof label, "delta_%g", d);
        out.labels.push_back(label);
        out.runs.push_back(run_experiment(c, opts));
    }
    out.combined = combine(out.labels, out.runs);
    out.directory = fs::path(base.output_dir) / comparison_name("compare-delta", base);
    write_file_atomic(out.directory / "combined.csv", out.combined.to_csv());
    json runs = json::array();
    for (std::size_t i = 0; i < out.runs.size(); ++i) {
        runs.push_back({{"label", out.labels[i]},
                        {"delta", deltas[i]},
                        {"directory", out.runs[i].directory.string()},
                        {"summary", out.runs[i].summary}});
    }
    write_file_atomic(out.directory / "summary.json", json{{"runs", runs}}.dump(2) + "\n");
    return out;
}

// ------------------------------------------------------------------ evaluation

struct EvalResult {
    std::vector<double> returns;
    double mean = 0.0;
};

/// Greedy rollouts of a checkpointed policy.
inline EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint,
                                      std::size_t episodes, std::uint64_t seed) {
    auto env = cfg.make_environment();
    Rng rng(seed);
    std::function<ParamAction(const std::vector<double>&)> act;
    HierarchicalPolicy pi;
    PaddpgActor actor;
    if (cfg.algorithm == Algorithm::Paddpg) {
        actor = PaddpgActor(env->spec(), cfg.paddpg.actor, rng);
        load_checkpoint(checkpoint, actor.params());
        act = [&](const std::vector<double>& s) { return actor.decode(actor.evaluate(s)); };
    } else {
        pi = HierarchicalPolicy(env->spec(),
                                cfg.algorithm == Algorithm::Patrpo ? cfg.patrpo.policy : cfg.pasvg0.policy, rng);
        load_checkpoint(checkpoint, pi.params());
        act = [&](const std::vector<double>& s) { return pi.act(s, rng, ActMode::Greedy).action; };
    }
    EvalResult out;
    for (std::size_t e = 0; e < episodes; ++e) {
        auto s = env->reset(rng);
        double ret = 0.0;
        for (std::size_t t = 0; t < env->spec().horizon; ++t) {
            const StepResult r = env->step(act(s));
            ret += r.reward;
            s = r.state;
            if (r.terminal) break;
        }
        out.returns.push_back(ret);
    }
    out.mean = finite_mean(out.returns);
    return out;
}

}  // namespace pamdp
