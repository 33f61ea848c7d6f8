#pragma once

// Experiment plumbing: configuration files, offline dataset protocols, seeded
// runs with periodic real-environment evaluation, metric/plot emission and
// the gap diagnostic.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "h2o/agents.hpp"
#include "h2o/data.hpp"
#include "h2o/decimal.hpp"
#include "h2o/envs.hpp"
#include "h2o/error.hpp"
#include "h2o/gap.hpp"
#include "h2o/nn.hpp"
#include "h2o/rng.hpp"

namespace h2o::harness {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class DatasetProtocol { file, random, medium, medium_replay };

inline const char* to_string(DatasetProtocol p) {
  switch (p) {
    case DatasetProtocol::file: return "file";
    case DatasetProtocol::random: return "random";
    case DatasetProtocol::medium: return "medium";
    case DatasetProtocol::medium_replay: return "medium_replay";
  }
  return "?";
}

inline DatasetProtocol protocol_from_string(const std::string& s) {
  if (s == "file") return DatasetProtocol::file;
  if (s == "random") return DatasetProtocol::random;
  if (s == "medium") return DatasetProtocol::medium;
  if (s == "medium_replay") return DatasetProtocol::medium_replay;
  throw InvalidInput("unknown dataset protocol '" + s + "'");
}

struct ExperimentConfig {
  agents::VariantConfig variant;
  agents::AgentConfig agent;
  envs::PendulumConfig real_env;
  envs::GapKind gap = envs::GapKind::gravity;

  DatasetProtocol protocol = DatasetProtocol::medium;
  std::string dataset_path;        // read when protocol == file
  std::size_t dataset_size = 50'000;
  long behaviour_steps = 100'000;  // SAC-on-real budget of the medium protocols
  long behaviour_eval_every = 2'000;

  long total_steps = 100'000;
  long eval_every = 2'000;
  int eval_episodes = 10;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t batch_size = 256;
  long random_steps = 1'000;       // uniform-random sim actions before the policy acts
  std::size_t buffer_capacity = 0; // 0: 10 x |D| for h2o variants, 1e6 otherwise
  bool write_checkpoints = true;

  int disc_hidden_units = 256;
  double disc_lr = 3e-4;
  bool disc_standardize = false;

  void validate() const {
    if (total_steps < 0) throw ConfigError("run.total_steps must be >= 0");
    if (eval_every <= 0) throw ConfigError("run.eval_every must be > 0");
    if (eval_episodes < 1) throw ConfigError("run.eval_episodes must be >= 1");
    if (batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
    if (random_steps < 0) throw ConfigError("run.random_steps must be >= 0");
    if (dataset_size < 1) throw ConfigError("data.size must be >= 1");
    if (protocol == DatasetProtocol::file && dataset_path.empty())
      throw ConfigError("data.path is required when data.protocol = file");
    if (variant.beta < 0 || variant.alpha_cql < 0) throw ConfigError("min-Q weights must be >= 0");
    if (variant.delta_r_clip < 0) throw ConfigError("variant.delta_r_clip must be >= 0");
    if (variant.gap_samples < 1) throw ConfigError("variant.gap_samples must be >= 1");
    if (variant.real_mix_ratio < 0 || variant.real_mix_ratio > 1)
      throw ConfigError("variant.real_mix_ratio must lie in [0,1]");
    if (variant.cql_num_actions < 1) throw ConfigError("variant.cql_num_actions must be >= 1");
    if (variant.discriminator_update_period < 1) throw ConfigError("variant.discriminator_update_period must be >= 1");
    if (agent.hidden_units < 1 || agent.hidden_layers < 1) throw ConfigError("agent network sizes must be >= 1");
    if (!(agent.gamma >= 0 && agent.gamma < 1)) throw ConfigError("agent.gamma must lie in [0,1)");
    if (!(agent.tau > 0 && agent.tau <= 1)) throw ConfigError("agent.tau must lie in (0,1]");
    if (agent.target_update_period < 1) throw ConfigError("agent.target_update_period must be >= 1");
    if (!(agent.lr > 0)) throw ConfigError("agent.lr must be > 0");
    if (disc_hidden_units < 1 || !(disc_lr > 0)) throw ConfigError("disc settings must be positive");
    try {
      real_env.validate();
    } catch (const InvalidInput& e) {
      throw ConfigError(e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Config files: `key = value` lines, `#` comments, dotted keys.
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
T parse_integer(std::string_view key, std::string_view v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("bad integer for " + std::string(key) + ": '" + std::string(v) + "'");
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean for " + std::string(key) + ": '" + std::string(v) + "'");
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Access>
Field real_field(std::string key, Access acc) {
  return {key,
          [acc, key](ExperimentConfig& c, std::string_view v) {
            try {
              acc(c) = parse_double(v);
            } catch (const InvalidInput&) {
              throw ConfigError("bad number for " + key + ": '" + std::string(v) + "'");
            }
          },
          [acc](const ExperimentConfig& c) { return format_double(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field int_field(std::string key, Access acc) {
  using T = std::remove_reference_t<decltype(acc(std::declval<ExperimentConfig&>()))>;
  return {key, [acc, key](ExperimentConfig& c, std::string_view v) { acc(c) = parse_integer<T>(key, v); },
          [acc](const ExperimentConfig& c) { return std::to_string(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field bool_field(std::string key, Access acc) {
  return {key, [acc, key](ExperimentConfig& c, std::string_view v) { acc(c) = parse_bool(key, v); },
          [acc](const ExperimentConfig& c) {
            return std::string(acc(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
          }};
}

template <class Access>
Field string_field(std::string key, Access acc) {
  return {key, [acc](ExperimentConfig& c, std::string_view v) { acc(c) = std::string(v); },
          [acc](const ExperimentConfig& c) { return acc(const_cast<ExperimentConfig&>(c)); }};
}

template <class Parse, class Print, class Access>
Field enum_field(std::string key, Access acc, Parse parse, Print print) {
  return {key,
          [acc, parse, key](ExperimentConfig& c, std::string_view v) {
            try {
              acc(c) = parse(std::string(v));
            } catch (const InvalidInput& e) {
              throw ConfigError(key + ": " + e.what());
            }
          },
          [acc, print](const ExperimentConfig& c) { return std::string(print(acc(const_cast<ExperimentConfig&>(c)))); }};
}

#define H2O_ACC(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    using envs::InitMode;
    std::vector<Field> v;
    v.push_back(enum_field("variant.algorithm", H2O_ACC(variant.algorithm), agents::algorithm_from_string,
                           [](agents::Algorithm a) { return agents::to_string(a); }));
    v.push_back(real_field("variant.beta", H2O_ACC(variant.beta)));
    v.push_back(real_field("variant.alpha_cql", H2O_ACC(variant.alpha_cql)));
    v.push_back(bool_field("variant.adaptive_omega", H2O_ACC(variant.adaptive_omega)));
    v.push_back(bool_field("variant.use_dynamics_ratio", H2O_ACC(variant.use_dynamics_ratio)));
    v.push_back(bool_field("variant.use_regularization", H2O_ACC(variant.use_regularization)));
    v.push_back(real_field("variant.delta_r_clip", H2O_ACC(variant.delta_r_clip)));
    v.push_back(int_field("variant.gap_samples", H2O_ACC(variant.gap_samples)));
    v.push_back(real_field("variant.real_mix_ratio", H2O_ACC(variant.real_mix_ratio)));
    v.push_back(bool_field("variant.sac_mix_real", H2O_ACC(variant.sac_mix_real)));
    v.push_back(int_field("variant.cql_num_actions", H2O_ACC(variant.cql_num_actions)));
    v.push_back(bool_field("variant.cql_importance_sampling", H2O_ACC(variant.cql_importance_sampling)));
    v.push_back(int_field("variant.discriminator_update_period", H2O_ACC(variant.discriminator_update_period)));

    v.push_back(int_field("agent.hidden_units", H2O_ACC(agent.hidden_units)));
    v.push_back(int_field("agent.hidden_layers", H2O_ACC(agent.hidden_layers)));
    v.push_back(real_field("agent.lr", H2O_ACC(agent.lr)));
    v.push_back(real_field("agent.gamma", H2O_ACC(agent.gamma)));
    v.push_back(real_field("agent.tau", H2O_ACC(agent.tau)));
    v.push_back(int_field("agent.target_update_period", H2O_ACC(agent.target_update_period)));
    v.push_back(real_field("agent.init_log_temperature", H2O_ACC(agent.init_log_temperature)));

    v.push_back(real_field("env.gravity", H2O_ACC(real_env.gravity)));
    v.push_back(real_field("env.mass", H2O_ACC(real_env.mass)));
    v.push_back(real_field("env.length", H2O_ACC(real_env.length)));
    v.push_back(real_field("env.damping", H2O_ACC(real_env.damping)));
    v.push_back(real_field("env.max_torque", H2O_ACC(real_env.max_torque)));
    v.push_back(real_field("env.dt", H2O_ACC(real_env.dt)));
    v.push_back(int_field("env.max_steps", H2O_ACC(real_env.max_steps)));
    v.push_back(enum_field(
        "env.init", H2O_ACC(real_env.init),
        [](const std::string& s) {
          if (s == "random") return InitMode::random;
          if (s == "hanging") return InitMode::hanging;
          throw InvalidInput("unknown init mode '" + s + "'");
        },
        [](InitMode m) { return m == InitMode::random ? "random" : "hanging"; }));
    v.push_back(enum_field("env.gap", H2O_ACC(gap), envs::gap_from_string,
                           [](envs::GapKind g) { return envs::to_string(g); }));

    v.push_back(enum_field("data.protocol", H2O_ACC(protocol), protocol_from_string,
                           [](DatasetProtocol p) { return to_string(p); }));
    v.push_back(string_field("data.path", H2O_ACC(dataset_path)));
    v.push_back(int_field("data.size", H2O_ACC(dataset_size)));
    v.push_back(int_field("data.behaviour_steps", H2O_ACC(behaviour_steps)));
    v.push_back(int_field("data.behaviour_eval_every", H2O_ACC(behaviour_eval_every)));

    v.push_back(int_field("run.total_steps", H2O_ACC(total_steps)));
    v.push_back(int_field("run.eval_every", H2O_ACC(eval_every)));
    v.push_back(int_field("run.eval_episodes", H2O_ACC(eval_episodes)));
    v.push_back(int_field("run.seed", H2O_ACC(seed)));
    v.push_back(string_field("run.out_dir", H2O_ACC(out_dir)));
    v.push_back(int_field("run.batch_size", H2O_ACC(batch_size)));
    v.push_back(int_field("run.random_steps", H2O_ACC(random_steps)));
    v.push_back(int_field("run.buffer_capacity", H2O_ACC(buffer_capacity)));
    v.push_back(bool_field("run.checkpoints", H2O_ACC(write_checkpoints)));

    v.push_back(int_field("disc.hidden_units", H2O_ACC(disc_hidden_units)));
    v.push_back(real_field("disc.lr", H2O_ACC(disc_lr)));
    v.push_back(bool_field("disc.standardize", H2O_ACC(disc_standardize)));
    return v;
  }();
  return f;
}

#undef H2O_ACC

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : detail::fields())
    if (f.key == key) {
      f.set(cfg, detail::trim(value));
      return;
    }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig cfg = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view s = line;
    if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    auto eq = s.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    set_config_value(cfg, detail::trim(s.substr(0, eq)), s.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return parse_config(in);
}

inline std::string config_to_string(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : detail::fields()) os << f.key << " = " << f.get(cfg) << '\n';
  return os.str();
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::fields()) j[f.key] = f.get(cfg);
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over episodes
  std::vector<double> returns;
};

inline EvalResult summarize_returns(std::vector<double> returns) {
  EvalResult r;
  const double n = static_cast<double>(returns.size());
  for (double x : returns) r.mean += x;
  r.mean /= n;
  for (double x : returns) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / n);
  r.returns = std::move(returns);
  return r;
}

/// Undiscounted returns of full episodes in `env` with actions chosen by `policy`.
inline EvalResult evaluate_policy_fn(const envs::PendulumConfig& env, const data::PolicyFn& policy, int episodes,
                                     std::uint64_t seed) {
  require(episodes >= 1, "evaluate_policy: episodes must be >= 1");
  Rng rng = Rng::stream(seed, "eval");
  std::vector<double> returns;
  for (int e = 0; e < episodes; ++e) {
    auto state = envs::pendulum_reset(env, rng);
    double total = 0.0;
    for (;;) {
      auto res = envs::pendulum_step(state, policy(state.observation())(0), env, rng);
      total += res.reward;
      if (res.done) break;
      state = res.state;
    }
    returns.push_back(total);
  }
  return summarize_returns(std::move(returns));
}

/// Deterministic-mode evaluation of an actor in the real environment.
inline EvalResult evaluate_policy(const envs::PendulumConfig& env, const nn::Mlp& actor, double max_action,
                                  int episodes, std::uint64_t seed) {
  data::PolicyFn f = [&](const VectorXd& obs) {
    return VectorXd(agents::policy_deterministic(actor, MatrixXd(obs.transpose()), max_action).action.row(0).transpose());
  };
  return evaluate_policy_fn(env, f, episodes, seed);
}

inline EvalResult evaluate_random_policy(const envs::PendulumConfig& env, int episodes, std::uint64_t seed) {
  Rng act_rng = Rng::stream(seed, "eval.random_actions");
  data::PolicyFn f = [&](const VectorXd&) {
    VectorXd a(1);
    a(0) = act_rng.uniform(-env.max_torque, env.max_torque);
    return a;
  };
  return evaluate_policy_fn(env, f, episodes, seed);
}

// ---------------------------------------------------------------------------
// Offline dataset protocols
// ---------------------------------------------------------------------------

inline constexpr double kMediumNoiseStd = 0.1;

struct BehaviourSnapshot {
  long step = 0;
  double return_mean = 0.0;
  nn::Mlp actor;
};

struct DatasetBuild {
  std::vector<data::Transition> transitions;
  double random_return = 0.0;
  double converged_return = 0.0;
  double threshold = 0.0;       // random + 0.5 (converged - random)
  long chosen_step = 0;
  double chosen_return = 0.0;
};

namespace detail {

inline agents::TrainingSession make_session(const agents::VariantConfig& v, const agents::AgentConfig& a,
                                            const envs::PendulumConfig& sim_env, std::size_t batch_size,
                                            long random_steps, std::size_t capacity, std::uint64_t seed) {
  agents::TrainingSession ts;
  ts.variant = v;
  Rng init = Rng::stream(seed, "init.agent");
  ts.agent = agents::AgentState::create(a, init);
  ts.sim_env = sim_env;
  ts.rng = agents::RngStreams::from_seed(seed);
  ts.sim_state = envs::pendulum_reset(sim_env, ts.rng.env);
  ts.buffer = data::ReplayBuffer(capacity);
  ts.batch_size = batch_size;
  ts.random_steps = random_steps;
  ts.target_entropy = -static_cast<double>(a.act_dim);
  return ts;
}

}  // namespace detail

/// Medium / medium-replay data: SAC trained directly in the real environment,
/// stopped at the first evaluation whose return reaches halfway between a
/// uniform-random policy and the run's best evaluation.
inline DatasetBuild build_medium_dataset(const ExperimentConfig& cfg, bool replay) {
  require(cfg.behaviour_steps > 0 && cfg.behaviour_eval_every > 0, "medium protocol: behaviour budget must be > 0");
  const std::uint64_t bseed = cfg.seed ^ 0x6265686176696f72ULL;
  agents::VariantConfig v;
  v.algorithm = agents::Algorithm::sac;
  auto ts = detail::make_session(v, cfg.agent, cfg.real_env, cfg.batch_size, cfg.random_steps,
                                 static_cast<std::size_t>(cfg.behaviour_steps), bseed);
  const int episodes = std::max(5, cfg.eval_episodes);
  DatasetBuild out;
  out.random_return = evaluate_random_policy(cfg.real_env, episodes, bseed).mean;

  std::vector<BehaviourSnapshot> snaps;
  for (long t = 1; t <= cfg.behaviour_steps; ++t) {
    agents::train_step(ts);
    if (t % cfg.behaviour_eval_every == 0 || t == cfg.behaviour_steps)
      snaps.push_back({t, evaluate_policy(cfg.real_env, ts.agent.actor, cfg.agent.max_action, episodes, bseed).mean,
                       ts.agent.actor});
  }
  out.converged_return = -std::numeric_limits<double>::infinity();
  for (const auto& s : snaps) out.converged_return = std::max(out.converged_return, s.return_mean);
  out.threshold = out.random_return + 0.5 * (out.converged_return - out.random_return);
  const BehaviourSnapshot* chosen = &snaps.back();
  for (const auto& s : snaps)
    if (s.return_mean >= out.threshold) {
      chosen = &s;
      break;
    }
  out.chosen_step = chosen->step;
  out.chosen_return = chosen->return_mean;

  if (replay) {
    // Everything the behaviour run had stored when the snapshot was taken.
    auto all = ts.buffer.ordered();
    const std::size_t end = std::min<std::size_t>(all.size(), static_cast<std::size_t>(chosen->step));
    out.transitions.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(end));
    for (auto& t : out.transitions) t.domain = data::Domain::real;
  } else {
    const nn::Mlp actor = chosen->actor;
    data::PolicyFn f = [&](const VectorXd& obs) {
      return VectorXd(
          agents::policy_deterministic(actor, MatrixXd(obs.transpose()), cfg.agent.max_action).action.row(0).transpose());
    };
    out.transitions =
        data::collect_dataset(cfg.real_env, f, cfg.dataset_size, kMediumNoiseStd, bseed, data::Domain::real);
  }
  return out;
}

inline DatasetBuild build_dataset(const ExperimentConfig& cfg) {
  DatasetBuild out;
  switch (cfg.protocol) {
    case DatasetProtocol::file:
      out.transitions = data::load_dataset(cfg.dataset_path);
      break;
    case DatasetProtocol::random: {
      Rng act_rng = Rng::stream(cfg.seed, "random.actions");
      const double m = cfg.real_env.max_torque;
      data::PolicyFn f = [&](const VectorXd&) {
        VectorXd a(1);
        a(0) = act_rng.uniform(-m, m);
        return a;
      };
      out.transitions = data::collect_dataset(cfg.real_env, f, cfg.dataset_size, 0.0, cfg.seed, data::Domain::real);
      break;
    }
    case DatasetProtocol::medium: return build_medium_dataset(cfg, false);
    case DatasetProtocol::medium_replay: return build_medium_dataset(cfg, true);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct EvalPoint {
  long step = 0;
  double return_mean = 0.0;
  double return_std = 0.0;
  // Training metrics averaged over the update steps since the previous point
  // (NaN when none happened).
  double loss_critic = std::numeric_limits<double>::quiet_NaN();
  double loss_actor = std::numeric_limits<double>::quiet_NaN();
  double mean_u = std::numeric_limits<double>::quiet_NaN();
  double mean_w = std::numeric_limits<double>::quiet_NaN();
  double omega_entropy = std::numeric_limits<double>::quiet_NaN();
};

struct RunReport {
  ExperimentConfig config;
  std::vector<EvalPoint> evals;
  std::vector<agents::StepMetrics> steps;
  long real_reads = 0;
  long env_steps = 0;
  std::string checkpoint_manifest;  // path, empty when not written
  double final_return_mean() const { return evals.back().return_mean; }
  double final_return_std() const { return evals.back().return_std; }
};

/// Everything a finished run leaves behind in memory.
struct RunResult {
  RunReport report;
  agents::TrainingSession session;
};

inline void save_checkpoint(const fs::path& dir, const agents::TrainingSession& ts, const ExperimentConfig& cfg) {
  fs::create_directories(dir);
  nlohmann::json files = nlohmann::json::object();
  auto put = [&](const std::string& name, const nn::Mlp& net) {
    const std::string file = name + ".mlp";
    nn::save_mlp((dir / file).string(), net);
    files[name] = file;
  };
  put("actor", ts.agent.actor);
  put("critic1", ts.agent.critic1);
  put("critic2", ts.agent.critic2);
  put("target1", ts.agent.target1);
  put("target2", ts.agent.target2);
  if (ts.variant.uses_discriminators()) {
    put("disc_sa", ts.pair.d_sa);
    put("disc_sas", ts.pair.d_sas);
  }
  nlohmann::json m;
  m["step"] = ts.step;
  m["algorithm"] = agents::to_string(ts.variant.algorithm);
  m["log_temperature"] = format_double(ts.agent.log_temperature);
  m["config"] = config_to_json(cfg);
  m["files"] = files;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << '\n';
}

/// Reloads the networks named in a checkpoint manifest.
inline std::map<std::string, nn::Mlp> load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad manifest: ") + e.what());
  }
  std::map<std::string, nn::Mlp> nets;
  for (auto& [name, file] : m.at("files").items()) nets[name] = nn::load_mlp((dir / file.get<std::string>()).string());
  return nets;
}

inline void emit_curves(const RunReport& report, const fs::path& dir);
inline void write_report_json(const RunReport& report, const fs::path& path);

namespace detail {

struct Accum {
  double critic = 0, actor = 0, u = 0, w = 0, h = 0;
  long n = 0, nu = 0, nw = 0;
  void add(const agents::StepMetrics& m) {
    if (!m.updated) return;
    ++n;
    critic += m.loss_critic;
    actor += m.loss_actor;
    h += m.omega_entropy;
    if (std::isfinite(m.mean_u)) {
      u += m.mean_u;
      ++nu;
    }
    if (std::isfinite(m.mean_w)) {
      w += m.mean_w;
      ++nw;
    }
  }
  void fill(EvalPoint& p) const {
    if (n == 0) return;
    p.loss_critic = critic / double(n);
    p.loss_actor = actor / double(n);
    p.omega_entropy = h / double(n);
    if (nu) p.mean_u = u / double(nu);
    if (nw) p.mean_w = w / double(nw);
  }
};

inline nlohmann::json metrics_json(const agents::StepMetrics& m) {
  return {{"step", m.step},
          {"loss_critic", format_double(m.loss_critic)},
          {"loss_actor", format_double(m.loss_actor)},
          {"loss_disc_sas", format_double(m.loss_disc_sas)},
          {"loss_disc_sa", format_double(m.loss_disc_sa)},
          {"mean_q", format_double(m.mean_q)},
          {"mean_u", format_double(m.mean_u)},
          {"mean_w", format_double(m.mean_w)},
          {"temperature", format_double(m.temperature)}};
}

inline void write_diagnostic_bundle(const ExperimentConfig& cfg, const agents::TrainingSession& ts,
                                    const agents::StepMetrics* last, const std::string& what) {
  if (cfg.out_dir.empty()) return;
  try {
    fs::path dir = fs::path(cfg.out_dir) / "diagnostic";
    fs::create_directories(dir);
    nlohmann::json j;
    j["error"] = what;
    j["step"] = ts.step;
    j["config"] = config_to_json(cfg);
    if (last) j["last_metrics"] = metrics_json(*last);
    std::ofstream(dir / "bundle.json") << j.dump(2) << '\n';
  } catch (...) {
    // The original failure is more informative than a secondary I/O error.
  }
}

}  // namespace detail

/// Trains for cfg.total_steps on a prepared dataset, evaluating at step 0,
/// every eval_every steps and at the end.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::vector<data::Transition> dataset) {
  cfg.validate();
  const auto& v = cfg.variant;
  if ((v.uses_real_for_training() || v.uses_discriminators()) && dataset.empty())
    throw InvalidInput("run_experiment: variant needs a non-empty offline dataset");
  const envs::PendulumConfig sim_env = envs::make_gap_variant(cfg.real_env, cfg.gap);

  std::size_t capacity = cfg.buffer_capacity;
  if (capacity == 0) capacity = v.is_h2o() ? std::max<std::size_t>(1, 10 * dataset.size()) : 1'000'000;

  RunResult res;
  res.report.config = cfg;
  auto& ts = res.session;
  ts = detail::make_session(v, cfg.agent, sim_env, cfg.batch_size, cfg.random_steps, capacity, cfg.seed);
  ts.dataset = std::move(dataset);
  if (v.uses_discriminators()) {
    Rng init = Rng::stream(cfg.seed, "init.disc");
    ts.pair = gap::DiscriminatorPair::create(cfg.agent.obs_dim, cfg.agent.act_dim, cfg.disc_hidden_units, init,
                                             cfg.disc_lr);
    if (cfg.disc_standardize) ts.pair.fit_standardization(ts.dataset);
  }
  if (v.is_h2o() && v.adaptive_omega) ts.cov = data::state_covariance(ts.dataset);

  const std::uint64_t eval_seed = cfg.seed ^ 0x6576616c75617465ULL;
  auto eval_point = [&](long step, const detail::Accum& acc) {
    EvalResult e = evaluate_policy(cfg.real_env, ts.agent.actor, cfg.agent.max_action, cfg.eval_episodes, eval_seed);
    EvalPoint p;
    p.step = step;
    p.return_mean = e.mean;
    p.return_std = e.std;
    acc.fill(p);
    res.report.evals.push_back(p);
  };

  eval_point(0, {});
  detail::Accum acc;
  res.report.steps.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (long t = 1; t <= cfg.total_steps; ++t) {
    agents::StepMetrics m;
    try {
      m = agents::train_step(ts);
    } catch (const std::exception& e) {
      detail::write_diagnostic_bundle(cfg, ts, res.report.steps.empty() ? nullptr : &res.report.steps.back(),
                                      e.what());
      throw;
    }
    res.report.real_reads += m.real_reads;
    res.report.env_steps += m.env_steps;
    acc.add(m);
    res.report.steps.push_back(m);
    if (t % cfg.eval_every == 0 || t == cfg.total_steps) {
      eval_point(t, acc);
      acc = {};
    }
  }

  if (!cfg.out_dir.empty()) {
    const fs::path out = cfg.out_dir;
    fs::create_directories(out);
    emit_curves(res.report, out);
    if (cfg.write_checkpoints) {
      save_checkpoint(out / "checkpoints", ts, cfg);
      res.report.checkpoint_manifest = (out / "checkpoints" / "manifest.json").string();
    }
    write_report_json(res.report, out / "report.json");
  }
  return res;
}

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<data::Transition> d;
  if (cfg.variant.uses_real_for_training() || cfg.variant.uses_discriminators()) d = build_dataset(cfg).transitions;
  return run_experiment(cfg, std::move(d));
}

// ---------------------------------------------------------------------------
// Gap diagnostic
// ---------------------------------------------------------------------------

struct DiagnosticRow {
  double feature;  // |theta_dot| of the probe state
  double u;
  double q;        // min(Q1, Q2)
};

inline std::vector<DiagnosticRow> gap_diagnostic(const agents::AgentState& agent, const gap::DiscriminatorPair& pair,
                                                 const data::StateCovariance& cov, const data::Batch& probes,
                                                 int n_samples, Rng& rng) {
  std::vector<DiagnosticRow> rows;
  if (probes.size() == 0) return rows;
  const VectorXd u = gap::gap_measure_u(pair, probes.s, probes.a, probes.s_next, cov, n_samples, rng);
  const VectorXd q = agents::min_q(agent, probes.s, probes.a);
  rows.reserve(static_cast<std::size_t>(probes.size()));
  for (Eigen::Index i = 0; i < probes.size(); ++i)
    rows.push_back({std::abs(probes.s(i, probes.s.cols() - 1)), u(i), q(i)});
  return rows;
}

struct QuartileMeans {
  double bottom_u = 0.0;  // mean u over the lowest-feature quarter
  double top_u = 0.0;     // mean u over the highest-feature quarter
};

inline QuartileMeans quartile_means(std::vector<DiagnosticRow> rows) {
  require(rows.size() >= 4, "quartile_means: need at least 4 rows");
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.feature < b.feature; });
  const std::size_t k = rows.size() / 4;
  QuartileMeans q;
  for (std::size_t i = 0; i < k; ++i) {
    q.bottom_u += rows[i].u;
    q.top_u += rows[rows.size() - 1 - i].u;
  }
  q.bottom_u /= double(k);
  q.top_u /= double(k);
  return q;
}

inline void write_diagnostic_csv(const std::vector<DiagnosticRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "feature,u,q\n";
  for (const auto& r : rows)
    out << format_double(r.feature) << ',' << format_double(r.u) << ',' << format_double(r.q) << '\n';
}

// ---------------------------------------------------------------------------
// Curves and reports
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader = "step,return_mean,return_std,loss_critic,loss_actor,mean_u,mean_w";

inline void write_metrics_csv(const RunReport& report, std::ostream& out) {
  out << kMetricsHeader << '\n';
  for (const auto& p : report.evals)
    out << p.step << ',' << format_double(p.return_mean) << ',' << format_double(p.return_std) << ','
        << format_double(p.loss_critic) << ',' << format_double(p.loss_actor) << ',' << format_double(p.mean_u) << ','
        << format_double(p.mean_w) << '\n';
}

inline std::vector<EvalPoint> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw IoError("metrics csv: bad header");
  std::vector<EvalPoint> pts;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != 7) throw IoError("metrics csv: expected 7 columns");
    try {
      EvalPoint p;
      p.step = detail::parse_integer<long>("step", cells[0]);
      p.return_mean = parse_double(cells[1]);
      p.return_std = parse_double(cells[2]);
      p.loss_critic = parse_double(cells[3]);
      p.loss_actor = parse_double(cells[4]);
      p.mean_u = parse_double(cells[5]);
      p.mean_w = parse_double(cells[6]);
      pts.push_back(p);
    } catch (const std::exception& e) {
      throw IoError(std::string("metrics csv: ") + e.what());
    }
  }
  return pts;
}

struct Curve {
  std::string label;
  std::vector<double> x, y;
};

/// Self-contained SVG line chart; one polyline (and markers) per curve.
inline std::string render_svg(const std::vector<Curve>& curves, const std::string& title) {
  require(!curves.empty(), "render_svg: no curves");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      x0 = std::min(x0, c.x[i]);
      x1 = std::max(x1, c.x[i]);
      y0 = std::min(y0, c.y[i]);
      y1 = std::max(y1, c.y[i]);
    }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) {
    y0 -= 1.0;
    y1 += 1.0;
  }
  const double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
    << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  auto label = [&](double x, double y, const std::string& text, const char* anchor) {
    s << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << text << "</text>\n";
  };
  std::ostringstream n;
  n.precision(4);
  auto num = [&](double v) {
    n.str("");
    n << v;
    return n.str();
  };
  label(L, H - B + 16, num(x0), "middle");
  label(W - R, H - B + 16, num(x1), "middle");
  label(L - 6, H - B, num(y0), "end");
  label(L - 6, T + 4, num(y1), "end");
  label((L + W - R) / 2, H - 12, "step", "middle");
  label(16, (T + H - B) / 2, "return", "middle");
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& c = curves[k];
    const char* col = colors[k % (sizeof(colors) / sizeof(colors[0]))];
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < c.x.size(); ++i) s << (i ? " " : "") << px(c.x[i]) << ',' << py(c.y[i]);
    s << "\"/>\n";
    for (std::size_t i = 0; i < c.x.size(); ++i)
      s << "<circle cx=\"" << px(c.x[i]) << "\" cy=\"" << py(c.y[i]) << "\" r=\"2.5\" fill=\"" << col << "\"/>\n";
    if (!c.label.empty()) {
      s << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (k + 1) << "\" text-anchor=\"end\" fill=\"" << col
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << c.label << "</text>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

inline Curve curve_of(const RunReport& r, std::string label = {}) {
  Curve c;
  c.label = std::move(label);
  for (const auto& p : r.evals) {
    c.x.push_back(static_cast<double>(p.step));
    c.y.push_back(p.return_mean);
  }
  return c;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline void emit_curves(const RunReport& report, const fs::path& dir) {
  require(!report.evals.empty(), "emit_curves: empty report");
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ostringstream csv;
  write_metrics_csv(report, csv);
  write_text(dir / "metrics.csv", csv.str());
  const auto& c = report.config;
  write_text(dir / "curve.svg", render_svg({curve_of(report)}, std::string(agents::to_string(c.variant.algorithm)) +
                                                                   " / " + envs::to_string(c.gap) + " / seed " +
                                                                   std::to_string(c.seed)));
}

/// Overlay of several runs (e.g. seeds), one polyline each.
inline void emit_overlay(const std::vector<RunReport>& reports, const std::vector<std::string>& labels,
                         const fs::path& path, const std::string& title) {
  require(!reports.empty() && reports.size() == labels.size(), "emit_overlay: label count mismatch");
  std::vector<Curve> curves;
  for (std::size_t i = 0; i < reports.size(); ++i) curves.push_back(curve_of(reports[i], labels[i]));
  write_text(path, render_svg(curves, title));
}

inline nlohmann::json report_json(const std::vector<RunReport>& runs) {
  nlohmann::json j;
  const auto& c = runs.front().config;
  j["algorithm"] = agents::to_string(c.variant.algorithm);
  j["gap"] = envs::to_string(c.gap);
  j["total_steps"] = c.total_steps;
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& r : runs)
    seeds.push_back({{"seed", r.config.seed},
                     {"final_return_mean", r.final_return_mean()},
                     {"final_return_std", r.final_return_std()},
                     {"real_reads", r.real_reads},
                     {"env_steps", r.env_steps}});
  j["seeds"] = seeds;
  return j;
}

inline void write_report_json(const RunReport& report, const fs::path& path) {
  write_text(path, report_json({report}).dump(2) + "\n");
}

}  // namespace h2o::harness
