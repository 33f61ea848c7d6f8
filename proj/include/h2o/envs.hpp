#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "h2o/error.hpp"
#include "h2o/rng.hpp"

namespace h2o::envs {

// ---------------------------------------------------------------------------
// Pendulum swing-up
// ---------------------------------------------------------------------------

enum class InitMode { random, hanging };

struct PendulumConfig {
  double gravity = 10.0;
  double mass = 1.0;
  double length = 1.0;
  double damping = 0.1;
  double max_torque = 2.0;
  double dt = 0.05;
  int max_steps = 200;
  double action_noise_std = 0.0;
  // Extra torque-noise std per unit of |theta_dot| (speed-dependent gap).
  double velocity_noise_scale = 0.0;
  // Keeps per-step rewards positive: theta^2 + 0.1 thdot^2 + 0.001 tau^2 < 17.
  double reward_shift = 17.0;
  InitMode init = InitMode::random;

  void validate() const {
    require(gravity > 0 && mass > 0 && length > 0 && dt > 0, "pendulum: gravity, mass, length, dt must be > 0");
    require(damping >= 0, "pendulum: damping must be >= 0");
    require(max_torque > 0, "pendulum: max_torque must be > 0");
    require(max_steps > 0, "pendulum: max_steps must be > 0");
    require(action_noise_std >= 0 && velocity_noise_scale >= 0, "pendulum: noise must be >= 0");
  }

  bool operator==(const PendulumConfig&) const = default;
};

inline constexpr double kMaxSpeed = 8.0;
inline constexpr int kObsDim = 3;
inline constexpr int kActDim = 1;

/// Maps an angle to (-pi, pi]; pi itself stays at +pi.
inline double wrap_angle(double x) {
  constexpr double pi = std::numbers::pi;
  return x - 2.0 * pi * std::ceil((x - pi) / (2.0 * pi));
}

struct PendulumState {
  double theta = 0.0;
  double theta_dot = 0.0;
  int elapsed_steps = 0;

  Eigen::VectorXd observation() const {
    Eigen::VectorXd o(kObsDim);
    o << std::cos(theta), std::sin(theta), theta_dot;
    return o;
  }
};

struct StepResult {
  PendulumState state;
  double reward;
  bool done;  // time limit reached
};

inline PendulumState pendulum_reset(const PendulumConfig& cfg, Rng& rng) {
  PendulumState s;
  if (cfg.init == InitMode::hanging) {
    s.theta = std::numbers::pi;
  } else {
    s.theta = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
    s.theta_dot = rng.uniform(-1.0, 1.0);
  }
  return s;
}

/// Total mechanical energy with the upright position as theta = 0.
inline double pendulum_energy(const PendulumState& s, const PendulumConfig& cfg) {
  const double inertia = cfg.mass * cfg.length * cfg.length / 3.0;
  return 0.5 * inertia * s.theta_dot * s.theta_dot + 0.5 * cfg.mass * cfg.gravity * cfg.length * std::cos(s.theta);
}

/// One semi-implicit Euler step. Noise (if any) perturbs the applied torque;
/// the reward is charged on the commanded torque.
inline StepResult pendulum_step(const PendulumState& state, double action, const PendulumConfig& cfg, Rng& rng) {
  if (!std::isfinite(action)) throw InvalidInput("pendulum_step: non-finite action");
  const double g = cfg.gravity, m = cfg.mass, l = cfg.length, dt = cfg.dt;
  const double torque = std::clamp(action, -cfg.max_torque, cfg.max_torque);
  const double noise_std = cfg.action_noise_std + cfg.velocity_noise_scale * std::abs(state.theta_dot);
  const double applied = noise_std > 0.0 ? torque + rng.normal(0.0, noise_std) : torque;

  const double th = wrap_angle(state.theta);
  const double cost = th * th + 0.1 * state.theta_dot * state.theta_dot + 0.001 * torque * torque;

  const double accel = 3.0 * g / (2.0 * l) * std::sin(state.theta) + 3.0 / (m * l * l) * applied -
                       cfg.damping * state.theta_dot;
  PendulumState next;
  next.theta_dot = std::clamp(state.theta_dot + accel * dt, -kMaxSpeed, kMaxSpeed);
  next.theta = wrap_angle(state.theta + next.theta_dot * dt);
  next.elapsed_steps = state.elapsed_steps + 1;
  return {next, cfg.reward_shift - cost, next.elapsed_steps >= cfg.max_steps};
}

enum class GapKind { none, gravity, friction, joint_noise, velocity_noise };

inline GapKind gap_from_string(const std::string& s) {
  if (s == "none") return GapKind::none;
  if (s == "gravity") return GapKind::gravity;
  if (s == "friction") return GapKind::friction;
  if (s == "joint_noise") return GapKind::joint_noise;
  if (s == "velocity_noise") return GapKind::velocity_noise;
  throw InvalidInput("unknown gap kind '" + s + "'");
}

inline const char* to_string(GapKind g) {
  switch (g) {
    case GapKind::none: return "none";
    case GapKind::gravity: return "gravity";
    case GapKind::friction: return "friction";
    case GapKind::joint_noise: return "joint_noise";
    case GapKind::velocity_noise: return "velocity_noise";
  }
  return "?";
}

/// Simulator counterpart of a real configuration.
/// gravity x2, damping x0.3, N(0,1) torque noise; velocity_noise scales the
/// noise std with |theta_dot| (std 2 at the speed limit).
inline PendulumConfig make_gap_variant(const PendulumConfig& base, GapKind kind) {
  base.validate();
  PendulumConfig sim = base;
  switch (kind) {
    case GapKind::none: break;
    case GapKind::gravity: sim.gravity = 2.0 * base.gravity; break;
    case GapKind::friction: sim.damping = 0.3 * base.damping; break;
    case GapKind::joint_noise: sim.action_noise_std = 1.0; break;
    case GapKind::velocity_noise: sim.velocity_noise_scale = 0.25; break;
  }
  return sim;
}

// ---------------------------------------------------------------------------
// Tabular MDP pairs
// ---------------------------------------------------------------------------

/// Real and simulated dynamics over a shared finite state/action space.
/// Transition matrices have one row per (s, a) pair at index s * n_actions + a.
struct TabularMdpPair {
  int n_states = 0;
  int n_actions = 0;
  Eigen::MatrixXd p_real;   // (S*A) x S
  Eigen::MatrixXd p_sim;    // (S*A) x S
  Eigen::MatrixXd reward;   // S x A
  double gamma = 0.9;
  double r_max = 1.0;
  Eigen::VectorXd initial_distribution;

  Eigen::Index row(int s, int a) const { return static_cast<Eigen::Index>(s) * n_actions + a; }

  void validate() const {
    require(n_states > 0 && n_actions > 0, "tabular: empty state/action space");
    require(gamma > 0 && gamma < 1, "tabular: gamma must lie in (0,1)");
    const Eigen::Index rows = static_cast<Eigen::Index>(n_states) * n_actions;
    require(p_real.rows() == rows && p_real.cols() == n_states && p_sim.rows() == rows && p_sim.cols() == n_states,
            "tabular: transition shape mismatch");
    require(reward.rows() == n_states && reward.cols() == n_actions, "tabular: reward shape mismatch");
    for (const auto* p : {&p_real, &p_sim}) {
      require((p->array() >= 0.0).all(), "tabular: negative transition probability");
      for (Eigen::Index r = 0; r < rows; ++r)
        require(std::abs(p->row(r).sum() - 1.0) <= 1e-12, "tabular: transition row does not sum to 1");
    }
    require((reward.array() >= 0.0).all() && (reward.array() <= r_max).all(), "tabular: reward outside [0, R_max]");
    require(initial_distribution.size() == n_states && std::abs(initial_distribution.sum() - 1.0) <= 1e-12,
            "tabular: bad initial distribution");
  }
};

inline Eigen::VectorXd dirichlet_ones(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.gamma(1.0);
  return v / v.sum();
}

/// Random real/sim pair. P_sim rows mix P_real with an independent
/// Dirichlet draw; gap_scale = 0 gives P_sim == P_real exactly.
inline TabularMdpPair random_tabular_pair(std::uint64_t seed, int n_states, int n_actions, double gap_scale,
                                          double gamma = 0.9, double r_max = 1.0) {
  require(n_states >= 2 && n_actions >= 2, "random_tabular_pair: need at least 2 states and 2 actions");
  require(gap_scale >= 0.0 && gap_scale <= 1.0, "random_tabular_pair: gap_scale must lie in [0,1]");
  Rng rng(seed);
  TabularMdpPair m;
  m.n_states = n_states;
  m.n_actions = n_actions;
  m.gamma = gamma;
  m.r_max = r_max;
  const Eigen::Index rows = static_cast<Eigen::Index>(n_states) * n_actions;
  m.p_real.resize(rows, n_states);
  m.p_sim.resize(rows, n_states);
  for (Eigen::Index r = 0; r < rows; ++r) m.p_real.row(r) = dirichlet_ones(n_states, rng).transpose();
  for (Eigen::Index r = 0; r < rows; ++r) {
    Eigen::RowVectorXd q = dirichlet_ones(n_states, rng).transpose();
    if (gap_scale == 0.0) {
      m.p_sim.row(r) = m.p_real.row(r);
    } else {
      Eigen::RowVectorXd mix = (1.0 - gap_scale) * m.p_real.row(r) + gap_scale * q;
      m.p_sim.row(r) = mix / mix.sum();
    }
  }
  m.reward.resize(n_states, n_actions);
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) m.reward(s, a) = rng.uniform(0.0, r_max);
  m.initial_distribution = Eigen::VectorXd::Constant(n_states, 1.0 / n_states);
  return m;
}

struct TabularSample {
  int next_state;
  double reward;
};

/// Draws s' from row (s, a) of `transitions` by inverse CDF.
inline TabularSample tabular_sample(const Eigen::MatrixXd& transitions, const Eigen::MatrixXd& reward, int s, int a,
                                    Rng& rng) {
  const int n_states = static_cast<int>(transitions.cols());
  const int n_actions = static_cast<int>(reward.cols());
  if (s < 0 || s >= n_states || a < 0 || a >= n_actions)
    throw InvalidInput("tabular_sample: index out of range (s=" + std::to_string(s) + ", a=" + std::to_string(a) +
                       ")");
  const auto row = transitions.row(static_cast<Eigen::Index>(s) * n_actions + a);
  const double u = rng.uniform();
  double acc = 0.0;
  int last_positive = 0;
  for (int j = 0; j < n_states; ++j) {
    if (row(j) <= 0.0) continue;
    last_positive = j;
    acc += row(j);
    if (u < acc) return {j, reward(s, a)};
  }
  return {last_positive, reward(s, a)};
}

}  // namespace h2o::envs
