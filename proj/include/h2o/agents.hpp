#pragma once

// Soft actor-critic backbone and the algorithm variants built on it:
// SAC (sim only), CQL (offline real data), DARC and DARC+ (discriminator
// reward correction), and dynamics-aware H2O / H2O(v).
//
// Every critic loss returns its value together with exact gradients for both
// critics; Bellman targets, gap weights omega and importance weights w are
// inputs, i.e. treated as constants.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include "h2o/data.hpp"
#include "h2o/envs.hpp"
#include "h2o/error.hpp"
#include "h2o/gap.hpp"
#include "h2o/nn.hpp"
#include "h2o/rng.hpp"

namespace h2o::agents {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nn::Mlp;
using nn::Params;

enum class Algorithm { sac, cql, darc, darc_plus, h2o, h2o_v };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::sac: return "sac";
    case Algorithm::cql: return "cql";
    case Algorithm::darc: return "darc";
    case Algorithm::darc_plus: return "darc_plus";
    case Algorithm::h2o: return "h2o";
    case Algorithm::h2o_v: return "h2o_v";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "sac") return Algorithm::sac;
  if (s == "cql") return Algorithm::cql;
  if (s == "darc") return Algorithm::darc;
  if (s == "darc_plus" || s == "darc+") return Algorithm::darc_plus;
  if (s == "h2o") return Algorithm::h2o;
  if (s == "h2o_v" || s == "h2o(v)") return Algorithm::h2o_v;
  throw InvalidInput("unknown algorithm '" + s + "'");
}

struct VariantConfig {
  Algorithm algorithm = Algorithm::h2o;
  double beta = 0.01;       // min-Q weight of H2O / H2O(v)
  double alpha_cql = 2.0;   // min-Q weight of CQL
  // Ablation switches, meaningful for h2o / h2o_v only.
  bool adaptive_omega = true;
  bool use_dynamics_ratio = true;
  bool use_regularization = true;
  double delta_r_clip = 10.0;  // DARC reward correction clipped to [-c, c]
  int gap_samples = 10;        // N draws per u(s, a)
  double real_mix_ratio = 0.5; // share of real states in the policy-improvement batch
  // SAC trained on mixed real+sim batches; reference point of the ablation lattice.
  bool sac_mix_real = false;
  int cql_num_actions = 10;    // per source (policy, uniform)
  bool cql_importance_sampling = true;
  int discriminator_update_period = 1;

  bool uses_sim() const { return algorithm != Algorithm::cql; }
  bool uses_real_for_training() const {
    return algorithm == Algorithm::cql || algorithm == Algorithm::darc_plus || algorithm == Algorithm::h2o ||
           algorithm == Algorithm::h2o_v || (algorithm == Algorithm::sac && sac_mix_real);
  }
  bool uses_discriminators() const {
    return algorithm == Algorithm::darc || algorithm == Algorithm::darc_plus || algorithm == Algorithm::h2o ||
           algorithm == Algorithm::h2o_v;
  }
  bool is_h2o() const { return algorithm == Algorithm::h2o || algorithm == Algorithm::h2o_v; }
};

struct AgentConfig {
  int obs_dim = envs::kObsDim;
  int act_dim = envs::kActDim;
  double max_action = 2.0;
  int hidden_units = 256;
  int hidden_layers = 2;
  double lr = 3e-4;
  double gamma = 0.99;
  double tau = 5e-3;
  int target_update_period = 1;
  double init_log_temperature = 0.0;
};

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

struct AgentState {
  AgentConfig cfg;
  Mlp actor;  // obs -> [mean, log_std]
  Mlp critic1, critic2;
  Mlp target1, target2;
  nn::AdamState actor_opt, critic1_opt, critic2_opt;
  double log_temperature = 0.0;
  nn::ScalarAdam temperature_opt;

  double temperature() const { return std::exp(log_temperature); }

  static AgentState create(const AgentConfig& cfg, Rng& rng) {
    require(cfg.obs_dim > 0 && cfg.act_dim > 0 && cfg.hidden_units > 0 && cfg.hidden_layers >= 1,
            "AgentConfig: dimensions must be positive");
    require(cfg.gamma >= 0 && cfg.gamma < 1, "AgentConfig: gamma must lie in [0,1)");
    require(cfg.target_update_period >= 1, "AgentConfig: target_update_period must be >= 1");
    auto sizes = [&](int in, int out) {
      std::vector<int> s{in};
      for (int i = 0; i < cfg.hidden_layers; ++i) s.push_back(cfg.hidden_units);
      s.push_back(out);
      return s;
    };
    AgentState a;
    a.cfg = cfg;
    a.actor = Mlp::create(sizes(cfg.obs_dim, 2 * cfg.act_dim), nn::Activation::identity, rng);
    a.critic1 = Mlp::create(sizes(cfg.obs_dim + cfg.act_dim, 1), nn::Activation::identity, rng);
    a.critic2 = Mlp::create(sizes(cfg.obs_dim + cfg.act_dim, 1), nn::Activation::identity, rng);
    a.target1 = a.critic1;
    a.target2 = a.critic2;
    a.actor_opt = nn::AdamState::for_params(a.actor, cfg.lr);
    a.critic1_opt = nn::AdamState::for_params(a.critic1, cfg.lr);
    a.critic2_opt = nn::AdamState::for_params(a.critic2, cfg.lr);
    a.log_temperature = cfg.init_log_temperature;
    a.temperature_opt.lr = cfg.lr;
    return a;
  }

  const Mlp& critic(int k) const { return k == 0 ? critic1 : critic2; }
  Mlp& critic(int k) { return k == 0 ? critic1 : critic2; }
  const Mlp& target(int k) const { return k == 0 ? target1 : target2; }
};

inline MatrixXd critic_input(const MatrixXd& s, const MatrixXd& a) {
  require(s.rows() == a.rows(), "critic input: row mismatch");
  MatrixXd x(s.rows(), s.cols() + a.cols());
  x << s, a;
  return x;
}

inline VectorXd q_values(const Mlp& critic, const MatrixXd& s, const MatrixXd& a) {
  return nn::forward(critic, critic_input(s, a)).col(0);
}

inline VectorXd min_q(const AgentState& ag, const MatrixXd& s, const MatrixXd& a) {
  return q_values(ag.critic1, s, a).cwiseMin(q_values(ag.critic2, s, a));
}

// ---------------------------------------------------------------------------
// Tanh-squashed Gaussian policy
// ---------------------------------------------------------------------------

namespace detail {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// log(1 - tanh(u)^2), stable for large |u|.
inline double log1m_tanh2(double u) { return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u)); }

}  // namespace detail

struct PolicySample {
  MatrixXd action;    // tanh(u) * max_action
  VectorXd log_prob;  // log density of `action`
  // Intermediates for reparameterized gradients.
  MatrixXd noise, pre_tanh, mean, log_std;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> log_std_clamped;
  nn::Tape tape;
};

/// Samples a = tanh(mu + sigma * xi) * max_action with the given standard
/// normal noise xi (zero noise gives the deterministic action).
inline PolicySample policy_sample_with_noise(const Mlp& actor, const MatrixXd& s, double max_action,
                                             const MatrixXd& noise) {
  const Eigen::Index d = actor.output_dim() / 2;
  require(noise.rows() == s.rows() && noise.cols() == d, "policy sample: noise shape mismatch");
  PolicySample ps;
  ps.tape = nn::forward_tape(actor, s);
  ps.mean = ps.tape.output.leftCols(d);
  MatrixXd raw_ls = ps.tape.output.rightCols(d);
  ps.log_std_clamped = (raw_ls.array() < kLogStdMin) || (raw_ls.array() > kLogStdMax);
  ps.log_std = raw_ls.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  ps.noise = noise;
  ps.pre_tanh = ps.mean.array() + ps.log_std.array().exp() * noise.array();
  ps.action = ps.pre_tanh.array().tanh() * max_action;
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi) + std::log(max_action);
  ps.log_prob.resize(s.rows());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double lp = 0.0;
    for (Eigen::Index j = 0; j < d; ++j)
      lp += -0.5 * noise(i, j) * noise(i, j) - ps.log_std(i, j) - log_norm - detail::log1m_tanh2(ps.pre_tanh(i, j));
    ps.log_prob(i) = lp;
  }
  return ps;
}

inline MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

inline PolicySample policy_sample(const Mlp& actor, const MatrixXd& s, double max_action, Rng& rng) {
  return policy_sample_with_noise(actor, s, max_action, standard_normal(s.rows(), actor.output_dim() / 2, rng));
}

inline PolicySample policy_deterministic(const Mlp& actor, const MatrixXd& s, double max_action) {
  return policy_sample_with_noise(actor, s, max_action, MatrixXd::Zero(s.rows(), actor.output_dim() / 2));
}

/// Single-observation convenience: returns (action, log_prob).
inline std::pair<VectorXd, double> policy_sample(const Mlp& actor, const VectorXd& s, double max_action, Rng& rng,
                                                 bool deterministic = false) {
  PolicySample ps = deterministic ? policy_deterministic(actor, MatrixXd(s.transpose()), max_action)
                                  : policy_sample(actor, MatrixXd(s.transpose()), max_action, rng);
  return {ps.action.row(0).transpose(), ps.log_prob(0)};
}

// ---------------------------------------------------------------------------
// Bellman targets
// ---------------------------------------------------------------------------

/// y = r + gamma (1 - done) (min_k target_k(s', a') - lambda log pi(a'|s')), a' ~ pi(s').
inline VectorXd sac_target(const MatrixXd& s_next, const VectorXd& r, const VectorXd& done, const AgentState& ag,
                           Rng& rng) {
  PolicySample next = policy_sample(ag.actor, s_next, ag.cfg.max_action, rng);
  MatrixXd x = critic_input(s_next, next.action);
  VectorXd tq = nn::forward(ag.target1, x).col(0).cwiseMin(nn::forward(ag.target2, x).col(0));
  VectorXd soft = tq - ag.temperature() * next.log_prob;
  return r + ag.cfg.gamma * ((1.0 - done.array()) * soft.array()).matrix();
}

inline VectorXd sac_target(const data::Batch& b, const AgentState& ag, Rng& rng) {
  return sac_target(b.s_next, b.r, b.done, ag, rng);
}

// ---------------------------------------------------------------------------
// Critic losses
// ---------------------------------------------------------------------------

struct CriticLoss {
  double total = 0.0;
  // Term-wise decomposition, each summed over both critics.
  double regularizer = 0.0;  // beta * (...) or alpha * (...)
  double bellman_real = 0.0;
  double bellman_sim = 0.0;
  double mean_q = 0.0;       // mean of critic-1 Q over the loss's data rows
  std::array<Params, 2> grads;
};

inline void apply_critic_grads(AgentState& ag, const CriticLoss& loss) {
  nn::adam_step(ag.critic1, loss.grads[0], ag.critic1_opt);
  nn::adam_step(ag.critic2, loss.grads[1], ag.critic2_opt);
}

/// Plain double-critic Bellman loss: sum_k 1/2 mean (Q_k - y)^2.
inline CriticLoss sac_critic_loss(const AgentState& ag, const data::Batch& b, const VectorXd& y) {
  if (b.size() == 0) throw InvalidInput("sac_critic_loss: empty batch");
  require(y.size() == b.size(), "sac_critic_loss: target length mismatch");
  CriticLoss out;
  const double n = static_cast<double>(b.size());
  MatrixXd x = critic_input(b.s, b.a);
  const bool sim = !b.domain.empty() && b.domain.front() == data::Domain::sim;
  for (int k = 0; k < 2; ++k) {
    nn::Tape t = nn::forward_tape(ag.critic(k), x);
    VectorXd diff = t.output.col(0) - y;
    double l = 0.5 * diff.squaredNorm() / n;
    (sim ? out.bellman_sim : out.bellman_real) += l;
    out.total += l;
    if (k == 0) out.mean_q = t.output.col(0).mean();
    out.grads[static_cast<std::size_t>(k)] = nn::backward(ag.critic(k), t, diff / n, false).grads;
  }
  return out;
}

inline CriticLoss operator+(CriticLoss a, const CriticLoss& b) {
  a.total += b.total;
  a.regularizer += b.regularizer;
  a.bellman_real += b.bellman_real;
  a.bellman_sim += b.bellman_sim;
  a.mean_q = 0.5 * (a.mean_q + b.mean_q);
  for (std::size_t k = 0; k < 2; ++k) a.grads[k] += b.grads[k];
  return a;
}

enum class GapObjective { log_sum_exp, weighted_mean };

struct GapRegularizer {
  double value = 0.0;
  VectorXd d_real;  // d value / d Q at each real sample
  VectorXd d_sim;   // d value / d Q at each sim sample
};

/// R(omega, Q_sim) - mean Q_real and its gradient with respect to every Q,
/// with R the max-shifted log sum_i omega_i exp(Q_i) or sum_i omega_i Q_i.
inline GapRegularizer gap_regularizer(const VectorXd& q_real, const VectorXd& q_sim, const VectorXd& omega,
                                      GapObjective objective) {
  require(q_real.size() > 0 && q_sim.size() > 0 && omega.size() == q_sim.size(),
          "gap regularizer: length mismatch");
  GapRegularizer g;
  g.d_real = VectorXd::Constant(q_real.size(), -1.0 / double(q_real.size()));
  if (objective == GapObjective::log_sum_exp) {
    const VectorXd z = omega.array().log().matrix() + q_sim;
    const double m = z.maxCoeff();
    const VectorXd e = (z.array() - m).exp();
    const double se = e.sum();
    g.value = m + std::log(se) - q_real.mean();
    g.d_sim = e / se;
  } else {
    g.value = omega.dot(q_sim) - q_real.mean();
    g.d_sim = omega;
  }
  return g;
}

/// Shared form of the H2O and H2O(v) critic losses, per critic:
///   beta * (R(omega, Q_sim) - mean Q_real)
///   + 1/2 mean_real (Q - y)^2 + 1/2 mean_sim (w (Q - y))^2
/// with R = log sum_i omega_i exp(Q_i) (log_sum_exp) or sum_i omega_i Q_i
/// (weighted_mean). The beta term is dropped when use_regularization is off.
inline CriticLoss dynamics_aware_critic_loss(const AgentState& ag, const data::Batch& real, const data::Batch& sim,
                                             const VectorXd& y_real, const VectorXd& y_sim, const VectorXd& omega,
                                             const VectorXd& weights, double beta, bool use_regularization,
                                             GapObjective objective) {
  if (real.size() == 0 || sim.size() == 0) throw InvalidInput("dynamics-aware critic loss: empty batch");
  const Eigen::Index nr = real.size(), ns = sim.size();
  require(y_real.size() == nr && y_sim.size() == ns && omega.size() == ns && weights.size() == ns,
          "dynamics-aware critic loss: length mismatch");
  MatrixXd x(nr + ns, real.s.cols() + real.a.cols());
  x << critic_input(real.s, real.a), critic_input(sim.s, sim.a);
  const VectorXd w2 = weights.array().square();

  CriticLoss out;
  for (int k = 0; k < 2; ++k) {
    nn::Tape t = nn::forward_tape(ag.critic(k), x);
    const VectorXd qr = t.output.col(0).head(nr);
    const VectorXd qs = t.output.col(0).tail(ns);
    const VectorXd dr = qr - y_real;
    const VectorXd ds = qs - y_sim;
    const double bell_r = 0.5 * dr.squaredNorm() / double(nr);
    const double bell_s = 0.5 * (w2.array() * ds.array().square()).sum() / double(ns);

    MatrixXd up(nr + ns, 1);
    up.col(0).head(nr) = dr / double(nr);
    up.col(0).tail(ns) = (w2.array() * ds.array()).matrix() / double(ns);

    double reg = 0.0;
    if (use_regularization) {
      GapRegularizer g = gap_regularizer(qr, qs, omega, objective);
      reg = g.value;
      up.col(0).head(nr) += beta * g.d_real;
      up.col(0).tail(ns) += beta * g.d_sim;
    }

    out.regularizer += use_regularization ? beta * reg : 0.0;
    out.bellman_real += bell_r;
    out.bellman_sim += bell_s;
    if (k == 0) out.mean_q = t.output.col(0).mean();
    out.grads[static_cast<std::size_t>(k)] = nn::backward(ag.critic(k), t, up, false).grads;
  }
  out.total = out.regularizer + out.bellman_real + out.bellman_sim;
  return out;
}

/// Actions used by the CQL log-sum-exp estimate at each state: `n` policy
/// samples and `n` uniform samples, with their log densities.
struct CqlSamples {
  MatrixXd states;    // (B * 2n) x obs, row j*2n + m belongs to state j
  MatrixXd actions;   // (B * 2n) x act
  VectorXd log_density;
  int per_state = 0;
};

inline CqlSamples sample_cql_actions(const AgentState& ag, const MatrixXd& s, int n, Rng& rng) {
  require(n >= 1, "cql: need at least one sampled action");
  const Eigen::Index b = s.rows(), d = ag.cfg.act_dim;
  const int per = 2 * n;
  CqlSamples cs;
  cs.per_state = per;
  cs.states.resize(b * per, s.cols());
  for (Eigen::Index j = 0; j < b; ++j)
    for (int m = 0; m < per; ++m) cs.states.row(j * per + m) = s.row(j);
  cs.actions.resize(b * per, d);
  cs.log_density.resize(b * per);
  const double M = ag.cfg.max_action;
  const double uniform_log_density = -static_cast<double>(d) * std::log(2.0 * M);
  MatrixXd rep(b * n, s.cols());
  for (Eigen::Index j = 0; j < b; ++j)
    for (int m = 0; m < n; ++m) rep.row(j * n + m) = s.row(j);
  PolicySample ps = policy_sample(ag.actor, rep, M, rng);
  for (Eigen::Index j = 0; j < b; ++j) {
    for (int m = 0; m < n; ++m) {
      const Eigen::Index r = j * per + m;
      cs.actions.row(r) = ps.action.row(j * n + m);
      cs.log_density(r) = ps.log_prob(j * n + m);
    }
    for (int m = 0; m < n; ++m) {
      const Eigen::Index r = j * per + n + m;
      for (Eigen::Index c = 0; c < d; ++c) cs.actions(r, c) = rng.uniform(-M, M);
      cs.log_density(r) = uniform_log_density;
    }
  }
  return cs;
}

/// CQL: alpha * (mean_s logmeanexp_m [Q(s, a_m) - log mu(a_m)] - mean Q(s, a_data))
/// + 1/2 mean (Q - y)^2, for each critic. Without importance sampling the
/// inner term is logmeanexp_m Q(s, a_m).
inline CriticLoss cql_critic_loss(const AgentState& ag, const data::Batch& b, const VectorXd& y,
                                  const CqlSamples& samples, double alpha, bool importance_sampling = true) {
  if (b.size() == 0) throw InvalidInput("cql_critic_loss: empty batch");
  const Eigen::Index n = b.size();
  const int per = samples.per_state;
  require(samples.actions.rows() == n * per && y.size() == n, "cql_critic_loss: sample layout mismatch");
  MatrixXd x_data = critic_input(b.s, b.a);
  MatrixXd x_samp = critic_input(samples.states, samples.actions);
  const double inv_n = 1.0 / static_cast<double>(n);

  CriticLoss out;
  for (int k = 0; k < 2; ++k) {
    nn::Tape td = nn::forward_tape(ag.critic(k), x_data);
    nn::Tape ts = nn::forward_tape(ag.critic(k), x_samp);
    const VectorXd q = td.output.col(0);
    const VectorXd diff = q - y;
    const double bell = 0.5 * diff.squaredNorm() * inv_n;

    MatrixXd up_samp(n * per, 1);
    double lse_mean = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      Eigen::VectorXd c = ts.output.col(0).segment(j * per, per);
      if (importance_sampling) c -= samples.log_density.segment(j * per, per);
      const double m = c.maxCoeff();
      const Eigen::VectorXd e = (c.array() - m).exp();
      const double se = e.sum();
      lse_mean += m + std::log(se / per);
      up_samp.col(0).segment(j * per, per) = alpha * inv_n * e / se;
    }
    lse_mean *= inv_n;
    const double reg = alpha * (lse_mean - q.mean());
    MatrixXd up_data = ((diff.array() - alpha) * inv_n).matrix();

    out.regularizer += reg;
    out.bellman_real += bell;
    if (k == 0) out.mean_q = q.mean();
    Params g = nn::backward(ag.critic(k), td, up_data, false).grads;
    g += nn::backward(ag.critic(k), ts, up_samp, false).grads;
    out.grads[static_cast<std::size_t>(k)] = std::move(g);
  }
  out.total = out.regularizer + out.bellman_real;
  return out;
}

// ---------------------------------------------------------------------------
// DARC reward correction
// ---------------------------------------------------------------------------

/// delta_r = log(P_real / P_sim), clipped to [-clip, clip].
inline VectorXd darc_reward_correction(const gap::DiscriminatorPair& pair, const MatrixXd& s, const MatrixXd& a,
                                       const MatrixXd& s_next, double clip = 10.0) {
  auto p = gap::discriminator_probs(pair, s, a, s_next);
  VectorXd dr(s.rows());
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    dr(i) = std::clamp(-gap::log_ratio_sim_over_real(p.p_real_sas(i), p.p_real_sa(i)), -clip, clip);
  return dr;
}

inline double darc_reward_correction(const gap::DiscriminatorPair& pair, const VectorXd& s, const VectorXd& a,
                                     const VectorXd& s_next, double clip = 10.0) {
  return darc_reward_correction(pair, MatrixXd(s.transpose()), MatrixXd(a.transpose()),
                                MatrixXd(s_next.transpose()), clip)(0);
}

// ---------------------------------------------------------------------------
// Policy improvement and temperature
// ---------------------------------------------------------------------------

struct ActorLoss {
  double loss = 0.0;
  double mean_log_prob = 0.0;
  Params grad;
};

/// mean(lambda log pi(a|s) - min(Q1, Q2)(s, a)) with a = tanh(mu + sigma xi) M.
/// Gradients flow into the actor only.
inline ActorLoss actor_loss(const AgentState& ag, const MatrixXd& s, const MatrixXd& noise) {
  const Eigen::Index n = s.rows(), d = ag.cfg.act_dim, od = ag.cfg.obs_dim;
  if (n == 0) throw InvalidInput("actor_loss: empty batch");
  const double M = ag.cfg.max_action;
  const double lam = ag.temperature();
  const double inv_n = 1.0 / static_cast<double>(n);
  PolicySample ps = policy_sample_with_noise(ag.actor, s, M, noise);

  MatrixXd x = critic_input(s, ps.action);
  nn::Tape t1 = nn::forward_tape(ag.critic1, x);
  nn::Tape t2 = nn::forward_tape(ag.critic2, x);
  VectorXd q1 = t1.output.col(0), q2 = t2.output.col(0);
  MatrixXd up1 = MatrixXd::Zero(n, 1), up2 = MatrixXd::Zero(n, 1);
  double min_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (q1(i) <= q2(i)) {
      up1(i, 0) = -inv_n;
      min_sum += q1(i);
    } else {
      up2(i, 0) = -inv_n;
      min_sum += q2(i);
    }
  }
  // d(-mean minQ)/da
  MatrixXd ga = nn::backward(ag.critic1, t1, up1).input_grad.rightCols(d) +
                nn::backward(ag.critic2, t2, up2).input_grad.rightCols(d);

  MatrixXd up_actor(n, 2 * d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      const double y = std::tanh(ps.pre_tanh(i, j));
      const double sigma = std::exp(ps.log_std(i, j));
      const double dl_du = lam * inv_n * 2.0 * y + ga(i, j) * M * (1.0 - y * y);
      up_actor(i, j) = dl_du;
      up_actor(i, d + j) = ps.log_std_clamped(i, j) ? 0.0 : dl_du * sigma * ps.noise(i, j) - lam * inv_n;
    }
  (void)od;
  ActorLoss out;
  out.mean_log_prob = ps.log_prob.mean();
  out.loss = lam * out.mean_log_prob - min_sum * inv_n;
  out.grad = nn::backward(ag.actor, ps.tape, up_actor, false).grads;
  return out;
}

inline ActorLoss actor_update(AgentState& ag, const MatrixXd& s, Rng& rng) {
  ActorLoss l = actor_loss(ag, s, standard_normal(s.rows(), ag.cfg.act_dim, rng));
  nn::adam_step(ag.actor, l.grad, ag.actor_opt);
  return l;
}

/// Gradient of mean(lambda (-log pi(a|s) - target_entropy)) w.r.t. log lambda.
inline double temperature_gradient(const AgentState& ag, const VectorXd& log_prob, double target_entropy) {
  return ag.temperature() * (-log_prob.array() - target_entropy).mean();
}

/// One Adam step on log lambda using fresh policy samples at `s`.
inline double temperature_update(AgentState& ag, const MatrixXd& s, double target_entropy, Rng& rng) {
  PolicySample ps = policy_sample(ag.actor, s, ag.cfg.max_action, rng);
  ag.temperature_opt.step(ag.log_temperature, temperature_gradient(ag, ps.log_prob, target_entropy));
  return ag.log_temperature;
}

inline void update_targets(AgentState& ag) {
  nn::soft_update(ag.target1, ag.critic1, ag.cfg.tau);
  nn::soft_update(ag.target2, ag.critic2, ag.cfg.tau);
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

struct StepMetrics {
  long step = 0;
  double loss_critic = 0.0;
  double loss_actor = 0.0;
  double loss_disc_sas = 0.0;
  double loss_disc_sa = 0.0;
  double regularizer = 0.0;
  double bellman_real = 0.0;
  double bellman_sim = 0.0;
  double mean_q = 0.0;
  double mean_u = 0.0;
  double mean_w = 1.0;
  double omega_entropy = 0.0;
  double temperature = 1.0;
  bool updated = false;
  long real_reads = 0;  // real transitions sampled this step
  long env_steps = 0;   // simulator steps taken this step
};

/// Independent random streams; one per consumer so that adding or removing a
/// consumer never shifts another's draws.
struct RngStreams {
  Rng env, policy, batch, disc, gap;

  static RngStreams from_seed(std::uint64_t seed) {
    return {Rng::stream(seed, "env"), Rng::stream(seed, "policy"), Rng::stream(seed, "batch"),
            Rng::stream(seed, "disc"), Rng::stream(seed, "gap")};
  }
};

struct TrainingSession {
  VariantConfig variant;
  AgentState agent;
  envs::PendulumConfig sim_env;
  envs::PendulumState sim_state;
  std::vector<data::Transition> dataset;  // real offline data
  data::ReplayBuffer buffer{1};
  gap::DiscriminatorPair pair;
  data::StateCovariance cov;
  RngStreams rng = RngStreams::from_seed(0);
  std::size_t batch_size = 256;
  long random_steps = 0;  // initial uniform-random exploration steps in sim
  long step = 0;
  double target_entropy = -1.0;

  MatrixXd actor_states(const data::Batch* real, const data::Batch* sim) const {
    if (real && sim) {
      const auto nr = static_cast<Eigen::Index>(std::lround(variant.real_mix_ratio * double(real->size())));
      const Eigen::Index ns = sim->size() - std::min(nr, sim->size());
      MatrixXd s(nr + ns, real->s.cols());
      s << real->s.topRows(nr), sim->s.topRows(ns);
      return s;
    }
    return real ? real->s : sim->s;
  }
};

namespace detail {

inline void rollout_sim_step(TrainingSession& ts, StepMetrics& m) {
  VectorXd obs = ts.sim_state.observation();
  double a;
  if (ts.step < ts.random_steps) {
    a = ts.rng.policy.uniform(-ts.agent.cfg.max_action, ts.agent.cfg.max_action);
  } else {
    a = policy_sample(ts.agent.actor, obs, ts.agent.cfg.max_action, ts.rng.policy).first(0);
  }
  auto res = envs::pendulum_step(ts.sim_state, a, ts.sim_env, ts.rng.env);
  data::Transition t;
  t.s.assign(obs.data(), obs.data() + obs.size());
  t.a = {a};
  t.r = res.reward;
  VectorXd next = res.state.observation();
  t.s_next.assign(next.data(), next.data() + next.size());
  t.done = false;
  t.domain = data::Domain::sim;
  ts.buffer.push(std::move(t));
  ts.sim_state = res.done ? envs::pendulum_reset(ts.sim_env, ts.rng.env) : res.state;
  m.env_steps = 1;
}

inline double entropy_of(const VectorXd& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0) h -= p(i) * std::log(p(i));
  return h;
}

}  // namespace detail

/// One iteration of the shared training loop:
/// (1) simulator rollout step, (2) discriminator update, (3) critic update,
/// (4) actor update, (5) temperature update, (6) periodic soft target update.
inline StepMetrics train_step(TrainingSession& ts) {
  const VariantConfig& v = ts.variant;
  StepMetrics m;
  ts.step += 1;
  m.step = ts.step;

  if (v.uses_sim()) detail::rollout_sim_step(ts, m);
  if (v.uses_real_for_training() || v.uses_discriminators())
    require(!ts.dataset.empty(), "train_step: variant requires a non-empty offline dataset");

  const bool ready = v.uses_sim() ? ts.buffer.size() >= ts.batch_size : true;
  if (!ready) {
    m.temperature = ts.agent.temperature();
    return m;
  }
  m.updated = true;

  // (2) discriminators, on their own batch draws.
  if (v.uses_discriminators() && (ts.step % v.discriminator_update_period == 0)) {
    data::Batch dr = data::sample_batch(ts.dataset, ts.batch_size, ts.rng.disc);
    data::Batch ds = data::sample_batch(ts.buffer, ts.batch_size, ts.rng.disc);
    auto dl = gap::train_discriminators(ts.pair, dr, ds);
    m.loss_disc_sas = dl.loss_sas;
    m.loss_disc_sa = dl.loss_sa;
  }

  std::optional<data::Batch> real, sim;
  if (v.uses_real_for_training()) {
    real = data::sample_batch(ts.dataset, ts.batch_size, ts.rng.batch);
    m.real_reads = static_cast<long>(ts.batch_size);
  }
  if (v.uses_sim()) sim = data::sample_batch(ts.buffer, ts.batch_size, ts.rng.batch);

  // (3) critic
  CriticLoss cl;
  switch (v.algorithm) {
    case Algorithm::sac: {
      // Real targets are drawn first, in the same order as the H2O branch.
      VectorXd yr;
      if (v.sac_mix_real) yr = sac_target(*real, ts.agent, ts.rng.policy);
      VectorXd ys = sac_target(*sim, ts.agent, ts.rng.policy);
      cl = sac_critic_loss(ts.agent, *sim, ys);
      if (v.sac_mix_real) cl = sac_critic_loss(ts.agent, *real, yr) + cl;
      break;
    }
    case Algorithm::cql: {
      VectorXd y = sac_target(*real, ts.agent, ts.rng.policy);
      CqlSamples cs = sample_cql_actions(ts.agent, real->s, v.cql_num_actions, ts.rng.policy);
      cl = cql_critic_loss(ts.agent, *real, y, cs, v.alpha_cql, v.cql_importance_sampling);
      break;
    }
    case Algorithm::darc:
    case Algorithm::darc_plus: {
      VectorXd dr = darc_reward_correction(ts.pair, sim->s, sim->a, sim->s_next, v.delta_r_clip);
      m.mean_w = std::numeric_limits<double>::quiet_NaN();
      VectorXd ys = sac_target(sim->s_next, sim->r + dr, sim->done, ts.agent, ts.rng.policy);
      cl = sac_critic_loss(ts.agent, *sim, ys);
      if (v.algorithm == Algorithm::darc_plus) {
        VectorXd yr = sac_target(*real, ts.agent, ts.rng.policy);
        cl = sac_critic_loss(ts.agent, *real, yr) + cl;
      }
      m.mean_u = dr.mean();  // reported in the u column for DARC runs
      break;
    }
    case Algorithm::h2o:
    case Algorithm::h2o_v: {
      VectorXd yr = sac_target(*real, ts.agent, ts.rng.policy);
      VectorXd ys = sac_target(*sim, ts.agent, ts.rng.policy);
      const Eigen::Index ns = sim->size();
      VectorXd omega = VectorXd::Constant(ns, 1.0 / double(ns));
      if (v.adaptive_omega) {
        VectorXd u = gap::gap_measure_u(ts.pair, sim->s, sim->a, sim->s_next, ts.cov, v.gap_samples, ts.rng.gap);
        omega = gap::batch_omega(u);
        m.mean_u = u.mean();
      }
      m.omega_entropy = detail::entropy_of(omega);
      VectorXd w = VectorXd::Ones(ns);
      if (v.use_dynamics_ratio) {
        w = gap::importance_weights(ts.pair, *sim);
        m.mean_w = w.mean();
      }
      cl = dynamics_aware_critic_loss(ts.agent, *real, *sim, yr, ys, omega, w, v.beta, v.use_regularization,
                                      v.algorithm == Algorithm::h2o ? GapObjective::log_sum_exp
                                                                    : GapObjective::weighted_mean);
      break;
    }
  }
  if (!std::isfinite(cl.total))
    throw NumericalFailure("non-finite critic loss at step " + std::to_string(ts.step));
  apply_critic_grads(ts.agent, cl);
  m.loss_critic = cl.total;
  m.regularizer = cl.regularizer;
  m.bellman_real = cl.bellman_real;
  m.bellman_sim = cl.bellman_sim;
  m.mean_q = cl.mean_q;

  // (4) actor, (5) temperature
  MatrixXd states = ts.actor_states(real ? &*real : nullptr, sim ? &*sim : nullptr);
  ActorLoss al = actor_update(ts.agent, states, ts.rng.policy);
  if (!std::isfinite(al.loss)) throw NumericalFailure("non-finite actor loss at step " + std::to_string(ts.step));
  m.loss_actor = al.loss;
  temperature_update(ts.agent, states, ts.target_entropy, ts.rng.policy);
  m.temperature = ts.agent.temperature();

  // (6) targets
  if (ts.step % ts.agent.cfg.target_update_period == 0) update_targets(ts.agent);
  return m;
}

}  // namespace h2o::agents
