#pragma once

// Exact tabular checks of the dynamics-aware value regularizer: the closed
// form of the inner maximization, log-sum-exp bounds, the reward-adjustment
// fixed point and the value-underestimation condition.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "h2o/envs.hpp"
#include "h2o/error.hpp"

namespace h2o::theory {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// All tables are S x A; conditionals have rows summing to one, the three
/// marginals sum to one over the whole table.
struct TabularDistributions {
  MatrixXd omega;
  MatrixXd d_data;
  MatrixXd d_sim;
  MatrixXd pi_data;
  MatrixXd pi;

  Eigen::Index n_states() const { return omega.rows(); }
  Eigen::Index n_actions() const { return omega.cols(); }
  double d_data_state(Eigen::Index s) const { return d_data.row(s).sum(); }
  double d_sim_state(Eigen::Index s) const { return d_sim.row(s).sum(); }

  void validate(double tol = 1e-12) const {
    const auto S = omega.rows(), A = omega.cols();
    for (const MatrixXd* m : {&d_data, &d_sim, &pi_data, &pi})
      require(m->rows() == S && m->cols() == A, "distributions: shape mismatch");
    for (const MatrixXd* m : {&omega, &d_data, &d_sim}) {
      require((m->array() >= 0.0).all(), "distributions: negative mass");
      require(std::abs(m->sum() - 1.0) <= tol, "distributions: marginal does not sum to 1");
    }
    for (const MatrixXd* m : {&pi_data, &pi}) {
      require((m->array() >= 0.0).all(), "distributions: negative policy probability");
      for (Eigen::Index s = 0; s < S; ++s)
        require(std::abs(m->row(s).sum() - 1.0) <= tol, "distributions: policy row does not sum to 1");
    }
    for (Eigen::Index s = 0; s < S; ++s) {
      const double ds = d_data_state(s);
      for (Eigen::Index a = 0; a < A; ++a)
        require(std::abs(d_data(s, a) - ds * pi_data(s, a)) <= tol, "distributions: d_data inconsistent with pi_data");
    }
  }
};

/// P^pi(s'|s) = sum_a pi(a|s) P(s'|s,a).
inline MatrixXd policy_transition(const MatrixXd& p, const MatrixXd& pi) {
  const Eigen::Index S = pi.rows(), A = pi.cols();
  MatrixXd out = MatrixXd::Zero(S, S);
  for (Eigen::Index s = 0; s < S; ++s)
    for (Eigen::Index a = 0; a < A; ++a) out.row(s) += pi(s, a) * p.row(s * A + a);
  return out;
}

/// Normalized discounted state occupancy (1 - gamma) rho^T (I - gamma P^pi)^-1.
inline VectorXd state_occupancy(const MatrixXd& p, const MatrixXd& pi, const VectorXd& rho, double gamma) {
  const Eigen::Index S = pi.rows();
  MatrixXd m = MatrixXd::Identity(S, S) - gamma * policy_transition(p, pi);
  VectorXd d = (1.0 - gamma) * m.transpose().partialPivLu().solve(rho);
  return d.cwiseMax(0.0) / d.cwiseMax(0.0).sum();
}

inline MatrixXd state_action_occupancy(const MatrixXd& p, const MatrixXd& pi, const VectorXd& rho, double gamma) {
  VectorXd d = state_occupancy(p, pi, rho, gamma);
  return d.asDiagonal() * pi;
}

/// omega(s,a) = KL(P_sim(.|s,a) || P_real(.|s,a)) normalized over all pairs.
inline MatrixXd exact_gap_omega(const envs::TabularMdpPair& mdp) {
  MatrixXd u(mdp.n_states, mdp.n_actions);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) {
      double kl = 0.0;
      for (int j = 0; j < mdp.n_states; ++j) {
        const double ps = mdp.p_sim(mdp.row(s, a), j), pr = mdp.p_real(mdp.row(s, a), j);
        if (ps <= 0.0) continue;
        if (pr <= 0.0) throw InvalidInput("exact_gap_omega: sim support not covered by real dynamics");
        kl += ps * std::log(ps / pr);
      }
      u(s, a) = std::max(kl, 0.0);
    }
  const double total = u.sum();
  if (!(total > 0.0)) throw InvalidInput("exact_gap_omega: zero dynamics gap everywhere");
  return u / total;
}

/// Data marginal from the behaviour policy on real dynamics, sim marginal from
/// the learned policy on sim dynamics, omega from the exact KL gap.
inline TabularDistributions make_distributions(const envs::TabularMdpPair& mdp, const MatrixXd& pi_data,
                                               const MatrixXd& pi) {
  mdp.validate();
  TabularDistributions d;
  d.pi_data = pi_data;
  d.pi = pi;
  d.omega = exact_gap_omega(mdp);
  d.d_data = state_action_occupancy(mdp.p_real, pi_data, mdp.initial_distribution, mdp.gamma);
  d.d_sim = state_action_occupancy(mdp.p_sim, pi, mdp.initial_distribution, mdp.gamma);
  return d;
}

// ---------------------------------------------------------------------------
// Inner maximization and log-sum-exp bounds
// ---------------------------------------------------------------------------

/// d(s,a) proportional to omega(s,a) exp(Q(s,a)).
inline VectorXd closed_form_dphi(const VectorXd& omega, const VectorXd& q) {
  require(omega.size() == q.size() && omega.size() > 0, "closed_form_dphi: size mismatch");
  for (Eigen::Index i = 0; i < omega.size(); ++i)
    if (!(omega(i) > 0.0)) throw InvalidInput("closed_form_dphi: omega must be strictly positive");
  VectorXd z = omega.array().log() + q.array();
  const double m = z.maxCoeff();
  VectorXd e = (z.array() - m).exp();
  return e / e.sum();
}

/// E_d[Q] - KL(d || omega).
inline double dphi_objective(const VectorXd& d, const VectorXd& omega, const VectorXd& q) {
  double v = d.dot(q);
  for (Eigen::Index i = 0; i < d.size(); ++i)
    if (d(i) > 0.0) v -= d(i) * std::log(d(i) / omega(i));
  return v;
}

struct LogSumExpBounds {
  double lhs;  // E_omega[Q]
  double mid;  // log E_omega[exp Q]
  double rhs;  // lhs + Var_omega[exp Q] / (2 exp(2 Q_min))
};

inline LogSumExpBounds logsumexp_bounds(const VectorXd& omega, const VectorXd& q, double q_min) {
  require(omega.size() == q.size() && omega.size() > 0, "logsumexp_bounds: size mismatch");
  if (!(q_min > 0.0)) throw InvalidInput("logsumexp_bounds: Q_min must be > 0");
  if ((omega.array() < 0.0).any() || std::abs(omega.sum() - 1.0) > 1e-9)
    throw InvalidInput("logsumexp_bounds: omega must be a distribution");
  if ((q.array() < q_min).any()) throw InvalidInput("logsumexp_bounds: Q below Q_min");
  // Shifted by max Q: e = exp(Q - q_max).
  const double q_max = q.maxCoeff();
  const VectorXd e = (q.array() - q_max).exp();
  const double mean_e = omega.dot(e);
  const double var_e = std::max(0.0, omega.dot((e.array() - mean_e).square().matrix()));
  LogSumExpBounds b;
  b.lhs = omega.dot(q);
  b.mid = q_max + std::log(mean_e);
  b.rhs = b.lhs + 0.5 * var_e * std::exp(2.0 * (q_max - q_min));
  return b;
}

// ---------------------------------------------------------------------------
// Reward adjustment and fixed point
// ---------------------------------------------------------------------------

/// nu = (omega - d_data) / (d_data + d_sim).
inline double exact_nu(const TabularDistributions& d, Eigen::Index s, Eigen::Index a) {
  const double denom = d.d_data(s, a) + d.d_sim(s, a);
  if (!(denom > 0.0))
    throw InvalidInput("exact_nu: pair (" + std::to_string(s) + "," + std::to_string(a) +
                       ") unreachable under both data sources");
  return (d.omega(s, a) - d.d_data(s, a)) / denom;
}

/// nu over all pairs; unreachable pairs get 0 (they carry no mass under pi's evaluation either way).
inline MatrixXd nu_table(const TabularDistributions& d) {
  MatrixXd nu = MatrixXd::Zero(d.n_states(), d.n_actions());
  for (Eigen::Index s = 0; s < d.n_states(); ++s)
    for (Eigen::Index a = 0; a < d.n_actions(); ++a)
      if (d.d_data(s, a) + d.d_sim(s, a) > 0.0) nu(s, a) = exact_nu(d, s, a);
  return nu;
}

struct FixedPoint {
  MatrixXd q;                      // S x A
  std::vector<double> residuals;   // sup-norm change per sweep
  long iterations = 0;
  /// Largest ratio residual[k+1] / residual[k] while residuals stay above 1e-4 of the first,
  /// so rounding in Q does not dominate the ratio.
  double max_decay_ratio() const {
    double r = 0.0;
    if (residuals.empty()) return r;
    const double floor = 1e-4 * residuals.front();
    for (std::size_t k = 1; k < residuals.size(); ++k)
      if (residuals[k - 1] > 1e-300 && residuals[k] > floor) r = std::max(r, residuals[k] / residuals[k - 1]);
    return r;
  }
};

/// Iterates Q <- r + gamma P_real^pi Q - beta nu until the sup-norm change is below tol.
inline FixedPoint dp_fixed_point(const envs::TabularMdpPair& mdp, const MatrixXd& pi, const MatrixXd& nu,
                                 double beta, double tol = 1e-10, long max_iterations = 1'000'000) {
  require(mdp.gamma < 1.0, "dp_fixed_point: gamma must be < 1");
  const int S = mdp.n_states, A = mdp.n_actions;
  require(pi.rows() == S && pi.cols() == A && nu.rows() == S && nu.cols() == A, "dp_fixed_point: shape mismatch");
  const MatrixXd adjusted = mdp.reward - beta * nu;
  FixedPoint fp;
  fp.q = MatrixXd::Zero(S, A);
  for (long it = 1; it <= max_iterations; ++it) {
    const VectorXd v = (fp.q.array() * pi.array()).rowwise().sum();
    const VectorXd pv = mdp.p_real * v;  // (S*A)
    MatrixXd next(S, A);
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a) next(s, a) = adjusted(s, a) + mdp.gamma * pv(mdp.row(s, a));
    const double res = (next - fp.q).cwiseAbs().maxCoeff();
    fp.q = std::move(next);
    fp.residuals.push_back(res);
    fp.iterations = it;
    if (res < tol) return fp;
  }
  throw NumericalFailure("dp_fixed_point: no convergence, residual " + std::to_string(fp.residuals.back()));
}

/// V^pi on real dynamics by a direct linear solve of (I - gamma P^pi) V = r^pi.
inline VectorXd policy_value(const envs::TabularMdpPair& mdp, const MatrixXd& pi, const MatrixXd& reward) {
  const Eigen::Index S = mdp.n_states;
  const VectorXd r_pi = (reward.array() * pi.array()).rowwise().sum();
  MatrixXd m = MatrixXd::Identity(S, S) - mdp.gamma * policy_transition(mdp.p_real, pi);
  return m.partialPivLu().solve(r_pi);
}

inline VectorXd state_values(const MatrixXd& q, const MatrixXd& pi) {
  return (q.array() * pi.array()).rowwise().sum();
}

// ---------------------------------------------------------------------------
// Underestimation condition
// ---------------------------------------------------------------------------

/// zeta(s,a) = (d_data(s) max_a' pi_D/pi + d_sim(s)) / (d_data(s) pi_D(a|s)/pi(a|s) + d_sim(s)).
/// States with no data mass get zeta = 1.
inline VectorXd zeta(const TabularDistributions& d, Eigen::Index s) {
  const Eigen::Index A = d.n_actions();
  const double dd = d.d_data_state(s), ds = d.d_sim_state(s);
  VectorXd z = VectorXd::Ones(A);
  if (!(dd > 0.0)) return z;
  VectorXd ratio(A);
  for (Eigen::Index a = 0; a < A; ++a) {
    if (d.pi_data(s, a) > 0.0 && !(d.pi(s, a) > 0.0))
      throw InvalidInput("zeta: pi(a|s) = 0 where the behaviour policy acts (state " + std::to_string(s) + ")");
    ratio(a) = d.pi_data(s, a) > 0.0 ? d.pi_data(s, a) / d.pi(s, a) : 0.0;
  }
  const double top = dd * ratio.maxCoeff() + ds;
  for (Eigen::Index a = 0; a < A; ++a) z(a) = top / (dd * ratio(a) + ds);
  return z;
}

struct ConditionResult {
  bool holds = false;
  double margin = 0.0;  // sum_a omega - sum_a d_data zeta
  bool no_data = false; // d_data(s) = 0; zeta taken as 1
};

inline ConditionResult underestimation_condition(const TabularDistributions& d, Eigen::Index s) {
  const VectorXd z = zeta(d, s);
  ConditionResult r;
  r.no_data = !(d.d_data_state(s) > 0.0);
  r.margin = d.omega.row(s).sum() - d.d_data.row(s).dot(z.transpose());
  r.holds = r.margin > 0.0;
  return r;
}

/// Condition including the sampling-error term for a per-pair data count.
inline ConditionResult sampled_underestimation_condition(const TabularDistributions& d, Eigen::Index s, double beta,
                                                         double gamma, double c_p_delta, double r_max, double count) {
  require(beta > 0.0 && count > 0.0, "sampled_underestimation_condition: beta and count must be > 0");
  ConditionResult r = underestimation_condition(d, s);
  const double dd = d.d_data_state(s), ds = d.d_sim_state(s);
  double max_ratio = 0.0;
  if (dd > 0.0)
    for (Eigen::Index a = 0; a < d.n_actions(); ++a)
      if (d.pi_data(s, a) > 0.0) max_ratio = std::max(max_ratio, d.pi_data(s, a) / d.pi(s, a));
  const double extra = gamma * c_p_delta * r_max * (dd * max_ratio + ds) / (beta * (1.0 - gamma) * std::sqrt(count));
  r.margin -= extra;
  r.holds = r.margin > 0.0;
  return r;
}

struct StateCheck {
  Eigen::Index state = 0;
  bool condition = false;
  bool no_data = false;
  double margin = 0.0;
  double v_hat = 0.0;
  double v_true = 0.0;
  bool violated = false;
};

struct UnderestimationReport {
  std::vector<StateCheck> states;
  double max_decay_ratio = 0.0;
  long iterations = 0;
  int condition_states() const {
    int n = 0;
    for (const auto& s : states) n += s.condition;
    return n;
  }
  /// max over condition states of V_hat - V (negative infinity if none).
  double max_violation() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& s : states)
      if (s.condition) m = std::max(m, s.v_hat - s.v_true);
    return m;
  }
  int violations() const {
    int n = 0;
    for (const auto& s : states) n += s.violated;
    return n;
  }
};

inline UnderestimationReport verify_underestimation(const envs::TabularMdpPair& mdp, const TabularDistributions& d,
                                                    double beta, double tol = 1e-8, double dp_tol = 1e-10) {
  FixedPoint fp = dp_fixed_point(mdp, d.pi, nu_table(d), beta, dp_tol);
  const VectorXd v_hat = state_values(fp.q, d.pi);
  const VectorXd v = policy_value(mdp, d.pi, mdp.reward);
  UnderestimationReport rep;
  rep.max_decay_ratio = fp.max_decay_ratio();
  rep.iterations = fp.iterations;
  for (Eigen::Index s = 0; s < d.n_states(); ++s) {
    ConditionResult c = underestimation_condition(d, s);
    StateCheck sc;
    sc.state = s;
    sc.condition = c.holds;
    sc.no_data = c.no_data;
    sc.margin = c.margin;
    sc.v_hat = v_hat(s);
    sc.v_true = v(s);
    sc.violated = c.holds && v_hat(s) > v(s) + tol;
    rep.states.push_back(sc);
  }
  return rep;
}

/// Random full-support policy, one Dirichlet(1) row per state.
inline MatrixXd random_policy(int n_states, int n_actions, Rng& rng) {
  MatrixXd pi(n_states, n_actions);
  for (int s = 0; s < n_states; ++s) pi.row(s) = envs::dirichlet_ones(n_actions, rng).transpose();
  return pi;
}

struct InstanceResult {
  std::uint64_t seed = 0;
  double beta = 0.0;
  UnderestimationReport report;

  /// "seed,condition_states,max_violation"
  std::string line() const {
    std::ostringstream os;
    os.precision(17);
    os << seed << ',' << report.condition_states() << ',' << report.max_violation();
    return os.str();
  }
};

/// One random instance: a real/sim pair plus random behaviour and learned policies.
inline InstanceResult run_instance(std::uint64_t seed, int n_states, int n_actions, double gap_scale, double beta,
                                   double tol = 1e-8) {
  envs::TabularMdpPair mdp = envs::random_tabular_pair(seed, n_states, n_actions, gap_scale);
  Rng rng = Rng::stream(seed, "policies");
  MatrixXd pi_data = random_policy(n_states, n_actions, rng);
  MatrixXd pi = random_policy(n_states, n_actions, rng);
  TabularDistributions d = make_distributions(mdp, pi_data, pi);
  return {seed, beta, verify_underestimation(mdp, d, beta, tol)};
}

}  // namespace h2o::theory
