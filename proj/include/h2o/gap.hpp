#pragma once

// Coupled real/sim discriminators, the Bayes-rule dynamics ratio, and the
// sample-based KL gap measure u(s, a) with its minibatch normalization.
//
// Class 0 is "real", class 1 is "sim" in every two-logit output.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>

#include "h2o/data.hpp"
#include "h2o/error.hpp"
#include "h2o/nn.hpp"
#include "h2o/rng.hpp"

namespace h2o::gap {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nn::Mlp;

inline constexpr double kUFloor = 1e-45;
inline constexpr double kUCeil = 10.0;
inline constexpr double kWeightFloor = 1e-5;
inline constexpr double kWeightCeil = 1.0;

struct DiscriminatorPair {
  Mlp d_sa;   // (s, a)     -> two logits in [-2, 2]
  Mlp d_sas;  // (s, a, s') -> two logits in [-2, 2]
  nn::AdamState opt_sa;
  nn::AdamState opt_sas;
  int state_dim = 0;
  int action_dim = 0;

  // Optional per-dimension input standardization over (s, a, s').
  bool standardize = false;
  VectorXd input_shift;
  VectorXd input_scale;

  /// One hidden ReLU layer per network. The output layers start at zero so
  /// both heads begin at exactly p = 0.5.
  static DiscriminatorPair create(int state_dim, int action_dim, int hidden, Rng& rng, double lr = 3e-4) {
    require(state_dim > 0 && action_dim > 0 && hidden > 0, "DiscriminatorPair: dimensions must be positive");
    DiscriminatorPair p;
    p.state_dim = state_dim;
    p.action_dim = action_dim;
    p.d_sa = Mlp::create({state_dim + action_dim, hidden, 2}, nn::Activation::tanh2, rng);
    p.d_sas = Mlp::create({2 * state_dim + action_dim, hidden, 2}, nn::Activation::tanh2, rng);
    for (Mlp* m : {&p.d_sa, &p.d_sas}) {
      m->weights.back().setZero();
      m->biases.back().setZero();
    }
    p.opt_sa = nn::AdamState::for_params(p.d_sa, lr);
    p.opt_sas = nn::AdamState::for_params(p.d_sas, lr);
    return p;
  }

  /// Enables standardization using statistics of the given transitions.
  void fit_standardization(std::span<const data::Transition> ts) {
    require(!ts.empty(), "fit_standardization: empty data");
    data::Batch b = data::Batch::from(ts);
    MatrixXd x(b.size(), 2 * state_dim + action_dim);
    x << b.s, b.a, b.s_next;
    input_shift = x.colwise().mean().transpose();
    MatrixXd c = x.rowwise() - input_shift.transpose();
    input_scale = (c.array().square().colwise().sum() / std::max<double>(1.0, double(b.size() - 1))).sqrt().transpose();
    input_scale = input_scale.cwiseMax(1e-6);
    standardize = true;
  }

  MatrixXd sas_input(const MatrixXd& s, const MatrixXd& a, const MatrixXd& s_next) const {
    require(s.cols() == state_dim && a.cols() == action_dim && s_next.cols() == state_dim &&
                s.rows() == a.rows() && s.rows() == s_next.rows(),
            "discriminator: input dimension mismatch");
    MatrixXd x(s.rows(), 2 * state_dim + action_dim);
    x << s, a, s_next;
    if (standardize) x = (x.rowwise() - input_shift.transpose()).array().rowwise() / input_scale.transpose().array();
    return x;
  }

  MatrixXd sa_input(const MatrixXd& s, const MatrixXd& a) const {
    require(s.cols() == state_dim && a.cols() == action_dim && s.rows() == a.rows(),
            "discriminator: input dimension mismatch");
    MatrixXd x(s.rows(), state_dim + action_dim);
    x << s, a;
    if (standardize) {
      const auto n = state_dim + action_dim;
      x = (x.rowwise() - input_shift.head(n).transpose()).array().rowwise() / input_scale.head(n).transpose().array();
    }
    return x;
  }
};

namespace detail {

// p(class 0) of a two-logit softmax, row-wise.
inline VectorXd softmax_first(const MatrixXd& logits) {
  return ((logits.col(1) - logits.col(0)).array().exp() + 1.0).inverse().matrix();
}

}  // namespace detail

struct Probabilities {
  VectorXd p_real_sas;
  VectorXd p_real_sa;
};

/// Batched p(real | s, a, s') (coupled head) and p(real | s, a).
inline Probabilities discriminator_probs(const DiscriminatorPair& pair, const MatrixXd& s, const MatrixXd& a,
                                         const MatrixXd& s_next) {
  MatrixXd sa_logits = nn::forward(pair.d_sa, pair.sa_input(s, a));
  MatrixXd sas_logits = nn::forward(pair.d_sas, pair.sas_input(s, a, s_next));
  return {detail::softmax_first(sas_logits + sa_logits), detail::softmax_first(sa_logits)};
}

inline std::pair<double, double> discriminator_probs(const DiscriminatorPair& pair, const VectorXd& s,
                                                     const VectorXd& a, const VectorXd& s_next) {
  auto p = discriminator_probs(pair, MatrixXd(s.transpose()), MatrixXd(a.transpose()), MatrixXd(s_next.transpose()));
  return {p.p_real_sas(0), p.p_real_sa(0)};
}

struct DiscriminatorLosses {
  double loss_sas;
  double loss_sa;
};

/// One Adam step on the mean cross-entropy of each head. The coupled head's
/// gradient also flows into d_sa. Reported losses are pre-update.
inline DiscriminatorLosses train_discriminators(DiscriminatorPair& pair, const data::Batch& real,
                                                const data::Batch& sim) {
  if (real.size() == 0 || sim.size() == 0) throw InvalidInput("train_discriminators: empty batch");
  const Eigen::Index n = real.size() + sim.size();
  MatrixXd s(n, pair.state_dim), a(n, pair.action_dim), sn(n, pair.state_dim);
  s << real.s, sim.s;
  a << real.a, sim.a;
  sn << real.s_next, sim.s_next;
  MatrixXd target = MatrixXd::Zero(n, 2);
  target.topRows(real.size()).col(0).setOnes();
  target.bottomRows(sim.size()).col(1).setOnes();

  nn::Tape t_sa = nn::forward_tape(pair.d_sa, pair.sa_input(s, a));
  nn::Tape t_sas = nn::forward_tape(pair.d_sas, pair.sas_input(s, a, sn));

  auto softmax = [](const MatrixXd& z) {
    MatrixXd p = (z.colwise() - z.rowwise().maxCoeff()).array().exp();
    return MatrixXd(p.array().colwise() / p.rowwise().sum().array());
  };
  MatrixXd p_sa = softmax(t_sa.output);
  MatrixXd p_sas = softmax(t_sas.output + t_sa.output);

  const double inv_n = 1.0 / static_cast<double>(n);
  DiscriminatorLosses out;
  out.loss_sa = -(target.array() * p_sa.array().log()).sum() * inv_n;
  out.loss_sas = -(target.array() * p_sas.array().log()).sum() * inv_n;

  MatrixXd g_sas = (p_sas - target) * inv_n;
  MatrixXd g_sa = (p_sa - target) * inv_n + g_sas;
  auto b_sa = nn::backward(pair.d_sa, t_sa, g_sa, false);
  auto b_sas = nn::backward(pair.d_sas, t_sas, g_sas, false);
  nn::adam_step(pair.d_sa, b_sa.grads, pair.opt_sa);
  nn::adam_step(pair.d_sas, b_sas.grads, pair.opt_sas);
  return out;
}

/// P_sim / P_real from the two posteriors:
/// [(1 - p_sas) / p_sas] / [(1 - p_sa) / p_sa].
inline double ratio_sim_over_real(double p_sas, double p_sa) {
  require(p_sas > 0 && p_sas < 1 && p_sa > 0 && p_sa < 1, "dynamics ratio: probabilities must lie in (0,1)");
  return ((1.0 - p_sas) / p_sas) / ((1.0 - p_sa) / p_sa);
}

inline double log_ratio_sim_over_real(double p_sas, double p_sa) {
  return std::log1p(-p_sas) - std::log(p_sas) - std::log1p(-p_sa) + std::log(p_sa);
}

/// Importance weight P_real / P_sim for simulated TD errors, clipped to [1e-5, 1].
inline double importance_weight(double ratio_sim_real) {
  return std::clamp(1.0 / ratio_sim_real, kWeightFloor, kWeightCeil);
}

struct RatioEstimate {
  double ratio_sim_over_real;
  double importance_weight;
};

inline RatioEstimate dynamics_ratio(const DiscriminatorPair& pair, const VectorXd& s, const VectorXd& a,
                                    const VectorXd& s_next) {
  auto [p_sas, p_sa] = discriminator_probs(pair, s, a, s_next);
  double r = ratio_sim_over_real(p_sas, p_sa);
  return {r, importance_weight(r)};
}

/// Batched clipped importance weights at the observed transitions.
inline VectorXd importance_weights(const DiscriminatorPair& pair, const data::Batch& b) {
  auto p = discriminator_probs(pair, b.s, b.a, b.s_next);
  VectorXd w(b.size());
  for (Eigen::Index i = 0; i < b.size(); ++i)
    w(i) = std::clamp(std::exp(-log_ratio_sim_over_real(p.p_real_sas(i), p.p_real_sa(i))), kWeightFloor, kWeightCeil);
  return w;
}

inline double clip_u(double u) { return std::clamp(u, kUFloor, kUCeil); }

/// Per-draw log(P_sim / P_real) terms at s'_i ~ N(s_next_j, Sigma), laid out
/// as a (batch x n_samples) matrix. Draws are consumed row by row.
inline MatrixXd gap_log_ratio_terms(const DiscriminatorPair& pair, const MatrixXd& s, const MatrixXd& a,
                                    const MatrixXd& s_next, const data::StateCovariance& cov, int n_samples,
                                    Rng& rng) {
  require(n_samples >= 1, "gap measure: N must be >= 1");
  const Eigen::Index b = s.rows(), d = s.cols();
  require(cov.cholesky_lower.rows() == d && cov.cholesky_lower.cols() == d,
          "gap measure: covariance dimension mismatch");
  {
    Eigen::LLT<MatrixXd> llt(cov.regularized_cov);
    if (llt.info() != Eigen::Success) throw InvalidInput("gap measure: covariance is not positive definite");
  }
  const Eigen::Index rows = b * n_samples;
  MatrixXd noise(rows, d);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < d; ++j) noise(i, j) = rng.normal();
  MatrixXd ss(rows, d), aa(rows, a.cols()), sn(rows, d);
  for (Eigen::Index j = 0; j < b; ++j)
    for (int k = 0; k < n_samples; ++k) {
      const Eigen::Index r = j * n_samples + k;
      ss.row(r) = s.row(j);
      aa.row(r) = a.row(j);
      sn.row(r) = s_next.row(j);
    }
  sn += noise * cov.cholesky_lower.transpose();
  auto p = discriminator_probs(pair, ss, aa, sn);
  MatrixXd terms(b, n_samples);
  for (Eigen::Index j = 0; j < b; ++j)
    for (int k = 0; k < n_samples; ++k) {
      const Eigen::Index r = j * n_samples + k;
      terms(j, k) = log_ratio_sim_over_real(p.p_real_sas(r), p.p_real_sa(r));
    }
  return terms;
}

/// u(s, a) for every row: sum of N log-ratio draws, clipped to [1e-45, 10].
inline VectorXd gap_measure_u(const DiscriminatorPair& pair, const MatrixXd& s, const MatrixXd& a,
                              const MatrixXd& s_next, const data::StateCovariance& cov, int n_samples, Rng& rng) {
  MatrixXd terms = gap_log_ratio_terms(pair, s, a, s_next, cov, n_samples, rng);
  VectorXd u(terms.rows());
  for (Eigen::Index j = 0; j < terms.rows(); ++j) u(j) = clip_u(terms.row(j).sum());
  return u;
}

inline double gap_measure_u(const DiscriminatorPair& pair, const VectorXd& s, const VectorXd& a,
                            const VectorXd& s_next, const data::StateCovariance& cov, int n_samples, Rng& rng) {
  return gap_measure_u(pair, MatrixXd(s.transpose()), MatrixXd(a.transpose()), MatrixXd(s_next.transpose()), cov,
                       n_samples, rng)(0);
}

/// omega_i = u_i / sum_j u_j over the minibatch.
inline VectorXd batch_omega(const VectorXd& u) {
  require(u.size() > 0, "batch_omega: empty input");
  require((u.array() >= kUFloor).all(), "batch_omega: entries must be >= 1e-45 (apply the u clip first)");
  return u / u.sum();
}

// ---------------------------------------------------------------------------
// Reverse-KL gap measure with a learned forward dynamics model.
// ---------------------------------------------------------------------------

/// Diagonal Gaussian forward model s' ~ N(mu(s, a), diag(exp(log_std(s, a)))^2).
struct GaussianDynamicsModel {
  Mlp net;  // (s, a) -> [mu, log_std]
  int state_dim = 0;
  int action_dim = 0;
  bool fitted = false;

  static GaussianDynamicsModel create(int state_dim, int action_dim, int hidden, Rng& rng) {
    GaussianDynamicsModel m;
    m.state_dim = state_dim;
    m.action_dim = action_dim;
    m.net = Mlp::create({state_dim + action_dim, hidden, hidden, 2 * state_dim}, nn::Activation::identity, rng);
    return m;
  }

  /// Predicts s' - s (residual) by Gaussian maximum likelihood.
  void fit(std::span<const data::Transition> dataset, int steps, std::size_t batch_size, Rng& rng, double lr = 1e-3) {
    require(!dataset.empty(), "GaussianDynamicsModel::fit: empty dataset");
    nn::AdamState opt = nn::AdamState::for_params(net, lr);
    for (int it = 0; it < steps; ++it) {
      data::Batch b = data::sample_batch(dataset, batch_size, rng);
      MatrixXd x(b.size(), state_dim + action_dim);
      x << b.s, b.a;
      nn::Tape t = nn::forward_tape(net, x);
      MatrixXd mu = t.output.leftCols(state_dim);
      MatrixXd ls = t.output.rightCols(state_dim).cwiseMax(-10.0).cwiseMin(2.0);
      MatrixXd inv_var = (-2.0 * ls).array().exp();
      MatrixXd diff = mu - (b.s_next - b.s);
      const double inv_n = 1.0 / static_cast<double>(b.size());
      MatrixXd g(b.size(), 2 * state_dim);
      g.leftCols(state_dim) = (diff.array() * inv_var.array()).matrix() * inv_n;
      MatrixXd g_ls = (1.0 - diff.array().square() * inv_var.array()).matrix() * inv_n;
      MatrixXd raw_ls = t.output.rightCols(state_dim);
      g.rightCols(state_dim) = (raw_ls.array() > -10.0 && raw_ls.array() < 2.0).cast<double>() * g_ls.array();
      auto back = nn::backward(net, t, g, false);
      nn::adam_step(net, back.grads, opt);
    }
    fitted = true;
  }

  MatrixXd sample(const MatrixXd& s, const MatrixXd& a, Rng& rng) const {
    if (!fitted) throw InvalidInput("GaussianDynamicsModel: model has not been fitted");
    MatrixXd x(s.rows(), state_dim + action_dim);
    x << s, a;
    MatrixXd out = nn::forward(net, x);
    MatrixXd sp = s + out.leftCols(state_dim);
    for (Eigen::Index i = 0; i < sp.rows(); ++i)
      for (int j = 0; j < state_dim; ++j)
        sp(i, j) += std::exp(std::clamp(out(i, state_dim + j), -10.0, 2.0)) * rng.normal();
    return sp;
  }
};

/// Reverse-direction gap: s'_i drawn from a learned model of the real
/// dynamics; u = sum_i log(P_real / P_sim)(s'_i), clipped like u.
inline double gap_measure_u_reverse(const GaussianDynamicsModel& model, const DiscriminatorPair& pair,
                                    const VectorXd& s, const VectorXd& a, int n_samples, Rng& rng) {
  require(n_samples >= 1, "gap_measure_u_reverse: N must be >= 1");
  if (!model.fitted) throw InvalidInput("gap_measure_u_reverse: dynamics model has not been fitted");
  MatrixXd ss = s.transpose().replicate(n_samples, 1);
  MatrixXd aa = a.transpose().replicate(n_samples, 1);
  MatrixXd sn = model.sample(ss, aa, rng);
  auto p = discriminator_probs(pair, ss, aa, sn);
  double sum = 0.0;
  for (int k = 0; k < n_samples; ++k) sum -= log_ratio_sim_over_real(p.p_real_sas(k), p.p_real_sa(k));
  return clip_u(sum);
}

}  // namespace h2o::gap
