#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "h2o/agents.hpp"
#include "test_support.hpp"

using namespace h2o;
using namespace h2o::agents;
using data::Batch;
using data::Domain;
using data::Transition;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

AgentConfig small_config(int hidden = 16) {
  AgentConfig c;
  c.hidden_units = hidden;
  c.lr = 1e-3;
  return c;
}

Batch random_batch(int n, Domain d, Rng& rng) {
  std::vector<Transition> ts(static_cast<std::size_t>(n));
  for (auto& t : ts) {
    double th = rng.uniform(-3.0, 3.0), w = rng.uniform(-4.0, 4.0);
    t.s = {std::cos(th), std::sin(th), w};
    t.a = {rng.uniform(-2.0, 2.0)};
    t.r = rng.uniform(0.0, 17.0);
    double th2 = th + 0.05 * w;
    t.s_next = {std::cos(th2), std::sin(th2), w + rng.normal(0.0, 0.1)};
    t.domain = d;
  }
  return Batch::from(ts);
}

VectorXd random_vector(int n, Rng& rng, double scale = 1.0) {
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.normal(0.0, scale);
  return v;
}

VectorXd random_omega(int n, Rng& rng) {
  VectorXd u(n);
  for (int i = 0; i < n; ++i) u(i) = rng.uniform(0.01, 1.0);
  return u / u.sum();
}

// Worst relative FD error of both critics' gradients.
double critic_fd_error(const AgentState& ag, const CriticLoss& analytic,
                       const std::function<double(const AgentState&)>& loss) {
  double worst = 0.0;
  for (int k = 0; k < 2; ++k) {
    auto f = [&](const nn::Mlp& probe) {
      AgentState copy = ag;
      copy.critic(k) = probe;
      return loss(copy);
    };
    worst = std::max(worst, testutil::max_rel_error_all(ag.critic(k), analytic.grads[static_cast<std::size_t>(k)], f,
                                                       1e-6, 1e-4));
  }
  return worst;
}

std::vector<Transition> offline_data(std::size_t n, std::uint64_t seed) {
  envs::PendulumConfig env;
  return data::collect_dataset(env, [](const VectorXd&) { return VectorXd::Zero(1); }, n, 1.0, seed);
}

TrainingSession make_session(const VariantConfig& v, std::uint64_t seed, int hidden = 16, std::size_t batch = 16) {
  TrainingSession ts;
  ts.variant = v;
  Rng init = Rng::stream(seed, "init");
  ts.agent = AgentState::create(small_config(hidden), init);
  ts.pair = gap::DiscriminatorPair::create(3, 1, hidden, init);
  ts.dataset = offline_data(500, seed);
  ts.cov = data::state_covariance(ts.dataset);
  ts.buffer = data::ReplayBuffer(10'000);
  ts.rng = RngStreams::from_seed(seed);
  ts.sim_state = envs::pendulum_reset(ts.sim_env, ts.rng.env);
  ts.batch_size = batch;
  ts.random_steps = 20;
  return ts;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

TEST(AlgorithmNames, RoundTrip) {
  for (auto a : {Algorithm::sac, Algorithm::cql, Algorithm::darc, Algorithm::darc_plus, Algorithm::h2o,
                 Algorithm::h2o_v})
    EXPECT_EQ(algorithm_from_string(to_string(a)), a);
  EXPECT_EQ(algorithm_from_string("h2o(v)"), Algorithm::h2o_v);
  EXPECT_THROW(algorithm_from_string("ppo"), InvalidInput);
}

TEST(Policy, VanishingNoiseMatchesDeterministic) {
  Rng rng(1);
  auto ag = AgentState::create(small_config(), rng);
  ag.actor.weights.back().col(1).setZero();
  ag.actor.biases.back()(1) = -30.0;  // clamps to the lower log_std bound
  MatrixXd s = testutil::random_matrix(50, 3, rng);
  auto stoch = policy_sample(ag.actor, s, 2.0, rng);
  auto det = policy_deterministic(ag.actor, s, 2.0);
  EXPECT_LT((stoch.action - det.action).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Policy, LogProbMatchesNumericalDensity) {
  Rng rng(2);
  auto ag = AgentState::create(small_config(), rng);
  const double M = 2.0;
  for (int trial = 0; trial < 50; ++trial) {
    MatrixXd s = testutil::random_matrix(1, 3, rng);
    auto ps = policy_sample(ag.actor, s, M, rng);
    const double mu = ps.mean(0, 0), sigma = std::exp(ps.log_std(0, 0)), a = ps.action(0, 0);
    // F(a) = Phi((atanh(a / M) - mu) / sigma)
    auto cdf = [&](double x) { return 0.5 * std::erfc(-((std::atanh(x / M) - mu) / sigma) / std::sqrt(2.0)); };
    const double h = 1e-6 * std::max(1e-3, M - std::abs(a));
    const double density = (cdf(a + h) - cdf(a - h)) / (2.0 * h);
    if (density < 1e-6) continue;
    EXPECT_NEAR(ps.log_prob(0), std::log(density), 1e-5) << "a=" << a;
  }
}

TEST(Policy, ActionsWithinTorqueRange) {
  Rng rng(3);
  auto ag = AgentState::create(small_config(), rng);
  ag.actor.biases.back()(0) = 50.0;
  MatrixXd s = testutil::random_matrix(200, 3, rng, 3.0);
  auto ps = policy_sample(ag.actor, s, 2.0, rng);
  EXPECT_LE(ps.action.cwiseAbs().maxCoeff(), 2.0);
  EXPECT_TRUE(ps.log_prob.allFinite());
}

TEST(Policy, LogStdClampedAtUpperBound) {
  Rng rng(4);
  auto ag = AgentState::create(small_config(), rng);
  ag.actor.weights.back().col(1).setZero();
  ag.actor.biases.back()(1) = 7.0;
  auto ps = policy_sample(ag.actor, testutil::random_matrix(5, 3, rng), 2.0, rng);
  EXPECT_TRUE((ps.log_std.array() == kLogStdMax).all());
  EXPECT_TRUE(ps.log_std_clamped.all());
}

TEST(SacTarget, TerminalAndZeroDiscount) {
  Rng rng(5);
  auto ag = AgentState::create(small_config(), rng);
  Batch b = random_batch(8, Domain::sim, rng);
  b.done.setOnes();
  VectorXd y = sac_target(b, ag, rng);
  for (Eigen::Index i = 0; i < 8; ++i) EXPECT_EQ(y(i), b.r(i));
  b.done.setZero();
  ag.cfg.gamma = 0.0;
  y = sac_target(b, ag, rng);
  for (Eigen::Index i = 0; i < 8; ++i) EXPECT_EQ(y(i), b.r(i));
}

TEST(SacTarget, IdenticalTargetsGiveEitherCritic) {
  Rng rng(6);
  auto ag = AgentState::create(small_config(), rng);
  ag.target2 = ag.target1;
  Batch b = random_batch(8, Domain::sim, rng);
  Rng r1(42), r2(42);
  VectorXd y = sac_target(b, ag, r1);
  auto next = policy_sample(ag.actor, b.s_next, 2.0, r2);
  VectorXd q = q_values(ag.target1, b.s_next, next.action);
  VectorXd expected = b.r + 0.99 * (q - ag.temperature() * next.log_prob);
  EXPECT_TRUE(y.isApprox(expected, 1e-14));
}

TEST(CriticLosses, H2oGradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto ag = AgentState::create(small_config(), rng);
  Batch real = random_batch(8, Domain::real, rng), sim = random_batch(8, Domain::sim, rng);
  VectorXd yr = random_vector(8, rng), ys = random_vector(8, rng), omega = random_omega(8, rng);
  VectorXd w = (random_vector(8, rng).array().abs() * 0.5 + 0.1).matrix();
  for (auto obj : {GapObjective::log_sum_exp, GapObjective::weighted_mean}) {
    auto fn = [&](const AgentState& a) {
      return dynamics_aware_critic_loss(a, real, sim, yr, ys, omega, w, 0.5, true, obj).total;
    };
    auto l = dynamics_aware_critic_loss(ag, real, sim, yr, ys, omega, w, 0.5, true, obj);
    EXPECT_LT(critic_fd_error(ag, l, fn), 1e-4);
  }
}

TEST(CriticLosses, SacAndCqlGradientsMatchFiniteDifferences) {
  Rng rng(8);
  auto ag = AgentState::create(small_config(), rng);
  Batch b = random_batch(8, Domain::real, rng);
  VectorXd y = random_vector(8, rng);
  auto sac_fn = [&](const AgentState& a) { return sac_critic_loss(a, b, y).total; };
  EXPECT_LT(critic_fd_error(ag, sac_critic_loss(ag, b, y), sac_fn), 1e-4);
  CqlSamples cs = sample_cql_actions(ag, b.s, 10, rng);
  for (bool is : {true, false}) {
    auto cql_fn = [&](const AgentState& a) { return cql_critic_loss(a, b, y, cs, 2.0, is).total; };
    EXPECT_LT(critic_fd_error(ag, cql_critic_loss(ag, b, y, cs, 2.0, is), cql_fn), 1e-4);
  }
}

TEST(CriticLosses, SingletonSimBatchLogSumExpIsQ) {
  Rng rng(9);
  auto ag = AgentState::create(small_config(), rng);
  Batch real = random_batch(6, Domain::real, rng), sim = random_batch(1, Domain::sim, rng);
  VectorXd one = VectorXd::Ones(1);
  auto l = dynamics_aware_critic_loss(ag, real, sim, VectorXd::Zero(6), VectorXd::Zero(1), one, one, 1.0, true,
                                      GapObjective::log_sum_exp);
  double expected = 0.0;
  for (int k = 0; k < 2; ++k)
    expected += q_values(ag.critic(k), sim.s, sim.a)(0) - q_values(ag.critic(k), real.s, real.a).mean();
  EXPECT_NEAR(l.regularizer, expected, 1e-12);
}

TEST(CriticLosses, UniformOmegaWeightedMeanIsMeanQ) {
  Rng rng(10);
  auto ag = AgentState::create(small_config(), rng);
  Batch real = random_batch(6, Domain::real, rng), sim = random_batch(10, Domain::sim, rng);
  VectorXd omega = VectorXd::Constant(10, 0.1);
  auto g = gap_regularizer(q_values(ag.critic1, real.s, real.a), q_values(ag.critic1, sim.s, sim.a), omega,
                           GapObjective::weighted_mean);
  EXPECT_NEAR(g.value,
              q_values(ag.critic1, sim.s, sim.a).mean() - q_values(ag.critic1, real.s, real.a).mean(), 1e-12);
}

TEST(CriticLosses, WeightedMeanNeverExceedsLogSumExp) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(64));
    VectorXd qs = random_vector(n, rng, 5.0), qr = random_vector(3, rng);
    VectorXd omega = random_omega(n, rng);
    double mean = gap_regularizer(qr, qs, omega, GapObjective::weighted_mean).value;
    double lse = gap_regularizer(qr, qs, omega, GapObjective::log_sum_exp).value;
    EXPECT_LE(mean, lse + 1e-12);
  }
}

TEST(CriticLosses, LogSumExpStableForLargeQ) {
  VectorXd qs(3), qr = VectorXd::Zero(1);
  qs << 1000.0, 999.0, 998.0;
  auto g = gap_regularizer(qr, qs, VectorXd::Constant(3, 1.0 / 3.0), GapObjective::log_sum_exp);
  EXPECT_TRUE(std::isfinite(g.value));
  EXPECT_NEAR(g.value, 1000.0 + std::log((1.0 + std::exp(-1.0) + std::exp(-2.0)) / 3.0), 1e-9);
}

TEST(CriticLosses, RegularizerPushesDownHighestOmegaAndUpReal) {
  Rng rng(12);
  VectorXd qs = random_vector(16, rng), qr = random_vector(16, rng);
  VectorXd omega = random_omega(16, rng);
  Eigen::Index top;
  omega.maxCoeff(&top);
  for (auto obj : {GapObjective::log_sum_exp, GapObjective::weighted_mean}) {
    auto g = gap_regularizer(qr, qs, omega, obj);
    // Descent moves Q against the gradient: down where d > 0, up where d < 0.
    EXPECT_GT(g.d_sim(top), 0.0);
    EXPECT_TRUE((g.d_real.array() < 0.0).all());
    // FD check of the per-sample derivatives.
    for (Eigen::Index i = 0; i < 16; ++i) {
      VectorXd p = qs, m = qs;
      p(i) += 1e-6;
      m(i) -= 1e-6;
      double fd = (gap_regularizer(qr, p, omega, obj).value - gap_regularizer(qr, m, omega, obj).value) / 2e-6;
      EXPECT_NEAR(g.d_sim(i), fd, 1e-7);
    }
  }
}

TEST(CriticLosses, ZeroBetaUnitWeightsEqualsMixedSac) {
  Rng rng(13);
  auto ag = AgentState::create(small_config(), rng);
  Batch real = random_batch(8, Domain::real, rng), sim = random_batch(8, Domain::sim, rng);
  VectorXd yr = random_vector(8, rng), ys = random_vector(8, rng);
  auto h = dynamics_aware_critic_loss(ag, real, sim, yr, ys, random_omega(8, rng), VectorXd::Ones(8), 0.0, true,
                                      GapObjective::log_sum_exp);
  auto s = sac_critic_loss(ag, real, yr) + sac_critic_loss(ag, sim, ys);
  EXPECT_NEAR(h.total, s.total, 1e-12);
  EXPECT_NEAR(h.bellman_real, s.bellman_real, 1e-12);
  EXPECT_NEAR(h.bellman_sim, s.bellman_sim, 1e-12);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < h.grads[k].size(); ++i) EXPECT_NEAR(h.grads[k].at(i), s.grads[k].at(i), 1e-12);
}

TEST(CriticLosses, EachAblationFlagTogglesOneTerm) {
  Rng rng(14);
  auto ag = AgentState::create(small_config(), rng);
  Batch real = random_batch(8, Domain::real, rng), sim = random_batch(8, Domain::sim, rng);
  VectorXd yr = random_vector(8, rng), ys = random_vector(8, rng), omega = random_omega(8, rng);
  VectorXd w = (random_vector(8, rng).array().abs() * 0.5 + 0.1).matrix();
  VectorXd uniform = VectorXd::Constant(8, 1.0 / 8), ones = VectorXd::Ones(8);
  auto full = dynamics_aware_critic_loss(ag, real, sim, yr, ys, omega, w, 0.3, true, GapObjective::log_sum_exp);
  auto no_omega = dynamics_aware_critic_loss(ag, real, sim, yr, ys, uniform, w, 0.3, true, GapObjective::log_sum_exp);
  auto no_ratio = dynamics_aware_critic_loss(ag, real, sim, yr, ys, omega, ones, 0.3, true, GapObjective::log_sum_exp);
  auto no_reg = dynamics_aware_critic_loss(ag, real, sim, yr, ys, omega, w, 0.3, false, GapObjective::log_sum_exp);
  // Omega only touches the regularizer.
  EXPECT_EQ(no_omega.bellman_real, full.bellman_real);
  EXPECT_EQ(no_omega.bellman_sim, full.bellman_sim);
  EXPECT_NE(no_omega.regularizer, full.regularizer);
  // The dynamics ratio only touches the simulated Bellman term.
  EXPECT_EQ(no_ratio.regularizer, full.regularizer);
  EXPECT_EQ(no_ratio.bellman_real, full.bellman_real);
  EXPECT_NE(no_ratio.bellman_sim, full.bellman_sim);
  // Regularization only adds the beta term.
  EXPECT_EQ(no_reg.regularizer, 0.0);
  EXPECT_EQ(no_reg.bellman_real, full.bellman_real);
  EXPECT_EQ(no_reg.bellman_sim, full.bellman_sim);
  EXPECT_NEAR(full.total, full.regularizer + full.bellman_real + full.bellman_sim, 1e-12);
}

TEST(CriticLosses, EmptyBatchesRejected) {
  Rng rng(15);
  auto ag = AgentState::create(small_config(), rng);
  Batch real = random_batch(4, Domain::real, rng), empty;
  VectorXd y = VectorXd::Zero(4), none;
  EXPECT_THROW(dynamics_aware_critic_loss(ag, real, empty, y, none, none, none, 0.1, true, GapObjective::log_sum_exp),
               InvalidInput);
  EXPECT_THROW(sac_critic_loss(ag, empty, none), InvalidInput);
  CqlSamples cs;
  EXPECT_THROW(cql_critic_loss(ag, empty, none, cs, 1.0), InvalidInput);
}

TEST(CqlLoss, ZeroAlphaIsBellmanLoss) {
  Rng rng(16);
  auto ag = AgentState::create(small_config(), rng);
  Batch b = random_batch(8, Domain::real, rng);
  VectorXd y = random_vector(8, rng);
  auto cs = sample_cql_actions(ag, b.s, 10, rng);
  auto c = cql_critic_loss(ag, b, y, cs, 0.0);
  auto s = sac_critic_loss(ag, b, y);
  EXPECT_NEAR(c.total, s.total, 1e-12);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < c.grads[k].size(); ++i) EXPECT_NEAR(c.grads[k].at(i), s.grads[k].at(i), 1e-12);
}

TEST(CqlLoss, ConstantQCancels) {
  Rng rng(17);
  auto ag = AgentState::create(small_config(), rng);
  for (int k = 0; k < 2; ++k) {
    ag.critic(k).weights.back().setZero();
    ag.critic(k).biases.back()(0) = 3.7;
  }
  Batch b = random_batch(8, Domain::real, rng);
  auto cs = sample_cql_actions(ag, b.s, 10, rng);
  auto c = cql_critic_loss(ag, b, VectorXd::Zero(8), cs, 2.0, false);
  EXPECT_LT(std::abs(c.regularizer), 1e-6);
}

TEST(CqlLoss, SampleLayout) {
  Rng rng(18);
  auto ag = AgentState::create(small_config(), rng);
  MatrixXd s = testutil::random_matrix(3, 3, rng);
  auto cs = sample_cql_actions(ag, s, 4, rng);
  EXPECT_EQ(cs.per_state, 8);
  EXPECT_EQ(cs.actions.rows(), 24);
  for (Eigen::Index j = 0; j < 3; ++j)
    for (int m = 0; m < 8; ++m) EXPECT_EQ(cs.states.row(j * 8 + m), s.row(j));
  EXPECT_LE(cs.actions.cwiseAbs().maxCoeff(), 2.0);
  // Uniform proposals carry density 1 / (2 M).
  EXPECT_DOUBLE_EQ(cs.log_density(7), -std::log(4.0));
}

namespace {
// Concrete constant; the library overloads on VectorXd and MatrixXd.
VectorXd vec(Eigen::Index n, double x) { return VectorXd::Constant(n, x); }
}  // namespace

TEST(DarcCorrection, Examples) {
  Rng rng(19);
  auto pair = gap::DiscriminatorPair::create(3, 1, 8, rng);
  EXPECT_EQ(darc_reward_correction(pair, vec(3, 1.0), vec(1, 1.0), vec(3, 1.0)), 0.0);
  // d_sas logits (-b', b') with tanh2 giving -ln2 and ln2: sim/real ratio = e^{2 ln 2} = 4.
  const double b = std::atanh(std::log(2.0) / 2.0);
  pair.d_sas.biases.back() << -b, b;
  EXPECT_NEAR(darc_reward_correction(pair, vec(3, 1.0), vec(1, 1.0), vec(3, 1.0)), -std::log(4.0), 1e-12);
  // The sa logits cancel and tanh2 bounds each sas logit by 2, so the clip at 10 never binds.
  pair.d_sas.biases.back() << -20.0, 20.0;
  pair.d_sa.biases.back() << 20.0, -20.0;
  EXPECT_NEAR(darc_reward_correction(pair, vec(3, 1.0), vec(1, 1.0), vec(3, 1.0)), -4.0, 1e-9);
  pair.d_sas.biases.back() << 20.0, -20.0;
  pair.d_sa.biases.back() << -20.0, 20.0;
  EXPECT_NEAR(darc_reward_correction(pair, vec(3, 1.0), vec(1, 1.0), vec(3, 1.0)), 4.0, 1e-9);
}

TEST(ActorLoss, GradientMatchesFiniteDifferences) {
  Rng rng(20);
  auto ag = AgentState::create(small_config(), rng);
  ag.log_temperature = std::log(0.2);
  MatrixXd s = testutil::random_matrix(8, 3, rng);
  MatrixXd noise = standard_normal(8, 1, rng);
  auto l = actor_loss(ag, s, noise);
  auto fn = [&](const nn::Mlp& probe) {
    AgentState copy = ag;
    copy.actor = probe;
    return actor_loss(copy, s, noise).loss;
  };
  EXPECT_LT(testutil::max_rel_error_all(ag.actor, l.grad, fn, 1e-6, 1e-4), 1e-3);
}

TEST(ActorLoss, FlatObjectiveHasZeroGradient) {
  Rng rng(21);
  auto ag = AgentState::create(small_config(), rng);
  ag.log_temperature = -1e4;  // lambda = 0
  for (int k = 0; k < 2; ++k) {
    ag.critic(k).weights.back().setZero();
    ag.critic(k).biases.back()(0) = 1.0;
  }
  auto l = actor_loss(ag, testutil::random_matrix(16, 3, rng), standard_normal(16, 1, rng));
  double worst = 0.0;
  for (std::size_t i = 0; i < l.grad.size(); ++i) worst = std::max(worst, std::abs(l.grad.at(i)));
  EXPECT_LT(worst, 1e-12);
}

TEST(ActorLoss, LinearQMovesActionUphill) {
  Rng rng(22);
  AgentConfig cfg = small_config();
  cfg.hidden_layers = 1;
  auto ag = AgentState::create(cfg, rng);
  // Q(s, a) = relu(a + 10) - 10 = a on the action range.
  for (int k = 0; k < 2; ++k) {
    nn::Mlp& c = ag.critic(k);
    for (auto& w : c.weights) w.setZero();
    for (auto& b : c.biases) b.setZero();
    c.weights[0](3, 0) = 1.0;
    c.biases[0](0) = 10.0;
    c.weights[1](0, 0) = 1.0;
    c.biases[1](0) = -10.0;
  }
  ag.log_temperature = std::log(1e-3);
  MatrixXd s = testutil::random_matrix(32, 3, rng);
  VectorXd before = policy_deterministic(ag.actor, s, 2.0).action.col(0);
  actor_update(ag, s, rng);
  VectorXd after = policy_deterministic(ag.actor, s, 2.0).action.col(0);
  EXPECT_GT(after.mean(), before.mean());
}

TEST(Temperature, Examples) {
  Rng rng(23);
  auto ag = AgentState::create(small_config(), rng);
  const double target = -1.0;
  VectorXd lp = VectorXd::Constant(10, 1.0);  // entropy estimate -1 equals the target
  EXPECT_EQ(temperature_gradient(ag, lp, target), 0.0);
  const double before = ag.log_temperature;
  ag.temperature_opt.step(ag.log_temperature, temperature_gradient(ag, lp, target));
  EXPECT_EQ(ag.log_temperature, before);
  // Entropy 5 below target: lambda grows.
  VectorXd low = VectorXd::Constant(10, 6.0);
  for (int i = 0; i < 10; ++i) ag.temperature_opt.step(ag.log_temperature, temperature_gradient(ag, low, target));
  EXPECT_GT(ag.log_temperature, before);
  // Entropy far above target: lambda shrinks but stays positive.
  VectorXd high = VectorXd::Constant(10, -50.0);
  for (int i = 0; i < 5000; ++i) ag.temperature_opt.step(ag.log_temperature, temperature_gradient(ag, high, target));
  EXPECT_GT(ag.temperature(), 0.0);
  EXPECT_LT(ag.log_temperature, before);
}

TEST(Targets, ChangeOnlyThroughSoftUpdate) {
  Rng rng(24);
  auto ag = AgentState::create(small_config(), rng);
  const nn::Mlp t1 = ag.target1, t2 = ag.target2;
  Batch b = random_batch(8, Domain::real, rng);
  VectorXd y = sac_target(b, ag, rng);
  apply_critic_grads(ag, sac_critic_loss(ag, b, y));
  actor_update(ag, b.s, rng);
  temperature_update(ag, b.s, -1.0, rng);
  EXPECT_TRUE(nn::identical(ag.target1, t1));
  EXPECT_TRUE(nn::identical(ag.target2, t2));
  update_targets(ag);
  for (std::size_t i = 0; i < t1.size(); ++i)
    EXPECT_NEAR(ag.target1.at(i), 0.995 * t1.at(i) + 0.005 * ag.critic1.at(i), 1e-15);
}

TEST(TrainStep, TargetUpdatePeriodRespected) {
  VariantConfig v;
  v.algorithm = Algorithm::cql;
  auto ts = make_session(v, 1);
  ts.agent.cfg.target_update_period = 2;
  const nn::Mlp t1 = ts.agent.target1;
  train_step(ts);
  EXPECT_TRUE(nn::identical(ts.agent.target1, t1));
  train_step(ts);
  EXPECT_FALSE(nn::identical(ts.agent.target1, t1));
}

TEST(TrainStep, SacNeverReadsDataset) {
  VariantConfig v;
  v.algorithm = Algorithm::sac;
  auto ts = make_session(v, 2);
  ts.dataset.clear();
  long reads = 0, env = 0;
  for (int i = 0; i < 100; ++i) {
    auto m = train_step(ts);
    reads += m.real_reads;
    env += m.env_steps;
  }
  EXPECT_EQ(reads, 0);
  EXPECT_EQ(env, 100);
}

TEST(TrainStep, CqlNeverStepsSimulator) {
  VariantConfig v;
  v.algorithm = Algorithm::cql;
  auto ts = make_session(v, 3);
  long env = 0;
  for (int i = 0; i < 50; ++i) {
    auto m = train_step(ts);
    env += m.env_steps;
    EXPECT_TRUE(m.updated);
  }
  EXPECT_EQ(env, 0);
  EXPECT_EQ(ts.buffer.size(), 0u);
}

TEST(TrainStep, WarmupWithoutUpdatesUntilBufferFilled) {
  VariantConfig v;
  v.algorithm = Algorithm::h2o;
  auto ts = make_session(v, 4);
  for (std::size_t i = 1; i < ts.batch_size; ++i) EXPECT_FALSE(train_step(ts).updated);
  EXPECT_TRUE(train_step(ts).updated);
}

TEST(TrainStep, DeterministicForFixedSeed) {
  for (auto alg : {Algorithm::h2o, Algorithm::darc_plus}) {
    VariantConfig v;
    v.algorithm = alg;
    auto a = make_session(v, 5), b = make_session(v, 5);
    for (int i = 0; i < 1000; ++i) {
      auto ma = train_step(a), mb = train_step(b);
      ASSERT_TRUE(same_bits(ma.loss_critic, mb.loss_critic)) << i;
      ASSERT_TRUE(same_bits(ma.loss_actor, mb.loss_actor)) << i;
      ASSERT_TRUE(same_bits(ma.mean_u, mb.mean_u)) << i;
      ASSERT_TRUE(same_bits(ma.temperature, mb.temperature)) << i;
    }
    EXPECT_TRUE(nn::identical(a.agent.actor, b.agent.actor));
  }
}

TEST(TrainStep, AllFlagsOffMatchesMixedSac) {
  VariantConfig h;
  h.algorithm = Algorithm::h2o;
  h.adaptive_omega = h.use_dynamics_ratio = h.use_regularization = false;
  VariantConfig s;
  s.algorithm = Algorithm::sac;
  s.sac_mix_real = true;
  auto a = make_session(h, 6), b = make_session(s, 6);
  for (int i = 0; i < 200; ++i) {
    auto ma = train_step(a), mb = train_step(b);
    ASSERT_EQ(ma.updated, mb.updated);
    EXPECT_NEAR(ma.loss_critic, mb.loss_critic, 1e-8 * (1.0 + std::abs(mb.loss_critic))) << i;
    EXPECT_NEAR(ma.bellman_real, mb.bellman_real, 1e-8 * (1.0 + std::abs(mb.bellman_real))) << i;
    EXPECT_NEAR(ma.bellman_sim, mb.bellman_sim, 1e-8 * (1.0 + std::abs(mb.bellman_sim))) << i;
    EXPECT_EQ(ma.regularizer, 0.0);
    EXPECT_NEAR(ma.loss_actor, mb.loss_actor, 1e-8 * (1.0 + std::abs(mb.loss_actor))) << i;
  }
}

TEST(TrainStep, MissingDatasetRejected) {
  VariantConfig v;
  v.algorithm = Algorithm::h2o;
  auto ts = make_session(v, 7);
  ts.dataset.clear();
  EXPECT_THROW(train_step(ts), InvalidInput);
}

TEST(TrainStep, H2oMetricsLive) {
  VariantConfig v;
  v.algorithm = Algorithm::h2o;
  auto ts = make_session(v, 8);
  StepMetrics m;
  for (int i = 0; i < 60; ++i) m = train_step(ts);
  ASSERT_TRUE(m.updated);
  EXPECT_GE(m.mean_u, gap::kUFloor);
  EXPECT_LE(m.mean_u, gap::kUCeil);
  EXPECT_GE(m.mean_w, gap::kWeightFloor);
  EXPECT_LE(m.mean_w, 1.0);
  EXPECT_LE(m.omega_entropy, std::log(16.0) + 1e-12);
  EXPECT_EQ(m.real_reads, 16);
}

TEST(TrainStep, NonFiniteLossAborts) {
  VariantConfig v;
  v.algorithm = Algorithm::cql;
  auto ts = make_session(v, 9);
  ts.agent.critic1.biases.back()(0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train_step(ts), NumericalFailure);
}
