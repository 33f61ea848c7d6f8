#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "h2o/decimal.hpp"
#include "h2o/envs.hpp"
#include "h2o/error.hpp"
#include "h2o/rng.hpp"

namespace h2o::data {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Domain { real, sim };

inline const char* to_string(Domain d) { return d == Domain::real ? "real" : "sim"; }

struct Transition {
  std::vector<double> s;
  std::vector<double> a;
  double r = 0.0;
  std::vector<double> s_next;
  bool done = false;
  Domain domain = Domain::real;

  bool operator==(const Transition&) const = default;
};

inline void check_transition(const Transition& t) {
  require(t.s.size() == t.s_next.size(), "transition: s and s_next dimensions differ");
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  require(finite(t.s) && finite(t.a) && finite(t.s_next) && std::isfinite(t.r), "transition: non-finite entry");
}

/// Row-stacked minibatch.
struct Batch {
  MatrixXd s;
  MatrixXd a;
  VectorXd r;
  MatrixXd s_next;
  VectorXd done;
  std::vector<Domain> domain;

  Eigen::Index size() const { return s.rows(); }

  static Batch from(std::span<const Transition> ts) {
    require(!ts.empty(), "batch: no transitions");
    const auto n = static_cast<Eigen::Index>(ts.size());
    const auto sd = static_cast<Eigen::Index>(ts[0].s.size());
    const auto ad = static_cast<Eigen::Index>(ts[0].a.size());
    Batch b;
    b.s.resize(n, sd);
    b.a.resize(n, ad);
    b.r.resize(n);
    b.s_next.resize(n, sd);
    b.done.resize(n);
    b.domain.reserve(ts.size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& t = ts[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < sd; ++j) {
        b.s(i, j) = t.s[static_cast<std::size_t>(j)];
        b.s_next(i, j) = t.s_next[static_cast<std::size_t>(j)];
      }
      for (Eigen::Index j = 0; j < ad; ++j) b.a(i, j) = t.a[static_cast<std::size_t>(j)];
      b.r(i) = t.r;
      b.done(i) = t.done ? 1.0 : 0.0;
      b.domain.push_back(t.domain);
    }
    return b;
  }

  /// First `n` rows.
  Batch head(Eigen::Index n) const {
    Batch b;
    b.s = s.topRows(n);
    b.a = a.topRows(n);
    b.r = r.head(n);
    b.s_next = s_next.topRows(n);
    b.done = done.head(n);
    b.domain.assign(domain.begin(), domain.begin() + n);
    return b;
  }

  static Batch concat(const Batch& x, const Batch& y) {
    Batch b;
    b.s.resize(x.size() + y.size(), x.s.cols());
    b.s << x.s, y.s;
    b.a.resize(b.s.rows(), x.a.cols());
    b.a << x.a, y.a;
    b.r.resize(b.s.rows());
    b.r << x.r, y.r;
    b.s_next.resize(b.s.rows(), x.s_next.cols());
    b.s_next << x.s_next, y.s_next;
    b.done.resize(b.s.rows());
    b.done << x.done, y.done;
    b.domain = x.domain;
    b.domain.insert(b.domain.end(), y.domain.begin(), y.domain.end());
    return b;
  }
};

/// Fixed-capacity FIFO ring of transitions.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    require(capacity > 0, "replay buffer capacity must be positive");
  }

  void push(Transition t) {
    if (storage_.size() < capacity_) {
      storage_.push_back(std::move(t));
    } else {
      storage_[cursor_] = std::move(t);
    }
    cursor_ = (cursor_ + 1) % capacity_;
  }

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return storage_.empty(); }

  /// i-th oldest transition currently held.
  const Transition& at(std::size_t i) const {
    require(i < storage_.size(), "replay buffer index out of range");
    if (storage_.size() < capacity_) return storage_[i];
    return storage_[(cursor_ + i) % capacity_];
  }

  /// Contents in push order (oldest first).
  std::vector<Transition> ordered() const {
    std::vector<Transition> out;
    out.reserve(storage_.size());
    for (std::size_t i = 0; i < storage_.size(); ++i) out.push_back(at(i));
    return out;
  }

  std::span<const Transition> raw() const { return storage_; }

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::vector<Transition> storage_;
};

/// Uniform sampling with replacement.
inline Batch sample_batch(std::span<const Transition> source, std::size_t batch_size, Rng& rng) {
  if (source.empty()) throw InvalidInput("sample_batch: empty source");
  require(batch_size > 0, "sample_batch: batch_size must be positive");
  const auto n = static_cast<Eigen::Index>(batch_size);
  const auto& t0 = source[0];
  const auto sd = static_cast<Eigen::Index>(t0.s.size());
  const auto ad = static_cast<Eigen::Index>(t0.a.size());
  Batch b;
  b.s.resize(n, sd);
  b.a.resize(n, ad);
  b.r.resize(n);
  b.s_next.resize(n, sd);
  b.done.resize(n);
  b.domain.reserve(batch_size);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = source[rng.index(source.size())];
    for (Eigen::Index j = 0; j < sd; ++j) {
      b.s(i, j) = t.s[static_cast<std::size_t>(j)];
      b.s_next(i, j) = t.s_next[static_cast<std::size_t>(j)];
    }
    for (Eigen::Index j = 0; j < ad; ++j) b.a(i, j) = t.a[static_cast<std::size_t>(j)];
    b.r(i) = t.r;
    b.done(i) = t.done ? 1.0 : 0.0;
    b.domain.push_back(t.domain);
  }
  return b;
}

inline Batch sample_batch(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng) {
  return sample_batch(buffer.raw(), batch_size, rng);
}

struct StateCovariance {
  VectorXd mean;
  MatrixXd cov;
  MatrixXd regularized_cov;
  MatrixXd cholesky_lower;  // L with L L^T = regularized_cov
};

/// Sample mean and unbiased covariance of the `s` fields, plus eps * I.
inline StateCovariance state_covariance(std::span<const Transition> dataset, double ridge = 1e-6) {
  if (dataset.empty()) throw InvalidInput("state_covariance: empty dataset");
  const auto d = static_cast<Eigen::Index>(dataset[0].s.size());
  const auto n = static_cast<Eigen::Index>(dataset.size());
  MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = dataset[static_cast<std::size_t>(i)].s[static_cast<std::size_t>(j)];
  StateCovariance c;
  c.mean = x.colwise().mean().transpose();
  MatrixXd centered = x.rowwise() - c.mean.transpose();
  c.cov = n > 1 ? MatrixXd((centered.transpose() * centered) / static_cast<double>(n - 1)) : MatrixXd::Zero(d, d);
  c.cov = 0.5 * (c.cov + c.cov.transpose());
  c.regularized_cov = c.cov + ridge * MatrixXd::Identity(d, d);
  Eigen::LLT<MatrixXd> llt(c.regularized_cov);
  if (llt.info() != Eigen::Success) throw InvalidInput("state_covariance: regularized covariance is not positive definite");
  c.cholesky_lower = llt.matrixL();
  return c;
}

using PolicyFn = std::function<VectorXd(const VectorXd& observation)>;

/// Episodic rollouts in `env` with N(0, noise_std^2) added to the policy's
/// actions. Time-limit ends are not marked done.
inline std::vector<Transition> collect_dataset(const envs::PendulumConfig& env, const PolicyFn& policy,
                                               std::size_t n_transitions, double exploration_noise_std,
                                               std::uint64_t seed, Domain domain = Domain::real) {
  require(n_transitions > 0, "collect_dataset: n_transitions must be positive");
  env.validate();
  Rng env_rng = Rng::stream(seed, "collect.env");
  Rng noise_rng = Rng::stream(seed, "collect.noise");
  std::vector<Transition> out;
  out.reserve(n_transitions);
  auto state = envs::pendulum_reset(env, env_rng);
  while (out.size() < n_transitions) {
    VectorXd obs = state.observation();
    VectorXd act = policy(obs);
    double a = act(0);
    if (exploration_noise_std > 0.0) a += noise_rng.normal(0.0, exploration_noise_std);
    a = std::clamp(a, -env.max_torque, env.max_torque);
    auto step = envs::pendulum_step(state, a, env, env_rng);
    Transition t;
    t.s.assign(obs.data(), obs.data() + obs.size());
    t.a = {a};
    t.r = step.reward;
    VectorXd next = step.state.observation();
    t.s_next.assign(next.data(), next.data() + next.size());
    t.done = false;
    t.domain = domain;
    out.push_back(std::move(t));
    state = step.done ? envs::pendulum_reset(env, env_rng) : step.state;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files. One header line, then one transition per line:
//   h2o-dataset 1 state_dim=<k> action_dim=<m> domain=<real|sim>
//   s_1,...,s_k,a_1,...,a_m,r,s'_1,...,s'_k,done
// ---------------------------------------------------------------------------

inline void write_dataset(std::ostream& os, std::span<const Transition> ts) {
  const std::size_t sd = ts.empty() ? 0 : ts[0].s.size();
  const std::size_t ad = ts.empty() ? 0 : ts[0].a.size();
  const Domain dom = ts.empty() ? Domain::real : ts[0].domain;
  os << "h2o-dataset 1 state_dim=" << sd << " action_dim=" << ad << " domain=" << to_string(dom) << '\n';
  std::string line;
  for (const auto& t : ts) {
    require(t.s.size() == sd && t.a.size() == ad && t.s_next.size() == sd, "write_dataset: inconsistent dimensions");
    line.clear();
    for (double v : t.s) line += format_double(v) + ',';
    for (double v : t.a) line += format_double(v) + ',';
    line += format_double(t.r) + ',';
    for (double v : t.s_next) line += format_double(v) + ',';
    line += t.done ? '1' : '0';
    os << line << '\n';
  }
}

inline std::vector<Transition> read_dataset(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw IoError("dataset: missing header");
  std::istringstream hs(header);
  std::string tag, f_sd, f_ad, f_dom;
  int version = 0;
  if (!(hs >> tag >> version >> f_sd >> f_ad >> f_dom) || tag != "h2o-dataset" || version != 1 ||
      f_sd.rfind("state_dim=", 0) != 0 || f_ad.rfind("action_dim=", 0) != 0 || f_dom.rfind("domain=", 0) != 0)
    throw IoError("dataset: malformed header '" + header + "'");
  const std::size_t sd = std::stoul(f_sd.substr(10));
  const std::size_t ad = std::stoul(f_ad.substr(11));
  const std::string dom = f_dom.substr(7);
  if (dom != "real" && dom != "sim") throw IoError("dataset: unknown domain '" + dom + "'");
  const Domain domain = dom == "real" ? Domain::real : Domain::sim;

  std::vector<Transition> out;
  std::string line;
  std::vector<std::string_view> fields;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    fields.clear();
    std::string_view rest(line);
    while (true) {
      auto pos = rest.find(',');
      fields.push_back(rest.substr(0, pos));
      if (pos == std::string_view::npos) break;
      rest.remove_prefix(pos + 1);
    }
    if (fields.size() != 2 * sd + ad + 2)
      throw IoError("dataset: line " + std::to_string(lineno) + " has " + std::to_string(fields.size()) + " fields");
    Transition t;
    std::size_t k = 0;
    try {
      for (std::size_t j = 0; j < sd; ++j) t.s.push_back(parse_double(fields[k++]));
      for (std::size_t j = 0; j < ad; ++j) t.a.push_back(parse_double(fields[k++]));
      t.r = parse_double(fields[k++]);
      for (std::size_t j = 0; j < sd; ++j) t.s_next.push_back(parse_double(fields[k++]));
    } catch (const InvalidInput& e) {
      throw IoError("dataset: line " + std::to_string(lineno) + ": " + e.what());
    }
    auto d = fields[k];
    if (d != "0" && d != "1") throw IoError("dataset: line " + std::to_string(lineno) + ": bad done flag");
    t.done = d == "1";
    t.domain = domain;
    out.push_back(std::move(t));
  }
  return out;
}

inline void save_dataset(const std::string& path, std::span<const Transition> ts) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  write_dataset(os, ts);
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<Transition> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return read_dataset(is);
}

}  // namespace h2o::data
