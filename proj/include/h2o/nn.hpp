#pragma once

// Dense networks with exact reverse-mode gradients and Adam.
//
// Row convention: a batch is a matrix with one sample per row. Layer l maps
// X (batch x fan_in) to X * W_l + 1 b_l^T with W_l of shape fan_in x fan_out.

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "h2o/decimal.hpp"
#include "h2o/error.hpp"
#include "h2o/rng.hpp"

namespace h2o::nn {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

enum class Activation { identity, relu, tanh2, softmax };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh2: return "tanh2";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh2") return Activation::tanh2;
  if (s == "softmax") return Activation::softmax;
  throw InvalidInput("unknown activation '" + s + "'");
}

/// Parameter-shaped container; used for weights, gradients and Adam moments.
struct Params {
  std::vector<MatrixXd> weights;
  std::vector<RowVectorXd> biases;

  std::size_t num_layers() const { return weights.size(); }

  std::size_t size() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  Params zeros_like() const {
    Params z;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      z.weights.push_back(MatrixXd::Zero(weights[l].rows(), weights[l].cols()));
      z.biases.push_back(RowVectorXd::Zero(biases[l].size()));
    }
    return z;
  }

  Params& operator+=(const Params& o) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += o.weights[l];
      biases[l] += o.biases[l];
    }
    return *this;
  }

  Params& operator*=(double s) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] *= s;
      biases[l] *= s;
    }
    return *this;
  }

  /// Flat index access in layer order: W_0 (row-major), b_0, W_1, b_1, ...
  double& at(std::size_t flat) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      auto nw = static_cast<std::size_t>(weights[l].size());
      if (flat < nw) {
        auto cols = static_cast<std::size_t>(weights[l].cols());
        return weights[l](static_cast<Eigen::Index>(flat / cols), static_cast<Eigen::Index>(flat % cols));
      }
      flat -= nw;
      auto nb = static_cast<std::size_t>(biases[l].size());
      if (flat < nb) return biases[l](static_cast<Eigen::Index>(flat));
      flat -= nb;
    }
    throw InvalidInput("flat parameter index out of range");
  }
  double at(std::size_t flat) const { return const_cast<Params*>(this)->at(flat); }

  bool all_finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l)
      if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
    return true;
  }

  bool same_shape(const Params& o) const {
    if (weights.size() != o.weights.size()) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != o.weights[l].rows() || weights[l].cols() != o.weights[l].cols()) return false;
      if (biases[l].size() != o.biases[l].size()) return false;
    }
    return true;
  }
};

/// A fully connected network: `layer_sizes` = {in, h_1, ..., out}.
struct Mlp : Params {
  std::vector<int> layer_sizes;
  Activation hidden_activation = Activation::relu;
  Activation output_activation = Activation::identity;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }

  /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static Mlp create(std::vector<int> sizes, Activation output, Rng& rng) {
    Mlp m = zeros(std::move(sizes), output);
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
      double bound = 1.0 / std::sqrt(static_cast<double>(m.weights[l].rows()));
      for (Eigen::Index i = 0; i < m.weights[l].size(); ++i) m.weights[l].data()[i] = rng.uniform(-bound, bound);
      for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) m.biases[l](i) = rng.uniform(-bound, bound);
    }
    return m;
  }

  static Mlp zeros(std::vector<int> sizes, Activation output) {
    require(sizes.size() >= 2, "an MLP needs at least input and output sizes");
    for (int s : sizes) require(s > 0, "layer sizes must be positive");
    Mlp m;
    m.layer_sizes = std::move(sizes);
    m.output_activation = output;
    for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
      m.weights.push_back(MatrixXd::Zero(m.layer_sizes[l], m.layer_sizes[l + 1]));
      m.biases.push_back(RowVectorXd::Zero(m.layer_sizes[l + 1]));
    }
    return m;
  }

  void validate() const {
    require(layer_sizes.size() == weights.size() + 1 && weights.size() == biases.size(),
            "layer_sizes inconsistent with parameter count");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      require(weights[l].rows() == layer_sizes[l] && weights[l].cols() == layer_sizes[l + 1],
              "weight shape does not chain with layer_sizes at layer " + std::to_string(l));
      require(biases[l].size() == layer_sizes[l + 1], "bias shape mismatch at layer " + std::to_string(l));
    }
    require(all_finite(), "non-finite parameter");
  }

  const Params& params() const { return *this; }
};

namespace detail {

inline void apply_activation(MatrixXd& z, Activation act) {
  switch (act) {
    case Activation::identity: break;
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::tanh2: z = 2.0 * z.array().tanh(); break;
    case Activation::softmax:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        double m = z.row(r).maxCoeff();
        z.row(r) = (z.row(r).array() - m).exp();
        z.row(r) /= z.row(r).sum();
      }
      break;
  }
}

// Given pre-activation z, post-activation y and dL/dy, returns dL/dz.
inline MatrixXd activation_backward(const MatrixXd& z, const MatrixXd& y, const MatrixXd& gy, Activation act) {
  switch (act) {
    case Activation::identity: return gy;
    case Activation::relu: return (z.array() > 0.0).cast<double>() * gy.array();
    case Activation::tanh2: {
      MatrixXd t = z.array().tanh();
      return (2.0 * (1.0 - t.array().square()) * gy.array()).matrix();
    }
    case Activation::softmax: {
      MatrixXd gz(gy.rows(), gy.cols());
      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
        double dot = gy.row(r).dot(y.row(r));
        gz.row(r) = y.row(r).array() * (gy.row(r).array() - dot);
      }
      return gz;
    }
  }
  return gy;
}

}  // namespace detail

/// Intermediate values of a batched forward pass, kept for backprop.
struct Tape {
  std::vector<MatrixXd> inputs;  // input to each layer
  std::vector<MatrixXd> pre;     // pre-activation of each layer
  MatrixXd output;
};

inline Tape forward_tape(const Mlp& net, const MatrixXd& x) {
  if (x.cols() != net.input_dim())
    throw InvalidInput("input width " + std::to_string(x.cols()) + " != network input " +
                       std::to_string(net.input_dim()));
  Tape t;
  const std::size_t L = net.weights.size();
  t.inputs.reserve(L);
  t.pre.reserve(L);
  MatrixXd h = x;
  for (std::size_t l = 0; l < L; ++l) {
    t.inputs.push_back(h);
    MatrixXd z = h * net.weights[l];
    z.rowwise() += net.biases[l];
    t.pre.push_back(z);
    detail::apply_activation(z, l + 1 == L ? net.output_activation : net.hidden_activation);
    h = std::move(z);
  }
  t.output = std::move(h);
  return t;
}

inline MatrixXd forward(const Mlp& net, const MatrixXd& x) {
  if (x.cols() != net.input_dim())
    throw InvalidInput("input width " + std::to_string(x.cols()) + " != network input " +
                       std::to_string(net.input_dim()));
  const std::size_t L = net.weights.size();
  MatrixXd h = x;
  for (std::size_t l = 0; l < L; ++l) {
    MatrixXd z = h * net.weights[l];
    z.rowwise() += net.biases[l];
    detail::apply_activation(z, l + 1 == L ? net.output_activation : net.hidden_activation);
    h = std::move(z);
  }
  return h;
}

inline VectorXd mlp_forward(const Mlp& net, const VectorXd& input) {
  if (input.size() != net.input_dim()) throw InvalidInput("mlp_forward: input length mismatch");
  MatrixXd out = forward(net, input.transpose());
  return out.row(0).transpose();
}

struct Backward {
  Params grads;       // gradient of sum_rows(upstream . output)
  MatrixXd input_grad;
};

/// Reverse pass. Gradients are of sum over rows of <upstream_row, output_row>;
/// callers fold any 1/batch averaging into `upstream`.
inline Backward backward(const Mlp& net, const Tape& tape, const MatrixXd& upstream, bool want_input_grad = true) {
  if (upstream.rows() != tape.output.rows() || upstream.cols() != tape.output.cols())
    throw InvalidInput("backward: upstream gradient shape mismatch");
  const std::size_t L = net.weights.size();
  Backward b;
  b.grads.weights.resize(L);
  b.grads.biases.resize(L);
  MatrixXd g = upstream;
  for (std::size_t l = L; l-- > 0;) {
    const MatrixXd& y = (l + 1 == L) ? tape.output : tape.inputs[l + 1];
    MatrixXd gz = detail::activation_backward(tape.pre[l], y, g, l + 1 == L ? net.output_activation
                                                                            : net.hidden_activation);
    b.grads.weights[l].noalias() = tape.inputs[l].transpose() * gz;
    b.grads.biases[l] = gz.colwise().sum();
    if (l > 0 || want_input_grad) g.noalias() = gz * net.weights[l].transpose();
  }
  if (want_input_grad) b.input_grad = std::move(g);
  return b;
}

inline Backward mlp_backward(const Mlp& net, const VectorXd& input, const VectorXd& upstream) {
  if (input.size() != net.input_dim()) throw InvalidInput("mlp_backward: input length mismatch");
  if (upstream.size() != net.output_dim()) throw InvalidInput("mlp_backward: upstream length mismatch");
  Tape t = forward_tape(net, input.transpose());
  return backward(net, t, upstream.transpose());
}

/// Adam optimizer state. Moments mirror the parameter shapes.
struct AdamState {
  Params first_moment;
  Params second_moment;
  long step_count = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const Params& p, double lr = 3e-4) {
    AdamState s;
    s.first_moment = p.zeros_like();
    s.second_moment = p.zeros_like();
    s.lr = lr;
    return s;
  }
};

inline void adam_step(Params& params, const Params& grads, AdamState& st) {
  if (!params.same_shape(grads) || !params.same_shape(st.first_moment))
    throw InvalidInput("adam_step: gradient/moment shapes do not match parameters");
  for (std::size_t l = 0; l < grads.weights.size(); ++l)
    if (!grads.weights[l].allFinite() || !grads.biases[l].allFinite())
      throw PoisonedGradient("non-finite gradient in layer " + std::to_string(l), static_cast<int>(l));

  st.step_count += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = st.beta1 * m + (1.0 - st.beta1) * g;
    v = st.beta2 * v + (1.0 - st.beta2) * g.cwiseAbs2();
    p.array() -= st.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + st.eps);
  };
  for (std::size_t l = 0; l < grads.weights.size(); ++l) {
    update(params.weights[l], grads.weights[l], st.first_moment.weights[l], st.second_moment.weights[l]);
    update(params.biases[l], grads.biases[l], st.first_moment.biases[l], st.second_moment.biases[l]);
  }
}

/// Adam on a single scalar (the log-temperature).
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  long step_count = 0;
  double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(double& x, double g) {
    if (!std::isfinite(g)) throw PoisonedGradient("non-finite scalar gradient", 0);
    ++step_count;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    double mh = m / (1.0 - std::pow(beta1, static_cast<double>(step_count)));
    double vh = v / (1.0 - std::pow(beta2, static_cast<double>(step_count)));
    x -= lr * mh / (std::sqrt(vh) + eps);
  }
};

/// Loss value together with its analytic gradient.
struct LossAndGrad {
  double loss;
  Params grad;
};

/// Compares analytic gradients with central differences (h = 1e-5) on
/// `samples` random coordinates. Returns the max relative error
/// |analytic - fd| / max(1e-8, |fd|).
inline double grad_check(const Mlp& net, const std::function<LossAndGrad(const Mlp&)>& loss, int samples, Rng& rng,
                         double h = 1e-5) {
  require(samples > 0, "grad_check: samples must be positive");
  const LossAndGrad base = loss(net);
  const std::size_t n = net.size();
  double worst = 0.0;
  Mlp probe = net;
  for (int k = 0; k < samples; ++k) {
    std::size_t idx = rng.index(n);
    const double orig = probe.at(idx);
    probe.at(idx) = orig + h;
    const double lp = loss(probe).loss;
    probe.at(idx) = orig - h;
    const double lm = loss(probe).loss;
    probe.at(idx) = orig;
    const double fd = (lp - lm) / (2.0 * h);
    const double an = base.grad.at(idx);
    worst = std::max(worst, std::abs(an - fd) / std::max(1e-8, std::abs(fd)));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Snapshot format (text, versioned):
//
//   h2o-mlp 1
//   layers <n> <size_0> ... <size_{n-1}>
//   activations <hidden> <output>
//   W <l> <rows> <cols>
//   <row-major values, one row per line>
//   b <l> <len>
//   <values>
//   ...
// ---------------------------------------------------------------------------

inline void write_mlp(std::ostream& os, const Mlp& net) {
  os << "h2o-mlp 1\nlayers " << net.layer_sizes.size();
  for (int s : net.layer_sizes) os << ' ' << s;
  os << "\nactivations " << to_string(net.hidden_activation) << ' ' << to_string(net.output_activation) << '\n';
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const auto& w = net.weights[l];
    os << "W " << l << ' ' << w.rows() << ' ' << w.cols() << '\n';
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) os << (c ? " " : "") << format_double(w(r, c));
      os << '\n';
    }
    os << "b " << l << ' ' << net.biases[l].size() << '\n';
    for (Eigen::Index c = 0; c < net.biases[l].size(); ++c) os << (c ? " " : "") << format_double(net.biases[l](c));
    os << '\n';
  }
}

inline Mlp read_mlp(std::istream& is) {
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "h2o-mlp") throw IoError("not an h2o-mlp snapshot");
  if (version != 1) throw IoError("unsupported snapshot version " + std::to_string(version));
  std::size_t n = 0;
  if (!(is >> tag >> n) || tag != "layers") throw IoError("snapshot: expected 'layers'");
  std::vector<int> sizes(n);
  for (auto& s : sizes)
    if (!(is >> s)) throw IoError("snapshot: truncated layer sizes");
  std::string hid, out;
  if (!(is >> tag >> hid >> out) || tag != "activations") throw IoError("snapshot: expected 'activations'");
  Mlp net = Mlp::zeros(sizes, activation_from_string(out));
  net.hidden_activation = activation_from_string(hid);
  std::string tok;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    std::size_t li = 0;
    Eigen::Index rows = 0, cols = 0, len = 0;
    if (!(is >> tag >> li >> rows >> cols) || tag != "W" || li != l || rows != net.weights[l].rows() ||
        cols != net.weights[l].cols())
      throw IoError("snapshot: bad weight header for layer " + std::to_string(l));
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (!(is >> tok)) throw IoError("snapshot: truncated weights");
        net.weights[l](r, c) = parse_double(tok);
      }
    if (!(is >> tag >> li >> len) || tag != "b" || li != l || len != net.biases[l].size())
      throw IoError("snapshot: bad bias header for layer " + std::to_string(l));
    for (Eigen::Index c = 0; c < len; ++c) {
      if (!(is >> tok)) throw IoError("snapshot: truncated biases");
      net.biases[l](c) = parse_double(tok);
    }
  }
  return net;
}

inline void save_mlp(const std::string& path, const Mlp& net) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  write_mlp(os, net);
  if (!os) throw IoError("write failed: " + path);
}

inline Mlp load_mlp(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return read_mlp(is);
}

/// Bitwise equality of architecture and every parameter.
inline bool identical(const Mlp& a, const Mlp& b) {
  if (a.layer_sizes != b.layer_sizes || a.hidden_activation != b.hidden_activation ||
      a.output_activation != b.output_activation)
    return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l)
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  return true;
}

/// theta_bar <- (1 - tau) theta_bar + tau theta
inline void soft_update(Mlp& target, const Mlp& source, double tau) {
  for (std::size_t l = 0; l < target.weights.size(); ++l) {
    target.weights[l] = (1.0 - tau) * target.weights[l] + tau * source.weights[l];
    target.biases[l] = (1.0 - tau) * target.biases[l] + tau * source.biases[l];
  }
}

}  // namespace h2o::nn
