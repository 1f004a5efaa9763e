#pragma once

// Small dense network with batch normalization, inverted dropout and exact
// manual gradients. Layout of every hidden block:
//
//   dense -> [batch norm] -> relu -> dropout
//
// followed by a dense K-way head. Dropout never touches the input or the
// logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "aetta/matrix.hpp"
#include "aetta/rng.hpp"

namespace aetta::nn {

using ProbBatch = Matrix;  // B x K, rows are probability vectors

struct DenseLayer {
  Matrix weights;  // in x out
  std::vector<double> bias;

  std::size_t in_dim() const { return weights.rows(); }
  std::size_t out_dim() const { return weights.cols(); }
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct BatchNormLayer {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormLayer(std::size_t width = 0)
      : gamma(width, 1.0), beta(width, 0.0), running_mean(width, 0.0), running_var(width, 1.0) {}
  std::size_t width() const { return gamma.size(); }
  friend bool operator==(const BatchNormLayer&, const BatchNormLayer&) = default;
};

struct DropoutSpec {
  std::vector<double> rate_per_hidden_layer;
  friend bool operator==(const DropoutSpec&, const DropoutSpec&) = default;
};

// Dropout rate keyed to the class count: 0.4 up to 10 classes, 0.3 up to
// 100, 0.2 beyond.
inline double default_dropout_rate(std::size_t class_count) {
  if (class_count <= 10) return 0.4;
  if (class_count <= 100) return 0.3;
  return 0.2;
}

// How batch norm normalizes outside of explicit TrainBN passes. Batch means
// transductive normalization with the current batch statistics, the way a
// TENT-configured model predicts.
enum class BnInference { Running, Batch };

struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t class_count = 0;
  bool batch_norm = true;
  // Empty means default_dropout_rate(class_count) for every hidden layer.
  std::vector<double> dropout_rates;
};

struct MlpModel {
  std::vector<DenseLayer> hidden;
  std::vector<BatchNormLayer> norms;  // empty, or one per hidden layer
  DenseLayer head;
  DropoutSpec dropout;
  BnInference bn_inference = BnInference::Running;

  std::size_t input_dim() const { return hidden.empty() ? head.in_dim() : hidden.front().in_dim(); }
  std::size_t class_count() const { return head.out_dim(); }
  bool has_batch_norm() const { return !norms.empty(); }
  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

inline void validate(const MlpModel& m) {
  if (m.class_count() < 2) throw ConfigError("model needs at least 2 classes");
  if (m.head.bias.size() != m.head.out_dim()) throw DimensionError("head bias width");
  if (!m.norms.empty() && m.norms.size() != m.hidden.size()) {
    throw ConfigError("batch norm layers must match hidden layers one to one");
  }
  if (m.dropout.rate_per_hidden_layer.size() != m.hidden.size()) {
    throw ConfigError("dropout spec needs one rate per hidden layer");
  }
  for (double r : m.dropout.rate_per_hidden_layer) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout rate must be in [0,1)");
  }
  std::size_t prev = m.input_dim();
  for (std::size_t i = 0; i < m.hidden.size(); ++i) {
    const auto& h = m.hidden[i];
    if (h.in_dim() != prev || h.bias.size() != h.out_dim()) {
      throw DimensionError("hidden layer " + std::to_string(i) + " shape mismatch");
    }
    if (!m.norms.empty()) {
      const auto& bn = m.norms[i];
      if (bn.width() != h.out_dim() || bn.beta.size() != bn.width() ||
          bn.running_mean.size() != bn.width() || bn.running_var.size() != bn.width()) {
        throw DimensionError("batch norm " + std::to_string(i) + " width mismatch");
      }
      if (!(bn.eps > 0.0)) throw ConfigError("batch norm eps must be positive");
      if (!(bn.momentum > 0.0 && bn.momentum <= 1.0)) throw ConfigError("batch norm momentum in (0,1]");
    }
    prev = h.out_dim();
  }
  if (m.head.in_dim() != prev) throw DimensionError("head input width mismatch");
}

// He-normal weights, zero biases, identity batch norm.
inline MlpModel make_model(const Architecture& arch, std::uint64_t seed) {
  if (arch.input_dim == 0) throw ConfigError("input_dim must be positive");
  if (arch.class_count < 2) throw ConfigError("class_count must be >= 2");
  Rng rng(mix_seed(seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto dense = [&](std::size_t in, std::size_t out) {
    DenseLayer d{Matrix(in, out), std::vector<double>(out, 0.0)};
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (double& w : d.weights.data()) w = normal(rng) * scale;
    return d;
  };
  MlpModel m;
  std::size_t prev = arch.input_dim;
  for (std::size_t width : arch.hidden) {
    if (width == 0) throw ConfigError("hidden width must be positive");
    m.hidden.push_back(dense(prev, width));
    if (arch.batch_norm) m.norms.emplace_back(width);
    prev = width;
  }
  m.head = dense(prev, arch.class_count);
  if (arch.dropout_rates.empty()) {
    m.dropout.rate_per_hidden_layer.assign(arch.hidden.size(), default_dropout_rate(arch.class_count));
  } else {
    m.dropout.rate_per_hidden_layer = arch.dropout_rates;
  }
  validate(m);
  return m;
}

class ForwardMode {
 public:
  enum class Kind { Deterministic, Dropout, TrainBN };

  static ForwardMode deterministic() { return ForwardMode(Kind::Deterministic, std::nullopt); }
  static ForwardMode with_dropout(std::uint64_t seed) { return ForwardMode(Kind::Dropout, seed); }
  // Batch statistics; dropout too when a seed is given.
  static ForwardMode train_bn(std::optional<std::uint64_t> dropout_seed = std::nullopt) {
    return ForwardMode(Kind::TrainBN, dropout_seed);
  }

  Kind kind() const { return kind_; }
  const std::optional<std::uint64_t>& dropout_seed() const { return seed_; }
  bool uses_batch_stats(const MlpModel& m) const {
    return kind_ == Kind::TrainBN || m.bn_inference == BnInference::Batch;
  }

 private:
  ForwardMode(Kind k, std::optional<std::uint64_t> s) : kind_(k), seed_(s) {}
  Kind kind_;
  std::optional<std::uint64_t> seed_;
};

inline void softmax_rows_inplace(Matrix& z) {
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
}

inline ProbBatch softmax_rows(Matrix z) {
  softmax_rows_inplace(z);
  return z;
}

// Intermediate values of one forward pass, kept for backward.
struct HiddenTrace {
  Matrix input;      // B x in
  Matrix normalized;  // x-hat when batch norm is present, else empty
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased
  Matrix pre_activation;          // post batch norm, pre relu
  Matrix dropout_scale;           // 0 or 1/(1-rate); empty when no dropout applied
  Matrix output;
};

struct ForwardTrace {
  bool batch_stats = false;
  std::vector<HiddenTrace> hidden;
  Matrix head_input;
  Matrix logits;
  ProbBatch probs;
};

inline ForwardTrace forward_trace(const MlpModel& model, const Matrix& x, const ForwardMode& mode) {
  if (x.cols() != model.input_dim()) {
    throw DimensionError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(model.input_dim()));
  }
  ForwardTrace tr;
  tr.batch_stats = mode.uses_batch_stats(model);
  const std::size_t n = x.rows();
  Matrix act = x;
  for (std::size_t li = 0; li < model.hidden.size(); ++li) {
    HiddenTrace ht;
    ht.input = act;
    Matrix z = affine(act, model.hidden[li].weights, model.hidden[li].bias);
    const std::size_t w = z.cols();
    if (model.has_batch_norm()) {
      const auto& bn = model.norms[li];
      std::vector<double> mean(w), var(w);
      if (tr.batch_stats) {
        if (n == 0) throw DomainError("batch statistics need a nonempty batch");
        mean = column_sums(z);
        for (double& v : mean) v /= static_cast<double>(n);
        std::fill(var.begin(), var.end(), 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            const double d = z(r, c) - mean[c];
            var[c] += d * d;
          }
        }
        for (double& v : var) v /= static_cast<double>(n);
      } else {
        mean = bn.running_mean;
        var = bn.running_var;
      }
      ht.inv_std.resize(w);
      for (std::size_t c = 0; c < w; ++c) ht.inv_std[c] = 1.0 / std::sqrt(var[c] + bn.eps);
      ht.normalized = Matrix(n, w);
      ht.pre_activation = Matrix(n, w);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const double xh = (z(r, c) - mean[c]) * ht.inv_std[c];
          ht.normalized(r, c) = xh;
          ht.pre_activation(r, c) = bn.gamma[c] * xh + bn.beta[c];
        }
      }
      ht.batch_mean = std::move(mean);
      ht.batch_var = std::move(var);
    } else {
      ht.pre_activation = std::move(z);
    }
    Matrix out = ht.pre_activation;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    const double rate = model.dropout.rate_per_hidden_layer[li];
    if (mode.dropout_seed() && rate > 0.0) {
      Rng rng(mix_seed(*mode.dropout_seed(), li));
      const double keep_scale = 1.0 / (1.0 - rate);
      ht.dropout_scale = Matrix(n, w);
      auto& s = ht.dropout_scale.data();
      auto& o = out.data();
      for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = uniform01(rng) < rate ? 0.0 : keep_scale;
        o[i] *= s[i];
      }
    }
    ht.output = out;
    act = std::move(out);
    tr.hidden.push_back(std::move(ht));
  }
  tr.head_input = act;
  tr.logits = affine(act, model.head.weights, model.head.bias);
  tr.probs = softmax_rows(tr.logits);
  return tr;
}

inline ProbBatch forward(const MlpModel& model, const Matrix& x, const ForwardMode& mode) {
  return forward_trace(model, x, mode).probs;
}

inline Matrix forward_logits(const MlpModel& model, const Matrix& x, const ForwardMode& mode) {
  return forward_trace(model, x, mode).logits;
}

// Folds the batch statistics of a TrainBN trace into the running stats.
// Running variance uses the unbiased batch estimate.
inline void commit_batch_stats(MlpModel& model, const ForwardTrace& tr) {
  if (!tr.batch_stats || !model.has_batch_norm()) return;
  for (std::size_t li = 0; li < model.norms.size(); ++li) {
    auto& bn = model.norms[li];
    const auto& ht = tr.hidden[li];
    const double n = static_cast<double>(ht.input.rows());
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t c = 0; c < bn.width(); ++c) {
      bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * ht.batch_mean[c];
      bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * ht.batch_var[c] * unbias;
    }
  }
}

// TrainBN forward that also refreshes the running statistics.
inline ForwardTrace train_forward(MlpModel& model, const Matrix& x,
                                  std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  auto tr = forward_trace(model, x, ForwardMode::train_bn(dropout_seed));
  commit_batch_stats(model, tr);
  return tr;
}

// Mean row entropy in nats, 0 ln 0 := 0.
inline double row_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline double entropy_loss(const ProbBatch& p) {
  if (p.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) s += row_entropy(p.row(r));
  return s / static_cast<double>(p.rows());
}

inline constexpr double kProbFloor = 1e-12;

inline void check_labels(std::span<const std::size_t> labels, std::size_t rows, std::size_t k) {
  if (labels.size() != rows) throw DimensionError("label count does not match batch size");
  for (std::size_t y : labels) {
    if (y >= k) throw IndexError("label " + std::to_string(y) + " out of range for " + std::to_string(k) + " classes");
  }
}

inline double cross_entropy_loss(const ProbBatch& p, std::span<const std::size_t> labels) {
  check_labels(labels, p.rows(), p.cols());
  if (p.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) s -= std::log(std::max(p(r, labels[r]), kProbFloor));
  return s / static_cast<double>(p.rows());
}

struct CrossEntropy {
  std::vector<std::size_t> labels;
};
struct SoftCrossEntropy {
  Matrix targets;  // rows are probability vectors
};
struct Entropy {};
using LossSpec = std::variant<CrossEntropy, SoftCrossEntropy, Entropy>;

inline double soft_cross_entropy_loss(const ProbBatch& p, const Matrix& targets) {
  if (targets.rows() != p.rows() || targets.cols() != p.cols()) throw DimensionError("soft targets shape");
  if (p.rows() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t c = 0; c < p.cols(); ++c) s -= targets(r, c) * std::log(std::max(p(r, c), kProbFloor));
  }
  return s / static_cast<double>(p.rows());
}

inline double evaluate_loss(const ProbBatch& p, const LossSpec& loss) {
  return std::visit(
      [&](const auto& l) -> double {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, CrossEntropy>) {
          return cross_entropy_loss(p, l.labels);
        } else if constexpr (std::is_same_v<L, SoftCrossEntropy>) {
          return soft_cross_entropy_loss(p, l.targets);
        } else {
          return entropy_loss(p);
        }
      },
      loss);
}

// d(mean loss)/d(logits).
inline Matrix loss_logit_gradient(const ProbBatch& p, const LossSpec& loss) {
  const std::size_t n = p.rows(), k = p.cols();
  Matrix g(n, k);
  if (n == 0) return g;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::visit(
      [&](const auto& l) {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, CrossEntropy>) {
          check_labels(l.labels, n, k);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < k; ++c) g(r, c) = p(r, c) * inv_n;
            g(r, l.labels[r]) -= inv_n;
          }
        } else if constexpr (std::is_same_v<L, SoftCrossEntropy>) {
          if (l.targets.rows() != n || l.targets.cols() != k) throw DimensionError("soft targets shape");
          for (std::size_t r = 0; r < n; ++r) {
            double tsum = 0.0;
            for (std::size_t c = 0; c < k; ++c) tsum += l.targets(r, c);
            for (std::size_t c = 0; c < k; ++c) g(r, c) = (tsum * p(r, c) - l.targets(r, c)) * inv_n;
          }
        } else {
          // dH/dz_j = -p_j (ln p_j + H)
          for (std::size_t r = 0; r < n; ++r) {
            const double h = row_entropy(p.row(r));
            for (std::size_t c = 0; c < k; ++c) {
              const double pv = p(r, c);
              g(r, c) = pv > 0.0 ? -pv * (std::log(pv) + h) * inv_n : 0.0;
            }
          }
        }
      },
      loss);
  return g;
}

enum class ParamKind { DenseWeight, DenseBias, BnGamma, BnBeta };

struct TrainableMask {
  bool dense = true;
  bool bn_affine = true;

  static TrainableMask all() { return {true, true}; }
  static TrainableMask bn_affine_only() { return {false, true}; }
  bool selects(ParamKind k) const {
    return (k == ParamKind::DenseWeight || k == ParamKind::DenseBias) ? dense : bn_affine;
  }
};

template <class Values>
struct ParamRefT {
  ParamKind kind;
  std::size_t layer;  // hidden index; hidden.size() for the head
  Values values;
};
using ParamRef = ParamRefT<std::span<double>>;
using ConstParamRef = ParamRefT<std::span<const double>>;

// Every trainable tensor in a fixed order: per hidden layer W, b, gamma,
// beta; then head W, b.
template <class Model>
auto parameter_refs(Model& m) {
  using Span = std::conditional_t<std::is_const_v<Model>, std::span<const double>, std::span<double>>;
  std::vector<ParamRefT<Span>> out;
  for (std::size_t i = 0; i < m.hidden.size(); ++i) {
    out.push_back({ParamKind::DenseWeight, i, Span(m.hidden[i].weights.data())});
    out.push_back({ParamKind::DenseBias, i, Span(m.hidden[i].bias)});
    if (!m.norms.empty()) {
      out.push_back({ParamKind::BnGamma, i, Span(m.norms[i].gamma)});
      out.push_back({ParamKind::BnBeta, i, Span(m.norms[i].beta)});
    }
  }
  out.push_back({ParamKind::DenseWeight, m.hidden.size(), Span(m.head.weights.data())});
  out.push_back({ParamKind::DenseBias, m.hidden.size(), Span(m.head.bias)});
  return out;
}

inline std::size_t parameter_count(const MlpModel& m) {
  std::size_t n = 0;
  for (const auto& p : parameter_refs(m)) n += p.values.size();
  return n;
}

// One entry per parameter_refs() tensor; unmasked entries stay empty.
struct Gradients {
  std::vector<std::vector<double>> params;
  Matrix input;  // d loss / d x
};

inline Gradients backward(const MlpModel& model, const ForwardTrace& tr, const LossSpec& loss,
                          const TrainableMask& mask) {
  const auto refs = parameter_refs(model);
  Gradients g;
  g.params.resize(refs.size());
  // Index of the first ref for each hidden layer.
  const std::size_t per_layer = model.has_batch_norm() ? 4 : 2;
  const std::size_t head_idx = model.hidden.size() * per_layer;

  Matrix delta = loss_logit_gradient(tr.probs, loss);
  if (mask.dense) {
    g.params[head_idx] = matmul_tn(tr.head_input, delta).data();
    g.params[head_idx + 1] = column_sums(delta);
  }
  delta = matmul_nt(delta, model.head.weights);

  for (std::size_t li = model.hidden.size(); li-- > 0;) {
    const auto& ht = tr.hidden[li];
    const std::size_t n = delta.rows(), w = delta.cols();
    if (!ht.dropout_scale.empty()) {
      for (std::size_t i = 0; i < delta.data().size(); ++i) delta.data()[i] *= ht.dropout_scale.data()[i];
    }
    for (std::size_t i = 0; i < delta.data().size(); ++i) {
      if (!(ht.pre_activation.data()[i] > 0.0)) delta.data()[i] = 0.0;
    }
    const std::size_t base = li * per_layer;
    if (model.has_batch_norm()) {
      const auto& bn = model.norms[li];
      if (mask.bn_affine) {
        std::vector<double> dgamma(w, 0.0), dbeta(w, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            dgamma[c] += delta(r, c) * ht.normalized(r, c);
            dbeta[c] += delta(r, c);
          }
        }
        g.params[base + 2] = std::move(dgamma);
        g.params[base + 3] = std::move(dbeta);
      }
      // delta becomes d/d x-hat
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < w; ++c) delta(r, c) *= bn.gamma[c];
      }
      if (tr.batch_stats) {
        std::vector<double> sum_d(w, 0.0), sum_dx(w, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            sum_d[c] += delta(r, c);
            sum_dx[c] += delta(r, c) * ht.normalized(r, c);
          }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            delta(r, c) = ht.inv_std[c] * (delta(r, c) - inv_n * sum_d[c] - ht.normalized(r, c) * inv_n * sum_dx[c]);
          }
        }
      } else {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < w; ++c) delta(r, c) *= ht.inv_std[c];
        }
      }
    }
    if (mask.dense) {
      g.params[base] = matmul_tn(ht.input, delta).data();
      g.params[base + 1] = column_sums(delta);
    }
    delta = matmul_nt(delta, model.hidden[li].weights);
  }
  g.input = std::move(delta);
  return g;
}

inline Gradients backward(const MlpModel& model, const Matrix& x, const LossSpec& loss, const ForwardMode& mode,
                          const TrainableMask& mask) {
  return backward(model, forward_trace(model, x, mode), loss, mask);
}

enum class OptimizerKind { SGD, Adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

inline OptimizerState make_optimizer(OptimizerKind kind, double learning_rate) {
  OptimizerState s;
  s.kind = kind;
  s.learning_rate = learning_rate;
  return s;
}

// Fresh state with the same hyperparameters.
inline OptimizerState reinitialized(const OptimizerState& s) { return make_optimizer(s.kind, s.learning_rate); }

inline void optimizer_step(OptimizerState& state, MlpModel& model, const Gradients& grads) {
  auto refs = parameter_refs(model);
  if (grads.params.size() != refs.size()) throw DimensionError("gradient list does not match model parameters");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!grads.params[i].empty() && grads.params[i].size() != refs[i].values.size()) {
      throw DimensionError("gradient shape mismatch for parameter tensor " + std::to_string(i));
    }
  }
  if (state.kind == OptimizerKind::SGD) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& gi = grads.params[i];
      for (std::size_t j = 0; j < gi.size(); ++j) refs[i].values[j] -= state.learning_rate * gi[j];
    }
    ++state.step;
    return;
  }
  if (state.first_moment.empty()) {
    for (const auto& r : refs) {
      state.first_moment.emplace_back(r.values.size(), 0.0);
      state.second_moment.emplace_back(r.values.size(), 0.0);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& gi = grads.params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < gi.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gi[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gi[j] * gi[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      refs[i].values[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace aetta::nn
