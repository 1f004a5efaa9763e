#pragma once

// Label-free accuracy estimators for a model adapting at test time.
//
// AETTA combines the disagreement between the model's deterministic
// prediction and N dropout inferences (PDD) with a robustness weight
// b = (E_avg / ln K)^-alpha, where E_avg is the entropy of the softmax output
// averaged over batch and dropout inferences. A skewed, over-confident batch
// has low E_avg and therefore a large b.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "aetta/nn.hpp"

namespace aetta::est {

using nn::MlpModel;
using nn::ProbBatch;

struct AettaConfig {
  std::size_t n_dropout = 10;
  double alpha = 3.0;
  double ema_coefficient = 0.9;  // weight on history
  double entropy_floor = 1e-8;
  std::uint64_t base_seed = 0;

  void validate() const {
    if (n_dropout < 1) throw ConfigError("n_dropout must be >= 1");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
    if (!(ema_coefficient > 0.0 && ema_coefficient <= 1.0)) throw ConfigError("ema_coefficient must be in (0,1]");
    if (!(entropy_floor > 0.0)) throw ConfigError("entropy_floor must be positive");
  }
};

class EstimatorState {
 public:
  explicit EstimatorState(std::size_t capacity = 10) : capacity_(capacity) {
    if (capacity_ < 10) throw ConfigError("estimator history capacity must be >= 10");
  }

  const std::optional<double>& ema_error() const { return ema_error_; }
  const std::deque<double>& history() const { return history_; }
  std::size_t capacity() const { return capacity_; }

  void record(double smoothed_error) {
    ema_error_ = smoothed_error;
    history_.push_back(1.0 - smoothed_error);
    while (history_.size() > capacity_) history_.pop_front();
  }

  // Test hook for recovery policies.
  void push_accuracy(double acc) {
    history_.push_back(acc);
    while (history_.size() > capacity_) history_.pop_front();
  }

  friend bool operator==(const EstimatorState&, const EstimatorState&) = default;

 private:
  std::optional<double> ema_error_;
  std::deque<double> history_;
  std::size_t capacity_;
};

struct EstimateReport {
  double pdd = 0.0;
  double e_avg = 0.0;
  double b_weight = 1.0;
  double raw_error = 0.0;
  double smoothed_error = 0.0;
  double smoothed_accuracy = 1.0;
  friend bool operator==(const EstimateReport&, const EstimateReport&) = default;
};

struct DropoutEnsemble {
  std::vector<ProbBatch> probs;                       // N slices of B x K
  std::vector<std::vector<std::size_t>> hard_labels;  // N x B

  std::size_t size() const { return probs.size(); }
  std::size_t batch_size() const { return probs.empty() ? 0 : probs.front().rows(); }
  std::size_t class_count() const { return probs.empty() ? 0 : probs.front().cols(); }

  static DropoutEnsemble from_probs(std::vector<ProbBatch> slices) {
    DropoutEnsemble e;
    for (const auto& s : slices) {
      if (s.rows() != slices.front().rows() || s.cols() != slices.front().cols()) {
        throw DimensionError("ensemble slices must share shape");
      }
      e.hard_labels.push_back(row_argmax(s));
    }
    e.probs = std::move(slices);
    return e;
  }
};

// N dropout inferences with seeds base_seed, base_seed+1, ...
inline DropoutEnsemble dropout_ensemble(const MlpModel& model, const Matrix& batch, std::size_t n,
                                        std::uint64_t base_seed) {
  std::vector<ProbBatch> slices;
  slices.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    slices.push_back(nn::forward(model, batch, nn::ForwardMode::with_dropout(base_seed + i)));
  }
  return DropoutEnsemble::from_probs(std::move(slices));
}

inline double pdd(std::span<const std::size_t> base_labels, const DropoutEnsemble& ens) {
  if (base_labels.empty() || ens.size() == 0) throw DomainError("pdd: empty batch or ensemble");
  double total = 0.0;
  for (const auto& labels : ens.hard_labels) {
    if (labels.size() != base_labels.size()) throw DimensionError("pdd: batch size mismatch");
    std::size_t disagree = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) disagree += labels[b] != base_labels[b] ? 1 : 0;
    total += static_cast<double>(disagree) / static_cast<double>(labels.size());
  }
  return total / static_cast<double>(ens.size());
}

// Softmax output averaged over the batch, then over dropout inferences.
inline std::vector<double> batch_aggregate(const DropoutEnsemble& ens) {
  if (ens.size() == 0 || ens.batch_size() == 0) throw DomainError("batch_aggregate: empty ensemble");
  std::vector<double> avg(ens.class_count(), 0.0);
  for (const auto& slice : ens.probs) {
    auto sums = column_sums(slice);
    for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += sums[k] / static_cast<double>(slice.rows());
  }
  for (double& v : avg) v /= static_cast<double>(ens.size());
  return avg;
}

inline double robust_weight(double e_avg, std::size_t class_count, double alpha, double entropy_floor) {
  const double e_max = std::log(static_cast<double>(class_count));
  const double ratio = std::min(std::max(e_avg, entropy_floor) / e_max, 1.0);
  return std::pow(ratio, -alpha);
}

// Algorithm core on precomputed predictions. Updates state.
inline EstimateReport aetta_from_ensemble(std::span<const std::size_t> base_labels, const DropoutEnsemble& ens,
                                          const AettaConfig& cfg, EstimatorState& state) {
  EstimateReport rep;
  rep.pdd = pdd(base_labels, ens);
  rep.e_avg = nn::row_entropy(batch_aggregate(ens));
  rep.b_weight = robust_weight(rep.e_avg, ens.class_count(), cfg.alpha, cfg.entropy_floor);
  rep.raw_error = std::clamp(rep.b_weight * rep.pdd, 0.0, 1.0);
  rep.smoothed_error = state.ema_error()
                           ? cfg.ema_coefficient * *state.ema_error() + (1.0 - cfg.ema_coefficient) * rep.raw_error
                           : rep.raw_error;
  rep.smoothed_error = std::clamp(rep.smoothed_error, 0.0, 1.0);
  rep.smoothed_accuracy = 1.0 - rep.smoothed_error;
  state.record(rep.smoothed_error);
  return rep;
}

inline EstimateReport aetta_estimate(const MlpModel& model, const Matrix& batch, const AettaConfig& cfg,
                                     EstimatorState& state) {
  cfg.validate();
  if (model.class_count() < 2) throw ConfigError("aetta: need at least 2 classes");
  if (batch.rows() == 0) throw DomainError("aetta: empty batch");
  const auto base = row_argmax(nn::forward(model, batch, nn::ForwardMode::deterministic()));
  const auto ens = dropout_ensemble(model, batch, cfg.n_dropout, cfg.base_seed);
  return aetta_from_ensemble(base, ens, cfg, state);
}

inline double softmax_score(const MlpModel& model, const Matrix& batch, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (batch.rows() == 0) throw DomainError("softmax_score: empty batch");
  Matrix z = nn::forward_logits(model, batch, nn::ForwardMode::deterministic());
  for (double& v : z.data()) v /= temperature;
  nn::softmax_rows_inplace(z);
  double s = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    s += *std::max_element(row.begin(), row.end());
  }
  return s / static_cast<double>(z.rows());
}

inline double agreement_rate(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw DimensionError("agreement: size mismatch");
  if (a.empty()) throw DomainError("agreement: empty batch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

inline double gde_agreement(const MlpModel& a, const MlpModel& b, const Matrix& batch) {
  if (a.class_count() != b.class_count() || a.input_dim() != b.input_dim()) {
    throw DimensionError("gde: models disagree on dimensions");
  }
  const auto pa = row_argmax(nn::forward(a, batch, nn::ForwardMode::deterministic()));
  const auto pb = row_argmax(nn::forward(b, batch, nn::ForwardMode::deterministic()));
  return agreement_rate(pa, pb);
}

inline double src_valid(const MlpModel& model, const Matrix& holdout, std::span<const std::size_t> labels) {
  if (holdout.rows() == 0) throw DomainError("src_valid: empty holdout");
  nn::check_labels(labels, holdout.rows(), model.class_count());
  const auto pred = row_argmax(nn::forward(model, holdout, nn::ForwardMode::deterministic()));
  return agreement_rate(pred, labels);
}

// FGSM step against the source model's own predictions:
// x' = x + epsilon * scale * sign(grad_x CE(source(x), argmax source(x))).
inline Matrix fgsm_perturb(const MlpModel& source, const Matrix& batch, double epsilon,
                           std::span<const double> feature_scale) {
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
  if (feature_scale.size() != batch.cols()) throw DimensionError("feature scale width");
  auto tr = nn::forward_trace(source, batch, nn::ForwardMode::deterministic());
  nn::CrossEntropy loss{row_argmax(tr.probs)};
  auto g = nn::backward(source, tr, loss, nn::TrainableMask{false, false});
  Matrix out = batch;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      const double gv = g.input(r, c);
      const double s = gv > 0.0 ? 1.0 : (gv < 0.0 ? -1.0 : 0.0);
      out(r, c) += epsilon * feature_scale[c] * s;
    }
  }
  return out;
}

inline double adv_perturb_agreement(const MlpModel& source, const MlpModel& adapted, const Matrix& batch,
                                    double epsilon, std::span<const double> feature_scale) {
  if (source.class_count() != adapted.class_count() || source.input_dim() != adapted.input_dim()) {
    throw DimensionError("adv_perturb: models disagree on dimensions");
  }
  if (batch.rows() == 0) throw DomainError("adv_perturb: empty batch");
  const Matrix perturbed = fgsm_perturb(source, batch, epsilon, feature_scale);
  return gde_agreement(source, adapted, perturbed);
}

}  // namespace aetta::est
