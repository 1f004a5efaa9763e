#pragma once

// Test-time adaptation steps and model recovery policies.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "aetta/estimators.hpp"
#include "aetta/nn.hpp"

namespace aetta::tta {

using nn::MlpModel;

enum class AdaptMethod { Tent, BnStats, None };

struct AdaptConfig {
  AdaptMethod method = AdaptMethod::Tent;
  double learning_rate = 1e-3;
  nn::OptimizerKind optimizer = nn::OptimizerKind::Adam;

  void validate(const MlpModel& m) const {
    if (method == AdaptMethod::None) return;
    if (!m.has_batch_norm()) throw ConfigError("adaptation method needs at least one batch norm layer");
    if (method == AdaptMethod::Tent && !(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  }
};

// Puts a source model into the inference mode its adaptation method
// predicts with: transductive batch norm for Tent and BnStats.
inline MlpModel configure_model(MlpModel m, const AdaptConfig& cfg) {
  cfg.validate(m);
  m.bn_inference = cfg.method == AdaptMethod::None ? nn::BnInference::Running : nn::BnInference::Batch;
  return m;
}

inline nn::OptimizerState make_optimizer(const AdaptConfig& cfg) {
  return nn::make_optimizer(cfg.optimizer, cfg.learning_rate);
}

// One TENT update: TrainBN forward (running stats refreshed), mean entropy,
// gradient on batch-norm gamma/beta only, one optimizer step. Returns the
// entropy loss before the update.
inline double tent_step(MlpModel& model, nn::OptimizerState& opt, const Matrix& batch) {
  if (!model.has_batch_norm()) throw ConfigError("tent_step: model has no batch norm layers");
  if (batch.rows() == 0) throw DomainError("tent_step: empty batch");
  auto tr = nn::train_forward(model, batch);
  const double loss = nn::entropy_loss(tr.probs);
  auto g = nn::backward(model, tr, nn::Entropy{}, nn::TrainableMask::bn_affine_only());
  nn::optimizer_step(opt, model, g);
  return loss;
}

// Runs the configured adaptation on one batch. Returns the entropy of the
// pre-update TrainBN forward, or nullopt for None.
inline std::optional<double> adapt_step(MlpModel& model, nn::OptimizerState& opt, const Matrix& batch,
                                        const AdaptConfig& cfg) {
  switch (cfg.method) {
    case AdaptMethod::Tent:
      return tent_step(model, opt, batch);
    case AdaptMethod::BnStats: {
      if (!model.has_batch_norm()) throw ConfigError("bn-stats adaptation: model has no batch norm layers");
      auto tr = nn::train_forward(model, batch);
      return nn::entropy_loss(tr.probs);
    }
    case AdaptMethod::None:
      return std::nullopt;
  }
  return std::nullopt;
}

enum class RecoveryKind { AettaReset, Episodic, MRS, StochasticRestore, DistShift, None };
enum class WindowComparison { Mean, Elementwise };
enum class ResetTrigger { WindowDegradation, HardThreshold, External };

inline std::string_view trigger_name(ResetTrigger t) {
  switch (t) {
    case ResetTrigger::WindowDegradation:
      return "window_degradation";
    case ResetTrigger::HardThreshold:
      return "hard_threshold";
    case ResetTrigger::External:
      return "external";
  }
  return "";
}

struct RecoveryPolicy {
  RecoveryKind kind = RecoveryKind::None;
  std::size_t window = 5;
  double hard_threshold = 0.2;  // smoothed accuracy
  double mrs_threshold = 0.2;   // entropy EMA
  double mrs_ema_coefficient = 0.9;
  double restore_prob = 0.01;
  WindowComparison comparison = WindowComparison::Mean;

  void validate() const {
    if (window < 1) throw ConfigError("recovery window must be >= 1");
    if (!(hard_threshold >= 0.0 && hard_threshold <= 1.0)) throw ConfigError("hard_threshold must be in [0,1]");
    if (!(mrs_threshold >= 0.0)) throw ConfigError("mrs_threshold must be >= 0");
    if (!(mrs_ema_coefficient > 0.0 && mrs_ema_coefficient <= 1.0)) throw ConfigError("mrs EMA coefficient in (0,1]");
    if (!(restore_prob >= 0.0 && restore_prob <= 1.0)) throw ConfigError("restore_prob must be in [0,1]");
  }
};

struct ResetEvent {
  std::size_t batch_index = 0;
  ResetTrigger trigger = ResetTrigger::External;
};

// Moving average of the entropy loss, as used by MRS.
struct EntropyEma {
  std::optional<double> value;

  void update(double loss, double coefficient) {
    value = value ? coefficient * *value + (1.0 - coefficient) * loss : loss;
  }
  void clear() { value.reset(); }
};

struct RecoveryContext {
  std::size_t batch_index = 0;
  bool segment_start = false;  // first batch of a new corruption
  std::optional<double> entropy_ema;
};

struct ResetDecision {
  bool reset = false;
  std::optional<ResetTrigger> trigger;
};

inline ResetDecision should_reset(const RecoveryPolicy& policy, const est::EstimatorState& state,
                                  const RecoveryContext& ctx) {
  switch (policy.kind) {
    case RecoveryKind::AettaReset: {
      const auto& h = state.history();
      const std::size_t w = policy.window;
      if (h.size() >= 2 * w) {
        const std::size_t n = h.size();
        bool degraded;
        if (policy.comparison == WindowComparison::Mean) {
          double recent = 0.0, previous = 0.0;
          for (std::size_t i = 0; i < w; ++i) {
            recent += h[n - w + i];
            previous += h[n - 2 * w + i];
          }
          degraded = recent / static_cast<double>(w) < previous / static_cast<double>(w);
        } else {
          degraded = true;
          for (std::size_t i = 0; i < w; ++i) degraded = degraded && h[n - w + i] < h[n - 2 * w + i];
        }
        if (degraded) return {true, ResetTrigger::WindowDegradation};
      }
      if (!h.empty() && h.back() < policy.hard_threshold) return {true, ResetTrigger::HardThreshold};
      return {};
    }
    case RecoveryKind::Episodic:
      return {true, ResetTrigger::External};
    case RecoveryKind::MRS:
      if (ctx.entropy_ema && *ctx.entropy_ema < policy.mrs_threshold) return {true, ResetTrigger::External};
      return {};
    case RecoveryKind::DistShift:
      if (ctx.segment_start && ctx.batch_index > 0) return {true, ResetTrigger::External};
      return {};
    case RecoveryKind::StochasticRestore:
    case RecoveryKind::None:
      return {};
  }
  return {};
}

inline void check_compatible(const MlpModel& model, const MlpModel& checkpoint) {
  auto a = nn::parameter_refs(model);
  auto b = nn::parameter_refs(checkpoint);
  bool ok = a.size() == b.size() && model.norms.size() == checkpoint.norms.size();
  for (std::size_t i = 0; ok && i < a.size(); ++i) {
    ok = a[i].kind == b[i].kind && a[i].values.size() == b[i].values.size();
  }
  if (!ok) throw ConfigError("checkpoint is not dimensionally compatible with the model");
}

// Restores parameters and running stats from the checkpoint and returns a
// freshly initialized optimizer.
inline void apply_reset(MlpModel& model, nn::OptimizerState& opt, const MlpModel& checkpoint) {
  check_compatible(model, checkpoint);
  model = checkpoint;
  opt = nn::reinitialized(opt);
}

struct RestoreResult {
  std::size_t restored = 0;
  std::size_t total = 0;
};

// Each scalar parameter independently reverts to its checkpoint value with
// probability restore_prob.
inline RestoreResult stochastic_restore_step(MlpModel& model, const MlpModel& checkpoint, double restore_prob,
                                             std::uint64_t seed) {
  if (!(restore_prob >= 0.0 && restore_prob <= 1.0)) throw ConfigError("restore_prob must be in [0,1]");
  check_compatible(model, checkpoint);
  Rng rng(mix_seed(seed, 0x5e5701e));
  auto dst = nn::parameter_refs(model);
  auto src = nn::parameter_refs(checkpoint);
  RestoreResult res;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t j = 0; j < dst[i].values.size(); ++j) {
      ++res.total;
      if (uniform01(rng) < restore_prob) {
        dst[i].values[j] = src[i].values[j];
        ++res.restored;
      }
    }
  }
  return res;
}

}  // namespace aetta::tta
