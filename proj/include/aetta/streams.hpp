#pragma once

// Synthetic source data, source-model training, label-preserving
// corruptions and test streams.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <fmt/format.h>

#include "aetta/nn.hpp"
#include "aetta/rng.hpp"

namespace aetta::streams {

using nn::MlpModel;

struct DatasetSpec {
  std::size_t class_count = 10;
  std::size_t input_dim = 16;
  std::size_t samples_per_class = 600;  // train + holdout
  std::size_t holdout_per_class = 100;
  std::size_t test_pool_per_class = 200;
  double cluster_separation = 4.0;
  double label_noise = 0.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (class_count < 2) throw ConfigError("dataset: class_count must be >= 2");
    if (input_dim < 2) throw ConfigError("dataset: input_dim must be >= 2");
    if (!(cluster_separation > 0.0)) throw ConfigError("dataset: cluster_separation must be > 0");
    if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw ConfigError("dataset: label_noise must be in [0,1]");
    if (holdout_per_class >= samples_per_class) throw ConfigError("dataset: holdout must leave training samples");
  }
};

struct LabeledSet {
  Matrix features;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> origin;  // index into the generated pool
};

struct SourceData {
  LabeledSet train;
  LabeledSet holdout;
};

// Class means are random directions scaled to cluster_separation; samples
// add unit isotropic noise.
inline Matrix class_means(const DatasetSpec& spec) {
  Rng rng(mix_seed(spec.seed, 0xc1a55));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix means(spec.class_count, spec.input_dim);
  for (std::size_t k = 0; k < spec.class_count; ++k) {
    double norm = 0.0;
    for (double& v : means.row(k)) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : means.row(k)) v *= spec.cluster_separation / norm;
  }
  return means;
}

inline LabeledSet sample_gaussian_classes(const DatasetSpec& spec, std::size_t per_class, std::uint64_t stream) {
  const Matrix means = class_means(spec);
  Rng rng(mix_seed(spec.seed, stream));
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledSet s;
  const std::size_t n = per_class * spec.class_count;
  s.features = Matrix(n, spec.input_dim);
  s.labels.resize(n);
  s.origin.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % spec.class_count;
    for (std::size_t d = 0; d < spec.input_dim; ++d) s.features(i, d) = means(k, d) + normal(rng);
    s.labels[i] = k;
    s.origin[i] = i;
  }
  if (spec.label_noise > 0.0) {
    for (auto& y : s.labels) {
      if (uniform01(rng) < spec.label_noise) y = static_cast<std::size_t>(rng() % spec.class_count);
    }
  }
  return s;
}

inline LabeledSet subset(const LabeledSet& s, std::span<const std::size_t> idx) {
  LabeledSet out;
  out.features = gather_rows(s.features, idx);
  for (std::size_t i : idx) {
    out.labels.push_back(s.labels[i]);
    out.origin.push_back(s.origin[i]);
  }
  return out;
}

// Train/holdout partition of one generated pool; deterministic given seed.
inline SourceData make_source_dataset(const DatasetSpec& spec) {
  spec.validate();
  const LabeledSet pool = sample_gaussian_classes(spec, spec.samples_per_class, 1);
  std::vector<std::size_t> perm(pool.labels.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(mix_seed(spec.seed, 2));
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t n_hold = spec.holdout_per_class * spec.class_count;
  SourceData d;
  d.holdout = subset(pool, std::span(perm).first(n_hold));
  d.train = subset(pool, std::span(perm).subspan(n_hold));
  return d;
}

// Fresh draw from the source distribution for building test streams.
inline LabeledSet make_test_pool(const DatasetSpec& spec) {
  spec.validate();
  return sample_gaussian_classes(spec, spec.test_pool_per_class, 3);
}

struct FeatureStats {
  std::vector<double> mean, stddev, min, max;

  std::vector<double> range() const {
    std::vector<double> r(mean.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = max[i] - min[i];
    return r;
  }
};

inline FeatureStats feature_stats(const Matrix& x) {
  if (x.rows() == 0) throw DomainError("feature_stats: empty matrix");
  const std::size_t d = x.cols();
  FeatureStats s;
  s.mean = column_sums(x);
  for (double& v : s.mean) v /= static_cast<double>(x.rows());
  s.stddev.assign(d, 0.0);
  s.min.assign(d, std::numeric_limits<double>::infinity());
  s.max.assign(d, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const double v = x(r, c);
      s.stddev[c] += (v - s.mean[c]) * (v - s.mean[c]);
      s.min[c] = std::min(s.min[c], v);
      s.max[c] = std::max(s.max[c], v);
    }
  }
  for (double& v : s.stddev) v = std::sqrt(v / static_cast<double>(x.rows()));
  return s;
}

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch_size = 128;
  double learning_rate = 3e-3;
  nn::OptimizerKind optimizer = nn::OptimizerKind::Adam;
  bool dropout = true;  // train with the same dropout used at inference
  double accuracy_gate = 0.90;
};

struct TrainResult {
  MlpModel model;
  double train_accuracy = 0.0;
  bool reached_gate = false;
};

inline double accuracy(const MlpModel& m, const LabeledSet& s) {
  const auto pred = row_argmax(nn::forward(m, s.features, nn::ForwardMode::deterministic()));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == s.labels[i] ? 1 : 0;
  return pred.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(pred.size());
}

// Minibatch cross-entropy training with TrainBN forwards. Failing the gate
// is reported in the result, not thrown.
inline TrainResult train_source_model(const LabeledSet& train, const nn::Architecture& arch,
                                      const TrainConfig& cfg, std::uint64_t seed) {
  if (train.features.rows() == 0) throw DomainError("train_source_model: empty training set");
  if (cfg.batch_size == 0) throw ConfigError("train batch_size must be positive");
  TrainResult res{nn::make_model(arch, seed)};
  auto opt = nn::make_optimizer(cfg.optimizer, cfg.learning_rate);
  Rng rng(mix_seed(seed, 0x7a11));
  std::vector<std::size_t> order(train.labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix xb = gather_rows(train.features, idx);
      nn::CrossEntropy loss;
      for (std::size_t i : idx) loss.labels.push_back(train.labels[i]);
      std::optional<std::uint64_t> dseed;
      if (cfg.dropout) dseed = mix_seed(seed, 0xd000000 + step);
      auto tr = nn::train_forward(res.model, xb, dseed);
      auto g = nn::backward(res.model, tr, loss, nn::TrainableMask::all());
      nn::optimizer_step(opt, res.model, g);
      ++step;
    }
  }
  res.train_accuracy = accuracy(res.model, train);
  res.reached_gate = res.train_accuracy >= cfg.accuracy_gate;
  return res;
}

enum class CorruptionKind { Clean, GaussianNoise, Rotation, Scaling, MeanShift, Mixed };

inline constexpr std::array<CorruptionKind, 6> kAllCorruptions = {
    CorruptionKind::Clean,   CorruptionKind::GaussianNoise, CorruptionKind::Rotation,
    CorruptionKind::Scaling, CorruptionKind::MeanShift,     CorruptionKind::Mixed};

inline std::string_view corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::Clean:
      return "clean";
    case CorruptionKind::GaussianNoise:
      return "gaussian_noise";
    case CorruptionKind::Rotation:
      return "rotation";
    case CorruptionKind::Scaling:
      return "scaling";
    case CorruptionKind::MeanShift:
      return "mean_shift";
    case CorruptionKind::Mixed:
      return "mixed";
  }
  return "";
}

inline CorruptionKind parse_corruption(std::string_view name) {
  for (auto k : kAllCorruptions) {
    if (corruption_name(k) == name) return k;
  }
  throw ConfigError("unknown corruption kind '" + std::string(name) + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::Clean;
  int severity = 0;  // 1..5; 0 is the identity
  std::uint64_t seed = 0;
};

inline constexpr int kMaxSeverity = 5;

namespace detail {

// Product of Givens rotations over a random pairing of the dimensions,
// angle of each plane scaled by t in [0,1]. Exactly orthogonal for every t.
inline void rotate_rows(Matrix& x, std::span<const double> center, double t, std::uint64_t seed) {
  const std::size_t d = x.cols();
  Rng rng(mix_seed(seed, 0x707a7e));
  std::vector<std::size_t> dims(d);
  std::iota(dims.begin(), dims.end(), std::size_t{0});
  std::shuffle(dims.begin(), dims.end(), rng);
  for (std::size_t p = 0; p + 1 < d; p += 2) {
    const double angle = t * (0.5 + 0.5 * uniform01(rng)) * (std::numbers::pi / 2.0);
    const double c = std::cos(angle), s = std::sin(angle);
    const std::size_t i = dims[p], j = dims[p + 1];
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const double a = x(r, i) - center[i], b = x(r, j) - center[j];
      x(r, i) = center[i] + c * a - s * b;
      x(r, j) = center[j] + s * a + c * b;
    }
  }
}

inline void scale_rows(Matrix& x, std::span<const double> center, int severity, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5ca1e));
  std::vector<double> factor(x.cols());
  for (double& f : factor) f = 1.0 + 0.15 * severity * (2.0 * uniform01(rng) - 1.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = center[c] + factor[c] * (x(r, c) - center[c]);
  }
}

inline void shift_rows(Matrix& x, std::span<const double> stddev, int severity, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5817f7));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> offset(x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) offset[c] = 0.25 * severity * stddev[c] * normal(rng);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += offset[c];
  }
}

inline void add_noise(Matrix& x, std::span<const double> stddev, int severity, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x9015e));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += 0.2 * severity * stddev[c] * normal(rng);
  }
}

}  // namespace detail

// Label-preserving covariate shift. stats are the source training feature
// statistics (scale reference and center).
inline Matrix corrupt(const Matrix& features, const CorruptionSpec& spec, const FeatureStats& stats) {
  if (spec.severity < 0 || spec.severity > kMaxSeverity) {
    throw ConfigError("severity must be in 0.." + std::to_string(kMaxSeverity));
  }
  if (stats.mean.size() != features.cols()) throw DimensionError("corrupt: feature stats width");
  Matrix x = features;
  if (spec.severity == 0 || spec.kind == CorruptionKind::Clean) return x;
  const double t = static_cast<double>(spec.severity) / kMaxSeverity;
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise:
      detail::add_noise(x, stats.stddev, spec.severity, spec.seed);
      break;
    case CorruptionKind::Rotation:
      detail::rotate_rows(x, stats.mean, t, spec.seed);
      break;
    case CorruptionKind::Scaling:
      detail::scale_rows(x, stats.mean, spec.severity, spec.seed);
      break;
    case CorruptionKind::MeanShift:
      detail::shift_rows(x, stats.stddev, spec.severity, spec.seed);
      break;
    case CorruptionKind::Mixed:
      detail::scale_rows(x, stats.mean, spec.severity, mix_seed(spec.seed, 1));
      detail::rotate_rows(x, stats.mean, t, mix_seed(spec.seed, 2));
      detail::shift_rows(x, stats.stddev, spec.severity, mix_seed(spec.seed, 3));
      detail::add_noise(x, stats.stddev, spec.severity, mix_seed(spec.seed, 4));
      break;
    case CorruptionKind::Clean:
      break;
  }
  return x;
}

struct GroundTruth;

// Labels of a stream batch. Only GroundTruth can read them, so estimators
// and adaptation code have no path to the answers.
class HiddenLabels {
 public:
  HiddenLabels() = default;
  explicit HiddenLabels(std::vector<std::size_t> v) : values_(std::move(v)) {}
  std::size_t size() const { return values_.size(); }
  friend bool operator==(const HiddenLabels&, const HiddenLabels&) = default;

 private:
  friend struct GroundTruth;
  std::vector<std::size_t> values_;
};

struct StreamBatch {
  Matrix features;
  HiddenLabels labels;
  std::size_t segment = 0;
  CorruptionKind corruption = CorruptionKind::Clean;
  int severity = 0;
  std::size_t batch_index = 0;
  bool segment_start = false;
  friend bool operator==(const StreamBatch&, const StreamBatch&) = default;
};

struct ScheduleEntry {
  CorruptionKind kind;
  int severity;
};

struct Fully {
  ScheduleEntry corruption;
};
struct Continual {
  std::vector<ScheduleEntry> schedule;
};
using Scenario = std::variant<Fully, Continual>;

// 15 entries cycling the four base corruptions.
inline std::vector<ScheduleEntry> default_continual_schedule(bool severe = false) {
  constexpr std::array<CorruptionKind, 4> kinds = {CorruptionKind::GaussianNoise, CorruptionKind::Rotation,
                                                   CorruptionKind::Scaling, CorruptionKind::MeanShift};
  std::vector<ScheduleEntry> s;
  for (std::size_t i = 0; i < 15; ++i) {
    s.push_back({kinds[i % kinds.size()], severe ? kMaxSeverity : static_cast<int>(3 + i % 3)});
  }
  return s;
}

struct ShiftStream {
  std::vector<StreamBatch> batches;
  std::vector<std::size_t> segment_starts;  // batch index of each segment's first batch
};

struct StreamConfig {
  std::size_t batch_size = 64;
  std::size_t batches_per_segment = 10;
  std::uint64_t seed = 0;
};

// Within a segment batches are drawn without replacement from the pool.
inline ShiftStream make_stream(const Scenario& scenario, const LabeledSet& pool, const FeatureStats& stats,
                               const StreamConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::vector<ScheduleEntry> schedule =
      std::holds_alternative<Fully>(scenario) ? std::vector<ScheduleEntry>{std::get<Fully>(scenario).corruption}
                                              : std::get<Continual>(scenario).schedule;
  const std::size_t need = cfg.batch_size * cfg.batches_per_segment;
  if (need > pool.labels.size()) {
    throw DomainError("test pool exhausted: segment needs " + std::to_string(need) + " samples, pool has " +
                      std::to_string(pool.labels.size()));
  }
  ShiftStream out;
  std::size_t t = 0;
  for (std::size_t seg = 0; seg < schedule.size(); ++seg) {
    std::vector<std::size_t> perm(pool.labels.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(mix_seed(cfg.seed, 0x5e90000 + seg));
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(need);
    const LabeledSet drawn = subset(pool, perm);
    const CorruptionSpec cs{schedule[seg].kind, schedule[seg].severity, mix_seed(cfg.seed, 0xc0990000 + seg)};
    const Matrix shifted = corrupt(drawn.features, cs, stats);
    out.segment_starts.push_back(t);
    for (std::size_t b = 0; b < cfg.batches_per_segment; ++b, ++t) {
      StreamBatch sb;
      sb.features = slice_rows(shifted, b * cfg.batch_size, (b + 1) * cfg.batch_size);
      sb.labels = HiddenLabels(std::vector<std::size_t>(
          drawn.labels.begin() + static_cast<std::ptrdiff_t>(b * cfg.batch_size),
          drawn.labels.begin() + static_cast<std::ptrdiff_t>((b + 1) * cfg.batch_size)));
      sb.segment = seg;
      sb.corruption = schedule[seg].kind;
      sb.severity = schedule[seg].severity;
      sb.batch_index = t;
      sb.segment_start = b == 0;
      out.batches.push_back(std::move(sb));
    }
  }
  return out;
}

// The single reader of hidden labels.
struct GroundTruth {
  static double accuracy(const HiddenLabels& truth, std::span<const std::size_t> predictions) {
    if (truth.values_.size() != predictions.size()) throw DimensionError("ground truth size mismatch");
    if (predictions.empty()) throw DomainError("ground truth: empty batch");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) ok += truth.values_[i] == predictions[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(predictions.size());
  }

  static std::span<const std::size_t> reveal(const HiddenLabels& truth) { return truth.values_; }
};

// batch_index,segment,corruption,severity,label,f0..f{D-1}
inline void export_stream_csv(const ShiftStream& s, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::size_t d = s.batches.empty() ? 0 : s.batches.front().features.cols();
  f << "batch_index,segment,corruption,severity,label";
  for (std::size_t c = 0; c < d; ++c) f << ",f" << c;
  f << '\n';
  for (const auto& b : s.batches) {
    auto labels = GroundTruth::reveal(b.labels);
    for (std::size_t r = 0; r < b.features.rows(); ++r) {
      f << fmt::format("{},{},{},{},{}", b.batch_index, b.segment, corruption_name(b.corruption), b.severity,
                       labels[r]);
      for (double v : b.features.row(r)) f << ',' << fmt::format("{}", v);
      f << '\n';
    }
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace aetta::streams
