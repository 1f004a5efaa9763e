#pragma once

// Experiment driver: wires streams, adaptation, estimators and recovery,
// scores every batch against the hidden labels and writes run.csv,
// summary.csv and SVG accuracy traces.
//
// Per batch t:
//   1. every enabled estimator evaluates the current model on the features;
//      ground-truth accuracy of the same model is recorded,
//   2. the recovery policy is consulted and a reset applied,
//   3. the adaptation step runs on the batch.
// Episodic recovery resets after step 3 instead, so every batch starts from
// the source checkpoint.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "aetta/estimators.hpp"
#include "aetta/nn.hpp"
#include "aetta/streams.hpp"
#include "aetta/tta.hpp"

namespace aetta::harness {

using nn::MlpModel;

enum class Estimator : std::size_t { SrcValid = 0, Softmax, Gde, AdvPerturb, Aetta };
inline constexpr std::size_t kEstimatorCount = 5;
inline constexpr std::array<Estimator, kEstimatorCount> kEstimators = {
    Estimator::SrcValid, Estimator::Softmax, Estimator::Gde, Estimator::AdvPerturb, Estimator::Aetta};

inline std::string_view estimator_name(Estimator e) {
  constexpr std::array<std::string_view, kEstimatorCount> names = {"srcvalid", "softmax", "gde", "advperturb",
                                                                   "aetta"};
  return names[static_cast<std::size_t>(e)];
}

inline constexpr std::string_view kRunCsvHeader =
    "t,corruption,severity,true_acc,est_srcvalid,est_softmax,est_gde,est_advperturb,est_aetta,"
    "err_srcvalid,err_softmax,err_gde,err_advperturb,err_aetta,reset,trigger";

enum class ScenarioKind { Fully, Continual };

struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::Continual;
  std::size_t batch_size = 64;
  std::size_t batches_per_segment = 10;
  std::vector<streams::ScheduleEntry> schedule = streams::default_continual_schedule();
  // Each entry is adapted independently from the source model.
  std::vector<streams::ScheduleEntry> fully_corruptions = {{streams::CorruptionKind::GaussianNoise, 5},
                                                           {streams::CorruptionKind::Rotation, 5},
                                                           {streams::CorruptionKind::Scaling, 5},
                                                           {streams::CorruptionKind::MeanShift, 5}};
};

struct EstimatorConfigs {
  bool aetta = true;
  est::AettaConfig aetta_config;
  bool srcvalid = true;
  bool softmax = true;
  double softmax_temperature = 2.0;
  bool gde = true;
  bool advperturb = true;
  double advperturb_epsilon = 1.0 / 255.0;  // times the source feature range

  bool enabled(Estimator e) const {
    switch (e) {
      case Estimator::SrcValid:
        return srcvalid;
      case Estimator::Softmax:
        return softmax;
      case Estimator::Gde:
        return gde;
      case Estimator::AdvPerturb:
        return advperturb;
      case Estimator::Aetta:
        return aetta;
    }
    return false;
  }
};

struct ExperimentConfig {
  streams::DatasetSpec dataset;
  nn::Architecture architecture;  // input_dim and class_count come from dataset
  streams::TrainConfig training;
  tta::AdaptConfig adaptation;
  EstimatorConfigs estimators;
  tta::RecoveryPolicy recovery;
  ScenarioConfig scenario;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::string output_dir = "out";

  nn::Architecture resolved_architecture() const {
    auto a = architecture;
    a.input_dim = dataset.input_dim;
    a.class_count = dataset.class_count;
    return a;
  }

  void validate() const {
    dataset.validate();
    estimators.aetta_config.validate();
    recovery.validate();
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (scenario.batch_size == 0) throw ConfigError("scenario batch_size must be positive");
    const auto& entries = scenario.kind == ScenarioKind::Continual ? scenario.schedule : scenario.fully_corruptions;
    if (entries.empty() || scenario.batches_per_segment == 0) {
      throw ConfigError("scenario produces zero batches; MAE would be undefined");
    }
    for (const auto& e : entries) {
      if (e.severity < 0 || e.severity > streams::kMaxSeverity) throw ConfigError("severity must be in 0..5");
    }
    if (!(estimators.softmax_temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
    if (!(estimators.advperturb_epsilon >= 0.0)) throw ConfigError("advperturb epsilon must be >= 0");
    if (adaptation.method != tta::AdaptMethod::None && !architecture.batch_norm) {
      throw ConfigError("adaptation needs batch norm layers");
    }
    if (architecture.hidden.empty() && adaptation.method != tta::AdaptMethod::None) {
      throw ConfigError("adaptation needs at least one hidden layer with batch norm");
    }
  }
};

// High-learning-rate TENT on a severe continual schedule: the model becomes
// over-confident and its predictions collapse onto few classes.
inline void apply_collapse_preset(ExperimentConfig& cfg) {
  cfg.adaptation.method = tta::AdaptMethod::Tent;
  cfg.adaptation.optimizer = nn::OptimizerKind::Adam;
  // Aggressive enough that entropy minimisation drives the model into a
  // single-class collapse within the stream.
  cfg.adaptation.learning_rate = 1.0;
  cfg.scenario.kind = ScenarioKind::Continual;
  cfg.scenario.batches_per_segment = 15;
  cfg.scenario.schedule = streams::default_continual_schedule(true);
}

struct RunRecord {
  std::size_t t = 0;
  std::string corruption;
  int severity = 0;
  double true_acc = 0.0;
  std::array<std::optional<double>, kEstimatorCount> est{};
  std::array<std::optional<double>, kEstimatorCount> err{};
  bool reset = false;
  std::string trigger;
  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

struct BatchDiagnostics {
  std::size_t segment = 0;
  bool segment_start = false;
  est::EstimateReport aetta;
  double entropy_loss = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<RunRecord> records;
  std::vector<BatchDiagnostics> diagnostics;
  double source_holdout_accuracy = 0.0;
  bool source_reached_gate = false;
  std::optional<std::string> error;
};

struct SummaryRow {
  std::string scope;  // "overall" or "segment:<i>:<corruption>"
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t seeds = 0;
};

struct ExperimentResult {
  std::vector<SeedResult> seeds;
  std::vector<SummaryRow> summary;
  bool all_seeds_ok() const {
    for (const auto& s : seeds) {
      if (s.error) return false;
    }
    return true;
  }
};

inline double mae(const std::vector<RunRecord>& records, Estimator e) {
  if (records.empty()) throw DomainError("mae: no records");
  const std::size_t i = static_cast<std::size_t>(e);
  double s = 0.0;
  for (const auto& r : records) {
    if (!r.est[i]) throw DomainError("mae: estimator " + std::string(estimator_name(e)) + " was not run");
    s += std::abs(r.true_acc - *r.est[i]);
  }
  return s / static_cast<double>(records.size());
}

// Everything derived from the source domain for one seed.
struct SourceBundle {
  streams::SourceData data;
  streams::LabeledSet test_pool;
  streams::FeatureStats stats;
  MlpModel model;  // frozen, running-stat inference
  double holdout_accuracy = 0.0;
  bool reached_gate = false;
};

inline SourceBundle build_source(const ExperimentConfig& cfg, std::uint64_t seed) {
  SourceBundle b;
  b.data = streams::make_source_dataset(cfg.dataset);
  b.test_pool = streams::make_test_pool(cfg.dataset);
  b.stats = streams::feature_stats(b.data.train.features);
  auto trained = streams::train_source_model(b.data.train, cfg.resolved_architecture(), cfg.training, seed);
  b.model = std::move(trained.model);
  b.holdout_accuracy = streams::accuracy(b.model, b.data.holdout);
  b.reached_gate = b.holdout_accuracy >= cfg.training.accuracy_gate;
  return b;
}

// Memoizes trained source models across experiments that share the dataset,
// architecture and training settings. Thread safe.
class SourceCache {
 public:
  std::shared_ptr<const SourceBundle> get(const ExperimentConfig& cfg, std::uint64_t seed) {
    const std::string key = cache_key(cfg, seed);
    std::shared_future<std::shared_ptr<const SourceBundle>> fut;
    std::promise<std::shared_ptr<const SourceBundle>> promise;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = entries_.find(key);
      if (it == entries_.end()) {
        fut = promise.get_future().share();
        entries_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(std::make_shared<const SourceBundle>(build_source(cfg, seed)));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  static std::string cache_key(const ExperimentConfig& c, std::uint64_t seed) {
    const auto& d = c.dataset;
    const auto& t = c.training;
    std::string k = fmt::format("{}|{}|{}|{}|{}|{}|{}|{}|{}|", seed, d.class_count, d.input_dim, d.samples_per_class,
                                d.holdout_per_class, d.test_pool_per_class, d.cluster_separation, d.label_noise,
                                d.seed);
    for (auto h : c.architecture.hidden) k += fmt::format("{},", h);
    k += fmt::format("|{}|", c.architecture.batch_norm);
    for (auto r : c.architecture.dropout_rates) k += fmt::format("{},", r);
    k += fmt::format("|{}|{}|{}|{}|{}", t.epochs, t.batch_size, t.learning_rate, static_cast<int>(t.optimizer),
                     t.dropout);
    return k;
  }

  std::mutex mu_;
  std::map<std::string, std::shared_future<std::shared_ptr<const SourceBundle>>> entries_;
};

// Called with the model the estimators see at batch t, before any reset or
// adaptation for that batch.
using BatchObserver = std::function<void(std::size_t t, const MlpModel&, const nn::OptimizerState&)>;

inline std::vector<streams::ShiftStream> build_streams(const ExperimentConfig& cfg, const SourceBundle& src,
                                                       std::uint64_t seed) {
  std::vector<streams::ShiftStream> out;
  streams::StreamConfig sc{cfg.scenario.batch_size, cfg.scenario.batches_per_segment, mix_seed(seed, 0x57e4)};
  if (cfg.scenario.kind == ScenarioKind::Continual) {
    out.push_back(streams::make_stream(streams::Continual{cfg.scenario.schedule}, src.test_pool, src.stats, sc));
  } else {
    for (std::size_t i = 0; i < cfg.scenario.fully_corruptions.size(); ++i) {
      auto sci = sc;
      sci.seed = mix_seed(sc.seed, i);
      out.push_back(streams::make_stream(streams::Fully{cfg.scenario.fully_corruptions[i]}, src.test_pool,
                                         src.stats, sci));
    }
  }
  return out;
}

inline SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const SourceBundle& src,
                           const BatchObserver& observer = {}) {
  SeedResult res;
  res.seed = seed;
  res.source_holdout_accuracy = src.holdout_accuracy;
  res.source_reached_gate = src.reached_gate;

  const MlpModel checkpoint = tta::configure_model(src.model, cfg.adaptation);
  const auto feature_scale = src.stats.range();
  const auto& ec = cfg.estimators;
  const std::size_t capacity = std::max<std::size_t>(10, 2 * cfg.recovery.window);

  std::size_t t = 0;
  std::size_t segment_offset = 0;
  for (const auto& stream : build_streams(cfg, src, seed)) {
    // Fully scenarios restart from the source for every corruption.
    MlpModel model = checkpoint;
    MlpModel previous = checkpoint;
    auto opt = tta::make_optimizer(cfg.adaptation);
    est::EstimatorState state(capacity);
    tta::EntropyEma entropy_ema;

    for (const auto& batch : stream.batches) {
      const Matrix& x = batch.features;
      if (observer) observer(t, model, opt);

      RunRecord rec;
      rec.t = t;
      rec.corruption = std::string(streams::corruption_name(batch.corruption));
      rec.severity = batch.severity;
      BatchDiagnostics diag;
      diag.segment = segment_offset + batch.segment;
      diag.segment_start = batch.segment_start;

      const auto probs = nn::forward(model, x, nn::ForwardMode::deterministic());
      rec.true_acc = streams::GroundTruth::accuracy(batch.labels, row_argmax(probs));
      diag.entropy_loss = nn::entropy_loss(probs);

      auto set = [&](Estimator e, double v) {
        const auto i = static_cast<std::size_t>(e);
        rec.est[i] = v;
        rec.err[i] = std::abs(rec.true_acc - v);
      };
      if (ec.srcvalid) set(Estimator::SrcValid, est::src_valid(model, src.data.holdout.features,
                                                               src.data.holdout.labels));
      if (ec.softmax) set(Estimator::Softmax, est::softmax_score(model, x, ec.softmax_temperature));
      if (ec.gde) set(Estimator::Gde, est::gde_agreement(model, previous, x));
      if (ec.advperturb) {
        set(Estimator::AdvPerturb, est::adv_perturb_agreement(src.model, model, x, ec.advperturb_epsilon,
                                                              feature_scale));
      }
      if (ec.aetta) {
        auto acfg = ec.aetta_config;
        acfg.base_seed = mix_seed(mix_seed(seed, 0xae77a), t) + acfg.base_seed;
        diag.aetta = est::aetta_estimate(model, x, acfg, state);
        set(Estimator::Aetta, diag.aetta.smoothed_accuracy);
      }

      entropy_ema.update(diag.entropy_loss, cfg.recovery.mrs_ema_coefficient);
      if (cfg.recovery.kind != tta::RecoveryKind::Episodic) {
        tta::RecoveryContext ctx{t, batch.segment_start, entropy_ema.value};
        const auto decision = tta::should_reset(cfg.recovery, state, ctx);
        if (decision.reset) {
          tta::apply_reset(model, opt, checkpoint);
          if (cfg.recovery.kind == tta::RecoveryKind::MRS) entropy_ema.clear();
          rec.reset = true;
          rec.trigger = std::string(tta::trigger_name(*decision.trigger));
        }
      }

      previous = model;
      tta::adapt_step(model, opt, x, cfg.adaptation);

      if (cfg.recovery.kind == tta::RecoveryKind::StochasticRestore) {
        tta::stochastic_restore_step(model, checkpoint, cfg.recovery.restore_prob, mix_seed(seed, 0x5700000 + t));
      } else if (cfg.recovery.kind == tta::RecoveryKind::Episodic) {
        tta::apply_reset(model, opt, checkpoint);
        rec.reset = true;
        rec.trigger = std::string(tta::trigger_name(tta::ResetTrigger::External));
      }

      res.records.push_back(std::move(rec));
      res.diagnostics.push_back(diag);
      ++t;
    }
    segment_offset += stream.segment_starts.size();
  }
  return res;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for a single value.
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::vector<SummaryRow> summarize(const ExperimentConfig& cfg, const std::vector<SeedResult>& seeds) {
  std::vector<SummaryRow> rows;
  std::vector<const SeedResult*> ok;
  for (const auto& s : seeds) {
    if (!s.error) ok.push_back(&s);
  }
  if (ok.empty()) return rows;
  auto add = [&](const std::string& scope, const std::string& metric, const std::vector<double>& per_seed) {
    rows.push_back({scope, metric, mean_of(per_seed), stddev_of(per_seed), per_seed.size()});
  };
  auto metrics_for = [&](const std::string& scope, const std::function<bool(const SeedResult&, std::size_t)>& keep) {
    std::vector<double> acc, resets;
    std::array<std::vector<double>, kEstimatorCount> maes;
    for (const auto* s : ok) {
      std::vector<RunRecord> sel;
      for (std::size_t i = 0; i < s->records.size(); ++i) {
        if (keep(*s, i)) sel.push_back(s->records[i]);
      }
      if (sel.empty()) continue;
      double a = 0.0, r = 0.0;
      for (const auto& rec : sel) {
        a += rec.true_acc;
        r += rec.reset ? 1.0 : 0.0;
      }
      acc.push_back(a / static_cast<double>(sel.size()));
      resets.push_back(r);
      for (auto e : kEstimators) {
        if (cfg.estimators.enabled(e)) maes[static_cast<std::size_t>(e)].push_back(mae(sel, e));
      }
    }
    if (acc.empty()) return;
    for (auto e : kEstimators) {
      if (cfg.estimators.enabled(e)) add(scope, "mae_" + std::string(estimator_name(e)), maes[static_cast<std::size_t>(e)]);
    }
    add(scope, "true_acc", acc);
    add(scope, "resets", resets);
  };
  metrics_for("overall", [](const SeedResult&, std::size_t) { return true; });
  const auto& first = *ok.front();
  std::map<std::size_t, std::string> segments;
  for (std::size_t i = 0; i < first.records.size(); ++i) {
    segments.emplace(first.diagnostics[i].segment, first.records[i].corruption);
  }
  for (const auto& [seg, name] : segments) {
    metrics_for(fmt::format("segment:{}:{}", seg, name),
                [seg = seg](const SeedResult& s, std::size_t i) { return s.diagnostics[i].segment == seg; });
  }
  return rows;
}

inline const SummaryRow* find_summary(const std::vector<SummaryRow>& rows, std::string_view scope,
                                      std::string_view metric) {
  for (const auto& r : rows) {
    if (r.scope == scope && r.metric == metric) return &r;
  }
  return nullptr;
}

// Seeds run concurrently; results come back in seed order.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, SourceCache* cache = nullptr,
                                       const BatchObserver& observer = {}) {
  cfg.validate();
  SourceCache local;
  SourceCache& sources = cache ? *cache : local;
  std::vector<std::future<SeedResult>> jobs;
  for (auto seed : cfg.seeds) {
    jobs.push_back(std::async(std::launch::async, [&cfg, &sources, &observer, seed] {
      try {
        auto src = sources.get(cfg, seed);
        return run_seed(cfg, seed, *src, observer);
      } catch (const std::exception& e) {
        SeedResult r;
        r.seed = seed;
        r.error = e.what();
        return r;
      }
    }));
  }
  ExperimentResult out;
  for (auto& j : jobs) out.seeds.push_back(j.get());
  out.summary = summarize(cfg, out.seeds);
  return out;
}

// ---- CSV ------------------------------------------------------------------

inline std::string format_double(double v) { return fmt::format("{}", v); }

inline std::string run_csv(const std::vector<RunRecord>& records) {
  std::string out(kRunCsvHeader);
  out += '\n';
  for (const auto& r : records) {
    out += fmt::format("{},{},{},{}", r.t, r.corruption, r.severity, format_double(r.true_acc));
    for (const auto& e : r.est) out += "," + (e ? format_double(*e) : std::string());
    for (const auto& e : r.err) out += "," + (e ? format_double(*e) : std::string());
    out += fmt::format(",{},{}\n", r.reset ? 1 : 0, r.trigger);
  }
  return out;
}

struct CsvError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view s, std::size_t line) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw CsvError(fmt::format("line {}: cannot parse '{}'", line, s));
  }
  return v;
}

}  // namespace detail

inline std::vector<RunRecord> parse_run_csv(std::string_view text) {
  std::vector<RunRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (header) {
      if (line != kRunCsvHeader) throw CsvError("run.csv header mismatch");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    auto f = detail::split(line, ',');
    if (f.size() != 16) throw CsvError(fmt::format("line {}: expected 16 fields, got {}", line_no, f.size()));
    RunRecord r;
    r.t = detail::parse_number<std::size_t>(f[0], line_no);
    r.corruption = std::string(f[1]);
    r.severity = detail::parse_number<int>(f[2], line_no);
    r.true_acc = detail::parse_number<double>(f[3], line_no);
    for (std::size_t i = 0; i < kEstimatorCount; ++i) {
      if (!f[4 + i].empty()) r.est[i] = detail::parse_number<double>(f[4 + i], line_no);
      if (!f[9 + i].empty()) r.err[i] = detail::parse_number<double>(f[9 + i], line_no);
    }
    r.reset = detail::parse_number<int>(f[14], line_no) != 0;
    r.trigger = std::string(f[15]);
    out.push_back(std::move(r));
  }
  if (header) throw CsvError("run.csv is empty");
  return out;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "scope,metric,mean,std,seeds\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{}\n", r.scope, r.metric, format_double(r.mean), format_double(r.stddev), r.seeds);
  }
  return out;
}

// ---- SVG ------------------------------------------------------------------

inline std::string xml_escape(std::string_view in) {
  std::string out;
  for (char c : in) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string trace_svg(const std::vector<RunRecord>& records, Estimator e, std::string_view title) {
  constexpr double W = 900, H = 320, L = 50, R = 20, T = 30, B = 40;
  const std::size_t idx = static_cast<std::size_t>(e);
  const double n = std::max<double>(1.0, static_cast<double>(records.size()) - 1.0);
  auto px = [&](double t) { return L + (W - L - R) * t / n; };
  auto py = [&](double a) { return T + (H - T - B) * (1.0 - a); };
  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n", W, H, W, H);
  s += fmt::format("<title>{}</title>\n", xml_escape(title));
  s += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", L, py(0), W - R, py(0));
  s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", L, py(0), L, py(1));
  for (double a : {0.0, 0.5, 1.0}) {
    s += fmt::format("<text x=\"{}\" y=\"{:.1f}\" font-size=\"11\" text-anchor=\"end\">{:.1f}</text>\n", L - 6,
                     py(a) + 4, a);
  }
  for (const auto& r : records) {
    if (r.reset) {
      s += fmt::format("<line class=\"reset\" x1=\"{0:.2f}\" y1=\"{1}\" x2=\"{0:.2f}\" y2=\"{2}\" stroke=\"red\" "
                       "stroke-width=\"1\" opacity=\"0.5\"/>\n",
                       px(static_cast<double>(r.t - records.front().t)), py(0), py(1));
    }
  }
  auto polyline = [&](auto value, std::string_view color, std::string_view cls) {
    std::string pts;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (auto v = value(records[i])) pts += fmt::format("{:.2f},{:.2f} ", px(static_cast<double>(i)), py(*v));
    }
    if (!pts.empty()) pts.pop_back();
    return fmt::format("<polyline class=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", cls,
                       color, pts);
  };
  s += polyline([](const RunRecord& r) { return std::optional<double>(r.true_acc); }, "black", "true");
  s += polyline([idx](const RunRecord& r) { return r.est[idx]; }, "#1f77b4", "estimated");
  s += fmt::format("<text x=\"{}\" y=\"18\" font-size=\"12\">true (black) vs {} (blue), resets in red</text>\n", L,
                   estimator_name(e));
  s += "</svg>\n";
  return s;
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Layout: <dir>/summary.csv and <dir>/seed_<s>/{run.csv,trace_<estimator>.svg}.
inline void emit_outputs(const ExperimentConfig& cfg, const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "summary.csv", summary_csv(result.summary));
  for (const auto& s : result.seeds) {
    const auto sd = dir / fmt::format("seed_{}", s.seed);
    std::filesystem::create_directories(sd, ec);
    if (ec) throw std::runtime_error("cannot create " + sd.string() + ": " + ec.message());
    if (s.error) {
      write_file(sd / "error.txt", *s.error + "\n");
      continue;
    }
    write_file(sd / "run.csv", run_csv(s.records));
    for (auto e : kEstimators) {
      if (!cfg.estimators.enabled(e)) continue;
      write_file(sd / fmt::format("trace_{}.svg", estimator_name(e)),
                 trace_svg(s.records, e, fmt::format("seed {} {}", s.seed, estimator_name(e))));
    }
  }
}

// ---- JSON config ----------------------------------------------------------

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

inline std::vector<streams::ScheduleEntry> read_schedule(const nlohmann::json& arr) {
  std::vector<streams::ScheduleEntry> out;
  for (const auto& e : arr) {
    out.push_back({streams::parse_corruption(e.at("corruption").get<std::string>()), e.at("severity").get<int>()});
  }
  return out;
}

inline nlohmann::json write_schedule(const std::vector<streams::ScheduleEntry>& s) {
  auto arr = nlohmann::json::array();
  for (const auto& e : s) arr.push_back({{"corruption", streams::corruption_name(e.kind)}, {"severity", e.severity}});
  return arr;
}

template <class E, std::size_t N>
E parse_enum(const std::string& s, const std::array<std::pair<std::string_view, E>, N>& table, const char* what) {
  for (const auto& [name, v] : table) {
    if (name == s) return v;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

template <class E, std::size_t N>
std::string enum_name(E v, const std::array<std::pair<std::string_view, E>, N>& table) {
  for (const auto& [name, e] : table) {
    if (e == v) return std::string(name);
  }
  return "";
}

inline constexpr std::array<std::pair<std::string_view, nn::OptimizerKind>, 2> kOptimizers = {
    {{"sgd", nn::OptimizerKind::SGD}, {"adam", nn::OptimizerKind::Adam}}};
inline constexpr std::array<std::pair<std::string_view, tta::AdaptMethod>, 3> kMethods = {
    {{"tent", tta::AdaptMethod::Tent}, {"bn_stats", tta::AdaptMethod::BnStats}, {"none", tta::AdaptMethod::None}}};
inline constexpr std::array<std::pair<std::string_view, tta::RecoveryKind>, 6> kRecoveries = {
    {{"aetta_reset", tta::RecoveryKind::AettaReset},
     {"episodic", tta::RecoveryKind::Episodic},
     {"mrs", tta::RecoveryKind::MRS},
     {"stochastic", tta::RecoveryKind::StochasticRestore},
     {"dist_shift", tta::RecoveryKind::DistShift},
     {"none", tta::RecoveryKind::None}}};
inline constexpr std::array<std::pair<std::string_view, tta::WindowComparison>, 2> kComparisons = {
    {{"mean", tta::WindowComparison::Mean}, {"elementwise", tta::WindowComparison::Elementwise}}};
inline constexpr std::array<std::pair<std::string_view, ScenarioKind>, 2> kScenarios = {
    {{"fully", ScenarioKind::Fully}, {"continual", ScenarioKind::Continual}}};

}  // namespace detail

inline tta::RecoveryKind parse_recovery(const std::string& s) {
  return detail::parse_enum(s, detail::kRecoveries, "recovery kind");
}
inline std::string recovery_name(tta::RecoveryKind k) { return detail::enum_name(k, detail::kRecoveries); }
inline ScenarioKind parse_scenario(const std::string& s) { return detail::parse_enum(s, detail::kScenarios, "scenario"); }

// Overlays the fields present in j onto cfg.
inline void apply_json(ExperimentConfig& cfg, const nlohmann::json& j) {
  using detail::read_opt;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      read_opt(d, "class_count", cfg.dataset.class_count);
      read_opt(d, "input_dim", cfg.dataset.input_dim);
      read_opt(d, "samples_per_class", cfg.dataset.samples_per_class);
      read_opt(d, "holdout_per_class", cfg.dataset.holdout_per_class);
      read_opt(d, "test_pool_per_class", cfg.dataset.test_pool_per_class);
      read_opt(d, "cluster_separation", cfg.dataset.cluster_separation);
      read_opt(d, "label_noise", cfg.dataset.label_noise);
      read_opt(d, "seed", cfg.dataset.seed);
    }
    if (j.contains("architecture")) {
      const auto& a = j.at("architecture");
      read_opt(a, "hidden", cfg.architecture.hidden);
      read_opt(a, "batch_norm", cfg.architecture.batch_norm);
      read_opt(a, "dropout_rates", cfg.architecture.dropout_rates);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      read_opt(t, "epochs", cfg.training.epochs);
      read_opt(t, "batch_size", cfg.training.batch_size);
      read_opt(t, "learning_rate", cfg.training.learning_rate);
      read_opt(t, "dropout", cfg.training.dropout);
      read_opt(t, "accuracy_gate", cfg.training.accuracy_gate);
      if (t.contains("optimizer")) {
        cfg.training.optimizer = detail::parse_enum(t.at("optimizer").get<std::string>(), detail::kOptimizers, "optimizer");
      }
    }
    if (j.contains("adaptation")) {
      const auto& a = j.at("adaptation");
      if (a.contains("method")) {
        cfg.adaptation.method = detail::parse_enum(a.at("method").get<std::string>(), detail::kMethods, "method");
      }
      read_opt(a, "learning_rate", cfg.adaptation.learning_rate);
      if (a.contains("optimizer")) {
        cfg.adaptation.optimizer = detail::parse_enum(a.at("optimizer").get<std::string>(), detail::kOptimizers, "optimizer");
      }
    }
    if (j.contains("estimators")) {
      const auto& e = j.at("estimators");
      if (e.contains("aetta")) {
        const auto& a = e.at("aetta");
        read_opt(a, "enabled", cfg.estimators.aetta);
        read_opt(a, "n_dropout", cfg.estimators.aetta_config.n_dropout);
        read_opt(a, "alpha", cfg.estimators.aetta_config.alpha);
        read_opt(a, "ema_coefficient", cfg.estimators.aetta_config.ema_coefficient);
        read_opt(a, "entropy_floor", cfg.estimators.aetta_config.entropy_floor);
        read_opt(a, "base_seed", cfg.estimators.aetta_config.base_seed);
      }
      if (e.contains("srcvalid")) read_opt(e.at("srcvalid"), "enabled", cfg.estimators.srcvalid);
      if (e.contains("softmax")) {
        read_opt(e.at("softmax"), "enabled", cfg.estimators.softmax);
        read_opt(e.at("softmax"), "temperature", cfg.estimators.softmax_temperature);
      }
      if (e.contains("gde")) read_opt(e.at("gde"), "enabled", cfg.estimators.gde);
      if (e.contains("advperturb")) {
        read_opt(e.at("advperturb"), "enabled", cfg.estimators.advperturb);
        read_opt(e.at("advperturb"), "epsilon", cfg.estimators.advperturb_epsilon);
      }
    }
    if (j.contains("recovery")) {
      const auto& r = j.at("recovery");
      if (r.contains("kind")) cfg.recovery.kind = parse_recovery(r.at("kind").get<std::string>());
      read_opt(r, "window", cfg.recovery.window);
      read_opt(r, "hard_threshold", cfg.recovery.hard_threshold);
      read_opt(r, "mrs_threshold", cfg.recovery.mrs_threshold);
      read_opt(r, "mrs_ema_coefficient", cfg.recovery.mrs_ema_coefficient);
      read_opt(r, "restore_prob", cfg.recovery.restore_prob);
      if (r.contains("comparison")) {
        cfg.recovery.comparison =
            detail::parse_enum(r.at("comparison").get<std::string>(), detail::kComparisons, "window comparison");
      }
    }
    if (j.contains("scenario")) {
      const auto& s = j.at("scenario");
      if (s.contains("kind")) cfg.scenario.kind = parse_scenario(s.at("kind").get<std::string>());
      read_opt(s, "batch_size", cfg.scenario.batch_size);
      read_opt(s, "batches_per_segment", cfg.scenario.batches_per_segment);
      if (s.contains("schedule")) cfg.scenario.schedule = detail::read_schedule(s.at("schedule"));
      if (s.contains("fully_corruptions")) cfg.scenario.fully_corruptions = detail::read_schedule(s.at("fully_corruptions"));
    }
    read_opt(j, "seeds", cfg.seeds);
    read_opt(j, "output_dir", cfg.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& a = c.estimators.aetta_config;
  return json{
      {"dataset",
       {{"class_count", c.dataset.class_count},
        {"input_dim", c.dataset.input_dim},
        {"samples_per_class", c.dataset.samples_per_class},
        {"holdout_per_class", c.dataset.holdout_per_class},
        {"test_pool_per_class", c.dataset.test_pool_per_class},
        {"cluster_separation", c.dataset.cluster_separation},
        {"label_noise", c.dataset.label_noise},
        {"seed", c.dataset.seed}}},
      {"architecture",
       {{"hidden", c.architecture.hidden},
        {"batch_norm", c.architecture.batch_norm},
        {"dropout_rates", c.architecture.dropout_rates}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"learning_rate", c.training.learning_rate},
        {"optimizer", detail::enum_name(c.training.optimizer, detail::kOptimizers)},
        {"dropout", c.training.dropout},
        {"accuracy_gate", c.training.accuracy_gate}}},
      {"adaptation",
       {{"method", detail::enum_name(c.adaptation.method, detail::kMethods)},
        {"learning_rate", c.adaptation.learning_rate},
        {"optimizer", detail::enum_name(c.adaptation.optimizer, detail::kOptimizers)}}},
      {"estimators",
       {{"aetta",
         {{"enabled", c.estimators.aetta},
          {"n_dropout", a.n_dropout},
          {"alpha", a.alpha},
          {"ema_coefficient", a.ema_coefficient},
          {"entropy_floor", a.entropy_floor},
          {"base_seed", a.base_seed}}},
        {"srcvalid", {{"enabled", c.estimators.srcvalid}}},
        {"softmax", {{"enabled", c.estimators.softmax}, {"temperature", c.estimators.softmax_temperature}}},
        {"gde", {{"enabled", c.estimators.gde}}},
        {"advperturb", {{"enabled", c.estimators.advperturb}, {"epsilon", c.estimators.advperturb_epsilon}}}}},
      {"recovery",
       {{"kind", recovery_name(c.recovery.kind)},
        {"window", c.recovery.window},
        {"hard_threshold", c.recovery.hard_threshold},
        {"mrs_threshold", c.recovery.mrs_threshold},
        {"mrs_ema_coefficient", c.recovery.mrs_ema_coefficient},
        {"restore_prob", c.recovery.restore_prob},
        {"comparison", detail::enum_name(c.recovery.comparison, detail::kComparisons)}}},
      {"scenario",
       {{"kind", detail::enum_name(c.scenario.kind, detail::kScenarios)},
        {"batch_size", c.scenario.batch_size},
        {"batches_per_segment", c.scenario.batches_per_segment},
        {"schedule", detail::write_schedule(c.scenario.schedule)},
        {"fully_corruptions", detail::write_schedule(c.scenario.fully_corruptions)}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  ExperimentConfig cfg;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  apply_json(cfg, j);
  return cfg;
}

}  // namespace aetta::harness
