#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <type_traits>

#include "aetta/harness.hpp"
#include "xml_check.hpp"

using namespace aetta;
using namespace aetta::harness;

namespace {

// Small enough to run in well under a second per seed.
ExperimentConfig quick_config() {
  ExperimentConfig c;
  c.dataset.samples_per_class = 200;
  c.dataset.holdout_per_class = 50;
  c.dataset.test_pool_per_class = 60;
  c.training.epochs = 6;
  c.architecture.hidden = {32, 32};
  c.scenario.batch_size = 32;
  c.scenario.batches_per_segment = 2;
  c.scenario.schedule.resize(4);
  c.seeds = {0};
  return c;
}

SourceCache& cache() {
  static SourceCache c;
  return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("aetta_harness_" + name);
  std::filesystem::remove_all(p);
  return p;
}

RunRecord record(double truth, double estimate) {
  RunRecord r;
  r.true_acc = truth;
  r.est[static_cast<std::size_t>(Estimator::Aetta)] = estimate;
  r.err[static_cast<std::size_t>(Estimator::Aetta)] = std::abs(truth - estimate);
  return r;
}

}  // namespace

TEST(Mae, ExactAndConstantCases) {
  std::vector<RunRecord> rs;
  for (double v : {0.1, 0.5, 0.9}) rs.push_back(record(v, v));
  EXPECT_EQ(mae(rs, Estimator::Aetta), 0.0);
  rs.clear();
  for (int i = 0; i < 5; ++i) rs.push_back(record(0.4, 1.0));
  EXPECT_NEAR(mae(rs, Estimator::Aetta), 0.6, 1e-15);
  EXPECT_THROW(mae({}, Estimator::Aetta), DomainError);
  EXPECT_THROW(mae(rs, Estimator::Gde), DomainError);
}

TEST(Mae, MatchesRecount) {
  Rng rng(3);
  std::vector<RunRecord> rs;
  double sum = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double t = uniform01(rng), e = uniform01(rng);
    rs.push_back(record(t, e));
    sum += std::abs(t - e);
  }
  EXPECT_NEAR(mae(rs, Estimator::Aetta), sum / 200.0, 1e-12);
}

TEST(Config, ZeroBatchesIsRejected) {
  auto c = quick_config();
  c.scenario.batches_per_segment = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = quick_config();
  c.scenario.schedule.clear();
  EXPECT_THROW(run_experiment(c), ConfigError);
  c = quick_config();
  c.seeds.clear();
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto c = quick_config();
  apply_collapse_preset(c);
  c.recovery.kind = tta::RecoveryKind::MRS;
  c.recovery.comparison = tta::WindowComparison::Elementwise;
  c.estimators.gde = false;
  c.scenario.kind = ScenarioKind::Fully;
  ExperimentConfig back;
  apply_json(back, to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.adaptation.learning_rate, c.adaptation.learning_rate);
  EXPECT_FALSE(back.estimators.gde);
}

TEST(Config, JsonErrorsAreConfigErrors) {
  ExperimentConfig c;
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"recovery":{"kind":"sometimes"}})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"seeds":"zero"})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"scenario":{"schedule":[{"kind":"fog","severity":1}]}})")),
               ConfigError);
}

TEST(Run, FrozenSourceOnCleanStreamTracksHoldout) {
  auto c = quick_config();
  c.adaptation.method = tta::AdaptMethod::None;
  c.scenario.kind = ScenarioKind::Fully;
  c.scenario.fully_corruptions = {{streams::CorruptionKind::Clean, 0}};
  c.scenario.batches_per_segment = 18;
  const auto r = run_experiment(c, &cache());
  ASSERT_TRUE(r.all_seeds_ok());
  const auto& s = r.seeds[0];
  const std::size_t i = static_cast<std::size_t>(Estimator::SrcValid);
  double mean_true = 0.0;
  for (const auto& rec : s.records) {
    EXPECT_EQ(*rec.est[i], s.source_holdout_accuracy);
    mean_true += rec.true_acc;
  }
  mean_true /= static_cast<double>(s.records.size());
  const double p = s.source_holdout_accuracy;
  const double n = static_cast<double>(s.records.size() * c.scenario.batch_size);
  EXPECT_LE(std::abs(mean_true - p), 3.0 * std::sqrt(p * (1 - p) / n + p * (1 - p) / 500.0));
  // Per-batch MAE is the mean spread of batch accuracies around p.
  double spread = 0.0;
  for (const auto& rec : s.records) spread += std::abs(p - rec.true_acc);
  EXPECT_NEAR(mae(s.records, Estimator::SrcValid), spread / static_cast<double>(s.records.size()), 1e-12);
}

TEST(Run, IdenticalConfigsGiveIdenticalCsv) {
  auto c = quick_config();
  c.seeds = {0, 1};
  const auto a = run_experiment(c, &cache());
  const auto b = run_experiment(c);
  ASSERT_TRUE(a.all_seeds_ok());
  for (std::size_t s = 0; s < 2; ++s) EXPECT_EQ(run_csv(a.seeds[s].records), run_csv(b.seeds[s].records));
  EXPECT_EQ(summary_csv(a.summary), summary_csv(b.summary));
}

TEST(Run, EstimatorsSeeTheModelBeforeItAdaptsOnTheBatch) {
  auto c = quick_config();
  std::vector<std::uint64_t> steps;
  std::vector<nn::MlpModel> seen;
  BatchObserver probe = [&](std::size_t t, const nn::MlpModel& m, const nn::OptimizerState& opt) {
    EXPECT_EQ(t, steps.size());
    steps.push_back(opt.step);
    seen.push_back(m);
  };
  const auto r = run_experiment(c, &cache(), probe);
  ASSERT_TRUE(r.all_seeds_ok());
  ASSERT_EQ(steps.size(), r.seeds[0].records.size());
  // No recovery: batch t is estimated by a model that has taken exactly t
  // optimizer steps, i.e. has not seen batch t's gradients.
  for (std::size_t t = 0; t < steps.size(); ++t) EXPECT_EQ(steps[t], t);

  // Replaying the adaptation on batches 0..t-1 reproduces the probed model.
  auto src = cache().get(c, 0);
  auto model = tta::configure_model(src->model, c.adaptation);
  auto opt = tta::make_optimizer(c.adaptation);
  const auto stream = build_streams(c, *src, 0).front();
  for (std::size_t t = 0; t < stream.batches.size(); ++t) {
    EXPECT_EQ(seen[t], model) << t;
    tta::adapt_step(model, opt, stream.batches[t].features, c.adaptation);
  }
}

TEST(Run, EpisodicStartsEveryBatchFromTheCheckpoint) {
  auto c = quick_config();
  c.recovery.kind = tta::RecoveryKind::Episodic;
  auto src = cache().get(c, 0);
  const auto ckpt = tta::configure_model(src->model, c.adaptation);
  std::size_t calls = 0;
  const auto r = run_experiment(c, &cache(), [&](std::size_t, const nn::MlpModel& m, const nn::OptimizerState& o) {
    EXPECT_EQ(m, ckpt);
    EXPECT_EQ(o.step, 0u);
    ++calls;
  });
  ASSERT_TRUE(r.all_seeds_ok());
  EXPECT_EQ(calls, r.seeds[0].records.size());
}

TEST(Run, DistShiftResetsExactlyAtSegmentBoundaries) {
  auto c = quick_config();
  c.recovery.kind = tta::RecoveryKind::DistShift;
  const auto r = run_experiment(c, &cache());
  ASSERT_TRUE(r.all_seeds_ok());
  for (const auto& rec : r.seeds[0].records) {
    const bool boundary = rec.t > 0 && rec.t % c.scenario.batches_per_segment == 0;
    EXPECT_EQ(rec.reset, boundary) << rec.t;
  }
}

TEST(Run, FullyScenarioRestartsPerCorruption) {
  auto c = quick_config();
  c.scenario.kind = ScenarioKind::Fully;
  auto src = cache().get(c, 0);
  const auto ckpt = tta::configure_model(src->model, c.adaptation);
  std::vector<bool> at_ckpt;
  const auto r = run_experiment(c, &cache(), [&](std::size_t, const nn::MlpModel& m, const nn::OptimizerState&) {
    at_ckpt.push_back(m == ckpt);
  });
  ASSERT_TRUE(r.all_seeds_ok());
  ASSERT_EQ(at_ckpt.size(), 4 * c.scenario.batches_per_segment);
  for (std::size_t t = 0; t < at_ckpt.size(); ++t) {
    if (t % c.scenario.batches_per_segment == 0) {
      EXPECT_TRUE(at_ckpt[t]) << t;
    }
  }
  EXPECT_FALSE(at_ckpt[1]);
}

TEST(Run, SummaryMaeIsMeanOfPerSeedMaes) {
  auto c = quick_config();
  c.seeds = {0, 1, 2};
  const auto r = run_experiment(c, &cache());
  ASSERT_TRUE(r.all_seeds_ok());
  for (auto e : kEstimators) {
    double s = 0.0;
    for (const auto& sd : r.seeds) s += mae(sd.records, e);
    const auto* row = find_summary(r.summary, "overall", "mae_" + std::string(estimator_name(e)));
    ASSERT_NE(row, nullptr);
    EXPECT_NEAR(row->mean, s / 3.0, 1e-12);
    EXPECT_EQ(row->seeds, 3u);
  }
  EXPECT_NE(find_summary(r.summary, "segment:0:gaussian_noise", "true_acc"), nullptr);
}

TEST(Run, DisabledEstimatorsLeaveEmptyFields) {
  auto c = quick_config();
  c.estimators.gde = false;
  c.estimators.advperturb = false;
  const auto r = run_experiment(c, &cache());
  ASSERT_TRUE(r.all_seeds_ok());
  const auto csv = run_csv(r.seeds[0].records);
  const auto second_line = csv.substr(csv.find('\n') + 1);
  const auto fields = detail::split(second_line.substr(0, second_line.find('\n')), ',');
  ASSERT_EQ(fields.size(), 16u);
  EXPECT_TRUE(fields[6].empty());
  EXPECT_TRUE(fields[7].empty());
  EXPECT_FALSE(fields[8].empty());
  EXPECT_EQ(find_summary(r.summary, "overall", "mae_gde"), nullptr);
}

TEST(Run, SeedFailureIsIsolated) {
  auto c = quick_config();
  c.seeds = {0, 1};
  c.dataset.test_pool_per_class = 1;  // every stream exhausts the pool
  const auto r = run_experiment(c);
  EXPECT_FALSE(r.all_seeds_ok());
  ASSERT_EQ(r.seeds.size(), 2u);
  for (const auto& s : r.seeds) {
    ASSERT_TRUE(s.error.has_value());
    EXPECT_NE(s.error->find("pool exhausted"), std::string::npos);
  }
  EXPECT_TRUE(r.summary.empty());
}

TEST(Csv, RoundTrip) {
  const auto r = run_experiment(quick_config(), &cache());
  ASSERT_TRUE(r.all_seeds_ok());
  const auto text = run_csv(r.seeds[0].records);
  EXPECT_EQ(text.substr(0, text.find('\n')), kRunCsvHeader);
  EXPECT_EQ(parse_run_csv(text), r.seeds[0].records);
}

TEST(Csv, HeaderIsExact) {
  EXPECT_EQ(kRunCsvHeader,
            "t,corruption,severity,true_acc,est_srcvalid,est_softmax,est_gde,est_advperturb,est_aetta,err_srcvalid,"
            "err_softmax,err_gde,err_advperturb,err_aetta,reset,trigger");
}

TEST(Csv, MalformedInputThrows) {
  EXPECT_THROW(parse_run_csv(""), CsvError);
  EXPECT_THROW(parse_run_csv("t,corruption\n"), CsvError);
  EXPECT_THROW(parse_run_csv(std::string(kRunCsvHeader) + "\n1,clean,0\n"), CsvError);
  EXPECT_THROW(parse_run_csv(std::string(kRunCsvHeader) + "\nx,clean,0,1,,,,,,,,,,,0,\n"), CsvError);
}

TEST(Outputs, SingleBatchRunWritesAllFiles) {
  auto c = quick_config();
  c.scenario.schedule.resize(1);
  c.scenario.batches_per_segment = 1;
  const auto r = run_experiment(c, &cache());
  ASSERT_TRUE(r.all_seeds_ok());
  const auto dir = scratch_dir("single");
  emit_outputs(c, r, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.csv"));
  const auto csv = read_file(dir / "seed_0" / "run.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(parse_run_csv(csv).size(), 1u);
  for (auto e : kEstimators) {
    const auto svg = read_file(dir / "seed_0" / fmt::format("trace_{}.svg", estimator_name(e)));
    const auto check = aetta::testing::check_xml(svg);
    EXPECT_TRUE(check.ok) << check.error;
    EXPECT_EQ(check.root, "svg");
  }
  std::filesystem::remove_all(dir);
}

TEST(Outputs, SvgIsWellFormedWithResetMarkers) {
  std::vector<RunRecord> rs;
  for (int i = 0; i < 30; ++i) {
    auto r = record(0.5 + 0.01 * i, 0.6);
    r.t = static_cast<std::size_t>(i);
    r.reset = i % 7 == 3;
    rs.push_back(r);
  }
  const auto svg = trace_svg(rs, Estimator::Aetta, "a <tricky> & \"title\"");
  const auto check = aetta::testing::check_xml(svg);
  EXPECT_TRUE(check.ok) << check.error;
  std::size_t markers = 0;
  for (auto p = svg.find("class=\"reset\""); p != std::string::npos; p = svg.find("class=\"reset\"", p + 1)) ++markers;
  EXPECT_EQ(markers, 4u);
}

TEST(XmlCheck, RejectsMalformedDocuments) {
  EXPECT_FALSE(aetta::testing::check_xml("<svg><g></svg>").ok);
  EXPECT_FALSE(aetta::testing::check_xml("<svg a=1/>").ok);
  EXPECT_FALSE(aetta::testing::check_xml("<svg>&</svg>").ok);
  EXPECT_FALSE(aetta::testing::check_xml("<a/><b/>").ok);
  EXPECT_TRUE(aetta::testing::check_xml("<?xml version=\"1.0\"?><svg><t>x &amp; y</t></svg>").ok);
}

TEST(Outputs, FailedSeedWritesErrorFile) {
  ExperimentResult r;
  SeedResult s;
  s.seed = 4;
  s.error = "boom";
  r.seeds.push_back(s);
  const auto dir = scratch_dir("failed");
  emit_outputs(quick_config(), r, dir);
  EXPECT_EQ(read_file(dir / "seed_4" / "error.txt"), "boom\n");
  std::filesystem::remove_all(dir);
}

TEST(Outputs, UnwritableDirectoryReportsPath) {
  try {
    write_file("/proc/aetta/denied.csv", "x");
    FAIL() << "expected an I/O error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/proc/aetta/denied.csv"), std::string::npos);
  }
}

TEST(Boundary, EstimatorsCannotReadHiddenLabels) {
  // The only readers are GroundTruth's static members; the label container
  // exposes no accessor and no conversion.
  static_assert(!std::is_convertible_v<streams::HiddenLabels, std::span<const std::size_t>>);
  static_assert(!std::is_convertible_v<streams::HiddenLabels, std::vector<std::size_t>>);
  SUCCEED();
}
