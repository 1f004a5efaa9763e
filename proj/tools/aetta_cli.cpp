// aetta: experiment driver.
//
//   aetta run [--config cfg.json] [--collapse] [--seed 0 --seed 1] [--out DIR]
//   aetta verify-theorems
//   aetta gradcheck [--models 20]
//   aetta recover-demo [--out DIR]
//   aetta sweep [--out DIR]
//
// Precedence: built-in defaults < --config file < --collapse < other flags.

#include <fmt/core.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "aetta/gradcheck.hpp"
#include "aetta/harness.hpp"
#include "aetta/oracle.hpp"

using namespace aetta;
using namespace aetta::harness;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::optional<double> alpha;
  std::optional<std::size_t> n_dropout;
  std::string scenario;
  std::string recovery;
  bool collapse = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seeds, "seed (repeatable)")->take_all();
  app->add_option("--out", f.out, "output directory");
  app->add_option("--alpha", f.alpha, "AETTA robust-weight exponent")->check(CLI::NonNegativeNumber);
  app->add_option("--n-dropout", f.n_dropout, "dropout inferences per batch")->check(CLI::PositiveNumber);
  app->add_option("--scenario", f.scenario, "fully|continual")->check(CLI::IsMember({"fully", "continual"}));
  app->add_option("--recovery", f.recovery, "none|aetta_reset|episodic|mrs|stochastic|dist_shift");
  app->add_flag("--collapse", f.collapse, "high-learning-rate TENT preset that drives the model into collapse");
}

ExperimentConfig build_config(const CommonFlags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.collapse) apply_collapse_preset(cfg);
  if (!f.seeds.empty()) cfg.seeds = f.seeds;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (f.alpha) cfg.estimators.aetta_config.alpha = *f.alpha;
  if (f.n_dropout) cfg.estimators.aetta_config.n_dropout = *f.n_dropout;
  if (!f.scenario.empty()) cfg.scenario.kind = parse_scenario(f.scenario);
  if (!f.recovery.empty()) cfg.recovery.kind = parse_recovery(f.recovery);
  cfg.validate();
  return cfg;
}

// Prints per-seed failures; returns how many there were.
int report_failures(const ExperimentResult& r) {
  int n = 0;
  for (const auto& s : r.seeds) {
    if (s.error) {
      fmt::print(stderr, "seed {}: {}\n", s.seed, *s.error);
      ++n;
    } else if (!s.source_reached_gate) {
      fmt::print(stderr, "seed {}: warning: source holdout accuracy {:.3f} below gate\n", s.seed,
                 s.source_holdout_accuracy);
    }
  }
  return n;
}

void print_overall(const std::vector<SummaryRow>& rows) {
  fmt::print("{:<16} {:>10} {:>10}\n", "metric", "mean", "std");
  for (const auto& r : rows) {
    if (r.scope != "overall") continue;
    const bool pct = r.metric.starts_with("mae_") || r.metric == "true_acc";
    if (pct) {
      fmt::print("{:<16} {:>9.2f}% {:>9.2f}%\n", r.metric, 100.0 * r.mean, 100.0 * r.stddev);
    } else {
      fmt::print("{:<16} {:>10.2f} {:>10.2f}\n", r.metric, r.mean, r.stddev);
    }
  }
}

int cmd_run(const CommonFlags& f) {
  const auto cfg = build_config(f);
  SourceCache cache;
  const auto result = run_experiment(cfg, &cache);
  emit_outputs(cfg, result, cfg.output_dir);
  write_file(std::filesystem::path(cfg.output_dir) / "config.json", to_json(cfg).dump(2) + "\n");
  print_overall(result.summary);
  fmt::print("outputs in {}\n", cfg.output_dir);
  return report_failures(result) == 0 ? 0 : 1;
}

int cmd_verify_theorems() {
  bool ok = true;

  fmt::print("Disagreement equality on calibrated spaces: |E[Err] - E[PDD]|\n");
  fmt::print("{:>4} {:>7} {:>12} {:>14}\n", "K", "spaces", "max resid", "min miscal");
  std::vector<double> worst(11, 0.0), control(11, 1.0);
  std::vector<int> count(11, 0);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const std::size_t k = 2 + seed % 9;
    const auto s = oracle::make_calibrated_space(1 + seed % 20, k, seed);
    worst[k] = std::max(worst[k], oracle::verify_theorem1(s));
    control[k] = std::min(control[k], oracle::verify_theorem1(oracle::miscalibrate(s)));
    ++count[k];
  }
  for (std::size_t k = 2; k <= 10; ++k) {
    fmt::print("{:>4} {:>7} {:>12.3g} {:>14.3g}\n", k, count[k], worst[k], control[k]);
    ok = ok && worst[k] <= 1e-12 && control[k] >= 1e-3;
  }

  fmt::print("\nRobust disagreement equality: |E[Err] - (b E[PDD] - C)|, C = (b - a) q0 (1 - q0)\n");
  fmt::print("{:>6} {:>7} {:>8} {:>8} {:>12}\n", "q0", "builds", "b min", "b max", "max resid");
  std::size_t n = 0;
  for (double q0 : {0.3, 0.45, 0.6, 0.75, 0.9}) {
    const double b_max = 1.0 / (1.0 - q0);
    double w = 0.0, hi = 1.0;
    for (int i = 0; i < 20; ++i) {
      const double b = 1.0 + (b_max - 1.0) * i / 20.0;
      const auto rc = oracle::make_random_robust_construction(8, 5, q0, b, static_cast<std::uint64_t>(i) * 31 + n);
      w = std::max(w, oracle::verify_theorem2(rc));
      hi = b;
      ++n;
    }
    fmt::print("{:>6.2f} {:>7} {:>8.3f} {:>8.3f} {:>12.3g}\n", q0, 20, 1.0, hi, w);
    ok = ok && w <= 1e-10;
  }
  fmt::print("\n{}\n", ok ? "all residuals within bounds" : "RESIDUAL BOUND VIOLATED");
  return ok ? 0 : 1;
}

int cmd_gradcheck(std::size_t models) {
  fmt::print("{:>5} {:>4} {:>14} {:>14} {:>8}\n", "model", "bn", "rel err (CE)", "rel err (H)", "params");
  double worst = 0.0;
  for (std::uint64_t s = 0; s < models; ++s) {
    const bool bn = s % 2 == 0;
    auto c = nn::random_gradcheck_case(s, bn);
    const auto mode = nn::ForwardMode::train_bn();
    const auto ce = nn::gradient_check(c.model, c.x, nn::CrossEntropy{c.labels}, mode, nn::TrainableMask::all());
    const auto h = nn::gradient_check(c.model, c.x, nn::Entropy{}, mode, nn::TrainableMask::all());
    fmt::print("{:>5} {:>4} {:>14.3g} {:>14.3g} {:>8}\n", s, bn ? "yes" : "no", ce.max_rel_error, h.max_rel_error,
               ce.checked);
    worst = std::max({worst, ce.max_rel_error, h.max_rel_error});
  }
  fmt::print("max relative error {:.3g} ({})\n", worst, worst <= 1e-4 ? "ok" : "FAILED");
  return worst <= 1e-4 ? 0 : 1;
}

int cmd_recover_demo(CommonFlags f) {
  f.collapse = true;
  auto base = build_config(f);
  SourceCache cache;
  int failures = 0;
  fmt::print("{:<12} {:>10} {:>10} {:>8}\n", "recovery", "true acc", "MAE aetta", "resets");
  for (const auto& [name, kind] : detail::kRecoveries) {
    auto cfg = base;
    cfg.recovery.kind = kind;
    const auto r = run_experiment(cfg, &cache);
    failures += report_failures(r);
    emit_outputs(cfg, r, std::filesystem::path(base.output_dir) / name);
    const auto* acc = find_summary(r.summary, "overall", "true_acc");
    const auto* mae = find_summary(r.summary, "overall", "mae_aetta");
    const auto* resets = find_summary(r.summary, "overall", "resets");
    fmt::print("{:<12} {:>9.2f}% {:>9.2f}% {:>8.1f}\n", name, acc ? 100.0 * acc->mean : NAN,
               mae ? 100.0 * mae->mean : NAN, resets ? resets->mean : NAN);
  }
  return failures == 0 ? 0 : 1;
}

int cmd_sweep(const CommonFlags& f) {
  auto base = build_config(f);
  // Only AETTA is swept; baselines do not influence adaptation.
  base.estimators.srcvalid = base.estimators.softmax = base.estimators.gde = base.estimators.advperturb = false;
  SourceCache cache;
  int failures = 0;
  std::string csv = "parameter,value,mae_aetta_mean,mae_aetta_std\n";
  auto one = [&](const char* param, double value, ExperimentConfig cfg) {
    const auto r = run_experiment(cfg, &cache);
    failures += report_failures(r);
    const auto* mae = find_summary(r.summary, "overall", "mae_aetta");
    const double m = mae ? mae->mean : NAN, s = mae ? mae->stddev : NAN;
    fmt::print("{:<6} {:>5} {:>9.2f}% +- {:.2f}%\n", param, value, 100.0 * m, 100.0 * s);
    csv += fmt::format("{},{},{},{}\n", param, value, m, s);
  };
  for (std::size_t n : {5, 10, 15}) {
    auto cfg = base;
    cfg.estimators.aetta_config.n_dropout = n;
    one("N", static_cast<double>(n), cfg);
  }
  for (int a = 0; a <= 5; ++a) {
    auto cfg = base;
    cfg.estimators.aetta_config.alpha = a;
    one("alpha", a, cfg);
  }
  std::filesystem::create_directories(base.output_dir);
  write_file(std::filesystem::path(base.output_dir) / "sweep.csv", csv);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-free accuracy estimation for test-time adaptation"};
  app.require_subcommand(1);

  CommonFlags run_flags, demo_flags, sweep_flags;
  auto* run = app.add_subcommand("run", "run an experiment and write CSV/SVG outputs");
  add_common(run, run_flags);
  app.add_subcommand("verify-theorems", "print residual tables for the exact oracles");
  std::size_t models = 20;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the backward pass");
  grad->add_option("--models", models, "number of random models")->check(CLI::PositiveNumber);
  auto* demo = app.add_subcommand("recover-demo", "compare recovery policies on the collapse preset");
  add_common(demo, demo_flags);
  auto* sweep = app.add_subcommand("sweep", "AETTA MAE over N and alpha grids");
  add_common(sweep, sweep_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_flags);
    if (app.got_subcommand("verify-theorems")) return cmd_verify_theorems();
    if (*grad) return cmd_gradcheck(models);
    if (*demo) return cmd_recover_demo(demo_flags);
    if (*sweep) return cmd_sweep(sweep_flags);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  }
  return 0;
}
