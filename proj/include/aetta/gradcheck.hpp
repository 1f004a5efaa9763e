#pragma once

// Central finite-difference check of nn::backward.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "aetta/nn.hpp"
#include "aetta/rng.hpp"

namespace aetta::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, abs_floor). The floor keeps entries whose true
// gradient is ~0 from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double abs_floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), abs_floor});
}

// Perturbs every parameter selected by the mask (and every input entry) by
// +-h. The forward mode must be a pure function of the parameters, which
// holds for all modes with a fixed dropout seed because forward_trace never
// commits batch statistics.
inline GradCheckResult gradient_check(const MlpModel& model, const Matrix& x, const LossSpec& loss,
                                      const ForwardMode& mode, const TrainableMask& mask, double h = 1e-5) {
  const Gradients g = backward(model, x, loss, mode, mask);
  GradCheckResult res;
  MlpModel probe = model;
  auto eval = [&](const MlpModel& m, const Matrix& in) { return evaluate_loss(forward(m, in, mode), loss); };
  auto refs = parameter_refs(probe);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (!mask.selects(refs[i].kind)) continue;
    for (std::size_t j = 0; j < refs[i].values.size(); ++j) {
      const double orig = refs[i].values[j];
      refs[i].values[j] = orig + h;
      const double up = eval(probe, x);
      refs[i].values[j] = orig - h;
      const double down = eval(probe, x);
      refs[i].values[j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = g.params[i][j];
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic, numeric));
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic - numeric));
      ++res.checked;
    }
  }
  Matrix xp = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      xp(r, c) = x(r, c) + h;
      const double up = eval(model, xp);
      xp(r, c) = x(r, c) - h;
      const double down = eval(model, xp);
      xp(r, c) = x(r, c);
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(g.input(r, c), numeric));
      res.max_abs_error = std::max(res.max_abs_error, std::abs(g.input(r, c) - numeric));
      ++res.checked;
    }
  }
  return res;
}

// A small random model plus batch for property checks: hidden widths in
// [3, 8], K in [2, 5], batch of 8.
struct GradCheckCase {
  MlpModel model;
  Matrix x;
  std::vector<std::size_t> labels;
};

inline GradCheckCase random_gradcheck_case(std::uint64_t seed, bool batch_norm = true) {
  Rng rng(mix_seed(seed, 0x96ad));
  std::uniform_int_distribution<std::size_t> width(3, 8), classes(2, 5), depth(1, 2);
  Architecture arch;
  arch.input_dim = width(rng);
  arch.class_count = classes(rng);
  arch.hidden.clear();
  for (std::size_t i = 0, n = depth(rng); i < n; ++i) arch.hidden.push_back(width(rng));
  arch.batch_norm = batch_norm;
  GradCheckCase c{make_model(arch, mix_seed(seed, 1)), Matrix(8, arch.input_dim), {}};
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& v : c.x.data()) v = nd(rng);
  // Non-trivial affine BN parameters so their gradients are exercised.
  for (auto& bn : c.model.norms) {
    for (double& v : bn.gamma) v = 1.0 + 0.3 * nd(rng);
    for (double& v : bn.beta) v = 0.3 * nd(rng);
    for (double& v : bn.running_mean) v = 0.2 * nd(rng);
    for (double& v : bn.running_var) v = 1.0 + 0.5 * std::abs(nd(rng));
  }
  std::uniform_int_distribution<std::size_t> lab(0, arch.class_count - 1);
  for (std::size_t i = 0; i < c.x.rows(); ++i) c.labels.push_back(lab(rng));
  return c;
}

}  // namespace aetta::nn
