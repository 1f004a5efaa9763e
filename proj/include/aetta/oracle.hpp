#pragma once

// Exact checks of the disagreement equalities on finite hypothesis spaces.
//
// A space is M input points with probabilities p(x), the expectation
// function htilde(x) (probability that a hypothesis drawn from the space
// predicts class k at x) and the label model p(Y=k|x). Base and dropout
// hypotheses are drawn i.i.d. from htilde(x), so
//
//   E[Err] = sum_x p(x) sum_k p(Y=k|x) (1 - htilde_k(x))
//   E[PDD] = sum_x p(x) sum_k htilde_k(x) (1 - htilde_k(x))   (any N)
//
// and the two coincide whenever p(Y=k|x) = htilde_k(x).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aetta/matrix.hpp"
#include "aetta/rng.hpp"

namespace aetta::oracle {

struct FiniteHypothesisSpace {
  std::vector<double> point_prob;  // M
  Matrix htilde;                   // M x K
  Matrix label_model;              // M x K

  std::size_t points() const { return point_prob.size(); }
  std::size_t classes() const { return htilde.cols(); }

  void validate(double tol = 1e-12) const {
    const std::size_t m = point_prob.size();
    if (m == 0) throw ConfigError("hypothesis space needs at least one point");
    if (htilde.rows() != m || label_model.rows() != m || label_model.cols() != htilde.cols()) {
      throw DimensionError("hypothesis space shapes disagree");
    }
    auto check_dist = [&](std::span<const double> v, const char* what) {
      double s = 0.0;
      for (double x : v) {
        if (!(x >= -tol)) throw ConfigError(std::string(what) + " has a negative entry");
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ConfigError(std::string(what) + " does not sum to 1");
    };
    check_dist(point_prob, "point distribution");
    for (std::size_t i = 0; i < m; ++i) {
      check_dist(htilde.row(i), "htilde row");
      check_dist(label_model.row(i), "label model row");
    }
  }
};

inline double exact_expected_err(const FiniteHypothesisSpace& s) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.points(); ++i) {
    double inner = 0.0;
    for (std::size_t k = 0; k < s.classes(); ++k) inner += s.label_model(i, k) * (1.0 - s.htilde(i, k));
    total += s.point_prob[i] * inner;
  }
  return total;
}

inline double exact_expected_pdd(const FiniteHypothesisSpace& s, std::size_t n_dropout = 1) {
  if (n_dropout < 1) throw ConfigError("n_dropout must be >= 1");
  double total = 0.0;
  for (std::size_t i = 0; i < s.points(); ++i) {
    double inner = 0.0;
    for (std::size_t k = 0; k < s.classes(); ++k) inner += s.htilde(i, k) * (1.0 - s.htilde(i, k));
    total += s.point_prob[i] * inner;
  }
  return total;
}

struct SampledEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

namespace detail {

inline std::size_t draw(std::span<const double> dist, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t k = 0; k < dist.size(); ++k) {
    acc += dist[k];
    if (u < acc) return k;
  }
  return dist.size() - 1;
}

inline SampledEstimate summarize(double sum, double sum_sq, std::size_t n) {
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace detail

// Monte Carlo: x ~ p, base hypothesis prediction ~ htilde(x), y ~ p(Y|x).
inline SampledEstimate sampled_expected_err(const FiniteHypothesisSpace& s, std::size_t draws, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xe77));
  double sum = 0.0;
  for (std::size_t t = 0; t < draws; ++t) {
    const std::size_t x = detail::draw(s.point_prob, rng);
    const std::size_t h = detail::draw(s.htilde.row(x), rng);
    const std::size_t y = detail::draw(s.label_model.row(x), rng);
    sum += h != y ? 1.0 : 0.0;
  }
  return detail::summarize(sum, sum, draws);
}

// Monte Carlo: per draw, one base and N dropout predictions i.i.d. from
// htilde(x); the draw's value is the fraction of dropout predictions that
// disagree with the base.
inline SampledEstimate sampled_expected_pdd(const FiniteHypothesisSpace& s, std::size_t n_dropout, std::size_t draws,
                                            std::uint64_t seed) {
  if (n_dropout < 1) throw ConfigError("n_dropout must be >= 1");
  Rng rng(mix_seed(seed, 0x9dd));
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t t = 0; t < draws; ++t) {
    const std::size_t x = detail::draw(s.point_prob, rng);
    const std::size_t base = detail::draw(s.htilde.row(x), rng);
    std::size_t disagree = 0;
    for (std::size_t i = 0; i < n_dropout; ++i) disagree += detail::draw(s.htilde.row(x), rng) != base ? 1 : 0;
    const double v = static_cast<double>(disagree) / static_cast<double>(n_dropout);
    sum += v;
    sum_sq += v * v;
  }
  return detail::summarize(sum, sum_sq, draws);
}

inline double verify_theorem1(const FiniteHypothesisSpace& s) {
  return std::abs(exact_expected_err(s) - exact_expected_pdd(s));
}

namespace detail {

inline std::vector<double> random_simplex(std::size_t k, double spread, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(k);
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(spread * normal(rng));
    s += x;
  }
  for (double& x : v) x /= s;
  return v;
}

}  // namespace detail

// Random space with label_model == htilde row by row.
inline FiniteHypothesisSpace make_calibrated_space(std::size_t m, std::size_t k, std::uint64_t seed) {
  if (m == 0 || k < 2) throw ConfigError("calibrated space needs M >= 1 and K >= 2");
  Rng rng(mix_seed(seed, 0xca1));
  FiniteHypothesisSpace s;
  s.point_prob = detail::random_simplex(m, 1.0, rng);
  s.htilde = Matrix(m, k);
  for (std::size_t i = 0; i < m; ++i) {
    const double spread = 0.5 + 2.5 * uniform01(rng);
    auto row = detail::random_simplex(k, spread, rng);
    std::copy(row.begin(), row.end(), s.htilde.row(i).begin());
  }
  s.label_model = s.htilde;
  return s;
}

// Negative control: labels follow htilde shifted by one class.
inline FiniteHypothesisSpace miscalibrate(FiniteHypothesisSpace s) {
  const std::size_t k = s.classes();
  for (std::size_t i = 0; i < s.points(); ++i) {
    for (std::size_t c = 0; c < k; ++c) s.label_model(i, (c + 1) % k) = s.htilde(i, c);
  }
  return s;
}

// htilde pins the over-confident class to q0 at every point; labels follow
// p(Y=k'|x) = a q0 and p(Y=k|x) = b htilde_k(x) otherwise, with
// a q0 + b (1 - q0) = 1.
struct RobustConstruction {
  FiniteHypothesisSpace space;
  std::size_t dominant_class = 0;
  double q0 = 0.0;
  double a = 1.0;
  double b = 1.0;
};

inline double weight_a_for(double q0, double b) {
  if (!(q0 > 0.0 && q0 <= 1.0)) throw ConfigError("q0 must be in (0,1]");
  if (!(b >= 1.0)) throw ConfigError("b must be >= 1");
  // Same as (1 - b (1 - q0)) / q0, but exactly 1 at b = 1.
  return 1.0 - (b - 1.0) * (1.0 - q0) / q0;
}

// other_mass rows hold the relative split of 1 - q0 over the remaining
// classes (K-1 columns each, rows summing to 1).
inline RobustConstruction make_robust_construction(std::vector<double> point_prob, const Matrix& other_mass,
                                                   std::size_t dominant_class, double q0, double b) {
  const double a = weight_a_for(q0, b);
  if (!(a >= 0.0 && a <= 1.0)) {
    throw ConfigError("construction error: a = " + std::to_string(a) + " outside [0,1]");
  }
  const std::size_t m = point_prob.size(), k = other_mass.cols() + 1;
  if (other_mass.rows() != m) throw DimensionError("other_mass rows must match points");
  if (dominant_class >= k) throw IndexError("dominant class out of range");
  RobustConstruction rc;
  rc.dominant_class = dominant_class;
  rc.q0 = q0;
  rc.a = a;
  rc.b = b;
  rc.space.point_prob = std::move(point_prob);
  rc.space.htilde = Matrix(m, k);
  rc.space.label_model = Matrix(m, k);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t o = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c == dominant_class) {
        rc.space.htilde(i, c) = q0;
        rc.space.label_model(i, c) = a * q0;
      } else {
        const double h = (1.0 - q0) * other_mass(i, o++);
        rc.space.htilde(i, c) = h;
        rc.space.label_model(i, c) = b * h;
      }
    }
  }
  rc.space.validate(1e-12);
  return rc;
}

inline RobustConstruction make_random_robust_construction(std::size_t m, std::size_t k, double q0, double b,
                                                          std::uint64_t seed) {
  if (k < 2) throw ConfigError("robust construction needs K >= 2");
  Rng rng(mix_seed(seed, 0x70b));
  auto p = detail::random_simplex(m, 1.0, rng);
  Matrix other(m, k - 1);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = detail::random_simplex(k - 1, 1.5, rng);
    std::copy(row.begin(), row.end(), other.row(i).begin());
  }
  return make_robust_construction(std::move(p), other, static_cast<std::size_t>(rng() % k), q0, b);
}

// C as the integral over the distribution of htilde_{k'}(X); on the level
// set htilde_{k'} = q0 this is (b - a) q0 (1 - q0).
inline double robust_constant_c(const RobustConstruction& rc) {
  double c = 0.0;
  for (std::size_t i = 0; i < rc.space.points(); ++i) {
    const double q = rc.space.htilde(i, rc.dominant_class);
    c += rc.space.point_prob[i] * (rc.b - rc.a) * q * (1.0 - q);
  }
  return c;
}

inline double verify_theorem2(const RobustConstruction& rc) {
  const double rhs = rc.b * exact_expected_pdd(rc.space) - robust_constant_c(rc);
  return std::abs(exact_expected_err(rc.space) - rhs);
}

}  // namespace aetta::oracle
