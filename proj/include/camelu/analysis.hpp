#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "camelu/tensor.hpp"

namespace camelu {

// f(x) = a + (d - a) / (1 + c exp(-b x)), with x0 = ln(c) / b.
struct LogisticFit {
  double a = 0.0;
  double b = 1.0;
  double c = 1.0;
  double d = 1.0;
  double x0 = 0.0;
  double residual = 0.0;  // sum of squared errors
  // d - a collapsed below tolerance: flat curve, b and c carry no meaning.
  bool degenerate = false;
  std::size_t starts = 0;
  std::size_t iterations = 0;  // of the winning start

  static LogisticFit from_params(double a, double b, double c, double d);
};

double logistic_value(const LogisticFit& f, double x);
// b c (d - a) e^{-bx} / (1 + c e^{-bx})^2, peak b (d - a) / 4 at x0.
double logistic_derivative(const LogisticFit& f, double x);

struct FitOptions {
  std::size_t starts = 12;  // at least 8 are always used
  std::size_t max_iterations = 2000;
  double tolerance = 1e-14;  // relative step and cost change
};

// Multi-start damped Gauss-Newton (Levenberg-Marquardt) on (a, d, ln b, x0).
// Needs >= 5 points with strictly increasing xs. Throws FitError carrying
// the best residual when no start converges.
LogisticFit fit_logistic(std::span<const double> xs, std::span<const double> ys, const FitOptions& opt = {});

struct PhaseBoundaries {
  double fraction = 0.2;
  double learn_start = 0.0;  // crossing before x0
  double gen_start = 0.0;    // crossing after x0
  long learn_epoch = 0;      // ceil of the crossing
  long gen_epoch = 0;
};

// Solves f'(x) = fraction * max f'. With u = c e^{-bx} this is
// u^2 - (4/fraction - 2) u + 1 = 0; the roots are reciprocal, so the two
// crossings sit at x0 -/+ ln(u_big) / b.
PhaseBoundaries phase_boundaries(const LogisticFit& fit, double fraction = 0.2);

nlohmann::json to_json(const LogisticFit& fit, const PhaseBoundaries& phases);

struct CentroidDistances {
  Tensor centroids;                // N x dim
  Tensor distances;                // Q x N, Euclidean
  std::vector<std::size_t> nearest;  // argmin per query, lowest index on ties
};

CentroidDistances centroid_distances(const Tensor& support_emb, std::span<const int> support_labels,
                                     const Tensor& query_emb, std::size_t n_way);

// Data points, the fitted curve and shaded memorization / learning /
// generalization bands.
std::string phase_plot_svg(std::span<const double> xs, std::span<const double> ys, const LogisticFit& fit,
                           const PhaseBoundaries& phases, const std::string& title);

}  // namespace camelu
