#include "camelu/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "camelu/error.hpp"

namespace camelu {

using nlohmann::json;

LogisticFit LogisticFit::from_params(double a, double b, double c, double d) {
  require(b > 0.0 && c > 0.0, ErrorKind::contract, "logistic needs b > 0 and c > 0");
  LogisticFit f;
  f.a = a;
  f.b = b;
  f.c = c;
  f.d = d;
  f.x0 = std::log(c) / b;
  return f;
}

namespace {

// s = 1 / (1 + e^{-b (x - x0)}), equal to 1 / (1 + c e^{-bx}).
double sigmoid_at(double b, double x0, double x) {
  const double z = b * (x - x0);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double logistic_value(const LogisticFit& f, double x) { return f.a + (f.d - f.a) * sigmoid_at(f.b, f.x0, x); }

double logistic_derivative(const LogisticFit& f, double x) {
  const double s = sigmoid_at(f.b, f.x0, x);
  return f.b * (f.d - f.a) * s * (1.0 - s);
}

namespace {

using Vec4 = Eigen::Vector4d;

struct Problem {
  std::span<const double> xs, ys;

  // p = (a, d, ln b, x0)
  double cost(const Vec4& p, Eigen::VectorXd* r = nullptr, Eigen::MatrixXd* jac = nullptr) const {
    const double a = p[0], d = p[1], b = std::exp(p[2]), x0 = p[3];
    double sse = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double s = sigmoid_at(b, x0, xs[i]);
      const double e = a + (d - a) * s - ys[i];
      sse += e * e;
      if (r) (*r)[static_cast<Eigen::Index>(i)] = e;
      if (jac) {
        const auto row = static_cast<Eigen::Index>(i);
        const double ds = (d - a) * s * (1.0 - s);
        (*jac)(row, 0) = 1.0 - s;
        (*jac)(row, 1) = s;
        (*jac)(row, 2) = ds * b * (xs[i] - x0);
        (*jac)(row, 3) = -ds * b;
      }
    }
    return sse;
  }
};

struct StartResult {
  Vec4 p;
  double cost = std::numeric_limits<double>::infinity();
  bool converged = false;
  std::size_t iterations = 0;
};

StartResult levenberg_marquardt(const Problem& prob, Vec4 p, const FitOptions& opt, double y_scale) {
  const auto n = static_cast<Eigen::Index>(prob.xs.size());
  Eigen::VectorXd r(n);
  Eigen::MatrixXd jac(n, 4);
  StartResult out;
  double cost = prob.cost(p, &r, &jac);
  double mu = 1e-3;
  const double cost_floor = 1e-28 * y_scale * y_scale * static_cast<double>(n);
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    out.iterations = it + 1;
    if (cost <= cost_floor) {
      out.converged = true;
      break;
    }
    const Eigen::Matrix4d A = jac.transpose() * jac;
    const Vec4 g = jac.transpose() * r;
    bool stepped = false;
    while (mu < 1e20) {
      Eigen::Matrix4d damped = A;
      for (int k = 0; k < 4; ++k) damped(k, k) += mu * std::max(A(k, k), 1e-12);
      const Vec4 delta = damped.ldlt().solve(-g);
      const Vec4 trial = p + delta;
      if (!delta.allFinite() || std::abs(trial[2]) > 50.0) {
        mu *= 4.0;
        continue;
      }
      const double trial_cost = prob.cost(trial);
      if (std::isfinite(trial_cost) && trial_cost < cost) {
        const bool small_step = delta.norm() <= opt.tolerance * (p.norm() + opt.tolerance);
        const bool small_gain = cost - trial_cost <= opt.tolerance * cost;
        p = trial;
        cost = prob.cost(p, &r, &jac);
        mu = std::max(mu / 3.0, 1e-12);
        stepped = true;
        if (small_step || small_gain) out.converged = true;
        break;
      }
      mu *= 4.0;
    }
    // No downhill step at any damping: stationary to working precision.
    if (!stepped) out.converged = true;
    if (out.converged) break;
  }
  out.p = p;
  out.cost = cost;
  return out;
}

}  // namespace

LogisticFit fit_logistic(std::span<const double> xs, std::span<const double> ys, const FitOptions& opt) {
  require(xs.size() == ys.size(), ErrorKind::dimension, "fit_logistic: xs and ys differ in length");
  require(xs.size() >= 5, ErrorKind::contract, "fit_logistic needs at least 5 points");
  for (std::size_t i = 1; i < xs.size(); ++i)
    require(xs[i] > xs[i - 1], ErrorKind::contract, "fit_logistic: xs must be strictly increasing");
  for (std::size_t i = 0; i < xs.size(); ++i)
    require(std::isfinite(xs[i]) && std::isfinite(ys[i]), ErrorKind::numeric, "fit_logistic: non-finite input");

  const auto [ymin_it, ymax_it] = std::minmax_element(ys.begin(), ys.end());
  const double ymin = *ymin_it, ymax = *ymax_it;
  const double y_scale = std::max({1.0, std::abs(ymin), std::abs(ymax)});
  const double xlo = xs.front(), xhi = xs.back(), span = xhi - xlo;

  if (ymax - ymin <= 1e-12 * y_scale) {
    double mean = 0.0;
    for (double y : ys) mean += y;
    mean /= static_cast<double>(ys.size());
    LogisticFit f = LogisticFit::from_params(mean, 1.0, std::exp(0.5 * (xlo + xhi)), mean);
    for (double y : ys) f.residual += (y - mean) * (y - mean);
    f.degenerate = true;
    return f;
  }

  // Starting points: plateaus from the data range, x0 at the half-height
  // crossing and at fixed fractions of the x range, b from the endpoint
  // slope scaled up to steeper guesses.
  const double half = 0.5 * (ymin + ymax);
  double x_cross = 0.5 * (xlo + xhi);
  for (std::size_t i = 1; i < xs.size(); ++i)
    if ((ys[i - 1] - half) * (ys[i] - half) <= 0.0 && ys[i] != ys[i - 1]) {
      x_cross = xs[i - 1] + (half - ys[i - 1]) * (xs[i] - xs[i - 1]) / (ys[i] - ys[i - 1]);
      break;
    }
  const double slope = std::abs(ys.back() - ys.front()) / span;
  const double b_base = std::max(4.0 * slope / (ymax - ymin), 1e-3 / span);
  const std::array<double, 4> x0s = {x_cross, xlo + 0.5 * span, xlo + 0.25 * span, xlo + 0.75 * span};
  const std::array<double, 4> b_mult = {1.0, 3.0, 10.0, 30.0};
  std::vector<Vec4> starts;
  for (double bm : b_mult)
    for (double x0 : x0s) starts.push_back(Vec4(ymin, ymax, std::log(b_base * bm), x0));
  const std::size_t wanted = std::max<std::size_t>(8, opt.starts);
  for (std::size_t k = 0; starts.size() < wanted; ++k)
    starts.push_back(Vec4(ymin, ymax, std::log(b_base * std::pow(2.0, static_cast<double>(k % 7))),
                          xlo + span * static_cast<double>(k % 9 + 1) / 10.0));

  const Problem prob{xs, ys};
  StartResult best;
  double best_any = std::numeric_limits<double>::infinity();
  for (const Vec4& s : starts) {
    const StartResult r = levenberg_marquardt(prob, s, opt, y_scale);
    if (!std::isfinite(r.cost)) continue;
    best_any = std::min(best_any, r.cost);
    const double c = std::exp(std::exp(r.p[2]) * r.p[3]);
    if (!r.converged || !std::isfinite(c) || c <= 0.0) continue;
    if (r.cost < best.cost) best = r;
  }
  if (!best.converged)
    throw FitError("logistic fit did not converge from any of " + std::to_string(starts.size()) + " starts", best_any);

  LogisticFit f;
  f.a = best.p[0];
  f.d = best.p[1];
  f.b = std::exp(best.p[2]);
  f.x0 = best.p[3];
  f.c = std::exp(f.b * f.x0);
  f.residual = best.cost;
  f.starts = starts.size();
  f.iterations = best.iterations;
  f.degenerate = std::abs(f.d - f.a) <= 1e-6 * y_scale;
  return f;
}

PhaseBoundaries phase_boundaries(const LogisticFit& fit, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, ErrorKind::contract, "phase fraction must lie in (0, 1]");
  require(fit.b > 0.0, ErrorKind::contract, "phase boundaries need a growth rate b > 0");
  const double r = 4.0 / fraction - 2.0;
  const double u_big = 0.5 * (r + std::sqrt(std::max(0.0, r * r - 4.0)));
  const double t = std::log(u_big) / fit.b;
  PhaseBoundaries p;
  p.fraction = fraction;
  p.learn_start = fit.x0 - t;
  p.gen_start = fit.x0 + t;
  p.learn_epoch = static_cast<long>(std::ceil(p.learn_start));
  p.gen_epoch = static_cast<long>(std::ceil(p.gen_start));
  return p;
}

json to_json(const LogisticFit& f, const PhaseBoundaries& p) {
  return {{"a", f.a},
          {"b", f.b},
          {"c", f.c},
          {"d", f.d},
          {"x0", f.x0},
          {"residual", f.residual},
          {"degenerate", f.degenerate},
          {"fraction", p.fraction},
          {"learn_start", p.learn_start},
          {"gen_start", p.gen_start},
          {"learn_epoch", p.learn_epoch},
          {"gen_epoch", p.gen_epoch}};
}

CentroidDistances centroid_distances(const Tensor& support_emb, std::span<const int> support_labels,
                                     const Tensor& query_emb, std::size_t n_way) {
  require(support_emb.rank() == 2 && query_emb.cols() == support_emb.cols(), ErrorKind::dimension,
          "centroid_distances: support " + shape_string(support_emb.shape()) + " vs query " +
              shape_string(query_emb.shape()));
  require(support_labels.size() == support_emb.rows(), ErrorKind::dimension,
          "centroid_distances: one label per support row expected");
  require(n_way >= 1, ErrorKind::contract, "centroid_distances: n_way must be positive");
  const std::size_t dim = support_emb.cols(), nq = query_emb.rows();
  CentroidDistances out;
  out.centroids = Tensor({n_way, dim});
  std::vector<std::size_t> count(n_way, 0);
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    const int l = support_labels[i];
    require(l >= 0 && static_cast<std::size_t>(l) < n_way, ErrorKind::index,
            "support label " + std::to_string(l) + " outside [0, " + std::to_string(n_way) + ")");
    ++count[static_cast<std::size_t>(l)];
    for (std::size_t j = 0; j < dim; ++j) out.centroids.at(static_cast<std::size_t>(l), j) += support_emb.at(i, j);
  }
  for (std::size_t n = 0; n < n_way; ++n) {
    require(count[n] > 0, ErrorKind::contract, "class " + std::to_string(n) + " has no supports");
    for (std::size_t j = 0; j < dim; ++j) out.centroids.at(n, j) /= static_cast<double>(count[n]);
  }
  out.distances = Tensor({nq, n_way});
  out.nearest.assign(nq, 0);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t n = 0; n < n_way; ++n) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double e = query_emb.at(q, j) - out.centroids.at(n, j);
        s += e * e;
      }
      out.distances.at(q, n) = std::sqrt(s);
      if (out.distances.at(q, n) < out.distances.at(q, out.nearest[q])) out.nearest[q] = n;
    }
  }
  return out;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

}  // namespace

std::string phase_plot_svg(std::span<const double> xs, std::span<const double> ys, const LogisticFit& fit,
                           const PhaseBoundaries& phases, const std::string& title) {
  require(xs.size() == ys.size() && !xs.empty(), ErrorKind::dimension, "phase_plot_svg: xs and ys must match");
  const double W = 720, H = 420, ml = 60, mr = 20, mt = 40, mb = 50;
  const double xlo = xs.front(), xhi = std::max(xs.back(), xlo + 1e-9);
  double ylo = std::min(fit.a, fit.d), yhi = std::max(fit.a, fit.d);
  for (double y : ys) {
    ylo = std::min(ylo, y);
    yhi = std::max(yhi, y);
  }
  const double pad = std::max(1e-9, 0.05 * (yhi - ylo));
  ylo -= pad;
  yhi += pad;
  auto px = [&](double x) { return ml + (x - xlo) / (xhi - xlo) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ylo) / (yhi - ylo) * (H - mt - mb); };
  auto clampx = [&](double x) { return std::clamp(x, xlo, xhi); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const double l = clampx(phases.learn_start), g = clampx(phases.gen_start);
  const struct {
    double from, to;
    const char* fill;
    const char* name;
  } bands[] = {{xlo, l, "#dbe8f6", "memorization"}, {l, g, "#fbe3c8", "learning"}, {g, xhi, "#d9f0d3", "generalization"}};
  for (const auto& b : bands) {
    if (b.to <= b.from) continue;
    s << "<rect x=\"" << num(px(b.from)) << "\" y=\"" << mt << "\" width=\"" << num(px(b.to) - px(b.from))
      << "\" height=\"" << H - mt - mb << "\" fill=\"" << b.fill << "\"/>\n";
    s << "<text x=\"" << num(0.5 * (px(b.from) + px(b.to))) << "\" y=\"" << mt + 14
      << "\" text-anchor=\"middle\" fill=\"#555\">" << b.name << "</text>\n";
  }
  // axes and ticks
  s << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double xv = xlo + (xhi - xlo) * k / 5.0, yv = ylo + (yhi - ylo) * k / 5.0;
    s << "<text x=\"" << num(px(xv)) << "\" y=\"" << H - mb + 18 << "\" text-anchor=\"middle\">" << tick(xv)
      << "</text>\n";
    s << "<text x=\"" << ml - 6 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
  }
  s << "<text x=\"" << num(0.5 * (ml + W - mr)) << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
  s << "<text x=\"16\" y=\"" << num(0.5 * (mt + H - mb)) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << num(0.5 * (mt + H - mb)) << ")\">relative accuracy</text>\n";
  s << "<text x=\"" << num(0.5 * W) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
    << "</text>\n";
  // boundaries
  for (double xb : {phases.learn_start, phases.gen_start}) {
    if (xb < xlo || xb > xhi) continue;
    s << "<line x1=\"" << num(px(xb)) << "\" y1=\"" << mt << "\" x2=\"" << num(px(xb)) << "\" y2=\"" << H - mb
      << "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
  }
  // data
  for (std::size_t i = 0; i < xs.size(); ++i)
    s << "<circle cx=\"" << num(px(xs[i])) << "\" cy=\"" << num(py(ys[i])) << "\" r=\"2.5\" fill=\"#1f4e9c\"/>\n";
  // fit
  s << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
  constexpr int kSamples = 400;
  for (int k = 0; k <= kSamples; ++k) {
    const double x = xlo + (xhi - xlo) * k / kSamples;
    s << num(px(x)) << ',' << num(py(logistic_value(fit, x))) << (k < kSamples ? " " : "");
  }
  s << "\"/>\n</svg>\n";
  return s.str();
}

}  // namespace camelu
