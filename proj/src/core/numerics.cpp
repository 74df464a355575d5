#include "camelu/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "camelu/error.hpp"

namespace camelu {

namespace {

void require_matrix(const Tensor& t, const char* what) {
  require(t.rank() == 2, ErrorKind::dimension,
          std::string(what) + " expects a rank-2 tensor, got " + shape_string(t.shape()));
}

std::string pair_shapes(const Tensor& a, const Tensor& b) {
  return shape_string(a.shape()) + " and " + shape_string(b.shape());
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

Eigen::Map<RowMatrix> as_matrix(Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  require(a.cols() == b.rows(), ErrorKind::dimension, "matmul inner dimensions disagree: " + pair_shapes(a, b));
  Tensor c({a.rows(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b);
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  require(a.rows() == b.rows(), ErrorKind::dimension, "matmul_tn row counts disagree: " + pair_shapes(a, b));
  Tensor c({a.cols(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  require(a.cols() == b.cols(), ErrorKind::dimension, "matmul_nt column counts disagree: " + pair_shapes(a, b));
  Tensor c({a.rows(), b.rows()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), ErrorKind::dimension,
          "softmax axis " + std::to_string(axis) + " invalid for shape " + shape_string(x.shape()));
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Tensor y(shape);
  auto in = x.data();
  auto out = y.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
    }
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, LayerNormStats* stats) {
  const std::size_t n = x.cols();
  require(gamma.size() == n && beta.size() == n, ErrorKind::dimension,
          "layer_norm gamma/beta " + pair_shapes(gamma, beta) + " must match last axis of " + shape_string(x.shape()));
  require(eps > 0.0, ErrorKind::contract, "layer_norm eps must be positive");
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape());
  if (stats) {
    stats->mean.assign(rows, 0.0);
    stats->rstd.assign(rows, 0.0);
  }
  auto in = x.data();
  auto out = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = gamma[j] * ((row[j] - mean) * rstd) + beta[j];
    if (stats) {
      stats->mean[r] = mean;
      stats->rstd[r] = rstd;
    }
  }
  return y;
}

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  require(!logits.empty(), ErrorKind::dimension, "cross_entropy on empty logits");
  require(label < logits.size(), ErrorKind::index,
          "label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) + " classes");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double loss = std::log(sum) - (logits[label] - mx);
  return loss < 0.0 ? 0.0 : loss;  // keeps NaN
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  require(logits.rows() == 1, ErrorKind::dimension,
          "cross_entropy expects a single row of logits, got " + shape_string(logits.shape()));
  return cross_entropy(logits.data(), label);
}

Tensor block_attention(const Tensor& qkv, std::size_t n_seq, std::size_t seq_len, std::size_t heads,
                       std::vector<double>* probs) {
  require_matrix(qkv, "block_attention");
  require(n_seq * seq_len == qkv.rows(), ErrorKind::dimension,
          "block_attention: " + std::to_string(n_seq) + " sequences of " + std::to_string(seq_len) +
              " tokens do not cover " + shape_string(qkv.shape()));
  require(qkv.cols() % 3 == 0, ErrorKind::dimension, "block_attention: qkv width must be 3*d");
  const std::size_t d = qkv.cols() / 3;
  require(heads > 0 && d % heads == 0, ErrorKind::config,
          "model width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t width = 3 * d;
  Tensor out({n_seq * seq_len, d});
  if (probs) probs->assign(n_seq * heads * seq_len * seq_len, 0.0);
  std::vector<double> p(seq_len * seq_len);
  const double* src = qkv.data().data();
  double* dst = out.data().data();
  for (std::size_t s = 0; s < n_seq; ++s) {
    const double* block = src + s * seq_len * width;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      for (std::size_t i = 0; i < seq_len; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < seq_len; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += block[i * width + qo + e] * block[j * width + ko + e];
          p[i * seq_len + j] = dot * scale;
          mx = std::max(mx, p[i * seq_len + j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          p[i * seq_len + j] = std::exp(p[i * seq_len + j] - mx);
          sum += p[i * seq_len + j];
        }
        for (std::size_t j = 0; j < seq_len; ++j) p[i * seq_len + j] /= sum;
        double* orow = dst + (s * seq_len + i) * d + h * dh;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double w = p[i * seq_len + j];
          for (std::size_t e = 0; e < dh; ++e) orow[e] += w * block[j * width + vo + e];
        }
      }
      if (probs) std::copy(p.begin(), p.end(), probs->begin() + (s * heads + h) * seq_len * seq_len);
    }
  }
  return out;
}

}  // namespace camelu
