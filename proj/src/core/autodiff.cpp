#include "camelu/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "camelu/error.hpp"
#include "camelu/numerics.hpp"

namespace camelu {

std::string_view op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::scale: return "scale";
    case OpKind::mul: return "mul";
    case OpKind::gelu: return "gelu";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::softmax: return "softmax";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::attention: return "attention";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  require(tape_ != nullptr, ErrorKind::contract, "value() on an unbound Var");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->requires_grad(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  for (const Var& p : parents) {
    require(&p.tape() == this, ErrorKind::contract, "operands live on different tapes");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tape::Node& Tape::node(Var v) const {
  require(&v.tape() == this && v.id() < nodes_.size(), ErrorKind::contract, "Var does not belong to this tape");
  return nodes_[v.id()];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  return Tensor::zeros(n.value.shape());
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
OpKind Tape::kind(Var v) const { return node(v).kind; }
const std::vector<std::size_t>& Tape::parents(Var v) const { return node(v).parents; }

void Tape::backward(Var output) {
  const Node& out = node(output);
  require(out.value.size() == 1, ErrorKind::contract,
          "backward needs a scalar output, got " + shape_string(out.value.shape()));
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  nodes_[output.id()].grad = Tensor::full(out.value.shape(), 1.0);
  nodes_[output.id()].has_grad = true;

  std::vector<Tensor*> parent_grads;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    parent_grads.clear();
    for (std::size_t pid : n.parents) {
      Node& p = nodes_[pid];
      if (!p.requires_grad) {
        parent_grads.push_back(nullptr);
        continue;
      }
      if (!p.has_grad) {
        p.grad = Tensor::zeros(p.value.shape());
        p.has_grad = true;
      }
      parent_grads.push_back(&p.grad);
    }
    n.backward(*this, n.value, n.grad, parent_grads);
  }
}

namespace ad {

namespace {

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

std::string shapes(const Var& a, const Var& b) {
  return shape_string(a.value().shape()) + " and " + shape_string(b.value().shape());
}


}  // namespace

Var matmul(Var a, Var b) {
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::matmul, camelu::matmul(a.value(), b.value()), {a, b},
                         [ia, ib](const Tape& t, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           if (pg[0]) accumulate(pg[0], matmul_nt(g, t.value_at(ib)));
                           if (pg[1]) accumulate(pg[1], matmul_tn(t.value_at(ia), g));
                         });
}

Var add(Var a, Var b) {
  require(a.value().shape() == b.value().shape(), ErrorKind::dimension, "add shape mismatch: " + shapes(a, b));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record(OpKind::add, std::move(out), {a, b},
                         [](const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           accumulate(pg[0], g);
                           accumulate(pg[1], g);
                         });
}

Var add_bias(Var a, Var bias) {
  const Tensor& av = a.value();
  const std::size_t n = av.cols();
  require(bias.value().size() == n, ErrorKind::dimension, "add_bias shape mismatch: " + shapes(a, bias));
  Tensor out = av;
  const std::size_t rows = av.size() / n;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.value()[j];
  return a.tape().record(OpKind::add_bias, std::move(out), {a, bias},
                         [rows, n](const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           accumulate(pg[0], g);
                           if (pg[1]) {
                             auto db = pg[1]->data();
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
                           }
                         });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape().record(OpKind::scale, std::move(out), {a},
                         [factor](const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           auto d = pg[0]->data();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
                         });
}

Var mul(Var a, Var b) {
  require(a.value().shape() == b.value().shape(), ErrorKind::dimension, "mul shape mismatch: " + shapes(a, b));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::mul, std::move(out), {a, b},
                         [ia, ib](const Tape& t, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           const Tensor& av = t.value_at(ia);
                           const Tensor& bv = t.value_at(ib);
                           if (pg[0]) {
                             auto d = pg[0]->data();
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
                           }
                           if (pg[1]) {
                             auto d = pg[1]->data();
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
                           }
                         });
}

Var gelu(Var x) {
  const std::size_t ix = x.id();
  return x.tape().record(OpKind::gelu, camelu::gelu(x.value()), {x},
                         [ix](const Tape& t, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           const Tensor& xv = t.value_at(ix);
                           auto d = pg[0]->data();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * gelu_grad(xv[i]);
                         });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  auto stats = std::make_shared<LayerNormStats>();
  Tensor out = camelu::layer_norm(x.value(), gamma.value(), beta.value(), eps, stats.get());
  const std::size_t ix = x.id(), ig = gamma.id();
  const std::size_t n = x.value().cols();
  return x.tape().record(
      OpKind::layer_norm, std::move(out), {x, gamma, beta},
      [ix, ig, n, stats](const Tape& t, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
        const Tensor& xv = t.value_at(ix);
        const Tensor& gv = t.value_at(ig);
        const std::size_t rows = xv.size() / n;
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double mean = stats->mean[r];
          const double rstd = stats->rstd[r];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (xv[r * n + j] - mean) * rstd;
            dxhat[j] = g[r * n + j] * gv[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
          }
          if (pg[0]) {
            auto dx = pg[0]->data();
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
              dx[r * n + j] += rstd * (dxhat[j] - inv_n * sum_dxhat - xhat[j] * inv_n * sum_dxhat_xhat);
          }
          if (pg[1]) {
            auto dg = pg[1]->data();
            for (std::size_t j = 0; j < n; ++j) dg[j] += g[r * n + j] * xhat[j];
          }
          if (pg[2]) {
            auto db = pg[2]->data();
            for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
          }
        }
      });
}

Var softmax(Var x, std::size_t axis) {
  Tensor out = camelu::softmax(x.value(), axis);
  const Shape& shape = x.value().shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  return x.tape().record(OpKind::softmax, std::move(out), {x},
                         [outer, inner, len](const Tape&, const Tensor& y, const Tensor& g,
                                             std::span<Tensor* const> pg) {
                           auto dx = pg[0]->data();
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < inner; ++i) {
                               const std::size_t base = o * len * inner + i;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                               for (std::size_t j = 0; j < len; ++j) {
                                 const std::size_t k = base + j * inner;
                                 dx[k] += y[k] * (g[k] - dot);
                               }
                             }
                           }
                         });
}

Var cross_entropy(Var logits, std::size_t label) {
  const std::size_t labels[] = {label};
  require(logits.value().rows() == 1, ErrorKind::dimension,
          "cross_entropy expects a single row of logits, got " + shape_string(logits.value().shape()));
  return cross_entropy_mean(logits, labels);
}

Var cross_entropy_mean(Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = logits.value();
  const std::size_t rows = z.rows(), n = z.cols();
  require(labels.size() == rows, ErrorKind::dimension,
          std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " logit rows");
  double total = 0.0;
  Tensor probs(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = z.data().subspan(r * n, n);
    total += camelu::cross_entropy(row, labels[r]);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] = std::exp(row[j] - mx) / s;
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return logits.tape().record(OpKind::cross_entropy, Tensor::scalar(total * inv_rows), {logits},
                              [probs = std::move(probs), lab = std::move(lab), rows, n, inv_rows](
                                  const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                                auto dz = pg[0]->data();
                                const double scale = g[0] * inv_rows;
                                for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < n; ++j)
                                    dz[r * n + j] += scale * (probs[r * n + j] - (j == lab[r] ? 1.0 : 0.0));
                              });
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.rows() == bv.rows(), ErrorKind::dimension,
          "concat_cols shape mismatch: " + shapes(a, b));
  const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data().begin() + r * ca, ca, out.data().begin() + r * (ca + cb));
    std::copy_n(bv.data().begin() + r * cb, cb, out.data().begin() + r * (ca + cb) + ca);
  }
  return a.tape().record(OpKind::concat_cols, std::move(out), {a, b},
                         [rows, ca, cb](const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (pg[0])
                               for (std::size_t j = 0; j < ca; ++j) (*pg[0])[r * ca + j] += g[r * (ca + cb) + j];
                             if (pg[1])
                               for (std::size_t j = 0; j < cb; ++j) (*pg[1])[r * cb + j] += g[r * (ca + cb) + ca + j];
                           }
                         });
}

Var concat_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.cols(), ErrorKind::dimension,
          "concat_rows shape mismatch: " + shapes(a, b));
  const std::size_t na = av.size();
  std::vector<double> data(av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  Tensor out({av.rows() + bv.rows(), av.cols()}, std::move(data));
  return a.tape().record(OpKind::concat_rows, std::move(out), {a, b},
                         [na](const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           if (pg[0])
                             for (std::size_t i = 0; i < na; ++i) (*pg[0])[i] += g[i];
                           if (pg[1])
                             for (std::size_t i = 0; i < pg[1]->size(); ++i) (*pg[1])[i] += g[na + i];
                         });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  const std::size_t rows = tv.rows(), n = tv.cols();
  require(!indices.empty(), ErrorKind::dimension, "gather_rows with no indices");
  Tensor out({indices.size(), n});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < rows, ErrorKind::index,
            "row index " + std::to_string(indices[i]) + " out of range for " + std::to_string(rows) + " rows");
    std::copy_n(tv.data().begin() + indices[i] * n, n, out.data().begin() + i * n);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape().record(OpKind::gather_rows, std::move(out), {table},
                             [idx = std::move(idx), n](const Tape&, const Tensor&, const Tensor& g,
                                                       std::span<Tensor* const> pg) {
                               auto d = pg[0]->data();
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) d[idx[i] * n + j] += g[i * n + j];
                             });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), n = av.cols();
  require(count > 0 && start + count <= n, ErrorKind::dimension,
          "slice_cols [" + std::to_string(start) + ", " + std::to_string(start + count) + ") outside " +
              shape_string(av.shape()));
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data().begin() + r * n + start, count, out.data().begin() + r * count);
  return a.tape().record(OpKind::slice_cols, std::move(out), {a},
                         [rows, n, start, count](const Tape&, const Tensor&, const Tensor& g,
                                                 std::span<Tensor* const> pg) {
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < count; ++j) (*pg[0])[r * n + start + j] += g[r * count + j];
                         });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(OpKind::sum, Tensor::scalar(s), {a},
                         [](const Tape&, const Tensor&, const Tensor& g, std::span<Tensor* const> pg) {
                           for (double& d : pg[0]->data()) d += g[0];
                         });
}

Var mean(Var a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  return scale(sum(a), inv);
}

Var block_attention(Var qkv, std::size_t n_seq, std::size_t seq_len, std::size_t heads) {
  auto probs = std::make_shared<std::vector<double>>();
  Tensor out = camelu::block_attention(qkv.value(), n_seq, seq_len, heads, probs.get());
  const std::size_t iq = qkv.id();
  return qkv.tape().record(
      OpKind::attention, std::move(out), {qkv},
      [iq, n_seq, seq_len, heads, probs](const Tape& t, const Tensor&, const Tensor& g,
                                         std::span<Tensor* const> pg) {
        const Tensor& x = t.value_at(iq);
        const std::size_t d = x.cols() / 3, dh = d / heads, width = 3 * d, T = seq_len;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        auto dx = pg[0]->data();
        std::vector<double> dp(T * T);
        for (std::size_t s = 0; s < n_seq; ++s) {
          const double* blk = x.data().data() + s * T * width;
          double* dblk = dx.data() + s * T * width;
          const double* gblk = g.data().data() + s * T * d;
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs->data() + (s * heads + h) * T * T;
            const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            // dV = P^T dO ; dP = dO V^T
            for (std::size_t i = 0; i < T; ++i) {
              const double* go = gblk + i * d + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                const double w = p[i * T + j];
                const double* v = blk + j * width + vo;
                double* dv = dblk + j * width + vo;
                double dot = 0.0;
                for (std::size_t e = 0; e < dh; ++e) {
                  dv[e] += w * go[e];
                  dot += go[e] * v[e];
                }
                dp[i * T + j] = dot;
              }
            }
            // dS = P * (dP - rowsum(dP * P)); dQ = dS K * scale; dK = dS^T Q * scale
            for (std::size_t i = 0; i < T; ++i) {
              double row = 0.0;
              for (std::size_t j = 0; j < T; ++j) row += dp[i * T + j] * p[i * T + j];
              for (std::size_t j = 0; j < T; ++j) {
                const double ds = p[i * T + j] * (dp[i * T + j] - row) * scale;
                if (ds == 0.0) continue;
                const double* q = blk + i * width + qo;
                const double* k = blk + j * width + ko;
                double* dq = dblk + i * width + qo;
                double* dk = dblk + j * width + ko;
                for (std::size_t e = 0; e < dh; ++e) {
                  dq[e] += ds * k[e];
                  dk[e] += ds * q[e];
                }
              }
            }
          }
        }
      });
}

}  // namespace ad
}  // namespace camelu
