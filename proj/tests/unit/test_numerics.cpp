#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "../support/gradcheck.hpp"
#include "camelu/autodiff.hpp"
#include "camelu/cmlt.hpp"
#include "camelu/error.hpp"
#include "camelu/numerics.hpp"
#include "camelu/optim.hpp"
#include "camelu/rng.hpp"

using namespace camelu;
using camelu::testing::check_gradients;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected camelu::Error");
  return ErrorKind::contract;
}

}  // namespace

TEST_CASE("matmul") {
  const Tensor i2 = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(matmul(i2, m) == m);
  CHECK(matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})).item() == 11.0);

  Rng rng(7);
  const Tensor a = random_tensor({5, 4}, rng);
  const Tensor b = random_tensor({4, 3}, rng);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(c.at(i, j) - s) < 1e-12);
    }
  CHECK(matmul_tn(transpose(a), b) == matmul(a, b));
  CHECK(std::abs(matmul_nt(a, transpose(b)).at(2, 1) - c.at(2, 1)) < 1e-12);

  try {
    (void)matmul(a, a);
    FAIL("expected dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
    CHECK(std::string(e.what()).find("[5x4]") != std::string::npos);
  }
}

TEST_CASE("softmax") {
  const Tensor u = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Tensor p = softmax(Tensor::vector({std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
  CHECK(std::abs(p[0] - 1.0 / 6) < 1e-15);
  CHECK(std::abs(p[1] - 2.0 / 6) < 1e-15);
  CHECK(std::abs(p[2] - 3.0 / 6) < 1e-15);

  const Tensor big = softmax(Tensor::vector({1000, 0}), 0);
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  Rng rng(3);
  const Tensor x = random_tensor({4, 6}, rng, 5.0);
  for (std::size_t axis : {0u, 1u}) {
    const Tensor y = softmax(x, axis);
    const std::size_t outer = axis == 0 ? 6 : 4, len = axis == 0 ? 4 : 6;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double v = axis == 0 ? y.at(j, o) : y.at(o, j);
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  CHECK(kind_of([&] { (void)softmax(x, 2); }) == ErrorKind::dimension);
}

TEST_CASE("layer_norm") {
  const Tensor ones = Tensor::full({3}, 1.0), zeros = Tensor::zeros({3});
  const Tensor flat = layer_norm(Tensor::matrix({{2, 2, 2}, {-1, -1, -1}}), ones, zeros, 1e-5);
  for (double v : flat.data()) CHECK(v == 0.0);

  const Tensor g2 = Tensor::full({2}, 1.0), b2 = Tensor::zeros({2});
  const Tensor two = layer_norm(Tensor::matrix({{1, 3}}), g2, b2, 1e-12);
  CHECK(std::abs(two[0] + 1.0) < 1e-9);
  CHECK(std::abs(two[1] - 1.0) < 1e-9);

  const Tensor five = layer_norm(Tensor::matrix({{1, 7, -2}}), zeros, Tensor::full({3}, 5.0), 1e-5);
  for (double v : five.data()) CHECK(v == 5.0);

  Rng rng(11);
  const Tensor x = random_tensor({5, 8}, rng, 3.0);
  const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 8; ++j) m += y.at(r, j) / 8;
    for (std::size_t j = 0; j < 8; ++j) v += (y.at(r, j) - m) * (y.at(r, j) - m) / 8;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
  CHECK(kind_of([&] { (void)layer_norm(x, ones, zeros, 1e-5); }) == ErrorKind::dimension);
}

TEST_CASE("gelu uses the exact Gaussian CDF") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(std::abs(gelu(10.0) - 10.0) < 1e-6);
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::numbers::sqrt2));
  CHECK(std::abs(gelu(1.0) - phi1) < 1e-15);
  CHECK(gelu(1.0) == doctest::Approx(0.8413).epsilon(1e-4));
}

TEST_CASE("cross_entropy") {
  CHECK(cross_entropy(Tensor::vector({0, 0, 0, 0, 0}), 3) == doctest::Approx(std::log(5.0)));
  CHECK(cross_entropy(Tensor::vector({1e4, 0, 0}), 0) < 1e-12);
  // direct oracle: -(z_2 - log sum exp z)
  const double oracle = -(3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(std::abs(cross_entropy(Tensor::vector({1, 2, 3}), 2) - oracle) < 1e-14);
  CHECK(oracle == doctest::Approx(0.4076).epsilon(1e-4));
  CHECK(kind_of([] { (void)cross_entropy(Tensor::vector({1, 2}), 2); }) == ErrorKind::index);
  CHECK(std::isnan(cross_entropy(Tensor::vector({std::nan(""), 0.0}), 1)));

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = random_tensor({6}, rng, 10.0);
    CHECK(cross_entropy(z, rng.uniform_int(6)) >= 0.0);
  }
}

TEST_CASE("backward basics") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  Var y = ad::mul(x, x);
  tape.backward(y);
  CHECK(tape.grad(x).item() == 6.0);

  // softmax + cross-entropy gradient is p - onehot
  Tape t2;
  Var z = t2.leaf(Tensor::matrix({{0.5, -1.0, 2.0, 0.1}}));
  Var unused = t2.leaf(Tensor::vector({1.0, 2.0}));
  Var loss = ad::cross_entropy(z, 1);
  t2.backward(loss);
  const Tensor p = softmax(z.value(), 1);
  const Tensor g = t2.grad(z);
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(g[j] - (p[j] - (j == 1 ? 1.0 : 0.0))) < 1e-15);
  const Tensor gu = t2.grad(unused);
  for (double v : gu.data()) CHECK(v == 0.0);

  Tape t3;
  Var v = t3.leaf(Tensor::vector({1, 2}));
  CHECK(kind_of([&] { t3.backward(v); }) == ErrorKind::contract);
}

TEST_CASE("tape is topologically ordered") {
  Tape tape;
  Var a = tape.leaf(Tensor::matrix({{1, 2}}));
  Var b = tape.leaf(Tensor::matrix({{3}, {4}}));
  Var c = ad::matmul(a, b);
  Var d = ad::gelu(c);
  CHECK(tape.kind(c) == OpKind::matmul);
  for (auto pid : tape.parents(d)) CHECK(pid < d.id());
  for (auto pid : tape.parents(c)) CHECK(pid < c.id());
}

TEST_CASE("gradients of random op compositions match central differences") {
  Rng rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> inputs = {
        random_tensor({4, 6}, rng),         // x
        random_tensor({6, 6}, rng, 0.5),    // w
        random_tensor({6}, rng, 0.1),       // bias
        Tensor::full({6}, 1.0),             // gamma
        random_tensor({6}, rng, 0.1),       // beta
        random_tensor({6, 3}, rng, 0.5),    // projection
    };
    inputs[3][2] = 1.7;
    const std::size_t labels[] = {0, 2, 1, 2};
    auto fn = [&](Tape&, const std::vector<Var>& in) {
      Var h = ad::add_bias(ad::matmul(in[0], in[1]), in[2]);
      Var n = ad::layer_norm(h, in[3], in[4], 1e-5);
      Var a = ad::gelu(n);
      Var sm = ad::softmax(a, 0);
      Var mixed = ad::add(ad::mul(sm, a), ad::scale(n, 0.3));
      Var logits = ad::matmul(mixed, in[5]);
      return ad::add(ad::cross_entropy_mean(logits, labels), ad::scale(ad::mean(ad::mul(in[0], in[0])), 0.01));
    };
    const auto res = check_gradients(fn, inputs);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("structural op gradients and sequence attention") {
  Rng rng(99);
  std::vector<Tensor> inputs = {random_tensor({3, 4}, rng), random_tensor({3, 2}, rng), random_tensor({5, 6}, rng),
                                random_tensor({6, 18}, rng, 0.5)};
  const std::size_t rows[] = {2, 0, 2, 1, 4, 3};
  auto fn = [&](Tape&, const std::vector<Var>& in) {
    Var c = ad::concat_cols(in[0], in[1]);            // 3 x 6
    Var r = ad::concat_rows(c, in[2]);                // 8 x 6
    Var g = ad::gather_rows(r, rows);                 // 6 x 6
    Var qkv = ad::matmul(g, in[3]);                   // 6 x 18
    Var att = ad::block_attention(qkv, 2, 3, 2);      // 6 x 6
    Var s = ad::slice_cols(att, 1, 4);
    return ad::sum(ad::mul(s, s));
  };
  CHECK(check_gradients(fn, inputs).max_rel_error < 1e-4);
}

TEST_CASE("block attention equals per-head softmax(QK^T/sqrt(dh)) V") {
  Rng rng(4);
  const std::size_t T = 4, d = 6, heads = 2, dh = 3, S = 2;
  const Tensor qkv = random_tensor({S * T, 3 * d}, rng);
  const Tensor out = block_attention(qkv, S, T, heads);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor q({T, dh}), k({T, dh}), v({T, dh});
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t e = 0; e < dh; ++e) {
          q.at(i, e) = qkv.at(s * T + i, h * dh + e);
          k.at(i, e) = qkv.at(s * T + i, d + h * dh + e);
          v.at(i, e) = qkv.at(s * T + i, 2 * d + h * dh + e);
        }
      Tensor scores = matmul_nt(q, k);
      for (double& x : scores.data()) x /= std::sqrt(3.0);
      const Tensor ref = matmul(softmax(scores, 1), v);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t e = 0; e < dh; ++e) CHECK(std::abs(out.at(s * T + i, h * dh + e) - ref.at(i, e)) < 1e-12);
    }
  CHECK(kind_of([&] { (void)block_attention(qkv, S, T, 4); }) == ErrorKind::config);
}

TEST_CASE("ops are deterministic") {
  Rng r1(8), r2(8);
  const Tensor a = random_tensor({7, 5}, r1), b = random_tensor({7, 5}, r2);
  CHECK(a == b);
  CHECK(checksum(softmax(a, 1)) == checksum(softmax(b, 1)));
  CHECK(checksum(gelu(matmul_nt(a, a))) == checksum(gelu(matmul_nt(b, b))));
}

TEST_CASE("adam_step") {
  std::vector<Tensor> params = {Tensor::vector({1.0, -2.0, 3.0})};
  AdamState st = make_adam_state(params);
  const std::vector<Tensor> zero = {Tensor::zeros({3})};
  adam_step(params, zero, st, 1e-3);
  CHECK(st.step == 1);
  CHECK(params[0] == Tensor::vector({1.0, -2.0, 3.0}));

  std::vector<Tensor> p2 = {Tensor::vector({0.5, 0.5})};
  AdamState s2 = make_adam_state(p2);
  adam_step(p2, std::vector<Tensor>{Tensor::vector({4.0, -0.01})}, s2, 0.01);
  const double du0 = p2[0][0] - 0.5, du1 = p2[0][1] - 0.5;
  CHECK(du0 < 0.0);
  CHECK(du1 > 0.0);
  CHECK(std::abs(du0) >= 0.999 * 0.01);
  CHECK(std::abs(du0) <= 0.01);
  CHECK(std::abs(du1) >= 0.999 * 0.01);
  CHECK(std::abs(du1) <= 0.01);

  // scalar reference trace
  std::vector<Tensor> p3 = {Tensor::vector({0.25})};
  AdamState s3 = make_adam_state(p3);
  double theta = 0.25, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -1.2};
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    adam_step(p3, std::vector<Tensor>{Tensor::vector({g})}, s3, 0.05);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    theta -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(std::abs(p3[0][0] - theta) < 1e-12);
  }
  CHECK(s3.step == 2);
  for (double x : s3.v[0].data()) CHECK(x >= 0.0);

  CHECK(kind_of([&] { adam_step(p3, std::vector<Tensor>{Tensor::vector({1, 2})}, s3, 0.1); }) ==
        ErrorKind::dimension);
}

TEST_CASE("warmup cosine schedule") {
  LrSchedule s{1e-5, 1e-6, 1500, 50000};
  CHECK(lr_at(s, 1500) == 1e-5);
  CHECK(lr_at(s, 50000) == 1e-6);
  CHECK(lr_at(s, 60000) == 1e-6);
  CHECK(std::abs(lr_at(s, 1500 + (50000 - 1500) / 2) - 5.5e-6) < 1e-18);
  const double bound = s.base_lr * (1.0 / 1500 + std::numbers::pi / (50000 - 1500));
  double prev = lr_at(s, 0);
  for (std::uint64_t k = 0; k <= 50000; ++k) {
    const double lr = lr_at(s, k);
    CHECK_MESSAGE(lr > 0.0, k);
    if (k > 0) {
      CHECK(std::abs(lr - prev) <= bound);
    }
    prev = lr;
  }
  LrSchedule bad{1e-5, 1e-4, 10, 100};
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::config);
}

TEST_CASE("CMLT tensor container") {
  const Tensor t({2, 3}, {1.5, -2.0, 0.0, 1e-300, 3.25, -0.0});
  const auto bytes = cmlt::encode(t);
  CHECK(bytes.size() == 4 + 3 + 2 * 8 + 6 * 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CMLT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 1);
  CHECK(bytes[6] == 2);
  CHECK(bytes[7] == 2);  // dim 0, little-endian low byte
  CHECK(bytes[15] == 3);
  // 1.5 = 0x3FF8000000000000, little-endian
  CHECK(bytes[23] == 0x00);
  CHECK(bytes[29] == 0xF8);
  CHECK(bytes[30] == 0x3F);

  // round trip property over random shapes
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Shape shape;
    const auto rank = 1 + rng.uniform_int(4);
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(1 + rng.uniform_int(5));
    const Tensor x = random_tensor(shape, rng, 100.0);
    CHECK(cmlt::decode(cmlt::encode(x)) == x);
  }

  cmlt::Bundle b;
  b.header["config"] = {{"layers", 2}};
  b.add("query_token", t);
  b.add("projection.weight", Tensor::full({4, 2}, 0.5));
  const auto back = cmlt::decode_bundle(cmlt::encode_bundle(b));
  CHECK(back.header["config"]["layers"] == 2);
  CHECK(back.get("query_token") == t);
  CHECK(kind_of([&] { (void)back.get("missing"); }) == ErrorKind::lookup);

  auto truncated = bytes;
  truncated.resize(20);
  CHECK(kind_of([&] { (void)cmlt::decode(truncated); }) == ErrorKind::io);
}
