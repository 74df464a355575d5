#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <set>

#include "../support/collision_mc.hpp"
#include "../support/images.hpp"
#include "camelu/episodes.hpp"
#include "camelu/error.hpp"
#include "camelu/rng.hpp"
#include "camelu/ssim.hpp"

using namespace camelu;

namespace {

std::string error_message(const std::function<void()>& fn, ErrorKind expected) {
  try {
    fn();
  } catch (const Error& e) {
    CHECK(e.kind() == expected);
    return e.what();
  }
  FAIL("expected camelu::Error");
  return {};
}

Dataset unlabeled_noise(std::size_t n, std::size_t size = 12) {
  Dataset ds;
  ds.id = "noise";
  for (std::size_t i = 0; i < n; ++i)
    ds.items.push_back({"n" + std::to_string(i), "", std::nullopt, camelu::testing::smooth_image(size, size, 3, 900 + i)});
  return ds;
}

const Dataset& shared_unlabeled() {
  static const Dataset ds = strip_labels(gen_synthetic_dataset(10, 6, 16, 3, 7));
  return ds;
}

}  // namespace

TEST_CASE("degenerate single-image task") {
  const Dataset ds = unlabeled_noise(3);
  EpisodeConfig cfg;
  cfg.n_way = cfg.k_shot = cfg.n_query = 1;
  const Episode ep = build_episode(ds, cfg, 5);
  ep.validate();
  CHECK(ep.support.size() == 1);
  CHECK(ep.query.size() == 1);
  CHECK(ep.query_labels[0] == 0);
  CHECK(ep.support_labels[0] == 0);
}

TEST_CASE("episode structure, lambda range and partner exclusion") {
  const Dataset& ds = shared_unlabeled();
  EpisodeConfig cfg;
  cfg.n_way = 5;
  cfg.k_shot = 2;
  cfg.n_query = 10;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Episode ep = build_episode(ds, cfg, seed);
    ep.validate();
    const auto& p = ep.provenance;
    CHECK(std::set<std::size_t>(p.bases.begin(), p.bases.end()).size() == 5);
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      CHECK(p.support[i].source == p.bases[static_cast<std::size_t>(ep.support_labels[i])]);
      CHECK(p.support[i].augs.size() == 3);
    }
    for (std::size_t j = 0; j < ep.query.size(); ++j) {
      const auto& q = p.query[j];
      REQUIRE(q.lambda.has_value());
      REQUIRE(q.partner.has_value());
      CHECK(*q.lambda > 0.0);
      CHECK(*q.lambda < 0.5);
      CHECK(std::find(p.bases.begin(), p.bases.end(), *q.partner) == p.bases.end());
      CHECK(ep.query_labels[j] == static_cast<int>(q.base));
      // query = lambda z + (1 - lambda) x~
      const Image xt = reconstruct_query_source(ds, q);
      const Image& z = ds.image(*q.partner);
      double worst = 0.0;
      for (std::size_t i = 0; i < xt.pixels.size(); ++i)
        worst = std::max(worst, std::abs(ep.query[j].pixels[i] - *q.lambda * z.pixels[i] - (1 - *q.lambda) * xt.pixels[i]));
      CHECK(worst <= 1e-15);
    }
  }
}

TEST_CASE("support count per label and uniform base selection over 1000 episodes") {
  const Dataset ds = strip_labels(gen_synthetic_dataset(10, 4, 8, 1, 3));
  EpisodeConfig cfg;
  cfg.n_way = 5;
  cfg.k_shot = 5;
  cfg.n_query = 25;
  cfg.aug_count = 1;
  std::vector<int> hist(5, 0);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Episode ep = build_episode(ds, cfg, seed);
    std::vector<int> counts(5, 0);
    for (int l : ep.support_labels) counts[static_cast<std::size_t>(l)]++;
    for (int c : counts) CHECK(c == 5);
    for (int l : ep.query_labels) hist[static_cast<std::size_t>(l)]++;
  }
  const double n = 25000, p = 0.2, sigma = std::sqrt(n * p * (1 - p));
  for (int h : hist) CHECK(std::abs(h - n * p) < 3 * sigma);
}

TEST_CASE("episodes are pure functions of the seed") {
  const Dataset& ds = shared_unlabeled();
  EpisodeConfig cfg;
  cfg.n_query = 6;
  const Episode a = build_episode(ds, cfg, 11), b = build_episode(ds, cfg, 11), c = build_episode(ds, cfg, 12);
  CHECK(a.support == b.support);
  CHECK(a.query == b.query);
  CHECK(a.query != c.query);
}

TEST_CASE("augment-only variant") {
  const Dataset& ds = shared_unlabeled();
  EpisodeConfig cfg;
  cfg.n_way = 3;
  cfg.k_shot = 2;
  cfg.n_query = 8;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Episode aug = build_episode_augment_only(ds, cfg, seed);
    aug.validate();
    for (const auto& q : aug.provenance.query) {
      CHECK_FALSE(q.lambda.has_value());
      CHECK_FALSE(q.partner.has_value());
    }
    EpisodeConfig zero = cfg;
    zero.fixed_lambda = 0.0;
    const Episode mixed = build_episode(ds, zero, seed);
    CHECK(mixed.query == aug.query);
    CHECK(mixed.support == aug.support);
    CHECK(mixed.query_labels == aug.query_labels);

    EpisodeConfig tiny = cfg;
    tiny.mix.hi = 1e-9;
    const Episode near = build_episode(ds, tiny, seed);
    for (std::size_t j = 0; j < near.query.size(); ++j)
      for (std::size_t i = 0; i < near.query[j].pixels.size(); ++i)
        CHECK(std::abs(near.query[j].pixels[i] - aug.query[j].pixels[i]) < 1e-8);
  }
  EpisodeConfig small;
  small.n_way = 2;
  small.k_shot = 1;
  small.n_query = 2;
  const Episode ep = build_episode_augment_only(ds, small, 3);
  ep.validate();
  for (std::size_t j = 0; j < 2; ++j) {
    const auto& q = ep.provenance.query[j];
    CHECK((q.source == ep.provenance.bases[0] || q.source == ep.provenance.bases[1]));
    CHECK(ep.query[j] == reconstruct_query_source(ds, q));
  }
}

TEST_CASE("patch-mode queries copy a rectangle of the partner") {
  const Dataset& ds = shared_unlabeled();
  EpisodeConfig cfg;
  cfg.mix.mode = MixMode::patch;
  cfg.n_query = 5;
  const Episode ep = build_episode(ds, cfg, 2);
  for (std::size_t j = 0; j < 5; ++j) {
    const auto& q = ep.provenance.query[j];
    REQUIRE(q.rect.has_value());
    const Image xt = reconstruct_query_source(ds, q);
    const Image& z = ds.image(*q.partner);
    for (std::size_t y = 0; y < xt.height; ++y)
      for (std::size_t x = 0; x < xt.width; ++x) {
        const bool in = y >= q.rect->top && y < q.rect->top + q.rect->height && x >= q.rect->left &&
                        x < q.rect->left + q.rect->width;
        CHECK(ep.query[j].at(y, x, 0) == (in ? z.at(y, x, 0) : xt.at(y, x, 0)));
      }
  }
}

TEST_CASE("episode preconditions") {
  const Dataset ds = unlabeled_noise(6);
  EpisodeConfig cfg;
  cfg.n_way = 3;
  cfg.n_query = 4;
  const std::string msg = error_message([&] { (void)build_episode(ds, cfg, 0); }, ErrorKind::contract);
  CHECK(msg.find("N + Q") != std::string::npos);

  const Dataset labeled = gen_synthetic_dataset(3, 4, 8, 3, 1);
  const Episode ep = build_episode(labeled, cfg, 0);
  REQUIRE(ep.provenance.warnings.size() == 1);
  CHECK(ep.provenance.warnings[0].find("labels ignored") != std::string::npos);
}

TEST_CASE("test episodes") {
  // exactly N classes with K + 1 items each
  const Dataset ds = gen_synthetic_dataset(4, 3, 8, 3, 9);
  const Episode ep = build_test_episode(ds, 4, 2, 4, 17);
  ep.validate();
  std::set<std::size_t> sup(ep.provenance.support_items.begin(), ep.provenance.support_items.end());
  std::set<std::size_t> qry(ep.provenance.query_items.begin(), ep.provenance.query_items.end());
  CHECK(sup.size() + qry.size() == ds.size());

  const Dataset big = gen_synthetic_dataset(12, 10, 8, 1, 2);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Episode e = build_test_episode(big, 5, 2, 7, seed);
    e.validate();
    const auto& p = e.provenance;
    std::set<std::size_t> s(p.support_items.begin(), p.support_items.end());
    for (std::size_t q : p.query_items) CHECK(s.count(q) == 0);
    CHECK(std::set<int>(p.class_map.begin(), p.class_map.end()).size() == 5);
    for (std::size_t i = 0; i < e.support.size(); ++i)
      CHECK(*big.items[p.support_items[i]].label == p.class_map[static_cast<std::size_t>(e.support_labels[i])]);
    for (std::size_t i = 0; i < e.query.size(); ++i)
      CHECK(*big.items[p.query_items[i]].label == p.class_map[static_cast<std::size_t>(e.query_labels[i])]);
    // balanced: labels 0 and 1 get 2 queries, the rest 1
    std::vector<int> counts(5, 0);
    for (int l : e.query_labels) counts[static_cast<std::size_t>(l)]++;
    CHECK(counts == std::vector<int>{2, 2, 1, 1, 1});
  }
  const std::string msg = error_message([&] { (void)build_test_episode(ds, 4, 3, 4, 0); }, ErrorKind::contract);
  CHECK(msg.find("class ") != std::string::npos);
  (void)error_message([&] { (void)build_test_episode(ds, 5, 1, 5, 0); }, ErrorKind::contract);
  (void)error_message([&] { (void)build_test_episode(strip_labels(ds), 2, 1, 2, 0); }, ErrorKind::contract);
}

TEST_CASE("collision probability examples") {
  CHECK(collision_probability(10, 7, 1) == 0.0);
  CHECK(collision_probability(964, 1280, 1) == 0.0);
  const double p = collision_probability(964, 1280, 5);
  CHECK(std::abs(p - 0.0104) <= 0.0005);
  CHECK(std::abs(collision_probability(3, 2, 2) - 0.2) < 1e-15);
  CHECK(collision_probability(3, 2, 4) == 1.0);
  CHECK(collision_probability(5, 1, 3) == 0.0);

  // exhaustive enumeration of ordered pairs
  for (std::uint64_t C = 1; C <= 5; ++C)
    for (std::uint64_t m = 1; m <= 4; ++m) {
      if (C * m < 2) continue;
      std::uint64_t pairs = 0, same = 0;
      for (std::uint64_t a = 0; a < C * m; ++a)
        for (std::uint64_t b = 0; b < C * m; ++b) {
          if (a == b) continue;
          ++pairs;
          same += (a / m == b / m) ? 1 : 0;
        }
      CHECK(std::abs(collision_probability(C, m, 2) - static_cast<double>(same) / pairs) < 1e-14);
    }
}

TEST_CASE("collision probability agrees with Monte-Carlo draws") {
  for (const auto& [C, m, N] : camelu::testing::collision_grid()) {
    const double exact = collision_probability(C, m, N);
    const std::uint64_t draws = 100000;
    const double mc = camelu::testing::collision_monte_carlo(C, m, N, draws, C * 1000 + m * 10 + N);
    const double sigma = std::sqrt(exact * (1 - exact) / draws);
    if (sigma == 0.0) {
      CHECK(mc == exact);
    } else {
      CHECK(std::abs(mc - exact) <= 3 * sigma + 1e-12);
    }
  }
}

TEST_CASE("sample_lambda") {
  MixConfig mix;
  double sum = 0.0, hi = 0.0;
  for (std::uint64_t s = 0; s < 100000; ++s) {
    const double l = sample_lambda(mix, s);
    CHECK(l > 0.0);
    sum += l;
    hi = std::max(hi, l);
  }
  CHECK(std::abs(sum / 100000 - 0.25) <= 0.005);
  CHECK(hi < 0.5);

  MixConfig skew;
  skew.alpha = 2;
  skew.beta = 5;
  for (std::uint64_t s = 0; s < 5000; ++s) {
    const double l = sample_lambda(skew, s);
    CHECK(l > 0.0);
    CHECK(l < 0.5);
  }

  MixConfig narrow;
  narrow.lo = 0.3;
  narrow.hi = 0.3 + 1e-7;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const double l = sample_lambda(narrow, s);
    CHECK(l > narrow.lo);
    CHECK(l < narrow.hi);
  }
  // a far tail forces the inverse-CDF path
  MixConfig tail;
  tail.alpha = 1;
  tail.beta = 40;
  tail.lo = 0.45;
  tail.hi = 0.5;
  double prev = -1;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const double l = sample_lambda(tail, s);
    CHECK(l > 0.45);
    CHECK(l < 0.5);
    CHECK(l != prev);
    prev = l;
  }
  CHECK(sample_lambda(mix, 99) == sample_lambda(mix, 99));
}

TEST_CASE("kmeans pseudo-labels") {
  Rng rng(4);
  std::vector<Tensor> pts;
  std::vector<int> truth;
  for (int blob = 0; blob < 2; ++blob)
    for (int i = 0; i < 50; ++i) {
      Tensor t({4});
      for (std::size_t d = 0; d < 4; ++d) t[d] = rng.normal() + (blob ? 12.0 : 0.0);
      pts.push_back(t);
      truth.push_back(blob);
    }
  const KMeansResult r = kmeans_pseudolabels(pts, 2, 50, 1);
  int agree = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) agree += (r.labels[i] == truth[i]) ? 1 : 0;
  CHECK((agree == 100 || agree == 0));
  for (std::size_t i = 1; i < r.inertia.size(); ++i) CHECK(r.inertia[i] <= r.inertia[i - 1] + 1e-9);

  std::vector<Tensor> few(pts.begin(), pts.begin() + 6);
  const KMeansResult own = kmeans_pseudolabels(few, 6, 10, 3);
  CHECK(own.inertia.back() == 0.0);
  CHECK(std::set<int>(own.labels.begin(), own.labels.end()).size() == 6);

  // many clusters on clumped data exercises empty-cluster re-seeding
  std::vector<Tensor> clumped;
  for (int i = 0; i < 60; ++i) {
    Tensor t({2});
    t[0] = (i % 3) * 5.0 + 0.01 * rng.normal();
    t[1] = 0.01 * rng.normal();
    clumped.push_back(t);
  }
  for (std::uint64_t s = 0; s < 20; ++s) {
    const KMeansResult c = kmeans_pseudolabels(clumped, 8, 30, s);
    for (int l : c.labels) CHECK((l >= 0 && l < 8));
    for (std::size_t i = 1; i < c.inertia.size(); ++i) CHECK(c.inertia[i] <= c.inertia[i - 1] + 1e-9);
  }
  (void)error_message([&] { (void)kmeans_pseudolabels(few, 7, 3, 0); }, ErrorKind::contract);
  (void)error_message([&] { (void)kmeans_pseudolabels(few, 1, 3, 0); }, ErrorKind::contract);
}

TEST_CASE("multi_dataset_sample is uniform over datasets") {
  for (std::uint64_t s = 0; s < 100; ++s) CHECK(multi_dataset_sample(1, s) == 0);
  std::array<int, 3> hits{};
  for (std::uint64_t s = 0; s < 30000; ++s) hits[multi_dataset_sample(3, s)]++;
  const double sigma = std::sqrt(30000.0 * (1.0 / 3) * (2.0 / 3));
  for (int h : hits) CHECK(std::abs(h - 10000.0) < 3 * sigma);

  std::vector<Dataset> sets{unlabeled_noise(40, 8), unlabeled_noise(1, 8)};
  int ones = 0;
  for (std::uint64_t s = 0; s < 4000; ++s) ones += multi_dataset_sample(sets, s) == 1 ? 1 : 0;
  CHECK(std::abs(ones / 4000.0 - 0.5) < 0.03);
  (void)error_message([] { (void)multi_dataset_sample(0, 1); }, ErrorKind::contract);
}

TEST_CASE("synthetic dataset") {
  const Dataset ds = gen_synthetic_dataset(5, 20, 16, 3, 1);
  ds.validate();
  CHECK(ds.size() == 100);
  const auto groups = ds.by_class();
  REQUIRE(groups.size() == 5);
  for (const auto& g : groups) CHECK(g.size() == 20);
  CHECK(gen_synthetic_dataset(5, 20, 16, 3, 1).items[37].image == ds.items[37].image);
  (void)error_message([] { (void)gen_synthetic_dataset(2, 2, 7, 3, 1); }, ErrorKind::contract);

  const Dataset held = gen_synthetic_dataset(5, 20, 16, 3, 1, 20);
  CHECK(held.items[0].image != ds.items[0].image);
}

TEST_CASE("same-class synthetic images are more similar than cross-class ones") {
  const Dataset ds = gen_synthetic_dataset(10, 20, 16, 3, 5);
  Rng rng(8);
  std::vector<double> within, across;
  while (within.size() < 500 || across.size() < 500) {
    const std::size_t a = rng.uniform_int(ds.size()), b = rng.uniform_int(ds.size());
    if (a == b) continue;
    const bool same = ds.items[a].label == ds.items[b].label;
    auto& bucket = same ? within : across;
    if (bucket.size() >= 500) continue;
    bucket.push_back(ssim(ds.image(a), ds.image(b)));
  }
  auto stats = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / (v.size() - 1)};
  };
  const auto [mw, vw] = stats(within);
  const auto [ma, va] = stats(across);
  MESSAGE("within " << mw << " across " << ma);
  CHECK(mw - ma > 3 * std::sqrt(vw / 500 + va / 500));
}

TEST_CASE("dataset directory and episode bundle round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "camelu_ds_roundtrip";
  std::filesystem::remove_all(dir);
  const Dataset ds = gen_synthetic_dataset(3, 4, 8, 3, 2);
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  REQUIRE(back.size() == ds.size());
  CHECK(back.labeled);
  CHECK(*back.class_count == 3);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.items[i].image == ds.items[i].image);
    CHECK(back.items[i].label == ds.items[i].label);
  }
  std::filesystem::remove_all(dir);
  (void)error_message([&] { (void)load_dataset(dir); }, ErrorKind::io);

  EpisodeConfig cfg;
  cfg.n_way = 3;
  cfg.n_query = 4;
  cfg.mix.mode = MixMode::patch;
  const Episode ep = build_episode(unlabeled_noise(10), cfg, 4);
  const Episode rt = episode_from_bundle(cmlt::decode_bundle(cmlt::encode_bundle(episode_to_bundle(ep))));
  CHECK(rt.support == ep.support);
  CHECK(rt.query == ep.query);
  CHECK(rt.query_labels == ep.query_labels);
  CHECK(rt.provenance.query[2].lambda == ep.provenance.query[2].lambda);
  CHECK(rt.provenance.query[2].rect->area() == ep.provenance.query[2].rect->area());
  CHECK(rt.provenance.support[1].augs == ep.provenance.support[1].augs);
}
