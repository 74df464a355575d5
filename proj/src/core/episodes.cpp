#include "camelu/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/beta.hpp>

#include "camelu/error.hpp"
#include "camelu/rng.hpp"

namespace camelu {

using nlohmann::json;

std::string_view task_mode_name(TaskMode m) noexcept {
  switch (m) {
    case TaskMode::camelu: return "camelu";
    case TaskMode::augment: return "augment";
    case TaskMode::kmeans: return "kmeans";
  }
  return "?";
}

TaskMode task_mode_from_name(std::string_view name) {
  if (name == "camelu") return TaskMode::camelu;
  if (name == "augment") return TaskMode::augment;
  if (name == "kmeans") return TaskMode::kmeans;
  fail(ErrorKind::config, "unknown task mode '" + std::string(name) + "' (expected camelu, augment or kmeans)");
}

void EpisodeConfig::validate() const {
  require(n_way >= 1 && k_shot >= 1 && n_query >= 1, ErrorKind::contract, "episode N, K, Q must be at least 1");
  require(aug_count >= 1 && aug_count <= kAugKindCount, ErrorKind::contract, "aug_count must lie in [1, 7]");
  mix.validate();
  if (fixed_lambda) require(*fixed_lambda >= 0.0 && *fixed_lambda < 1.0, ErrorKind::contract, "fixed lambda outside [0, 1)");
}

void Episode::validate() const {
  require(support.size() == n_way * k_shot && support_labels.size() == support.size(), ErrorKind::contract,
          "episode support count differs from N*K");
  require(query.size() == n_query && query_labels.size() == query.size(), ErrorKind::contract,
          "episode query count differs from Q");
  std::vector<std::size_t> counts(n_way, 0);
  for (int l : support_labels) {
    require(l >= 0 && static_cast<std::size_t>(l) < n_way, ErrorKind::contract, "support label outside [0, N)");
    counts[static_cast<std::size_t>(l)]++;
  }
  for (std::size_t c : counts) require(c == k_shot, ErrorKind::contract, "support label count differs from K");
  for (int l : query_labels)
    require(l >= 0 && static_cast<std::size_t>(l) < n_way, ErrorKind::contract, "query label outside [0, N)");
}

namespace {

constexpr std::uint64_t kBasesTag = stream_tag("bases");
constexpr std::uint64_t kSupportTag = stream_tag("support");
constexpr std::uint64_t kQueryTag = stream_tag("query");
constexpr std::uint64_t kTestTag = stream_tag("test-episode");

// First `count` entries of a seeded Fisher-Yates shuffle of [0, n).
std::vector<std::size_t> draw_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.uniform_int(n - i)]);
  idx.resize(count);
  return idx;
}

std::vector<AugKind> kinds_of(const std::vector<AugSpec>& specs) {
  std::vector<AugKind> out;
  for (const auto& s : specs) out.push_back(s.kind);
  return out;
}

std::vector<AugSpec> specs_of(const std::vector<AugKind>& kinds) {
  std::vector<AugSpec> out;
  for (AugKind k : kinds) out.push_back(AugSpec{k, {}});
  return out;
}

Episode build_synthetic(const Dataset& ds, const EpisodeConfig& cfg, std::uint64_t seed, bool mix) {
  cfg.validate();
  const std::size_t N = cfg.n_way, K = cfg.k_shot, Q = cfg.n_query;
  require(ds.size() >= N + Q, ErrorKind::contract,
          "dataset '" + ds.id + "' has " + std::to_string(ds.size()) + " items; episode needs at least N + Q = " +
              std::to_string(N + Q));
  Episode ep;
  ep.n_way = N;
  ep.k_shot = K;
  ep.n_query = Q;
  auto& prov = ep.provenance;
  prov.variant = mix ? "camelu" : "augment";
  prov.dataset_id = ds.id;
  prov.seed = seed;
  if (ds.labeled) prov.warnings.push_back("dataset '" + ds.id + "' is labeled; labels ignored");

  Rng base_rng(derive_seed(seed, kBasesTag));
  prov.bases = draw_without_replacement(ds.size(), N, base_rng);
  std::vector<std::size_t> sorted_bases = prov.bases;
  std::sort(sorted_bases.begin(), sorted_bases.end());

  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      const std::uint64_t child = derive_seed(seed, kSupportTag, n * K + k);
      const auto specs = sample_augmentations(cfg.aug_count, derive_seed(child, 1));
      SupportRecord rec{prov.bases[n], kinds_of(specs), derive_seed(child, 2)};
      ep.support.push_back(apply_chain(ds.image(rec.source), specs, rec.chain_seed));
      ep.support_labels.push_back(static_cast<int>(n));
      prov.support.push_back(std::move(rec));
    }

  for (std::size_t j = 0; j < Q; ++j) {
    Rng rng(derive_seed(seed, kQueryTag, j));
    QueryRecord rec;
    rec.base = rng.uniform_int(N);
    rec.source = prov.bases[rec.base];
    const auto specs = sample_augmentations(cfg.aug_count, rng.next_u64());
    rec.augs = kinds_of(specs);
    rec.chain_seed = rng.next_u64();
    Image x = apply_chain(ds.image(rec.source), specs, rec.chain_seed);
    if (mix) {
      // partner drawn from the non-base items
      std::size_t z = rng.uniform_int(ds.size() - N);
      for (std::size_t b : sorted_bases)
        if (z >= b) ++z;
      rec.partner = z;
      const std::uint64_t lambda_seed = rng.next_u64();
      const std::uint64_t patch_seed = rng.next_u64();
      const double lambda = cfg.fixed_lambda ? *cfg.fixed_lambda : sample_lambda(cfg.mix, lambda_seed);
      rec.lambda = lambda;
      if (cfg.mix.mode == MixMode::patch && lambda > 0.0) {
        PatchMix pm = mix_patch(x, ds.image(z), lambda, patch_seed);
        rec.rect = pm.rect;
        x = std::move(pm.image);
      } else {
        x = mix_pixel(x, ds.image(z), lambda);
      }
    }
    ep.query.push_back(std::move(x));
    ep.query_labels.push_back(static_cast<int>(rec.base));
    prov.query.push_back(std::move(rec));
  }
  return ep;
}

}  // namespace

Episode build_episode(const Dataset& ds, const EpisodeConfig& cfg, std::uint64_t seed) {
  return build_synthetic(ds, cfg, seed, true);
}

Episode build_episode_augment_only(const Dataset& ds, const EpisodeConfig& cfg, std::uint64_t seed) {
  return build_synthetic(ds, cfg, seed, false);
}

Image reconstruct_query_source(const Dataset& ds, const QueryRecord& rec) {
  return apply_chain(ds.image(rec.source), specs_of(rec.augs), rec.chain_seed);
}

namespace {

Episode sample_labeled_episode(const Dataset& ds, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                               std::uint64_t seed, bool eligible_only, const char* variant) {
  require(n_way >= 1 && k_shot >= 1 && n_query >= 1, ErrorKind::contract, "episode N, K, Q must be at least 1");
  require(ds.labeled, ErrorKind::contract, "labeled episodes need a labeled dataset ('" + ds.id + "' is unlabeled)");
  const auto groups = ds.by_class();
  const std::size_t per_class_queries = (n_query + n_way - 1) / n_way;
  std::vector<std::size_t> classes;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].empty()) continue;
    if (eligible_only && groups[c].size() < k_shot + per_class_queries) continue;
    classes.push_back(c);
  }
  require(classes.size() >= n_way, ErrorKind::contract,
          "dataset '" + ds.id + "' has " + std::to_string(classes.size()) +
              (eligible_only ? " sufficiently large" : "") + " classes; episode needs " + std::to_string(n_way));

  Rng rng(derive_seed(seed, kTestTag));
  const auto picks = draw_without_replacement(classes.size(), n_way, rng);
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  auto& prov = ep.provenance;
  prov.variant = variant;
  prov.dataset_id = ds.id;
  prov.seed = seed;
  for (std::size_t n = 0; n < n_way; ++n) {
    const std::size_t cls = classes[picks[n]];
    const auto& members = groups[cls];
    require(members.size() >= k_shot + per_class_queries, ErrorKind::contract,
            "class " + std::to_string(cls) + " of dataset '" + ds.id + "' has " + std::to_string(members.size()) +
                " items; needs K + ceil(Q/N) = " + std::to_string(k_shot + per_class_queries));
    prov.class_map.push_back(static_cast<int>(cls));
    const std::size_t quota = n_query / n_way + (n < n_query % n_way ? 1 : 0);
    const auto order = draw_without_replacement(members.size(), k_shot + quota, rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
      const std::size_t item = members[order[i]];
      if (i < k_shot) {
        ep.support.push_back(ds.image(item));
        ep.support_labels.push_back(static_cast<int>(n));
        prov.support_items.push_back(item);
      } else {
        ep.query.push_back(ds.image(item));
        ep.query_labels.push_back(static_cast<int>(n));
        prov.query_items.push_back(item);
      }
    }
  }
  return ep;
}

}  // namespace

Episode build_test_episode(const Dataset& ds, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                           std::uint64_t seed) {
  return sample_labeled_episode(ds, n_way, k_shot, n_query, seed, false, "test");
}

Episode build_pseudolabel_episode(const Dataset& clustered, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                                  std::uint64_t seed) {
  return sample_labeled_episode(clustered, n_way, k_shot, n_query, seed, true, "kmeans");
}

double collision_probability(std::uint64_t C, std::uint64_t m, std::uint64_t N) {
  require(C >= 1 && m >= 1 && N >= 1, ErrorKind::contract, "collision_probability: C, m, N must be at least 1");
  if (N > C) return 1.0;
  // P(no collision) = prod_{i<N} (C - i) m / (Cm - i) = prod (1 - i (m-1) / (Cm - i))
  const long double total = static_cast<long double>(C) * static_cast<long double>(m);
  long double log_free = 0.0L;
  for (std::uint64_t i = 1; i < N; ++i)
    log_free += std::log1p(-static_cast<long double>(i) * static_cast<long double>(m - 1) / (total - i));
  return std::clamp(static_cast<double>(-std::expm1(log_free)), 0.0, 1.0);
}

double sample_lambda(const MixConfig& mix, std::uint64_t seed) {
  mix.validate();
  Rng rng(seed);
  for (int attempt = 0; attempt < 1024; ++attempt) {
    const double x = rng.beta(mix.alpha, mix.beta);
    if (x > mix.lo && x < mix.hi) return x;
  }
  const double f_lo = boost::math::ibeta(mix.alpha, mix.beta, mix.lo);
  const double f_hi = boost::math::ibeta(mix.alpha, mix.beta, mix.hi);
  double x = 0.5 * (mix.lo + mix.hi);
  if (f_hi > f_lo) x = boost::math::ibeta_inv(mix.alpha, mix.beta, f_lo + (f_hi - f_lo) * rng.uniform());
  const double inside_lo = std::nextafter(mix.lo, mix.hi), inside_hi = std::nextafter(mix.hi, mix.lo);
  return std::clamp(x, inside_lo, inside_hi);
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

KMeansResult kmeans_pseudolabels(std::span<const Tensor> points, std::size_t k, std::size_t iters,
                                 std::uint64_t seed) {
  require(k >= 2, ErrorKind::contract, "kmeans: k must be at least 2");
  require(iters >= 1, ErrorKind::contract, "kmeans: iters must be at least 1");
  require(points.size() >= k, ErrorKind::contract,
          "kmeans: " + std::to_string(points.size()) + " points for k = " + std::to_string(k));
  const std::size_t dim = points.front().size();
  for (const auto& p : points) require(p.size() == dim, ErrorKind::dimension, "kmeans: embeddings differ in dimension");

  Rng rng(derive_seed(seed, stream_tag("kmeans")));
  KMeansResult res;
  for (std::size_t i : draw_without_replacement(points.size(), k, rng)) res.centroids.push_back(points[i]);
  res.labels.assign(points.size(), -1);

  for (std::size_t it = 0; it < iters; ++it) {
    bool changed = false;
    double inertia = 0.0;
    std::vector<double> cost(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(points[i].data(), res.centroids[c].data());
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      if (res.labels[i] != best) changed = true;
      res.labels[i] = best;
      cost[i] = best_d;
      inertia += best_d;
    }
    res.inertia.push_back(inertia);
    res.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      auto& s = sums[static_cast<std::size_t>(res.labels[i])];
      const auto p = points[i].data();
      for (std::size_t d = 0; d < dim; ++d) s[d] += p[d];
      counts[static_cast<std::size_t>(res.labels[i])]++;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto dst = res.centroids[c].data();
      for (std::size_t d = 0; d < dim; ++d) dst[d] = sums[c][d] / static_cast<double>(counts[c]);
    }
    // empty clusters take the point farthest from its centroid
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < points.size(); ++i)
        if (cost[i] > cost[far] && counts[static_cast<std::size_t>(res.labels[i])] > 1) far = i;
      counts[static_cast<std::size_t>(res.labels[far])]--;
      counts[c] = 1;
      res.labels[far] = static_cast<int>(c);
      cost[far] = 0.0;
      auto dst = res.centroids[c].data();
      const auto src = points[far].data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return res;
}

std::size_t multi_dataset_sample(std::size_t n_datasets, std::uint64_t seed) {
  require(n_datasets >= 1, ErrorKind::contract, "multi_dataset_sample: empty dataset list");
  Rng rng(derive_seed(seed, stream_tag("dataset")));
  return static_cast<std::size_t>(rng.uniform_int(n_datasets));
}

std::size_t multi_dataset_sample(std::span<const Dataset> datasets, std::uint64_t seed) {
  return multi_dataset_sample(datasets.size(), seed);
}

namespace {

json aug_list(const std::vector<AugKind>& kinds) {
  json a = json::array();
  for (AugKind k : kinds) a.push_back(std::string(aug_name(k)));
  return a;
}

std::vector<AugKind> aug_list_from(const json& a) {
  std::vector<AugKind> out;
  for (const auto& s : a) {
    const auto k = aug_from_name(s.get<std::string>());
    require(k.has_value(), ErrorKind::io, "unknown augmentation name in episode bundle");
    out.push_back(*k);
  }
  return out;
}

}  // namespace

cmlt::Bundle episode_to_bundle(const Episode& ep) {
  cmlt::Bundle b;
  const auto& p = ep.provenance;
  json h;
  h["kind"] = "episode";
  h["n_way"] = ep.n_way;
  h["k_shot"] = ep.k_shot;
  h["n_query"] = ep.n_query;
  h["support_labels"] = ep.support_labels;
  h["query_labels"] = ep.query_labels;
  json pj;
  pj["variant"] = p.variant;
  pj["dataset_id"] = p.dataset_id;
  pj["seed"] = p.seed;
  pj["bases"] = p.bases;
  pj["class_map"] = p.class_map;
  pj["support_items"] = p.support_items;
  pj["query_items"] = p.query_items;
  pj["warnings"] = p.warnings;
  pj["support"] = json::array();
  for (const auto& s : p.support)
    pj["support"].push_back({{"source", s.source}, {"augs", aug_list(s.augs)}, {"chain_seed", s.chain_seed}});
  pj["query"] = json::array();
  for (const auto& q : p.query) {
    json j{{"base", q.base}, {"source", q.source}, {"augs", aug_list(q.augs)}, {"chain_seed", q.chain_seed}};
    if (q.partner) j["partner"] = *q.partner;
    if (q.lambda) j["lambda"] = *q.lambda;
    if (q.rect) j["rect"] = {q.rect->top, q.rect->left, q.rect->height, q.rect->width};
    pj["query"].push_back(j);
  }
  h["provenance"] = pj;
  b.header = h;
  for (std::size_t i = 0; i < ep.support.size(); ++i) b.add("support." + std::to_string(i), image_to_tensor(ep.support[i]));
  for (std::size_t i = 0; i < ep.query.size(); ++i) b.add("query." + std::to_string(i), image_to_tensor(ep.query[i]));
  return b;
}

Episode episode_from_bundle(const cmlt::Bundle& b) {
  Episode ep;
  try {
    const json& h = b.header;
    require(h.value("kind", "") == "episode", ErrorKind::io, "bundle is not an episode");
    ep.n_way = h.at("n_way").get<std::size_t>();
    ep.k_shot = h.at("k_shot").get<std::size_t>();
    ep.n_query = h.at("n_query").get<std::size_t>();
    ep.support_labels = h.at("support_labels").get<std::vector<int>>();
    ep.query_labels = h.at("query_labels").get<std::vector<int>>();
    const json& pj = h.at("provenance");
    auto& p = ep.provenance;
    p.variant = pj.at("variant").get<std::string>();
    p.dataset_id = pj.at("dataset_id").get<std::string>();
    p.seed = pj.at("seed").get<std::uint64_t>();
    p.bases = pj.at("bases").get<std::vector<std::size_t>>();
    p.class_map = pj.at("class_map").get<std::vector<int>>();
    p.support_items = pj.at("support_items").get<std::vector<std::size_t>>();
    p.query_items = pj.at("query_items").get<std::vector<std::size_t>>();
    p.warnings = pj.at("warnings").get<std::vector<std::string>>();
    for (const auto& s : pj.at("support"))
      p.support.push_back({s.at("source").get<std::size_t>(), aug_list_from(s.at("augs")), s.at("chain_seed").get<std::uint64_t>()});
    for (const auto& q : pj.at("query")) {
      QueryRecord r;
      r.base = q.at("base").get<std::size_t>();
      r.source = q.at("source").get<std::size_t>();
      r.augs = aug_list_from(q.at("augs"));
      r.chain_seed = q.at("chain_seed").get<std::uint64_t>();
      if (q.contains("partner")) r.partner = q["partner"].get<std::size_t>();
      if (q.contains("lambda")) r.lambda = q["lambda"].get<double>();
      if (q.contains("rect")) {
        const auto v = q["rect"].get<std::vector<std::size_t>>();
        r.rect = PatchRect{v.at(0), v.at(1), v.at(2), v.at(3)};
      }
      p.query.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, std::string("malformed episode bundle: ") + e.what());
  }
  for (std::size_t i = 0; i < ep.support_labels.size(); ++i)
    ep.support.push_back(image_from_tensor(b.get("support." + std::to_string(i))));
  for (std::size_t i = 0; i < ep.query_labels.size(); ++i)
    ep.query.push_back(image_from_tensor(b.get("query." + std::to_string(i))));
  ep.validate();
  return ep;
}

}  // namespace camelu
