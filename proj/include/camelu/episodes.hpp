#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "camelu/augment.hpp"
#include "camelu/cmlt.hpp"
#include "camelu/dataset.hpp"
#include "camelu/mix.hpp"
#include "camelu/tensor.hpp"

namespace camelu {

enum class TaskMode : std::uint8_t { camelu, augment, kmeans };

std::string_view task_mode_name(TaskMode m) noexcept;
TaskMode task_mode_from_name(std::string_view name);

struct EpisodeConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t n_query = 25;
  std::size_t aug_count = 3;
  MixConfig mix;
  // Replaces the sampled lambda while keeping every other draw. Used for
  // equivalence checks against the augment-only builder.
  std::optional<double> fixed_lambda;

  void validate() const;
};

struct SupportRecord {
  std::size_t source = 0;
  std::vector<AugKind> augs;
  std::uint64_t chain_seed = 0;
};

struct QueryRecord {
  std::size_t base = 0;    // pseudo-label, index into the episode's bases
  std::size_t source = 0;  // dataset index of that base
  std::vector<AugKind> augs;
  std::uint64_t chain_seed = 0;
  std::optional<std::size_t> partner;
  std::optional<double> lambda;
  std::optional<PatchRect> rect;
};

struct EpisodeProvenance {
  std::string variant;
  std::string dataset_id;
  std::uint64_t seed = 0;
  std::vector<std::size_t> bases;  // dataset indices of the N base images
  std::vector<SupportRecord> support;
  std::vector<QueryRecord> query;
  // Test episodes: episode label -> original class id.
  std::vector<int> class_map;
  std::vector<std::size_t> support_items;
  std::vector<std::size_t> query_items;
  std::vector<std::string> warnings;
};

struct Episode {
  std::size_t n_way = 0, k_shot = 0, n_query = 0;
  std::vector<Image> support;
  std::vector<int> support_labels;
  std::vector<Image> query;
  std::vector<int> query_labels;
  EpisodeProvenance provenance;

  // Support count N*K with exactly K per label; labels in [0, N).
  void validate() const;
};

Episode build_episode(const Dataset& ds, const EpisodeConfig& cfg, std::uint64_t seed);
Episode build_episode_augment_only(const Dataset& ds, const EpisodeConfig& cfg, std::uint64_t seed);
// Supervised N-way K-shot sampling with class-balanced queries: the first
// Q mod N episode labels get one extra query.
Episode build_test_episode(const Dataset& ds, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                           std::uint64_t seed);

// Episode over cluster pseudo-labels (see relabel): like a test episode but
// drawn only from clusters holding at least K + ceil(Q/N) members.
Episode build_pseudolabel_episode(const Dataset& clustered, std::size_t n_way, std::size_t k_shot, std::size_t n_query,
                                  std::uint64_t seed);

// Rebuilds the augmented base of a synthesized query from its record.
Image reconstruct_query_source(const Dataset& ds, const QueryRecord& rec);

// Probability that N draws without replacement from C classes of m items
// hit some class twice. Returns 1 when N > C.
double collision_probability(std::uint64_t C, std::uint64_t m, std::uint64_t N);

// Beta(alpha, beta) restricted to the open interval (lo, hi) by rejection;
// falls back to inverse-CDF sampling on the same truncated law when the
// interval carries very little mass.
double sample_lambda(const MixConfig& mix, std::uint64_t seed);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<Tensor> centroids;
  std::vector<double> inertia;  // after each assignment step
  std::size_t iterations = 0;
};

KMeansResult kmeans_pseudolabels(std::span<const Tensor> points, std::size_t k, std::size_t iters,
                                 std::uint64_t seed);

std::size_t multi_dataset_sample(std::size_t n_datasets, std::uint64_t seed);
std::size_t multi_dataset_sample(std::span<const Dataset> datasets, std::uint64_t seed);

// Offline inspection format: JSON header with labels and provenance, one
// tensor per image.
cmlt::Bundle episode_to_bundle(const Episode& ep);
Episode episode_from_bundle(const cmlt::Bundle& b);

}  // namespace camelu
