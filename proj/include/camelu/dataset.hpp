#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "camelu/image.hpp"

namespace camelu {

struct DatasetItem {
  std::string id;
  std::string file;  // path relative to the dataset directory
  std::optional<int> label;
  Image image;
};

struct Dataset {
  std::string id;
  std::vector<DatasetItem> items;
  bool labeled = false;
  std::optional<std::size_t> class_count;
  std::optional<std::size_t> per_class_count;

  std::size_t size() const noexcept { return items.size(); }
  const Image& image(std::size_t i) const { return items.at(i).image; }

  // Labels present on every item when labeled; all images share height,
  // width and channel count. Contract error otherwise.
  void validate() const;

  // Item indices grouped by label, indexed by label value.
  std::vector<std::vector<std::size_t>> by_class() const;
};

// Directory layout: manifest.json plus one CMLT tensor per item.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Copy with labels replaced, e.g. by cluster assignments.
Dataset relabel(const Dataset& ds, const std::vector<int>& labels, std::size_t class_count);
// Same items with the labels dropped.
Dataset strip_labels(const Dataset& ds);

// Procedural classes: class c is a canonical shape with its own colour,
// drawn at a jittered position, scale and angle over a textured background.
// Classes [first_class, first_class + n_classes) are rendered, so disjoint
// ranges give disjoint class sets. Labels are stored relative to first_class.
Dataset gen_synthetic_dataset(std::size_t n_classes, std::size_t per_class, std::size_t size,
                              std::size_t channels, std::uint64_t seed, std::size_t first_class = 0);

}  // namespace camelu
