#include "camelu/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "camelu/cmlt.hpp"
#include "camelu/error.hpp"
#include "camelu/rng.hpp"

namespace camelu {

using nlohmann::json;

void Dataset::validate() const {
  require(!items.empty(), ErrorKind::contract, "dataset '" + id + "' has no items");
  const Image& first = items.front().image;
  for (const auto& it : items) {
    require(it.image.same_dims(first), ErrorKind::contract,
            "dataset '" + id + "': item '" + it.id + "' differs in image dimensions");
    if (labeled) {
      require(it.label.has_value(), ErrorKind::contract, "dataset '" + id + "': item '" + it.id + "' has no label");
      require(*it.label >= 0, ErrorKind::contract, "dataset '" + id + "': negative label on '" + it.id + "'");
    }
  }
  if (labeled) require(class_count.value_or(1) >= 1, ErrorKind::contract, "labeled dataset needs C >= 1");
}

std::vector<std::vector<std::size_t>> Dataset::by_class() const {
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].label) continue;
    const auto c = static_cast<std::size_t>(*items[i].label);
    if (groups.size() <= c) groups.resize(c + 1);
    groups[c].push_back(i);
  }
  return groups;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir / "images");
  json m;
  m["id"] = ds.id;
  m["labeled"] = ds.labeled;
  if (ds.class_count) m["class_count"] = *ds.class_count;
  if (ds.per_class_count) m["per_class_count"] = *ds.per_class_count;
  m["items"] = json::array();
  for (const auto& it : ds.items) {
    const std::string file = it.file.empty() ? "images/" + it.id + ".cmlt" : it.file;
    json j{{"id", it.id}, {"file", file}};
    if (it.label) j["label"] = *it.label;
    m["items"].push_back(j);
    cmlt::write_tensor(dir / file, image_to_tensor(it.image));
  }
  std::ofstream out(dir / "manifest.json");
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + (dir / "manifest.json").string());
  out << m.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    fail(ErrorKind::io, path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.id = m.value("id", dir.filename().string());
    ds.labeled = m.value("labeled", false);
    if (m.contains("class_count")) ds.class_count = m["class_count"].get<std::size_t>();
    if (m.contains("per_class_count")) ds.per_class_count = m["per_class_count"].get<std::size_t>();
    for (const auto& j : m.at("items")) {
      DatasetItem it;
      it.id = j.at("id").get<std::string>();
      it.file = j.at("file").get<std::string>();
      if (j.contains("label") && !j["label"].is_null()) it.label = j["label"].get<int>();
      it.image = image_from_tensor(cmlt::read_tensor(dir / it.file));
      ds.items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::io, path.string() + ": malformed manifest: " + e.what());
  }
  ds.validate();
  return ds;
}

Dataset relabel(const Dataset& ds, const std::vector<int>& labels, std::size_t class_count) {
  require(labels.size() == ds.size(), ErrorKind::dimension, "relabel: label count differs from item count");
  Dataset out = ds;
  out.labeled = true;
  out.class_count = class_count;
  out.per_class_count.reset();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < class_count, ErrorKind::index,
            "relabel: label out of range");
    out.items[i].label = labels[i];
  }
  return out;
}

Dataset strip_labels(const Dataset& ds) {
  Dataset out = ds;
  out.labeled = false;
  out.class_count.reset();
  out.per_class_count.reset();
  for (auto& it : out.items) it.label.reset();
  return out;
}

namespace {

constexpr std::size_t kShapeCount = 8;

// Inside test in the shape's own frame, unit radius.
bool inside_shape(std::size_t shape, double u, double v) {
  const double r = std::hypot(u, v);
  switch (shape) {
    case 0: return r < 1.0;
    case 1: return std::max(std::abs(u), std::abs(v)) < 0.8;
    case 2: return v < 0.8 && v > -0.9 && std::abs(u) < (0.8 - v) * 0.6;
    case 3: return r < 1.0 && r > 0.55;
    case 4: return (std::abs(u) < 0.3 && std::abs(v) < 1.0) || (std::abs(v) < 0.3 && std::abs(u) < 1.0);
    case 5: return std::abs(u) + std::abs(v) < 1.0;
    case 6: return std::abs(u) < 0.9 && std::abs(v) < 0.9 && static_cast<int>(std::floor((v + 0.9) * 2.8)) % 2 == 0;
    default: return r < 1.0 && v < 0.1;
  }
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double hh = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int i = 0; i < 3; ++i) rgb[i] = table[sector][i];
}

Image render_item(std::size_t cls, std::size_t size, std::size_t channels, Rng& rng) {
  const double n = static_cast<double>(size);
  const std::size_t shape = cls % kShapeCount;
  const double hue = std::fmod(0.1 + static_cast<double>(cls) * 0.6180339887498949, 1.0);
  double colour[3];
  hsv_to_rgb(hue, 0.85, 0.95, colour);
  if (channels == 1) colour[0] = 0.55 + 0.4 * std::fmod(static_cast<double>(cls / kShapeCount) * 0.618, 1.0);
  const double shade = rng.uniform(0.88, 1.0);

  const double cy = n / 2 + rng.uniform(-0.12, 0.12) * n;
  const double cx = n / 2 + rng.uniform(-0.12, 0.12) * n;
  const double radius = n * 0.3 * rng.uniform(0.8, 1.15);
  const double angle = rng.uniform(-0.3, 0.3);
  const double ca = std::cos(angle), sa = std::sin(angle);

  const double bg = rng.uniform(0.08, 0.3);
  const double fy = rng.uniform(0.5, 3.0), fx = rng.uniform(0.5, 3.0), ph = rng.uniform(0.0, 2 * std::numbers::pi);

  Image img(size, size, channels);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      // 2 x 2 supersampling for soft edges
      double cover = 0.0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double py = y + 0.25 + 0.5 * sy - cy, px = x + 0.25 + 0.5 * sx - cx;
          const double u = (ca * px + sa * py) / radius, v = (-sa * px + ca * py) / radius;
          cover += inside_shape(shape, u, v) ? 0.25 : 0.0;
        }
      const double texture =
          bg + 0.06 * std::sin(2 * std::numbers::pi * (fy * y / n + fx * x / n) + ph) + 0.02 * rng.normal();
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = cover * colour[c] * shade + (1 - cover) * texture;
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

}  // namespace

Dataset gen_synthetic_dataset(std::size_t n_classes, std::size_t per_class, std::size_t size, std::size_t channels,
                              std::uint64_t seed, std::size_t first_class) {
  require(n_classes >= 1 && per_class >= 1 && size >= 1, ErrorKind::contract,
          "gen_synthetic_dataset: counts and size must be positive");
  require(size >= 8, ErrorKind::contract, "gen_synthetic_dataset: size must be at least 8 to render templates");
  require(channels == 1 || channels == 3, ErrorKind::contract, "gen_synthetic_dataset: channels must be 1 or 3");
  Dataset ds;
  ds.id = "synthetic";
  ds.labeled = true;
  ds.class_count = n_classes;
  ds.per_class_count = per_class;
  ds.items.reserve(n_classes * per_class);
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t cls = first_class + c;
      Rng rng(derive_seed(seed, cls, i));
      DatasetItem it;
      char name[48];
      std::snprintf(name, sizeof name, "c%03zu-%05zu", cls, i);
      it.id = name;
      it.file = "images/" + it.id + ".cmlt";
      it.label = static_cast<int>(c);
      it.image = render_item(cls, size, channels, rng);
      ds.items.push_back(std::move(it));
    }
  return ds;
}

}  // namespace camelu
