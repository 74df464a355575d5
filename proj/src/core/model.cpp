#include "camelu/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "camelu/error.hpp"
#include "camelu/rng.hpp"

namespace camelu {

using nlohmann::json;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string_view extractor_kind_name(ExtractorKind k) noexcept {
  switch (k) {
    case ExtractorKind::pixel_flatten: return "pixel_flatten";
    case ExtractorKind::frozen_randconv: return "frozen_randconv";
    case ExtractorKind::external_table: return "external_table";
  }
  return "?";
}

ExtractorKind extractor_kind_from_name(std::string_view name) {
  if (name == "pixel_flatten") return ExtractorKind::pixel_flatten;
  if (name == "frozen_randconv") return ExtractorKind::frozen_randconv;
  if (name == "external_table") return ExtractorKind::external_table;
  fail(ErrorKind::config, "unknown extractor kind '" + std::string(name) + "'");
}

std::size_t ExtractorSpec::out_dim() const {
  switch (kind) {
    case ExtractorKind::pixel_flatten: return image_height * image_width * image_channels;
    case ExtractorKind::frozen_randconv: return 2 * conv_channels;
    case ExtractorKind::external_table: return table_dim;
  }
  return 0;
}

void ExtractorSpec::validate() const {
  require(image_height >= 1 && image_width >= 1, ErrorKind::config, "extractor image size must be positive");
  require(image_channels == 1 || image_channels == 3, ErrorKind::config, "extractor channels must be 1 or 3");
  if (kind == ExtractorKind::frozen_randconv)
    require(conv_layers >= 1 && conv_channels >= conv_layers, ErrorKind::config,
            "frozen_randconv needs layers >= 1 and channels >= layers");
  if (kind == ExtractorKind::external_table)
    require(table_dim >= 1, ErrorKind::config, "external_table needs a positive table_dim");
}

json to_json(const ExtractorSpec& s) {
  return {{"kind", extractor_kind_name(s.kind)},
          {"image_height", s.image_height},
          {"image_width", s.image_width},
          {"image_channels", s.image_channels},
          {"conv_layers", s.conv_layers},
          {"conv_channels", s.conv_channels},
          {"seed", s.seed},
          {"table_file", s.table_file},
          {"table_dim", s.table_dim},
          {"normalize", s.normalize}};
}

ExtractorSpec extractor_spec_from_json(const json& j) {
  ExtractorSpec s;
  s.kind = extractor_kind_from_name(j.at("kind").get<std::string>());
  s.image_height = j.value("image_height", s.image_height);
  s.image_width = j.value("image_width", s.image_width);
  s.image_channels = j.value("image_channels", s.image_channels);
  s.conv_layers = j.value("conv_layers", s.conv_layers);
  s.conv_channels = j.value("conv_channels", s.conv_channels);
  s.seed = j.value("seed", s.seed);
  s.table_file = j.value("table_file", s.table_file);
  s.table_dim = j.value("table_dim", s.table_dim);
  s.normalize = j.value("normalize", s.normalize);
  return s;
}

void write_embedding_table(const std::filesystem::path& path, const EmbeddingTable& table) {
  require(table.vectors.rank() == 2 && table.vectors.rows() == table.ids.size(), ErrorKind::dimension,
          "embedding table: one row per id expected");
  cmlt::Bundle b;
  b.header = {{"format", "camelu-embeddings"}, {"ids", table.ids}};
  b.add("embeddings", table.vectors);
  cmlt::write_bundle(path, b);
}

EmbeddingTable read_embedding_table(const std::filesystem::path& path) {
  const cmlt::Bundle b = cmlt::read_bundle(path);
  EmbeddingTable t;
  try {
    t.ids = b.header.at("ids").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::io, path.string() + ": embedding table header lacks ids");
  }
  t.vectors = b.get("embeddings");
  require(t.vectors.rank() == 2 && t.vectors.rows() == t.ids.size(), ErrorKind::io,
          path.string() + ": embedding rows differ from id count");
  return t;
}

FeatureExtractor::FeatureExtractor(ExtractorSpec spec) : spec_(std::move(spec)) {
  if (spec_.kind == ExtractorKind::external_table) {
    require(!spec_.table_file.empty(), ErrorKind::config, "external_table extractor needs a table_file");
    EmbeddingTable t = read_embedding_table(spec_.table_file);
    *this = FeatureExtractor(spec_, std::move(t));
    return;
  }
  spec_.validate();
  out_dim_ = spec_.out_dim();
  if (spec_.kind == ExtractorKind::frozen_randconv) {
    Rng rng(derive_seed(spec_.seed, stream_tag("randconv")));
    std::size_t in = spec_.image_channels;
    for (std::size_t l = 0; l < spec_.conv_layers; ++l) {
      ConvLayer layer;
      layer.in = in;
      layer.out = std::max<std::size_t>(1, spec_.conv_channels * (l + 1) / spec_.conv_layers);
      layer.weight.resize(layer.out * in * 9);
      const double std_dev = std::sqrt(2.0 / static_cast<double>(in * 9));
      for (double& w : layer.weight) w = std_dev * rng.normal();
      conv_.push_back(std::move(layer));
      in = conv_.back().out;
    }
  }
}

FeatureExtractor::FeatureExtractor(ExtractorSpec spec, EmbeddingTable table)
    : spec_(std::move(spec)), table_(std::move(table)) {
  require(spec_.kind == ExtractorKind::external_table, ErrorKind::config, "table given to a non-table extractor");
  if (spec_.table_dim == 0) spec_.table_dim = table_.dim();
  require(spec_.table_dim == table_.dim(), ErrorKind::config, "external_table dimension differs from table_dim");
  spec_.validate();
  out_dim_ = spec_.table_dim;
  for (std::size_t i = 0; i < table_.ids.size(); ++i) index_[table_.ids[i]] = i;
}

std::vector<double> FeatureExtractor::embed_one(const Image& img) const {
  std::vector<double> row = raw_one(img);
  finish_row(row);
  return row;
}

void FeatureExtractor::finish_row(std::span<double> row) const {
  if (spec_.kind == ExtractorKind::frozen_randconv && spec_.normalize) {
    double n2 = 0.0;
    for (double v : row) n2 += v * v;
    if (n2 > 0.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (double& v : row) v *= inv;
    }
  }
  if (standardized())
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean_[j]) * scale_[j];
}

void FeatureExtractor::fit_standardizer(std::span<const Image> images) {
  require(spec_.kind != ExtractorKind::external_table, ErrorKind::contract,
          "fit_standardizer needs pixels; use set_standardizer for tables");
  require(!images.empty(), ErrorKind::contract, "fit_standardizer: no images");
  has_standardizer_ = false;
  const Tensor f = embed(images);
  const std::size_t n = f.rows(), d = out_dim_;
  Tensor mean({d}), scale({d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += f[r * d + j];
  for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) scale[j] += (f[r * d + j] - mean[j]) * (f[r * d + j] - mean[j]);
  // Dead channels stay near zero instead of blowing up.
  for (std::size_t j = 0; j < d; ++j) scale[j] = 1.0 / std::sqrt(scale[j] / static_cast<double>(n) + 1e-10);
  set_standardizer(std::move(mean), std::move(scale));
}

void FeatureExtractor::set_standardizer(Tensor mean, Tensor scale) {
  require(mean.size() == out_dim_ && scale.size() == out_dim_, ErrorKind::dimension,
          "standardizer needs " + std::to_string(out_dim_) + " entries");
  for (double v : scale.data()) require(std::isfinite(v) && v > 0.0, ErrorKind::numeric, "standardizer scale must be positive");
  mean_ = std::move(mean);
  scale_ = std::move(scale);
  has_standardizer_ = true;
}

std::vector<double> FeatureExtractor::raw_one(const Image& img) const {
  require(img.height == spec_.image_height && img.width == spec_.image_width && img.channels == spec_.image_channels,
          ErrorKind::dimension,
          "image " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" + std::to_string(img.channels) +
              " does not match the extractor input " + std::to_string(spec_.image_height) + "x" +
              std::to_string(spec_.image_width) + "x" + std::to_string(spec_.image_channels));
  if (spec_.kind == ExtractorKind::pixel_flatten) return img.pixels;

  std::size_t h = img.height, w = img.width, c = img.channels;
  std::vector<double> act(img.pixels.size());
  for (std::size_t i = 0; i < act.size(); ++i) act[i] = img.pixels[i] - 0.5;
  for (const auto& layer : conv_) {
    RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(h * w), static_cast<Eigen::Index>(c * 9));
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double* row = cols.data() + (y * w + x) * c * 9;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            const double* src = act.data() + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * c;
            const std::size_t tap = static_cast<std::size_t>((dy + 1) * 3 + (dx + 1));
            for (std::size_t ch = 0; ch < c; ++ch) row[ch * 9 + tap] = src[ch];
          }
      }
    Eigen::Map<const RowMatrix> weight(layer.weight.data(), static_cast<Eigen::Index>(layer.out),
                                       static_cast<Eigen::Index>(c * 9));
    RowMatrix out = (cols * weight.transpose()).cwiseMax(0.0);
    c = layer.out;
    if (h >= 2 && w >= 2) {
      const std::size_t ph = h / 2, pw = w / 2;
      std::vector<double> pooled(ph * pw * c, 0.0);
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t b = 0; b < 2; ++b) s += out(static_cast<Eigen::Index>((2 * y + a) * w + 2 * x + b), static_cast<Eigen::Index>(ch));
            pooled[(y * pw + x) * c + ch] = 0.25 * s;
          }
      act = std::move(pooled);
      h = ph;
      w = pw;
    } else {
      act.assign(out.data(), out.data() + out.size());
    }
  }
  std::vector<double> feat(2 * c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, mx = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < h * w; ++p) {
      s += act[p * c + ch];
      mx = std::max(mx, act[p * c + ch]);
    }
    feat[ch] = s / static_cast<double>(h * w);
    feat[c + ch] = mx;
  }
  return feat;
}

Tensor FeatureExtractor::embed(std::span<const Image> images) const {
  require(spec_.kind != ExtractorKind::external_table, ErrorKind::lookup,
          "external_table extractor embeds by image id, not pixels");
  require(!images.empty(), ErrorKind::contract, "embed: no images");
  Tensor out({images.size(), out_dim_});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto row = embed_one(images[i]);
    std::copy(row.begin(), row.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * out_dim_));
  }
  return out;
}

Tensor FeatureExtractor::embed_ids(std::span<const std::string> ids) const {
  require(spec_.kind == ExtractorKind::external_table, ErrorKind::contract, "embed_ids needs an external_table extractor");
  require(!ids.empty(), ErrorKind::contract, "embed_ids: no ids");
  Tensor out({ids.size(), out_dim_});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = index_.find(ids[i]);
    require(it != index_.end(), ErrorKind::lookup, "embedding table has no entry for image id '" + ids[i] + "'");
    const auto src = table_.vectors.data().subspan(it->second * out_dim_, out_dim_);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * out_dim_));
    finish_row(out.data().subspan(i * out_dim_, out_dim_));
  }
  return out;
}

EpisodeEmbedding embed_episode(const FeatureExtractor& fx, const Episode& ep, const Dataset* ds) {
  if (fx.spec().kind != ExtractorKind::external_table) return {fx.embed(ep.support), fx.embed(ep.query)};
  const auto& p = ep.provenance;
  require(ds != nullptr, ErrorKind::lookup, "external_table embedding needs the source dataset");
  require(p.support_items.size() == ep.support.size() && p.query_items.size() == ep.query.size(), ErrorKind::lookup,
          "external_table embedding needs dataset items; synthesized images have no image id");
  auto ids_of = [&](const std::vector<std::size_t>& items) {
    std::vector<std::string> ids;
    for (std::size_t i : items) ids.push_back(ds->items.at(i).id);
    return ids;
  };
  return {fx.embed_ids(ids_of(p.support_items)), fx.embed_ids(ids_of(p.query_items))};
}

void ModelConfig::validate() const {
  extractor.validate();
  require(n_max >= 1 && d_label >= 1 && layers >= 1 && heads >= 1, ErrorKind::config,
          "model sizes must be positive");
  require(d_model() % heads == 0, ErrorKind::config,
          "d_model " + std::to_string(d_model()) + " not divisible by " + std::to_string(heads) + " heads");
  require(ln_eps > 0.0, ErrorKind::config, "ln_eps must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.d_label = 256;
  c.layers = 8;
  c.heads = 8;
  c.d_ff = 3072;
  c.extractor.kind = ExtractorKind::external_table;
  c.extractor.table_dim = 2048;
  c.extractor.image_height = c.extractor.image_width = 224;
  return c;
}

json to_json(const ModelConfig& c) {
  return {{"n_max", c.n_max},   {"d_label", c.d_label}, {"layers", c.layers},
          {"heads", c.heads},   {"d_ff", c.d_ff},       {"ln_eps", c.ln_eps},
          {"extractor", to_json(c.extractor)}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_max = j.value("n_max", c.n_max);
  c.d_label = j.value("d_label", c.d_label);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  if (j.contains("extractor")) c.extractor = extractor_spec_from_json(j["extractor"]);
  return c;
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model(), f = c.ff_width();
  return c.layers * (4 * d * d + 2 * d * f + 9 * d + f) + c.n_max * c.d_label + c.d_label + d * c.n_max + c.n_max;
}

CameluModel::CameluModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model(), f = cfg_.ff_width();
  auto add = [&](std::string name, Shape shape) {
    index_[name] = names_.size();
    names_.push_back(std::move(name));
    params_.emplace_back(std::move(shape));
  };
  add("class_encoder", {cfg_.n_max, cfg_.d_label});
  add("query_token", {1, cfg_.d_label});
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gamma", {d});
    add(p + "ln1.beta", {d});
    add(p + "qkv.weight", {d, 3 * d});
    add(p + "qkv.bias", {3 * d});
    add(p + "o.weight", {d, d});
    add(p + "o.bias", {d});
    add(p + "ln2.gamma", {d});
    add(p + "ln2.beta", {d});
    add(p + "mlp1.weight", {d, f});
    add(p + "mlp1.bias", {f});
    add(p + "mlp2.weight", {f, d});
    add(p + "mlp2.bias", {d});
  }
  add("projection.weight", {d, cfg_.n_max});
  add("projection.bias", {cfg_.n_max});
}

const FeatureExtractor& CameluModel::extractor() const {
  require(extractor_ != nullptr, ErrorKind::lookup, "model has no feature extractor attached");
  return *extractor_;
}

void CameluModel::set_extractor(std::shared_ptr<const FeatureExtractor> fx) {
  require(fx != nullptr, ErrorKind::contract, "null extractor");
  require(fx->out_dim() == cfg_.extractor.out_dim(), ErrorKind::config, "extractor width differs from the model config");
  extractor_ = std::move(fx);
}

std::size_t CameluModel::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), ErrorKind::lookup, "model has no parameter '" + name + "'");
  return it->second;
}

const Tensor& CameluModel::param(const std::string& name) const { return params_[index_of(name)]; }
Tensor& CameluModel::param(const std::string& name) { return params_[index_of(name)]; }

std::size_t CameluModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

CameluModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  CameluModel m(cfg);
  Rng rng(derive_seed(seed, stream_tag("init")));
  for (std::size_t i = 0; i < m.names_.size(); ++i) {
    const std::string& name = m.names_[i];
    Tensor& t = m.params_[i];
    auto ends_with = [&](std::string_view s) { return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0; };
    if (name == "class_encoder") {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(cfg.n_max));
      for (double& v : t.data()) v = std_dev * rng.normal();
    } else if (name == "query_token" || ends_with(".weight")) {
      for (double& v : t.data()) v = 0.02 * rng.normal();
    } else if (ends_with(".gamma")) {
      for (double& v : t.data()) v = 1.0;
    }
  }
  if (cfg.extractor.kind != ExtractorKind::external_table || !cfg.extractor.table_file.empty())
    m.extractor_ = std::make_shared<const FeatureExtractor>(cfg.extractor);
  return m;
}

std::uint64_t parameter_checksum(const CameluModel& m) {
  std::uint64_t h = 0;
  for (const auto& p : m.params()) h = checksum(p, h);
  return h;
}

Tensor encode_labels(const CameluModel& m, std::span<const int> labels, std::size_t n_way) {
  require(n_way <= m.config().n_max, ErrorKind::config,
          "episode has " + std::to_string(n_way) + " ways; model supports at most " + std::to_string(m.config().n_max));
  const Tensor& table = m.param("class_encoder");
  const std::size_t dl = m.config().d_label;
  Tensor out({labels.size(), dl});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < m.config().n_max, ErrorKind::index,
            "label " + std::to_string(labels[i]) + " outside the class encoder");
    require(static_cast<std::size_t>(labels[i]) < n_way, ErrorKind::index,
            "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(n_way) + ")");
    for (std::size_t c = 0; c < dl; ++c) out.at(i, c) = table.at(static_cast<std::size_t>(labels[i]), c);
  }
  return out;
}

namespace {

std::vector<std::size_t> sequence_rows(std::size_t n_support, std::size_t n_query) {
  std::vector<std::size_t> rows;
  rows.reserve(n_query * (n_support + 1));
  for (std::size_t j = 0; j < n_query; ++j) {
    for (std::size_t s = 0; s < n_support; ++s) rows.push_back(s);
    rows.push_back(n_support + j);
  }
  return rows;
}

void check_episode_inputs(const CameluModel& m, const Tensor& support_emb, std::size_t n_labels, const Tensor& query_emb) {
  const std::size_t D = m.config().extractor.out_dim();
  require(support_emb.rank() == 2 && support_emb.rows() >= 1, ErrorKind::contract, "episode needs at least one support");
  require(support_emb.cols() == D && query_emb.rank() == 2 && query_emb.cols() == D, ErrorKind::contract,
          "embedding width differs from the extractor output " + std::to_string(D));
  require(n_labels == support_emb.rows(), ErrorKind::contract, "one label per support row expected");
}

}  // namespace

SequenceBatch assemble_sequence(const Tensor& support_emb, const Tensor& support_label_emb, const Tensor& query_emb,
                                const CameluModel& m) {
  require(support_label_emb.rank() == 2 && support_label_emb.cols() == m.config().d_label, ErrorKind::contract,
          "label embeddings must be d_label wide");
  check_episode_inputs(m, support_emb, support_label_emb.rows(), query_emb);
  const std::size_t ns = support_emb.rows(), nq = query_emb.rows(), D = support_emb.cols(), dl = m.config().d_label;
  const std::size_t dm = D + dl, T = ns + 1;
  const Tensor& qt = m.param("query_token");
  SequenceBatch b{Tensor({nq * T, dm}), nq, T};
  for (std::size_t j = 0; j < nq; ++j)
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = j * T + t;
      for (std::size_t c = 0; c < D; ++c) b.tokens.at(row, c) = t < ns ? support_emb.at(t, c) : query_emb.at(j, c);
      for (std::size_t c = 0; c < dl; ++c) b.tokens.at(row, D + c) = t < ns ? support_label_emb.at(t, c) : qt.at(0, c);
    }
  return b;
}

std::vector<Var> bind_parameters(Tape& tape, const CameluModel& m, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(m.params().size());
  for (const auto& p : m.params()) vars.push_back(tape.leaf(p, requires_grad));
  return vars;
}

ForwardVars forward_on_tape(Tape& tape, std::span<const Var> params, const CameluModel& m, const Tensor& support_emb,
                            std::span<const int> support_labels, const Tensor& query_emb, std::size_t n_way) {
  const ModelConfig& cfg = m.config();
  require(n_way <= cfg.n_max, ErrorKind::config,
          "episode has " + std::to_string(n_way) + " ways; model supports at most " + std::to_string(cfg.n_max));
  require(params.size() == m.params().size(), ErrorKind::contract, "parameter binding size mismatch");
  check_episode_inputs(m, support_emb, support_labels.size(), query_emb);
  auto P = [&](const std::string& name) { return params[m.index_of(name)]; };

  const std::size_t ns = support_emb.rows(), nq = query_emb.rows(), T = ns + 1;
  std::vector<std::size_t> label_idx(ns);
  for (std::size_t i = 0; i < ns; ++i) {
    require(support_labels[i] >= 0 && static_cast<std::size_t>(support_labels[i]) < n_way, ErrorKind::index,
            "support label " + std::to_string(support_labels[i]) + " outside [0, " + std::to_string(n_way) + ")");
    label_idx[i] = static_cast<std::size_t>(support_labels[i]);
  }
  const std::vector<std::size_t> zeros(nq, 0);

  const Var support_tokens = ad::concat_cols(tape.constant(support_emb), ad::gather_rows(P("class_encoder"), label_idx));
  const Var query_tokens = ad::concat_cols(tape.constant(query_emb), ad::gather_rows(P("query_token"), zeros));
  const auto rows = sequence_rows(ns, nq);
  Var x = ad::gather_rows(ad::concat_rows(support_tokens, query_tokens), rows);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const Var h1 = ad::layer_norm(x, P(p + "ln1.gamma"), P(p + "ln1.beta"), cfg.ln_eps);
    const Var qkv = ad::add_bias(ad::matmul(h1, P(p + "qkv.weight")), P(p + "qkv.bias"));
    const Var att = ad::block_attention(qkv, nq, T, cfg.heads);
    x = ad::add(x, ad::add_bias(ad::matmul(att, P(p + "o.weight")), P(p + "o.bias")));
    const Var h2 = ad::layer_norm(x, P(p + "ln2.gamma"), P(p + "ln2.beta"), cfg.ln_eps);
    const Var mid = ad::gelu(ad::add_bias(ad::matmul(h2, P(p + "mlp1.weight")), P(p + "mlp1.bias")));
    x = ad::add(x, ad::add_bias(ad::matmul(mid, P(p + "mlp2.weight")), P(p + "mlp2.bias")));
  }
  std::vector<std::size_t> last(nq);
  for (std::size_t j = 0; j < nq; ++j) last[j] = j * T + T - 1;
  const Var hidden = ad::gather_rows(x, last);
  const Var full = ad::add_bias(ad::matmul(hidden, P("projection.weight")), P("projection.bias"));
  const Var logits = n_way == cfg.n_max ? full : ad::slice_cols(full, 0, n_way);
  return {logits, hidden};
}

ForwardOutput forward(const CameluModel& m, const Tensor& support_emb, std::span<const int> support_labels,
                      const Tensor& query_emb, std::size_t n_way) {
  Tape tape;
  const auto params = bind_parameters(tape, m, false);
  const ForwardVars v = forward_on_tape(tape, params, m, support_emb, support_labels, query_emb, n_way);
  return {v.logits.value(), v.query_hidden.value()};
}

ForwardOutput forward(const CameluModel& m, const Episode& ep, const EpisodeEmbedding& emb) {
  return forward(m, emb.support, ep.support_labels, emb.query, ep.n_way);
}

cmlt::Bundle model_to_bundle(const CameluModel& m) {
  cmlt::Bundle b;
  b.header = {{"format", "camelu-checkpoint"}, {"config", to_json(m.config())}, {"extractor_seed", m.config().extractor.seed}};
  for (std::size_t i = 0; i < m.names().size(); ++i) b.add(m.names()[i], m.params()[i]);
  if (m.has_extractor() && m.extractor().standardized()) {
    b.add("extractor.mean", m.extractor().standard_mean());
    b.add("extractor.scale", m.extractor().standard_scale());
  }
  return b;
}

CameluModel model_from_bundle(const cmlt::Bundle& b) {
  ModelConfig cfg;
  try {
    require(b.header.value("format", "") == "camelu-checkpoint", ErrorKind::io, "bundle is not a model checkpoint");
    cfg = model_config_from_json(b.header.at("config"));
  } catch (const json::exception& e) {
    fail(ErrorKind::io, std::string("malformed checkpoint header: ") + e.what());
  }
  CameluModel m = init_model(cfg, 0);
  for (std::size_t i = 0; i < m.names().size(); ++i) {
    const Tensor& t = b.get(m.names()[i]);
    require(t.shape() == m.params()[i].shape(), ErrorKind::io,
            "checkpoint tensor '" + m.names()[i] + "' has shape " + shape_string(t.shape()) + ", expected " +
                shape_string(m.params()[i].shape()));
    m.params()[i] = t;
  }
  if (b.contains("extractor.mean") && m.has_extractor()) {
    auto fx = std::make_shared<FeatureExtractor>(m.extractor());
    fx->set_standardizer(b.get("extractor.mean"), b.get("extractor.scale"));
    m.set_extractor(std::move(fx));
  }
  return m;
}

void save_model(const std::filesystem::path& path, const CameluModel& m) { cmlt::write_bundle(path, model_to_bundle(m)); }

CameluModel load_model(const std::filesystem::path& path) { return model_from_bundle(cmlt::read_bundle(path)); }

}  // namespace camelu
