#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "camelu/autodiff.hpp"
#include "camelu/cmlt.hpp"
#include "camelu/dataset.hpp"
#include "camelu/episodes.hpp"
#include "camelu/image.hpp"
#include "camelu/tensor.hpp"

namespace camelu {

enum class ExtractorKind : std::uint8_t { pixel_flatten, frozen_randconv, external_table };

std::string_view extractor_kind_name(ExtractorKind k) noexcept;
ExtractorKind extractor_kind_from_name(std::string_view name);

struct ExtractorSpec {
  ExtractorKind kind = ExtractorKind::frozen_randconv;
  // Expected input raster.
  std::size_t image_height = 32, image_width = 32, image_channels = 3;
  // frozen_randconv: 3x3 conv + ReLU + 2x2 average pool per layer, widths
  // ramping up to conv_channels; global mean and max pooling at the end.
  std::size_t conv_layers = 3, conv_channels = 48;
  std::uint64_t seed = 0;
  // external_table: CMLT bundle of precomputed vectors keyed by image id.
  std::string table_file;
  std::size_t table_dim = 0;
  // frozen_randconv: unit-length rows. Training also fits a fixed
  // per-dimension standardization on unlabeled training images.
  bool normalize = true;

  std::size_t out_dim() const;
  void validate() const;
};

nlohmann::json to_json(const ExtractorSpec& s);
ExtractorSpec extractor_spec_from_json(const nlohmann::json& j);

struct EmbeddingTable {
  std::vector<std::string> ids;
  Tensor vectors;  // ids.size() x dim

  std::size_t dim() const { return vectors.cols(); }
};

void write_embedding_table(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embedding_table(const std::filesystem::path& path);

// Frozen f_psi. Holds no trainable parameters.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ExtractorSpec spec);
  FeatureExtractor(ExtractorSpec spec, EmbeddingTable table);

  const ExtractorSpec& spec() const noexcept { return spec_; }
  std::size_t out_dim() const noexcept { return out_dim_; }

  // Rows follow the input order. Not available for external_table.
  Tensor embed(std::span<const Image> images) const;
  // external_table only; unknown id -> lookup error.
  Tensor embed_ids(std::span<const std::string> ids) const;

  // Fixed affine map (x - mean) * scale applied after the raw features.
  // Fitting reads the images once; the map never changes afterwards.
  void fit_standardizer(std::span<const Image> images);
  void set_standardizer(Tensor mean, Tensor scale);
  bool standardized() const noexcept { return has_standardizer_; }
  const Tensor& standard_mean() const noexcept { return mean_; }
  const Tensor& standard_scale() const noexcept { return scale_; }

 private:
  struct ConvLayer {
    std::size_t in = 0, out = 0;
    std::vector<double> weight;  // out x (in * 9)
  };

  std::vector<double> embed_one(const Image& img) const;
  std::vector<double> raw_one(const Image& img) const;
  void finish_row(std::span<double> row) const;

  ExtractorSpec spec_;
  std::size_t out_dim_ = 0;
  std::vector<ConvLayer> conv_;
  EmbeddingTable table_;
  std::unordered_map<std::string, std::size_t> index_;
  Tensor mean_, scale_;
  bool has_standardizer_ = false;
};

struct EpisodeEmbedding {
  Tensor support;  // NK x out_dim
  Tensor query;    // Q x out_dim
};

// For external_table extractors the dataset supplies the item ids of a test
// episode; synthesized images have no id and are rejected.
EpisodeEmbedding embed_episode(const FeatureExtractor& fx, const Episode& ep, const Dataset* ds = nullptr);

struct ModelConfig {
  std::size_t n_max = 5;
  std::size_t d_label = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_ff = 0;  // 0 means 4 * d_model
  double ln_eps = 1e-5;
  ExtractorSpec extractor;

  std::size_t d_model() const { return extractor.out_dim() + d_label; }
  std::size_t ff_width() const { return d_ff ? d_ff : 4 * d_model(); }
  void validate() const;

  // L=2, h=4, d_label=32, randconv with 96 outputs.
  static ModelConfig desk();
  // L=8, h=8, d_label=256, d_ff=3072, 2048-wide external embeddings.
  static ModelConfig reference();
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Sum over layers of 4 d^2 + 2 d d_ff + 9 d + d_ff, plus the class encoder
// (N_max x d_label), query token (d_label) and projection (d N_max + N_max).
std::size_t expected_parameter_count(const ModelConfig& c);

class CameluModel {
 public:
  CameluModel() = default;
  explicit CameluModel(ModelConfig cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  // Lookup error when the model was built without one (external tables).
  const FeatureExtractor& extractor() const;
  bool has_extractor() const noexcept { return extractor_ != nullptr; }
  void set_extractor(std::shared_ptr<const FeatureExtractor> fx);

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::size_t index_of(const std::string& name) const;
  std::size_t parameter_count() const;

 private:
  friend CameluModel init_model(const ModelConfig& cfg, std::uint64_t seed);

  ModelConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::shared_ptr<const FeatureExtractor> extractor_;
};

CameluModel init_model(const ModelConfig& cfg, std::uint64_t seed);

// Parameter checksum, used to show evaluation leaves the model untouched.
std::uint64_t parameter_checksum(const CameluModel& m);

// Row i is class-encoder row labels[i].
Tensor encode_labels(const CameluModel& m, std::span<const int> labels, std::size_t n_way);

struct SequenceBatch {
  Tensor tokens;  // (Q * T) x d_model, T = NK + 1, query token last
  std::size_t n_seq = 0;
  std::size_t seq_len = 0;
  std::size_t query_position() const { return seq_len - 1; }
};

SequenceBatch assemble_sequence(const Tensor& support_emb, const Tensor& support_label_emb, const Tensor& query_emb,
                                const CameluModel& m);

// Parameters bound to a tape, in CameluModel::names() order.
std::vector<Var> bind_parameters(Tape& tape, const CameluModel& m, bool requires_grad);

struct ForwardVars {
  Var logits;        // Q x N
  Var query_hidden;  // Q x d_model, final-position transformer outputs
};

ForwardVars forward_on_tape(Tape& tape, std::span<const Var> params, const CameluModel& m, const Tensor& support_emb,
                            std::span<const int> support_labels, const Tensor& query_emb, std::size_t n_way);

struct ForwardOutput {
  Tensor logits;
  Tensor query_hidden;
};

ForwardOutput forward(const CameluModel& m, const Tensor& support_emb, std::span<const int> support_labels,
                      const Tensor& query_emb, std::size_t n_way);
ForwardOutput forward(const CameluModel& m, const Episode& ep, const EpisodeEmbedding& emb);

// Checkpoint bundle: header {"format", "config"} plus one tensor per
// parameter and the extractor standardization when fitted. Extra header fields and tensors may be appended by callers.
cmlt::Bundle model_to_bundle(const CameluModel& m);
CameluModel model_from_bundle(const cmlt::Bundle& b);
void save_model(const std::filesystem::path& path, const CameluModel& m);
CameluModel load_model(const std::filesystem::path& path);

}  // namespace camelu
