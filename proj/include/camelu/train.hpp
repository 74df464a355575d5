#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "camelu/dataset.hpp"
#include "camelu/episodes.hpp"
#include "camelu/model.hpp"
#include "camelu/optim.hpp"

namespace camelu {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t episodes_per_epoch = 200;
  EpisodeConfig episode;
  TaskMode task_mode = TaskMode::camelu;
  // total_steps == 0 means epochs * episodes_per_epoch.
  LrSchedule schedule{1e-3, 1e-5, 200, 0};
  std::uint64_t seed = 0;
  std::vector<std::string> train_datasets;
  std::vector<std::string> val_datasets;
  std::size_t val_episodes = 100;
  std::size_t val_n_way = 5, val_k_shot = 1, val_n_query = 25;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  std::size_t kmeans_k = 50, kmeans_iters = 50;
  std::size_t threads = 1;
  std::size_t prefetch = 4;
  // Extractor image size 0 is filled in from the first training dataset.
  ModelConfig model = default_model();

  static ModelConfig default_model();
  std::uint64_t total_steps() const;
  LrSchedule resolved_schedule() const;
  void validate() const;
};

// Flat "key = value" text, one setting per line, '#' starts a comment.
// Repeated list keys (train.dataset, val.dataset) append. Errors are config
// errors naming the key and line.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
// Applies one override; line 0 means a command-line flag.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value, std::size_t line = 0);
// Every key with its resolved value; parse(format(cfg)) == cfg.
std::string format_train_config(const TrainConfig& cfg);
bool operator==(const TrainConfig& a, const TrainConfig& b);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> accuracy;
  std::vector<double> stderr_;
  double seconds = 0.0;
};

struct MetricsLog {
  std::vector<std::string> val_names;
  std::vector<EpochRecord> records;

  void append(EpochRecord r);
  // epoch,loss,lr,acc_<name>,stderr_<name>,... Wall-clock is left out so the
  // file is reproducible; it goes to timing_csv().
  std::string to_csv() const;
  std::string timing_csv() const;
  static MetricsLog from_csv(const std::string& text);
  std::vector<double> accuracy_series(std::size_t val_index = 0) const;
};

// out[t] = in[t] - in[0]
std::vector<double> relative_accuracy(std::span<const double> series);

// Index of the largest logit in a row; ties go to the lowest index.
std::size_t argmax_row(const Tensor& logits, std::size_t row);

// Mean cross-entropy over the episode's queries.
double episode_loss(const CameluModel& m, const Episode& ep, const EpisodeEmbedding& emb);
double loss_from_logits(const Tensor& logits, std::span<const int> labels);
// Fraction of queries whose argmax equals the label.
double episode_accuracy(const Tensor& logits, std::span<const int> labels);

struct PreparedEpisode {
  Episode episode;
  EpisodeEmbedding embedding;
};

struct EvalResult {
  double mean = 0.0;
  double stderr_ = 0.0;  // sample std / sqrt(n_tasks)
  std::vector<double> per_episode;
  std::uint64_t checksum_before = 0, checksum_after = 0;
  std::size_t tokens = 0;  // sum over episodes of Q * (NK + 1)
};

EvalResult evaluate(const CameluModel& m, const Dataset& ds, std::size_t n_tasks, std::size_t n_way, std::size_t k_shot,
                    std::size_t n_query, std::uint64_t seed, std::size_t threads = 1);
EvalResult evaluate_prepared(const CameluModel& m, std::span<const PreparedEpisode> episodes, std::size_t threads = 1);

struct TrainState {
  CameluModel model;
  AdamState adam;
  MetricsLog log;
  std::size_t epochs_done = 0;
};

struct TrainHooks {
  // Called after each epoch with the record just appended.
  std::function<void(const EpochRecord&)> on_epoch;
  // Directory for metrics.csv, timing.csv, resolved config and checkpoints.
  std::optional<std::filesystem::path> out_dir;
};

// The step-0 model of a run: image size resolved from the first training
// set, parameters from the run seed, extractor standardization fitted.
CameluModel initial_model(const TrainConfig& cfg, std::span<const Dataset> train_sets);

TrainState train(const TrainConfig& cfg, std::span<const Dataset> train_sets, std::span<const Dataset> val_sets,
                 const TrainHooks& hooks = {}, std::optional<TrainState> resume = std::nullopt);

// Loads datasets from the configured paths.
TrainState train_from_config(const TrainConfig& cfg, const TrainHooks& hooks = {},
                             const std::optional<std::filesystem::path>& resume_checkpoint = std::nullopt);

// Model plus optimizer state, epoch counter, config and metrics.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);
TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* cfg_out = nullptr);

}  // namespace camelu
