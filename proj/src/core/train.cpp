#include "camelu/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "camelu/error.hpp"
#include "camelu/numerics.hpp"
#include "camelu/rng.hpp"

namespace camelu {

using nlohmann::json;

ModelConfig TrainConfig::default_model() {
  ModelConfig m = ModelConfig::desk();
  m.extractor.image_height = 0;
  m.extractor.image_width = 0;
  m.extractor.image_channels = 0;
  return m;
}

std::uint64_t TrainConfig::total_steps() const {
  return schedule.total_steps ? schedule.total_steps : static_cast<std::uint64_t>(epochs * episodes_per_epoch);
}

LrSchedule TrainConfig::resolved_schedule() const {
  LrSchedule s = schedule;
  s.total_steps = total_steps();
  s.warmup_steps = std::min(s.warmup_steps, s.total_steps);
  return s;
}

void TrainConfig::validate() const {
  require(epochs >= 1 && episodes_per_epoch >= 1, ErrorKind::config, "epochs and episodes_per_epoch must be positive");
  episode.validate();
  resolved_schedule().validate();
  require(val_episodes >= 1 && val_n_way >= 1 && val_k_shot >= 1 && val_n_query >= 1, ErrorKind::config,
          "validation counts must be positive");
  require(val_n_query % val_n_way == 0, ErrorKind::config, "val.n_query must be divisible by val.n_way");
  require(episode.n_way <= model.n_max && val_n_way <= model.n_max, ErrorKind::config,
          "episode ways exceed model.n_max");
  require(threads >= 1, ErrorKind::config, "threads must be at least 1");
  require(kmeans_k >= 2 && kmeans_iters >= 1, ErrorKind::config, "kmeans.k must be >= 2 and kmeans.iters >= 1");
}

namespace {

std::string where(const std::string& key, std::size_t line) {
  return (line ? "line " + std::to_string(line) + ": key '" : "setting '") + key + "'";
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v, std::size_t line) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorKind::config,
          where(key, line) + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

double to_double(const std::string& key, const std::string& v, std::size_t line) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty() && std::isfinite(x), ErrorKind::config,
          where(key, line) + ": expected a number, got '" + v + "'");
  return x;
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&, std::size_t)> set;
  std::function<std::string(const TrainConfig&)> get;
  bool list = false;
};

#define SIZE_FIELD(name, member)                                                                     \
  Field {                                                                                            \
    name, [](TrainConfig& c, const std::string& v, std::size_t l) { c.member = to_u64(name, v, l); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }                                \
  }
#define DOUBLE_FIELD(name, member)                                                                      \
  Field {                                                                                               \
    name, [](TrainConfig& c, const std::string& v, std::size_t l) { c.member = to_double(name, v, l); }, \
        [](const TrainConfig& c) { return fmt_double(c.member); }                                       \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("epochs", epochs),
      SIZE_FIELD("episodes_per_epoch", episodes_per_epoch),
      SIZE_FIELD("n_way", episode.n_way),
      SIZE_FIELD("k_shot", episode.k_shot),
      SIZE_FIELD("n_query", episode.n_query),
      SIZE_FIELD("aug_count", episode.aug_count),
      Field{"task_mode",
            [](TrainConfig& c, const std::string& v, std::size_t l) {
              try {
                c.task_mode = task_mode_from_name(v);
              } catch (const Error& e) {
                fail(ErrorKind::config, where("task_mode", l) + ": " + e.what());
              }
            },
            [](const TrainConfig& c) { return std::string(task_mode_name(c.task_mode)); }},
      DOUBLE_FIELD("mix.alpha", episode.mix.alpha),
      DOUBLE_FIELD("mix.beta", episode.mix.beta),
      DOUBLE_FIELD("mix.lo", episode.mix.lo),
      DOUBLE_FIELD("mix.hi", episode.mix.hi),
      Field{"mix.mode",
            [](TrainConfig& c, const std::string& v, std::size_t l) {
              if (v == "pixel") c.episode.mix.mode = MixMode::pixel;
              else if (v == "patch") c.episode.mix.mode = MixMode::patch;
              else fail(ErrorKind::config, where("mix.mode", l) + ": expected pixel or patch, got '" + v + "'");
            },
            [](const TrainConfig& c) { return std::string(c.episode.mix.mode == MixMode::pixel ? "pixel" : "patch"); }},
      DOUBLE_FIELD("lr.base", schedule.base_lr),
      DOUBLE_FIELD("lr.final", schedule.final_lr),
      SIZE_FIELD("lr.warmup_steps", schedule.warmup_steps),
      SIZE_FIELD("lr.total_steps", schedule.total_steps),
      SIZE_FIELD("seed", seed),
      Field{"train.dataset",
            [](TrainConfig& c, const std::string& v, std::size_t) {
              for (auto& s : split_list(v)) c.train_datasets.push_back(s);
            },
            [](const TrainConfig& c) {
              std::string s;
              for (const auto& d : c.train_datasets) s += (s.empty() ? "" : ",") + d;
              return s;
            },
            true},
      Field{"val.dataset",
            [](TrainConfig& c, const std::string& v, std::size_t) {
              for (auto& s : split_list(v)) c.val_datasets.push_back(s);
            },
            [](const TrainConfig& c) {
              std::string s;
              for (const auto& d : c.val_datasets) s += (s.empty() ? "" : ",") + d;
              return s;
            },
            true},
      SIZE_FIELD("val.episodes", val_episodes),
      SIZE_FIELD("val.n_way", val_n_way),
      SIZE_FIELD("val.k_shot", val_k_shot),
      SIZE_FIELD("val.n_query", val_n_query),
      SIZE_FIELD("checkpoint_every", checkpoint_every),
      SIZE_FIELD("kmeans.k", kmeans_k),
      SIZE_FIELD("kmeans.iters", kmeans_iters),
      SIZE_FIELD("threads", threads),
      SIZE_FIELD("prefetch", prefetch),
      SIZE_FIELD("model.n_max", model.n_max),
      SIZE_FIELD("model.d_label", model.d_label),
      SIZE_FIELD("model.layers", model.layers),
      SIZE_FIELD("model.heads", model.heads),
      SIZE_FIELD("model.d_ff", model.d_ff),
      DOUBLE_FIELD("model.ln_eps", model.ln_eps),
      Field{"extractor.kind",
            [](TrainConfig& c, const std::string& v, std::size_t l) {
              try {
                c.model.extractor.kind = extractor_kind_from_name(v);
              } catch (const Error& e) {
                fail(ErrorKind::config, where("extractor.kind", l) + ": " + e.what());
              }
            },
            [](const TrainConfig& c) { return std::string(extractor_kind_name(c.model.extractor.kind)); }},
      SIZE_FIELD("extractor.height", model.extractor.image_height),
      SIZE_FIELD("extractor.width", model.extractor.image_width),
      SIZE_FIELD("extractor.channels", model.extractor.image_channels),
      SIZE_FIELD("extractor.conv_layers", model.extractor.conv_layers),
      SIZE_FIELD("extractor.conv_channels", model.extractor.conv_channels),
      SIZE_FIELD("extractor.seed", model.extractor.seed),
      Field{"extractor.table_file",
            [](TrainConfig& c, const std::string& v, std::size_t) { c.model.extractor.table_file = v; },
            [](const TrainConfig& c) { return c.model.extractor.table_file; }},
      SIZE_FIELD("extractor.table_dim", model.extractor.table_dim),
      Field{"extractor.normalize",
            [](TrainConfig& c, const std::string& v, std::size_t l) {
              if (v == "true" || v == "1") c.model.extractor.normalize = true;
              else if (v == "false" || v == "0") c.model.extractor.normalize = false;
              else fail(ErrorKind::config, where("extractor.normalize", l) + ": expected true or false, got '" + v + "'");
            },
            [](const TrainConfig& c) { return std::string(c.model.extractor.normalize ? "true" : "false"); }},
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD

const Field& find_field(const std::string& key, std::size_t line) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  fail(ErrorKind::config, (line ? "line " + std::to_string(line) + ": unknown key '" : "unknown setting '") + key + "'");
}

}  // namespace

void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value, std::size_t line) {
  const Field& f = find_field(key, line);
  if (f.list && line == 0) {
    if (key == "train.dataset") cfg.train_datasets.clear();
    if (key == "val.dataset") cfg.val_datasets.clear();
  }
  f.set(cfg, value, line);
}

TrainConfig parse_train_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  bool train_seen = false, val_seen = false;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string content = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (content.empty()) continue;
    const auto eq = content.find('=');
    require(eq != std::string::npos, ErrorKind::config,
            "line " + std::to_string(line) + ": expected 'key = value', got '" + content + "'");
    const std::string key = trim(content.substr(0, eq)), value = trim(content.substr(eq + 1));
    require(!key.empty(), ErrorKind::config, "line " + std::to_string(line) + ": empty key");
    const Field& f = find_field(key, line);
    // the first list entry in a file replaces the base list
    if (key == "train.dataset" && !std::exchange(train_seen, true)) base.train_datasets.clear();
    if (key == "val.dataset" && !std::exchange(val_seen, true)) base.val_datasets.clear();
    if (f.list && value.empty()) continue;
    f.set(base, value, line);
  }
  return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), std::move(base));
}

std::string format_train_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) {
    if (f.list) {
      const auto& list = std::string(f.key) == "train.dataset" ? cfg.train_datasets : cfg.val_datasets;
      if (list.empty()) out += std::string(f.key) + " =\n";
      for (const auto& item : list) out += std::string(f.key) + " = " + item + "\n";
      continue;
    }
    out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

bool operator==(const TrainConfig& a, const TrainConfig& b) { return format_train_config(a) == format_train_config(b); }

void MetricsLog::append(EpochRecord r) {
  require(r.accuracy.size() == val_names.size() && r.stderr_.size() == val_names.size(), ErrorKind::contract,
          "metrics record width differs from the validation set count");
  for (double a : r.accuracy) require(a >= 0.0 && a <= 1.0, ErrorKind::contract, "accuracy outside [0, 1]");
  records.push_back(std::move(r));
}

std::string MetricsLog::to_csv() const {
  std::string out = "epoch,loss,lr";
  for (const auto& n : val_names) out += ",acc_" + n + ",stderr_" + n;
  out += "\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + "," + fmt_double(r.loss) + "," + fmt_double(r.lr);
    for (std::size_t i = 0; i < val_names.size(); ++i) out += "," + fmt_double(r.accuracy[i]) + "," + fmt_double(r.stderr_[i]);
    out += "\n";
  }
  return out;
}

std::string MetricsLog::timing_csv() const {
  std::string out = "epoch,seconds\n";
  for (const auto& r : records) out += std::to_string(r.epoch) + "," + fmt_double(r.seconds) + "\n";
  return out;
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::io, "metrics CSV is empty");
  const auto header = split_list(line);
  require(header.size() >= 3 && header[0] == "epoch" && header[1] == "loss" && header[2] == "lr" &&
              (header.size() - 3) % 2 == 0,
          ErrorKind::io, "metrics CSV header must start with epoch,loss,lr followed by acc/stderr pairs");
  MetricsLog log;
  for (std::size_t i = 3; i < header.size(); i += 2) {
    require(header[i].rfind("acc_", 0) == 0 && header[i + 1].rfind("stderr_", 0) == 0, ErrorKind::io,
            "metrics CSV: expected acc_<name>,stderr_<name> columns");
    log.val_names.push_back(header[i].substr(4));
  }
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_list(line);
    require(cells.size() == header.size(), ErrorKind::io, "metrics CSV row " + std::to_string(row) + " has the wrong width");
    EpochRecord r;
    try {
      r.epoch = std::stoull(cells[0]);
      r.loss = std::stod(cells[1]);
      r.lr = std::stod(cells[2]);
      for (std::size_t i = 3; i < cells.size(); i += 2) {
        r.accuracy.push_back(std::stod(cells[i]));
        r.stderr_.push_back(std::stod(cells[i + 1]));
      }
    } catch (const std::exception&) {
      fail(ErrorKind::io, "metrics CSV row " + std::to_string(row) + " is not numeric");
    }
    log.append(std::move(r));
  }
  return log;
}

std::vector<double> MetricsLog::accuracy_series(std::size_t val_index) const {
  require(val_index < val_names.size(), ErrorKind::index, "no validation column " + std::to_string(val_index));
  std::vector<double> s;
  for (const auto& r : records) s.push_back(r.accuracy[val_index]);
  return s;
}

std::vector<double> relative_accuracy(std::span<const double> series) {
  require(!series.empty(), ErrorKind::contract, "relative_accuracy: empty series");
  std::vector<double> out(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) out[i] = series[i] - series[0];
  return out;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.cols(); ++c)
    if (logits.at(row, c) > logits.at(row, best)) best = c;
  return best;
}

double loss_from_logits(const Tensor& logits, std::span<const int> labels) {
  require(labels.size() == logits.rows(), ErrorKind::contract, "one label per logit row expected");
  double s = 0.0;
  for (std::size_t j = 0; j < labels.size(); ++j)
    s += cross_entropy(logits.data().subspan(j * logits.cols(), logits.cols()), static_cast<std::size_t>(labels[j]));
  return s / static_cast<double>(labels.size());
}

double episode_accuracy(const Tensor& logits, std::span<const int> labels) {
  require(labels.size() == logits.rows(), ErrorKind::contract, "one label per logit row expected");
  std::size_t hits = 0;
  for (std::size_t j = 0; j < labels.size(); ++j) hits += static_cast<int>(argmax_row(logits, j)) == labels[j] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double episode_loss(const CameluModel& m, const Episode& ep, const EpisodeEmbedding& emb) {
  return loss_from_logits(forward(m, ep, emb).logits, ep.query_labels);
}

namespace {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

EvalResult summarize(std::vector<double> acc, std::size_t tokens) {
  EvalResult r;
  r.tokens = tokens;
  const double n = static_cast<double>(acc.size());
  for (double a : acc) r.mean += a;
  r.mean /= n;
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - r.mean) * (a - r.mean);
    r.stderr_ = std::sqrt(ss / (n - 1)) / std::sqrt(n);
  }
  r.per_episode = std::move(acc);
  return r;
}

}  // namespace

EvalResult evaluate_prepared(const CameluModel& m, std::span<const PreparedEpisode> episodes, std::size_t threads) {
  require(!episodes.empty(), ErrorKind::contract, "evaluate: no episodes");
  const std::uint64_t before = parameter_checksum(m);
  std::vector<double> acc(episodes.size());
  parallel_for(episodes.size(), threads, [&](std::size_t i) {
    const auto& p = episodes[i];
    acc[i] = episode_accuracy(forward(m, p.episode, p.embedding).logits, p.episode.query_labels);
  });
  std::size_t tokens = 0;
  for (const auto& p : episodes) tokens += p.episode.n_query * (p.episode.support.size() + 1);
  EvalResult r = summarize(std::move(acc), tokens);
  r.checksum_before = before;
  r.checksum_after = parameter_checksum(m);
  return r;
}

EvalResult evaluate(const CameluModel& m, const Dataset& ds, std::size_t n_tasks, std::size_t n_way, std::size_t k_shot,
                    std::size_t n_query, std::uint64_t seed, std::size_t threads) {
  require(n_tasks >= 1, ErrorKind::contract, "evaluate: n_tasks must be positive");
  std::vector<PreparedEpisode> eps(n_tasks);
  parallel_for(n_tasks, threads, [&](std::size_t i) {
    eps[i].episode = build_test_episode(ds, n_way, k_shot, n_query, derive_seed(seed, stream_tag("eval"), i));
    eps[i].embedding = embed_episode(m.extractor(), eps[i].episode, &ds);
  });
  return evaluate_prepared(m, eps, threads);
}

namespace {

constexpr std::uint64_t kEpisodeTag = stream_tag("train-episode");
constexpr std::uint64_t kValidationTag = stream_tag("validation");
constexpr std::size_t kStandardizerSample = 2000;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << text;
}

TrainConfig resolve(const TrainConfig& cfg, std::span<const Dataset> train_sets) {
  TrainConfig r = cfg;
  auto& ex = r.model.extractor;
  if (!train_sets.empty() && !train_sets[0].items.empty()) {
    const Image& img = train_sets[0].image(0);
    if (ex.image_height == 0) ex.image_height = img.height;
    if (ex.image_width == 0) ex.image_width = img.width;
    if (ex.image_channels == 0) ex.image_channels = img.channels;
  }
  return r;
}

// Unlabeled pixels only, so fitting touches no label information.
void fit_extractor_standardizer(CameluModel& m, std::span<const Dataset> train_sets, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t d = 0; d < train_sets.size(); ++d)
    for (std::size_t i = 0; i < train_sets[d].size(); ++i) pool.emplace_back(d, i);
  Rng rng(derive_seed(seed, stream_tag("standardizer")));
  const std::size_t n = std::min(kStandardizerSample, pool.size());
  for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + static_cast<std::size_t>(rng.uniform_int(pool.size() - i))]);
  std::vector<Image> imgs;
  imgs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) imgs.push_back(train_sets[pool[i].first].image(pool[i].second));
  auto fx = std::make_shared<FeatureExtractor>(m.extractor());
  fx->fit_standardizer(imgs);
  m.set_extractor(std::move(fx));
}

}  // namespace

CameluModel initial_model(const TrainConfig& cfg_in, std::span<const Dataset> train_sets) {
  require(!train_sets.empty(), ErrorKind::contract, "initial_model: no training dataset");
  const TrainConfig cfg = resolve(cfg_in, train_sets);
  cfg.validate();
  CameluModel m = init_model(cfg.model, derive_seed(cfg.seed, stream_tag("model")));
  if (cfg.model.extractor.kind == ExtractorKind::frozen_randconv && cfg.model.extractor.normalize)
    fit_extractor_standardizer(m, train_sets, cfg.seed);
  return m;
}

TrainState train(const TrainConfig& cfg_in, std::span<const Dataset> train_sets, std::span<const Dataset> val_sets,
                 const TrainHooks& hooks, std::optional<TrainState> resume) {
  require(!train_sets.empty(), ErrorKind::contract, "train: no training dataset");
  const TrainConfig cfg = resolve(cfg_in, train_sets);
  cfg.validate();
  const LrSchedule schedule = cfg.resolved_schedule();
  if (hooks.out_dir) {
    std::filesystem::create_directories(*hooks.out_dir);
    write_text(*hooks.out_dir / "config.resolved.txt", format_train_config(cfg));
  }

  TrainState st;
  if (resume) {
    st = std::move(*resume);
    require(to_json(st.model.config()) == to_json(cfg.model), ErrorKind::config,
            "resume checkpoint model config differs from the run config");
  } else {
    st.model = initial_model(cfg, train_sets);
    st.adam = make_adam_state(st.model.params());
    for (std::size_t v = 0; v < val_sets.size(); ++v) st.log.val_names.push_back(val_sets[v].id.empty() ? "val" + std::to_string(v) : val_sets[v].id);
  }
  const FeatureExtractor& fx = st.model.extractor();

  // fixed validation episodes, embedded once: the extractor is frozen
  std::vector<std::vector<PreparedEpisode>> val_eps(val_sets.size());
  for (std::size_t v = 0; v < val_sets.size(); ++v) {
    val_eps[v].resize(cfg.val_episodes);
    parallel_for(cfg.val_episodes, cfg.threads, [&](std::size_t e) {
      auto& p = val_eps[v][e];
      p.episode = build_test_episode(val_sets[v], cfg.val_n_way, cfg.val_k_shot, cfg.val_n_query,
                                     derive_seed(derive_seed(cfg.seed, kValidationTag, v), e));
      p.embedding = embed_episode(fx, p.episode, &val_sets[v]);
    });
  }

  std::vector<Dataset> clustered;
  if (cfg.task_mode == TaskMode::kmeans) {
    for (std::size_t d = 0; d < train_sets.size(); ++d) {
      std::vector<Image> imgs;
      for (const auto& it : train_sets[d].items) imgs.push_back(it.image);
      const Tensor emb = fx.embed(imgs);
      std::vector<Tensor> points;
      for (std::size_t i = 0; i < emb.rows(); ++i)
        points.push_back(Tensor({emb.cols()}, std::vector<double>(emb.data().begin() + i * emb.cols(),
                                                                  emb.data().begin() + (i + 1) * emb.cols())));
      const std::size_t k = std::min(cfg.kmeans_k, points.size());
      const KMeansResult km = kmeans_pseudolabels(points, k, cfg.kmeans_iters, derive_seed(cfg.seed, stream_tag("kmeans"), d));
      clustered.push_back(relabel(strip_labels(train_sets[d]), km.labels, k));
    }
  }

  auto prepare = [&](std::size_t global) {
    const std::uint64_t seed = derive_seed(cfg.seed, kEpisodeTag, global);
    const std::size_t d = train_sets.size() > 1 ? multi_dataset_sample(train_sets.size(), seed) : 0;
    PreparedEpisode p;
    switch (cfg.task_mode) {
      case TaskMode::camelu: p.episode = build_episode(train_sets[d], cfg.episode, seed); break;
      case TaskMode::augment: p.episode = build_episode_augment_only(train_sets[d], cfg.episode, seed); break;
      case TaskMode::kmeans:
        p.episode = build_pseudolabel_episode(clustered[d], cfg.episode.n_way, cfg.episode.k_shot, cfg.episode.n_query, seed);
        break;
    }
    p.embedding = embed_episode(fx, p.episode);
    return p;
  };

  const std::size_t E = cfg.episodes_per_epoch;
  for (std::size_t epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::deque<std::future<PreparedEpisode>> ahead;
    std::size_t next = 0;
    const auto policy = cfg.threads > 1 ? std::launch::async : std::launch::deferred;
    auto refill = [&] {
      while (next < E && ahead.size() < std::max<std::size_t>(1, cfg.prefetch)) {
        ahead.push_back(std::async(policy, prepare, epoch * E + next));
        ++next;
      }
    };
    double loss_sum = 0.0, lr = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
      refill();
      PreparedEpisode p = ahead.front().get();
      ahead.pop_front();
      refill();

      Tape tape;
      const auto params = bind_parameters(tape, st.model, true);
      const ForwardVars fv = forward_on_tape(tape, params, st.model, p.embedding.support, p.episode.support_labels,
                                             p.embedding.query, p.episode.n_way);
      std::vector<std::size_t> targets(p.episode.query_labels.begin(), p.episode.query_labels.end());
      const Var loss = ad::cross_entropy_mean(fv.logits, targets);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        json prov = episode_to_bundle(p.episode).header["provenance"];
        prov["global_episode"] = epoch * E + e;
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", episode " + std::to_string(e),
                           prov.dump());
      }
      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const auto& v : params) grads.push_back(tape.grad(v));
      lr = lr_at(schedule, st.adam.step);
      adam_step(st.model.params(), grads, st.adam, lr);
      loss_sum += lv;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(E);
    rec.lr = lr;
    for (std::size_t v = 0; v < val_sets.size(); ++v) {
      const EvalResult r = evaluate_prepared(st.model, val_eps[v], cfg.threads);
      rec.accuracy.push_back(r.mean);
      rec.stderr_.push_back(r.stderr_);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.log.append(rec);
    st.epochs_done = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(st.log.records.back());
    if (hooks.out_dir) {
      write_text(*hooks.out_dir / "metrics.csv", st.log.to_csv());
      write_text(*hooks.out_dir / "timing.csv", st.log.timing_csv());
      if (cfg.checkpoint_every && st.epochs_done % cfg.checkpoint_every == 0 && st.epochs_done < cfg.epochs)
        save_checkpoint(*hooks.out_dir / ("checkpoint_epoch" + std::to_string(st.epochs_done) + ".cmlt"), st, cfg);
    }
  }
  if (hooks.out_dir) save_checkpoint(*hooks.out_dir / "checkpoint.cmlt", st, cfg);
  return st;
}

TrainState train_from_config(const TrainConfig& cfg, const TrainHooks& hooks,
                             const std::optional<std::filesystem::path>& resume_checkpoint) {
  require(!cfg.train_datasets.empty(), ErrorKind::config, "train.dataset is not set");
  std::vector<Dataset> train_sets, val_sets;
  for (const auto& p : cfg.train_datasets) train_sets.push_back(load_dataset(p));
  for (const auto& p : cfg.val_datasets) val_sets.push_back(load_dataset(p));
  std::optional<TrainState> resume;
  if (resume_checkpoint) {
    TrainConfig saved;
    resume = load_checkpoint(*resume_checkpoint, &saved);
    TrainConfig want = resolve(cfg, train_sets);
    saved.epochs = want.epochs;
    if (!(saved == want)) {
      std::istringstream a(format_train_config(saved)), b(format_train_config(want));
      std::string la, lb;
      while (std::getline(a, la) && std::getline(b, lb))
        if (la != lb) break;
      fail(ErrorKind::config, "resume config differs from the checkpoint: checkpoint has '" + la + "', run has '" + lb + "'");
    }
  }
  return train(cfg, train_sets, val_sets, hooks, std::move(resume));
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg) {
  cmlt::Bundle b = model_to_bundle(state.model);
  b.header["train"] = {{"epochs_done", state.epochs_done},
                       {"adam_step", state.adam.step},
                       {"beta1", state.adam.beta1},
                       {"beta2", state.adam.beta2},
                       {"epsilon", state.adam.epsilon},
                       {"config", format_train_config(cfg)},
                       {"val_names", state.log.val_names},
                       {"metrics", state.log.to_csv()}};
  for (std::size_t i = 0; i < state.model.names().size(); ++i) {
    b.add("adam.m." + state.model.names()[i], state.adam.m[i]);
    b.add("adam.v." + state.model.names()[i], state.adam.v[i]);
  }
  cmlt::write_bundle(path, b);
}

TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* cfg_out) {
  const cmlt::Bundle b = cmlt::read_bundle(path);
  TrainState st;
  st.model = model_from_bundle(b);
  require(b.header.contains("train"), ErrorKind::io, path.string() + " holds a model without training state");
  try {
    const json& t = b.header["train"];
    st.epochs_done = t.at("epochs_done").get<std::size_t>();
    st.adam = make_adam_state(st.model.params(), t.at("beta1").get<double>(), t.at("beta2").get<double>(),
                              t.at("epsilon").get<double>());
    st.adam.step = t.at("adam_step").get<std::uint64_t>();
    st.log = MetricsLog::from_csv(t.at("metrics").get<std::string>());
    if (st.log.val_names.empty()) st.log.val_names = t.at("val_names").get<std::vector<std::string>>();
    if (cfg_out) *cfg_out = parse_train_config(t.at("config").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::io, path.string() + ": malformed training header: " + e.what());
  }
  for (std::size_t i = 0; i < st.model.names().size(); ++i) {
    st.adam.m[i] = b.get("adam.m." + st.model.names()[i]);
    st.adam.v[i] = b.get("adam.v." + st.model.names()[i]);
  }
  return st;
}

}  // namespace camelu
