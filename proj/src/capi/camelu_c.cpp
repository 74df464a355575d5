#include "camelu/camelu.h"

#include <algorithm>
#include <cstring>
#include <memory>
#include <exception>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "camelu/analysis.hpp"
#include "camelu/cmlt.hpp"
#include "camelu/dataset.hpp"
#include "camelu/episodes.hpp"
#include "camelu/error.hpp"
#include "camelu/mix.hpp"
#include "camelu/model.hpp"
#include "camelu/rng.hpp"
#include "camelu/ssim.hpp"
#include "camelu/train.hpp"

using nlohmann::json;

struct camelu_dataset {
  camelu::Dataset ds;
};
struct camelu_config {
  camelu::TrainConfig cfg;
};
struct camelu_model {
  camelu::CameluModel model;
};

namespace {

struct LastError {
  std::string message;
  std::string kind = "ok";
  std::string detail = "{}";
};

thread_local LastError g_last;

camelu_status status_of(camelu::ErrorKind k) {
  switch (k) {
    case camelu::ErrorKind::dimension: return CAMELU_E_DIMENSION;
    case camelu::ErrorKind::index: return CAMELU_E_INDEX;
    case camelu::ErrorKind::contract: return CAMELU_E_CONTRACT;
    case camelu::ErrorKind::config: return CAMELU_E_CONFIG;
    case camelu::ErrorKind::io: return CAMELU_E_IO;
    case camelu::ErrorKind::lookup: return CAMELU_E_LOOKUP;
    case camelu::ErrorKind::numeric: return CAMELU_E_NUMERIC;
    case camelu::ErrorKind::fit: return CAMELU_E_FIT;
  }
  return CAMELU_E_INTERNAL;
}

camelu_status set_error(camelu_status s, std::string kind, std::string message, std::string detail = "{}") {
  g_last.message = std::move(message);
  g_last.kind = std::move(kind);
  g_last.detail = std::move(detail);
  return s;
}

// Runs fn, mapping every exception to a status and the thread's last error.
template <class Fn>
camelu_status guarded(Fn&& fn) {
  try {
    fn();
    return CAMELU_OK;
  } catch (const camelu::NumericError& e) {
    return set_error(CAMELU_E_NUMERIC, "numeric", e.what(), json{{"provenance", json::parse(e.provenance(), nullptr, false)}}.dump());
  } catch (const camelu::FitError& e) {
    return set_error(CAMELU_E_FIT, "fit", e.what(), json{{"best_residual", e.best_residual()}}.dump());
  } catch (const camelu::Error& e) {
    return set_error(status_of(e.kind()), std::string(camelu::error_kind_name(e.kind())), e.what());
  } catch (const json::exception& e) {
    return set_error(CAMELU_E_CONFIG, "config", std::string("malformed JSON: ") + e.what());
  } catch (const std::bad_alloc&) {
    return set_error(CAMELU_E_INTERNAL, "internal", "out of memory");
  } catch (const std::exception& e) {
    return set_error(CAMELU_E_INTERNAL, "internal", e.what());
  }
}

void require_arg(bool ok, const char* what) {
  camelu::require(ok, camelu::ErrorKind::contract, std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

camelu::EpisodeConfig episode_config_from(const json& j) {
  camelu::EpisodeConfig c;
  c.n_way = j.value("n_way", c.n_way);
  c.k_shot = j.value("k_shot", c.k_shot);
  c.n_query = j.value("n_query", c.n_query);
  c.aug_count = j.value("aug_count", c.aug_count);
  if (j.contains("fixed_lambda")) c.fixed_lambda = j["fixed_lambda"].get<double>();
  if (j.contains("mix")) {
    const json& m = j["mix"];
    c.mix.alpha = m.value("alpha", c.mix.alpha);
    c.mix.beta = m.value("beta", c.mix.beta);
    c.mix.lo = m.value("lo", c.mix.lo);
    c.mix.hi = m.value("hi", c.mix.hi);
    const std::string mode = m.value("mode", std::string("pixel"));
    camelu::require(mode == "pixel" || mode == "patch", camelu::ErrorKind::config,
                    "mix.mode: expected pixel or patch, got '" + mode + "'");
    c.mix.mode = mode == "patch" ? camelu::MixMode::patch : camelu::MixMode::pixel;
  }
  c.validate();
  return c;
}

camelu_phase_fit to_c(const camelu::LogisticFit& f, const camelu::PhaseBoundaries& p) {
  camelu_phase_fit o{};
  o.a = f.a;
  o.b = f.b;
  o.c = f.c;
  o.d = f.d;
  o.x0 = f.x0;
  o.residual = f.residual;
  o.degenerate = f.degenerate ? 1 : 0;
  o.fraction = p.fraction;
  o.learn_start = p.learn_start;
  o.gen_start = p.gen_start;
  o.learn_epoch = p.learn_epoch;
  o.gen_epoch = p.gen_epoch;
  return o;
}

std::string read_text(const char* path) {
  std::ifstream in(path, std::ios::binary);
  camelu::require(static_cast<bool>(in), camelu::ErrorKind::io, std::string("cannot open ") + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

extern "C" {

const char* camelu_version(void) { return "0.1.0"; }

const char* camelu_status_name(camelu_status status) {
  switch (status) {
    case CAMELU_OK: return "ok";
    case CAMELU_E_DIMENSION: return "dimension";
    case CAMELU_E_INDEX: return "index";
    case CAMELU_E_CONTRACT: return "contract";
    case CAMELU_E_CONFIG: return "config";
    case CAMELU_E_IO: return "io";
    case CAMELU_E_LOOKUP: return "lookup";
    case CAMELU_E_NUMERIC: return "numeric";
    case CAMELU_E_FIT: return "fit";
    case CAMELU_E_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* camelu_last_error(void) { return g_last.message.c_str(); }
const char* camelu_last_error_kind(void) { return g_last.kind.c_str(); }
const char* camelu_last_error_detail(void) { return g_last.detail.c_str(); }
void camelu_string_free(char* s) { delete[] s; }

uint64_t camelu_derive_seed(uint64_t seed, const char* tag, uint64_t index) {
  return camelu::derive_seed(seed, camelu::stream_tag(tag ? tag : ""), index);
}

camelu_status camelu_dataset_synthetic(size_t n_classes, size_t per_class, size_t size, size_t channels, uint64_t seed,
                                       size_t first_class, int unlabeled, camelu_dataset** out) {
  return guarded([&] {
    require_arg(out != nullptr, "out");
    auto h = std::make_unique<camelu_dataset>();
    h->ds = camelu::gen_synthetic_dataset(n_classes, per_class, size, channels, seed, first_class);
    if (unlabeled) h->ds = camelu::strip_labels(h->ds);
    *out = h.release();
  });
}

camelu_status camelu_dataset_load(const char* dir, camelu_dataset** out) {
  return guarded([&] {
    require_arg(dir != nullptr && out != nullptr, "dir and out");
    auto h = std::make_unique<camelu_dataset>();
    h->ds = camelu::load_dataset(dir);
    *out = h.release();
  });
}

camelu_status camelu_dataset_save(const camelu_dataset* ds, const char* dir) {
  return guarded([&] {
    require_arg(ds != nullptr && dir != nullptr, "ds and dir");
    camelu::save_dataset(ds->ds, dir);
  });
}

size_t camelu_dataset_size(const camelu_dataset* ds) { return ds ? ds->ds.size() : 0; }
int camelu_dataset_labeled(const camelu_dataset* ds) { return ds && ds->ds.labeled ? 1 : 0; }
size_t camelu_dataset_class_count(const camelu_dataset* ds) { return ds ? ds->ds.class_count.value_or(0) : 0; }
void camelu_dataset_free(camelu_dataset* ds) { delete ds; }

camelu_status camelu_episode_write(const camelu_dataset* ds, const char* options_json, uint64_t seed, const char* path,
                                   char** summary_json) {
  return guarded([&] {
    require_arg(ds != nullptr && path != nullptr, "ds and path");
    const json opts = options_json && *options_json ? json::parse(options_json) : json::object();
    const std::string mode = opts.value("mode", std::string("camelu"));
    const camelu::EpisodeConfig cfg = episode_config_from(opts);
    camelu::Episode ep;
    if (mode == "camelu") ep = camelu::build_episode(ds->ds, cfg, seed);
    else if (mode == "augment") ep = camelu::build_episode_augment_only(ds->ds, cfg, seed);
    else if (mode == "test") ep = camelu::build_test_episode(ds->ds, cfg.n_way, cfg.k_shot, cfg.n_query, seed);
    else camelu::fail(camelu::ErrorKind::config, "mode: expected camelu, augment or test, got '" + mode + "'");
    const camelu::cmlt::Bundle b = camelu::episode_to_bundle(ep);
    camelu::cmlt::write_bundle(path, b);
    if (summary_json) *summary_json = dup_string(b.header.dump());
  });
}

camelu_status camelu_collision_probability(uint64_t classes, uint64_t per_class, uint64_t n_way, double* out) {
  return guarded([&] {
    require_arg(out != nullptr, "out");
    *out = camelu::collision_probability(classes, per_class, n_way);
  });
}

camelu_status camelu_ssim_files(const char* a, const char* b, double* out) {
  return guarded([&] {
    require_arg(a != nullptr && b != nullptr && out != nullptr, "a, b and out");
    *out = camelu::ssim(camelu::image_from_tensor(camelu::cmlt::read_tensor(a)),
                        camelu::image_from_tensor(camelu::cmlt::read_tensor(b)));
  });
}

camelu_status camelu_mssim_compare(const camelu_dataset* ds, size_t pairs, double lambda, uint64_t seed, double* pixel,
                                   double* patch) {
  return guarded([&] {
    require_arg(ds != nullptr && pixel != nullptr && patch != nullptr, "ds, pixel and patch");
    camelu::require(ds->ds.size() >= 2, camelu::ErrorKind::contract, "mSSIM comparison needs at least two images");
    camelu::require(pairs >= 1, camelu::ErrorKind::contract, "mSSIM comparison needs at least one pair");
    camelu::require(lambda >= 0.0 && lambda < 1.0, camelu::ErrorKind::contract, "lambda must lie in [0, 1)");
    double px = 0.0, pt = 0.0;
    for (size_t i = 0; i < pairs; ++i) {
      camelu::Rng rng(camelu::derive_seed(seed, camelu::stream_tag("mssim-pair"), i));
      const auto n = ds->ds.size();
      const auto first = static_cast<size_t>(rng.uniform_int(n));
      auto second = static_cast<size_t>(rng.uniform_int(n - 1));
      if (second >= first) ++second;
      const camelu::Image& x = ds->ds.image(first);
      const camelu::Image& z = ds->ds.image(second);
      px += camelu::mssim_query(x, z, camelu::mix_pixel(x, z, lambda));
      pt += camelu::mssim_query(x, z, camelu::mix_patch(x, z, lambda, rng.next_u64()).image);
    }
    *pixel = px / static_cast<double>(pairs);
    *patch = pt / static_cast<double>(pairs);
  });
}

camelu_status camelu_config_new(camelu_config** out) {
  return guarded([&] {
    require_arg(out != nullptr, "out");
    *out = new camelu_config{};
  });
}

camelu_status camelu_config_load(const char* path, camelu_config** out) {
  return guarded([&] {
    require_arg(path != nullptr && out != nullptr, "path and out");
    auto h = std::make_unique<camelu_config>();
    h->cfg = camelu::load_train_config(path);
    *out = h.release();
  });
}

camelu_status camelu_config_set(camelu_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require_arg(cfg != nullptr && key != nullptr && value != nullptr, "cfg, key and value");
    camelu::apply_setting(cfg->cfg, key, value);
  });
}

camelu_status camelu_config_format(const camelu_config* cfg, char** out) {
  return guarded([&] {
    require_arg(cfg != nullptr && out != nullptr, "cfg and out");
    *out = dup_string(camelu::format_train_config(cfg->cfg));
  });
}

void camelu_config_free(camelu_config* cfg) { delete cfg; }

camelu_status camelu_train(const camelu_config* cfg, const char* out_dir, const char* resume, camelu_epoch_callback cb,
                           void* user, camelu_model** out_model) {
  return guarded([&] {
    require_arg(cfg != nullptr, "cfg");
    camelu::TrainHooks hooks;
    if (out_dir) hooks.out_dir = std::filesystem::path(out_dir);
    if (cb)
      hooks.on_epoch = [cb, user](const camelu::EpochRecord& r) {
        cb(user, r.epoch, r.loss, r.lr, r.accuracy.data(), r.stderr_.data(), r.accuracy.size(), r.seconds);
      };
    std::optional<std::filesystem::path> resume_path;
    if (resume) resume_path = std::filesystem::path(resume);
    camelu::TrainState st = camelu::train_from_config(cfg->cfg, hooks, resume_path);
    if (out_model) *out_model = new camelu_model{std::move(st.model)};
  });
}

camelu_status camelu_model_init(const camelu_config* cfg, camelu_model** out) {
  return guarded([&] {
    require_arg(cfg != nullptr && out != nullptr, "cfg and out");
    camelu::require(!cfg->cfg.train_datasets.empty(), camelu::ErrorKind::config, "train.dataset is not set");
    std::vector<camelu::Dataset> sets;
    for (const auto& p : cfg->cfg.train_datasets) sets.push_back(camelu::load_dataset(p));
    *out = new camelu_model{camelu::initial_model(cfg->cfg, sets)};
  });
}

camelu_status camelu_model_load(const char* path, camelu_model** out) {
  return guarded([&] {
    require_arg(path != nullptr && out != nullptr, "path and out");
    *out = new camelu_model{camelu::load_model(path)};
  });
}

camelu_status camelu_model_save(const camelu_model* m, const char* path) {
  return guarded([&] {
    require_arg(m != nullptr && path != nullptr, "m and path");
    camelu::save_model(path, m->model);
  });
}

camelu_status camelu_model_checksum(const camelu_model* m, uint64_t* out) {
  return guarded([&] {
    require_arg(m != nullptr && out != nullptr, "m and out");
    *out = camelu::parameter_checksum(m->model);
  });
}

size_t camelu_model_parameter_count(const camelu_model* m) { return m ? m->model.parameter_count() : 0; }
void camelu_model_free(camelu_model* m) { delete m; }

camelu_status camelu_evaluate(const camelu_model* m, const camelu_dataset* ds, size_t episodes, size_t n_way,
                              size_t k_shot, size_t n_query, uint64_t seed, size_t threads, camelu_eval_result* out) {
  return guarded([&] {
    require_arg(m != nullptr && ds != nullptr && out != nullptr, "m, ds and out");
    const camelu::EvalResult r =
        camelu::evaluate(m->model, ds->ds, episodes, n_way, k_shot, n_query, seed, threads == 0 ? 1 : threads);
    *out = camelu_eval_result{r.mean, r.stderr_, r.per_episode.size(), r.checksum_before, r.checksum_after, r.tokens};
  });
}

camelu_status camelu_export_embeddings(const camelu_model* m, const camelu_dataset* ds, size_t n_way, size_t k_shot,
                                       size_t n_query, uint64_t seed, const char* path, char** summary_json) {
  return guarded([&] {
    require_arg(m != nullptr && ds != nullptr && path != nullptr, "m, ds and path");
    const camelu::Episode ep = camelu::build_test_episode(ds->ds, n_way, k_shot, n_query, seed);
    const camelu::EpisodeEmbedding emb = camelu::embed_episode(m->model.extractor(), ep, &ds->ds);
    const camelu::ForwardOutput q = camelu::forward(m->model, ep, emb);
    // Transformer space for a support image: its final-position state when it
    // stands in as the query of the same episode.
    const camelu::ForwardOutput s =
        camelu::forward(m->model, emb.support, ep.support_labels, emb.support, ep.n_way);

    camelu::cmlt::Bundle b = camelu::episode_to_bundle(ep);
    b.header["kind"] = "embeddings";
    b.add("support_features", emb.support);
    b.add("query_features", emb.query);
    b.add("support_hidden", s.query_hidden);
    b.add("query_hidden", q.query_hidden);
    b.add("query_logits", q.logits);
    camelu::cmlt::write_bundle(path, b);

    auto summarize = [&](const camelu::Tensor& sup, const camelu::Tensor& qry) {
      const camelu::CentroidDistances cd = camelu::centroid_distances(sup, ep.support_labels, qry, ep.n_way);
      const double others = static_cast<double>(std::max<size_t>(1, ep.n_way - 1));
      double hit = 0.0, own = 0.0, other = 0.0;
      for (size_t i = 0; i < qry.rows(); ++i) {
        const auto label = static_cast<size_t>(ep.query_labels[i]);
        hit += cd.nearest[i] == label ? 1.0 : 0.0;
        own += cd.distances.at(i, label);
        for (size_t n = 0; n < ep.n_way; ++n)
          if (n != label) other += cd.distances.at(i, n) / others;
      }
      const double nq = static_cast<double>(qry.rows());
      return json{{"nearest_centroid_accuracy", hit / nq},
                  {"mean_distance_own", own / nq},
                  {"mean_distance_other", other / nq}};
    };
    if (summary_json) {
      const json summary{{"extractor", summarize(emb.support, emb.query)},
                         {"transformer", summarize(s.query_hidden, q.query_hidden)},
                         {"episode_accuracy", camelu::episode_accuracy(q.logits, ep.query_labels)}};
      *summary_json = dup_string(summary.dump());
    }
  });
}

camelu_status camelu_fit_phases(const double* xs, const double* ys, size_t n, double fraction, camelu_phase_fit* out) {
  return guarded([&] {
    require_arg(xs != nullptr && ys != nullptr && out != nullptr, "xs, ys and out");
    const camelu::LogisticFit f = camelu::fit_logistic({xs, n}, {ys, n});
    *out = to_c(f, camelu::phase_boundaries(f, fraction));
  });
}

camelu_status camelu_phases_from_metrics(const char* csv_path, size_t val_index, double fraction, const char* title,
                                         camelu_phase_fit* out, char** json_out, char** svg_out) {
  return guarded([&] {
    require_arg(csv_path != nullptr, "csv_path");
    const camelu::MetricsLog log = camelu::MetricsLog::from_csv(read_text(csv_path));
    const std::vector<double> acc = log.accuracy_series(val_index);
    const std::vector<double> ys = camelu::relative_accuracy(acc);
    std::vector<double> xs;
    for (const auto& r : log.records) xs.push_back(static_cast<double>(r.epoch + 1));
    const camelu::LogisticFit f = camelu::fit_logistic(xs, ys);
    const camelu::PhaseBoundaries p = camelu::phase_boundaries(f, fraction);
    if (out) *out = to_c(f, p);
    if (json_out) {
      json j = camelu::to_json(f, p);
      j["validation"] = log.val_names.at(val_index);
      j["points"] = xs.size();
      *json_out = dup_string(j.dump(2));
    }
    if (svg_out) *svg_out = dup_string(camelu::phase_plot_svg(xs, ys, f, p, title ? title : log.val_names.at(val_index)));
  });
}

}  // extern "C"
