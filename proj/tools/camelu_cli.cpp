// Command-line front end. Talks to the library only through camelu.h.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "camelu/camelu.h"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Thrown after a failed library call; main() turns it into error JSON.
struct CallFailed {
  camelu_status status;
};

void check(camelu_status s) {
  if (s != CAMELU_OK) throw CallFailed{s};
}

struct UsageError {
  std::string message;
};

void print_error(const std::string& kind, const std::string& message, const json& detail = json::object()) {
  json j{{"error", kind}, {"message", message}};
  if (detail.is_object() && !detail.empty()) j["detail"] = detail;
  std::cerr << j.dump() << std::endl;
}

std::string take(char* s) {
  std::string out = s ? s : "";
  camelu_string_free(s);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError{"cannot write " + path.string()};
  out << text;
}

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

struct Handles {
  camelu_dataset* ds = nullptr;
  camelu_config* cfg = nullptr;
  camelu_model* model = nullptr;
  ~Handles() {
    camelu_dataset_free(ds);
    camelu_config_free(cfg);
    camelu_model_free(model);
  }
};

// ---- synth-data -----------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t classes = 5, per_class = 20, size = 32, channels = 3, first_class = 0;
  std::uint64_t seed = 0;
  bool unlabeled = false;
};

json to_json(const SynthArgs& a) {
  return {{"command", "synth-data"}, {"out", a.out},         {"classes", a.classes},
          {"per_class", a.per_class}, {"size", a.size},       {"channels", a.channels},
          {"first_class", a.first_class}, {"seed", a.seed}, {"unlabeled", a.unlabeled}};
}

void run_synth(const SynthArgs& a) {
  Handles h;
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "resolved.json", to_json(a).dump(2) + "\n");
  check(camelu_dataset_synthetic(a.classes, a.per_class, a.size, a.channels, a.seed, a.first_class, a.unlabeled ? 1 : 0,
                                 &h.ds));
  check(camelu_dataset_save(h.ds, a.out.c_str()));
  emit({{"config", to_json(a)}, {"items", camelu_dataset_size(h.ds)}, {"labeled", camelu_dataset_labeled(h.ds) == 1}});
}

// ---- make-episodes --------------------------------------------------------

struct EpisodeArgs {
  std::string data, out, mode = "camelu", mix_mode = "pixel";
  std::size_t count = 1, n_way = 5, k_shot = 1, n_query = 25, aug_count = 3;
  double alpha = 1.0, beta = 1.0, lo = 0.0, hi = 0.5;
  std::optional<double> fixed_lambda;
  std::uint64_t seed = 0;
};

json episode_options(const EpisodeArgs& a) {
  json j{{"mode", a.mode},
         {"n_way", a.n_way},
         {"k_shot", a.k_shot},
         {"n_query", a.n_query},
         {"aug_count", a.aug_count},
         {"mix", {{"alpha", a.alpha}, {"beta", a.beta}, {"lo", a.lo}, {"hi", a.hi}, {"mode", a.mix_mode}}}};
  if (a.fixed_lambda) j["fixed_lambda"] = *a.fixed_lambda;
  return j;
}

void run_make_episodes(const EpisodeArgs& a) {
  Handles h;
  json cfg = episode_options(a);
  cfg["command"] = "make-episodes";
  cfg["data"] = a.data;
  cfg["out"] = a.out;
  cfg["count"] = a.count;
  cfg["seed"] = a.seed;
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "resolved.json", cfg.dump(2) + "\n");
  check(camelu_dataset_load(a.data.c_str(), &h.ds));
  const std::string opts = episode_options(a).dump();
  json files = json::array();
  for (std::size_t i = 0; i < a.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "episode_%05zu.cmlt", i);
    const fs::path path = fs::path(a.out) / name;
    char* summary = nullptr;
    check(camelu_episode_write(h.ds, opts.c_str(), camelu_derive_seed(a.seed, "episode", i), path.string().c_str(),
                               &summary));
    const json s = json::parse(take(summary));
    std::size_t warnings = s["provenance"]["warnings"].size();
    files.push_back({{"file", name}, {"variant", s["provenance"]["variant"]}, {"warnings", warnings}});
  }
  emit({{"config", cfg}, {"episodes", files}});
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, resume;
  std::vector<std::string> sets;
  std::optional<std::size_t> threads;
  bool init_only = false;
};

void on_epoch(void*, std::size_t epoch, double loss, double lr, const double* acc, const double* se, std::size_t n_val,
              double seconds) {
  json j{{"epoch", epoch}, {"loss", loss}, {"lr", lr}, {"seconds", seconds}};
  j["accuracy"] = std::vector<double>(acc, acc + n_val);
  j["stderr"] = std::vector<double>(se, se + n_val);
  std::cerr << j.dump() << std::endl;
}

void run_train(const TrainArgs& a) {
  Handles h;
  if (a.config.empty()) check(camelu_config_new(&h.cfg));
  else check(camelu_config_load(a.config.c_str(), &h.cfg));
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError{"--set expects key=value, got '" + kv + "'"};
    check(camelu_config_set(h.cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  if (a.threads) check(camelu_config_set(h.cfg, "threads", std::to_string(*a.threads).c_str()));
  fs::create_directories(a.out);
  char* text = nullptr;
  check(camelu_config_format(h.cfg, &text));
  const std::string resolved = take(text);

  if (a.init_only) {
    write_text(fs::path(a.out) / "config.resolved.txt", resolved);
    check(camelu_model_init(h.cfg, &h.model));
    const fs::path ckpt = fs::path(a.out) / "checkpoint.cmlt";
    check(camelu_model_save(h.model, ckpt.string().c_str()));
    std::uint64_t sum = 0;
    check(camelu_model_checksum(h.model, &sum));
    emit({{"checkpoint", ckpt.string()}, {"parameters", camelu_model_parameter_count(h.model)}, {"checksum", sum},
          {"trained", false}});
    return;
  }
  check(camelu_train(h.cfg, a.out.c_str(), a.resume.empty() ? nullptr : a.resume.c_str(), on_epoch, nullptr,
                     &h.model));
  std::uint64_t sum = 0;
  check(camelu_model_checksum(h.model, &sum));
  emit({{"checkpoint", (fs::path(a.out) / "checkpoint.cmlt").string()},
        {"metrics", (fs::path(a.out) / "metrics.csv").string()},
        {"parameters", camelu_model_parameter_count(h.model)},
        {"checksum", sum}});
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, export_path;
  std::size_t episodes = 200, n_way = 5, k_shot = 1, n_query = 25, threads = 1;
  std::uint64_t seed = 0;
};

void run_eval(const EvalArgs& a) {
  Handles h;
  check(camelu_model_load(a.checkpoint.c_str(), &h.model));
  check(camelu_dataset_load(a.data.c_str(), &h.ds));
  camelu_eval_result r{};
  check(camelu_evaluate(h.model, h.ds, a.episodes, a.n_way, a.k_shot, a.n_query, a.seed, a.threads, &r));
  json out{{"config",
            {{"command", "eval"}, {"checkpoint", a.checkpoint}, {"data", a.data}, {"episodes", a.episodes},
             {"n_way", a.n_way}, {"k_shot", a.k_shot}, {"n_query", a.n_query}, {"seed", a.seed},
             {"threads", a.threads}}},
           {"accuracy", r.mean},
           {"stderr", r.stderr_},
           {"episodes", r.episodes},
           {"tokens", r.tokens},
           {"checksum_before", r.checksum_before},
           {"checksum_after", r.checksum_after},
           {"parameters_unchanged", r.checksum_before == r.checksum_after}};
  if (!a.export_path.empty()) {
    char* summary = nullptr;
    check(camelu_export_embeddings(h.model, h.ds, a.n_way, a.k_shot, a.n_query, camelu_derive_seed(a.seed, "export", 0),
                                   a.export_path.c_str(), &summary));
    out["export"] = {{"path", a.export_path}, {"centroids", json::parse(take(summary))}};
  }
  emit(out);
}

// ---- phases -----------------------------------------------------------------

struct PhaseArgs {
  std::string metrics, out, title;
  std::size_t column = 0;
  double fraction = 0.2;
};

void run_phases(const PhaseArgs& a) {
  char* js = nullptr;
  char* svg = nullptr;
  camelu_phase_fit fit{};
  check(camelu_phases_from_metrics(a.metrics.c_str(), a.column, a.fraction, a.title.empty() ? nullptr : a.title.c_str(),
                                   &fit, &js, &svg));
  json j = json::parse(take(js));
  const std::string plot = take(svg);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "resolved.json",
               json{{"command", "phases"}, {"metrics", a.metrics}, {"column", a.column}, {"fraction", a.fraction},
                    {"title", a.title}}
                       .dump(2) +
                   "\n");
    write_text(fs::path(a.out) / "fit.json", j.dump(2) + "\n");
    write_text(fs::path(a.out) / "phases.svg", plot);
  }
  emit(j);
}

// ---- ssim -------------------------------------------------------------------

struct SsimArgs {
  std::string a, b, data;
  std::size_t pairs = 200;
  double lambda = 0.25;
  std::uint64_t seed = 0;
};

// CSV field with quotes when it holds a separator, quote or newline.
std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Header line plus one row: the inputs, then the result.
void run_ssim(const SsimArgs& a) {
  if (!a.data.empty()) {
    Handles h;
    check(camelu_dataset_load(a.data.c_str(), &h.ds));
    double pixel = 0.0, patch = 0.0;
    check(camelu_mssim_compare(h.ds, a.pairs, a.lambda, a.seed, &pixel, &patch));
    std::cout << "data,pairs,lambda,seed,mssim_pixel,mssim_patch\n"
              << csv_field(a.data) << ',' << a.pairs << ',' << csv_number(a.lambda) << ',' << a.seed << ','
              << csv_number(pixel) << ',' << csv_number(patch) << std::endl;
    return;
  }
  if (a.a.empty() || a.b.empty()) throw UsageError{"ssim needs --a and --b, or --data"};
  double v = 0.0;
  check(camelu_ssim_files(a.a.c_str(), a.b.c_str(), &v));
  std::cout << "a,b,ssim\n" << csv_field(a.a) << ',' << csv_field(a.b) << ',' << csv_number(v) << std::endl;
}

// ---- collision ----------------------------------------------------------------

struct CollisionArgs {
  std::uint64_t classes = 0, per_class = 0, n_way = 0;
};

void run_collision(const CollisionArgs& a) {
  double p = 0.0;
  check(camelu_collision_probability(a.classes, a.per_class, a.n_way, &p));
  emit({{"config", {{"command", "collision"}, {"classes", a.classes}, {"per_class", a.per_class}, {"n_way", a.n_way}}},
        {"probability", p}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised episodic task synthesis and in-context few-shot learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(camelu_version()));

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-data", "Write a procedural shape dataset");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
  c_synth->add_option("--per-class", synth.per_class, "Images per class")->capture_default_str();
  c_synth->add_option("--size", synth.size, "Image side in pixels")->capture_default_str();
  c_synth->add_option("--channels", synth.channels, "1 or 3")->capture_default_str();
  c_synth->add_option("--first-class", synth.first_class, "Index of the first class")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Seed")->capture_default_str();
  c_synth->add_flag("--unlabeled", synth.unlabeled, "Omit labels from the manifest");

  EpisodeArgs ep;
  auto* c_ep = app.add_subcommand("make-episodes", "Export synthesized or test episodes");
  c_ep->add_option("--data", ep.data, "Dataset directory")->required();
  c_ep->add_option("--out", ep.out, "Output directory")->required();
  c_ep->add_option("--mode", ep.mode, "camelu, augment or test")->capture_default_str();
  c_ep->add_option("--count", ep.count, "Number of episodes")->capture_default_str();
  c_ep->add_option("--n-way", ep.n_way)->capture_default_str();
  c_ep->add_option("--k-shot", ep.k_shot)->capture_default_str();
  c_ep->add_option("--n-query", ep.n_query)->capture_default_str();
  c_ep->add_option("--aug-count", ep.aug_count)->capture_default_str();
  c_ep->add_option("--alpha", ep.alpha, "Beta shape alpha")->capture_default_str();
  c_ep->add_option("--beta", ep.beta, "Beta shape beta")->capture_default_str();
  c_ep->add_option("--lambda-lo", ep.lo)->capture_default_str();
  c_ep->add_option("--lambda-hi", ep.hi)->capture_default_str();
  c_ep->add_option("--mix-mode", ep.mix_mode, "pixel or patch")->capture_default_str();
  c_ep->add_option("--fixed-lambda", ep.fixed_lambda, "Use this lambda for every query");
  c_ep->add_option("--seed", ep.seed)->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", tr.config, "Flat key = value config file");
  c_train->add_option("--set", tr.sets, "Override one key, key=value; repeatable");
  c_train->add_option("--out", tr.out, "Run directory")->required();
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  c_train->add_option("--threads", tr.threads, "Worker thread cap");
  c_train->add_flag("--init-only", tr.init_only, "Write the untrained step-0 checkpoint and stop");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on test episodes");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--data", ev.data, "Labeled dataset directory")->required();
  c_eval->add_option("--episodes", ev.episodes)->capture_default_str();
  c_eval->add_option("--n-way", ev.n_way)->capture_default_str();
  c_eval->add_option("--k-shot", ev.k_shot)->capture_default_str();
  c_eval->add_option("--n-query", ev.n_query)->capture_default_str();
  c_eval->add_option("--seed", ev.seed)->capture_default_str();
  c_eval->add_option("--threads", ev.threads)->capture_default_str();
  c_eval->add_option("--export", ev.export_path, "Write one episode's embeddings to this CMLT file");

  PhaseArgs ph;
  auto* c_ph = app.add_subcommand("phases", "Fit the logistic curve and phase boundaries of a metrics log");
  c_ph->add_option("--metrics", ph.metrics, "metrics.csv")->required();
  c_ph->add_option("--column", ph.column, "Validation column index")->capture_default_str();
  c_ph->add_option("--fraction", ph.fraction, "Growth-rate threshold fraction")->capture_default_str();
  c_ph->add_option("--out", ph.out, "Directory for fit.json and phases.svg");
  c_ph->add_option("--title", ph.title, "Plot title");

  SsimArgs ss;
  auto* c_ss = app.add_subcommand("ssim", "SSIM of two images, or pixel vs patch mSSIM over a dataset");
  c_ss->add_option("--a", ss.a, "Image tensor file");
  c_ss->add_option("--b", ss.b, "Image tensor file");
  c_ss->add_option("--data", ss.data, "Dataset directory");
  c_ss->add_option("--pairs", ss.pairs)->capture_default_str();
  c_ss->add_option("--lambda", ss.lambda)->capture_default_str();
  c_ss->add_option("--seed", ss.seed)->capture_default_str();

  CollisionArgs co;
  auto* c_co = app.add_subcommand("collision", "Probability that N draws share a class");
  c_co->add_option("classes", co.classes, "Number of classes C")->required();
  c_co->add_option("per_class", co.per_class, "Images per class m")->required();
  c_co->add_option("n_way", co.n_way, "Draws N")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 64;
  }

  try {
    if (c_synth->parsed()) run_synth(synth);
    else if (c_ep->parsed()) run_make_episodes(ep);
    else if (c_train->parsed()) run_train(tr);
    else if (c_eval->parsed()) run_eval(ev);
    else if (c_ph->parsed()) run_phases(ph);
    else if (c_ss->parsed()) run_ssim(ss);
    else if (c_co->parsed()) run_collision(co);
  } catch (const CallFailed& f) {
    print_error(camelu_last_error_kind(), camelu_last_error(), json::parse(camelu_last_error_detail(), nullptr, false));
    return static_cast<int>(f.status);
  } catch (const UsageError& e) {
    print_error("usage", e.message);
    return 64;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return static_cast<int>(CAMELU_E_INTERNAL);
  }
  return 0;
}
