// End-to-end checks of the command-line tool, run as a subprocess.

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
  json stdout_json() const { return json::parse(out); }
  json stderr_last_json() const {
    std::istringstream in(err);
    std::string line, last;
    while (std::getline(in, line))
      if (!line.empty()) last = line;
    return json::parse(last);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path root = fs::temp_directory_path() / "camelu_cli_test" / name;
  fs::remove_all(root);
  fs::create_directories(root);
  return root;
}

Run cli(const std::string& args) {
  const fs::path dir = fs::temp_directory_path() / "camelu_cli_test";
  fs::create_directories(dir);
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd =
      std::string("\"") + CAMELU_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Five classes of eight 16x16 images, labeled.
fs::path small_dataset(const std::string& name, std::size_t first_class = 0, bool unlabeled = false) {
  const fs::path dir = scratch(name);
  const Run r = cli("synth-data --out " + q(dir) + " --classes 5 --per-class 8 --size 16 --first-class " +
                    std::to_string(first_class) + (unlabeled ? " --unlabeled" : ""));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return dir;
}

const char* kTinyConfig =
    "# tiny run\n"
    "epochs = 2\n"
    "episodes_per_epoch = 3\n"
    "n_way = 3\n"
    "n_query = 6\n"
    "lr.warmup_steps = 2\n"
    "val.episodes = 2\n"
    "val.n_way = 3\n"
    "val.n_query = 6\n"
    "model.n_max = 3\n"
    "model.d_label = 8\n"
    "model.layers = 1\n"
    "model.heads = 2\n"
    "extractor.conv_layers = 2\n"
    "extractor.conv_channels = 8\n";

fs::path write_config(const fs::path& dir, const fs::path& train, const fs::path& val, const std::string& extra = "") {
  const fs::path path = dir / "run.cfg";
  std::ofstream(path) << kTinyConfig << "train.dataset = " << train.string() << "\nval.dataset = " << val.string()
                      << "\n"
                      << extra;
  return path;
}

}  // namespace

TEST_CASE("collision prints the closed-form probability") {
  const Run r = cli("collision 964 1280 5");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json j = r.stdout_json();
  CHECK(j["probability"].get<double>() == doctest::Approx(0.0104).epsilon(0.05));
  CHECK(j["config"]["classes"] == 964);
  CHECK(j["config"]["n_way"] == 5);
}

TEST_CASE("synth-data writes a deterministic manifest") {
  const fs::path a = small_dataset("synth_a");
  const fs::path b = small_dataset("synth_b");
  const json m = json::parse(slurp(a / "manifest.json"));
  CHECK(m["items"].size() == 40);
  CHECK(m["labeled"] == true);
  const json cfg = json::parse(slurp(a / "resolved.json"));
  CHECK(cfg["per_class"] == 8);
  CHECK(cfg["seed"] == 0);
  for (const auto& it : m["items"]) CHECK(it.contains("label"));
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  for (const auto& it : m["items"]) {
    const std::string file = it["file"];
    REQUIRE(slurp(a / file) == slurp(b / file));
  }
}

TEST_CASE("synth-data --unlabeled omits labels") {
  const fs::path dir = small_dataset("synth_unlabeled", 0, true);
  const json m = json::parse(slurp(dir / "manifest.json"));
  CHECK(m["labeled"] == false);
  for (const auto& it : m["items"]) CHECK_FALSE(it.contains("label"));
}

TEST_CASE("make-episodes writes one bundle per episode and a resolved config") {
  const fs::path data = small_dataset("episodes_data", 0, true);
  const fs::path out = scratch("episodes_out");
  const Run r = cli("make-episodes --data " + q(data) + " --out " + q(out) +
                    " --count 4 --n-way 3 --n-query 6 --seed 9");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::size_t bundles = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().extension() == ".cmlt") ++bundles;
  CHECK(bundles == 4);
  const json cfg = json::parse(slurp(out / "resolved.json"));
  CHECK(cfg["n_way"] == 3);
  CHECK(cfg["seed"] == 9);
  CHECK(r.stdout_json()["episodes"].size() == 4);

  const fs::path again = scratch("episodes_again");
  REQUIRE(cli("make-episodes --data " + q(data) + " --out " + q(again) + " --count 4 --n-way 3 --n-query 6 --seed 9")
              .code == 0);
  CHECK(slurp(out / "episode_00003.cmlt") == slurp(again / "episode_00003.cmlt"));
}

TEST_CASE("ssim over a dataset favours pixel mixing") {
  const fs::path data = small_dataset("ssim_data");
  const Run r = cli("ssim --data " + q(data) + " --pairs 40");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream rows(r.out);
  std::string header, row;
  std::getline(rows, header);
  std::getline(rows, row);
  CHECK(header == "data,pairs,lambda,seed,mssim_pixel,mssim_patch");
  std::vector<std::string> cells;
  std::stringstream cs(row);
  for (std::string c; std::getline(cs, c, ',');) cells.push_back(c);
  REQUIRE(cells.size() == 6);
  CHECK(cells[1] == "40");
  CHECK(std::stod(cells[4]) > std::stod(cells[5]));
}

TEST_CASE("ssim of two image files is one CSV row") {
  const fs::path data = small_dataset("ssim_files");
  const json m = json::parse(slurp(data / "manifest.json"));
  const fs::path a = data / m["items"][0]["file"].get<std::string>();
  const fs::path b = data / m["items"][9]["file"].get<std::string>();
  const Run self = cli("ssim --a " + q(a) + " --b " + q(a));
  REQUIRE_MESSAGE(self.code == 0, self.err);
  CHECK(self.out.rfind("a,b,ssim\n", 0) == 0);
  CHECK(std::stod(self.out.substr(self.out.rfind(',') + 1)) == doctest::Approx(1.0).epsilon(1e-12));
  const Run ab = cli("ssim --a " + q(a) + " --b " + q(b));
  const Run ba = cli("ssim --a " + q(b) + " --b " + q(a));
  REQUIRE(ab.code == 0);
  const double x = std::stod(ab.out.substr(ab.out.rfind(',') + 1)), y = std::stod(ba.out.substr(ba.out.rfind(',') + 1));
  CHECK(x < 1.0);
  CHECK(std::abs(x - y) <= 1e-12);
  CHECK(cli("ssim --a " + q(a)).code == 64);
}

TEST_CASE("phases recovers the reference curve boundaries") {
  const fs::path out = scratch("phases");
  const Run r = cli("phases --metrics " + q(fs::path(CAMELU_DATA_DIR) / "reference_curve.csv") + " --out " + q(out) +
                    " --title reference");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json j = r.stdout_json();
  CHECK(j["learn_epoch"] == 15);
  CHECK(j["gen_epoch"].get<long>() >= 28);
  CHECK(j["gen_epoch"].get<long>() <= 29);
  CHECK(fs::exists(out / "fit.json"));
  CHECK(fs::exists(out / "resolved.json"));
  CHECK(slurp(out / "phases.svg").rfind("<svg", 0) != std::string::npos);
}

TEST_CASE("config errors name the key and line") {
  const fs::path dir = scratch("bad_config");
  const fs::path cfg = dir / "bad.cfg";
  std::ofstream(cfg) << "epochs = 2\n# comment\nmix.alpha = lots\n";
  const Run r = cli("train --config " + q(cfg) + " --out " + q(dir / "run"));
  CHECK(r.code == 4);
  const json e = r.stderr_last_json();
  CHECK(e["error"] == "config");
  const std::string msg = e["message"];
  CHECK(msg.find("line 3") != std::string::npos);
  CHECK(msg.find("mix.alpha") != std::string::npos);

  const Run u = cli("train --set bogus=1 --out " + q(dir / "run"));
  CHECK(u.code == 4);
  CHECK(u.stderr_last_json()["message"].get<std::string>().find("bogus") != std::string::npos);

  const Run usage = cli("train --set novalue --out " + q(dir / "run"));
  CHECK(usage.code == 64);
}

TEST_CASE("an untrained checkpoint scores at chance") {
  const fs::path train = small_dataset("chance_train", 0, true);
  const fs::path val = small_dataset("chance_val", 5);
  const fs::path run = scratch("chance_run");
  const fs::path cfg = write_config(run, train, val, "model.n_max = 5\n");
  const Run init = cli("train --config " + q(cfg) + " --out " + q(run / "out") + " --init-only");
  REQUIRE_MESSAGE(init.code == 0, init.err);
  const Run ev = cli("eval --checkpoint " + q(run / "out" / "checkpoint.cmlt") + " --data " + q(val) +
                     " --episodes 60 --n-way 5 --n-query 5");
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  const json j = ev.stdout_json();
  CHECK(j["accuracy"].get<double>() == doctest::Approx(0.2).epsilon(0.5));
  CHECK(j["parameters_unchanged"] == true);
}

TEST_CASE("training replays byte for byte from its resolved config") {
  const fs::path train = small_dataset("replay_train", 0, true);
  const fs::path val = small_dataset("replay_val", 5);
  const fs::path run = scratch("replay_run");
  const fs::path cfg = write_config(run, train, val);
  const Run first = cli("train --config " + q(cfg) + " --out " + q(run / "a"));
  REQUIRE_MESSAGE(first.code == 0, first.err);
  const json done = first.stdout_json();
  CHECK(done.contains("checksum"));
  CHECK(first.stderr_last_json()["epoch"] == 1);

  const Run second = cli("train --config " + q(run / "a" / "config.resolved.txt") + " --out " + q(run / "b"));
  REQUIRE_MESSAGE(second.code == 0, second.err);
  CHECK(slurp(run / "a" / "config.resolved.txt") == slurp(run / "b" / "config.resolved.txt"));
  CHECK(slurp(run / "a" / "metrics.csv") == slurp(run / "b" / "metrics.csv"));
  CHECK(slurp(run / "a" / "checkpoint.cmlt") == slurp(run / "b" / "checkpoint.cmlt"));
  CHECK(second.stdout_json()["checksum"] == done["checksum"]);
}

TEST_CASE("eval can export embeddings") {
  const fs::path train = small_dataset("export_train", 0, true);
  const fs::path val = small_dataset("export_val", 5);
  const fs::path run = scratch("export_run");
  const fs::path cfg = write_config(run, train, val);
  REQUIRE(cli("train --config " + q(cfg) + " --out " + q(run / "out") + " --init-only").code == 0);
  const Run ev = cli("eval --checkpoint " + q(run / "out" / "checkpoint.cmlt") + " --data " + q(val) +
                     " --episodes 4 --n-way 3 --n-query 6 --export " + q(run / "emb.cmlt"));
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(fs::exists(run / "emb.cmlt"));
  CHECK(ev.stdout_json()["export"].contains("centroids"));
}

TEST_CASE("missing inputs report io errors") {
  const Run r = cli("eval --checkpoint /nonexistent/ckpt.cmlt --data /nonexistent");
  CHECK(r.code == 5);
  CHECK(r.stderr_last_json()["error"] == "io");
}
