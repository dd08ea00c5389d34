#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ost/checkpoint.hpp"
#include "ost/train.hpp"

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace ost;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_template = 16;
  cfg.n_search = 32;
  cfg.feature_dim = 8;
  cfg.n_heads = 2;
  cfg.n_ttm_layers = 2;
  cfg.mfa_taps = {16};
  cfg.gcn_neighbors = 4;
  cfg.gcn_radius = 0.8;
  cfg.conv_channels = 8;
  cfg.bev_grid.pixel = 0.6;
  return cfg;
}

TrainConfig tiny_train(const ModelConfig& cfg) {
  TrainConfig tc;
  tc.batch = 2;
  tc.lr = 3e-3;
  tc.workers = 1;
  tc.log_every = 1;
  tc.sample.n_template = cfg.n_template;
  tc.sample.n_search = cfg.n_search;
  return tc;
}

std::vector<Sequence> tiny_data(int n_seqs, std::uint64_t seed) {
  SynthConfig synth;
  synth.n_frames = 6;
  synth.surface_density = 10.0;
  synth.n_distractors = 0;
  synth.noise_points = 40;
  std::vector<Sequence> out;
  for (int i = 0; i < n_seqs; ++i) {
    synth.seed = seed + static_cast<std::uint64_t>(i);
    out.push_back(synth_sequence(synth, "t" + std::to_string(i), "Car", i));
  }
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir =
      fs::temp_directory_path() / ("ost-train-" + std::to_string(::getpid()) + "-" + name);
  fs::remove_all(dir);
  return dir;
}

struct LogRow {
  Index step;
  double seg, center, offset, z, total;
};

std::vector<LogRow> read_log(const fs::path& dir, bool expect_header = true) {
  std::ifstream in((dir / "train_log.csv").string());
  REQUIRE(in.good());
  std::string line;
  if (expect_header) {
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "step,seg,center,offset,z,total");
  }
  std::vector<LogRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LogRow r;
    char comma;
    std::istringstream ls(line);
    ls >> r.step >> comma >> r.seg >> comma >> r.center >> comma >> r.offset >> comma >> r.z >>
        comma >> r.total;
    REQUIRE_FALSE(ls.fail());
    rows.push_back(r);
  }
  return rows;
}

bool same_params(ModelParams& a, ModelParams& b) {
  const auto na = a.named(), nb = b.named();
  if (na.size() != nb.size()) return false;
  for (size_t i = 0; i < na.size(); ++i) {
    if (na[i].name != nb[i].name) return false;
    if ((na[i].tensor.values() != nb[i].tensor.values()).any()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("a short run reduces the loss and logs every step") {
  const ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 1);
  const std::vector<Sequence> data = tiny_data(2, 60);
  TrainConfig tc = tiny_train(cfg);
  tc.steps = 60;

  const fs::path dir = fresh_dir("descent");
  const TrainOutcome outcome = train_model(params, cfg, data, tc, dir.string());

  CHECK(outcome.steps_done == 60);
  CHECK(std::isfinite(outcome.final_total_loss));

  const std::vector<LogRow> rows = read_log(dir);
  REQUIRE(rows.size() == 60);
  CHECK(rows.front().step == 0);
  CHECK(rows.back().step == 59);
  CHECK(rows.back().total == doctest::Approx(outcome.final_total_loss).epsilon(1e-4));
  for (const LogRow& r : rows) {
    CHECK(std::isfinite(r.total));
    // the log keeps 6 significant digits
    CHECK(r.total ==
          doctest::Approx(r.seg + r.center + r.offset + 2.0 * r.z).epsilon(1e-4));
  }
  CHECK(rows.back().total < rows.front().total);
  CHECK(rows.back().total < 0.9 * rows.front().total);

  CHECK(fs::exists(dir / "ckpt.json"));
  CHECK(fs::exists(dir / "ckpt.bin"));
  CHECK(fs::exists(dir / "ckpt.state.bin"));
  CHECK(fs::exists(dir / "train_manifest.json"));

  Index live = 0;
  for (const NamedParam& p : params.named()) live += p.tensor.numel();
  CHECK(checkpoint_element_count((dir / "ckpt").string()) == live);

  // the sidecar leads with the step counter
  std::ifstream state((dir / "ckpt.state.bin").string(), std::ios::binary);
  double steps_done = 0.0;
  state.read(reinterpret_cast<char*>(&steps_done), sizeof(double));
  CHECK(steps_done == 60.0);

  fs::remove_all(dir);
}

TEST_CASE("log_every thins the log but keeps the last step") {
  const ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 2);
  TrainConfig tc = tiny_train(cfg);
  tc.steps = 30;
  tc.log_every = 7;

  const fs::path dir = fresh_dir("logevery");
  train_model(params, cfg, tiny_data(1, 70), tc, dir.string());

  const std::vector<LogRow> rows = read_log(dir);
  REQUIRE(rows.size() == 6);  // steps 0, 7, 14, 21, 28 and the final 29
  CHECK(rows[4].step == 28);
  CHECK(rows[5].step == 29);
  fs::remove_all(dir);
}

TEST_CASE("resuming from a checkpoint reproduces the unbroken run exactly") {
  const ModelConfig cfg = tiny_config();
  const std::vector<Sequence> data = tiny_data(2, 80);

  TrainConfig full = tiny_train(cfg);
  full.steps = 8;
  full.workers = 2;
  full.seed = 5;

  ModelParams straight = ModelParams::init(cfg, 3);
  const fs::path dir_a = fresh_dir("unbroken");
  const TrainOutcome unbroken = train_model(straight, cfg, data, full, dir_a.string());

  ModelParams resumed = ModelParams::init(cfg, 3);
  TrainConfig half = full;
  half.steps = 4;
  const fs::path dir_b = fresh_dir("first-half");
  const TrainOutcome first = train_model(resumed, cfg, data, half, dir_b.string());
  CHECK(first.steps_done == 4);

  const fs::path dir_c = fresh_dir("second-half");
  const TrainOutcome second = train_model(resumed, cfg, data, full, dir_c.string(),
                                          (dir_b / "ckpt").string());

  CHECK(second.steps_done == 8);
  CHECK(second.final_total_loss == unbroken.final_total_loss);
  CHECK(same_params(resumed, straight));

  // the continued log starts past the break with no second header
  const std::vector<LogRow> tail = read_log(dir_c, /*expect_header=*/false);
  REQUIRE_FALSE(tail.empty());
  CHECK(tail.front().step == 4);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  fs::remove_all(dir_c);
}

TEST_CASE("repeated runs with the same seed and worker count match bitwise") {
  const ModelConfig cfg = tiny_config();
  const std::vector<Sequence> data = tiny_data(2, 90);
  TrainConfig tc = tiny_train(cfg);
  tc.steps = 5;
  tc.workers = 2;

  ModelParams a = ModelParams::init(cfg, 4);
  ModelParams b = ModelParams::init(cfg, 4);
  const fs::path dir_a = fresh_dir("rep-a");
  const fs::path dir_b = fresh_dir("rep-b");
  const TrainOutcome oa = train_model(a, cfg, data, tc, dir_a.string());
  const TrainOutcome ob = train_model(b, cfg, data, tc, dir_b.string());

  CHECK(oa.final_total_loss == ob.final_total_loss);
  CHECK(same_params(a, b));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("train manifests record the categories seen") {
  const fs::path dir = fresh_dir("manifest");
  fs::create_directories(dir);
  const std::string path = (dir / "train_manifest.json").string();

  std::vector<Sequence> data = tiny_data(2, 100);
  data[0].category = "Van";
  data[1].category = "Cyclist";
  Sequence extra = data[0];
  extra.id = "dup";
  data.push_back(extra);  // Van again, recorded once

  write_train_manifest(path, data);
  CHECK(read_train_manifest_categories(path) == std::vector<std::string>{"Van", "Cyclist"});
  CHECK_THROWS_AS(read_train_manifest_categories((dir / "absent.json").string()),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("a non-finite loss aborts with the failing step") {
  const ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 6);
  // poison a head bias: it reaches the loss without passing a relu
  params.head_offset.bias.leaf_values()[0] = std::nan("");

  TrainConfig tc = tiny_train(cfg);
  tc.steps = 3;
  const fs::path dir = fresh_dir("nan");
  CHECK_THROWS_WITH_AS(train_model(params, cfg, tiny_data(1, 110), tc, dir.string()),
                       doctest::Contains("non-finite loss at step 0"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("bad training inputs are rejected up front") {
  const ModelConfig cfg = tiny_config();
  ModelParams params = ModelParams::init(cfg, 7);
  TrainConfig tc = tiny_train(cfg);
  tc.steps = 1;
  const fs::path dir = fresh_dir("reject");

  CHECK_THROWS_WITH_AS(train_model(params, cfg, {}, tc, dir.string()),
                       doctest::Contains("no training sequences"), std::invalid_argument);

  std::vector<Sequence> stub = tiny_data(1, 120);
  stub[0].frames.resize(1);
  CHECK_THROWS_WITH_AS(train_model(params, cfg, stub, tc, dir.string()),
                       doctest::Contains("too short"), std::invalid_argument);

  TrainConfig bad = tc;
  bad.batch = 0;
  CHECK_THROWS_AS(train_model(params, cfg, tiny_data(1, 121), bad, dir.string()),
                  std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("worker resolution respects the environment cap") {
  CHECK(resolve_worker_count(3) == 3);
  ::setenv("OST_THREADS", "2", 1);
  CHECK(resolve_worker_count(5) == 2);
  CHECK(resolve_worker_count(1) == 1);
  ::unsetenv("OST_THREADS");
  CHECK(resolve_worker_count(5) == 5);
  CHECK(resolve_worker_count(0) >= 1);
}
