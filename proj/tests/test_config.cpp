#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ost/config.hpp"

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace ost;
namespace fs = std::filesystem;

TEST_CASE("config files parse sections, comments, and every value kind") {
  const ConfigFile cfg = ConfigFile::parse_string(R"(
top_level = 7
# full-line comment

[model]
feature_dim = 32           # trailing comment
gcn_radius = 0.45
mfa_taps = [64, 128]
mfa_direction = "shallow_to_deep"  # a "#" inside quotes stays: see below
note = "keep # this"

[train]
lr = 1e-3
resume = false
)");

  CHECK(cfg.has("top_level"));
  CHECK(cfg.get_index("top_level", 0) == 7);
  CHECK(cfg.get_index("model.feature_dim", 0) == 32);
  CHECK(cfg.get_double("model.gcn_radius", 0.0) == 0.45);
  CHECK(cfg.get_array("model.mfa_taps", {}) == std::vector<double>{64.0, 128.0});
  CHECK(cfg.get_string("model.mfa_direction", "") == "shallow_to_deep");
  CHECK(cfg.get_string("model.note", "") == "keep # this");
  CHECK(cfg.get_double("train.lr", 0.0) == 1e-3);
  CHECK(cfg.get_bool("train.resume", true) == false);

  CHECK(cfg.get_index("model.absent", 41) == 41);
  CHECK(cfg.get_string("absent", "fb") == "fb");
  CHECK_FALSE(cfg.has("model.absent"));

  const std::vector<std::string> keys = cfg.keys();
  CHECK(std::find(keys.begin(), keys.end(), "model.mfa_taps") != keys.end());
}

TEST_CASE("config files reject malformed lines with their origin") {
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("a = 1\na = 2\n", "dup.toml"),
                       doctest::Contains("dup.toml:2: duplicate key 'a'"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("just words\n"),
                       doctest::Contains("<string>:1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("[model\nx = 1\n"),
                       doctest::Contains("unterminated section"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("x = \"abc\n"),
                       doctest::Contains("unterminated string"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("x = [1, 2\n"),
                       doctest::Contains("unterminated array"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("x = [1, , 2]\n"),
                       doctest::Contains("empty array element"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("x = twelve\n"),
                       doctest::Contains("not a number"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("x =\n"), doctest::Contains("empty value"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(ConfigFile::parse_string("= 3\n"), doctest::Contains("empty key"),
                       std::runtime_error);

  const ConfigFile cfg = ConfigFile::parse_string("n = 3\nf = 3.5\ns = \"x\"\n");
  CHECK_THROWS_WITH_AS(cfg.get_index("f", 0), doctest::Contains("not an integer"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(cfg.get_double("s", 0.0), doctest::Contains("not a number"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(cfg.get_bool("n", false), doctest::Contains("not a boolean"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(cfg.get_array("n", {}), doctest::Contains("not an array"),
                       std::runtime_error);
}

TEST_CASE("config files round trip through disk") {
  const fs::path dir =
      fs::temp_directory_path() / ("ost-config-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path path = dir / "run.toml";
  {
    std::ofstream out(path.string());
    out << "[model]\nn_search = 256\n";
  }
  const ConfigFile cfg = ConfigFile::parse_file(path.string());
  CHECK(cfg.get_index("model.n_search", 0) == 256);

  {
    std::ofstream out(path.string());
    out << "[model]\nbroken\n";
  }
  CHECK_THROWS_WITH_AS(ConfigFile::parse_file(path.string()),
                       doctest::Contains((path.string() + ":2").c_str()), std::runtime_error);
  CHECK_THROWS_AS(ConfigFile::parse_file((dir / "missing.toml").string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("model overrides apply and validate") {
  ModelConfig model;
  const ConfigFile cfg = ConfigFile::parse_string(R"(
[model]
n_template = 64
n_search = 128
feature_dim = 32
n_heads = 4
n_ttm_layers = 3
mfa_taps = [32, 64]
mfa_direction = "deep_to_shallow"
gcn_neighbors = 8
gcn_radius = 0.5
conv_channels = 16
bev_extent = 3.2
bev_pixel = 0.2
bev_z_min = -1.5
bev_z_max = 1.5
)");
  apply_config(cfg, model);
  CHECK(model.n_template == 64);
  CHECK(model.n_search == 128);
  CHECK(model.feature_dim == 32);
  CHECK(model.mfa_taps == std::vector<Index>{32, 64});
  CHECK(model.mfa_direction == MfaDirection::DeepToShallow);
  CHECK(model.bev_grid.x_min == -3.2);
  CHECK(model.bev_grid.y_max == 3.2);
  CHECK(model.bev_grid.nx() == 32);
  CHECK(model.bev_grid.z_min == -1.5);

  ModelConfig untouched;
  apply_config(ConfigFile::parse_string(""), untouched);
  CHECK(untouched.n_search == 1024);  // defaults survive an empty file

  ModelConfig m2;
  CHECK_THROWS_WITH_AS(
      apply_config(ConfigFile::parse_string("[model]\nmfa_direction = \"sideways\"\n"), m2),
      doctest::Contains("sideways"), std::runtime_error);
  CHECK_THROWS_WITH_AS(apply_config(ConfigFile::parse_string("[model]\nwidth = 3\n"), m2),
                       doctest::Contains("unknown config key 'model.width'"),
                       std::runtime_error);
  // heads must divide the feature dim; validate() runs on every apply
  CHECK_THROWS_AS(
      apply_config(ConfigFile::parse_string("[model]\nfeature_dim = 30\nn_heads = 4\n"), m2),
      std::invalid_argument);
  // keys outside [model] are someone else's business
  ModelConfig m3;
  apply_config(ConfigFile::parse_string("[train]\nanything = 1\n"), m3);
  CHECK(m3.n_search == 1024);
}

TEST_CASE("train, tracker, and synth overrides apply") {
  TrainConfig train;
  TrackerConfig tracker;
  SynthConfig synth;
  const ConfigFile cfg = ConfigFile::parse_string(R"(
[train]
steps = 500
batch = 2
lr = 0.01
workers = 3
bev_window_radius = 1
jitter_xy = 0.2
weight_z = 4.0

[tracker]
search_margin_xy = 1.5
template_mode = "previous"

[synth]
n_frames = 10
target_size = [4.0, 1.8, 1.6]
noise_points = 12
)");
  apply_config(cfg, train);
  apply_config(cfg, tracker);
  apply_config(cfg, synth);

  CHECK(train.steps == 500);
  CHECK(train.batch == 2);
  CHECK(train.lr == 0.01);
  CHECK(train.workers == 3);
  CHECK(train.bev_window_radius == 1);
  CHECK(train.sample.jitter_xy == 0.2);
  CHECK(train.weights.z == 4.0);
  CHECK(train.weights.seg == 1.0);  // untouched default

  CHECK(tracker.search_margin_xy == 1.5);
  CHECK(tracker.template_mode == TrackerConfig::TemplateMode::Previous);

  CHECK(synth.n_frames == 10);
  CHECK(synth.target_size == Eigen::Vector3d(4.0, 1.8, 1.6));
  CHECK(synth.noise_points == 12);

  TrackerConfig t2;
  CHECK_THROWS_WITH_AS(
      apply_config(ConfigFile::parse_string("[tracker]\ntemplate_mode = \"latest\"\n"), t2),
      doctest::Contains("first or previous"), std::runtime_error);
  TrainConfig tr2;
  CHECK_THROWS_WITH_AS(apply_config(ConfigFile::parse_string("[train]\nmomentum = 0.9\n"), tr2),
                       doctest::Contains("unknown config key"), std::runtime_error);
  SynthConfig s2;
  CHECK_THROWS_WITH_AS(
      apply_config(ConfigFile::parse_string("[synth]\ntarget_size = [1, 2]\n"), s2),
      doctest::Contains("must be [l, w, h]"), std::runtime_error);
}
