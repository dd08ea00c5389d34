#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ost/checkpoint.hpp"
#include "ost/eval.hpp"

#include <Eigen/Geometry>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

using namespace ost;
namespace fs = std::filesystem;

namespace {

struct Paired {
  std::vector<Sequence> gts;
  std::vector<TrackResult> preds;
};

// Ground truth plus predictions perturbed enough to spread IoU/distance over
// their full ranges.
Paired random_paired(Index n_seqs, Index n_frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(-20.0, 20.0);
  std::uniform_real_distribution<double> len(1.0, 4.0);
  std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi);
  std::uniform_real_distribution<double> err(0.0, 1.0);

  Paired out;
  for (Index s = 0; s < n_seqs; ++s) {
    Sequence seq;
    seq.id = "seq" + std::to_string(s);
    TrackResult tr;
    tr.seq_id = seq.id;
    for (Index t = 0; t < n_frames; ++t) {
      Frame f;
      f.gt.center = {pos(rng), pos(rng), 0.1 * pos(rng)};
      f.gt.size = {len(rng), len(rng), len(rng)};
      f.gt.yaw = ang(rng);
      seq.frames.push_back(f);

      FramePrediction p;
      const double scale = err(rng) * 2.5;  // from near-perfect to hopeless
      p.box = f.gt;
      p.box.center += Eigen::Vector3d(scale * err(rng), scale * err(rng), 0.2 * err(rng));
      p.box.yaw = wrap_angle(p.box.yaw + 0.5 * scale * (err(rng) - 0.5));
      tr.frames.push_back(p);
    }
    out.gts.push_back(std::move(seq));
    out.preds.push_back(std::move(tr));
  }
  return out;
}

// Independent sweep with explicit loops over the 101 midpoint thresholds.
std::pair<double, double> sweep_oracle(const Paired& data) {
  std::vector<double> ious, dists;
  for (size_t s = 0; s < data.gts.size(); ++s) {
    for (size_t t = 1; t < data.gts[s].frames.size(); ++t) {
      ious.push_back(iou_3d(data.preds[s].frames[t].box, data.gts[s].frames[t].gt));
      dists.push_back(center_distance(data.preds[s].frames[t].box, data.gts[s].frames[t].gt));
    }
  }
  double success = 0.0, precision = 0.0;
  for (int i = 0; i < 101; ++i) {
    const double tau = (i + 0.5) / 101.0;
    int s_hits = 0, p_hits = 0;
    for (double v : ious) s_hits += v > tau ? 1 : 0;
    for (double v : dists) p_hits += v <= 2.0 * tau ? 1 : 0;
    success += static_cast<double>(s_hits) / static_cast<double>(ious.size());
    precision += static_cast<double>(p_hits) / static_cast<double>(dists.size());
  }
  return {100.0 * success / 101.0, 100.0 * precision / 101.0};
}

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

}  // namespace

TEST_CASE("evaluate matches an explicit threshold sweep") {
  const Paired data = random_paired(5, 9, 13);
  const MetricReport report = evaluate(data.preds, data.gts);
  const auto [success, precision] = sweep_oracle(data);

  CHECK(report.frames == 5 * 8);
  CHECK(report.success == doctest::Approx(success).epsilon(1e-9));
  CHECK(report.precision == doctest::Approx(precision).epsilon(1e-9));
  CHECK(report.success > 0.0);
  CHECK(report.success < 100.0);

  REQUIRE(report.success_curve.size() == 101);
  REQUIRE(report.precision_curve.size() == 101);
  for (size_t i = 1; i < 101; ++i) {
    CHECK(report.success_curve[i] <= report.success_curve[i - 1]);
    CHECK(report.precision_curve[i] >= report.precision_curve[i - 1]);
  }
  CHECK(report.iou_thresholds.front() == doctest::Approx(0.5 / 101.0));
  CHECK(report.dist_thresholds.back() == doctest::Approx(2.0 * 100.5 / 101.0));

  REQUIRE(report.per_sequence.size() == 5);
  for (size_t s = 0; s < 5; ++s) {
    double iou = 0.0, dist = 0.0;
    for (size_t t = 1; t < 9; ++t) {
      iou += iou_3d(data.preds[s].frames[t].box, data.gts[s].frames[t].gt);
      dist += center_distance(data.preds[s].frames[t].box, data.gts[s].frames[t].gt);
    }
    CHECK(report.per_sequence[s].frames == 8);
    CHECK(report.per_sequence[s].mean_iou == doctest::Approx(iou / 8.0).epsilon(1e-12));
    CHECK(report.per_sequence[s].mean_distance == doctest::Approx(dist / 8.0).epsilon(1e-12));
  }
}

TEST_CASE("evaluate pins the extremes") {
  Paired data = random_paired(3, 6, 19);

  SUBCASE("perfect predictions score 100/100") {
    for (size_t s = 0; s < data.gts.size(); ++s) {
      for (size_t t = 0; t < data.gts[s].frames.size(); ++t) {
        data.preds[s].frames[t].box = data.gts[s].frames[t].gt;
      }
    }
    const MetricReport report = evaluate(data.preds, data.gts);
    CHECK(report.success == 100.0);
    CHECK(report.precision == 100.0);
  }

  SUBCASE("hopeless predictions score 0/0") {
    for (TrackResult& tr : data.preds) {
      for (FramePrediction& p : tr.frames) p.box.center.x() += 1000.0;
    }
    const MetricReport report = evaluate(data.preds, data.gts);
    CHECK(report.success == 0.0);
    CHECK(report.precision == 0.0);
  }

  SUBCASE("a constant one-meter error halves precision") {
    for (size_t s = 0; s < data.gts.size(); ++s) {
      for (size_t t = 0; t < data.gts[s].frames.size(); ++t) {
        data.preds[s].frames[t].box = data.gts[s].frames[t].gt;
        data.preds[s].frames[t].box.center.x() += 1.0;
      }
    }
    const MetricReport report = evaluate(data.preds, data.gts);
    // 51 of the 101 midpoints of [0, 2] m lie at or above 1 m
    CHECK(report.precision == doctest::Approx(100.0 * 51.0 / 101.0).epsilon(1e-12));
    CHECK(std::abs(report.precision - 50.0) < 0.5);
  }
}

TEST_CASE("evaluate rejects misaligned inputs") {
  Paired data = random_paired(2, 5, 23);

  SUBCASE("unknown sequence id") {
    data.preds[1].seq_id = "mystery";
    CHECK_THROWS_WITH_AS(evaluate(data.preds, data.gts), doctest::Contains("mystery"),
                         std::invalid_argument);
  }

  SUBCASE("frame count mismatch") {
    data.preds[0].frames.pop_back();
    CHECK_THROWS_WITH_AS(evaluate(data.preds, data.gts), doctest::Contains("4 predictions"),
                         std::invalid_argument);
  }

  SUBCASE("no predictions means an empty report") {
    const MetricReport report = evaluate({}, data.gts);
    CHECK(report.frames == 0);
    CHECK(report.success == 0.0);
  }
}

TEST_CASE("scores are invariant under a global rigid transform") {
  Paired data = random_paired(4, 7, 29);
  const MetricReport before = evaluate(data.preds, data.gts);

  const Eigen::AngleAxisd rot(1.1, Eigen::Vector3d::UnitZ());
  const Eigen::Vector3d shift(40.0, -13.0, 2.0);
  auto move = [&](Box3D& b) {
    b.center = rot * b.center + shift;
    b.yaw = wrap_angle(b.yaw + 1.1);
  };
  for (Sequence& s : data.gts) {
    for (Frame& f : s.frames) move(f.gt);
  }
  for (TrackResult& tr : data.preds) {
    for (FramePrediction& p : tr.frames) move(p.box);
  }

  const MetricReport after = evaluate(data.preds, data.gts);
  CHECK(after.success == doctest::Approx(before.success).epsilon(1e-9));
  CHECK(after.precision == doctest::Approx(before.precision).epsilon(1e-9));
}

TEST_CASE("analytic parameter count matches the stored checkpoint") {
  ModelConfig cfg = tiny_config();
  const CostReport cost = count_params_flops(cfg);

  ModelParams params = ModelParams::init(cfg, 101);
  Index live = 0;
  for (const NamedParam& p : params.named()) live += p.tensor.numel();
  CHECK(cost.params == live);

  const fs::path dir =
      fs::temp_directory_path() / ("ost-eval-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string prefix = (dir / "ckpt").string();
  save_checkpoint(prefix, params.named());
  CHECK(checkpoint_element_count(prefix) == cost.params);
  fs::remove_all(dir);

  ModelConfig wider = cfg;
  wider.feature_dim = 16;
  ModelParams wide_params = ModelParams::init(wider, 102);
  Index wide_live = 0;
  for (const NamedParam& p : wide_params.named()) wide_live += p.tensor.numel();
  CHECK(count_params_flops(wider).params == wide_live);
}

TEST_CASE("transformer flops scale linearly in depth") {
  ModelConfig one = tiny_config();
  one.n_ttm_layers = 1;
  one.mfa_taps = {};
  ModelConfig two = tiny_config();
  two.n_ttm_layers = 2;
  two.mfa_taps = {16};
  ModelConfig three = tiny_config();
  three.n_ttm_layers = 3;
  three.mfa_taps = {8, 16};

  const CostReport r1 = count_params_flops(one);
  const CostReport r2 = count_params_flops(two);
  const CostReport r3 = count_params_flops(three);

  CHECK(r1.flops_ttm > 0);
  CHECK(r2.flops_ttm == 2 * r1.flops_ttm);
  CHECK(r3.flops_ttm == 3 * r1.flops_ttm);
  CHECK(static_cast<double>(r2.flops_ttm) / static_cast<double>(r1.flops_ttm) ==
        doctest::Approx(2.0).epsilon(1e-12));

  for (const CostReport& r : {r1, r2, r3}) {
    CHECK(r.flops_total == r.flops_local_encoder + r.flops_ttm + r.flops_mfa + r.flops_seg +
                               r.flops_bev_head);
  }
}

TEST_CASE("class-agnostic runs refuse leaky checkpoints") {
  const ModelConfig cfg = tiny_config();
  const ModelParams params = ModelParams::init(cfg, 103);
  const TrackerConfig tracker;
  const AgnosticSetting setting = agnostic_setting(1);  // holds out Car

  SynthConfig synth;
  synth.n_frames = 3;
  synth.surface_density = 15.0;
  synth.noise_points = 20;
  synth.n_distractors = 0;
  synth.seed = 51;
  const std::vector<Sequence> observed{synth_sequence(synth, "obs", "Pedestrian", 17)};
  synth.seed = 52;
  const std::vector<Sequence> unseen{synth_sequence(synth, "new", "Car", 18)};

  CHECK_THROWS_WITH_AS(
      run_class_agnostic(setting, {"Car", "Van"}, params, cfg, tracker, observed, unseen),
      doctest::Contains("holds out"), std::runtime_error);

  CHECK_THROWS_WITH_AS(run_class_agnostic(setting, {"Van"}, params, cfg, tracker, unseen,
                                          observed),
                       doctest::Contains("not held out"), std::runtime_error);

  const AgnosticReport report = run_class_agnostic(setting, {"Pedestrian", "Van", "Cyclist"},
                                                   params, cfg, tracker, observed, unseen);
  CHECK(report.setting == "setting-1");
  CHECK(report.observed.frames == 2);
  CHECK(report.unseen.frames == 2);
}
