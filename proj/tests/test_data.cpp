#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ost/data.hpp"

#include <Eigen/Geometry>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <string>
#include <vector>

using namespace ost;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir =
      fs::temp_directory_path() / ("ost-data-" + std::to_string(::getpid()) + "-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

PointCloud random_cloud_f32(Index n, std::uint64_t seed) {
  // Values quantized to float so the .bin round trip is exact.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-50.0, 50.0);
  PointCloud cloud;
  cloud.xyz.resize(n, 3);
  cloud.intensity.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) cloud.xyz(i, c) = static_cast<float>(dist(rng));
    cloud.intensity[i] = static_cast<float>(std::abs(dist(rng)) / 50.0);
  }
  return cloud;
}

bool same_cloud(const PointCloud& a, const PointCloud& b) {
  return a.xyz.rows() == b.xyz.rows() && (a.xyz - b.xyz).cwiseAbs().maxCoeff() == 0.0 &&
         a.intensity.size() == b.intensity.size() &&
         (a.intensity - b.intensity).abs().maxCoeff() == 0.0;
}

void check_box_close(const Box3D& a, const Box3D& b, double tol) {
  CHECK((a.center - b.center).norm() < tol);
  CHECK((a.size - b.size).norm() < tol);
  CHECK(std::abs(wrap_angle(a.yaw - b.yaw)) < tol);
}

KittiCalib nontrivial_calib() {
  KittiCalib calib;
  const Eigen::Matrix3d rect(Eigen::AngleAxisd(0.01, Eigen::Vector3d(0.3, -0.2, 0.933).normalized()));
  calib.r_rect.topLeftCorner<3, 3>() = rect;
  const Eigen::Matrix3d rot(Eigen::AngleAxisd(-0.5 * std::numbers::pi, Eigen::Vector3d::UnitX()) *
                            Eigen::AngleAxisd(0.5 * std::numbers::pi, Eigen::Vector3d::UnitZ()));
  calib.tr_velo_cam.topLeftCorner<3, 3>() = rot;
  calib.tr_velo_cam.topRightCorner<3, 1>() = Eigen::Vector3d(0.27, -0.08, -0.72);
  return calib;
}

}  // namespace

TEST_CASE("synthetic sequences are reproducible and bounded") {
  SynthConfig cfg;
  cfg.n_frames = 12;
  cfg.seed = 7;

  const Sequence a = synth_sequence(cfg, "seq-a", "Car", 3);
  const Sequence b = synth_sequence(cfg, "seq-a", "Car", 3);

  CHECK(a.id == "seq-a");
  CHECK(a.category == "Car");
  CHECK(a.scene == 3);
  REQUIRE(a.frames.size() == 12);
  REQUIRE(b.frames.size() == 12);
  for (size_t t = 0; t < a.frames.size(); ++t) {
    CHECK(same_cloud(a.frames[t].cloud, b.frames[t].cloud));
    check_box_close(a.frames[t].gt, b.frames[t].gt, 0.0 + 1e-300);
    CHECK(a.frames[t].gt.size == cfg.target_size);
  }

  for (size_t t = 1; t < a.frames.size(); ++t) {
    const Eigen::Vector2d step =
        (a.frames[t].gt.center - a.frames[t - 1].gt.center).head<2>();
    CHECK(step.norm() <= cfg.max_step_xy + 1e-12);
    CHECK(a.frames[t].gt.center.z() == a.frames[t - 1].gt.center.z());
    CHECK(std::abs(wrap_angle(a.frames[t].gt.yaw - a.frames[t - 1].gt.yaw)) <=
          cfg.max_yaw_rate + 1e-12);
  }

  SynthConfig other = cfg;
  other.seed = 8;
  const Sequence c = synth_sequence(other, "seq-a", "Car", 3);
  CHECK_FALSE(same_cloud(a.frames[0].cloud, c.frames[0].cloud));

  SynthConfig bad = cfg;
  bad.n_frames = 1;
  CHECK_THROWS_AS(synth_sequence(bad, "x", "Car", 0), std::invalid_argument);
}

TEST_CASE("noise-free synthetic frames sample the target shell exactly") {
  SynthConfig cfg;
  cfg.n_frames = 4;
  cfg.n_distractors = 0;
  cfg.noise_points = 0;
  cfg.dropout = 0.0;
  cfg.seed = 11;

  const Sequence seq = synth_sequence(cfg, "shell", "Pedestrian", 0);
  for (const Frame& f : seq.frames) {
    REQUIRE(f.cloud.size() > 100);
    const Eigen::Vector3d half = 0.5 * f.gt.size;
    for (Index i = 0; i < f.cloud.size(); ++i) {
      const Eigen::Vector3d local = to_canonical(Eigen::Vector3d(f.cloud.xyz.row(i)), f.gt);
      double face = 0.0;
      for (int a = 0; a < 3; ++a) {
        CHECK(std::abs(local[a]) <= half[a] + 1e-9);
        face = std::max(face, std::abs(local[a]) / half[a]);
      }
      CHECK(face == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("velodyne files round trip bit-exactly") {
  const fs::path dir = fresh_dir("velo");
  const fs::path bin = dir / "cloud.bin";

  const PointCloud cloud = random_cloud_f32(257, 21);
  write_velodyne_bin(bin.string(), cloud);
  CHECK(same_cloud(read_velodyne_bin(bin.string()), cloud));

  SUBCASE("empty file reads as an empty cloud") {
    const fs::path empty = dir / "empty.bin";
    std::ofstream(empty.string(), std::ios::binary).close();
    CHECK(read_velodyne_bin(empty.string()).size() == 0);
  }

  SUBCASE("truncated record is rejected") {
    const fs::path bad = dir / "bad.bin";
    std::ofstream out(bad.string(), std::ios::binary);
    const char junk[17] = {};
    out.write(junk, sizeof(junk));
    out.close();
    CHECK_THROWS_WITH_AS(read_velodyne_bin(bad.string()),
                         doctest::Contains("whole number"), std::runtime_error);
  }

  SUBCASE("missing file is an error") {
    CHECK_THROWS_AS(read_velodyne_bin((dir / "nope.bin").string()), std::runtime_error);
  }

  fs::remove_all(dir);
}

TEST_CASE("dataset directories round trip") {
  const fs::path dir = fresh_dir("dataset");

  SynthConfig cfg;
  cfg.n_frames = 3;
  cfg.seed = 5;
  std::vector<Sequence> seqs{synth_sequence(cfg, "s0", "Car", 0)};
  cfg.seed = 6;
  seqs.push_back(synth_sequence(cfg, "s1", "Cyclist", 2));

  save_sequences(dir.string(), seqs);
  const std::vector<Sequence> loaded = load_sequences(dir.string());

  REQUIRE(loaded.size() == 2);
  for (size_t s = 0; s < seqs.size(); ++s) {
    CHECK(loaded[s].id == seqs[s].id);
    CHECK(loaded[s].category == seqs[s].category);
    CHECK(loaded[s].scene == seqs[s].scene);
    REQUIRE(loaded[s].frames.size() == seqs[s].frames.size());
    for (size_t t = 0; t < seqs[s].frames.size(); ++t) {
      check_box_close(loaded[s].frames[t].gt, seqs[s].frames[t].gt, 1e-15);
      // .bin storage is float32; the loaded cloud equals the cast original.
      const Points cast =
          seqs[s].frames[t].cloud.xyz.cast<float>().cast<double>();
      CHECK((loaded[s].frames[t].cloud.xyz - cast).cwiseAbs().maxCoeff() == 0.0);
    }
  }

  CHECK_THROWS_AS(load_sequences((dir / "missing").string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("kitti label files parse with line-precise errors") {
  const fs::path dir = fresh_dir("labels");
  const fs::path path = dir / "0000.txt";

  {
    std::ofstream out(path.string());
    out << "0 2 Car 0 0 -1.57 600 160 700 220 1.5 1.7 4.2 1.8 1.6 15.0 -1.2\n";
    out << "0 -1 DontCare -1 -1 -10 500 150 550 180 -1 -1 -1 -1000 -1000 -1000 -10\n";
    out << "1 2 Car 0 1 -1.55 610 160 710 220 1.5 1.7 4.2 2.0 1.6 14.7 -1.15\n";
    out << "1 5 Pedestrian 0 0 0.4 100 140 130 260 1.8 0.6 0.5 -3.0 1.5 8.0 0.4\n";
  }

  const std::vector<KittiLabel> labels = read_kitti_labels(path.string());
  REQUIRE(labels.size() == 3);  // DontCare dropped
  CHECK(labels[0].frame == 0);
  CHECK(labels[0].track_id == 2);
  CHECK(labels[0].type == "Car");
  CHECK(labels[0].dims == Eigen::Vector3d(1.5, 1.7, 4.2));
  CHECK(labels[0].loc_cam == Eigen::Vector3d(1.8, 1.6, 15.0));
  CHECK(labels[0].ry == -1.2);
  CHECK(labels[2].type == "Pedestrian");

  {
    std::ofstream out(path.string(), std::ios::app);
    out << "2 2 Car 0 0 -1.5 600 160 700 220 1.5 1.7\n";  // short line
  }
  CHECK_THROWS_WITH_AS(read_kitti_labels(path.string()), doctest::Contains(":5:"),
                       std::runtime_error);

  fs::remove_all(dir);
}

TEST_CASE("kitti calib files parse both Tr spellings") {
  const fs::path dir = fresh_dir("calib");
  const fs::path path = dir / "0000.txt";

  const KittiCalib want = nontrivial_calib();
  {
    std::ofstream out(path.string());
    out << std::setprecision(17);
    out << "P2: 7.2e+02 0 6.0e+02 4.5e+01 0 7.2e+02 1.7e+02 0 0 0 1 0\n";
    out << "R_rect:";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out << ' ' << want.r_rect(r, c);
    out << "\nTr_velo_to_cam:";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) out << ' ' << want.tr_velo_cam(r, c);
    out << '\n';
  }

  const KittiCalib got = read_kitti_calib(path.string());
  CHECK((got.r_rect - want.r_rect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((got.tr_velo_cam - want.tr_velo_cam).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(got.r_rect.row(3) == Eigen::RowVector4d(0, 0, 0, 1));

  {
    std::ofstream out(path.string());
    out << "R_rect: 1 0 0 0 1 0 0 0 1\n";
  }
  CHECK_THROWS_WITH_AS(read_kitti_calib(path.string()), doctest::Contains("Tr_velo_cam"),
                       std::runtime_error);

  fs::remove_all(dir);
}

TEST_CASE("camera labels and velodyne boxes convert both ways") {
  const KittiCalib calib = nontrivial_calib();

  SUBCASE("identity calib lifts the bottom center and remaps dims") {
    KittiCalib id;
    KittiLabel lb;
    lb.type = "Car";
    lb.dims = {1.5, 1.7, 4.2};         // h, w, l
    lb.loc_cam = {2.0, 1.0, 15.0};     // bottom center
    lb.ry = 0.3;

    const Box3D box = label_to_velo_box(lb, id);
    CHECK(box.size == Eigen::Vector3d(4.2, 1.7, 1.5));  // l, w, h
    CHECK(box.center == Eigen::Vector3d(2.0, 1.0 - 0.75, 15.0));
    CHECK(box.yaw == doctest::Approx(wrap_angle(-0.3 - 0.5 * std::numbers::pi)).epsilon(1e-12));
  }

  SUBCASE("round trips within 1e-9") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> pos(-20.0, 20.0);
    std::uniform_real_distribution<double> len(0.5, 5.0);
    std::uniform_real_distribution<double> ang(-std::numbers::pi, std::numbers::pi);
    for (int trial = 0; trial < 20; ++trial) {
      Box3D box;
      box.center = {pos(rng), pos(rng), pos(rng) * 0.1};
      box.size = {len(rng), len(rng), len(rng)};
      box.yaw = ang(rng);

      const KittiLabel lb = velo_box_to_label(box, calib);
      check_box_close(label_to_velo_box(lb, calib), box, 1e-9);

      KittiLabel lb2;
      lb2.dims = {len(rng), len(rng), len(rng)};
      lb2.loc_cam = {pos(rng), pos(rng), pos(rng)};
      lb2.ry = ang(rng);
      const KittiLabel back = velo_box_to_label(label_to_velo_box(lb2, calib), calib);
      CHECK((back.dims - lb2.dims).norm() < 1e-9);
      CHECK((back.loc_cam - lb2.loc_cam).norm() < 1e-9);
      CHECK(std::abs(wrap_angle(back.ry - lb2.ry)) < 1e-9);
    }
  }
}

TEST_CASE("kitti tracking directories load one sequence per track") {
  const fs::path root = fresh_dir("kitti");
  fs::create_directories(root / "label_02");
  fs::create_directories(root / "calib");
  fs::create_directories(root / "velodyne" / "0000");

  {
    std::ofstream out((root / "calib" / "0000.txt").string());
    out << "R_rect: 1 0 0 0 1 0 0 0 1\n";
    out << "Tr_velo_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
  }
  {
    std::ofstream out((root / "label_02" / "0000.txt").string());
    out << "0 1 Car 0 0 0 0 0 0 0 1.5 1.7 4.2 5.0 1.0 10.0 -1.5\n";
    out << "0 -1 DontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n";
    out << "0 2 Cyclist 0 0 0 0 0 0 0 1.7 0.6 1.8 -4.0 1.2 12.0 0.2\n";
    out << "1 1 Car 0 0 0 0 0 0 0 1.5 1.7 4.2 5.2 1.0 9.8 -1.45\n";
    out << "1 2 Cyclist 0 0 0 0 0 0 0 1.7 0.6 1.8 -4.2 1.2 11.9 0.25\n";
    out << "1 9 Van 0 0 0 0 0 0 0 2.0 1.9 5.0 0.0 1.0 20.0 0.0\n";  // single frame
    out << "2 1 Car 0 0 0 0 0 0 0 1.5 1.7 4.2 5.4 1.0 9.6 -1.4\n";
  }
  for (int t = 0; t < 3; ++t) {
    char name[16];
    std::snprintf(name, sizeof(name), "%06d.bin", t);
    write_velodyne_bin((root / "velodyne" / "0000" / name).string(),
                       random_cloud_f32(32 + t, 100 + t));
  }

  const std::vector<Sequence> all = load_kitti_tracking(root.string(), {0, 1}, {});
  REQUIRE(all.size() == 2);  // the single-frame Van track is dropped, scene 1 absent
  CHECK(all[0].id == "0000_1");
  CHECK(all[0].category == "Car");
  CHECK(all[0].scene == 0);
  REQUIRE(all[0].frames.size() == 3);
  CHECK(all[1].id == "0000_2");
  CHECK(all[1].category == "Cyclist");
  REQUIRE(all[1].frames.size() == 2);

  CHECK(same_cloud(all[0].frames[0].cloud, random_cloud_f32(32, 100)));
  CHECK(same_cloud(all[0].frames[2].cloud, random_cloud_f32(34, 102)));

  const KittiCalib calib = read_kitti_calib((root / "calib" / "0000.txt").string());
  const std::vector<KittiLabel> labels =
      read_kitti_labels((root / "label_02" / "0000.txt").string());
  check_box_close(all[0].frames[0].gt, label_to_velo_box(labels[0], calib), 1e-12);

  const std::vector<Sequence> cars = load_kitti_tracking(root.string(), {0}, {"Car"});
  REQUIRE(cars.size() == 1);
  CHECK(cars[0].category == "Car");

  fs::remove_all(root);
}

TEST_CASE("scene splits and class-agnostic settings partition the data") {
  const SplitConfig split = default_kitti_split();
  CHECK(split.train_scenes.size() == 17);
  CHECK(split.train_scenes.front() == 0);
  CHECK(split.train_scenes.back() == 16);
  CHECK(split.val_scenes == std::vector<Index>{17, 18});
  CHECK(split.test_scenes == std::vector<Index>{19, 20});

  const AgnosticSetting s1 = agnostic_setting(1);
  CHECK(s1.train_categories == std::vector<std::string>{"Pedestrian", "Van", "Cyclist"});
  CHECK(s1.unseen_categories == std::vector<std::string>{"Car"});
  const AgnosticSetting s2 = agnostic_setting(2);
  CHECK(s2.train_categories == std::vector<std::string>{"Car", "Van", "Cyclist"});
  CHECK(s2.unseen_categories == std::vector<std::string>{"Pedestrian"});
  CHECK_THROWS_AS(agnostic_setting(3), std::invalid_argument);

  SynthConfig cfg;
  cfg.n_frames = 2;
  cfg.surface_density = 5.0;
  cfg.noise_points = 4;
  std::vector<Sequence> seqs;
  const std::vector<std::string>& cats = known_categories();
  for (Index i = 0; i < 8; ++i) {
    cfg.seed = 40 + static_cast<std::uint64_t>(i);
    seqs.push_back(
        synth_sequence(cfg, "p" + std::to_string(i), cats[i % cats.size()], i % 3));
  }

  size_t covered = 0;
  for (Index scene : {0, 1, 2}) covered += filter_by_scene(seqs, {scene}).size();
  CHECK(covered == seqs.size());

  std::set<std::string> seen_ids;
  for (const std::string& cat : cats) {
    for (const Sequence& s : filter_by_category(seqs, {cat})) {
      CHECK(s.category == cat);
      CHECK(seen_ids.insert(s.id).second);  // no sequence lands in two buckets
    }
  }
  CHECK(seen_ids.size() == seqs.size());
}

TEST_CASE("crop_and_sample resamples region interiors") {
  std::mt19937_64 rng(55);
  Box3D region;
  region.center = {2.0, -1.0, 0.5};
  region.size = {4.0, 4.0, 2.0};
  region.yaw = 0.4;

  auto make_cloud = [&](Index inside, Index outside) {
    PointCloud cloud;
    cloud.xyz.resize(inside + outside, 3);
    cloud.intensity.resize(inside + outside);
    std::uniform_real_distribution<double> u(-0.45, 0.45);
    for (Index i = 0; i < inside; ++i) {
      const Eigen::Vector3d local(u(rng) * region.size.x(), u(rng) * region.size.y(),
                                  u(rng) * region.size.z());
      cloud.xyz.row(i) = from_canonical(local, region).transpose();
      cloud.intensity[i] = 0.25 + 0.001 * static_cast<double>(i);
    }
    for (Index i = inside; i < inside + outside; ++i) {
      cloud.xyz.row(i) = (region.center + Eigen::Vector3d(20.0 + i, 0, 0)).transpose();
      cloud.intensity[i] = 0.9;
    }
    return cloud;
  };

  SUBCASE("exactly n interior points come back as a permutation") {
    const PointCloud cloud = make_cloud(8, 5);
    const CropResult crop = crop_and_sample(cloud, region, 8, rng);
    REQUIRE_FALSE(crop.degenerate);
    REQUIRE(crop.cloud.size() == 8);

    std::set<double> got, want;
    for (Index i = 0; i < 8; ++i) {
      got.insert(crop.cloud.intensity[i]);
      want.insert(cloud.intensity[i]);
    }
    CHECK(got == want);
    for (Index i = 0; i < 8; ++i) {
      const Eigen::Vector3d local(crop.cloud.xyz.row(i));
      CHECK(std::abs(local.x()) <= 0.5 * region.size.x() + 1e-12);
      CHECK(std::abs(local.z()) <= 0.5 * region.size.z() + 1e-12);
    }
  }

  SUBCASE("fewer interior points pad by repetition only") {
    const PointCloud cloud = make_cloud(3, 4);
    const CropResult crop = crop_and_sample(cloud, region, 10, rng);
    REQUIRE_FALSE(crop.degenerate);
    std::set<double> distinct;
    for (Index i = 0; i < 10; ++i) distinct.insert(crop.cloud.intensity[i]);
    CHECK(distinct == std::set<double>{cloud.intensity[0], cloud.intensity[1],
                                       cloud.intensity[2]});
  }

  SUBCASE("more interior points subsample without replacement") {
    const PointCloud cloud = make_cloud(64, 0);
    const CropResult crop = crop_and_sample(cloud, region, 16, rng);
    std::set<double> distinct;
    for (Index i = 0; i < 16; ++i) distinct.insert(crop.cloud.intensity[i]);
    CHECK(distinct.size() == 16);
  }

  SUBCASE("empty interior is degenerate") {
    const PointCloud cloud = make_cloud(0, 6);
    const CropResult crop = crop_and_sample(cloud, region, 4, rng);
    CHECK(crop.degenerate);
    CHECK(crop.cloud.xyz.cwiseAbs().maxCoeff() == 0.0);
    CHECK(crop.cloud.size() == 4);
  }

  SUBCASE("n must be positive") {
    const PointCloud cloud = make_cloud(2, 0);
    CHECK_THROWS_AS(crop_and_sample(cloud, region, 0, rng), std::invalid_argument);
  }
}

TEST_CASE("training pairs center the target and label its interior") {
  SynthConfig cfg;
  cfg.n_frames = 6;
  cfg.seed = 77;
  const Sequence seq = synth_sequence(cfg, "train", "Car", 0);

  SampleOptions opts;
  opts.n_template = 64;
  opts.n_search = 128;

  SUBCASE("zero jitter puts the ground truth at the region origin") {
    SampleOptions still = opts;
    still.jitter_xy = 0.0;
    still.jitter_z = 0.0;
    still.jitter_yaw = 0.0;
    std::mt19937_64 rng(1);
    const TrainingSample sample = sample_training_pair(seq, 2, still, rng);
    REQUIRE(sample.valid);
    CHECK(sample.gt.center.norm() < 1e-12);
    CHECK(std::abs(sample.gt.yaw) < 1e-12);
    CHECK(sample.gt.size == seq.frames[2].gt.size);
  }

  SUBCASE("labels mark exactly the points inside the ground-truth box") {
    std::mt19937_64 rng(2);
    const TrainingSample sample = sample_training_pair(seq, 3, opts, rng);
    REQUIRE(sample.valid);
    REQUIRE(static_cast<Index>(sample.seg_labels.size()) == opts.n_search);
    Index positives = 0;
    for (Index i = 0; i < opts.n_search; ++i) {
      const bool inside =
          point_in_box(Eigen::Vector3d(sample.search.xyz.row(i)), sample.gt);
      CHECK(sample.seg_labels[i] == (inside ? 1 : 0));
      positives += sample.seg_labels[i];
    }
    CHECK(positives > 0);
    CHECK(positives < opts.n_search);
  }

  SUBCASE("same seed reproduces the sample bit-exactly") {
    std::mt19937_64 r1(9), r2(9);
    const TrainingSample a = sample_training_pair(seq, 4, opts, r1);
    const TrainingSample b = sample_training_pair(seq, 4, opts, r2);
    REQUIRE(a.valid);
    CHECK(same_cloud(a.tmpl, b.tmpl));
    CHECK(same_cloud(a.search, b.search));
    CHECK(a.gt.center == b.gt.center);
    CHECK(a.seg_labels == b.seg_labels);
  }

  SUBCASE("frame 0 has no previous template") {
    std::mt19937_64 rng(3);
    CHECK_THROWS_AS(sample_training_pair(seq, 0, opts, rng), std::invalid_argument);
  }

  SUBCASE("an empty frame makes the pair invalid") {
    Sequence empty = seq;
    empty.frames[1].cloud.xyz.resize(0, 3);
    empty.frames[1].cloud.intensity.resize(0);
    std::mt19937_64 rng(4);
    CHECK_FALSE(sample_training_pair(empty, 1, opts, rng).valid);
  }
}
