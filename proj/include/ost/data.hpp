#pragma once

#include "ost/geometry.hpp"
#include "ost/point_ops.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ost {

struct Frame {
  PointCloud cloud;
  Box3D gt;
};

struct Sequence {
  std::string id;
  std::string category;
  Index scene = 0;
  std::vector<Frame> frames;
};

// ---------------------------------------------------------------------------
// Synthetic scenes: one moving cuboid-shell target among same-category
// distractors and ground clutter. Fully determined by the config (seed
// included).

struct SynthConfig {
  Index n_frames = 20;
  Eigen::Vector3d target_size{3.8, 1.6, 1.5};
  double surface_density = 40.0;  // points per square meter of shell
  double max_step_xy = 0.25;      // translation bound per frame
  double max_yaw_rate = 0.06;     // radians per frame
  Index n_distractors = 2;
  double distractor_clearance = 1.5;  // min gap between footprints
  double distractor_drift = 0.3;      // distractor speed as a fraction of max_step_xy
  Index noise_points = 80;            // ground clutter per frame
  double dropout = 0.1;
  double half_extent = 10.0;  // scene half width
  double ground_z = -1.0;
  std::uint64_t seed = 0;
};

Sequence synth_sequence(const SynthConfig& cfg, std::string id, std::string category,
                        Index scene);

// Size distributions per category; aspect ratios are category-typical and
// scales vary within the listed ranges.
const std::vector<std::string>& known_categories();
Eigen::Vector3d sample_category_size(const std::string& category, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Point cloud files: flat little-endian float32 records of x, y, z,
// intensity (the velodyne .bin layout).

void write_velodyne_bin(const std::string& path, const PointCloud& cloud);
PointCloud read_velodyne_bin(const std::string& path);

// Dataset directory: manifest.json plus one .bin per frame under
// <dir>/<sequence id>/NNNNNN.bin.
void save_sequences(const std::string& dir, const std::vector<Sequence>& seqs);
std::vector<Sequence> load_sequences(const std::string& dir);

// ---------------------------------------------------------------------------
// KITTI tracking ingestion

struct KittiCalib {
  Eigen::Matrix4d r_rect = Eigen::Matrix4d::Identity();       // padded 3x3
  Eigen::Matrix4d tr_velo_cam = Eigen::Matrix4d::Identity();  // padded 3x4
};

KittiCalib read_kitti_calib(const std::string& path);

struct KittiLabel {
  Index frame = 0;
  Index track_id = 0;
  std::string type;
  Eigen::Vector3d dims{0, 0, 0};     // h, w, l
  Eigen::Vector3d loc_cam{0, 0, 0};  // bottom center in rectified camera coords
  double ry = 0.0;
};

// Parses a tracking label file; DontCare rows are skipped. Malformed lines
// raise with the line number.
std::vector<KittiLabel> read_kitti_labels(const std::string& path);

Box3D label_to_velo_box(const KittiLabel& label, const KittiCalib& calib);
KittiLabel velo_box_to_label(const Box3D& box, const KittiCalib& calib);

// Expects <root>/velodyne/<scene>/<frame>.bin, <root>/label_02/<scene>.txt,
// <root>/calib/<scene>.txt. One Sequence per (scene, track) with at least
// two frames, restricted to the given categories (empty = all).
std::vector<Sequence> load_kitti_tracking(const std::string& root,
                                          const std::vector<Index>& scenes,
                                          const std::vector<std::string>& categories);

// ---------------------------------------------------------------------------
// Splits

struct SplitConfig {
  std::vector<Index> train_scenes, val_scenes, test_scenes;
};

// Scene-held-out default: 0-16 train, 17-18 val, 19-20 test.
SplitConfig default_kitti_split();

struct AgnosticSetting {
  std::string name;
  std::vector<std::string> train_categories;
  std::vector<std::string> unseen_categories;
};

// Setting 1 trains on Pedestrian/Van/Cyclist and holds out Car; setting 2
// trains on Car/Van/Cyclist and holds out Pedestrian.
AgnosticSetting agnostic_setting(int which);

std::vector<Sequence> filter_by_scene(const std::vector<Sequence>& seqs,
                                      const std::vector<Index>& scenes);
std::vector<Sequence> filter_by_category(const std::vector<Sequence>& seqs,
                                         const std::vector<std::string>& categories);

// ---------------------------------------------------------------------------
// Training pairs

// Uniform crop of the region's interior points resampled to exactly n and
// expressed in the region's frame. No interior point marks the result
// degenerate (n copies of the origin).
struct CropResult {
  PointCloud cloud;
  bool degenerate = false;
};

CropResult crop_and_sample(const PointCloud& cloud, const Box3D& region, Index n,
                           std::mt19937_64& rng);

struct TrainingSample {
  PointCloud tmpl;                       // previous-frame target crop, its own frame
  PointCloud search;                     // jittered current-frame crop, region frame
  Box3D gt;                              // ground truth in the region frame
  std::vector<std::uint8_t> seg_labels;  // per search point
  bool valid = false;
};

struct SampleOptions {
  Index n_template = 512;
  Index n_search = 1024;
  double jitter_xy = 0.3;
  double jitter_z = 0.25;
  double jitter_yaw = 0.087;  // ~5 degrees
  double search_margin_xy = 2.0;
  double search_z_extent = 4.0;  // full z size of the search region
};

// frame must be >= 1; the template comes from frame - 1.
TrainingSample sample_training_pair(const Sequence& seq, Index frame, const SampleOptions& opts,
                                    std::mt19937_64& rng);

}  // namespace ost
