#include "ost/data.hpp"

#include <Eigen/LU>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace ost {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Area-weighted sample of the box shell, returned in world coordinates.
Points sample_box_surface(const Box3D& box, double density, std::mt19937_64& rng) {
  const double l = box.size.x(), w = box.size.y(), h = box.size.z();
  // face areas: +-z (l*w), +-y (l*h), +-x (w*h)
  const std::array<double, 6> area{l * w, l * w, l * h, l * h, w * h, w * h};
  const double total = 2.0 * (l * w + l * h + w * h);
  const Index count = std::max<Index>(1, static_cast<Index>(std::lround(density * total)));

  std::array<double, 6> cdf{};
  double acc = 0.0;
  for (int f = 0; f < 6; ++f) {
    acc += area[f] / total;
    cdf[f] = acc;
  }

  Points out(count, 3);
  for (Index i = 0; i < count; ++i) {
    const double pick = uniform(rng, 0.0, 1.0);
    int f = 0;
    while (f < 5 && pick > cdf[f]) ++f;
    const double u = uniform(rng, -0.5, 0.5);
    const double v = uniform(rng, -0.5, 0.5);
    Eigen::Vector3d c;
    switch (f) {
      case 0: c = {u * l, v * w, 0.5 * h}; break;
      case 1: c = {u * l, v * w, -0.5 * h}; break;
      case 2: c = {u * l, 0.5 * w, v * h}; break;
      case 3: c = {u * l, -0.5 * w, v * h}; break;
      case 4: c = {0.5 * l, u * w, v * h}; break;
      default: c = {-0.5 * l, u * w, v * h}; break;
    }
    out.row(i) = from_canonical(c, box).transpose();
  }
  return out;
}

double bev_half_diagonal(const Eigen::Vector3d& size) {
  return 0.5 * std::hypot(size.x(), size.y());
}

}  // namespace

const std::vector<std::string>& known_categories() {
  static const std::vector<std::string> cats{"Car", "Pedestrian", "Van", "Cyclist"};
  return cats;
}

Eigen::Vector3d sample_category_size(const std::string& category, std::mt19937_64& rng) {
  if (category == "Car") {
    return {uniform(rng, 3.2, 4.6), uniform(rng, 1.5, 1.9), uniform(rng, 1.3, 1.7)};
  }
  if (category == "Van") {
    return {uniform(rng, 4.4, 5.4), uniform(rng, 1.7, 2.1), uniform(rng, 1.8, 2.3)};
  }
  if (category == "Cyclist") {
    return {uniform(rng, 1.5, 1.9), uniform(rng, 0.5, 0.8), uniform(rng, 1.5, 1.8)};
  }
  if (category == "Pedestrian") {
    const double footprint = uniform(rng, 0.4, 0.8);
    return {footprint, uniform(rng, 0.4, 0.8), uniform(rng, 1.5, 1.9)};
  }
  throw std::invalid_argument("unknown category '" + category + "'");
}

Sequence synth_sequence(const SynthConfig& cfg, std::string id, std::string category,
                        Index scene) {
  if (cfg.n_frames < 2) throw std::invalid_argument("a sequence needs at least 2 frames");
  std::mt19937_64 rng(cfg.seed);

  // target trajectory
  std::vector<Box3D> traj(cfg.n_frames);
  Eigen::Vector3d center(uniform(rng, -0.5 * cfg.half_extent, 0.5 * cfg.half_extent),
                         uniform(rng, -0.5 * cfg.half_extent, 0.5 * cfg.half_extent),
                         cfg.ground_z + 0.5 * cfg.target_size.z());
  double yaw = uniform(rng, -kPi, kPi);
  const double speed = uniform(rng, 0.3, 1.0) * cfg.max_step_xy;
  const double heading = uniform(rng, -kPi, kPi);
  Eigen::Vector2d vel(speed * std::cos(heading), speed * std::sin(heading));
  double yaw_rate = uniform(rng, -cfg.max_yaw_rate, cfg.max_yaw_rate);

  for (Index t = 0; t < cfg.n_frames; ++t) {
    traj[t] = Box3D{center, cfg.target_size, wrap_angle(yaw)};
    vel.x() += uniform(rng, -0.1, 0.1) * cfg.max_step_xy;
    vel.y() += uniform(rng, -0.1, 0.1) * cfg.max_step_xy;
    if (vel.norm() > cfg.max_step_xy) vel *= cfg.max_step_xy / vel.norm();
    for (int a = 0; a < 2; ++a) {
      if (std::abs(center[a] + vel[a]) > 0.8 * cfg.half_extent) vel[a] = -vel[a];
    }
    center.head<2>() += vel;
    yaw += yaw_rate;
  }

  // distractors: near-constant drift, rejection-sampled to keep clear of the
  // target footprint over the whole sequence
  struct Distractor {
    std::vector<Box3D> traj;
  };
  std::vector<Distractor> distractors;
  const double target_r = bev_half_diagonal(cfg.target_size);
  for (Index k = 0; k < cfg.n_distractors; ++k) {
    const Eigen::Vector3d size =
        category.empty() ? sample_category_size("Car", rng) : sample_category_size(category, rng);
    const double r = bev_half_diagonal(size);
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Eigen::Vector3d c(uniform(rng, -0.9 * cfg.half_extent, 0.9 * cfg.half_extent),
                        uniform(rng, -0.9 * cfg.half_extent, 0.9 * cfg.half_extent),
                        cfg.ground_z + 0.5 * size.z());
      const double dyaw = uniform(rng, -kPi, kPi);
      const double dspeed = cfg.distractor_drift * cfg.max_step_xy;
      const double dheading = uniform(rng, -kPi, kPi);
      const Eigen::Vector2d dvel(dspeed * std::cos(dheading), dspeed * std::sin(dheading));

      Distractor cand;
      cand.traj.resize(cfg.n_frames);
      bool clear = true;
      Eigen::Vector3d dc = c;
      for (Index t = 0; t < cfg.n_frames && clear; ++t) {
        cand.traj[t] = Box3D{dc, size, wrap_angle(dyaw)};
        const double gap =
            (dc.head<2>() - traj[t].center.head<2>()).norm() - target_r - r;
        if (gap < cfg.distractor_clearance) clear = false;
        for (const Distractor& other : distractors) {
          const double og = (dc.head<2>() - other.traj[t].center.head<2>()).norm() -
                            bev_half_diagonal(other.traj[t].size) - r;
          if (og < cfg.distractor_clearance) clear = false;
        }
        dc.head<2>() += dvel;
      }
      if (clear) {
        distractors.push_back(std::move(cand));
        placed = true;
      }
    }
    if (!placed) {
      throw std::runtime_error("could not place distractor " + std::to_string(k) +
                               " with the requested clearance");
    }
  }

  Sequence seq;
  seq.id = std::move(id);
  seq.category = category;
  seq.scene = scene;
  seq.frames.resize(cfg.n_frames);
  for (Index t = 0; t < cfg.n_frames; ++t) {
    std::vector<Eigen::Vector3d> pts;
    auto add_shell = [&](const Box3D& box) {
      const Points shell = sample_box_surface(box, cfg.surface_density, rng);
      for (Index i = 0; i < shell.rows(); ++i) {
        const bool keep = uniform(rng, 0.0, 1.0) >= cfg.dropout;
        if (keep) pts.emplace_back(shell.row(i).transpose());
      }
    };
    add_shell(traj[t]);
    for (const Distractor& d : distractors) add_shell(d.traj[t]);
    for (Index i = 0; i < cfg.noise_points; ++i) {
      pts.emplace_back(uniform(rng, -cfg.half_extent, cfg.half_extent),
                       uniform(rng, -cfg.half_extent, cfg.half_extent),
                       cfg.ground_z + uniform(rng, -0.25, 0.25));
    }

    Frame& f = seq.frames[t];
    f.gt = traj[t];
    f.cloud.xyz.resize(static_cast<Index>(pts.size()), 3);
    f.cloud.intensity.resize(static_cast<Index>(pts.size()));
    for (size_t i = 0; i < pts.size(); ++i) {
      f.cloud.xyz.row(static_cast<Index>(i)) = pts[i].transpose();
      f.cloud.intensity[static_cast<Index>(i)] = uniform(rng, 0.0, 1.0);
    }
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Point cloud files

void write_velodyne_bin(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const Index n = cloud.size();
  std::vector<float> rec(4);
  for (Index i = 0; i < n; ++i) {
    rec[0] = static_cast<float>(cloud.xyz(i, 0));
    rec[1] = static_cast<float>(cloud.xyz(i, 1));
    rec[2] = static_cast<float>(cloud.xyz(i, 2));
    rec[3] = cloud.intensity.size() ? static_cast<float>(cloud.intensity[i]) : 0.0f;
    out.write(reinterpret_cast<const char*>(rec.data()), 4 * sizeof(float));
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

PointCloud read_velodyne_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::streamoff bytes = in.tellg();
  if (bytes % (4 * sizeof(float)) != 0) {
    throw std::runtime_error(path + " is not a whole number of x/y/z/intensity records");
  }
  const Index n = static_cast<Index>(bytes / (4 * sizeof(float)));
  std::vector<float> buf(static_cast<size_t>(n) * 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(buf.data()), bytes);
  if (!in) throw std::runtime_error("failed reading " + path);

  PointCloud cloud;
  cloud.xyz.resize(n, 3);
  cloud.intensity.resize(n);
  for (Index i = 0; i < n; ++i) {
    cloud.xyz(i, 0) = buf[i * 4 + 0];
    cloud.xyz(i, 1) = buf[i * 4 + 1];
    cloud.xyz(i, 2) = buf[i * 4 + 2];
    cloud.intensity[i] = buf[i * 4 + 3];
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Dataset directories

namespace {

json box_to_json(const Box3D& b) {
  return json::array({b.center.x(), b.center.y(), b.center.z(), b.size.x(), b.size.y(),
                      b.size.z(), b.yaw});
}

Box3D box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 7) throw std::runtime_error("box must be [x,y,z,l,w,h,yaw]");
  Box3D b;
  b.center = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  b.size = {j[3].get<double>(), j[4].get<double>(), j[5].get<double>()};
  b.yaw = j[6].get<double>();
  return b;
}

std::string frame_name(Index i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06lld.bin", static_cast<long long>(i));
  return buf;
}

}  // namespace

void save_sequences(const std::string& dir, const std::vector<Sequence>& seqs) {
  fs::create_directories(dir);
  json manifest;
  manifest["sequences"] = json::array();
  for (const Sequence& seq : seqs) {
    fs::create_directories(fs::path(dir) / seq.id);
    json js;
    js["id"] = seq.id;
    js["category"] = seq.category;
    js["scene"] = seq.scene;
    js["frames"] = json::array();
    for (size_t t = 0; t < seq.frames.size(); ++t) {
      const std::string rel = seq.id + "/" + frame_name(static_cast<Index>(t));
      write_velodyne_bin((fs::path(dir) / rel).string(), seq.frames[t].cloud);
      js["frames"].push_back({{"bin", rel}, {"gt", box_to_json(seq.frames[t].gt)}});
    }
    manifest["sequences"].push_back(std::move(js));
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

std::vector<Sequence> load_sequences(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest in " + dir + ": " + e.what());
  }
  std::vector<Sequence> seqs;
  for (const json& js : manifest.at("sequences")) {
    Sequence seq;
    seq.id = js.at("id").get<std::string>();
    seq.category = js.value("category", "");
    seq.scene = js.value("scene", Index{0});
    for (const json& jf : js.at("frames")) {
      Frame f;
      f.cloud = read_velodyne_bin((fs::path(dir) / jf.at("bin").get<std::string>()).string());
      f.gt = box_from_json(jf.at("gt"));
      seq.frames.push_back(std::move(f));
    }
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

// ---------------------------------------------------------------------------
// KITTI

KittiCalib read_kitti_calib(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  KittiCalib calib;
  bool have_rect = false, have_velo = false;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!key.empty() && key.back() == ':') key.pop_back();
    if (key == "R_rect") {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          if (!(ls >> calib.r_rect(r, c))) throw std::runtime_error("short R_rect in " + path);
      have_rect = true;
    } else if (key == "Tr_velo_cam" || key == "Tr_velo_to_cam") {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
          if (!(ls >> calib.tr_velo_cam(r, c))) throw std::runtime_error("short Tr_velo_cam in " + path);
      have_velo = true;
    }
  }
  if (!have_rect || !have_velo) {
    throw std::runtime_error(path + " lacks R_rect or Tr_velo_cam entries");
  }
  return calib;
}

std::vector<KittiLabel> read_kitti_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<KittiLabel> out;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    KittiLabel lb;
    double truncated, occluded, alpha, l2, t, r2, b2;
    if (!(ls >> lb.frame >> lb.track_id >> lb.type >> truncated >> occluded >> alpha >> l2 >>
          t >> r2 >> b2 >> lb.dims.x() >> lb.dims.y() >> lb.dims.z() >> lb.loc_cam.x() >>
          lb.loc_cam.y() >> lb.loc_cam.z() >> lb.ry)) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed label line");
    }
    if (lb.type == "DontCare") continue;
    out.push_back(std::move(lb));
  }
  return out;
}

Box3D label_to_velo_box(const KittiLabel& label, const KittiCalib& calib) {
  // label location is the bottom-face center in rectified camera coordinates
  // (x right, y down, z forward); lift by h/2 to the box center.
  Eigen::Vector4d center_cam(label.loc_cam.x(), label.loc_cam.y() - 0.5 * label.dims.x(),
                             label.loc_cam.z(), 1.0);
  const Eigen::Matrix4d cam_from_velo = calib.r_rect * calib.tr_velo_cam;
  const Eigen::Vector4d center_velo = cam_from_velo.inverse() * center_cam;

  Box3D box;
  box.center = center_velo.head<3>();
  box.size = {label.dims.z(), label.dims.y(), label.dims.x()};  // l, w, h
  box.yaw = wrap_angle(-label.ry - 0.5 * kPi);
  return box;
}

KittiLabel velo_box_to_label(const Box3D& box, const KittiCalib& calib) {
  const Eigen::Matrix4d cam_from_velo = calib.r_rect * calib.tr_velo_cam;
  Eigen::Vector4d center_velo(box.center.x(), box.center.y(), box.center.z(), 1.0);
  const Eigen::Vector4d center_cam = cam_from_velo * center_velo;

  KittiLabel lb;
  lb.dims = {box.size.z(), box.size.y(), box.size.x()};  // h, w, l
  lb.loc_cam = center_cam.head<3>();
  lb.loc_cam.y() += 0.5 * lb.dims.x();
  lb.ry = wrap_angle(-box.yaw - 0.5 * kPi);
  return lb;
}

std::vector<Sequence> load_kitti_tracking(const std::string& root,
                                          const std::vector<Index>& scenes,
                                          const std::vector<std::string>& categories) {
  std::vector<Sequence> out;
  for (Index scene : scenes) {
    char scene_name[8];
    std::snprintf(scene_name, sizeof(scene_name), "%04lld", static_cast<long long>(scene));
    const fs::path label_path = fs::path(root) / "label_02" / (std::string(scene_name) + ".txt");
    const fs::path calib_path = fs::path(root) / "calib" / (std::string(scene_name) + ".txt");
    const fs::path velo_dir = fs::path(root) / "velodyne" / scene_name;
    if (!fs::exists(label_path)) continue;

    const KittiCalib calib = read_kitti_calib(calib_path.string());
    const std::vector<KittiLabel> labels = read_kitti_labels(label_path.string());

    std::map<Index, std::vector<const KittiLabel*>> tracks;
    for (const KittiLabel& lb : labels) {
      if (!categories.empty() &&
          std::find(categories.begin(), categories.end(), lb.type) == categories.end()) {
        continue;
      }
      tracks[lb.track_id].push_back(&lb);
    }

    std::map<Index, PointCloud> cloud_cache;
    for (auto& [track_id, track] : tracks) {
      std::sort(track.begin(), track.end(),
                [](const KittiLabel* a, const KittiLabel* b) { return a->frame < b->frame; });
      if (track.size() < 2) continue;

      Sequence seq;
      seq.id = std::string(scene_name) + "_" + std::to_string(track_id);
      seq.category = track.front()->type;
      seq.scene = scene;
      for (const KittiLabel* lb : track) {
        auto it = cloud_cache.find(lb->frame);
        if (it == cloud_cache.end()) {
          char frame_file[16];
          std::snprintf(frame_file, sizeof(frame_file), "%06lld.bin",
                        static_cast<long long>(lb->frame));
          it = cloud_cache.emplace(lb->frame, read_velodyne_bin((velo_dir / frame_file).string()))
                   .first;
        }
        Frame f;
        f.cloud = it->second;
        f.gt = label_to_velo_box(*lb, calib);
        seq.frames.push_back(std::move(f));
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

SplitConfig default_kitti_split() {
  SplitConfig s;
  for (Index i = 0; i <= 16; ++i) s.train_scenes.push_back(i);
  s.val_scenes = {17, 18};
  s.test_scenes = {19, 20};
  return s;
}

AgnosticSetting agnostic_setting(int which) {
  if (which == 1) return {"setting-1", {"Pedestrian", "Van", "Cyclist"}, {"Car"}};
  if (which == 2) return {"setting-2", {"Car", "Van", "Cyclist"}, {"Pedestrian"}};
  throw std::invalid_argument("class-agnostic setting must be 1 or 2");
}

std::vector<Sequence> filter_by_scene(const std::vector<Sequence>& seqs,
                                      const std::vector<Index>& scenes) {
  std::vector<Sequence> out;
  for (const Sequence& s : seqs) {
    if (std::find(scenes.begin(), scenes.end(), s.scene) != scenes.end()) out.push_back(s);
  }
  return out;
}

std::vector<Sequence> filter_by_category(const std::vector<Sequence>& seqs,
                                         const std::vector<std::string>& categories) {
  std::vector<Sequence> out;
  for (const Sequence& s : seqs) {
    if (std::find(categories.begin(), categories.end(), s.category) != categories.end()) {
      out.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Crops and training pairs

CropResult crop_and_sample(const PointCloud& cloud, const Box3D& region, Index n,
                           std::mt19937_64& rng) {
  if (n <= 0) throw std::invalid_argument("crop_and_sample requires n > 0");
  std::vector<Index> interior;
  for (Index i = 0; i < cloud.size(); ++i) {
    if (point_in_box(Eigen::Vector3d(cloud.xyz.row(i)), region)) interior.push_back(i);
  }

  CropResult out;
  if (interior.empty()) {
    out.degenerate = true;
    out.cloud.xyz = Points::Zero(n, 3);
    out.cloud.intensity = ArrayX::Zero(n);
    return out;
  }

  std::vector<Index> picks;
  const Index have = static_cast<Index>(interior.size());
  if (have > n) {
    // partial Fisher-Yates: first n entries are a uniform sample without
    // replacement
    for (Index i = 0; i < n; ++i) {
      const Index j = i + static_cast<Index>(std::uniform_int_distribution<long long>(
                              0, have - 1 - i)(rng));
      std::swap(interior[i], interior[j]);
      picks.push_back(interior[i]);
    }
  } else {
    picks = interior;
    std::uniform_int_distribution<long long> dist(0, have - 1);
    while (static_cast<Index>(picks.size()) < n) picks.push_back(interior[dist(rng)]);
  }

  out.cloud.xyz.resize(n, 3);
  out.cloud.intensity.resize(n);
  const bool has_intensity = cloud.intensity.size() == cloud.size();
  for (Index i = 0; i < n; ++i) {
    out.cloud.xyz.row(i) =
        to_canonical(Eigen::Vector3d(cloud.xyz.row(picks[i])), region).transpose();
    out.cloud.intensity[i] = has_intensity ? cloud.intensity[picks[i]] : 0.0;
  }
  return out;
}

TrainingSample sample_training_pair(const Sequence& seq, Index frame, const SampleOptions& opts,
                                    std::mt19937_64& rng) {
  if (frame < 1 || frame >= static_cast<Index>(seq.frames.size())) {
    throw std::invalid_argument("training pairs need a previous frame");
  }
  const Box3D& prev = seq.frames[frame - 1].gt;
  const Box3D& cur = seq.frames[frame].gt;

  TrainingSample sample;
  const CropResult tmpl = crop_and_sample(seq.frames[frame - 1].cloud, prev, opts.n_template, rng);

  Box3D region;
  region.center = cur.center + Eigen::Vector3d(uniform(rng, -opts.jitter_xy, opts.jitter_xy),
                                               uniform(rng, -opts.jitter_xy, opts.jitter_xy),
                                               uniform(rng, -opts.jitter_z, opts.jitter_z));
  region.yaw = wrap_angle(cur.yaw + uniform(rng, -opts.jitter_yaw, opts.jitter_yaw));
  region.size = {cur.size.x() + 2.0 * opts.search_margin_xy,
                 cur.size.y() + 2.0 * opts.search_margin_xy, opts.search_z_extent};

  const CropResult search = crop_and_sample(seq.frames[frame].cloud, region, opts.n_search, rng);
  if (tmpl.degenerate || search.degenerate) return sample;  // invalid

  sample.tmpl = tmpl.cloud;
  sample.search = search.cloud;
  sample.gt = box_to_canonical(cur, region);
  sample.seg_labels.resize(opts.n_search);
  for (Index i = 0; i < opts.n_search; ++i) {
    sample.seg_labels[i] =
        point_in_box(Eigen::Vector3d(sample.search.xyz.row(i)), sample.gt) ? 1 : 0;
  }
  sample.valid = true;
  return sample;
}

}  // namespace ost
