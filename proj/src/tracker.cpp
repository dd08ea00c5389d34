#include "ost/tracker.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <map>
#include <stdexcept>

namespace ost {

using nlohmann::json;

Box3D decode_box(const HeadOutputs& outputs, const BevGrid& grid, const Box3D& ref,
                 const Eigen::Vector3d& size) {
  const Index nx = grid.nx(), ny = grid.ny();
  if (outputs.heatmap.numel() != ny * nx) {
    throw std::invalid_argument("heatmap does not match the grid");
  }

  Index best = -1;
  double best_score = -1.0;
  for (Index at = 0; at < ny * nx; ++at) {
    if (!outputs.bev_mask[at]) continue;
    const double s = outputs.heatmap.value_at(at);
    if (s > best_score) {
      best_score = s;
      best = at;
    }
  }
  if (best < 0) return ref;

  const Index iy = best / nx, ix = best % nx;
  const Index plane = ny * nx;
  const double dx = outputs.offset_rot.value_at(0 * plane + best);
  const double dy = outputs.offset_rot.value_at(1 * plane + best);
  const double yaw = outputs.offset_rot.value_at(2 * plane + best);
  const double z = outputs.zmap.value_at(best);

  const Eigen::Vector2d pc = grid.pixel_center(iy, ix);
  Box3D canonical;
  canonical.center = {pc.x() + dx, pc.y() + dy, z};
  canonical.size = size;
  canonical.yaw = wrap_angle(yaw);
  return box_from_canonical(canonical, ref);
}

TrackResult track_sequence(const ModelParams& params, const ModelConfig& cfg,
                           const Sequence& seq, const TrackerConfig& tracker) {
  if (seq.frames.empty()) throw std::invalid_argument("empty sequence");
  NoGradGuard eval_scope;
  std::mt19937_64 rng(tracker.seed);

  TrackResult result;
  result.seq_id = seq.id;
  result.frames.resize(seq.frames.size());
  result.frames[0] = {seq.frames[0].gt, 0.0};

  const Box3D& init = seq.frames[0].gt;
  CropResult tmpl = crop_and_sample(seq.frames[0].cloud, init, cfg.n_template, rng);
  const Eigen::Vector3d size = init.size;

  Box3D prev = init;
  for (size_t t = 1; t < seq.frames.size(); ++t) {
    const auto started = std::chrono::steady_clock::now();

    Box3D region = prev;
    region.size.x() += 2.0 * tracker.search_margin_xy;
    region.size.y() += 2.0 * tracker.search_margin_xy;
    region.size.z() = cfg.bev_grid.z_max - cfg.bev_grid.z_min;
    region.center.z() = prev.center.z();

    const CropResult search = crop_and_sample(seq.frames[t].cloud, region, cfg.n_search, rng);
    Box3D predicted;
    if (search.degenerate || tmpl.degenerate) {
      predicted = prev;  // nothing to see, carry the previous box
    } else {
      const HeadOutputs out = model_forward(tmpl.cloud, search.cloud, params, cfg);
      predicted = decode_box(out, cfg.bev_grid, region, size);
    }

    const auto finished = std::chrono::steady_clock::now();
    result.frames[t].box = predicted;
    result.frames[t].ms =
        std::chrono::duration<double, std::milli>(finished - started).count();

    prev = predicted;
    if (tracker.template_mode == TrackerConfig::TemplateMode::Previous) {
      CropResult again = crop_and_sample(seq.frames[t].cloud, predicted, cfg.n_template, rng);
      if (!again.degenerate) tmpl = again;
    }
  }
  return result;
}

void write_track_results(const std::string& path, const std::vector<TrackResult>& results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const TrackResult& r : results) {
    for (size_t t = 0; t < r.frames.size(); ++t) {
      const Box3D& b = r.frames[t].box;
      json row{{"seq", r.seq_id},
               {"frame", t},
               {"box", {b.center.x(), b.center.y(), b.center.z(), b.size.x(), b.size.y(),
                        b.size.z(), b.yaw}},
               {"ms", r.frames[t].ms}};
      out << row.dump() << '\n';
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<TrackResult> read_track_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);

  std::map<std::string, std::map<Index, FramePrediction>> by_seq;
  std::vector<std::string> order;
  std::string line;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::string seq = row.at("seq").get<std::string>();
    const Index frame = row.at("frame").get<Index>();
    const auto& b = row.at("box");
    if (!b.is_array() || b.size() != 7) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": box must have 7 values");
    }
    FramePrediction p;
    p.box.center = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>()};
    p.box.size = {b[3].get<double>(), b[4].get<double>(), b[5].get<double>()};
    p.box.yaw = b[6].get<double>();
    p.ms = row.value("ms", 0.0);
    if (by_seq.find(seq) == by_seq.end()) order.push_back(seq);
    by_seq[seq][frame] = p;
  }

  std::vector<TrackResult> out;
  for (const std::string& seq : order) {
    TrackResult r;
    r.seq_id = seq;
    const auto& frames = by_seq[seq];
    Index expect = 0;
    for (const auto& [frame, pred] : frames) {
      if (frame != expect) {
        throw std::runtime_error(path + ": sequence '" + seq + "' misses frame " +
                                 std::to_string(expect));
      }
      r.frames.push_back(pred);
      ++expect;
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ost
