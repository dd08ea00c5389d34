#pragma once

#include "ost/data.hpp"
#include "ost/geometry.hpp"
#include "ost/model.hpp"

#include <string>
#include <vector>

namespace ost {

struct TrackerConfig {
  double search_margin_xy = 2.0;
  // First keeps the frame-0 ground-truth crop for the whole sequence;
  // Previous re-crops around the latest prediction each frame.
  enum class TemplateMode { First, Previous } template_mode = TemplateMode::First;
  std::uint64_t seed = 0;
};

struct FramePrediction {
  Box3D box;
  double ms = 0.0;  // model + decode wall time, 0 for the given first frame
};

struct TrackResult {
  std::string seq_id;
  std::vector<FramePrediction> frames;
};

// Picks the strongest occupied heatmap pixel (ties to the lowest row-major
// index), applies the offset/rotation and height read there, keeps the
// template size, and maps the box from the search frame back through `ref`.
// No occupied pixel returns `ref` unchanged.
Box3D decode_box(const HeadOutputs& outputs, const BevGrid& grid, const Box3D& ref,
                 const Eigen::Vector3d& size);

// Single-pass tracking: frame 0 is the ground truth, every later frame is
// predicted from the previous box.
TrackResult track_sequence(const ModelParams& params, const ModelConfig& cfg,
                           const Sequence& seq, const TrackerConfig& tracker);

// JSON-lines: {"seq", "frame", "box": [x,y,z,l,w,h,yaw], "ms"} per row.
void write_track_results(const std::string& path, const std::vector<TrackResult>& results);
std::vector<TrackResult> read_track_results(const std::string& path);

}  // namespace ost
