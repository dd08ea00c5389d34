#pragma once

#include "ost/geometry.hpp"
#include "ost/point_ops.hpp"
#include "ost/tensor.hpp"

#include <cstdint>
#include <vector>

namespace ost {

// Regression targets on the BEV grid for one ground-truth box given in the
// same frame as the grid.
struct BevTargets {
  ArrayX heatmap;                       // ny * nx
  ArrayX offset;                        // 3 planes (dx, dy, yaw), ny * nx each
  std::vector<std::uint8_t> window;     // 1 inside the regression window
  Index center_iy = 0, center_ix = 0;   // discretized box center
  double z_gt = 0.0;                    // box center height
  std::vector<std::uint8_t> seg_labels; // filled by the cloud overload
};

// Heatmap rule per pixel: 1 at the discretized center, 1 / (1 + d) at pixels
// whose center lies inside the box footprint (d = pixel-space distance to the
// discretized center), 0 elsewhere. Offsets hold the residual from the pixel
// center to the true center plus the yaw, defined on the (2r + 1)^2 window
// around the discretized center clipped to the grid. Throws when the box
// center falls outside the grid.
BevTargets make_bev_targets(const Box3D& gt, const BevGrid& grid, Index window_radius = 2);

// Same, plus per-point segmentation labels for `cloud` via point_in_box.
BevTargets make_bev_targets(const Box3D& gt, const BevGrid& grid, const Points& cloud,
                            Index window_radius = 2);

// Penalty-reduced focal loss, summed over pixels. Predictions are clamped to
// [1e-6, 1 - 1e-6] before the logs.
Tensor heatmap_focal_loss(const Tensor& heatmap, const ArrayX& target, double alpha = 2.0,
                          double beta = 4.0);

// Sum of absolute errors over window pixels and channels (no normalization).
// pred is [c, ny, nx]; target is laid out the same way.
Tensor window_l1_loss(const Tensor& pred, const ArrayX& target,
                      const std::vector<std::uint8_t>& window);

// |zmap at the discretized center - z_gt|; reads exactly one pixel.
Tensor center_z_loss(const Tensor& zmap, const BevTargets& targets);

// Mean binary cross entropy; scores are probabilities in (0, 1), clamped to
// [1e-6, 1 - 1e-6].
Tensor bce_loss(const Tensor& scores, const std::vector<std::uint8_t>& labels);

struct LossWeights {
  double seg = 1.0;
  double center = 1.0;
  double offset = 1.0;
  double z = 2.0;
};

struct TrackingLoss {
  Tensor seg, center, offset, z, total;
};

// weights.seg * seg + weights.center * center + weights.offset * offset +
// weights.z * z.
Tensor weighted_total(const Tensor& seg, const Tensor& center, const Tensor& offset,
                      const Tensor& z, const LossWeights& weights = {});

// seg_scores [n_points], heatmap [ny, nx], offset_rot [3, ny, nx],
// zmap [1, ny, nx] or [ny, nx].
TrackingLoss tracking_loss(const Tensor& seg_scores, const Tensor& heatmap,
                           const Tensor& offset_rot, const Tensor& zmap,
                           const BevTargets& targets,
                           const std::vector<std::uint8_t>& seg_labels,
                           const LossWeights& weights = {});

}  // namespace ost
