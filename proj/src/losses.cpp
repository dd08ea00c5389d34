#include "ost/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ost {

namespace {
constexpr double kProbClip = 1e-6;
}

BevTargets make_bev_targets(const Box3D& gt, const BevGrid& grid, Index window_radius) {
  if (window_radius < 0) throw std::invalid_argument("window radius must be non-negative");
  const Index nx = grid.nx(), ny = grid.ny();

  BevTargets t;
  t.heatmap = ArrayX::Zero(ny * nx);
  t.offset = ArrayX::Zero(3 * ny * nx);
  t.z_gt = gt.center.z();

  const Index cix = static_cast<Index>(std::floor((gt.center.x() - grid.x_min) / grid.pixel));
  const Index ciy = static_cast<Index>(std::floor((gt.center.y() - grid.y_min) / grid.pixel));
  if (cix < 0 || cix >= nx || ciy < 0 || ciy >= ny) {
    throw std::invalid_argument("box center falls outside the BEV grid");
  }
  t.center_ix = cix;
  t.center_iy = ciy;
  t.window.assign(ny * nx, 0);

  for (Index iy = 0; iy < ny; ++iy) {
    for (Index ix = 0; ix < nx; ++ix) {
      const Index at = iy * nx + ix;
      if (iy == ciy && ix == cix) {
        t.heatmap[at] = 1.0;
        continue;
      }
      const Eigen::Vector2d pc = grid.pixel_center(iy, ix);
      const Eigen::Vector3d probe(pc.x(), pc.y(), gt.center.z());
      if (point_in_box(probe, gt)) {
        const double dy = static_cast<double>(iy - ciy);
        const double dx = static_cast<double>(ix - cix);
        t.heatmap[at] = 1.0 / (1.0 + std::sqrt(dx * dx + dy * dy));
      }
    }
  }

  const Index plane = ny * nx;
  for (Index iy = std::max(Index{0}, ciy - window_radius);
       iy <= std::min(ny - 1, ciy + window_radius); ++iy) {
    for (Index ix = std::max(Index{0}, cix - window_radius);
         ix <= std::min(nx - 1, cix + window_radius); ++ix) {
      const Index at = iy * nx + ix;
      const Eigen::Vector2d pc = grid.pixel_center(iy, ix);
      t.window[at] = 1;
      t.offset[0 * plane + at] = gt.center.x() - pc.x();
      t.offset[1 * plane + at] = gt.center.y() - pc.y();
      t.offset[2 * plane + at] = gt.yaw;
    }
  }
  return t;
}

BevTargets make_bev_targets(const Box3D& gt, const BevGrid& grid, const Points& cloud,
                            Index window_radius) {
  BevTargets t = make_bev_targets(gt, grid, window_radius);
  t.seg_labels.resize(static_cast<size_t>(cloud.rows()));
  for (Index i = 0; i < cloud.rows(); ++i) {
    t.seg_labels[static_cast<size_t>(i)] = point_in_box(cloud.row(i).transpose(), gt) ? 1 : 0;
  }
  return t;
}

Tensor heatmap_focal_loss(const Tensor& heatmap, const ArrayX& target, double alpha,
                          double beta) {
  if (heatmap.numel() != target.size()) {
    throw std::invalid_argument("heatmap and target sizes differ");
  }
  std::vector<Index> pos_idx, neg_idx;
  for (Index i = 0; i < target.size(); ++i) {
    (target[i] == 1.0 ? pos_idx : neg_idx).push_back(i);
  }
  Tensor flat = reshape(heatmap, {heatmap.numel()});
  Tensor clipped = clamp(flat, kProbClip, 1.0 - kProbClip);

  Tensor total = Tensor::scalar(0.0);
  if (!pos_idx.empty()) {
    Tensor p = gather_elements(clipped, pos_idx);
    Tensor term = pow_scalar(add_scalar(neg(p), 1.0), alpha) * log(p);
    total = total + sum_all(term);
  }
  if (!neg_idx.empty()) {
    ArrayX damp(static_cast<Index>(neg_idx.size()));
    for (size_t i = 0; i < neg_idx.size(); ++i) {
      damp[static_cast<Index>(i)] = std::pow(1.0 - target[neg_idx[i]], beta);
    }
    Tensor p = gather_elements(clipped, neg_idx);
    Tensor term = Tensor::from_array({static_cast<Index>(neg_idx.size())}, damp) *
                  pow_scalar(p, alpha) * log(add_scalar(neg(p), 1.0));
    total = total + sum_all(term);
  }
  return neg(total);
}

Tensor window_l1_loss(const Tensor& pred, const ArrayX& target,
                      const std::vector<std::uint8_t>& window) {
  if (pred.numel() != target.size()) throw std::invalid_argument("prediction and target sizes differ");
  const Index plane = static_cast<Index>(window.size());
  if (pred.numel() % plane != 0) {
    throw std::invalid_argument("prediction size is not a multiple of the window plane");
  }
  const Index channels = pred.numel() / plane;

  std::vector<Index> picks;
  std::vector<double> target_picks;
  for (Index at = 0; at < plane; ++at) {
    if (!window[at]) continue;
    for (Index c = 0; c < channels; ++c) {
      picks.push_back(c * plane + at);
      target_picks.push_back(target[c * plane + at]);
    }
  }
  if (picks.empty()) throw std::invalid_argument("empty regression window");

  Tensor flat = reshape(pred, {pred.numel()});
  Tensor diff = gather_elements(flat, picks) -
                Tensor::from_data({static_cast<Index>(picks.size())}, std::move(target_picks));
  return sum_all(abs(diff));
}

Tensor center_z_loss(const Tensor& zmap, const BevTargets& targets) {
  if (zmap.rank() < 2) throw std::invalid_argument("zmap must be at least 2-d");
  const Index nx = zmap.extent(zmap.rank() - 1);
  const Index ny = zmap.extent(zmap.rank() - 2);
  if (zmap.numel() != nx * ny) throw std::invalid_argument("zmap must hold a single plane");
  const Index at = targets.center_iy * nx + targets.center_ix;
  Tensor flat = reshape(zmap, {zmap.numel()});
  Tensor picked = gather_elements(flat, {at});
  return sum_all(abs(add_scalar(picked, -targets.z_gt)));
}

Tensor bce_loss(const Tensor& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.numel() != static_cast<Index>(labels.size())) {
    throw std::invalid_argument("scores and labels sizes differ");
  }
  Tensor flat = reshape(scores, {scores.numel()});
  Tensor p = clamp(flat, kProbClip, 1.0 - kProbClip);
  ArrayX y(scores.numel());
  for (Index i = 0; i < scores.numel(); ++i) y[i] = labels[i] ? 1.0 : 0.0;
  Tensor yt = Tensor::from_array({scores.numel()}, y);
  Tensor ones_minus_y = Tensor::from_array({scores.numel()}, 1.0 - y);
  Tensor term = yt * log(p) + ones_minus_y * log(add_scalar(neg(p), 1.0));
  return neg(mean_all(term));
}

Tensor weighted_total(const Tensor& seg, const Tensor& center, const Tensor& offset,
                      const Tensor& z, const LossWeights& weights) {
  return scale(seg, weights.seg) + scale(center, weights.center) +
         scale(offset, weights.offset) + scale(z, weights.z);
}

TrackingLoss tracking_loss(const Tensor& seg_scores, const Tensor& heatmap,
                           const Tensor& offset_rot, const Tensor& zmap,
                           const BevTargets& targets,
                           const std::vector<std::uint8_t>& seg_labels,
                           const LossWeights& weights) {
  TrackingLoss out;
  out.seg = bce_loss(seg_scores, seg_labels);
  out.center = heatmap_focal_loss(heatmap, targets.heatmap);
  out.offset = window_l1_loss(offset_rot, targets.offset, targets.window);
  out.z = center_z_loss(zmap, targets);
  out.total = weighted_total(out.seg, out.center, out.offset, out.z, weights);
  return out;
}

}  // namespace ost
