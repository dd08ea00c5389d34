#pragma once

#include "ost/geometry.hpp"
#include "ost/tensor.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace ost {

struct PointCloud {
  Points xyz;          // [n, 3]
  ArrayX intensity;    // [n] or empty

  Index size() const { return xyz.rows(); }
};

// Greedy farthest point sampling: starts at `start`, then repeatedly takes
// the point with the largest distance to the selected set, breaking ties by
// the lowest index. Requires k <= n. Deterministic for a fixed start.
std::vector<Index> farthest_point_sample(const Points& pts, Index k, Index start = 0);

// Indices of up to k neighbors of `query` within `radius` (inclusive),
// nearest first, ties by lower index. If none are in range the single
// nearest point is used. Short lists are padded by repeating the first
// entry, so the result always has exactly k entries.
std::vector<Index> ball_query(const Points& pts, const Eigen::Vector3d& query, double radius,
                              Index k);

struct InterpolationPlan {
  std::vector<std::array<Index, 3>> idx;   // per target: 3 nearest sources
  std::vector<std::array<double, 3>> w;    // normalized inverse-square weights
};

// Inverse-distance weights from each target to its 3 nearest sources
// (w_j proportional to 1 / d_j^2). A target within 1e-8 of a source copies
// that source exactly. With fewer than 3 sources the nearest list is padded
// by repetition.
InterpolationPlan interpolation_plan(const Points& sources, const Points& targets);

// feats [n_sources, d] -> [n_targets, d] through the plan; differentiable.
Tensor interpolate_features(const Tensor& feats, const InterpolationPlan& plan);

struct BevGrid {
  double x_min = -4.8, x_max = 4.8;
  double y_min = -4.8, y_max = 4.8;
  double z_min = -2.0, z_max = 2.0;
  double pixel = 0.3;

  Index nx() const;  // columns (x)
  Index ny() const;  // rows (y)
  Index cells() const { return nx() * ny(); }
  // Row-major cell id of a point, -1 if outside the grid volume.
  Index cell_of(double x, double y, double z) const;
  Eigen::Vector2d pixel_center(Index iy, Index ix) const;
};

struct BevImage {
  Tensor features;                  // [d, ny, nx]
  std::vector<std::uint8_t> mask;   // ny * nx, 1 where any point landed
};

// Scatters per-point features onto the BEV grid with an elementwise max per
// pixel. Points outside the grid are dropped. Empty pixels are zero and
// carry no gradient.
BevImage voxelize_bev(const Points& pts, const Tensor& feats, const BevGrid& grid);

}  // namespace ost
