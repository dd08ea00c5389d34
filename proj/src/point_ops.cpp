#include "ost/point_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ost {

std::vector<Index> farthest_point_sample(const Points& pts, Index k, Index start) {
  const Index n = pts.rows();
  if (n == 0) throw std::invalid_argument("farthest_point_sample on an empty set");
  if (k <= 0) throw std::invalid_argument("farthest_point_sample requires k > 0");
  if (k > n) throw std::invalid_argument("farthest_point_sample requires k <= point count");
  if (start < 0 || start >= n) throw std::invalid_argument("farthest_point_sample start out of range");

  std::vector<Index> picked;
  picked.reserve(k);
  picked.push_back(start);
  if (k == 1) return picked;

  // min squared distance from each point to the selected set
  Eigen::VectorXd best = (pts.rowwise() - pts.row(start)).rowwise().squaredNorm();
  while (static_cast<Index>(picked.size()) < k) {
    Index far = 0;
    double far_d = -1.0;
    for (Index i = 0; i < n; ++i) {
      if (best[i] > far_d) {
        far_d = best[i];
        far = i;
      }
    }
    picked.push_back(far);
    best = best.cwiseMin((pts.rowwise() - pts.row(far)).rowwise().squaredNorm().eval());
  }
  return picked;
}

std::vector<Index> ball_query(const Points& pts, const Eigen::Vector3d& query, double radius,
                              Index k) {
  const Index n = pts.rows();
  if (n == 0) throw std::invalid_argument("ball_query on an empty set");
  if (k <= 0) throw std::invalid_argument("ball_query requires k > 0");
  if (radius <= 0.0) throw std::invalid_argument("ball_query requires a positive radius");

  const double r2 = radius * radius;
  std::vector<std::pair<double, Index>> in_range;
  double nearest_d = std::numeric_limits<double>::infinity();
  Index nearest = 0;
  for (Index i = 0; i < n; ++i) {
    const double d2 = (pts.row(i).transpose() - query).squaredNorm();
    if (d2 <= r2) in_range.emplace_back(d2, i);
    if (d2 < nearest_d) {
      nearest_d = d2;
      nearest = i;
    }
  }
  if (in_range.empty()) in_range.emplace_back(nearest_d, nearest);
  std::sort(in_range.begin(), in_range.end());
  if (static_cast<Index>(in_range.size()) > k) in_range.resize(k);

  std::vector<Index> out;
  out.reserve(k);
  for (const auto& [d2, i] : in_range) out.push_back(i);
  while (static_cast<Index>(out.size()) < k) out.push_back(out.front());
  return out;
}

InterpolationPlan interpolation_plan(const Points& sources, const Points& targets) {
  const Index n = sources.rows();
  if (n == 0) throw std::invalid_argument("interpolation_plan with no sources");
  constexpr double kExactCopy = 1e-8;

  InterpolationPlan plan;
  plan.idx.resize(targets.rows());
  plan.w.resize(targets.rows());
  for (Index t = 0; t < targets.rows(); ++t) {
    std::array<double, 3> d2{std::numeric_limits<double>::infinity(),
                             std::numeric_limits<double>::infinity(),
                             std::numeric_limits<double>::infinity()};
    std::array<Index, 3> id{0, 0, 0};
    for (Index s = 0; s < n; ++s) {
      const double d = (sources.row(s) - targets.row(t)).squaredNorm();
      if (d < d2[0]) {
        d2 = {d, d2[0], d2[1]};
        id = {s, id[0], id[1]};
      } else if (d < d2[1]) {
        d2 = {d2[0], d, d2[1]};
        id = {id[0], s, id[1]};
      } else if (d < d2[2]) {
        d2[2] = d;
        id[2] = s;
      }
    }
    // fewer than 3 sources: repeat the nearest
    if (n < 2) d2[1] = d2[0], id[1] = id[0];
    if (n < 3) d2[2] = d2[1], id[2] = id[1];

    std::array<double, 3> w{};
    if (std::sqrt(d2[0]) < kExactCopy) {
      w = {1.0, 0.0, 0.0};
    } else {
      double sum = 0.0;
      for (int j = 0; j < 3; ++j) {
        w[j] = 1.0 / d2[j];
        sum += w[j];
      }
      for (int j = 0; j < 3; ++j) w[j] /= sum;
    }
    plan.idx[t] = id;
    plan.w[t] = w;
  }
  return plan;
}

Tensor interpolate_features(const Tensor& feats, const InterpolationPlan& plan) {
  return weighted_gather_rows(feats, plan.idx, plan.w);
}

Index BevGrid::nx() const {
  const Index v = static_cast<Index>(std::llround((x_max - x_min) / pixel));
  if (v <= 0) throw std::invalid_argument("BEV grid has no columns");
  return v;
}

Index BevGrid::ny() const {
  const Index v = static_cast<Index>(std::llround((y_max - y_min) / pixel));
  if (v <= 0) throw std::invalid_argument("BEV grid has no rows");
  return v;
}

Index BevGrid::cell_of(double x, double y, double z) const {
  if (x < x_min || x >= x_max || y < y_min || y >= y_max || z < z_min || z >= z_max) return -1;
  const Index ix = std::min(static_cast<Index>((x - x_min) / pixel), nx() - 1);
  const Index iy = std::min(static_cast<Index>((y - y_min) / pixel), ny() - 1);
  return iy * nx() + ix;
}

Eigen::Vector2d BevGrid::pixel_center(Index iy, Index ix) const {
  return {x_min + (static_cast<double>(ix) + 0.5) * pixel,
          y_min + (static_cast<double>(iy) + 0.5) * pixel};
}

BevImage voxelize_bev(const Points& pts, const Tensor& feats, const BevGrid& grid) {
  if (feats.rank() != 2 || feats.extent(0) != pts.rows()) {
    throw std::invalid_argument("voxelize_bev: features must be [n_points, d]");
  }
  const Index d = feats.extent(1);
  const Index cells = grid.cells();

  std::vector<Index> cell_of_row(pts.rows());
  BevImage out;
  out.mask.assign(cells, 0);
  for (Index i = 0; i < pts.rows(); ++i) {
    const Index c = grid.cell_of(pts(i, 0), pts(i, 1), pts(i, 2));
    cell_of_row[i] = c;
    if (c >= 0) out.mask[c] = 1;
  }
  Tensor flat = scatter_max_rows(feats, cell_of_row, cells);          // [cells, d]
  out.features = reshape(transpose(flat, 0, 1), {d, grid.ny(), grid.nx()});
  return out;
}

}  // namespace ost
