#pragma once

#include <Eigen/Core>

#include <array>
#include <vector>

namespace ost {

// Matrix of 3D points, one per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Axis-aligned-in-z oriented box: size is (length, width, height) along the
// box's local x/y/z axes, yaw rotates local x into world x-y about +z.
struct Box3D {
  Eigen::Vector3d center{0.0, 0.0, 0.0};
  Eigen::Vector3d size{1.0, 1.0, 1.0};  // l, w, h; all positive
  double yaw = 0.0;                     // kept in (-pi, pi]

  double volume() const { return size.x() * size.y() * size.z(); }
};

// Maps any angle into (-pi, pi].
double wrap_angle(double a);

// World -> box frame: rotate by -yaw about the center, then translate the
// center to the origin.
Eigen::Vector3d to_canonical(const Eigen::Vector3d& p, const Box3D& box);
Eigen::Vector3d from_canonical(const Eigen::Vector3d& p, const Box3D& box);
Points to_canonical(const Points& pts, const Box3D& box);
Points from_canonical(const Points& pts, const Box3D& box);

// Expresses `box` in the frame of `ref` (and back). Round-trips are exact up
// to floating point.
Box3D box_to_canonical(const Box3D& box, const Box3D& ref);
Box3D box_from_canonical(const Box3D& box, const Box3D& ref);

// Inclusive on faces.
bool point_in_box(const Eigen::Vector3d& p, const Box3D& box);

// Box corners in the BEV plane, counter-clockwise.
std::array<Eigen::Vector2d, 4> bev_corners(const Box3D& box);

// All eight corners: the four BEV corners at the bottom face, then the same
// four at the top face. The mean of the corners is the box center.
std::array<Eigen::Vector3d, 8> box_corners(const Box3D& box);

// Area of the intersection of two convex polygons given counter-clockwise.
double convex_polygon_area(const std::vector<Eigen::Vector2d>& poly);
std::vector<Eigen::Vector2d> clip_convex(const std::vector<Eigen::Vector2d>& subject,
                                         const std::array<Eigen::Vector2d, 4>& clip);

// Intersection-over-union of the rotated BEV rectangles.
double iou_bev(const Box3D& a, const Box3D& b);
// BEV intersection area times z-overlap over the union of volumes.
double iou_3d(const Box3D& a, const Box3D& b);

double center_distance(const Box3D& a, const Box3D& b);

// Grows l and w by 2 * margin_xy (margin on each side); z extent grows by
// 2 * margin_z. Yaw and center are kept.
Box3D inflate_box(const Box3D& box, double margin_xy, double margin_z);

}  // namespace ost
