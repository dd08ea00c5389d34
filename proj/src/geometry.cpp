#include "ost/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ost {

namespace {
constexpr double kPi = std::numbers::pi;

Eigen::Matrix2d rot2(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Eigen::Matrix2d r;
  r << c, -s, s, c;
  return r;
}
}  // namespace

double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

Eigen::Vector3d to_canonical(const Eigen::Vector3d& p, const Box3D& box) {
  const Eigen::Vector2d d = rot2(-box.yaw) * (p.head<2>() - box.center.head<2>());
  return {d.x(), d.y(), p.z() - box.center.z()};
}

Eigen::Vector3d from_canonical(const Eigen::Vector3d& p, const Box3D& box) {
  const Eigen::Vector2d d = rot2(box.yaw) * p.head<2>();
  return {d.x() + box.center.x(), d.y() + box.center.y(), p.z() + box.center.z()};
}

Points to_canonical(const Points& pts, const Box3D& box) {
  Points out(pts.rows(), 3);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    out.row(i) = to_canonical(Eigen::Vector3d(pts.row(i)), box).transpose();
  }
  return out;
}

Points from_canonical(const Points& pts, const Box3D& box) {
  Points out(pts.rows(), 3);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    out.row(i) = from_canonical(Eigen::Vector3d(pts.row(i)), box).transpose();
  }
  return out;
}

Box3D box_to_canonical(const Box3D& box, const Box3D& ref) {
  Box3D out;
  out.center = to_canonical(box.center, ref);
  out.size = box.size;
  out.yaw = wrap_angle(box.yaw - ref.yaw);
  return out;
}

Box3D box_from_canonical(const Box3D& box, const Box3D& ref) {
  Box3D out;
  out.center = from_canonical(box.center, ref);
  out.size = box.size;
  out.yaw = wrap_angle(box.yaw + ref.yaw);
  return out;
}

bool point_in_box(const Eigen::Vector3d& p, const Box3D& box) {
  const Eigen::Vector3d c = to_canonical(p, box);
  return std::abs(c.x()) <= 0.5 * box.size.x() && std::abs(c.y()) <= 0.5 * box.size.y() &&
         std::abs(c.z()) <= 0.5 * box.size.z();
}

std::array<Eigen::Vector2d, 4> bev_corners(const Box3D& box) {
  const double hl = 0.5 * box.size.x(), hw = 0.5 * box.size.y();
  const Eigen::Matrix2d r = rot2(box.yaw);
  const Eigen::Vector2d c = box.center.head<2>();
  return {c + r * Eigen::Vector2d(hl, hw), c + r * Eigen::Vector2d(-hl, hw),
          c + r * Eigen::Vector2d(-hl, -hw), c + r * Eigen::Vector2d(hl, -hw)};
}

std::array<Eigen::Vector3d, 8> box_corners(const Box3D& box) {
  const auto bev = bev_corners(box);
  const double z0 = box.center.z() - 0.5 * box.size.z();
  const double z1 = box.center.z() + 0.5 * box.size.z();
  std::array<Eigen::Vector3d, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = {bev[i].x(), bev[i].y(), z0};
    out[i + 4] = {bev[i].x(), bev[i].y(), z1};
  }
  return out;
}

double convex_polygon_area(const std::vector<Eigen::Vector2d>& poly) {
  if (poly.size() < 3) return 0.0;
  double twice = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Eigen::Vector2d& a = poly[i];
    const Eigen::Vector2d& b = poly[(i + 1) % poly.size()];
    twice += a.x() * b.y() - b.x() * a.y();
  }
  return 0.5 * std::abs(twice);
}

// Sutherland-Hodgman against each edge of the (counter-clockwise) clip
// rectangle; keeps points on the boundary.
std::vector<Eigen::Vector2d> clip_convex(const std::vector<Eigen::Vector2d>& subject,
                                         const std::array<Eigen::Vector2d, 4>& clip) {
  std::vector<Eigen::Vector2d> poly = subject;
  for (size_t e = 0; e < 4 && !poly.empty(); ++e) {
    const Eigen::Vector2d& a = clip[e];
    const Eigen::Vector2d& b = clip[(e + 1) % 4];
    const Eigen::Vector2d edge = b - a;
    auto inside = [&](const Eigen::Vector2d& p) {
      return edge.x() * (p.y() - a.y()) - edge.y() * (p.x() - a.x()) >= 0.0;
    };
    std::vector<Eigen::Vector2d> next;
    next.reserve(poly.size() + 2);
    for (size_t i = 0; i < poly.size(); ++i) {
      const Eigen::Vector2d& p = poly[i];
      const Eigen::Vector2d& q = poly[(i + 1) % poly.size()];
      const bool pin = inside(p), qin = inside(q);
      if (pin) next.push_back(p);
      if (pin != qin) {
        const double dp = edge.x() * (p.y() - a.y()) - edge.y() * (p.x() - a.x());
        const double dq = edge.x() * (q.y() - a.y()) - edge.y() * (q.x() - a.x());
        const double t = dp / (dp - dq);
        next.push_back(p + t * (q - p));
      }
    }
    poly = std::move(next);
  }
  return poly;
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const std::vector<Eigen::Vector2d> subject(ca.begin(), ca.end());
  const double inter = convex_polygon_area(clip_convex(subject, cb));
  const double area_a = a.size.x() * a.size.y();
  const double area_b = b.size.x() * b.size.y();
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const std::vector<Eigen::Vector2d> subject(ca.begin(), ca.end());
  const double inter_bev = convex_polygon_area(clip_convex(subject, cb));
  const double za0 = a.center.z() - 0.5 * a.size.z(), za1 = a.center.z() + 0.5 * a.size.z();
  const double zb0 = b.center.z() - 0.5 * b.size.z(), zb1 = b.center.z() + 0.5 * b.size.z();
  const double zo = std::max(0.0, std::min(za1, zb1) - std::max(za0, zb0));
  const double inter = inter_bev * zo;
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double center_distance(const Box3D& a, const Box3D& b) {
  return (a.center - b.center).norm();
}

Box3D inflate_box(const Box3D& box, double margin_xy, double margin_z) {
  if (margin_xy < 0.0 || margin_z < 0.0) throw std::invalid_argument("negative box margin");
  Box3D out = box;
  out.size.x() += 2.0 * margin_xy;
  out.size.y() += 2.0 * margin_xy;
  out.size.z() += 2.0 * margin_z;
  return out;
}

}  // namespace ost
