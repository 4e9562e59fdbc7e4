#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "gnfield/tensor.hpp"

namespace gnfield {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    if (n == 0) throw std::invalid_argument("normalize zero vector");
    return *this * (1.0 / n);
  }
};

// Rigid world-to-camera transform: x_cam = R * x_world + t.
// Camera frame: x right, y down, z forward (optical axis).
struct Pose {
  std::array<double, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 t;

  Vec3 apply(const Vec3& p) const {
    return {R[0] * p.x + R[1] * p.y + R[2] * p.z + t.x,
            R[3] * p.x + R[4] * p.y + R[5] * p.z + t.y,
            R[6] * p.x + R[7] * p.y + R[8] * p.z + t.z};
  }
  Vec3 rotate(const Vec3& p) const {
    return {R[0] * p.x + R[1] * p.y + R[2] * p.z, R[3] * p.x + R[4] * p.y + R[5] * p.z,
            R[6] * p.x + R[7] * p.y + R[8] * p.z};
  }
  Vec3 rotate_transpose(const Vec3& p) const {
    return {R[0] * p.x + R[3] * p.y + R[6] * p.z, R[1] * p.x + R[4] * p.y + R[7] * p.z,
            R[2] * p.x + R[5] * p.y + R[8] * p.z};
  }
  Vec3 camera_center() const { return rotate_transpose(-t); }

  double rotation_det() const {
    return R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
           R[2] * (R[3] * R[7] - R[4] * R[6]);
  }
  bool rotation_orthonormal(double tol = 1e-6) const {
    const Vec3 r0{R[0], R[1], R[2]}, r1{R[3], R[4], R[5]}, r2{R[6], R[7], R[8]};
    return std::abs(r0.norm() - 1) < tol && std::abs(r1.norm() - 1) < tol &&
           std::abs(r2.norm() - 1) < tol && std::abs(r0.dot(r1)) < tol &&
           std::abs(r0.dot(r2)) < tol && std::abs(r1.dot(r2)) < tol &&
           std::abs(rotation_det() - 1.0) < tol;
  }
};

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

struct CameraView {
  Intrinsics intr;
  Pose world_to_cam;
  Tensor<float> image;  // [H,W,3] in [0,1]; may be empty for pose-only views

  void validate() const {
    if (!world_to_cam.rotation_orthonormal())
      throw std::invalid_argument("camera pose: rotation not orthonormal");
  }
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit
  double near = 0, far = 0;
};

// Look-at pose: camera at `eye` with optical axis toward `target`, world `up`
// appearing up in the image (y-down camera convention).
inline Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = {0, 0, 1}) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) throw std::invalid_argument("look_at: view direction parallel to up");
  x = x.normalized();
  const Vec3 y = z.cross(x);
  Pose p;
  p.R = {x.x, x.y, x.z, y.x, y.y, y.z, z.x, z.y, z.z};
  p.t = -Vec3{x.dot(eye), y.dot(eye), z.dot(eye)};
  return p;
}

struct Projection {
  double u = 0, v = 0;
  bool in_bounds = false;
  bool front = false;
};

// Pinhole projection of a world point. `front` uses a small positive epsilon
// so grazing projections do not blow up.
inline Projection project(const Vec3& world_point, const CameraView& view) {
  constexpr double kFrontEps = 1e-4;
  const Vec3 pc = view.world_to_cam.apply(world_point);
  Projection pr;
  pr.front = pc.z > kFrontEps;
  if (!pr.front) return pr;
  pr.u = view.intr.fx * pc.x / pc.z + view.intr.cx;
  pr.v = view.intr.fy * pc.y / pc.z + view.intr.cy;
  pr.in_bounds = pr.u >= 0 && pr.u <= view.intr.width - 1 && pr.v >= 0 &&
                 pr.v <= view.intr.height - 1;
  return pr;
}

// Rays through the given pixel centers, pixel (i, j) = (column, row).
inline std::vector<Ray> generate_rays(const CameraView& view,
                                      const std::vector<std::pair<int, int>>& pixels, double near,
                                      double far) {
  view.validate();
  const Vec3 center = view.world_to_cam.camera_center();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (auto [i, j] : pixels) {
    if (i < 0 || i >= view.intr.width || j < 0 || j >= view.intr.height)
      throw std::invalid_argument("generate_rays: pixel out of bounds");
    const Vec3 dir_cam{(i - view.intr.cx) / view.intr.fx, (j - view.intr.cy) / view.intr.fy, 1.0};
    Ray r;
    r.origin = center;
    r.dir = view.world_to_cam.rotate_transpose(dir_cam).normalized();
    r.near = near;
    r.far = far;
    rays.push_back(r);
  }
  return rays;
}

// Inverse of project for a depth along the pixel ray (t in world units).
inline Vec3 unproject(const CameraView& view, double u, double v, double t_along_ray) {
  const Vec3 dir_cam{(u - view.intr.cx) / view.intr.fx, (v - view.intr.cy) / view.intr.fy, 1.0};
  const Vec3 dir_world = view.world_to_cam.rotate_transpose(dir_cam).normalized();
  return view.world_to_cam.camera_center() + dir_world * t_along_ray;
}

}  // namespace gnfield
