// SPDX-License-Identifier: Apache-2.0
#include "elite/geometry.hpp"

#include <cmath>
#include <map>
#include <tuple>

#include "elite/errors.hpp"

namespace elite {

Mat4 identity4() {
  Mat4 m{};
  for (int i = 0; i < 4; ++i) m[i][i] = 1.0;
  return m;
}

Mat4 compose(const Mat4& a, const Mat4& b) {
  Mat4 m{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 4; ++k) m[i][j] += a[i][k] * b[k][j];
  return m;
}

Mat4 rigid_inverse(const Mat4& t) {
  Mat4 m = identity4();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i][j] = t[j][i];
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s -= m[i][k] * t[k][3];
    m[i][3] = s;
  }
  return m;
}

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ContractError("camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ContractError("camera: image size must be positive");
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += extrinsic[k][i] * extrinsic[k][j];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-6)
        throw ContractError("camera: extrinsic rotation is not orthonormal");
    }
  }
  for (const auto& row : extrinsic)
    for (double v : row)
      if (!std::isfinite(v)) throw ContractError("camera: extrinsic not finite");
}

long round_half_up(double x) { return static_cast<long>(std::floor(x + 0.5)); }

std::array<double, 3> to_camera(const Point& p, const Mat4& e) {
  return {e[0][0] * p.x + e[0][1] * p.y + e[0][2] * p.z + e[0][3],
          e[1][0] * p.x + e[1][1] * p.y + e[1][2] * p.z + e[1][3],
          e[2][0] * p.x + e[2][1] * p.y + e[2][2] * p.z + e[2][3]};
}

std::vector<PixelCorrespondence> project_points(const PointCloud& cloud, const CameraModel& cam) {
  cam.validate();
  std::vector<PixelCorrespondence> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto c = to_camera(cloud[i], cam.extrinsic);
    if (!(c[2] > 0.0)) continue;
    const long u = round_half_up(cam.fx * c[0] / c[2] + cam.cx);
    const long v = round_half_up(cam.fy * c[1] / c[2] + cam.cy);
    if (u < 0 || v < 0 || u >= cam.width || v >= cam.height) continue;
    out.push_back({i, static_cast<int>(u), static_cast<int>(v), c[2]});
  }
  return out;
}

Point unproject(double u, double v, double depth, const CameraModel& cam) {
  const double xc = (u - cam.cx) * depth / cam.fx;
  const double yc = (v - cam.cy) * depth / cam.fy;
  const Mat4 inv = rigid_inverse(cam.extrinsic);
  const auto p = to_camera(Point{xc, yc, depth, 0.0}, inv);
  return {p[0], p[1], p[2], 0.0};
}

VoxelPartition voxelize(const PointCloud& cloud, double edge) {
  if (!(edge > 0.0)) throw ContractError("voxelize: edge must be positive");
  VoxelPartition part;
  part.voxel_edge = edge;
  part.assignment.reserve(cloud.size());
  std::map<std::tuple<long, long, long>, std::size_t> ids;
  for (const Point& p : cloud) {
    const auto key = std::make_tuple(static_cast<long>(std::floor(p.x / edge)),
                                     static_cast<long>(std::floor(p.y / edge)),
                                     static_cast<long>(std::floor(p.z / edge)));
    auto [it, inserted] = ids.try_emplace(key, ids.size());
    part.assignment.push_back(it->second);
  }
  part.voxel_count = ids.size();
  return part;
}

double stage_voxel_edge(double base_edge, std::size_t stage) {
  if (stage == 0) throw ContractError("stage_voxel_edge: stages are 1-based");
  return std::ldexp(base_edge, static_cast<int>(stage) - 1);
}

}  // namespace elite
