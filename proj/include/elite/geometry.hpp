// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace elite {

struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;
};

using PointCloud = std::vector<Point>;

/// 4x4 row-major rigid transform.
using Mat4 = std::array<std::array<double, 4>, 4>;

Mat4 identity4();
Mat4 compose(const Mat4& a, const Mat4& b);  // a * b
Mat4 rigid_inverse(const Mat4& t);

/// Pinhole camera; extrinsic maps LiDAR coordinates into the camera frame
/// (x right, y down, z forward).
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Mat4 extrinsic = identity4();
  int width = 1;
  int height = 1;

  /// Throws ContractError when intrinsics/extrinsic violate the model.
  void validate() const;
};

struct PixelCorrespondence {
  std::size_t point_index = 0;
  int u = 0;
  int v = 0;
  double depth = 0.0;
};

struct PixelCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

struct VoxelPartition {
  double voxel_edge = 0.0;
  std::vector<std::size_t> assignment;
  std::size_t voxel_count = 0;
};

/// Nearest-integer rounding with ties toward +infinity.
long round_half_up(double x);

std::array<double, 3> to_camera(const Point& p, const Mat4& extrinsic);

/// Keeps points in front of the camera whose rounded pixel is inside the
/// image; output is ordered by point index.
std::vector<PixelCorrespondence> project_points(const PointCloud& cloud, const CameraModel& cam);

/// Inverse of projection for a pixel at a given camera-frame depth,
/// returned in LiDAR coordinates.
Point unproject(double u, double v, double depth, const CameraModel& cam);

VoxelPartition voxelize(const PointCloud& cloud, double edge);

/// Voxel edge for stage l (1-based): base * 2^(l-1).
double stage_voxel_edge(double base_edge, std::size_t stage);

}  // namespace elite
