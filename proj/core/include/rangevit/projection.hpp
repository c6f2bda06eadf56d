#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "rangevit/tensor.hpp"

namespace rangevit {

// LiDAR sweep: N points, 4 floats each (x, y, z, intensity), plus optional
// per-point semantic labels in {0..K} where 0 means "ignore".
struct PointCloud {
  std::vector<float> xyzi;   // N * 4
  std::vector<int> labels;   // empty or N entries

  int64_t size() const { return static_cast<int64_t>(xyzi.size()) / 4; }
  float x(int64_t i) const { return xyzi[i * 4 + 0]; }
  float y(int64_t i) const { return xyzi[i * 4 + 1]; }
  float z(int64_t i) const { return xyzi[i * 4 + 2]; }
  float intensity(int64_t i) const { return xyzi[i * 4 + 3]; }
};

// Vertical field of view; up is positive, down negative (degrees).
struct SensorFov {
  double up_deg = 10.0;
  double down_deg = -30.0;
};

// Projected sweep: a 5-channel image (range, x, y, z, intensity), per-pixel
// occupancy and owning point, and the pre-clamp continuous image coordinates
// of every input point. Pixel (h, w) covers [h, h+1) x [w, w+1); its center
// is (h + 0.5, w + 0.5).
struct RangeImage {
  int H = 0;
  int W = 0;
  std::vector<float> features;    // 5 * H * W, channel-major
  std::vector<uint8_t> occupancy; // H * W
  std::vector<int32_t> pixel_owner;  // H * W, -1 when empty

  std::vector<std::array<double, 2>> point_pixel;  // continuous (row, col) per point
  std::vector<uint8_t> point_valid;
  std::vector<float> point_range;

  int64_t skipped_origin = 0;  // zero-range points that cannot be projected
  int64_t dropped_rows = 0;    // points on unfolded rows beyond the beam count
  int64_t collisions = 0;      // points that landed on an already-claimed pixel

  float feature(int c, int h, int w) const {
    return features[(static_cast<int64_t>(c) * H + h) * W + w];
  }
};

// Spherical projection: azimuth -> column, elevation -> row. Pixel collisions
// keep the point with the smallest range; empty pixels stay zero.
RangeImage spherical_project(const PointCloud& cloud, const SensorFov& fov, int H, int W);

// Scan unfolding for clouds stored in capture order: a new beam row starts
// when the azimuth wraps (jumps by more than half a turn against the sweep
// direction); the column comes from azimuth as in spherical projection.
RangeImage unfold_scan(const PointCloud& cloud, int beams, int W);

// Horizontal window [start, start+width) with cyclic wrap at the right edge.
// Keeps the points whose pixel falls inside the window and remaps their
// continuous coordinates by the integer column shift of their pixel.
struct CropResult {
  RangeImage image;
  std::vector<int32_t> point_index;  // original point id per retained point
};
CropResult crop_window(const RangeImage& image, int start, int width);

// Projection settings of a run; dispatches to either projection flavor.
struct ProjectionSpec {
  enum class Mode { spherical, unfold } mode = Mode::spherical;
  int beams = 32;
  int width = 256;
  SensorFov fov;

  RangeImage project(const PointCloud& cloud) const {
    if (mode == Mode::unfold) return unfold_scan(cloud, beams, width);
    return spherical_project(cloud, fov, beams, width);
  }
};

// Packed x,y,z triples (the layout the point ops take), optionally restricted
// to a subset of point ids.
std::vector<float> packed_xyz(const PointCloud& cloud);
std::vector<float> packed_xyz(const PointCloud& cloud, std::span<const int32_t> subset);

// Bilinear per-point feature lookup from a C x H x W map at each point's
// continuous image coordinates; invalid points get zero features.
template <typename T>
Tensor<T> unproject_features(const Tensor<T>& map, const RangeImage& image);

extern template Tensor<float> unproject_features(const Tensor<float>&, const RangeImage&);
extern template Tensor<double> unproject_features(const Tensor<double>&, const RangeImage&);

}  // namespace rangevit
