#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rangevit/projection.hpp"

namespace rangevit {

// Analytic desk-scale LiDAR scene: a ground plane plus boxes, cylinders and
// thin poles standing on it, optionally wrapped in a large enclosure wall so
// that every beam hits something. Classes: 1 ground, 2 box, 3 cylinder
// (including the enclosure wall), 4 pole; 0 stays reserved for "ignore".
struct SceneSpec {
  uint64_t seed = 1;
  int beams = 32;
  int width = 256;
  SensorFov fov;
  bool ground = true;
  int boxes = 6;
  int cylinders = 4;
  int poles = 4;
  double ground_z = -2.0;
  bool enclosure = true;
  double enclosure_radius = 40.0;
  double max_range = 100.0;
};

// Surface list the generator ray-casts against; exposed so tests can verify
// nearest-hit selection independently.
struct SceneGeometry {
  struct Box {
    std::array<double, 3> lo{};
    std::array<double, 3> hi{};
  };
  struct Cylinder {
    double cx = 0.0;
    double cy = 0.0;
    double radius = 1.0;
    double z0 = 0.0;
    double z1 = 0.0;
    bool bounded = true;  // the enclosure wall has no vertical extent limits
    int cls = 3;
  };

  bool ground = true;
  double ground_z = -2.0;
  double max_range = 100.0;
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
};

// Deterministic object layout for a spec (placement only, no ray casting).
SceneGeometry build_geometry(const SceneSpec& spec);

// Unit ray direction of beam row b, column j. Rays go through pixel centers
// of the projection grid, so re-projecting the scene is collision-free.
std::array<double, 3> beam_direction(const SensorFov& fov, int beams, int width, int b, int j);

// first surface hit by the ray from the origin; false when nothing is hit
// within max_range
bool cast_ray(const SceneGeometry& geo, const std::array<double, 3>& dir, double& t_hit,
              int& cls_hit);

// Ray-casts every beam in capture order (beam by beam, azimuth increasing)
// and returns the labeled cloud. Misses produce no point.
PointCloud generate_scene(const SceneSpec& spec);

}  // namespace rangevit
