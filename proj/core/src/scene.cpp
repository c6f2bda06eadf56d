#include "rangevit/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rangevit/common.hpp"

namespace rangevit {

namespace {

constexpr double kEps = 1e-9;

void validate(const SceneSpec& spec) {
  RV_CHECK(spec.beams >= 1, "scene: beam count must be positive");
  RV_CHECK(spec.width >= 1, "scene: width must be positive");
  RV_CHECK(spec.boxes >= 0 && spec.cylinders >= 0 && spec.poles >= 0,
           "scene: archetype counts must be nonnegative");
  RV_CHECK(spec.ground || spec.enclosure || spec.boxes > 0 || spec.cylinders > 0 || spec.poles > 0,
           "scene: at least one archetype must be present");
  RV_CHECK(spec.max_range > 0.0, "scene: max_range must be positive");
  RV_CHECK(!spec.enclosure || spec.enclosure_radius > 0.0,
           "scene: enclosure radius must be positive");
}

// solid box, ray from the origin
bool hit_box(const SceneGeometry::Box& b, const std::array<double, 3>& d, double& t) {
  double enter = 0.0;
  double exit = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(d[a]) < kEps) {
      if (0.0 < b.lo[a] || 0.0 > b.hi[a]) return false;
      continue;
    }
    double t0 = b.lo[a] / d[a];
    double t1 = b.hi[a] / d[a];
    if (t0 > t1) std::swap(t0, t1);
    enter = std::max(enter, t0);
    exit = std::min(exit, t1);
  }
  if (enter > exit || enter <= kEps) return false;
  t = enter;
  return true;
}

// solid vertical cylinder (slab-capped when bounded), ray from the origin
bool hit_cylinder(const SceneGeometry::Cylinder& c, const std::array<double, 3>& d, double& t) {
  const double a = d[0] * d[0] + d[1] * d[1];
  if (a < kEps * kEps) return false;  // vertical ray, outside our FOV anyway
  const double b = -2.0 * (c.cx * d[0] + c.cy * d[1]);
  const double c0 = c.cx * c.cx + c.cy * c.cy - c.radius * c.radius;
  const double disc = b * b - 4.0 * a * c0;
  if (disc < 0.0) return false;
  const double root = std::sqrt(disc);
  double enter = (-b - root) / (2.0 * a);
  double exit = (-b + root) / (2.0 * a);
  if (c.bounded) {
    if (std::fabs(d[2]) < kEps) {
      if (0.0 < c.z0 || 0.0 > c.z1) return false;
    } else {
      double tz0 = c.z0 / d[2];
      double tz1 = c.z1 / d[2];
      if (tz0 > tz1) std::swap(tz0, tz1);
      enter = std::max(enter, tz0);
      exit = std::min(exit, tz1);
    }
  }
  if (enter > exit) return false;
  if (enter <= kEps) {
    if (exit <= kEps) return false;
    enter = exit;  // origin inside (the enclosure): exit through the wall
  }
  t = enter;
  return true;
}

double intensity_base(int cls) {
  switch (cls) {
    case 1: return 0.2;
    case 2: return 0.5;
    case 3: return 0.7;
    default: return 0.9;
  }
}

}  // namespace

SceneGeometry build_geometry(const SceneSpec& spec) {
  validate(spec);
  SceneGeometry geo;
  geo.ground = spec.ground;
  geo.ground_z = spec.ground_z;
  geo.max_range = spec.max_range;

  Rng rng(spec.seed);
  auto place = [&](double& cx, double& cy) {
    const double angle = rng.uniform(0.0, 2.0 * kPi);
    const double dist = rng.uniform(5.0, 25.0);
    cx = dist * std::cos(angle);
    cy = dist * std::sin(angle);
  };
  for (int i = 0; i < spec.boxes; ++i) {
    double cx, cy;
    place(cx, cy);
    const double hx = rng.uniform(0.4, 1.5);
    const double hy = rng.uniform(0.4, 1.5);
    const double height = rng.uniform(0.5, 3.0);
    geo.boxes.push_back({{cx - hx, cy - hy, spec.ground_z},
                         {cx + hx, cy + hy, spec.ground_z + height}});
  }
  for (int i = 0; i < spec.cylinders; ++i) {
    SceneGeometry::Cylinder c;
    place(c.cx, c.cy);
    c.radius = rng.uniform(0.3, 1.2);
    c.z0 = spec.ground_z;
    c.z1 = spec.ground_z + rng.uniform(1.0, 4.0);
    c.cls = 3;
    geo.cylinders.push_back(c);
  }
  for (int i = 0; i < spec.poles; ++i) {
    SceneGeometry::Cylinder c;
    place(c.cx, c.cy);
    c.radius = rng.uniform(0.05, 0.15);
    c.z0 = spec.ground_z;
    c.z1 = spec.ground_z + rng.uniform(2.0, 6.0);
    c.cls = 4;
    geo.cylinders.push_back(c);
  }
  if (spec.enclosure) {
    SceneGeometry::Cylinder wall;
    wall.radius = spec.enclosure_radius;
    wall.bounded = false;
    wall.cls = 3;
    geo.cylinders.push_back(wall);
  }
  return geo;
}

std::array<double, 3> beam_direction(const SensorFov& fov, int beams, int width, int b, int j) {
  const double fov_down = std::fabs(deg2rad(fov.down_deg));
  const double fov_total = deg2rad(fov.up_deg - fov.down_deg);
  const double elev = fov_total * (1.0 - (b + 0.5) / beams) - fov_down;
  const double az = kPi * (1.0 - 2.0 * (j + 0.5) / width);
  return {std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev)};
}

bool cast_ray(const SceneGeometry& geo, const std::array<double, 3>& dir, double& t_hit,
              int& cls_hit) {
  double best = geo.max_range;
  int cls = 0;
  double t = 0.0;
  if (geo.ground && dir[2] != 0.0) {
    const double tg = geo.ground_z / dir[2];
    if (tg > kEps && tg < best) {
      best = tg;
      cls = 1;
    }
  }
  for (const auto& b : geo.boxes)
    if (hit_box(b, dir, t) && t < best) {
      best = t;
      cls = 2;
    }
  for (const auto& c : geo.cylinders)
    if (hit_cylinder(c, dir, t) && t < best) {
      best = t;
      cls = c.cls;
    }
  if (cls == 0) return false;
  t_hit = best;
  cls_hit = cls;
  return true;
}

PointCloud generate_scene(const SceneSpec& spec) {
  const SceneGeometry geo = build_geometry(spec);
  Rng noise(spec.seed ^ 0x9e3779b97f4a7c15ull);
  PointCloud cloud;
  cloud.xyzi.reserve(static_cast<size_t>(spec.beams) * spec.width * 4);
  cloud.labels.reserve(static_cast<size_t>(spec.beams) * spec.width);
  for (int b = 0; b < spec.beams; ++b)
    for (int jj = spec.width - 1; jj >= 0; --jj) {  // azimuth increases along a beam
      const auto dir = beam_direction(spec.fov, spec.beams, spec.width, b, jj);
      double t;
      int cls;
      if (!cast_ray(geo, dir, t, cls)) continue;
      const double inten =
          std::clamp(intensity_base(cls) + noise.uniform(-0.05, 0.05), 0.0, 1.0);
      cloud.xyzi.push_back(static_cast<float>(t * dir[0]));
      cloud.xyzi.push_back(static_cast<float>(t * dir[1]));
      cloud.xyzi.push_back(static_cast<float>(t * dir[2]));
      cloud.xyzi.push_back(static_cast<float>(inten));
      cloud.labels.push_back(cls);
    }
  return cloud;
}

}  // namespace rangevit
