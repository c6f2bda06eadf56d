#include "rangevit/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rangevit/ops.hpp"

namespace rangevit {

namespace {

void init_image(RangeImage& img, int H, int W, int64_t n_points) {
  img.H = H;
  img.W = W;
  img.features.assign(5LL * H * W, 0.0f);
  img.occupancy.assign(static_cast<int64_t>(H) * W, 0);
  img.pixel_owner.assign(static_cast<int64_t>(H) * W, -1);
  img.point_pixel.assign(n_points, {0.0, 0.0});
  img.point_valid.assign(n_points, 0);
  img.point_range.assign(n_points, 0.0f);
}

// smallest-range-wins pixel write
void deposit(RangeImage& img, std::vector<float>& best_range, int64_t point, int h, int w,
             double r, float x, float y, float z, float inten) {
  const int64_t pix = static_cast<int64_t>(h) * img.W + w;
  if (img.occupancy[pix]) {
    img.collisions++;
    if (static_cast<float>(r) >= best_range[pix]) return;
  }
  const int64_t hw = static_cast<int64_t>(img.H) * img.W;
  img.features[0 * hw + pix] = static_cast<float>(r);
  img.features[1 * hw + pix] = x;
  img.features[2 * hw + pix] = y;
  img.features[3 * hw + pix] = z;
  img.features[4 * hw + pix] = inten;
  img.occupancy[pix] = 1;
  img.pixel_owner[pix] = static_cast<int32_t>(point);
  best_range[pix] = static_cast<float>(r);
}

}  // namespace

RangeImage spherical_project(const PointCloud& cloud, const SensorFov& fov, int H, int W) {
  RV_CHECK(H > 0 && W > 0, "spherical_project: image dims must be positive");
  const double fd = std::fabs(deg2rad(fov.down_deg));
  const double fv = fd + std::fabs(deg2rad(fov.up_deg));
  RV_CHECK(fv > 0.0, "spherical_project: empty vertical field of view");

  RangeImage img;
  const int64_t n = cloud.size();
  init_image(img, H, W, n);
  std::vector<float> best_range(static_cast<int64_t>(H) * W,
                                std::numeric_limits<float>::infinity());

  for (int64_t i = 0; i < n; ++i) {
    const double x = cloud.x(i), y = cloud.y(i), z = cloud.z(i);
    RV_CHECK(std::isfinite(x) && std::isfinite(y) && std::isfinite(z),
             "spherical_project: non-finite coordinate at point " + std::to_string(i));
    const double r = std::sqrt(x * x + y * y + z * z);
    if (r == 0.0) {
      img.skipped_origin++;
      continue;
    }
    const double az = std::atan2(y, x);
    const double elev = std::asin(z / r);
    const double w_cont = 0.5 * (1.0 - az / kPi) * W;
    const double h_cont = (1.0 - (elev + fd) / fv) * H;
    img.point_pixel[i] = {h_cont, w_cont};
    img.point_valid[i] = 1;
    img.point_range[i] = static_cast<float>(r);

    int hh = static_cast<int>(std::floor(h_cont));
    int ww = static_cast<int>(std::floor(w_cont));
    hh = std::clamp(hh, 0, H - 1);
    ww = std::clamp(ww, 0, W - 1);
    deposit(img, best_range, i, hh, ww, r, cloud.x(i), cloud.y(i), cloud.z(i),
            cloud.intensity(i));
  }
  return img;
}

RangeImage unfold_scan(const PointCloud& cloud, int beams, int W) {
  RV_CHECK(beams > 0 && W > 0, "unfold_scan: image dims must be positive");

  RangeImage img;
  const int64_t n = cloud.size();
  init_image(img, beams, W, n);
  std::vector<float> best_range(static_cast<int64_t>(beams) * W,
                                std::numeric_limits<float>::infinity());

  int row = 0;
  bool have_prev = false;
  double prev_az = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = cloud.x(i), y = cloud.y(i), z = cloud.z(i);
    RV_CHECK(std::isfinite(x) && std::isfinite(y) && std::isfinite(z),
             "unfold_scan: non-finite coordinate at point " + std::to_string(i));
    const double r = std::sqrt(x * x + y * y + z * z);
    if (r == 0.0) {
      img.skipped_origin++;
      continue;
    }
    const double az = std::atan2(y, x);
    if (have_prev && std::fabs(az - prev_az) > kPi) row++;
    prev_az = az;
    have_prev = true;
    if (row >= beams) {
      img.dropped_rows++;
      continue;
    }

    const double w_cont = 0.5 * (1.0 - az / kPi) * W;
    img.point_pixel[i] = {row + 0.5, w_cont};
    img.point_valid[i] = 1;
    img.point_range[i] = static_cast<float>(r);

    int ww = std::clamp(static_cast<int>(std::floor(w_cont)), 0, W - 1);
    deposit(img, best_range, i, row, ww, r, cloud.x(i), cloud.y(i), cloud.z(i),
            cloud.intensity(i));
  }
  return img;
}

CropResult crop_window(const RangeImage& image, int start, int width) {
  RV_CHECK(width > 0 && width <= image.W,
           "crop_window: width " + std::to_string(width) + " out of range for image width " +
               std::to_string(image.W));
  RV_CHECK(start >= 0 && start < image.W, "crop_window: start column out of range");

  CropResult res;
  RangeImage& crop = res.image;
  crop.H = image.H;
  crop.W = width;
  const int64_t hw_src = static_cast<int64_t>(image.H) * image.W;
  const int64_t hw_dst = static_cast<int64_t>(image.H) * width;
  crop.features.assign(5 * hw_dst, 0.0f);
  crop.occupancy.assign(hw_dst, 0);
  crop.pixel_owner.assign(hw_dst, -1);

  // window column j <- source column (start + j) mod W
  std::vector<int> src_col(width);
  for (int j = 0; j < width; ++j) src_col[j] = (start + j) % image.W;

  // source column -> window position, -1 outside
  std::vector<int> window_pos(image.W, -1);
  for (int j = 0; j < width; ++j) window_pos[src_col[j]] = j;

  for (int c = 0; c < 5; ++c)
    for (int h = 0; h < image.H; ++h) {
      const float* srow = image.features.data() + c * hw_src + static_cast<int64_t>(h) * image.W;
      float* drow = crop.features.data() + c * hw_dst + static_cast<int64_t>(h) * width;
      for (int j = 0; j < width; ++j) drow[j] = srow[src_col[j]];
    }
  for (int h = 0; h < image.H; ++h)
    for (int j = 0; j < width; ++j) {
      const int64_t src = static_cast<int64_t>(h) * image.W + src_col[j];
      crop.occupancy[static_cast<int64_t>(h) * width + j] = image.occupancy[src];
    }

  const int64_t n = static_cast<int64_t>(image.point_pixel.size());
  std::vector<int32_t> new_id(n, -1);
  for (int64_t i = 0; i < n; ++i) {
    if (!image.point_valid[i]) continue;
    const double w_cont = image.point_pixel[i][1];
    const int col = std::clamp(static_cast<int>(std::floor(w_cont)), 0, image.W - 1);
    const int j = window_pos[col];
    if (j < 0) continue;
    new_id[i] = static_cast<int32_t>(res.point_index.size());
    res.point_index.push_back(static_cast<int32_t>(i));
    crop.point_pixel.push_back({image.point_pixel[i][0], w_cont + (j - col)});
    crop.point_valid.push_back(1);
    crop.point_range.push_back(image.point_range[i]);
  }
  for (int h = 0; h < image.H; ++h)
    for (int j = 0; j < width; ++j) {
      const int32_t owner = image.pixel_owner[static_cast<int64_t>(h) * image.W + src_col[j]];
      if (owner >= 0) crop.pixel_owner[static_cast<int64_t>(h) * width + j] = new_id[owner];
    }
  return res;
}

std::vector<float> packed_xyz(const PointCloud& cloud) {
  std::vector<float> out(static_cast<size_t>(cloud.size()) * 3);
  for (int64_t i = 0; i < cloud.size(); ++i) {
    out[i * 3 + 0] = cloud.x(i);
    out[i * 3 + 1] = cloud.y(i);
    out[i * 3 + 2] = cloud.z(i);
  }
  return out;
}

std::vector<float> packed_xyz(const PointCloud& cloud, std::span<const int32_t> subset) {
  std::vector<float> out(subset.size() * 3);
  for (size_t i = 0; i < subset.size(); ++i) {
    const int64_t p = subset[i];
    RV_CHECK(p >= 0 && p < cloud.size(), "packed_xyz: point id out of range");
    out[i * 3 + 0] = cloud.x(p);
    out[i * 3 + 1] = cloud.y(p);
    out[i * 3 + 2] = cloud.z(p);
  }
  return out;
}

template <typename T>
Tensor<T> unproject_features(const Tensor<T>& map, const RangeImage& image) {
  RV_CHECK(map.ndim() == 3, "unproject_features: expected C x H x W map");
  RV_CHECK(map.dim(1) == image.H && map.dim(2) == image.W,
           "unproject_features: map " + shape_str(map.shape()) + " does not match image " +
               std::to_string(image.H) + "x" + std::to_string(image.W));
  const int64_t n = static_cast<int64_t>(image.point_pixel.size());
  const int64_t C = map.dim(0);

  std::vector<std::array<double, 2>> coords(n);
  bool any_invalid = false;
  for (int64_t i = 0; i < n; ++i) {
    if (image.point_valid[i]) {
      coords[i] = image.point_pixel[i];
    } else {
      coords[i] = {0.5, 0.5};
      any_invalid = true;
    }
  }
  Tensor<T> out = bilinear_sample(map, coords);
  if (any_invalid) {
    std::vector<T> mask(n * C, T(1));
    for (int64_t i = 0; i < n; ++i)
      if (!image.point_valid[i]) std::fill_n(mask.begin() + i * C, C, T(0));
    out = mul(out, Tensor<T>::from_data({n, C}, std::move(mask)));
  }
  return out;
}

template Tensor<float> unproject_features(const Tensor<float>&, const RangeImage&);
template Tensor<double> unproject_features(const Tensor<double>&, const RangeImage&);

}  // namespace rangevit
