#include "rangevit/pointops.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace rangevit {

KernelDisposition KernelDisposition::make(int count, double sigma) {
  RV_CHECK(count >= 1, "KernelDisposition: need at least the center point");
  RV_CHECK(sigma > 0.0, "KernelDisposition: sigma must be positive");
  KernelDisposition d;
  d.sigma = sigma;
  d.points.resize(count);
  d.points[0] = {0.0, 0.0, 0.0};
  const double shell = 0.6 * sigma;
  const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
  const int n = count - 1;
  for (int k = 0; k < n; ++k) {
    const double z = 1.0 - 2.0 * (k + 0.5) / n;
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double theta = golden_angle * k;
    d.points[k + 1] = {shell * rho * std::cos(theta), shell * rho * std::sin(theta), shell * z};
  }
  return d;
}

namespace {

// correlation of a neighbor offset with every kernel point; emits the kernels
// with positive influence
template <typename T>
void kernel_influences(const KernelDisposition& disp, const float* qp, const float* sp,
                       std::vector<std::pair<int, T>>* out_h) {
  out_h->clear();
  const double ox = static_cast<double>(sp[0]) - qp[0];
  const double oy = static_cast<double>(sp[1]) - qp[1];
  const double oz = static_cast<double>(sp[2]) - qp[2];
  for (int64_t k = 0; k < static_cast<int64_t>(disp.points.size()); ++k) {
    const auto& pk = disp.points[k];
    const double dx = ox - pk[0], dy = oy - pk[1], dz = oz - pk[2];
    const double h = 1.0 - std::sqrt(dx * dx + dy * dy + dz * dz) / disp.sigma;
    if (h > 0.0) out_h->emplace_back(static_cast<int>(k), static_cast<T>(h));
  }
}

int64_t cell_key(double x, double y, double z, double inv_cell) {
  // 21 bits per axis, offset to keep indices positive
  const int64_t off = int64_t{1} << 20;
  const int64_t ix = static_cast<int64_t>(std::floor(x * inv_cell)) + off;
  const int64_t iy = static_cast<int64_t>(std::floor(y * inv_cell)) + off;
  const int64_t iz = static_cast<int64_t>(std::floor(z * inv_cell)) + off;
  RV_CHECK(ix >= 0 && ix < (int64_t{1} << 21) && iy >= 0 && iy < (int64_t{1} << 21) && iz >= 0 &&
               iz < (int64_t{1} << 21),
           "radius_neighbors: coordinates too large for the hash grid");
  return (ix << 42) | (iy << 21) | iz;
}

}  // namespace

NeighborIndex radius_neighbors(std::span<const float> query_xyz,
                               std::span<const float> support_xyz, double radius,
                               int max_neighbors) {
  RV_CHECK(radius > 0.0, "radius_neighbors: radius must be positive");
  RV_CHECK(max_neighbors > 0, "radius_neighbors: max_neighbors must be positive");
  RV_CHECK(query_xyz.size() % 3 == 0 && support_xyz.size() % 3 == 0,
           "radius_neighbors: xyz buffers must be packed triples");
  const int64_t nq = static_cast<int64_t>(query_xyz.size()) / 3;
  const int64_t ns = static_cast<int64_t>(support_xyz.size()) / 3;
  const double inv_cell = 1.0 / radius;
  const double r2 = radius * radius;

  std::unordered_map<int64_t, std::vector<int32_t>> grid;
  grid.reserve(static_cast<size_t>(ns));
  for (int64_t i = 0; i < ns; ++i) {
    const float* p = support_xyz.data() + i * 3;
    RV_CHECK(std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2]),
             "radius_neighbors: non-finite support coordinate at point " + std::to_string(i));
    grid[cell_key(p[0], p[1], p[2], inv_cell)].push_back(static_cast<int32_t>(i));
  }

  NeighborIndex out;
  out.lists.resize(nq);
  std::vector<std::pair<double, int32_t>> found;
  for (int64_t q = 0; q < nq; ++q) {
    const float* p = query_xyz.data() + q * 3;
    RV_CHECK(std::isfinite(p[0]) && std::isfinite(p[1]) && std::isfinite(p[2]),
             "radius_neighbors: non-finite query coordinate at point " + std::to_string(q));
    found.clear();
    const int64_t cx = static_cast<int64_t>(std::floor(p[0] * inv_cell));
    const int64_t cy = static_cast<int64_t>(std::floor(p[1] * inv_cell));
    const int64_t cz = static_cast<int64_t>(std::floor(p[2] * inv_cell));
    const int64_t off = int64_t{1} << 20;
    for (int64_t dx = -1; dx <= 1; ++dx)
      for (int64_t dy = -1; dy <= 1; ++dy)
        for (int64_t dz = -1; dz <= 1; ++dz) {
          const int64_t key =
              ((cx + dx + off) << 42) | ((cy + dy + off) << 21) | (cz + dz + off);
          auto it = grid.find(key);
          if (it == grid.end()) continue;
          for (int32_t s : it->second) {
            const float* sp = support_xyz.data() + static_cast<int64_t>(s) * 3;
            const double ddx = static_cast<double>(sp[0]) - p[0];
            const double ddy = static_cast<double>(sp[1]) - p[1];
            const double ddz = static_cast<double>(sp[2]) - p[2];
            const double d2 = ddx * ddx + ddy * ddy + ddz * ddz;
            if (d2 <= r2) found.emplace_back(d2, s);
          }
        }
    std::sort(found.begin(), found.end());
    if (static_cast<int>(found.size()) > max_neighbors) found.resize(max_neighbors);
    auto& lst = out.lists[q];
    lst.reserve(found.size());
    for (auto& [d2, s] : found) lst.push_back(s);
  }
  return out;
}

template <typename T>
Tensor<T> kpconv(const Tensor<T>& features, std::span<const float> support_xyz,
                 std::span<const float> query_xyz, const NeighborIndex& neighbors,
                 const KernelDisposition& disp, const Tensor<T>& weights) {
  RV_CHECK(features.ndim() == 2, "kpconv: features must be N x Cin");
  RV_CHECK(weights.ndim() == 3, "kpconv: weights must be K x Cout x Cin");
  const int64_t ns = features.dim(0), cin = features.dim(1);
  const int64_t nk = weights.dim(0), cout = weights.dim(1);
  RV_CHECK(weights.dim(2) == cin, "kpconv: weight in-dim does not match features");
  RV_CHECK(nk == static_cast<int64_t>(disp.points.size()),
           "kpconv: weight count does not match kernel disposition");
  RV_CHECK(static_cast<int64_t>(support_xyz.size()) == ns * 3,
           "kpconv: support coordinate count mismatch");
  const int64_t nq = static_cast<int64_t>(neighbors.lists.size());
  RV_CHECK(static_cast<int64_t>(query_xyz.size()) == nq * 3,
           "kpconv: query coordinate count mismatch");

  Tensor<T> out = Tensor<T>::make_op({nq, cout}, {features, weights});
  auto ov = out.value_mut();
  auto fv = features.value();
  auto wv = weights.value();

  std::vector<T> acc(nk * cin);
  std::vector<uint8_t> touched(nk);
  std::vector<std::pair<int, T>> hs;
  for (int64_t q = 0; q < nq; ++q) {
    std::fill(acc.begin(), acc.end(), T(0));
    std::fill(touched.begin(), touched.end(), 0);
    const float* qp = query_xyz.data() + q * 3;
    for (int32_t s : neighbors.lists[q]) {
      kernel_influences<T>(disp, qp, support_xyz.data() + static_cast<int64_t>(s) * 3, &hs);
      const T* frow = fv.data() + static_cast<int64_t>(s) * cin;
      for (auto& [k, h] : hs) {
        touched[k] = 1;
        T* arow = acc.data() + static_cast<int64_t>(k) * cin;
        for (int64_t c = 0; c < cin; ++c) arow[c] += h * frow[c];
      }
    }
    T* orow = ov.data() + q * cout;
    for (int64_t k = 0; k < nk; ++k) {
      if (!touched[k]) continue;
      const T* arow = acc.data() + k * cin;
      const T* wk = wv.data() + k * cout * cin;
      for (int64_t o = 0; o < cout; ++o) {
        const T* wrow = wk + o * cin;
        T dot = T(0);
        for (int64_t c = 0; c < cin; ++c) dot += wrow[c] * arow[c];
        orow[o] += dot;
      }
    }
  }

  auto fn = features.node();
  auto wn = weights.node();
  auto nbr = std::make_shared<NeighborIndex>(neighbors);
  std::vector<float> sxyz(support_xyz.begin(), support_xyz.end());
  std::vector<float> qxyz(query_xyz.begin(), query_xyz.end());
  out.set_backward([fn, wn, nbr, sxyz = std::move(sxyz), qxyz = std::move(qxyz), disp, nq, nk,
                    cin, cout](detail::TensorNode<T>& self) {
    std::vector<T> acc(nk * cin);
    std::vector<T> dacc(nk * cin);
    std::vector<uint8_t> touched(nk);
    std::vector<std::pair<int, T>> hs;
    for (int64_t q = 0; q < nq; ++q) {
      const T* gout = self.grad.data() + q * cout;
      std::fill(acc.begin(), acc.end(), T(0));
      std::fill(touched.begin(), touched.end(), 0);
      const float* qp = qxyz.data() + q * 3;
      for (int32_t s : nbr->lists[q]) {
        kernel_influences<T>(disp, qp, sxyz.data() + static_cast<int64_t>(s) * 3, &hs);
        const T* frow = fn->value.data() + static_cast<int64_t>(s) * cin;
        for (auto& [k, h] : hs) {
          touched[k] = 1;
          T* arow = acc.data() + static_cast<int64_t>(k) * cin;
          for (int64_t c = 0; c < cin; ++c) arow[c] += h * frow[c];
        }
      }
      for (int64_t k = 0; k < nk; ++k) {
        if (!touched[k]) continue;
        const T* wk = wn->value.data() + k * cout * cin;
        T* darow = dacc.data() + k * cin;
        std::fill(darow, darow + cin, T(0));
        for (int64_t o = 0; o < cout; ++o) {
          const T g = gout[o];
          const T* wrow = wk + o * cin;
          for (int64_t c = 0; c < cin; ++c) darow[c] += g * wrow[c];
        }
        if (wn->requires_grad) {
          const T* arow = acc.data() + k * cin;
          T* dwk = wn->grad.data() + k * cout * cin;
          for (int64_t o = 0; o < cout; ++o) {
            const T g = gout[o];
            T* dwrow = dwk + o * cin;
            for (int64_t c = 0; c < cin; ++c) dwrow[c] += g * arow[c];
          }
        }
      }
      if (fn->requires_grad) {
        for (int32_t s : nbr->lists[q]) {
          kernel_influences<T>(disp, qp, sxyz.data() + static_cast<int64_t>(s) * 3, &hs);
          T* dfrow = fn->grad.data() + static_cast<int64_t>(s) * cin;
          for (auto& [k, h] : hs) {
            const T* darow = dacc.data() + static_cast<int64_t>(k) * cin;
            for (int64_t c = 0; c < cin; ++c) dfrow[c] += h * darow[c];
          }
        }
      }
    }
  });
  return out;
}

template Tensor<float> kpconv(const Tensor<float>&, std::span<const float>,
                              std::span<const float>, const NeighborIndex&,
                              const KernelDisposition&, const Tensor<float>&);
template Tensor<double> kpconv(const Tensor<double>&, std::span<const float>,
                               std::span<const float>, const NeighborIndex&,
                               const KernelDisposition&, const Tensor<double>&);

std::vector<int> knn_postprocess(const std::vector<int>& pixel_labels, const RangeImage& image,
                                 int k, int window, double range_sigma) {
  RV_CHECK(k >= 1, "knn_postprocess: k must be positive");
  RV_CHECK(window >= 1 && window % 2 == 1, "knn_postprocess: window must be odd and positive");
  RV_CHECK(range_sigma > 0.0, "knn_postprocess: range_sigma must be positive");
  RV_CHECK(static_cast<int64_t>(pixel_labels.size()) ==
               static_cast<int64_t>(image.H) * image.W,
           "knn_postprocess: pixel label count does not match image size");

  const int half = window / 2;
  const int64_t n = static_cast<int64_t>(image.point_pixel.size());
  std::vector<int> out(n, 0);

  struct Cand {
    double d;
    int h, w, label;
  };
  std::vector<Cand> cands;
  for (int64_t i = 0; i < n; ++i) {
    if (!image.point_valid[i]) continue;
    const int h =
        std::clamp(static_cast<int>(std::floor(image.point_pixel[i][0])), 0, image.H - 1);
    const int w =
        std::clamp(static_cast<int>(std::floor(image.point_pixel[i][1])), 0, image.W - 1);
    const double r_point = image.point_range[i];

    cands.clear();
    for (int dh = -half; dh <= half; ++dh) {
      const int nh = h + dh;
      if (nh < 0 || nh >= image.H) continue;
      for (int dw = -half; dw <= half; ++dw) {
        const int nw = w + dw;
        if (nw < 0 || nw >= image.W) continue;
        if (!image.occupancy[static_cast<int64_t>(nh) * image.W + nw]) continue;
        const double d = std::fabs(r_point - image.feature(0, nh, nw));
        cands.push_back({d, nh, nw, pixel_labels[static_cast<int64_t>(nh) * image.W + nw]});
      }
    }
    if (cands.empty()) {
      out[i] = pixel_labels[static_cast<int64_t>(h) * image.W + w];
      continue;
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.h != b.h) return a.h < b.h;
      return a.w < b.w;
    });
    if (static_cast<int>(cands.size()) > k) cands.resize(k);

    std::unordered_map<int, double> votes;
    for (const Cand& c : cands)
      votes[c.label] += std::exp(-c.d * c.d / (2.0 * range_sigma * range_sigma));
    int best_label = 0;
    double best_weight = -1.0;
    for (auto& [label, weight] : votes) {
      if (weight > best_weight || (weight == best_weight && label < best_label)) {
        best_label = label;
        best_weight = weight;
      }
    }
    out[i] = best_label;
  }
  return out;
}

}  // namespace rangevit
