#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <vector>

#include "doctest.h"
#include "rangevit/pointops.hpp"

using namespace rangevit;

namespace {

std::vector<float> random_cloud(Rng& rng, int64_t n, double extent) {
  std::vector<float> xyz(n * 3);
  for (auto& v : xyz) v = static_cast<float>(rng.uniform(-extent, extent));
  return xyz;
}

// quadratic-scan reference for radius_neighbors
NeighborIndex brute_neighbors(std::span<const float> query, std::span<const float> support,
                              double radius, int max_neighbors) {
  const int64_t nq = static_cast<int64_t>(query.size()) / 3;
  const int64_t ns = static_cast<int64_t>(support.size()) / 3;
  NeighborIndex out;
  out.lists.resize(nq);
  for (int64_t q = 0; q < nq; ++q) {
    std::vector<std::pair<double, int32_t>> found;
    for (int64_t s = 0; s < ns; ++s) {
      double d2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double d = static_cast<double>(support[s * 3 + a]) - query[q * 3 + a];
        d2 += d * d;
      }
      if (d2 <= radius * radius) found.emplace_back(d2, static_cast<int32_t>(s));
    }
    std::sort(found.begin(), found.end());
    if (static_cast<int>(found.size()) > max_neighbors) found.resize(max_neighbors);
    for (auto& [d2, s] : found) out.lists[q].push_back(s);
  }
  return out;
}

// scalar-loop reference for kpconv
std::vector<double> brute_kpconv(const std::vector<double>& features, int64_t cin,
                                 std::span<const float> support, std::span<const float> query,
                                 const NeighborIndex& nbr, const KernelDisposition& disp,
                                 const std::vector<double>& weights, int64_t cout) {
  const int64_t nq = static_cast<int64_t>(nbr.lists.size());
  const int64_t nk = static_cast<int64_t>(disp.points.size());
  std::vector<double> out(nq * cout, 0.0);
  for (int64_t q = 0; q < nq; ++q)
    for (int32_t s : nbr.lists[q])
      for (int64_t k = 0; k < nk; ++k) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double off = static_cast<double>(support[s * 3 + a]) - query[q * 3 + a];
          const double d = off - disp.points[k][a];
          d2 += d * d;
        }
        const double h = std::max(0.0, 1.0 - std::sqrt(d2) / disp.sigma);
        if (h == 0.0) continue;
        for (int64_t o = 0; o < cout; ++o)
          for (int64_t c = 0; c < cin; ++c)
            out[q * cout + o] += h * weights[(k * cout + o) * cin + c] * features[s * cin + c];
      }
  return out;
}

}  // namespace

TEST_CASE("kernel disposition: center point plus a ring inside the influence radius") {
  for (double sigma : {1.2, 0.7}) {
    KernelDisposition d = KernelDisposition::make(15, sigma);
    REQUIRE(d.points.size() == 15);
    CHECK(d.sigma == sigma);
    CHECK(d.points[0] == std::array<double, 3>{0.0, 0.0, 0.0});
    for (size_t k = 1; k < d.points.size(); ++k) {
      const auto& p = d.points[k];
      const double norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
      CHECK(norm == doctest::Approx(0.6 * sigma).epsilon(1e-12));
      CHECK(norm < sigma);
      for (size_t j = 1; j < k; ++j) {
        const auto& o = d.points[j];
        const double gap = std::sqrt((p[0] - o[0]) * (p[0] - o[0]) +
                                     (p[1] - o[1]) * (p[1] - o[1]) +
                                     (p[2] - o[2]) * (p[2] - o[2]));
        CHECK(gap > 1e-6);  // ring points are distinct
      }
    }
  }
  CHECK_THROWS_AS(KernelDisposition::make(0, 1.0), Error);
  CHECK_THROWS_AS(KernelDisposition::make(5, 0.0), Error);
}

TEST_CASE("radius search matches a quadratic scan on random instances") {
  Rng rng(41);
  for (int inst = 0; inst < 20; ++inst) {
    const int64_t ns = 50 + rng.uniform_int(451);  // up to 500 support points
    const int64_t nq = 20 + rng.uniform_int(80);
    const double extent = 6.0;
    const double radius = rng.uniform(0.8, 2.5);
    const int max_n = 1 + static_cast<int>(rng.uniform_int(40));
    auto support = random_cloud(rng, ns, extent);
    auto query = random_cloud(rng, nq, extent);

    NeighborIndex fast = radius_neighbors(query, support, radius, max_n);
    NeighborIndex slow = brute_neighbors(query, support, radius, max_n);
    REQUIRE(fast.lists == slow.lists);
  }
}

TEST_CASE("radius search keeps the nearest neighbors in distance order") {
  std::vector<float> support{1, 0, 0, 2, 0, 0, 3, 0, 0, 4, 0, 0, 5, 0, 0};
  std::vector<float> query{0, 0, 0};
  NeighborIndex nbr = radius_neighbors(query, support, 10.0, 3);
  REQUIRE(nbr.lists.size() == 1);
  CHECK(nbr.lists[0] == std::vector<int32_t>{0, 1, 2});
  // inclusive radius boundary
  NeighborIndex edge = radius_neighbors(query, support, 2.0, 10);
  CHECK(edge.lists[0] == std::vector<int32_t>{0, 1});
}

TEST_CASE("kpconv of a coincident point reduces to the closed-form kernel sum") {
  // support == query: the center kernel contributes 1, each ring point 0.4
  const int64_t nk = 15, cout = 3, cin = 2;
  KernelDisposition disp = KernelDisposition::make(static_cast<int>(nk), 1.2);
  Rng rng(7);
  std::vector<double> wv(nk * cout * cin), fv(cin);
  for (auto& v : wv) v = rng.normal();
  for (auto& v : fv) v = rng.normal();

  std::vector<float> xyz{0.3f, -0.8f, 1.1f};
  NeighborIndex nbr = radius_neighbors(xyz, xyz, disp.sigma, 4);
  REQUIRE(nbr.lists == std::vector<std::vector<int32_t>>{{0}});

  Tensor<double> f = Tensor<double>::from_data({1, cin}, fv);
  Tensor<double> w = Tensor<double>::from_data({nk, cout, cin}, wv);
  Tensor<double> out = kpconv(f, xyz, xyz, nbr, disp, w);
  REQUIRE(out.shape() == Shape{1, cout});
  for (int64_t o = 0; o < cout; ++o) {
    double expected = 0.0;
    for (int64_t c = 0; c < cin; ++c) {
      double wsum = wv[(0 * cout + o) * cin + c];
      for (int64_t k = 1; k < nk; ++k) wsum += 0.4 * wv[(k * cout + o) * cin + c];
      expected += wsum * fv[c];
    }
    CHECK(out.value()[o] == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("kpconv matches a scalar-loop reference on random instances") {
  Rng rng(99);
  for (int inst = 0; inst < 20; ++inst) {
    const int64_t ns = 30 + rng.uniform_int(471);
    const int64_t nq = 10 + rng.uniform_int(60);
    const int64_t cin = 1 + rng.uniform_int(6);
    const int64_t cout = 1 + rng.uniform_int(6);
    const int64_t nk = 1 + rng.uniform_int(15);
    const double sigma = rng.uniform(0.6, 1.6);
    KernelDisposition disp = KernelDisposition::make(static_cast<int>(nk), sigma);
    auto support = random_cloud(rng, ns, 3.0);
    auto query = random_cloud(rng, nq, 3.0);
    NeighborIndex nbr = radius_neighbors(query, support, sigma, 16);

    std::vector<double> fv(ns * cin), wv(nk * cout * cin);
    for (auto& v : fv) v = rng.normal();
    for (auto& v : wv) v = rng.normal();
    Tensor<double> out = kpconv(Tensor<double>::from_data({ns, cin}, fv), support, query, nbr,
                                disp, Tensor<double>::from_data({nk, cout, cin}, wv));
    auto ref = brute_kpconv(fv, cin, support, query, nbr, disp, wv, cout);
    REQUIRE(out.numel() == static_cast<int64_t>(ref.size()));
    for (int64_t i = 0; i < out.numel(); ++i)
      REQUIRE(out.value()[i] == doctest::Approx(ref[i]).epsilon(1e-5));
  }
}

TEST_CASE("kpconv with no neighbors in range yields zeros") {
  KernelDisposition disp = KernelDisposition::make(15, 1.0);
  std::vector<float> support{100.0f, 0.0f, 0.0f};
  std::vector<float> query{0.0f, 0.0f, 0.0f};
  NeighborIndex nbr = radius_neighbors(query, support, disp.sigma, 8);
  CHECK(nbr.lists[0].empty());
  Tensor<double> out = kpconv(Tensor<double>::from_data({1, 2}, {1.0, 2.0}), support, query,
                              nbr, disp, Tensor<double>::full({15, 3, 2}, 1.0));
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.value()[i] == 0.0);
}

namespace {

// independent reimplementation of the range-aware label vote
std::vector<int> brute_knn(const std::vector<int>& pixel_labels, const RangeImage& img, int k,
                           int window, double sigma) {
  const int half = window / 2;
  std::vector<int> out(img.point_pixel.size(), 0);
  for (size_t i = 0; i < img.point_pixel.size(); ++i) {
    if (!img.point_valid[i]) continue;
    const int h = std::clamp(static_cast<int>(std::floor(img.point_pixel[i][0])), 0, img.H - 1);
    const int w = std::clamp(static_cast<int>(std::floor(img.point_pixel[i][1])), 0, img.W - 1);
    struct C {
      double d;
      int h, w, label;
    };
    std::vector<C> cs;
    for (int dh = -half; dh <= half; ++dh)
      for (int dw = -half; dw <= half; ++dw) {
        const int nh = h + dh, nw = w + dw;
        if (nh < 0 || nh >= img.H || nw < 0 || nw >= img.W) continue;
        if (!img.occupancy[static_cast<int64_t>(nh) * img.W + nw]) continue;
        cs.push_back({std::fabs(static_cast<double>(img.point_range[i]) -
                                img.feature(0, nh, nw)),
                      nh, nw, pixel_labels[static_cast<int64_t>(nh) * img.W + nw]});
      }
    if (cs.empty()) {
      out[i] = pixel_labels[static_cast<int64_t>(h) * img.W + w];
      continue;
    }
    std::sort(cs.begin(), cs.end(), [](const C& a, const C& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.h != b.h) return a.h < b.h;
      return a.w < b.w;
    });
    if (static_cast<int>(cs.size()) > k) cs.resize(k);
    std::unordered_map<int, double> votes;
    for (auto& c : cs) votes[c.label] += std::exp(-c.d * c.d / (2.0 * sigma * sigma));
    int best = 0;
    double bw = -1.0;
    for (auto& [label, weight] : votes)
      if (weight > bw || (weight == bw && label < best)) {
        best = label;
        bw = weight;
      }
    out[i] = best;
  }
  return out;
}

RangeImage random_image(Rng& rng, int H, int W, int n_points) {
  RangeImage img;
  img.H = H;
  img.W = W;
  const int64_t hw = static_cast<int64_t>(H) * W;
  img.features.assign(5 * hw, 0.0f);
  img.occupancy.assign(hw, 0);
  img.pixel_owner.assign(hw, -1);
  for (int64_t p = 0; p < hw; ++p) {
    if (rng.uniform() < 0.4) continue;
    img.occupancy[p] = 1;
    img.features[p] = static_cast<float>(rng.uniform(1.0, 20.0));
  }
  for (int i = 0; i < n_points; ++i) {
    img.point_pixel.push_back({rng.uniform(0.0, H), rng.uniform(0.0, W)});
    img.point_valid.push_back(rng.uniform() < 0.9);
    img.point_range.push_back(static_cast<float>(rng.uniform(1.0, 20.0)));
  }
  return img;
}

}  // namespace

TEST_CASE("knn label cleanup matches an independent vote on random instances") {
  Rng rng(1234);
  for (int inst = 0; inst < 20; ++inst) {
    const int H = 4 + static_cast<int>(rng.uniform_int(8));
    const int W = 8 + static_cast<int>(rng.uniform_int(24));
    RangeImage img = random_image(rng, H, W, 60);
    std::vector<int> pixel_labels(static_cast<size_t>(H) * W);
    for (auto& l : pixel_labels) l = static_cast<int>(rng.uniform_int(5));
    const int k = 1 + static_cast<int>(rng.uniform_int(7));
    const int window = 2 * static_cast<int>(rng.uniform_int(3)) + 3;
    REQUIRE(knn_postprocess(pixel_labels, img, k, window, 1.0) ==
            brute_knn(pixel_labels, img, k, window, 1.0));
  }
}

TEST_CASE("knn label cleanup falls back sensibly at the edges") {
  Rng rng(5);
  RangeImage img = random_image(rng, 4, 8, 0);
  std::fill(img.occupancy.begin(), img.occupancy.end(), 0);
  img.point_pixel = {{1.5, 3.5}, {2.5, 6.5}};
  img.point_valid = {1, 0};
  img.point_range = {5.0f, 5.0f};
  std::vector<int> labels(4 * 8, 0);
  labels[1 * 8 + 3] = 4;

  auto out = knn_postprocess(labels, img, 5, 3, 1.0);
  CHECK(out[0] == 4);  // no occupied pixel in the window: own pixel label
  CHECK(out[1] == 0);  // invalid points stay unlabeled

  CHECK_THROWS_AS(knn_postprocess(labels, img, 0, 3, 1.0), Error);
  CHECK_THROWS_AS(knn_postprocess(labels, img, 5, 4, 1.0), Error);
  CHECK_THROWS_AS(knn_postprocess(labels, img, 5, 3, 0.0), Error);
}
