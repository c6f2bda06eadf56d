#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "rangevit/projection.hpp"
#include "rangevit/tensor.hpp"

namespace rangevit {

// Rigid kernel-point layout for KPConv: point 0 at the origin, the remaining
// points on a Fibonacci sphere of radius 0.6 * sigma. Every kernel point lies
// within `sigma` (the influence radius, also the neighborhood radius) of the
// origin.
struct KernelDisposition {
  std::vector<std::array<double, 3>> points;
  double sigma = 1.2;

  static KernelDisposition make(int count = 15, double sigma = 1.2);
};

// Per-query neighbor lists, each sorted by (distance, index) ascending and
// truncated to the `max_neighbors` nearest.
struct NeighborIndex {
  std::vector<std::vector<int32_t>> lists;
};

// All support points within `radius` (inclusive) of each query, via a uniform
// hash grid with cell size = radius. xyz buffers are packed x,y,z triples.
NeighborIndex radius_neighbors(std::span<const float> query_xyz,
                               std::span<const float> support_xyz, double radius,
                               int max_neighbors);

// Kernel point convolution:
//   out(q) = sum_n sum_k max(0, 1 - |(x_n - x_q) - p_k| / sigma) * W_k * f_n
// features: N x Cin, weights: K x Cout x Cin. Gradients flow into features
// and weights; coordinates are fixed data.
template <typename T>
Tensor<T> kpconv(const Tensor<T>& features, std::span<const float> support_xyz,
                 std::span<const float> query_xyz, const NeighborIndex& neighbors,
                 const KernelDisposition& disp, const Tensor<T>& weights);

extern template Tensor<float> kpconv(const Tensor<float>&, std::span<const float>,
                                     std::span<const float>, const NeighborIndex&,
                                     const KernelDisposition&, const Tensor<float>&);
extern template Tensor<double> kpconv(const Tensor<double>&, std::span<const float>,
                                      std::span<const float>, const NeighborIndex&,
                                      const KernelDisposition&, const Tensor<double>&);

// Range-aware K-NN label cleanup for model variants without the 3D refiner.
// For every point: gather the occupied pixels of the window around its
// projection, rank them by |r_point - r_pixel|, keep the k best, and take the
// majority label weighted by a Gaussian (std `range_sigma`) of that range
// difference. Falls back to the point's own pixel label when the window holds
// no occupied pixel; invalid points get label 0.
std::vector<int> knn_postprocess(const std::vector<int>& pixel_labels, const RangeImage& image,
                                 int k, int window, double range_sigma = 1.0);

}  // namespace rangevit
