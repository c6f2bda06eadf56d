#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rangevit/model.hpp"
#include "rangevit/projection.hpp"

namespace rangevit {

// All binary formats are little-endian.

// Point clouds: N quadruples of float32 (x, y, z, intensity).
PointCloud read_point_cloud(const std::string& path);
void write_point_cloud(const std::string& path, const PointCloud& cloud);

// Labels: N uint32 values, semantic class in the low 16 bits. Reading remaps
// raw classes through `class_map`; unmapped ids are format errors.
std::vector<int> read_labels(const std::string& path, int64_t n,
                             const std::map<uint32_t, int>& class_map);
void write_labels(const std::string& path, const std::vector<int>& labels);

// identity class map {0..k} -> {0..k} (0 stays "ignore")
std::map<uint32_t, int> identity_class_map(int num_classes);

// Range image file: magic "RVRI1", H and W as uint32, then the 5*H*W float32
// feature planes (range, x, y, z, intensity). Occupancy is reconstructed from
// range > 0 on read; per-point bookkeeping is not stored.
void write_range_image(const std::string& path, const RangeImage& image);
RangeImage read_range_image(const std::string& path);

// 8-bit PGM preview of the range channel (bright = near, black = empty)
void write_pgm_preview(const std::string& path, const RangeImage& image);

// Weight archive: magic "RVWT1\n", uint32 entry count, per entry a header of
// uint32 name length, name bytes, uint32 rank, uint32 dims, uint32 payload
// offset (relative to the payload section), uint32 CRC-32 of the payload;
// then all float32 payloads back to back.
struct WeightArchive {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Entry> entries;

  const Entry* find(const std::string& name) const;
};

template <typename T>
WeightArchive snapshot(const ParamStore<T>& params);  // parameters and buffers, store order

void write_weight_archive(const std::string& path, const WeightArchive& archive);
WeightArchive read_weight_archive(const std::string& path);

// Exact-match restore (resume / same-config init): every store entry must be
// present with an identical shape.
template <typename T>
void load_weights(ParamStore<T>& params, const WeightArchive& archive);

// Two-column text file mapping archive names to model parameter names;
// '#' starts a comment.
std::vector<std::pair<std::string, std::string>> read_name_map(const std::string& path);

struct ImportReport {
  std::vector<std::string> matched;    // copied verbatim
  std::vector<std::string> resampled;  // positional embeddings fitted to the grid
  std::vector<std::string> skipped;    // mapping targets missing from the archive
};

// Pretrained-encoder import: mapped encoder tensors are copied when shapes
// match; positional embeddings are bilinearly resampled from the source's
// square token grid to this model's grid (class-token row copied verbatim).
// Non-encoder targets are rejected. Ends by applying the freeze policy.
template <typename T>
ImportReport load_pretrained(RangeViT<T>& model, const WeightArchive& archive,
                             const std::vector<std::pair<std::string, std::string>>& name_map,
                             FinetunePolicy policy);

// Resample a (rows x dim) positional embedding table whose grid rows form a
// square src_grid x src_grid layout (plus an optional leading class row) to a
// grid_h x grid_w layout (plus class row when the target expects one).
std::vector<float> resample_pos_embed(const std::vector<float>& src, int64_t src_rows, int64_t dim,
                                      bool src_cls, bool dst_cls, int grid_h, int grid_w);

extern template WeightArchive snapshot<float>(const ParamStore<float>&);
extern template WeightArchive snapshot<double>(const ParamStore<double>&);
extern template void load_weights<float>(ParamStore<float>&, const WeightArchive&);
extern template void load_weights<double>(ParamStore<double>&, const WeightArchive&);
extern template ImportReport load_pretrained<float>(
    RangeViT<float>&, const WeightArchive&,
    const std::vector<std::pair<std::string, std::string>>&, FinetunePolicy);
extern template ImportReport load_pretrained<double>(
    RangeViT<double>&, const WeightArchive&,
    const std::vector<std::pair<std::string, std::string>>&, FinetunePolicy);

}  // namespace rangevit
