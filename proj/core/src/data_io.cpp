#include "rangevit/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "rangevit/common.hpp"

namespace rangevit {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  RV_CHECK(f.good(), "cannot open " + path);
  f.seekg(0, std::ios::end);
  const auto size = static_cast<size_t>(f.tellg());
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(size);
  if (size > 0) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  RV_CHECK(f.good(), "read failed: " + path);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  RV_CHECK(f.good(), "cannot open " + path + " for writing");
  return f;
}

void put_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

struct Cursor {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n, const std::string& what) {
    if (pos + n > buf.size())
      throw FormatError("truncated file while reading " + what, static_cast<int64_t>(pos));
  }
  uint32_t u32(const std::string& what) {
    need(4, what);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string str(size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

uint32_t payload_crc(const void* data, size_t bytes) {
  return static_cast<uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), static_cast<const Bytef*>(data), static_cast<uInt>(bytes)));
}

}  // namespace

PointCloud read_point_cloud(const std::string& path) {
  const auto buf = read_file(path);
  if (buf.size() % 16 != 0)
    throw FormatError("point cloud " + path + " has length " + std::to_string(buf.size()) +
                          ", not a multiple of 16",
                      static_cast<int64_t>(buf.size()));
  PointCloud cloud;
  const int64_t n = static_cast<int64_t>(buf.size()) / 16;
  cloud.xyzi.resize(static_cast<size_t>(n) * 4);
  if (n > 0) std::memcpy(cloud.xyzi.data(), buf.data(), buf.size());
  for (int64_t i = 0; i < n * 4; ++i)
    if (!std::isfinite(cloud.xyzi[i]))
      throw FormatError("non-finite value in point " + std::to_string(i / 4), i * 4);
  return cloud;
}

void write_point_cloud(const std::string& path, const PointCloud& cloud) {
  auto f = open_out(path);
  f.write(reinterpret_cast<const char*>(cloud.xyzi.data()),
          static_cast<std::streamsize>(cloud.xyzi.size() * 4));
  RV_CHECK(f.good(), "write failed: " + path);
}

std::vector<int> read_labels(const std::string& path, int64_t n,
                             const std::map<uint32_t, int>& class_map) {
  const auto buf = read_file(path);
  if (buf.size() != static_cast<size_t>(n) * 4)
    throw FormatError("label file " + path + " has length " + std::to_string(buf.size()) +
                          ", expected " + std::to_string(n * 4),
                      static_cast<int64_t>(buf.size()));
  std::vector<int> labels(n);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t raw;
    std::memcpy(&raw, buf.data() + i * 4, 4);
    const uint32_t cls = raw & 0xFFFFu;
    auto it = class_map.find(cls);
    if (it == class_map.end())
      throw FormatError("unmapped class id " + std::to_string(cls) + " at point " +
                            std::to_string(i),
                        i * 4);
    labels[i] = it->second;
  }
  return labels;
}

void write_labels(const std::string& path, const std::vector<int>& labels) {
  auto f = open_out(path);
  for (int v : labels) {
    RV_CHECK(v >= 0 && v <= 0xFFFF, "label " + std::to_string(v) + " does not fit 16 bits");
    put_u32(f, static_cast<uint32_t>(v));
  }
  RV_CHECK(f.good(), "write failed: " + path);
}

std::map<uint32_t, int> identity_class_map(int num_classes) {
  std::map<uint32_t, int> m;
  for (int i = 0; i <= num_classes; ++i) m[static_cast<uint32_t>(i)] = i;
  return m;
}

static constexpr char kImageMagic[5] = {'R', 'V', 'R', 'I', '1'};

void write_range_image(const std::string& path, const RangeImage& image) {
  auto f = open_out(path);
  f.write(kImageMagic, 5);
  put_u32(f, static_cast<uint32_t>(image.H));
  put_u32(f, static_cast<uint32_t>(image.W));
  f.write(reinterpret_cast<const char*>(image.features.data()),
          static_cast<std::streamsize>(image.features.size() * 4));
  RV_CHECK(f.good(), "write failed: " + path);
}

RangeImage read_range_image(const std::string& path) {
  const auto buf = read_file(path);
  Cursor c{buf};
  if (c.str(5, "magic") != std::string(kImageMagic, 5))
    throw FormatError("bad range image magic in " + path, 0);
  RangeImage image;
  image.H = static_cast<int>(c.u32("height"));
  image.W = static_cast<int>(c.u32("width"));
  if (image.H <= 0 || image.W <= 0)
    throw FormatError("bad range image dimensions " + std::to_string(image.H) + " x " +
                          std::to_string(image.W),
                      5);
  const size_t hw = static_cast<size_t>(image.H) * image.W;
  const size_t want = c.pos + hw * 5 * 4;
  if (buf.size() != want)
    throw FormatError("range image payload length " + std::to_string(buf.size() - c.pos) +
                          ", expected " + std::to_string(hw * 5 * 4),
                      static_cast<int64_t>(buf.size()));
  image.features.resize(hw * 5);
  std::memcpy(image.features.data(), buf.data() + c.pos, hw * 5 * 4);
  image.occupancy.resize(hw);
  image.pixel_owner.assign(hw, -1);
  for (size_t i = 0; i < hw; ++i) image.occupancy[i] = image.features[i] > 0.0f ? 1 : 0;
  return image;
}

void write_pgm_preview(const std::string& path, const RangeImage& image) {
  const size_t hw = static_cast<size_t>(image.H) * image.W;
  float max_r = 0.0f;
  for (size_t i = 0; i < hw; ++i) max_r = std::max(max_r, image.features[i]);
  auto f = open_out(path);
  f << "P5\n" << image.W << " " << image.H << "\n255\n";
  for (size_t i = 0; i < hw; ++i) {
    uint8_t v = 0;
    if (image.occupancy[i] && max_r > 0.0f) {
      const float t = 1.0f - image.features[i] / max_r;  // bright = near
      v = static_cast<uint8_t>(std::clamp(1.0f + 254.0f * t, 1.0f, 255.0f));
    }
    f.write(reinterpret_cast<const char*>(&v), 1);
  }
  RV_CHECK(f.good(), "write failed: " + path);
}

const WeightArchive::Entry* WeightArchive::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename T>
WeightArchive snapshot(const ParamStore<T>& params) {
  WeightArchive archive;
  for (const auto& e : params.entries()) {
    WeightArchive::Entry out;
    out.name = e.spec.name;
    out.shape = e.tensor.shape();
    const auto& v = e.tensor.value();
    out.data.assign(v.begin(), v.end());
    archive.entries.push_back(std::move(out));
  }
  return archive;
}

static constexpr char kArchiveMagic[6] = {'R', 'V', 'W', 'T', '1', '\n'};

void write_weight_archive(const std::string& path, const WeightArchive& archive) {
  std::set<std::string> seen;
  for (const auto& e : archive.entries) {
    RV_CHECK(seen.insert(e.name).second, "duplicate archive entry: " + e.name);
    RV_CHECK(shape_numel(e.shape) == static_cast<int64_t>(e.data.size()),
             "entry " + e.name + " declares " + shape_str(e.shape) + " but holds " +
                 std::to_string(e.data.size()) + " values");
  }
  auto f = open_out(path);
  f.write(kArchiveMagic, 6);
  put_u32(f, static_cast<uint32_t>(archive.entries.size()));
  uint32_t offset = 0;
  for (const auto& e : archive.entries) {
    put_u32(f, static_cast<uint32_t>(e.name.size()));
    f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(f, static_cast<uint32_t>(e.shape.size()));
    for (int64_t d : e.shape) put_u32(f, static_cast<uint32_t>(d));
    put_u32(f, offset);
    put_u32(f, payload_crc(e.data.data(), e.data.size() * 4));
    offset += static_cast<uint32_t>(e.data.size() * 4);
  }
  for (const auto& e : archive.entries)
    f.write(reinterpret_cast<const char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * 4));
  RV_CHECK(f.good(), "write failed: " + path);
}

WeightArchive read_weight_archive(const std::string& path) {
  const auto buf = read_file(path);
  Cursor c{buf};
  if (c.str(6, "magic") != std::string(kArchiveMagic, 6))
    throw FormatError("bad weight archive magic in " + path, 0);
  const uint32_t count = c.u32("entry count");

  struct Header {
    std::string name;
    Shape shape;
    uint32_t offset;
    uint32_t crc;
    size_t header_pos;
  };
  std::vector<Header> headers;
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    Header h;
    h.header_pos = c.pos;
    const uint32_t name_len = c.u32("name length");
    if (name_len == 0 || name_len > 4096)
      throw FormatError("implausible name length " + std::to_string(name_len),
                        static_cast<int64_t>(h.header_pos));
    h.name = c.str(name_len, "name");
    if (!seen.insert(h.name).second)
      throw FormatError("duplicate archive entry '" + h.name + "'",
                        static_cast<int64_t>(h.header_pos));
    const uint32_t rank = c.u32("rank");
    if (rank > 64)
      throw FormatError("implausible rank " + std::to_string(rank),
                        static_cast<int64_t>(c.pos - 4));
    for (uint32_t r = 0; r < rank; ++r) h.shape.push_back(c.u32("dimension"));
    h.offset = c.u32("offset");
    h.crc = c.u32("checksum");
    headers.push_back(std::move(h));
  }

  const size_t payload_start = c.pos;
  const size_t payload_len = buf.size() - payload_start;
  WeightArchive archive;
  uint64_t expected = 0;
  for (const auto& h : headers) {
    const uint64_t numel = static_cast<uint64_t>(shape_numel(h.shape));
    const uint64_t bytes = numel * 4;
    if (h.offset != expected)
      throw FormatError("entry '" + h.name + "' payload offset " + std::to_string(h.offset) +
                            " breaks the packed layout (expected " + std::to_string(expected) + ")",
                        static_cast<int64_t>(h.header_pos));
    if (h.offset + bytes > payload_len)
      throw FormatError("entry '" + h.name + "' payload overruns the file",
                        static_cast<int64_t>(payload_start + h.offset));
    WeightArchive::Entry e;
    e.name = h.name;
    e.shape = h.shape;
    e.data.resize(numel);
    if (numel > 0) std::memcpy(e.data.data(), buf.data() + payload_start + h.offset, bytes);
    if (payload_crc(e.data.data(), bytes) != h.crc)
      throw FormatError("checksum mismatch for entry '" + h.name + "'",
                        static_cast<int64_t>(payload_start + h.offset));
    archive.entries.push_back(std::move(e));
    expected += bytes;
  }
  if (expected != payload_len)
    throw FormatError("payload has " + std::to_string(payload_len) + " bytes but entries declare " +
                          std::to_string(expected),
                      static_cast<int64_t>(payload_start));
  return archive;
}

template <typename T>
void load_weights(ParamStore<T>& params, const WeightArchive& archive) {
  for (auto& e : params.entries()) {
    const auto* src = archive.find(e.spec.name);
    RV_CHECK(src != nullptr, "archive is missing parameter '" + e.spec.name + "'");
    RV_CHECK(src->shape == e.tensor.shape(),
             "shape conflict for '" + e.spec.name + "': archive " + shape_str(src->shape) +
                 " vs model " + shape_str(e.tensor.shape()));
    auto dst = e.tensor.value_mut();
    for (size_t i = 0; i < src->data.size(); ++i) dst[i] = static_cast<T>(src->data[i]);
  }
}

std::vector<std::pair<std::string, std::string>> read_name_map(const std::string& path) {
  std::ifstream f(path);
  RV_CHECK(f.good(), "cannot open " + path);
  std::vector<std::pair<std::string, std::string>> map;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string from, to, extra;
    if (!(ss >> from)) continue;  // blank line
    if (!(ss >> to) || (ss >> extra))
      throw FormatError("name map line " + std::to_string(line_no) +
                            " must hold exactly two names",
                        line_no);
    map.emplace_back(std::move(from), std::move(to));
  }
  return map;
}

std::vector<float> resample_pos_embed(const std::vector<float>& src, int64_t src_rows, int64_t dim,
                                      bool src_cls, bool dst_cls, int grid_h, int grid_w) {
  RV_CHECK(static_cast<int64_t>(src.size()) == src_rows * dim, "pos-embed size mismatch");
  const int64_t grid_rows = src_rows - (src_cls ? 1 : 0);
  const int g = static_cast<int>(std::llround(std::sqrt(static_cast<double>(grid_rows))));
  RV_CHECK(static_cast<int64_t>(g) * g == grid_rows,
           "source positional embedding grid of " + std::to_string(grid_rows) +
               " rows is not square");
  const int64_t dst_rows = static_cast<int64_t>(grid_h) * grid_w + (dst_cls ? 1 : 0);
  std::vector<float> out(dst_rows * dim, 0.0f);
  if (dst_cls && src_cls)
    std::copy(src.begin(), src.begin() + dim, out.begin());

  const float* grid_src = src.data() + (src_cls ? dim : 0);
  float* grid_dst = out.data() + (dst_cls ? dim : 0);
  for (int i = 0; i < grid_h; ++i)
    for (int j = 0; j < grid_w; ++j) {
      // pixel-center mapping, clamped to source centers
      const double sy =
          std::clamp((i + 0.5) * g / grid_h - 0.5, 0.0, static_cast<double>(g - 1));
      const double sx =
          std::clamp((j + 0.5) * g / grid_w - 0.5, 0.0, static_cast<double>(g - 1));
      const int y0 = static_cast<int>(sy);
      const int x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, g - 1);
      const int x1 = std::min(x0 + 1, g - 1);
      const double fy = sy - y0;
      const double fx = sx - x0;
      float* dst = grid_dst + (static_cast<int64_t>(i) * grid_w + j) * dim;
      for (int64_t d = 0; d < dim; ++d) {
        const double v00 = grid_src[(static_cast<int64_t>(y0) * g + x0) * dim + d];
        const double v01 = grid_src[(static_cast<int64_t>(y0) * g + x1) * dim + d];
        const double v10 = grid_src[(static_cast<int64_t>(y1) * g + x0) * dim + d];
        const double v11 = grid_src[(static_cast<int64_t>(y1) * g + x1) * dim + d];
        dst[d] = static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                    fy * ((1 - fx) * v10 + fx * v11));
      }
    }
  return out;
}

template <typename T>
ImportReport load_pretrained(RangeViT<T>& model, const WeightArchive& archive,
                             const std::vector<std::pair<std::string, std::string>>& name_map,
                             FinetunePolicy policy) {
  ImportReport report;
  for (const auto& [external, target] : name_map) {
    RV_CHECK(target.starts_with("encoder."),
             "pretrained import may only target encoder parameters, got '" + target + "'");
    const auto* src = archive.find(external);
    if (src == nullptr || !model.params().has(target)) {
      report.skipped.push_back(external);
      continue;
    }
    Tensor<T>& dst = model.params().at(target);
    if (src->shape == dst.shape()) {
      auto v = dst.value_mut();
      for (size_t i = 0; i < src->data.size(); ++i) v[i] = static_cast<T>(src->data[i]);
      report.matched.push_back(target);
      continue;
    }
    if (target == "encoder.pos_embed") {
      RV_CHECK(src->shape.size() == 2 && src->shape[1] == model.config().dim,
               "pos-embed '" + external + "' has shape " + shape_str(src->shape) +
                   ", expected rows x " + std::to_string(model.config().dim));
      const int64_t rows = src->shape[0];
      const int64_t grid_if_cls = rows - 1;
      const auto is_square = [](int64_t n) {
        if (n < 1) return false;
        const auto r = std::llround(std::sqrt(static_cast<double>(n)));
        return r * r == n;
      };
      const bool src_cls = is_square(grid_if_cls);
      RV_CHECK(src_cls || is_square(rows),
               "pos-embed '" + external + "' rows " + std::to_string(rows) +
                   " do not form a square grid");
      const bool dst_cls = model.config().class_token;
      const auto resampled =
          resample_pos_embed(src->data, rows, model.config().dim, src_cls, dst_cls,
                             model.config().grid_h(), model.config().grid_w());
      auto v = dst.value_mut();
      RV_CHECK(v.size() == resampled.size(), "pos-embed target size mismatch");
      for (size_t i = 0; i < resampled.size(); ++i) v[i] = static_cast<T>(resampled[i]);
      report.resampled.push_back(target);
      continue;
    }
    throw Error("shape conflict importing '" + external + "' into '" + target + "': archive " +
                shape_str(src->shape) + " vs model " + shape_str(dst.shape()));
  }
  apply_freeze_mask(model.params(), policy);
  return report;
}

template WeightArchive snapshot<float>(const ParamStore<float>&);
template WeightArchive snapshot<double>(const ParamStore<double>&);
template void load_weights<float>(ParamStore<float>&, const WeightArchive&);
template void load_weights<double>(ParamStore<double>&, const WeightArchive&);
template ImportReport load_pretrained<float>(RangeViT<float>&, const WeightArchive&,
                                             const std::vector<std::pair<std::string, std::string>>&,
                                             FinetunePolicy);
template ImportReport load_pretrained<double>(
    RangeViT<double>&, const WeightArchive&,
    const std::vector<std::pair<std::string, std::string>>&, FinetunePolicy);

}  // namespace rangevit
