// Acceptance suite: one criterion per function, one PASS/FAIL line each.
// Optionally run a single criterion: test_acceptance <n>.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rangevit/data_io.hpp"
#include "rangevit/gradcheck.hpp"
#include "rangevit/model.hpp"
#include "rangevit/objective.hpp"
#include "rangevit/pointops.hpp"
#include "rangevit/projection.hpp"
#include "rangevit/scene.hpp"
#include "rangevit/trainer.hpp"

using namespace rangevit;

namespace {

std::string fmt(const char* f, ...) {
  va_list ap;
  va_start(ap, f);
  char buf[1024];
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

[[noreturn]] void fail(const std::string& what) { throw Error(what); }

void expect(bool ok, const std::string& what) {
  if (!ok) fail(what);
}

template <typename T>
bool same_bits(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
std::vector<std::pair<std::string, std::vector<T>>> snapshot_values(
    const ParamStore<T>& params, const std::function<bool(const typename ParamStore<T>::Entry&)>& pick) {
  std::vector<std::pair<std::string, std::vector<T>>> out;
  for (const auto& e : params.entries())
    if (pick(e)) out.emplace_back(e.spec.name, std::vector<T>(e.tensor.value().begin(), e.tensor.value().end()));
  return out;
}

// ---------------------------------------------------------------- criterion 1

std::string criterion_tokens() {
  struct Row {
    int ph, pw, want;
  };
  const Row rows[] = {{16, 16, 49}, {8, 8, 193},  {4, 16, 193}, {4, 8, 385},
                      {4, 4, 769},  {2, 16, 385}, {2, 8, 769}};
  for (const Row& r : rows) {
    ModelConfig cfg;  // 32 x 384 crop
    cfg.patch_h = r.ph;
    cfg.patch_w = r.pw;
    cfg.validate();
    expect(cfg.token_count() == r.want, fmt("patch %dx%d gave %d tokens, want %d", r.ph, r.pw,
                                            cfg.token_count(), r.want));
  }
  return "7 patch sizes on the 32x384 crop";
}

// ---------------------------------------------------------------- criterion 2

std::string criterion_params() {
  ModelConfig cfg;  // dim 384, depth 12, heads 6
  const auto groups = count_params_by_group(cfg);
  const int64_t enc = groups.at("encoder");
  expect(std::llabs(enc - 21000000) <= static_cast<int64_t>(0.05 * 21e6),
         fmt("encoder has %lld params, outside 21M +-5%%", static_cast<long long>(enc)));

  const std::pair<int, double> variants[] = {
      {64, 22.7e6}, {128, 23.7e6}, {192, 25.2e6}, {256, 27.1e6}};
  std::string note = fmt("encoder %lld;", static_cast<long long>(enc));
  for (const auto& [dh, target] : variants) {
    ModelConfig c;
    c.width_hidden = dh;
    const int64_t total = count_params(c);
    expect(std::fabs(total - target) <= 0.10 * target,
           fmt("hidden width %d: %lld params, outside %.1fM +-10%%", dh,
               static_cast<long long>(total), target / 1e6));
    note += fmt(" %d->%lld", dh, static_cast<long long>(total));
  }
  return note;
}

// ---------------------------------------------------------------- criterion 3

std::string criterion_gradients() {
  const auto results = run_gradient_suite(12345);
  int64_t coords = 0;
  double worst = 0.0;
  for (const auto& r : results) {
    coords += r.coords_checked;
    worst = std::max(worst, r.max_rel_err);
    expect(r.passed, fmt("gradient check '%s': rel err %.3e exceeds %.0e", r.name.c_str(),
                         r.max_rel_err, r.tolerance));
  }
  return fmt("%zu checks, %lld coords, worst rel err %.2e", results.size(),
             static_cast<long long>(coords), worst);
}

// ---------------------------------------------------------------- criterion 4

std::string criterion_projection() {
  // collision resolution: the nearer point keeps the contested pixel
  for (int nearer_first = 0; nearer_first < 2; ++nearer_first) {
    PointCloud two;
    two.xyzi = nearer_first ? std::vector<float>{4, 0, 0, 0.5f, 8, 0, 0, 0.25f}
                            : std::vector<float>{8, 0, 0, 0.25f, 4, 0, 0, 0.5f};
    const RangeImage ci = spherical_project(two, SensorFov{}, 8, 32);
    const int winner = nearer_first ? 0 : 1;
    expect(ci.collisions == 1, "two collinear points must collide once");
    expect(ci.pixel_owner[2 * 32 + 16] == winner, "collision must keep the smaller range");
    expect(ci.point_valid[0] == 1 && ci.point_valid[1] == 1,
           "losing a pixel must not invalidate the point");
    expect(ci.feature(0, 2, 16) == 4.0f, "contested pixel must hold the nearer range");
  }
  {
    PointCloud origin;
    origin.xyzi = {0, 0, 0, 1.0f};
    const RangeImage oi = spherical_project(origin, SensorFov{}, 8, 32);
    expect(oi.skipped_origin == 1 && oi.point_valid[0] == 0,
           "zero-range point must be skipped, not projected");
  }

  Rng rng(4040);
  int64_t points_total = 0;
  for (int s = 0; s < 100; ++s) {
    SceneSpec spec;
    spec.seed = 1000 + s;
    spec.beams = (s % 2 == 0) ? 32 : 16;
    spec.width = (s % 2 == 0) ? 256 : 128;
    spec.boxes = static_cast<int>(rng.uniform_int(9));
    spec.cylinders = static_cast<int>(rng.uniform_int(7));
    spec.poles = static_cast<int>(rng.uniform_int(7));
    spec.ground_z = -1.0 - rng.uniform() * 2.0;
    const PointCloud cloud = generate_scene(spec);
    const int B = spec.beams, W = spec.width;
    expect(cloud.size() == static_cast<int64_t>(B) * W,
           fmt("scene %d: enclosure should give one hit per ray, got %lld points", s,
               static_cast<long long>(cloud.size())));
    points_total += cloud.size();

    const RangeImage img = spherical_project(cloud, spec.fov, B, W);
    expect(img.collisions == 0 && img.skipped_origin == 0,
           fmt("scene %d: pixel-center rays must re-project collision-free", s));
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < W; ++j) {
        const int64_t pix = static_cast<int64_t>(b) * W + j;
        expect(img.occupancy[pix] == 1, fmt("scene %d: empty pixel (%d,%d)", s, b, j));
        const int32_t owner = img.pixel_owner[pix];
        expect(owner == b * W + (W - 1 - j),
               fmt("scene %d: pixel (%d,%d) owned by %d", s, b, j, owner));
        expect(img.feature(1, b, j) == cloud.x(owner) && img.feature(2, b, j) == cloud.y(owner) &&
                   img.feature(3, b, j) == cloud.z(owner) &&
                   img.feature(4, b, j) == cloud.intensity(owner),
               fmt("scene %d: pixel (%d,%d) features differ from the owning point", s, b, j));
      }
    for (int64_t i = 0; i < cloud.size(); ++i) {
      const int b = static_cast<int>(i) / W;
      const int j = W - 1 - static_cast<int>(i) % W;
      expect(img.point_valid[i] == 1, fmt("scene %d: point %lld invalid", s, (long long)i));
      expect(std::fabs(img.point_pixel[i][0] - (b + 0.5)) < 1e-3 &&
                 std::fabs(img.point_pixel[i][1] - (j + 0.5)) < 1e-3,
             fmt("scene %d: point %lld off its pixel center (%.5f, %.5f)", s, (long long)i,
                 img.point_pixel[i][0], img.point_pixel[i][1]));
    }

    const RangeImage uf = unfold_scan(cloud, B, W);
    expect(uf.dropped_rows == 0, fmt("scene %d: unfold dropped rows", s));
    expect(uf.pixel_owner == img.pixel_owner && uf.occupancy == img.occupancy &&
               uf.features == img.features,
           fmt("scene %d: unfolded image differs from spherical projection", s));
    for (int64_t i = 0; i < cloud.size(); ++i)
      expect(static_cast<int>(std::floor(uf.point_pixel[i][0])) == static_cast<int>(i) / W,
             fmt("scene %d: unfold put point %lld on the wrong beam row", s, (long long)i));
  }
  return fmt("100 scenes, %lld points; full round trip, 0 row errors",
             static_cast<long long>(points_total));
}

// ---------------------------------------------------------------- criterion 5

double brute_cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels,
                           int64_t n, int64_t k) {
  double sum = 0.0;
  int64_t scored = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] <= 0) continue;
    const double* row = logits.data() + i * k;
    double mx = row[0];
    for (int64_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    sum += -(row[labels[i] - 1] - mx - std::log(z));
    ++scored;
  }
  return scored > 0 ? sum / scored : 0.0;
}

double brute_jaccard_loss(const std::vector<int>& labels, const std::vector<int>& preds, int k) {
  double sum = 0.0;
  int present = 0;
  for (int c = 1; c <= k; ++c) {
    bool has = false;
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] <= 0) continue;
      const bool t = labels[i] == c;
      const bool p = preds[i] == c;
      has = has || t;
      inter += (t && p) ? 1 : 0;
      uni += (t || p) ? 1 : 0;
    }
    if (!has) continue;
    sum += 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return present > 0 ? sum / present : 0.0;
}

void check_lovasz_vertex(const std::vector<int>& labels, const std::vector<int>& preds) {
  const int64_t n = static_cast<int64_t>(labels.size());
  std::vector<double> probs(n * 2, 0.0);
  for (int64_t i = 0; i < n; ++i) probs[i * 2 + (preds[i] - 1)] = 1.0;
  const double got =
      lovasz_softmax(Tensor<double>::from_data({n, 2}, std::move(probs)), labels).item();
  const double want = brute_jaccard_loss(labels, preds, 2);
  expect(std::fabs(got - want) < 1e-9,
         fmt("hard-prediction loss %.12f != one minus mean IoU %.12f (n=%lld)", got, want,
             static_cast<long long>(n)));
}

std::string criterion_objective() {
  Rng rng(55);
  for (int inst = 0; inst < 10; ++inst) {
    const int64_t n = 40, k = 2 + inst % 4;
    std::vector<double> logits(n * k);
    for (auto& v : logits) v = rng.normal() * 2.0;
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(k + 1));  // some ignored zeros
    labels[0] = 1;
    const double got =
        focal_loss(Tensor<double>::from_data({n, k}, logits), labels, 0.0).item();
    const double want = brute_cross_entropy(logits, labels, n, k);
    expect(std::fabs(got - want) < 1e-6,
           fmt("focal at gamma 0 gave %.9f, cross entropy %.9f", got, want));
  }

  int64_t checks = 0;
  Rng prng(56);
  for (int n = 1; n <= 10; ++n) {
    for (uint32_t lm = 0; lm < (1u << n); ++lm) {
      std::vector<int> labels(n);
      for (int i = 0; i < n; ++i) labels[i] = ((lm >> i) & 1) + 1;
      if (n <= 6) {
        for (uint32_t pm = 0; pm < (1u << n); ++pm) {
          std::vector<int> preds(n);
          for (int i = 0; i < n; ++i) preds[i] = ((pm >> i) & 1) + 1;
          check_lovasz_vertex(labels, preds);
          ++checks;
          if (n >= 2) {  // same prediction with the first point ignored
            std::vector<int> part = labels;
            part[0] = 0;
            check_lovasz_vertex(part, preds);
            ++checks;
          }
        }
      } else {
        for (int t = 0; t < 20; ++t) {
          std::vector<int> preds(n);
          for (auto& p : preds) p = 1 + static_cast<int>(prng.uniform_int(2));
          check_lovasz_vertex(labels, preds);
          ++checks;
        }
      }
    }
  }
  return fmt("focal==CE on 10 instances; %lld exhaustive two-class labelings",
             static_cast<long long>(checks));
}

// ---------------------------------------------------------------- criterion 6

std::string criterion_pointops() {
  Rng rng(66);

  // neighbor search against a quadratic scan
  for (int t = 0; t < 20; ++t) {
    const int ns = 50 + static_cast<int>(rng.uniform_int(451));
    const int nq = 20 + static_cast<int>(rng.uniform_int(81));
    const double radius = rng.uniform(0.7, 2.5);
    const int maxn = 1 + static_cast<int>(rng.uniform_int(40));
    std::vector<float> support(ns * 3), query(nq * 3);
    for (auto& v : support) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    for (auto& v : query) v = static_cast<float>(rng.uniform(-4.0, 4.0));

    const NeighborIndex got = radius_neighbors(query, support, radius, maxn);
    for (int q = 0; q < nq; ++q) {
      std::vector<std::pair<double, int32_t>> found;
      for (int s = 0; s < ns; ++s) {
        const double dx = static_cast<double>(support[s * 3 + 0]) - query[q * 3 + 0];
        const double dy = static_cast<double>(support[s * 3 + 1]) - query[q * 3 + 1];
        const double dz = static_cast<double>(support[s * 3 + 2]) - query[q * 3 + 2];
        const double d2 = dx * dx + dy * dy + dz * dz;
        if (d2 <= radius * radius) found.emplace_back(d2, s);
      }
      std::sort(found.begin(), found.end());
      if (static_cast<int>(found.size()) > maxn) found.resize(maxn);
      expect(got.lists[q].size() == found.size(),
             fmt("instance %d query %d: %zu neighbors, brute force %zu", t, q,
                 got.lists[q].size(), found.size()));
      for (size_t i = 0; i < found.size(); ++i)
        expect(got.lists[q][i] == found[i].second,
               fmt("instance %d query %d: neighbor %zu is %d, brute force %d", t, q, i,
                   got.lists[q][i], found[i].second));
    }
  }

  // kernel point convolution against scalar loops
  for (int t = 0; t < 20; ++t) {
    const int ns = 50 + static_cast<int>(rng.uniform_int(151));
    const bool self = t % 2 == 0;
    const int nq = self ? ns : 20 + static_cast<int>(rng.uniform_int(61));
    const int cin = 1 + static_cast<int>(rng.uniform_int(5));
    const int cout = 1 + static_cast<int>(rng.uniform_int(5));
    const int nk = 1 + static_cast<int>(rng.uniform_int(15));
    const double sigma = rng.uniform(0.5, 1.5);
    const KernelDisposition disp = KernelDisposition::make(nk, sigma);

    std::vector<float> support(ns * 3);
    for (auto& v : support) v = static_cast<float>(rng.uniform(-3.0, 3.0));
    std::vector<float> query = support;
    if (!self) {
      query.resize(nq * 3);
      for (auto& v : query) v = static_cast<float>(rng.uniform(-3.0, 3.0));
    }
    std::vector<float> feats(static_cast<size_t>(ns) * cin), weights(static_cast<size_t>(nk) * cout * cin);
    for (auto& v : feats) v = static_cast<float>(rng.normal());
    for (auto& v : weights) v = static_cast<float>(rng.normal() * 0.5);

    const NeighborIndex nbrs = radius_neighbors(query, support, sigma, 25);
    const Tensor<float> out =
        kpconv(Tensor<float>::from_data({ns, cin}, feats), support, query, nbrs, disp,
               Tensor<float>::from_data({nk, cout, cin}, weights));
    const auto ov = out.value();
    for (int q = 0; q < nq; ++q)
      for (int o = 0; o < cout; ++o) {
        double want = 0.0;
        for (int32_t s : nbrs.lists[q])
          for (int k = 0; k < nk; ++k) {
            const double dx = static_cast<double>(support[s * 3 + 0]) - query[q * 3 + 0] -
                              disp.points[k][0];
            const double dy = static_cast<double>(support[s * 3 + 1]) - query[q * 3 + 1] -
                              disp.points[k][1];
            const double dz = static_cast<double>(support[s * 3 + 2]) - query[q * 3 + 2] -
                              disp.points[k][2];
            const double h = 1.0 - std::sqrt(dx * dx + dy * dy + dz * dz) / sigma;
            if (h <= 0.0) continue;
            double dot = 0.0;
            for (int c = 0; c < cin; ++c)
              dot += static_cast<double>(weights[(static_cast<size_t>(k) * cout + o) * cin + c]) *
                     feats[static_cast<size_t>(s) * cin + c];
            want += h * dot;
          }
        const double err = std::fabs(ov[static_cast<size_t>(q) * cout + o] - want);
        expect(err <= 1e-5 * std::max(1.0, std::fabs(want)),
               fmt("instance %d out(%d,%d): %.8f vs brute force %.8f", t, q, o,
                   static_cast<double>(ov[static_cast<size_t>(q) * cout + o]), want));
      }
  }

  // range-aware knn voting against a direct reimplementation
  for (int t = 0; t < 20; ++t) {
    const int H = 6 + static_cast<int>(rng.uniform_int(6));
    const int W = 10 + static_cast<int>(rng.uniform_int(14));
    RangeImage img;
    img.H = H;
    img.W = W;
    img.features.assign(5LL * H * W, 0.0f);
    img.occupancy.assign(static_cast<int64_t>(H) * W, 0);
    img.pixel_owner.assign(static_cast<int64_t>(H) * W, -1);
    std::vector<int> pixel_labels(static_cast<size_t>(H) * W);
    for (int64_t pix = 0; pix < static_cast<int64_t>(H) * W; ++pix) {
      pixel_labels[pix] = static_cast<int>(rng.uniform_int(5));
      if (rng.uniform() < 0.75) {
        img.occupancy[pix] = 1;
        // quantized ranges so exact vote ties actually happen
        img.features[pix] = 1.0f + 0.5f * static_cast<float>(rng.uniform_int(17));
      }
    }
    const int n = 40 + static_cast<int>(rng.uniform_int(161));
    img.point_pixel.resize(n);
    img.point_valid.resize(n);
    img.point_range.resize(n);
    for (int i = 0; i < n; ++i) {
      img.point_pixel[i] = {rng.uniform(-1.0, H + 1.0), rng.uniform(-1.0, W + 1.0)};
      img.point_valid[i] = rng.uniform() < 0.9 ? 1 : 0;
      img.point_range[i] = 1.0f + 0.5f * static_cast<float>(rng.uniform_int(17));
    }
    const int k = 1 + 2 * (t % 3);
    const int window = (t % 2 == 0) ? 3 : 5;
    const double sigma = rng.uniform(0.4, 1.5);

    const std::vector<int> got = knn_postprocess(pixel_labels, img, k, window, sigma);
    for (int i = 0; i < n; ++i) {
      int want = 0;
      if (img.point_valid[i]) {
        const int h = std::clamp(static_cast<int>(std::floor(img.point_pixel[i][0])), 0, H - 1);
        const int w = std::clamp(static_cast<int>(std::floor(img.point_pixel[i][1])), 0, W - 1);
        struct C {
          double d;
          int h, w, label;
        };
        std::vector<C> cands;
        for (int nh = h - window / 2; nh <= h + window / 2; ++nh)
          for (int nw = w - window / 2; nw <= w + window / 2; ++nw) {
            if (nh < 0 || nh >= H || nw < 0 || nw >= W) continue;
            if (!img.occupancy[static_cast<int64_t>(nh) * W + nw]) continue;
            cands.push_back({std::fabs(static_cast<double>(img.point_range[i]) -
                                       img.feature(0, nh, nw)),
                             nh, nw, pixel_labels[static_cast<size_t>(nh) * W + nw]});
          }
        if (cands.empty()) {
          want = pixel_labels[static_cast<size_t>(h) * W + w];
        } else {
          std::sort(cands.begin(), cands.end(), [](const C& a, const C& b) {
            return a.d != b.d ? a.d < b.d : (a.h != b.h ? a.h < b.h : a.w < b.w);
          });
          if (static_cast<int>(cands.size()) > k) cands.resize(k);
          std::map<int, double> votes;
          for (const C& c : cands)
            votes[c.label] += std::exp(-c.d * c.d / (2.0 * sigma * sigma));
          double best = -1.0;
          for (const auto& [label, weight] : votes)
            if (weight > best) {
              best = weight;
              want = label;  // std::map iterates labels ascending: first max wins ties
            }
        }
      }
      expect(got[i] == want,
             fmt("instance %d point %d: label %d, brute force %d", t, i, got[i], want));
    }
  }
  return "neighbors exact, conv <=1e-5, knn votes exact on 20 instances each";
}

// ---------------------------------------------------------------- criterion 7

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 32;
  cfg.patch_h = 2;
  cfg.patch_w = 8;
  cfg.dim = 32;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.width_in = 8;
  cfg.width_hidden = 16;
  cfg.num_classes = 4;
  cfg.kernel_points = 7;
  cfg.max_neighbors = 12;
  return cfg;
}

PointCloud small_scene(uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  spec.beams = 8;
  spec.width = 32;
  spec.boxes = 2;
  spec.cylinders = 1;
  spec.poles = 1;
  return generate_scene(spec);
}

std::string criterion_freeze() {
  const ModelConfig cfg = tiny_model();
  const PointCloud scan = small_scene(7701);

  // layer-norm-only policy: five manual optimizer steps
  {
    RangeViT<float> model(cfg, 17);
    model.set_training(true);
    apply_freeze_mask(model.params(), FinetunePolicy::ln);
    TrainConfig tc;
    AdamW<float> opt(model.params(), tc);
    opt.set_lr(1e-2);

    const RangeImage img = spherical_project(scan, SensorFov{}, 8, 32);
    const CropResult crop = crop_window(img, 0, 32);
    const auto xyz = packed_xyz(scan, crop.point_index);
    std::vector<int> labels;
    for (int32_t pid : crop.point_index) labels.push_back(scan.labels[pid]);

    const auto is_frozen_enc = [](const ParamStore<float>::Entry& e) {
      return e.spec.name.starts_with("encoder.") &&
             (e.spec.name.find(".attn.") != std::string::npos ||
              e.spec.name.find(".ffn.") != std::string::npos);
    };
    const auto before = snapshot_values<float>(model.params(), is_frozen_enc);
    expect(!before.empty(), "no attention/ffn tensors found");
    std::vector<float> ln_before(model.params().at("encoder.block1.ln1.gain").value().begin(),
                                 model.params().at("encoder.block1.ln1.gain").value().end());

    for (int step = 0; step < 5; ++step) {
      model.params().zero_grads();
      const Tensor<float> logits = model.forward(crop.image, xyz);
      const Tensor<float> loss = total_loss(logits, labels);
      backward(loss);
      if (step == 0) {
        bool any_live = false;
        for (const auto& e : model.params().entries()) {
          if (is_frozen_enc(e)) {
            const auto g = e.tensor.grad();
            expect(!g.empty(), "frozen tensor lost its gradient buffer: " + e.spec.name);
            for (float v : g)
              expect(v == 0.0f, "frozen tensor received gradient: " + e.spec.name);
          } else if (e.trainable) {
            for (float v : e.tensor.grad()) any_live = any_live || v != 0.0f;
          }
        }
        expect(any_live, "no trainable tensor received any gradient");
      }
      opt.step();
    }

    for (const auto& [name, vals] : before)
      expect(same_bits<float>(model.params().at(name).value(), vals),
             "frozen tensor moved under layer-norm policy: " + name);
    expect(!same_bits<float>(model.params().at("encoder.block1.ln1.gain").value(), ln_before),
           "layer norm gain never moved");
  }

  // frozen-encoder policy through the full training loop
  std::vector<std::string> touched_groups;
  {
    RangeViT<float> model(cfg, 18);
    const auto pick_frozen = [](const ParamStore<float>::Entry& e) {
      return e.spec.name.starts_with("encoder.") && e.spec.name != "encoder.pos_embed";
    };
    const auto pick_rest = [](const ParamStore<float>::Entry& e) {
      return !e.spec.buffer && !e.spec.name.starts_with("encoder.");
    };
    const auto frozen_before = snapshot_values<float>(model.params(), pick_frozen);
    const auto rest_before = snapshot_values<float>(model.params(), pick_rest);
    std::vector<float> pos_before(model.params().at("encoder.pos_embed").value().begin(),
                                  model.params().at("encoder.pos_embed").value().end());

    ProjectionSpec proj;
    proj.beams = 8;
    proj.width = 32;
    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 1;
    tc.peak_lr = 5e-3;
    tc.warmup_epochs = 0;
    tc.augment_prob = 0.4;
    tc.policy = FinetunePolicy::none;
    tc.val_every = 0;
    tc.seed = 23;
    train(model, TrainDataset{{scan}, {}}, proj, tc);

    for (const auto& [name, vals] : frozen_before)
      expect(same_bits<float>(model.params().at(name).value(), vals),
             "encoder tensor moved under frozen policy: " + name);
    expect(!same_bits<float>(model.params().at("encoder.pos_embed").value(), pos_before),
           "positional embedding never moved");
    std::set<std::string> changed;
    for (const auto& [name, vals] : rest_before)
      if (!same_bits<float>(model.params().at(name).value(), vals))
        changed.insert(name.substr(0, name.find('.')));
    for (const char* group : {"stem", "decoder", "refiner"}) {
      expect(changed.count(group) == 1, std::string(group) + " never moved under frozen policy");
      touched_groups.push_back(group);
    }
  }
  return "attn/ffn grads exactly zero; frozen tensors bit-identical; stem/decoder/refiner moved";
}

// ---------------------------------------------------------------- criterion 8

ModelConfig overfit_model() {
  ModelConfig cfg;
  cfg.crop_h = 32;
  cfg.crop_w = 256;
  cfg.patch_h = 2;
  cfg.patch_w = 8;
  cfg.dim = 32;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.width_in = 8;
  cfg.width_hidden = 16;
  cfg.num_classes = 4;
  cfg.kernel_points = 9;
  cfg.max_neighbors = 16;
  return cfg;
}

PointCloud desk_scene(uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  return generate_scene(spec);  // 32 x 256, every ray hits
}

double scan_accuracy(RangeViT<float>& model, const PointCloud& scan, const ProjectionSpec& proj) {
  model.set_training(false);
  const RangeImage img = proj.project(scan);
  const std::vector<int> pred = model.infer_labels(img, packed_xyz(scan), InferOptions{});
  int64_t hit = 0, total = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (scan.labels[i] <= 0) continue;
    ++total;
    hit += pred[i] == scan.labels[i] ? 1 : 0;
  }
  return total > 0 ? static_cast<double>(hit) / total : 0.0;
}

std::string criterion_training() {
  const ModelConfig cfg = overfit_model();
  ProjectionSpec proj;  // spherical 32 x 256

  // part 1: memorize a single scan
  const PointCloud scan = desk_scene(8801);
  expect(scan.size() == 8192, "expected a full 32x256 scan");
  RangeViT<float> model(cfg, 7);
  TrainConfig tc;
  tc.batch_size = 1;
  tc.epochs = 75;
  tc.warmup_epochs = 5;
  tc.peak_lr = 3e-3;
  tc.augment_prob = 0.5;
  tc.val_every = 0;
  int epochs_used = 0;
  double acc = 0.0;
  for (int round = 0; round < 4 && acc < 0.95; ++round) {
    tc.seed = 100 + round;  // new shuffle/crop stream each round
    train(model, TrainDataset{{scan}, {}}, proj, tc);
    epochs_used += tc.epochs;
    acc = scan_accuracy(model, scan, proj);
  }
  expect(acc >= 0.95, fmt("single-scan accuracy %.4f after %d epochs", acc, epochs_used));

  // part 2: beat the majority-class baseline by 20 mIoU points on held-out scans
  TrainDataset data;
  for (uint64_t s = 0; s < 8; ++s) data.train.push_back(desk_scene(9001 + s));
  for (uint64_t s = 0; s < 4; ++s) data.val.push_back(desk_scene(9101 + s));

  std::vector<int64_t> freq(cfg.num_classes + 1, 0);
  for (const auto& c : data.train)
    for (int l : c.labels) freq[l]++;
  const int majority =
      static_cast<int>(std::max_element(freq.begin() + 1, freq.end()) - freq.begin());
  ConfusionMatrix base_cm(cfg.num_classes);
  for (const auto& c : data.val)
    for (int l : c.labels) base_cm.add(l, majority);
  const IouReport base = miou(base_cm);
  expect(base.defined, "baseline confusion matrix is empty");

  RangeViT<float> gen(cfg, 11);
  TrainConfig tg;
  tg.batch_size = 2;
  tg.epochs = 60;
  tg.warmup_epochs = 6;
  tg.peak_lr = 3e-3;
  tg.augment_prob = 0.5;
  tg.val_every = 0;
  tg.seed = 5501;
  train(gen, data, proj, tg);
  const IouReport rep = evaluate(gen, data.val, proj, InferOptions{});
  expect(rep.defined, "validation mIoU undefined");
  expect(rep.mean >= base.mean + 0.20,
         fmt("val mIoU %.4f does not beat majority baseline %.4f by 0.20", rep.mean, base.mean));
  return fmt("overfit %.1f%% in %d epochs; val mIoU %.3f vs majority baseline %.3f",
             acc * 100.0, epochs_used, rep.mean, base.mean);
}

// ---------------------------------------------------------------- criterion 9

std::string criterion_windows() {
  ModelConfig cfg = tiny_model();
  cfg.crop_h = 16;
  cfg.crop_w = 64;
  SceneSpec spec;
  spec.seed = 9901;
  spec.beams = 16;
  spec.width = 64;
  spec.boxes = 3;
  const PointCloud scan = generate_scene(spec);
  const RangeImage img = spherical_project(scan, spec.fov, 16, 64);

  RangeViT<float> model(cfg, 91);
  const CropResult crop = crop_window(img, 0, 64);
  expect(static_cast<int64_t>(crop.point_index.size()) == scan.size(),
         "full-width crop must retain every point");
  const Tensor<float> single = model.forward(crop.image, packed_xyz(scan, crop.point_index));
  const Tensor<float> windowed = model.infer_full_scan(img, packed_xyz(scan), 64);
  expect(single.shape() == windowed.shape(), "logit shapes differ");
  expect(same_bits<float>(single.value(), windowed.value()),
         "full-width window does not reproduce the single pass bit-exactly");

  // overlapping strides: deterministic and finite
  const Tensor<float> a = model.infer_full_scan(img, packed_xyz(scan), 16);
  const Tensor<float> b = model.infer_full_scan(img, packed_xyz(scan), 16);
  expect(same_bits<float>(a.value(), b.value()), "overlapping inference is not deterministic");
  for (float v : a.value()) expect(std::isfinite(v), "overlapping inference produced non-finite logits");

  int64_t starts_checked = 0;
  for (const int image_w : {64, 100, 256}) {
    for (int stride = 1; stride <= 64; ++stride) {
      const std::vector<int> starts = window_starts(image_w, 64, stride);
      std::vector<uint8_t> covered(image_w, 0);
      int prev = -1;
      for (int s : starts) {
        expect(s >= 0 && s < image_w && s > prev, "window starts must ascend within the image");
        prev = s;
        for (int j = 0; j < 64; ++j) covered[(s + j) % image_w] = 1;
        ++starts_checked;
      }
      for (int c = 0; c < image_w; ++c)
        expect(covered[c] == 1,
               fmt("stride %d on width %d leaves column %d uncovered", stride, image_w, c));
    }
  }
  return fmt("bit-exact single pass; %lld window starts cover every column",
             static_cast<long long>(starts_checked));
}

// --------------------------------------------------------------- criterion 10

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / "rangevit_acceptance";
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const char* name) const { return (path / name).string(); }
};

std::string criterion_formats() {
  TempDir tmp;
  Rng rng(1010);

  PointCloud cloud;
  cloud.xyzi.resize(400);
  for (auto& v : cloud.xyzi) v = static_cast<float>(rng.normal() * 10.0);
  write_point_cloud(tmp.file("a.bin"), cloud);
  const PointCloud cloud2 = read_point_cloud(tmp.file("a.bin"));
  expect(same_bits<float>(cloud2.xyzi, cloud.xyzi), "point cloud round trip not bit-exact");

  std::vector<int> labels(100);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_int(10));
  write_labels(tmp.file("a.label"), labels);
  expect(read_labels(tmp.file("a.label"), 100, identity_class_map(9)) == labels,
         "label round trip differs");

  const PointCloud scan = small_scene(4242);
  const RangeImage img = spherical_project(scan, SensorFov{}, 8, 32);
  write_range_image(tmp.file("a.rvri"), img);
  const RangeImage img2 = read_range_image(tmp.file("a.rvri"));
  expect(img2.H == img.H && img2.W == img.W && same_bits<float>(img2.features, img.features) &&
             img2.occupancy == img.occupancy,
         "range image round trip differs");

  const ModelConfig cfg = tiny_model();
  RangeViT<float> model(cfg, 5);
  write_weight_archive(tmp.file("a.rvwt"), snapshot(model.params()));
  const WeightArchive arch = read_weight_archive(tmp.file("a.rvwt"));
  RangeViT<float> twin(cfg, 6);
  load_weights(twin.params(), arch);
  for (const auto& e : model.params().entries())
    expect(same_bits<float>(twin.params().at(e.spec.name).value(), e.tensor.value()),
           "weight archive round trip differs at " + e.spec.name);

  // pretrained import: 14x14+1 source table onto a 16x48+1 grid
  ModelConfig big;
  big.crop_h = 32;
  big.crop_w = 384;
  big.patch_h = 2;
  big.patch_w = 8;
  big.dim = 64;
  big.depth = 1;
  big.heads = 2;
  big.width_in = 8;
  big.width_hidden = 16;
  big.num_classes = 4;
  big.kernel_points = 5;
  RangeViT<float> target(big, 31);
  expect(target.params().at("encoder.pos_embed").dim(0) == 769, "target grid should hold 769 rows");

  WeightArchive pre;
  std::vector<float> pos(197 * 64);
  for (int64_t r = 0; r < 197; ++r)
    for (int64_t d = 0; d < 64; ++d)
      pos[r * 64 + d] = r == 0 ? 1000.0f + static_cast<float>(d)   // class-token row
                               : 0.25f * static_cast<float>(d);    // constant per channel
  pre.entries.push_back({"pos_embed", {197, 64}, pos});
  std::vector<float> gain(64, 1.75f);
  pre.entries.push_back({"blocks.0.norm1.weight", {64}, gain});
  write_weight_archive(tmp.file("pre.rvwt"), pre);

  const WeightArchive loaded = read_weight_archive(tmp.file("pre.rvwt"));
  const std::vector<std::pair<std::string, std::string>> name_map = {
      {"pos_embed", "encoder.pos_embed"},
      {"blocks.0.norm1.weight", "encoder.block1.ln1.gain"},
      {"blocks.0.norm2.weight", "encoder.block1.ln2.gain"},  // absent from the archive
  };
  const ImportReport rep = load_pretrained(target, loaded, name_map, FinetunePolicy::full);
  expect(rep.resampled == std::vector<std::string>{"encoder.pos_embed"}, "pos embed not resampled");
  expect(rep.matched == std::vector<std::string>{"encoder.block1.ln1.gain"}, "gain not matched");
  expect(rep.skipped.size() == 1, "absent archive entry not reported as skipped");

  const auto got = target.params().at("encoder.pos_embed").value();
  expect(target.params().at("encoder.pos_embed").shape() == Shape({769, 64}),
         "resampled table has the wrong shape");
  for (int64_t d = 0; d < 64; ++d)
    expect(got[d] == 1000.0f + static_cast<float>(d), "class-token row not copied verbatim");
  for (int64_t r = 1; r < 769; ++r)
    for (int64_t d = 0; d < 64; ++d)
      expect(got[r * 64 + d] == 0.25f * static_cast<float>(d),
             fmt("constant channel %lld not preserved at row %lld", static_cast<long long>(d),
                 static_cast<long long>(r)));
  for (float v : target.params().at("encoder.block1.ln1.gain").value())
    expect(v == 1.75f, "matched gain not copied");

  return "4 formats bit-exact; 197-row table resampled to 769 rows, class row verbatim";
}

// -----------------------------------------------------------------------------

template <typename Fn>
bool run_criterion(int n, const char* title, double budget_s, Fn fn) {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string note;
  try {
    note = fn();
  } catch (const std::exception& e) {
    ok = false;
    note = e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (ok && budget_s > 0.0 && secs > budget_s) {
    ok = false;
    note += fmt(" (exceeded the %.0fs budget)", budget_s);
  }
  std::printf("criterion %2d: %s  [%s, %.2fs] %s\n", n, ok ? "PASS" : "FAIL", title, secs,
              note.c_str());
  std::fflush(stdout);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failures = 0, ran = 0;
  const auto go = [&](int n, const char* title, double budget, auto fn) {
    if (only != 0 && n != only) return;
    ++ran;
    if (!run_criterion(n, title, budget, fn)) ++failures;
  };

  go(1, "token counts", 1.0, criterion_tokens);
  go(2, "parameter budgets", 1.0, criterion_params);
  go(3, "gradient checks", 300.0, criterion_gradients);
  go(4, "projection round trip", 60.0, criterion_projection);
  go(5, "loss identities", 60.0, criterion_objective);
  go(6, "point ops vs brute force", 120.0, criterion_pointops);
  go(7, "freeze policies", 0.0, criterion_freeze);
  go(8, "training convergence", 1800.0, criterion_training);
  go(9, "sliding-window inference", 0.0, criterion_windows);
  go(10, "file formats and import", 0.0, criterion_formats);

  std::printf("%d of %d criteria passed\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
