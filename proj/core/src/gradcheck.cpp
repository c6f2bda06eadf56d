#include "rangevit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>

#include "rangevit/model.hpp"
#include "rangevit/objective.hpp"
#include "rangevit/ops.hpp"
#include "rangevit/pointops.hpp"
#include "rangevit/projection.hpp"

namespace rangevit {
namespace {

using TD = Tensor<double>;

constexpr double kStep = 1e-5;
constexpr double kOpTol = 1e-4;
constexpr double kEndToEndTol = 1e-3;

double rel_err(double a, double n) {
  return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-3});
}

uint64_t mix_name(uint64_t seed, const std::string& name) {
  uint64_t h = seed ^ 0xcbf29ce484222325ull;
  for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ull;
  return h;
}

struct InputSpec {
  Shape shape;
  double scale = 1.0;
  double shift = 0.0;
  double min_abs = 0.0;  // pushes drawn values away from a kink at zero
};

std::vector<int64_t> pick_coords(Rng& rng, int64_t numel, int64_t want) {
  if (numel <= want) {
    std::vector<int64_t> all(numel);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::set<int64_t> seen;
  while (static_cast<int64_t>(seen.size()) < want) seen.insert(rng.uniform_int(numel));
  return {seen.begin(), seen.end()};
}

struct Suite {
  uint64_t seed;
  int64_t samples_per_tensor = 8;
  std::vector<GradCheckResult> results;

  void check(const std::string& name, const std::vector<InputSpec>& specs,
             const std::function<TD(const std::vector<TD>&)>& fwd, double tol = kOpTol) {
    Rng rng(mix_name(seed, name));
    std::vector<std::vector<double>> vals(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) {
      vals[i].resize(shape_numel(specs[i].shape));
      for (auto& v : vals[i]) {
        v = rng.normal() * specs[i].scale + specs[i].shift;
        if (specs[i].min_abs > 0.0 && std::fabs(v) < specs[i].min_abs)
          v = v < 0.0 ? -specs[i].min_abs : specs[i].min_abs;
      }
    }
    auto make_inputs = [&] {
      std::vector<TD> ins;
      ins.reserve(specs.size());
      for (size_t i = 0; i < specs.size(); ++i)
        ins.push_back(TD::from_data(specs[i].shape, vals[i]).set_requires_grad(true));
      return ins;
    };
    // Fix one random projection of the output so every check reduces to a
    // scalar without hiding any output coordinate.
    std::vector<double> w;
    {
      auto ins = make_inputs();
      w.resize(fwd(ins).numel());
      for (auto& x : w) x = rng.normal();
    }
    auto loss_of = [&](const std::vector<TD>& ins) {
      TD y = fwd(ins);
      return sum(mul(y, TD::from_data(y.shape(), w)));
    };

    auto ins = make_inputs();
    TD loss = loss_of(ins);
    backward(loss);
    std::vector<std::vector<double>> analytic(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) {
      auto g = ins[i].grad();
      analytic[i].assign(g.begin(), g.end());
    }

    double max_err = 0.0;
    int64_t checked = 0;
    for (size_t i = 0; i < specs.size(); ++i) {
      for (int64_t idx : pick_coords(rng, static_cast<int64_t>(vals[i].size()),
                                     samples_per_tensor)) {
        double orig = vals[i][idx];
        vals[i][idx] = orig + kStep;
        double lp = loss_of(make_inputs()).item();
        vals[i][idx] = orig - kStep;
        double lm = loss_of(make_inputs()).item();
        vals[i][idx] = orig;
        double numeric = (lp - lm) / (2.0 * kStep);
        max_err = std::max(max_err, rel_err(analytic[i][idx], numeric));
        ++checked;
      }
    }
    results.push_back({name, max_err, tol, max_err < tol, checked});
  }
};

}  // namespace

std::vector<GradCheckResult> op_gradient_checks(uint64_t seed) {
  Suite s{seed, 8, {}};
  const Shape m23{2, 3};

  s.check("add", {{m23}, {m23}}, [](auto& in) { return add(in[0], in[1]); });
  s.check("sub", {{m23}, {m23}}, [](auto& in) { return sub(in[0], in[1]); });
  s.check("mul", {{m23}, {m23}}, [](auto& in) { return mul(in[0], in[1]); });
  s.check("div", {{m23}, {m23, 0.3, 2.0}}, [](auto& in) { return div(in[0], in[1]); });
  s.check("add_scalar", {{m23}}, [](auto& in) { return add_scalar(in[0], 0.7); });
  s.check("mul_scalar", {{m23}}, [](auto& in) { return mul_scalar(in[0], -1.3); });
  s.check("neg", {{m23}}, [](auto& in) { return neg(in[0]); });
  s.check("exp", {{m23, 0.8}}, [](auto& in) { return exp(in[0]); });
  s.check("log", {{m23, 0.3, 2.0}}, [](auto& in) { return log(in[0]); });
  s.check("pow_scalar", {{m23, 0.3, 2.0}}, [](auto& in) { return pow_scalar(in[0], 2.5); });

  s.check("relu", {{m23, 1.0, 0.0, 0.1}}, [](auto& in) { return relu(in[0]); });
  s.check("leaky_relu", {{m23, 1.0, 0.0, 0.1}}, [](auto& in) { return leaky_relu(in[0], 0.1); });
  s.check("gelu", {{m23}}, [](auto& in) { return gelu(in[0]); });

  s.check("reshape", {{Shape{2, 6}}}, [](auto& in) { return reshape(in[0], {3, 4}); });
  s.check("permute", {{Shape{2, 3, 4}}}, [](auto& in) { return permute(in[0], {2, 0, 1}); });
  s.check("slice", {{Shape{3, 5}}}, [](auto& in) { return slice(in[0], 1, 1, 3); });
  s.check("concat", {{m23}, {Shape{2, 2}}},
          [](auto& in) { return concat<double>({in[0], in[1]}, 1); });
  s.check("sum", {{m23}}, [](auto& in) { return sum(in[0]); });
  s.check("mean", {{m23}}, [](auto& in) { return mean(in[0]); });
  s.check("gather_rows", {{Shape{4, 3}}},
          [](auto& in) { return gather_rows(in[0], {2, 0, 1, 2}); });
  s.check("take_rows", {{Shape{4, 3}}},
          [](auto& in) { return take_rows(in[0], {3, 1, 1, 0, 2}); });

  s.check("matmul", {{Shape{3, 4}}, {Shape{4, 2}}},
          [](auto& in) { return matmul(in[0], in[1]); });
  s.check("linear", {{Shape{5, 4}}, {Shape{3, 4}, 0.5}, {Shape{3}, 0.3}},
          [](auto& in) { return linear(in[0], in[1], in[2]); });
  s.check("linear_no_bias", {{Shape{5, 4}}, {Shape{3, 4}, 0.5}},
          [](auto& in) { return linear(in[0], in[1], TD{}); });

  s.check("softmax", {{Shape{4, 5}}}, [](auto& in) { return softmax(in[0]); });
  s.check("log_softmax", {{Shape{4, 5}}}, [](auto& in) { return log_softmax(in[0]); });
  s.check("layer_norm", {{Shape{4, 6}}, {Shape{6}, 0.3, 1.0}, {Shape{6}, 0.3}},
          [](auto& in) { return layer_norm(in[0], in[1], in[2]); });
  s.check("batch_norm2d_train",
          {{Shape{2, 3, 4, 5}}, {Shape{3}, 0.3, 1.0}, {Shape{3}, 0.3}}, [](auto& in) {
            TD rm = TD::zeros({3});
            TD rv = TD::full({3}, 1.0);
            return batch_norm2d(in[0], in[1], in[2], rm, rv, true);
          });
  s.check("batch_norm2d_eval",
          {{Shape{2, 3, 4, 5}}, {Shape{3}, 0.3, 1.0}, {Shape{3}, 0.3}}, [](auto& in) {
            TD rm = TD::from_data({3}, {0.1, -0.2, 0.3});
            TD rv = TD::from_data({3}, {0.9, 1.2, 0.7});
            return batch_norm2d(in[0], in[1], in[2], rm, rv, false);
          });
  s.check("batch_norm1d_train", {{Shape{6, 4}}, {Shape{4}, 0.3, 1.0}, {Shape{4}, 0.3}},
          [](auto& in) {
            TD rm = TD::zeros({4});
            TD rv = TD::full({4}, 1.0);
            return batch_norm1d(in[0], in[1], in[2], rm, rv, true);
          });

  s.check("conv2d", {{Shape{1, 2, 5, 6}}, {Shape{3, 2, 3, 3}, 0.5}, {Shape{3}, 0.3}},
          [](auto& in) {
            return conv2d(in[0], in[1], in[2], {{1, 1}, {1, 1}, {1, 1}});
          });
  s.check("conv2d_strided_dilated",
          {{Shape{1, 2, 7, 9}}, {Shape{2, 2, 3, 3}, 0.5}, {Shape{2}, 0.3}}, [](auto& in) {
            return conv2d(in[0], in[1], in[2], {{2, 2}, {2, 2}, {2, 2}});
          });
  s.check("conv2d_no_bias", {{Shape{2, 2, 4, 4}}, {Shape{3, 2, 1, 1}, 0.5}},
          [](auto& in) { return conv2d(in[0], in[1], TD{}); });
  s.check("avg_pool2d", {{Shape{1, 3, 6, 8}}},
          [](auto& in) { return avg_pool2d(in[0], {3, 3}, {2, 2}, {1, 1}); });
  s.check("pixel_shuffle", {{Shape{1, 8, 3, 4}}},
          [](auto& in) { return pixel_shuffle(in[0], 2, 2); });
  s.check("space_to_depth", {{Shape{1, 2, 6, 8}}},
          [](auto& in) { return space_to_depth(in[0], 2, 2); });

  {
    Rng crng(mix_name(seed, "bilinear_coords"));
    std::vector<std::array<double, 2>> coords;
    for (int i = 0; i < 9; ++i)
      coords.push_back({crng.uniform(-0.5, 5.5), crng.uniform(-0.5, 7.5)});
    s.check("bilinear_sample", {{Shape{3, 5, 7}}},
            [coords](auto& in) { return bilinear_sample(in[0], coords); });
  }

  s.check("attention_block",
          {{Shape{6, 8}},
           {Shape{8}, 0.3, 1.0},
           {Shape{8}, 0.3},
           {Shape{24, 8}, 0.5},
           {Shape{24}, 0.3},
           {Shape{8, 8}, 0.5},
           {Shape{8}, 0.3},
           {Shape{8}, 0.3, 1.0},
           {Shape{8}, 0.3},
           {Shape{16, 8}, 0.5},
           {Shape{16}, 0.3},
           {Shape{8, 16}, 0.5},
           {Shape{8}, 0.3}},
          [](auto& in) {
            AttentionParams<double> p;
            p.ln1_gain = in[1];
            p.ln1_bias = in[2];
            p.qkv_weight = in[3];
            p.qkv_bias = in[4];
            p.proj_weight = in[5];
            p.proj_bias = in[6];
            p.ln2_gain = in[7];
            p.ln2_bias = in[8];
            p.fc1_weight = in[9];
            p.fc1_bias = in[10];
            p.fc2_weight = in[11];
            p.fc2_bias = in[12];
            p.heads = 2;
            return attention_block(in[0], p);
          });

  {
    Rng prng(mix_name(seed, "kpconv_points"));
    std::vector<float> xyz;
    for (int i = 0; i < 30; ++i) xyz.push_back(static_cast<float>(prng.uniform(-1.0, 1.0)));
    KernelDisposition disp = KernelDisposition::make(4, 1.0);
    NeighborIndex nbr = radius_neighbors(xyz, xyz, disp.sigma, 8);
    s.check("kpconv", {{Shape{10, 3}}, {Shape{4, 2, 3}, 0.5}},
            [xyz, nbr, disp](auto& in) {
              return kpconv(in[0], xyz, xyz, nbr, disp, in[1]);
            });
  }

  {
    RangeImage img;
    img.H = 4;
    img.W = 6;
    img.features.assign(5 * img.H * img.W, 0.0f);
    img.occupancy.assign(img.H * img.W, 0);
    img.pixel_owner.assign(img.H * img.W, -1);
    Rng irng(mix_name(seed, "unproject_img"));
    for (int i = 0; i < 5; ++i) {
      img.point_pixel.push_back({irng.uniform(0.0, 4.0), irng.uniform(0.0, 6.0)});
      img.point_valid.push_back(i != 3);
      img.point_range.push_back(static_cast<float>(irng.uniform(1.0, 9.0)));
    }
    s.check("unproject_features", {{Shape{2, 4, 6}}},
            [img](auto& in) { return unproject_features(in[0], img); });
  }

  const std::vector<int> labels6{1, 2, 0, 3, 1, 2};
  const std::vector<int> labels5{1, 3, 2, 1, 0};
  s.check("focal_loss_gamma2", {{Shape{6, 3}}},
          [labels6](auto& in) { return focal_loss(in[0], labels6, 2.0); });
  s.check("focal_loss_gamma0", {{Shape{6, 3}}},
          [labels6](auto& in) { return focal_loss(in[0], labels6, 0.0); });
  s.check("lovasz_softmax", {{Shape{5, 3}, 0.15, 0.6, 0.1}},
          [labels5](auto& in) { return lovasz_softmax(in[0], labels5); });
  s.check("total_loss", {{Shape{6, 3}}},
          [labels6](auto& in) { return total_loss(in[0], labels6, 2.0); });

  return std::move(s.results);
}

GradCheckResult end_to_end_gradient_check(uint64_t seed) {
  ModelConfig mc;
  mc.crop_h = 8;
  mc.crop_w = 32;
  mc.patch_h = 2;
  mc.patch_w = 8;
  mc.dim = 64;
  mc.depth = 2;
  mc.heads = 2;
  mc.width_in = 16;
  mc.width_hidden = 32;
  mc.num_classes = 4;
  RangeViT<double> model(mc, seed);
  model.set_training(true);
  // Zero-initialized biases put the empty pixels of the crop exactly on the
  // LeakyReLU kink, where no two-sided derivative exists. Jitter every
  // parameter so the check runs at a generic point.
  Rng jitter(mix_name(seed, "e2e_jitter"));
  for (auto& e : model.params().entries()) {
    if (e.spec.buffer) continue;
    for (auto& v : e.tensor.value_mut()) v += jitter.uniform(-0.05, 0.05);
  }

  Rng rng(mix_name(seed, "e2e_scene"));
  RangeImage img;
  img.H = mc.crop_h;
  img.W = mc.crop_w;
  const int64_t hw = static_cast<int64_t>(img.H) * img.W;
  img.features.assign(5 * hw, 0.0f);
  img.occupancy.assign(hw, 0);
  img.pixel_owner.assign(hw, -1);
  for (int64_t p = 0; p < hw; ++p) {
    if (rng.uniform() < 0.3) continue;
    img.occupancy[p] = 1;
    img.features[0 * hw + p] = static_cast<float>(rng.uniform(2.0, 20.0));
    for (int c = 1; c <= 3; ++c)
      img.features[c * hw + p] = static_cast<float>(rng.uniform(-10.0, 10.0));
    img.features[4 * hw + p] = static_cast<float>(rng.uniform());
  }
  const int n_points = 20;
  std::vector<float> xyz;
  std::vector<int> labels;
  for (int i = 0; i < n_points; ++i) {
    img.point_pixel.push_back({rng.uniform(0.0, img.H), rng.uniform(0.0, img.W)});
    img.point_valid.push_back(i % 7 != 3);
    img.point_range.push_back(static_cast<float>(rng.uniform(2.0, 20.0)));
    for (int a = 0; a < 3; ++a) xyz.push_back(static_cast<float>(rng.uniform(-4.0, 4.0)));
    labels.push_back(static_cast<int>(rng.uniform_int(mc.num_classes + 1)));
  }
  labels[0] = 1;  // keep at least one scored point

  auto loss_value = [&] {
    return total_loss(model.forward(img, xyz), labels, 2.0).item();
  };

  model.params().zero_grads();
  TD loss = total_loss(model.forward(img, xyz), labels, 2.0);
  backward(loss);
  auto& entries = model.params().entries();
  std::vector<std::vector<double>> analytic;
  for (auto& e : entries) {
    auto g = e.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  Rng pick(mix_name(seed, "e2e_pick"));
  double max_err = 0.0;
  int64_t checked = 0;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].spec.buffer) continue;
    for (int64_t idx : pick_coords(pick, entries[i].tensor.numel(), 4)) {
      double orig = entries[i].tensor.value()[idx];
      entries[i].tensor.value_mut()[idx] = orig + kStep;
      double lp = loss_value();
      entries[i].tensor.value_mut()[idx] = orig - kStep;
      double lm = loss_value();
      entries[i].tensor.value_mut()[idx] = orig;
      double numeric = (lp - lm) / (2.0 * kStep);
      max_err = std::max(max_err, rel_err(analytic[i][idx], numeric));
      ++checked;
    }
  }
  return {"end_to_end_toy", max_err, kEndToEndTol, max_err < kEndToEndTol, checked};
}

std::vector<GradCheckResult> run_gradient_suite(uint64_t seed) {
  std::vector<GradCheckResult> all = op_gradient_checks(seed);
  all.push_back(end_to_end_gradient_check(seed));
  return all;
}

bool all_passed(const std::vector<GradCheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const GradCheckResult& r) { return r.passed; });
}

}  // namespace rangevit
