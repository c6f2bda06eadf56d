#include "rangevit/model.hpp"

#include <algorithm>
#include <cmath>

#include "rangevit/common.hpp"

namespace rangevit {

namespace {

// output extent of the stem pooling (kernel p+1, stride p, pad p/2)
int pooled_extent(int n, int p) { return (n + 2 * (p / 2) - (p + 1)) / p + 1; }

KernelDisposition make_disposition(const ModelConfig& cfg) {
  cfg.validate();
  return KernelDisposition::make(cfg.kernel_points, cfg.kp_sigma);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) {
    throw ConfigError(msg, key);
  };
  if (crop_h < 1) fail("model.crop_h", "crop height must be positive");
  if (crop_w < 1) fail("model.crop_w", "crop width must be positive");
  if (patch_h < 1) fail("model.patch_h", "patch height must be positive");
  if (patch_w < 1) fail("model.patch_w", "patch width must be positive");
  if (crop_h % patch_h != 0)
    fail("model.patch_h", "crop height " + std::to_string(crop_h) +
                              " is not divisible by patch height " + std::to_string(patch_h));
  if (crop_w % patch_w != 0)
    fail("model.patch_w", "crop width " + std::to_string(crop_w) +
                              " is not divisible by patch width " + std::to_string(patch_w));
  if (pooled_extent(crop_h, patch_h) != grid_h())
    fail("model.patch_h", "patch height " + std::to_string(patch_h) +
                              " breaks the stem pooling grid (needs patch size >= 2)");
  if (pooled_extent(crop_w, patch_w) != grid_w())
    fail("model.patch_w", "patch width " + std::to_string(patch_w) +
                              " breaks the stem pooling grid (needs patch size >= 2)");
  if (dim < 1) fail("model.dim", "token width must be positive");
  if (heads < 1) fail("model.heads", "head count must be positive");
  if (dim % heads != 0)
    fail("model.heads", "token width " + std::to_string(dim) + " is not divisible by " +
                            std::to_string(heads) + " heads");
  if (encoder == EncoderKind::vit && depth < 1)
    fail("model.depth", "encoder depth must be positive");
  if (width_in < 1) fail("model.width_in", "stem width must be positive");
  if (width_hidden < 1) fail("model.width_hidden", "hidden width must be positive");
  if (num_classes < 1) fail("model.num_classes", "class count must be positive");
  if (kernel_points < 1) fail("model.kernel_points", "kernel point count must be positive");
  if (!(kp_sigma > 0.0)) fail("model.kp_sigma", "influence radius must be positive");
  if (max_neighbors < 1) fail("model.max_neighbors", "neighbor cap must be positive");
}

namespace {

using Init = ParamSpec::Init;

struct PlanBuilder {
  std::vector<ParamSpec> plan;

  void param(std::string name, Shape shape, Init init) {
    plan.push_back({std::move(name), std::move(shape), init, false});
  }
  void buffer(std::string name, Shape shape, Init init) {
    plan.push_back({std::move(name), std::move(shape), init, true});
  }
  void conv(const std::string& name, int64_t cout, int64_t cin, int64_t kh, int64_t kw) {
    param(name + ".weight", {cout, cin, kh, kw}, Init::kaiming);
    param(name + ".bias", {cout}, Init::zeros);
  }
  void batch_norm(const std::string& name, int64_t c) {
    param(name + ".gain", {c}, Init::ones);
    param(name + ".bias", {c}, Init::zeros);
    buffer(name + ".running_mean", {c}, Init::zeros);
    buffer(name + ".running_var", {c}, Init::ones);
  }
  void layer_norm(const std::string& name, int64_t c) {
    param(name + ".gain", {c}, Init::ones);
    param(name + ".bias", {c}, Init::zeros);
  }
  void dense(const std::string& name, int64_t out, int64_t in) {
    param(name + ".weight", {out, in}, Init::trunc_normal);
    param(name + ".bias", {out}, Init::zeros);
  }
};

}  // namespace

std::vector<ParamSpec> parameter_plan(const ModelConfig& cfg) {
  cfg.validate();
  PlanBuilder b;
  const int64_t dh = cfg.width_hidden;
  const int64_t d = cfg.dim;

  int64_t cin = 5;
  for (int i = 1; i <= 4; ++i) {
    const int64_t cout = i < 4 ? cfg.width_in : dh;
    const std::string p = "stem.block" + std::to_string(i);
    b.conv(p + ".conv_in", cout, cin, 1, 1);
    b.batch_norm(p + ".bn_in", cout);
    b.conv(p + ".branch_a", cout, cout, 3, 3);
    b.batch_norm(p + ".bn_a", cout);
    b.conv(p + ".branch_b", cout, cout, 3, 3);
    b.batch_norm(p + ".bn_b", cout);
    b.conv(p + ".conv_out", cout, 2 * cout, 1, 1);
    b.batch_norm(p + ".bn_out", cout);
    if (cin != cout) b.conv(p + ".proj", cout, cin, 1, 1);
    cin = cout;
  }
  b.conv("stem.token_proj", d, dh, 1, 1);

  if (cfg.encoder == EncoderKind::vit) {
    b.param("encoder.pos_embed", {cfg.token_count(), d}, Init::trunc_normal);
    if (cfg.class_token) b.param("encoder.cls_token", {1, d}, Init::trunc_normal);
    for (int i = 1; i <= cfg.depth; ++i) {
      const std::string p = "encoder.block" + std::to_string(i);
      b.layer_norm(p + ".ln1", d);
      b.dense(p + ".attn.qkv", 3 * d, d);
      b.dense(p + ".attn.proj", d, d);
      b.layer_norm(p + ".ln2", d);
      b.dense(p + ".ffn.fc1", 4 * d, d);
      b.dense(p + ".ffn.fc2", d, 4 * d);
    }
    b.layer_norm("encoder.ln_final", d);
  }

  b.conv("decoder.expand", dh * cfg.patch_h * cfg.patch_w, d, 1, 1);
  b.conv("decoder.conv3x3", dh, 2 * dh, 3, 3);
  b.batch_norm("decoder.bn1", dh);
  b.conv("decoder.conv1x1", dh, dh, 1, 1);
  b.batch_norm("decoder.bn2", dh);

  if (cfg.use_refiner) {
    b.param("refiner.kpconv.weight", {cfg.kernel_points, dh, dh}, Init::kaiming);
    b.batch_norm("refiner.bn", dh);
    b.dense("refiner.head", cfg.num_classes, dh);
  } else {
    b.conv("head", cfg.num_classes, dh, 1, 1);
  }
  return b.plan;
}

int64_t count_params(const ModelConfig& cfg) {
  int64_t total = 0;
  for (const auto& spec : parameter_plan(cfg))
    if (!spec.buffer) total += shape_numel(spec.shape);
  return total;
}

std::map<std::string, int64_t> count_params_by_group(const ModelConfig& cfg) {
  std::map<std::string, int64_t> groups;
  for (const auto& spec : parameter_plan(cfg)) {
    if (spec.buffer) continue;
    const auto dot = spec.name.find('.');
    groups[spec.name.substr(0, dot)] += shape_numel(spec.shape);
  }
  return groups;
}

template <typename T>
void ParamStore<T>::build(const std::vector<ParamSpec>& plan, uint64_t seed) {
  entries_.clear();
  index_.clear();
  Rng rng(seed);
  for (const auto& spec : plan) {
    RV_CHECK(!index_.count(spec.name), "duplicate parameter name: " + spec.name);
    Tensor<T> t = Tensor<T>::zeros(spec.shape);
    auto v = t.value_mut();
    switch (spec.init) {
      case Init::zeros:
        break;
      case Init::ones:
        std::fill(v.begin(), v.end(), T(1));
        break;
      case Init::trunc_normal:
        for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.02));
        break;
      case Init::kaiming: {
        int64_t fan_in = 1;
        const auto& s = spec.shape;
        if (s.size() == 4)
          fan_in = s[1] * s[2] * s[3];
        else if (s.size() == 3)
          fan_in = s[2];  // kernel point weights: K x Cout x Cin
        else
          fan_in = s.back();
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
        break;
      }
    }
    const bool trainable = !spec.buffer;
    t.set_requires_grad(trainable);
    index_[spec.name] = entries_.size();
    entries_.push_back({spec, t, trainable});
  }
}

template <typename T>
bool ParamStore<T>::has(const std::string& name) const {
  return index_.count(name) != 0;
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  RV_CHECK(it != index_.end(), "unknown parameter: " + name);
  return entries_[it->second].tensor;
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  RV_CHECK(it != index_.end(), "unknown parameter: " + name);
  return entries_[it->second].tensor;
}

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::entry(const std::string& name) {
  auto it = index_.find(name);
  RV_CHECK(it != index_.end(), "unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
void ParamStore<T>::set_trainable(const std::string& name, bool trainable) {
  Entry& e = entry(name);
  RV_CHECK(!e.spec.buffer || !trainable, "running statistics cannot be trainable: " + name);
  e.trainable = trainable;
  e.tensor.set_requires_grad(trainable);
}

template <typename T>
void ParamStore<T>::zero_grads() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
int64_t ParamStore<T>::param_scalars() const {
  int64_t total = 0;
  for (const auto& e : entries_)
    if (!e.spec.buffer) total += e.tensor.numel();
  return total;
}

FinetunePolicy parse_policy(const std::string& name) {
  if (name == "full") return FinetunePolicy::full;
  if (name == "none") return FinetunePolicy::none;
  if (name == "LN" || name == "ln") return FinetunePolicy::ln;
  if (name == "LN+ATTN" || name == "ln+attn") return FinetunePolicy::ln_attn;
  if (name == "LN+FFN" || name == "ln+ffn") return FinetunePolicy::ln_ffn;
  throw Error("unknown fine-tune policy: " + name + " (expected full|none|LN|LN+ATTN|LN+FFN)");
}

std::string policy_name(FinetunePolicy policy) {
  switch (policy) {
    case FinetunePolicy::full: return "full";
    case FinetunePolicy::none: return "none";
    case FinetunePolicy::ln: return "LN";
    case FinetunePolicy::ln_attn: return "LN+ATTN";
    case FinetunePolicy::ln_ffn: return "LN+FFN";
  }
  throw Error("unknown fine-tune policy value");
}

template <typename T>
void apply_freeze_mask(ParamStore<T>& params, FinetunePolicy policy) {
  const bool ln_on = policy != FinetunePolicy::none;
  for (auto& e : params.entries()) {
    if (e.spec.buffer) continue;
    const std::string& n = e.spec.name;
    bool trainable = true;
    if (n.starts_with("encoder.")) {
      if (n == "encoder.pos_embed")
        trainable = true;
      else if (n == "encoder.cls_token")
        trainable = policy == FinetunePolicy::full;
      else if (n.find(".attn.") != std::string::npos)
        trainable = policy == FinetunePolicy::full || policy == FinetunePolicy::ln_attn;
      else if (n.find(".ffn.") != std::string::npos)
        trainable = policy == FinetunePolicy::full || policy == FinetunePolicy::ln_ffn;
      else  // ln1 / ln2 / ln_final
        trainable = policy == FinetunePolicy::full || ln_on;
    }
    params.set_trainable(n, trainable);
  }
}

std::vector<int> window_starts(int image_w, int crop_w, int stride) {
  RV_CHECK(stride >= 1, "window stride must be positive");
  RV_CHECK(stride <= crop_w, "window stride " + std::to_string(stride) + " above crop width " +
                                 std::to_string(crop_w) + " would leave coverage gaps");
  RV_CHECK(image_w >= crop_w, "image width " + std::to_string(image_w) +
                                  " is narrower than the crop width " + std::to_string(crop_w));
  std::vector<int> starts;
  for (int s = 0; s < image_w; s += stride) starts.push_back(s);
  return starts;
}

template <typename T>
Tensor<T> image_tensor(const RangeImage& image) {
  std::vector<T> data(image.features.begin(), image.features.end());
  return Tensor<T>::from_data({5, image.H, image.W}, std::move(data));
}

template <typename T>
RangeViT<T>::RangeViT(const ModelConfig& cfg, uint64_t seed)
    : cfg_(cfg), disposition_(make_disposition(cfg)) {
  params_.build(parameter_plan(cfg), seed);
}

template <typename T>
Tensor<T> RangeViT<T>::batch_norm_p(const Tensor<T>& x, const std::string& prefix) {
  Tensor<T>& rm = params_.at(prefix + ".running_mean");
  Tensor<T>& rv = params_.at(prefix + ".running_var");
  const Tensor<T>& gain = params_.at(prefix + ".gain");
  const Tensor<T>& bias = params_.at(prefix + ".bias");
  if (x.ndim() == 4) return batch_norm2d(x, gain, bias, rm, rv, training_);
  return batch_norm1d(x, gain, bias, rm, rv, training_);
}

template <typename T>
Tensor<T> RangeViT<T>::res_block(const Tensor<T>& x, int block) {
  const std::string p = "stem.block" + std::to_string(block);
  const T slope = T(0.01);
  auto conv = [&](const Tensor<T>& in, const char* name, const Conv2dOpts& opts) {
    return conv2d(in, params_.at(p + "." + name + ".weight"), params_.at(p + "." + name + ".bias"),
                  opts);
  };
  auto cba = [&](const Tensor<T>& in, const char* name, const char* bn, const Conv2dOpts& opts) {
    return batch_norm_p(leaky_relu(conv(in, name, opts), slope), p + "." + bn);
  };
  const Conv2dOpts same3{{1, 1}, {1, 1}, {1, 1}};
  const Conv2dOpts dilated3{{1, 1}, {2, 2}, {2, 2}};
  Tensor<T> h = cba(x, "conv_in", "bn_in", {});
  Tensor<T> a = cba(h, "branch_a", "bn_a", same3);
  Tensor<T> d = cba(h, "branch_b", "bn_b", dilated3);
  Tensor<T> y = cba(concat<T>({a, d}, 1), "conv_out", "bn_out", {});
  Tensor<T> res = params_.has(p + ".proj.weight") ? conv(x, "proj", {}) : x;
  return add(y, res);
}

template <typename T>
typename RangeViT<T>::StemOut RangeViT<T>::stem_forward(const Tensor<T>& crop) {
  RV_CHECK(crop.ndim() == 3 && crop.dim(0) == 5 && crop.dim(1) == cfg_.crop_h &&
               crop.dim(2) == cfg_.crop_w,
           "stem: expected a 5 x " + std::to_string(cfg_.crop_h) + " x " +
               std::to_string(cfg_.crop_w) + " crop, got " + shape_str(crop.shape()));
  Tensor<T> x = reshape(crop, {1, 5, cfg_.crop_h, cfg_.crop_w});
  for (int b = 1; b <= 4; ++b) x = res_block(x, b);
  Tensor<T> context = reshape(x, {cfg_.width_hidden, cfg_.crop_h, cfg_.crop_w});

  Tensor<T> pooled =
      avg_pool2d(x, {cfg_.patch_h + 1, cfg_.patch_w + 1}, {cfg_.patch_h, cfg_.patch_w},
                 {cfg_.patch_h / 2, cfg_.patch_w / 2});
  Tensor<T> tok =
      conv2d(pooled, params_.at("stem.token_proj.weight"), params_.at("stem.token_proj.bias"));
  Tensor<T> grid = permute(reshape(tok, {cfg_.dim, cfg_.grid_h(), cfg_.grid_w()}), {1, 2, 0});
  return {reshape(grid, {cfg_.num_patches(), cfg_.dim}), context};
}

template <typename T>
Tensor<T> RangeViT<T>::encoder_forward(const Tensor<T>& tokens) {
  RV_CHECK(tokens.ndim() == 2 && tokens.dim(0) == cfg_.num_patches() && tokens.dim(1) == cfg_.dim,
           "encoder: expected " + std::to_string(cfg_.num_patches()) + " x " +
               std::to_string(cfg_.dim) + " tokens, got " + shape_str(tokens.shape()));
  if (cfg_.encoder == EncoderKind::identity) return tokens;

  Tensor<T> x = tokens;
  if (cfg_.class_token) x = concat<T>({params_.at("encoder.cls_token"), x}, 0);
  x = add(x, params_.at("encoder.pos_embed"));
  for (int i = 1; i <= cfg_.depth; ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    AttentionParams<T> ap;
    ap.ln1_gain = params_.at(p + ".ln1.gain");
    ap.ln1_bias = params_.at(p + ".ln1.bias");
    ap.qkv_weight = params_.at(p + ".attn.qkv.weight");
    ap.qkv_bias = params_.at(p + ".attn.qkv.bias");
    ap.proj_weight = params_.at(p + ".attn.proj.weight");
    ap.proj_bias = params_.at(p + ".attn.proj.bias");
    ap.ln2_gain = params_.at(p + ".ln2.gain");
    ap.ln2_bias = params_.at(p + ".ln2.bias");
    ap.fc1_weight = params_.at(p + ".ffn.fc1.weight");
    ap.fc1_bias = params_.at(p + ".ffn.fc1.bias");
    ap.fc2_weight = params_.at(p + ".ffn.fc2.weight");
    ap.fc2_bias = params_.at(p + ".ffn.fc2.bias");
    ap.heads = cfg_.heads;
    x = attention_block(x, ap);
  }
  x = layer_norm(x, params_.at("encoder.ln_final.gain"), params_.at("encoder.ln_final.bias"));
  if (cfg_.class_token) x = slice(x, 0, 1, cfg_.num_patches());
  return x;
}

template <typename T>
Tensor<T> RangeViT<T>::decoder_forward(const Tensor<T>& tokens, const Tensor<T>& context) {
  const int hp = cfg_.grid_h();
  const int wp = cfg_.grid_w();
  const int dh = cfg_.width_hidden;
  RV_CHECK(tokens.ndim() == 2 && tokens.dim(0) == cfg_.num_patches() && tokens.dim(1) == cfg_.dim,
           "decoder: bad token shape " + shape_str(tokens.shape()));
  RV_CHECK(context.ndim() == 3 && context.dim(0) == dh && context.dim(1) == cfg_.crop_h &&
               context.dim(2) == cfg_.crop_w,
           "decoder: bad context shape " + shape_str(context.shape()));
  const T slope = T(0.01);

  Tensor<T> grid = permute(reshape(tokens, {hp, wp, cfg_.dim}), {2, 0, 1});
  Tensor<T> x = reshape(grid, {1, cfg_.dim, hp, wp});
  x = conv2d(x, params_.at("decoder.expand.weight"), params_.at("decoder.expand.bias"));
  x = pixel_shuffle(x, cfg_.patch_h, cfg_.patch_w);
  x = concat<T>({x, reshape(context, {1, dh, cfg_.crop_h, cfg_.crop_w})}, 1);
  const Conv2dOpts same3{{1, 1}, {1, 1}, {1, 1}};
  x = batch_norm_p(
      leaky_relu(conv2d(x, params_.at("decoder.conv3x3.weight"), params_.at("decoder.conv3x3.bias"),
                        same3),
                 slope),
      "decoder.bn1");
  x = batch_norm_p(
      leaky_relu(
          conv2d(x, params_.at("decoder.conv1x1.weight"), params_.at("decoder.conv1x1.bias")),
          slope),
      "decoder.bn2");
  return reshape(x, {dh, cfg_.crop_h, cfg_.crop_w});
}

template <typename T>
Tensor<T> RangeViT<T>::refine_3d(const Tensor<T>& point_features, std::span<const float> xyz) {
  RV_CHECK(cfg_.use_refiner, "refiner is disabled in this configuration");
  RV_CHECK(point_features.ndim() == 2 && point_features.dim(1) == cfg_.width_hidden,
           "refiner: bad feature shape " + shape_str(point_features.shape()));
  const int64_t n = point_features.dim(0);
  RV_CHECK(static_cast<int64_t>(xyz.size()) == n * 3, "refiner: xyz length does not match points");
  if (n == 0) return Tensor<T>::zeros({0, cfg_.num_classes});

  NeighborIndex nb = radius_neighbors(xyz, xyz, disposition_.sigma, cfg_.max_neighbors);
  Tensor<T> x =
      kpconv(point_features, xyz, xyz, nb, disposition_, params_.at("refiner.kpconv.weight"));
  x = relu(batch_norm_p(x, "refiner.bn"));
  return linear(x, params_.at("refiner.head.weight"), params_.at("refiner.head.bias"));
}

template <typename T>
Tensor<T> RangeViT<T>::decoder_map(const Tensor<T>& crop) {
  StemOut s = stem_forward(crop);
  return decoder_forward(encoder_forward(s.tokens), s.context);
}

template <typename T>
Tensor<T> RangeViT<T>::pixel_logits(const Tensor<T>& decoder_features) {
  RV_CHECK(!cfg_.use_refiner, "per-pixel head only exists when the refiner is disabled");
  Tensor<T> x = reshape(decoder_features, {1, cfg_.width_hidden, cfg_.crop_h, cfg_.crop_w});
  x = conv2d(x, params_.at("head.weight"), params_.at("head.bias"));
  return reshape(x, {cfg_.num_classes, cfg_.crop_h, cfg_.crop_w});
}

template <typename T>
Tensor<T> RangeViT<T>::forward(const RangeImage& crop_image, std::span<const float> xyz) {
  Tensor<T> dec = decoder_map(image_tensor<T>(crop_image));
  if (cfg_.use_refiner) return refine_3d(unproject_features(dec, crop_image), xyz);
  return unproject_features(pixel_logits(dec), crop_image);
}

template <typename T>
Tensor<T> RangeViT<T>::averaged_decoder_map(const RangeImage& image, int stride) {
  RV_CHECK(image.H == cfg_.crop_h, "inference image height " + std::to_string(image.H) +
                                       " must equal the crop height " +
                                       std::to_string(cfg_.crop_h));
  const int H = image.H;
  const int W = image.W;
  const int wc = cfg_.crop_w;
  const int dh = cfg_.width_hidden;
  const std::vector<int> starts = window_starts(W, wc, stride);

  std::vector<T> accum(static_cast<size_t>(dh) * H * W, T(0));
  std::vector<int> cover(W, 0);
  for (int s : starts) {
    CropResult cr = crop_window(image, s, wc);
    Tensor<T> dec = decoder_map(image_tensor<T>(cr.image));
    const auto& v = dec.value();
    for (int j = 0; j < wc; ++j) cover[(s + j) % W]++;
    for (int c = 0; c < dh; ++c)
      for (int h = 0; h < H; ++h) {
        const T* src = v.data() + (static_cast<int64_t>(c) * H + h) * wc;
        T* dst = accum.data() + (static_cast<int64_t>(c) * H + h) * W;
        for (int j = 0; j < wc; ++j) dst[(s + j) % W] += src[j];
      }
  }
  // every column is covered for stride <= crop width; dividing (not
  // multiplying by a reciprocal) keeps single-coverage columns bit-exact
  for (int c = 0; c < dh; ++c)
    for (int h = 0; h < H; ++h) {
      T* row = accum.data() + (static_cast<int64_t>(c) * H + h) * W;
      for (int w = 0; w < W; ++w) row[w] /= static_cast<T>(cover[w]);
    }
  return Tensor<T>::from_data({dh, H, W}, std::move(accum));
}

template <typename T>
Tensor<T> RangeViT<T>::infer_full_scan(const RangeImage& image, std::span<const float> xyz,
                                       int stride) {
  Tensor<T> avg = averaged_decoder_map(image, stride);
  if (cfg_.use_refiner) return refine_3d(unproject_features(avg, image), xyz);
  return unproject_features(pixel_logits(avg), image);
}

template <typename T>
std::vector<int> RangeViT<T>::infer_labels(const RangeImage& image, std::span<const float> xyz,
                                           const InferOptions& opts) {
  const int stride = opts.stride > 0 ? opts.stride : cfg_.crop_w;
  const int k = cfg_.num_classes;
  if (opts.post == InferOptions::Post::knn) {
    RV_CHECK(!cfg_.use_refiner, "knn post-processing requires the refiner-less head");
    Tensor<T> pl = pixel_logits(averaged_decoder_map(image, stride));
    const auto& v = pl.value();
    const int64_t hw = static_cast<int64_t>(image.H) * image.W;
    std::vector<int> pix(hw);
    for (int64_t i = 0; i < hw; ++i) {
      int best = 0;
      T best_v = v[i];
      for (int c = 1; c < k; ++c)
        if (v[c * hw + i] > best_v) {
          best_v = v[c * hw + i];
          best = c;
        }
      pix[i] = best + 1;
    }
    return knn_postprocess(pix, image, opts.knn_k, opts.knn_window, opts.knn_sigma);
  }

  Tensor<T> logits = infer_full_scan(image, xyz, stride);
  const auto& v = logits.value();
  const int64_t n = logits.dim(0);
  std::vector<int> out(n);
  for (int64_t i = 0; i < n; ++i) {
    const T* row = v.data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row) + 1;
  }
  return out;
}

template void apply_freeze_mask<float>(ParamStore<float>&, FinetunePolicy);
template void apply_freeze_mask<double>(ParamStore<double>&, FinetunePolicy);
template class ParamStore<float>;
template class ParamStore<double>;
template class RangeViT<float>;
template class RangeViT<double>;
template Tensor<float> image_tensor<float>(const RangeImage&);
template Tensor<double> image_tensor<double>(const RangeImage&);

}  // namespace rangevit
