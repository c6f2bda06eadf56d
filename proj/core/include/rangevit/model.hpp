#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "rangevit/ops.hpp"
#include "rangevit/pointops.hpp"
#include "rangevit/projection.hpp"

namespace rangevit {

enum class EncoderKind { vit, identity };

struct ModelConfig {
  int crop_h = 32;
  int crop_w = 384;
  int patch_h = 2;
  int patch_w = 8;
  int dim = 384;    // token width D
  int depth = 12;   // encoder blocks L
  int heads = 6;
  int width_in = 32;       // width of the first three stem blocks
  int width_hidden = 256;  // stem/decoder/refiner working width
  int num_classes = 16;
  bool class_token = true;
  EncoderKind encoder = EncoderKind::vit;
  bool use_refiner = true;  // false: per-pixel head, cleaned up with knn_postprocess
  int kernel_points = 15;
  double kp_sigma = 1.2;
  int max_neighbors = 32;

  int grid_h() const { return crop_h / patch_h; }
  int grid_w() const { return crop_w / patch_w; }
  int num_patches() const { return grid_h() * grid_w(); }
  int token_count() const {
    return num_patches() + (encoder == EncoderKind::vit && class_token ? 1 : 0);
  }
  // throws ConfigError with the offending key path
  void validate() const;
};

struct ParamSpec {
  enum class Init { zeros, ones, trunc_normal, kaiming };
  std::string name;
  Shape shape;
  Init init = Init::zeros;
  bool buffer = false;  // running statistics: saved in archives, never trained
};

// Full parameter layout for a configuration; the single source of truth for
// allocation, counting, and archive round trips.
std::vector<ParamSpec> parameter_plan(const ModelConfig& cfg);
int64_t count_params(const ModelConfig& cfg);  // parameter scalars, buffers excluded
std::map<std::string, int64_t> count_params_by_group(const ModelConfig& cfg);

// Named parameter/buffer registry with per-entry trainable flags. Entry order
// follows the plan, which keeps initialization and archives deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    ParamSpec spec;
    Tensor<T> tensor;
    bool trainable = false;
  };

  void build(const std::vector<ParamSpec>& plan, uint64_t seed);
  bool has(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  Entry& entry(const std::string& name);
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void set_trainable(const std::string& name, bool trainable);
  void zero_grads();
  int64_t param_scalars() const;  // buffers excluded

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// Partial fine-tuning: which encoder groups stay trainable. The stem, the
// decoder, the refiner and the positional embeddings are always trainable;
// the class token only under `full`.
enum class FinetunePolicy { full, none, ln, ln_attn, ln_ffn };

FinetunePolicy parse_policy(const std::string& name);  // full|none|LN|LN+ATTN|LN+FFN
std::string policy_name(FinetunePolicy policy);

template <typename T>
void apply_freeze_mask(ParamStore<T>& params, FinetunePolicy policy);

// Start columns of the horizontally wrapping inference windows: 0, stride,
// 2*stride, ... below image_w. Windows are crop_w wide and wrap at the edge.
std::vector<int> window_starts(int image_w, int crop_w, int stride);

// 5 x H x W tensor view of a projected sweep
template <typename T>
Tensor<T> image_tensor(const RangeImage& image);

struct InferOptions {
  int stride = 0;  // 0: use crop width
  enum class Post { refiner, knn } post = Post::refiner;
  int knn_k = 5;
  int knn_window = 5;
  double knn_sigma = 1.0;
};

// Range image segmentation network: convolutional stem -> transformer encoder
// -> upsampling decoder -> per-point refinement.
template <typename T>
class RangeViT {
 public:
  RangeViT(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const KernelDisposition& disposition() const { return disposition_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  struct StemOut {
    Tensor<T> tokens;   // M x D
    Tensor<T> context;  // Dh x H x W skip connection
  };
  StemOut stem_forward(const Tensor<T>& crop);                // crop: 5 x H x W
  Tensor<T> encoder_forward(const Tensor<T>& tokens);         // M x D -> M x D
  Tensor<T> decoder_forward(const Tensor<T>& tokens, const Tensor<T>& context);
  Tensor<T> refine_3d(const Tensor<T>& point_features, std::span<const float> xyz);

  // stem -> encoder -> decoder on one crop; result Dh x H x W
  Tensor<T> decoder_map(const Tensor<T>& crop);
  // per-pixel class head of the refiner-less variant; result K x H x W
  Tensor<T> pixel_logits(const Tensor<T>& decoder_features);
  // per-point logits N x K for one crop (xyz are the crop's points)
  Tensor<T> forward(const RangeImage& crop_image, std::span<const float> xyz);

  // Full-sweep inference: full-height crops at the window starts, decoder
  // features averaged per pixel by coverage, then one refinement pass.
  Tensor<T> infer_full_scan(const RangeImage& image, std::span<const float> xyz, int stride);
  // label predictions for either post-processing mode
  std::vector<int> infer_labels(const RangeImage& image, std::span<const float> xyz,
                                const InferOptions& opts);

 private:
  Tensor<T> res_block(const Tensor<T>& x, int block);
  Tensor<T> batch_norm_p(const Tensor<T>& x, const std::string& prefix);
  Tensor<T> averaged_decoder_map(const RangeImage& image, int stride);

  ModelConfig cfg_;
  ParamStore<T> params_;
  KernelDisposition disposition_;
  bool training_ = false;
};

extern template void apply_freeze_mask<float>(ParamStore<float>&, FinetunePolicy);
extern template void apply_freeze_mask<double>(ParamStore<double>&, FinetunePolicy);
extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class RangeViT<float>;
extern template class RangeViT<double>;
extern template Tensor<float> image_tensor<float>(const RangeImage&);
extern template Tensor<double> image_tensor<double>(const RangeImage&);

}  // namespace rangevit
