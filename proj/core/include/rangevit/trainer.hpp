#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rangevit/model.hpp"
#include "rangevit/objective.hpp"
#include "rangevit/projection.hpp"

namespace rangevit {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 2;
  double peak_lr = 1e-3;
  int warmup_epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double augment_prob = 0.5;
  double focal_gamma = 2.0;
  FinetunePolicy policy = FinetunePolicy::full;
  uint64_t seed = 1;
  int val_every = 10;   // validate every k epochs (0: never); the last epoch always validates
  int infer_stride = 0; // sliding-window stride for validation (0: crop width)

  void validate() const;  // throws ConfigError with the offending key
};

// linear warmup to the peak, then cosine decay to exactly zero at `epochs`
double lr_at(const TrainConfig& cfg, double epoch);

// In-place point-cloud augmentation: optional y-flip, then rotation (yaw *
// pitch * roll, each angle uniform in +-5 deg), then translation (each axis
// uniform in +-1 m); each stage fires with probability `prob`. Always draws
// the same number of random values so downstream draws stay aligned.
void augment(PointCloud& cloud, Rng& rng, double prob);

// full-height window of the given width at a uniformly random start column
CropResult random_crop(const RangeImage& image, int width, Rng& rng);

// Decoupled-weight-decay Adam over the trainable entries of a store.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& params, const TrainConfig& cfg);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t steps() const { return steps_; }
  void step();

 private:
  ParamStore<T>& params_;
  double lr_ = 0.0;
  double beta1_, beta2_, eps_, weight_decay_;
  int64_t steps_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct TrainDataset {
  std::vector<PointCloud> train;
  std::vector<PointCloud> val;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_lr;
  std::vector<double> val_miou;  // NaN on epochs without validation
  double best_miou = 0.0;
  int best_epoch = -1;  // -1: never validated
};

// mIoU over full-scan inference; points without a prediction (label 0) are
// not scored. Leaves the model in eval mode.
template <typename T>
IouReport evaluate(RangeViT<T>& model, const std::vector<PointCloud>& scans,
                   const ProjectionSpec& proj, const InferOptions& opts,
                   ConfusionMatrix* cm_out = nullptr);

// Full training loop: applies the freeze policy, then per epoch shuffles the
// scans, assembles batches of augmented random crops from distinct scans,
// and takes one optimizer step per batch on the summed focal + Lovasz loss.
// When out_dir is non-empty, writes metrics.csv plus weights_last.rvwt and
// weights_best.rvwt (best validation mIoU) archives there.
template <typename T>
TrainResult train(RangeViT<T>& model, const TrainDataset& data, const ProjectionSpec& proj,
                  const TrainConfig& cfg, const std::string& out_dir = "",
                  bool log_progress = false);

extern template class AdamW<float>;
extern template class AdamW<double>;
extern template IouReport evaluate<float>(RangeViT<float>&, const std::vector<PointCloud>&,
                                          const ProjectionSpec&, const InferOptions&,
                                          ConfusionMatrix*);
extern template IouReport evaluate<double>(RangeViT<double>&, const std::vector<PointCloud>&,
                                           const ProjectionSpec&, const InferOptions&,
                                           ConfusionMatrix*);
extern template TrainResult train<float>(RangeViT<float>&, const TrainDataset&,
                                         const ProjectionSpec&, const TrainConfig&,
                                         const std::string&, bool);
extern template TrainResult train<double>(RangeViT<double>&, const TrainDataset&,
                                          const ProjectionSpec&, const TrainConfig&,
                                          const std::string&, bool);

}  // namespace rangevit
