#include "rangevit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "rangevit/data_io.hpp"

namespace rangevit {

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) {
    throw ConfigError(msg, key);
  };
  if (epochs < 1) fail("train.epochs", "epoch count must be positive");
  if (batch_size < 1) fail("train.batch_size", "batch size must be positive");
  if (!(peak_lr >= 0.0)) fail("train.peak_lr", "peak learning rate cannot be negative");
  if (warmup_epochs < 0) fail("train.warmup_epochs", "warmup cannot be negative");
  if (warmup_epochs >= epochs)
    fail("train.warmup_epochs", "warmup of " + std::to_string(warmup_epochs) +
                                    " epochs must be shorter than the " + std::to_string(epochs) +
                                    "-epoch run");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("train.beta1", "beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("train.beta2", "beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("train.adam_eps", "epsilon must be positive");
  if (weight_decay < 0.0) fail("train.weight_decay", "weight decay cannot be negative");
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0))
    fail("train.augment_prob", "augmentation probability must lie in [0, 1]");
  if (focal_gamma < 0.0) fail("train.focal_gamma", "focal exponent cannot be negative");
  if (val_every < 0) fail("train.val_every", "validation interval cannot be negative");
  if (infer_stride < 0) fail("train.infer_stride", "inference stride cannot be negative");
}

double lr_at(const TrainConfig& cfg, double epoch) {
  if (epoch <= 0.0) return cfg.warmup_epochs > 0 ? 0.0 : cfg.peak_lr;
  if (epoch < cfg.warmup_epochs) return cfg.peak_lr * (epoch / cfg.warmup_epochs);
  const double span = cfg.epochs - cfg.warmup_epochs;
  const double t = std::clamp((epoch - cfg.warmup_epochs) / span, 0.0, 1.0);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(kPi * t));
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 matmul3(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

}  // namespace

void augment(PointCloud& cloud, Rng& rng, double prob) {
  // fixed draw schedule: coins and magnitudes are consumed whether or not a
  // stage fires
  const double flip_coin = rng.uniform();
  const double rot_coin = rng.uniform();
  const double roll = deg2rad(rng.uniform(-5.0, 5.0));
  const double pitch = deg2rad(rng.uniform(-5.0, 5.0));
  const double yaw = deg2rad(rng.uniform(-5.0, 5.0));
  const double trans_coin = rng.uniform();
  const double tx = rng.uniform(-1.0, 1.0);
  const double ty = rng.uniform(-1.0, 1.0);
  const double tz = rng.uniform(-1.0, 1.0);

  const int64_t n = cloud.size();
  if (flip_coin < prob)
    for (int64_t i = 0; i < n; ++i) cloud.xyzi[i * 4 + 1] = -cloud.xyzi[i * 4 + 1];
  if (rot_coin < prob) {
    const Mat3 rx{{{1, 0, 0},
                   {0, std::cos(roll), -std::sin(roll)},
                   {0, std::sin(roll), std::cos(roll)}}};
    const Mat3 ry{{{std::cos(pitch), 0, std::sin(pitch)},
                   {0, 1, 0},
                   {-std::sin(pitch), 0, std::cos(pitch)}}};
    const Mat3 rz{{{std::cos(yaw), -std::sin(yaw), 0},
                   {std::sin(yaw), std::cos(yaw), 0},
                   {0, 0, 1}}};
    const Mat3 r = matmul3(rz, matmul3(ry, rx));
    for (int64_t i = 0; i < n; ++i) {
      const double x = cloud.xyzi[i * 4 + 0];
      const double y = cloud.xyzi[i * 4 + 1];
      const double z = cloud.xyzi[i * 4 + 2];
      cloud.xyzi[i * 4 + 0] = static_cast<float>(r[0][0] * x + r[0][1] * y + r[0][2] * z);
      cloud.xyzi[i * 4 + 1] = static_cast<float>(r[1][0] * x + r[1][1] * y + r[1][2] * z);
      cloud.xyzi[i * 4 + 2] = static_cast<float>(r[2][0] * x + r[2][1] * y + r[2][2] * z);
    }
  }
  if (trans_coin < prob)
    for (int64_t i = 0; i < n; ++i) {
      cloud.xyzi[i * 4 + 0] += static_cast<float>(tx);
      cloud.xyzi[i * 4 + 1] += static_cast<float>(ty);
      cloud.xyzi[i * 4 + 2] += static_cast<float>(tz);
    }
}

CropResult random_crop(const RangeImage& image, int width, Rng& rng) {
  RV_CHECK(width >= 1 && width <= image.W,
           "crop width " + std::to_string(width) + " does not fit image width " +
               std::to_string(image.W));
  const int start = static_cast<int>(rng.uniform_int(image.W));
  return crop_window(image, start, width);
}

template <typename T>
AdamW<T>::AdamW(ParamStore<T>& params, const TrainConfig& cfg)
    : params_(params),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay),
      m_(params.entries().size()),
      v_(params.entries().size()) {}

template <typename T>
void AdamW<T>::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  auto& entries = params_.entries();
  for (size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable || e.spec.buffer) continue;
    auto w = e.tensor.value_mut();
    const auto g = e.tensor.grad();
    if (m_[i].empty()) {
      m_[i].assign(w.size(), T(0));
      v_[i].assign(w.size(), T(0));
    }
    for (size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double m = beta1_ * static_cast<double>(m_[i][k]) + (1.0 - beta1_) * gk;
      const double v = beta2_ * static_cast<double>(v_[i][k]) + (1.0 - beta2_) * gk * gk;
      m_[i][k] = static_cast<T>(m);
      v_[i][k] = static_cast<T>(v);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
      w[k] = static_cast<T>(static_cast<double>(w[k]) - lr_ * update -
                            lr_ * weight_decay_ * static_cast<double>(w[k]));
    }
  }
}

template <typename T>
IouReport evaluate(RangeViT<T>& model, const std::vector<PointCloud>& scans,
                   const ProjectionSpec& proj, const InferOptions& opts,
                   ConfusionMatrix* cm_out) {
  model.set_training(false);
  ConfusionMatrix cm(model.config().num_classes);
  for (const auto& cloud : scans) {
    RV_CHECK(static_cast<int64_t>(cloud.labels.size()) == cloud.size(),
             "evaluate: scan has no labels");
    const RangeImage image = proj.project(cloud);
    const auto xyz = packed_xyz(cloud);
    const std::vector<int> pred = model.infer_labels(image, xyz, opts);
    for (size_t i = 0; i < pred.size(); ++i)
      if (pred[i] != 0) cm.add(cloud.labels[i], pred[i]);
  }
  if (cm_out) *cm_out = cm;
  return miou(cm);
}

template <typename T>
TrainResult train(RangeViT<T>& model, const TrainDataset& data, const ProjectionSpec& proj,
                  const TrainConfig& cfg, const std::string& out_dir, bool log_progress) {
  cfg.validate();
  RV_CHECK(!data.train.empty(), "training dataset is empty");
  for (const auto& c : data.train)
    RV_CHECK(static_cast<int64_t>(c.labels.size()) == c.size(), "training scan without labels");

  apply_freeze_mask(model.params(), cfg.policy);
  AdamW<T> opt(model.params(), cfg);
  Rng aug_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  const int n = static_cast<int>(data.train.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;

  TrainResult result;
  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir + "/metrics.csv");
    RV_CHECK(csv.good(), "cannot create metrics.csv in " + out_dir);
    csv << "epoch,lr,train_loss,val_miou\n";
  }
  InferOptions val_opts;
  val_opts.stride = cfg.infer_stride;
  val_opts.post =
      model.config().use_refiner ? InferOptions::Post::refiner : InferOptions::Post::knn;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    model.set_training(true);
    // The order/crop stream restarts every epoch, so the visited crops are a
    // fixed function of the seed; augmentation draws run on across epochs.
    Rng data_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<size_t>(data_rng.uniform_int(i + 1))]);

    double loss_sum = 0.0;
    int steps_taken = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      opt.set_lr(lr_at(cfg, epoch + static_cast<double>(s) / steps_per_epoch));
      std::vector<Tensor<T>> parts;
      std::vector<int> labels;
      const int hi = std::min((s + 1) * cfg.batch_size, n);
      for (int b = s * cfg.batch_size; b < hi; ++b) {
        PointCloud cloud = data.train[static_cast<size_t>(order[b])];
        augment(cloud, aug_rng, cfg.augment_prob);
        const RangeImage image = proj.project(cloud);
        CropResult crop = random_crop(image, model.config().crop_w, data_rng);
        const auto xyz = packed_xyz(cloud, crop.point_index);
        parts.push_back(model.forward(crop.image, xyz));
        for (int32_t pid : crop.point_index) labels.push_back(cloud.labels[pid]);
      }
      if (std::none_of(labels.begin(), labels.end(), [](int l) { return l > 0; }))
        continue;  // batch holds nothing scorable
      Tensor<T> logits = parts.size() == 1 ? parts[0] : concat<T>(parts, 0);
      Tensor<T> loss = total_loss(logits, labels, cfg.focal_gamma);
      model.params().zero_grads();
      backward(loss);
      opt.step();
      loss_sum += static_cast<double>(loss.item());
      ++steps_taken;
    }
    const double train_loss =
        steps_taken > 0 ? loss_sum / steps_taken : std::numeric_limits<double>::quiet_NaN();
    result.epoch_loss.push_back(train_loss);
    result.epoch_lr.push_back(lr_at(cfg, epoch));

    double vm = std::numeric_limits<double>::quiet_NaN();
    const bool last = epoch + 1 == cfg.epochs;
    if (!data.val.empty() && (last || (cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0))) {
      const IouReport rep = evaluate(model, data.val, proj, val_opts);
      if (rep.defined) {
        vm = rep.mean;
        if (result.best_epoch < 0 || vm > result.best_miou) {
          result.best_miou = vm;
          result.best_epoch = epoch;
          if (!out_dir.empty())
            write_weight_archive(out_dir + "/weights_best.rvwt", snapshot(model.params()));
        }
      }
    }
    result.val_miou.push_back(vm);

    if (csv.is_open()) {
      csv << (epoch + 1) << ',' << result.epoch_lr.back() << ',' << train_loss << ',';
      if (!std::isnan(vm)) csv << vm;
      csv << '\n';
      csv.flush();
    }
    if (!out_dir.empty())
      write_weight_archive(out_dir + "/weights_last.rvwt", snapshot(model.params()));
    if (log_progress) {
      std::cout << "epoch " << (epoch + 1) << "/" << cfg.epochs << "  lr "
                << result.epoch_lr.back() << "  loss " << train_loss;
      if (!std::isnan(vm)) std::cout << "  val_miou " << vm;
      std::cout << std::endl;
    }
  }
  model.set_training(false);
  return result;
}

template class AdamW<float>;
template class AdamW<double>;
template IouReport evaluate<float>(RangeViT<float>&, const std::vector<PointCloud>&,
                                   const ProjectionSpec&, const InferOptions&, ConfusionMatrix*);
template IouReport evaluate<double>(RangeViT<double>&, const std::vector<PointCloud>&,
                                    const ProjectionSpec&, const InferOptions&, ConfusionMatrix*);
template TrainResult train<float>(RangeViT<float>&, const TrainDataset&, const ProjectionSpec&,
                                  const TrainConfig&, const std::string&, bool);
template TrainResult train<double>(RangeViT<double>&, const TrainDataset&, const ProjectionSpec&,
                                   const TrainConfig&, const std::string&, bool);

}  // namespace rangevit
