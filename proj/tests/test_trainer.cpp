#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rangevit/scene.hpp"
#include "rangevit/trainer.hpp"

using namespace rangevit;

namespace {

ModelConfig tiny_config() {
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
  return cfg;
}

PointCloud tiny_scan(uint64_t seed) {
  SceneSpec spec;
  spec.beams = 8;
  spec.width = 32;
  spec.boxes = 2;
  spec.cylinders = 1;
  spec.poles = 1;
  spec.seed = seed;
  return generate_scene(spec);
}

ProjectionSpec tiny_proj() {
  ProjectionSpec proj;
  proj.beams = 8;
  proj.width = 32;
  return proj;
}

std::vector<float> values_of(const ParamStore<float>& store, const std::string& name) {
  auto v = store.at(name).value();
  return {v.begin(), v.end()};
}

bool same_bits(const std::vector<float>& a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace

TEST_CASE("the learning-rate schedule warms up linearly and decays to zero") {
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.warmup_epochs = 10;
  cfg.peak_lr = 1e-3;
  CHECK(lr_at(cfg, 0) == 0.0);
  CHECK(lr_at(cfg, -2) == 0.0);
  CHECK(lr_at(cfg, 5) == doctest::Approx(0.5e-3).epsilon(1e-12));
  CHECK(lr_at(cfg, 10) == cfg.peak_lr);
  CHECK(lr_at(cfg, 55) == doctest::Approx(0.5e-3).epsilon(1e-12));
  CHECK(lr_at(cfg, 100) == 0.0);
  CHECK(lr_at(cfg, 120) == 0.0);

  cfg.warmup_epochs = 0;
  CHECK(lr_at(cfg, 0) == cfg.peak_lr);
}

TEST_CASE("augmentation is rigid, label-preserving, and draw-stable") {
  const PointCloud original = tiny_scan(3);

  PointCloud untouched = original;
  Rng r0(7);
  augment(untouched, r0, 0.0);
  CHECK(std::equal(untouched.xyzi.begin(), untouched.xyzi.end(), original.xyzi.begin()));

  PointCloud moved = original;
  Rng r1(7);
  augment(moved, r1, 1.0);
  // a fired stage consumes exactly the draws an unfired one does
  CHECK(r0.uniform() == r1.uniform());

  CHECK(moved.labels == original.labels);
  bool any_moved = false;
  const int64_t n = original.size();
  for (int64_t i = 0; i < n; ++i) {
    CHECK(moved.intensity(i) == original.intensity(i));
    if (moved.x(i) != original.x(i)) any_moved = true;
  }
  CHECK(any_moved);

  Rng pick(11);
  for (int t = 0; t < 40; ++t) {
    const int64_t i = static_cast<int64_t>(pick.uniform_int(n));
    const int64_t j = static_cast<int64_t>(pick.uniform_int(n));
    auto dist = [](const PointCloud& c, int64_t a, int64_t b) {
      const double dx = c.x(a) - c.x(b), dy = c.y(a) - c.y(b), dz = c.z(a) - c.z(b);
      return std::sqrt(dx * dx + dy * dy + dz * dz);
    };
    CHECK(std::fabs(dist(moved, i, j) - dist(original, i, j)) < 1e-3);
  }
}

TEST_CASE("random crops are well-formed windows") {
  const PointCloud cloud = tiny_scan(5);
  const RangeImage image = tiny_proj().project(cloud);
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    CropResult crop = random_crop(image, 8, rng);
    CHECK(crop.image.W == 8);
    CHECK(crop.image.H == image.H);
    for (size_t i = 1; i < crop.point_index.size(); ++i)
      CHECK(crop.point_index[i - 1] < crop.point_index[i]);
    if (!crop.point_index.empty()) {
      CHECK(crop.point_index.front() >= 0);
      CHECK(crop.point_index.back() < cloud.size());
    }
  }
  CHECK_THROWS_AS(random_crop(image, image.W + 1, rng), Error);
}

TEST_CASE("the optimizer takes the textbook first step") {
  std::vector<ParamSpec> plan{{"w", {1}, ParamSpec::Init::ones, false}};
  TrainConfig cfg;  // beta 0.9/0.999, eps 1e-8, weight decay 0.01

  ParamStore<double> store;
  store.build(plan, 0);
  AdamW<double> opt(store, cfg);
  store.zero_grads();
  Tensor<double> loss = sum(store.at("w"));
  backward(loss);
  opt.set_lr(0.1);
  opt.step();
  // bias-corrected ratio is exactly 1 on the first step
  const double expected = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.01 * 1.0;
  CHECK(store.at("w").value()[0] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(opt.steps() == 1);
}

TEST_CASE("a zero gradient leaves only the decoupled decay") {
  std::vector<ParamSpec> plan{{"w", {3}, ParamSpec::Init::ones, false}};
  TrainConfig cfg;
  ParamStore<double> store;
  store.build(plan, 0);
  AdamW<double> opt(store, cfg);
  store.zero_grads();
  opt.set_lr(0.1);
  opt.step();
  for (double w : store.at("w").value()) CHECK(w == doctest::Approx(0.999).epsilon(1e-15));
}

TEST_CASE("the optimizer walks a quadratic bowl to the bottom") {
  std::vector<ParamSpec> plan{{"w", {4}, ParamSpec::Init::ones, false}};
  TrainConfig cfg;
  ParamStore<double> store;
  store.build(plan, 0);
  AdamW<double> opt(store, cfg);
  opt.set_lr(0.05);
  for (int i = 0; i < 300; ++i) {
    store.zero_grads();
    Tensor<double> w = store.at("w");
    Tensor<double> loss = sum(mul(w, w));
    backward(loss);
    opt.step();
  }
  for (double w : store.at("w").value()) CHECK(std::fabs(w) < 1e-2);
}

TEST_CASE("freeze policies hold the masked groups bit-still through training") {
  TrainDataset data;
  data.train.push_back(tiny_scan(21));

  TrainConfig tcfg;
  tcfg.epochs = 3;
  tcfg.batch_size = 1;
  tcfg.peak_lr = 1e-2;
  tcfg.warmup_epochs = 0;
  tcfg.augment_prob = 0.0;
  tcfg.val_every = 0;
  tcfg.seed = 4;

  SUBCASE("layer norms only") {
    RangeViT<float> model(tiny_config(), 31);
    const auto attn0 = values_of(model.params(), "encoder.block1.attn.qkv.weight");
    const auto ffn0 = values_of(model.params(), "encoder.block2.ffn.fc1.weight");
    const auto ln0 = values_of(model.params(), "encoder.block1.ln1.gain");
    const auto stem0 = values_of(model.params(), "stem.block1.conv_in.weight");
    tcfg.policy = FinetunePolicy::ln;
    train(model, data, tiny_proj(), tcfg);
    CHECK(same_bits(attn0, model.params().at("encoder.block1.attn.qkv.weight").value()));
    CHECK(same_bits(ffn0, model.params().at("encoder.block2.ffn.fc1.weight").value()));
    CHECK_FALSE(same_bits(ln0, model.params().at("encoder.block1.ln1.gain").value()));
    CHECK_FALSE(same_bits(stem0, model.params().at("stem.block1.conv_in.weight").value()));
  }

  SUBCASE("frozen encoder") {
    RangeViT<float> model(tiny_config(), 31);
    const auto attn0 = values_of(model.params(), "encoder.block1.attn.qkv.weight");
    const auto ln0 = values_of(model.params(), "encoder.ln_final.gain");
    const auto cls0 = values_of(model.params(), "encoder.cls_token");
    const auto pos0 = values_of(model.params(), "encoder.pos_embed");
    tcfg.policy = FinetunePolicy::none;
    train(model, data, tiny_proj(), tcfg);
    CHECK(same_bits(attn0, model.params().at("encoder.block1.attn.qkv.weight").value()));
    CHECK(same_bits(ln0, model.params().at("encoder.ln_final.gain").value()));
    CHECK(same_bits(cls0, model.params().at("encoder.cls_token").value()));
    CHECK_FALSE(same_bits(pos0, model.params().at("encoder.pos_embed").value()));
  }
}

TEST_CASE("a frozen run repeats its epoch loss bit for bit") {
  TrainDataset data;
  data.train.push_back(tiny_scan(33));

  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 1;
  tcfg.peak_lr = 0.0;  // no updates: both epochs see identical weights and crops
  tcfg.warmup_epochs = 0;
  tcfg.augment_prob = 0.0;
  tcfg.val_every = 0;
  tcfg.seed = 8;

  RangeViT<float> model(tiny_config(), 41);
  TrainResult result = train(model, data, tiny_proj(), tcfg);
  REQUIRE(result.epoch_loss.size() == 2);
  CHECK(result.epoch_loss[0] == result.epoch_loss[1]);
}

TEST_CASE("training is reproducible and reduces the loss") {
  TrainDataset data;
  data.train.push_back(tiny_scan(55));
  data.val.push_back(tiny_scan(56));

  TrainConfig tcfg;
  tcfg.epochs = 8;
  tcfg.batch_size = 1;
  tcfg.peak_lr = 3e-3;
  tcfg.warmup_epochs = 1;
  tcfg.augment_prob = 0.0;
  tcfg.val_every = 4;
  tcfg.seed = 12;

  RangeViT<float> a(tiny_config(), 61);
  RangeViT<float> b(tiny_config(), 61);
  TrainResult ra = train(a, data, tiny_proj(), tcfg);
  TrainResult rb = train(b, data, tiny_proj(), tcfg);

  REQUIRE(ra.epoch_loss.size() == 8);
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(ra.best_miou == rb.best_miou);
  CHECK(ra.best_epoch == rb.best_epoch);
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
  CHECK(ra.epoch_lr[0] == lr_at(tcfg, 0));
  CHECK(std::isnan(ra.val_miou[0]));            // epoch 1: no validation
  CHECK_FALSE(std::isnan(ra.val_miou[3]));      // epoch 4: scheduled
  CHECK_FALSE(std::isnan(ra.val_miou.back()));  // last epoch always validates
  CHECK(ra.best_epoch >= 0);
  CHECK(ra.best_miou >= 0.0);
  CHECK(ra.best_miou <= 1.0);
  CHECK_FALSE(a.training());
}

TEST_CASE("training writes metrics and weight archives") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "rv_trainer_artifacts";
  fs::remove_all(dir);

  TrainDataset data;
  data.train.push_back(tiny_scan(71));
  data.val.push_back(tiny_scan(72));

  TrainConfig tcfg;
  tcfg.epochs = 2;
  tcfg.batch_size = 1;
  tcfg.peak_lr = 1e-3;
  tcfg.warmup_epochs = 0;
  tcfg.augment_prob = 0.0;
  tcfg.val_every = 1;
  tcfg.seed = 2;

  RangeViT<float> model(tiny_config(), 77);
  TrainResult result = train(model, data, tiny_proj(), tcfg, dir.string());
  CHECK(result.best_epoch >= 0);
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "weights_last.rvwt"));
  CHECK(fs::exists(dir / "weights_best.rvwt"));

  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "epoch,lr,train_loss,val_miou");
  int rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
  fs::remove_all(dir);
}

TEST_CASE("evaluation scores predictions and leaves the model in eval mode") {
  TrainDataset data;
  std::vector<PointCloud> scans{tiny_scan(81), tiny_scan(82)};

  RangeViT<float> model(tiny_config(), 91);
  model.set_training(true);
  InferOptions opts;
  ConfusionMatrix cm(4);
  IouReport rep = evaluate(model, scans, tiny_proj(), opts, &cm);
  CHECK_FALSE(model.training());
  REQUIRE(rep.defined);
  CHECK(rep.mean >= 0.0);
  CHECK(rep.mean <= 1.0);
  CHECK(cm.total() > 0);

  PointCloud unlabeled = scans[0];
  unlabeled.labels.clear();
  CHECK_THROWS_AS(evaluate(model, {unlabeled}, tiny_proj(), opts), Error);
}

TEST_CASE("training configuration validation flags each bad field") {
  auto broken = [](auto mutate) {
    TrainConfig cfg;
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  };
  broken([](TrainConfig& c) { c.epochs = 0; });
  broken([](TrainConfig& c) { c.batch_size = 0; });
  broken([](TrainConfig& c) { c.peak_lr = -1e-3; });
  broken([](TrainConfig& c) { c.warmup_epochs = -1; });
  broken([](TrainConfig& c) { c.warmup_epochs = c.epochs; });
  broken([](TrainConfig& c) { c.beta1 = 1.0; });
  broken([](TrainConfig& c) { c.beta2 = -0.1; });
  broken([](TrainConfig& c) { c.adam_eps = 0.0; });
  broken([](TrainConfig& c) { c.weight_decay = -0.01; });
  broken([](TrainConfig& c) { c.augment_prob = 1.5; });
  broken([](TrainConfig& c) { c.focal_gamma = -1.0; });
  broken([](TrainConfig& c) { c.val_every = -1; });
  broken([](TrainConfig& c) { c.infer_stride = -1; });
  TrainConfig ok;
  ok.peak_lr = 0.0;  // frozen runs are legal
  ok.validate();
}
