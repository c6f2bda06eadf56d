#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "rangevit/config.hpp"
#include "rangevit/data_io.hpp"
#include "rangevit/gradcheck.hpp"
#include "rangevit/trainer.hpp"

namespace fs = std::filesystem;
using namespace rangevit;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string init;
  std::string resume;
  std::string name_map;
  std::string policy;
  std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, Flags& flags, bool config_required) {
  auto* cfg = cmd->add_option("--config", flags.config, "run configuration JSON");
  if (config_required) cfg->required();
  cmd->add_option("--out", flags.out, "output directory (overrides out_dir)");
  cmd->add_option("--seed", flags.seed, "override the run seed");
}

RunConfig load_config(const Flags& flags) {
  RunConfig cfg = flags.config.empty() ? RunConfig{} : parse_run_config(flags.config);
  if (flags.seed) {
    cfg.seed = *flags.seed;
    cfg.train.seed = *flags.seed;
  }
  if (!flags.out.empty()) cfg.out_dir = flags.out;
  if (!flags.policy.empty()) {
    try {
      cfg.train.policy = parse_policy(flags.policy);
    } catch (const Error& e) {
      throw ConfigError(e.what(), "--policy");
    }
  }
  return cfg;
}

std::string need_out(const RunConfig& cfg) {
  if (cfg.out_dir.empty())
    throw ConfigError("this command writes artifacts; set out_dir or pass --out", "out_dir");
  fs::create_directories(cfg.out_dir);
  return cfg.out_dir;
}

std::string class_name(const RunConfig& cfg, int cls) {
  static const char* kSceneNames[] = {"ignore", "ground", "box", "cylinder", "pole"};
  if (cfg.scenes && cls >= 0 && cls <= 4) return kSceneNames[cls];
  return "class_" + std::to_string(cls);
}

void load_into(RangeViT<float>& model, const Flags& flags, FinetunePolicy policy) {
  if (!flags.init.empty() && !flags.resume.empty())
    throw ConfigError("--init and --resume are mutually exclusive", "--init");
  if (!flags.name_map.empty() && flags.init.empty())
    throw ConfigError("--map needs an --init archive to import from", "--map");
  const std::string& path = !flags.init.empty() ? flags.init : flags.resume;
  if (path.empty()) return;
  const WeightArchive archive = read_weight_archive(path);
  if (!flags.name_map.empty()) {
    const auto report = load_pretrained(model, archive, read_name_map(flags.name_map), policy);
    std::cout << "imported " << report.matched.size() << " tensors, resampled "
              << report.resampled.size() << ", skipped " << report.skipped.size() << "\n";
  } else {
    load_weights(model.params(), archive);
    std::cout << "loaded " << archive.entries.size() << " tensors from " << path << "\n";
  }
}

int cmd_project(const Flags& flags) {
  const RunConfig cfg = load_config(flags);
  const TrainDataset data = load_dataset(cfg);
  const std::string out = need_out(cfg);

  auto emit = [&](const PointCloud& cloud, const std::string& stem) {
    const RangeImage image = cfg.projection.project(cloud);
    write_range_image(out + "/" + stem + ".rvri", image);
    write_pgm_preview(out + "/" + stem + ".pgm", image);
    int64_t occupied = 0;
    for (uint8_t o : image.occupancy) occupied += o;
    std::cout << stem << ": " << image.H << "x" << image.W << ", " << cloud.size() << " points, "
              << occupied << " occupied pixels, " << image.collisions << " collisions, "
              << image.skipped_origin << " skipped\n";
  };
  for (size_t i = 0; i < data.train.size(); ++i) emit(data.train[i], "train_" + std::to_string(i));
  for (size_t i = 0; i < data.val.size(); ++i) emit(data.val[i], "val_" + std::to_string(i));
  return 0;
}

int cmd_params(const Flags& flags) {
  const RunConfig cfg = load_config(flags);
  const auto groups = count_params_by_group(cfg.model);
  int64_t total = 0;
  for (const auto& [name, count] : groups) {
    std::printf("%-10s %12lld\n", name.c_str(), static_cast<long long>(count));
    total += count;
  }
  std::printf("%-10s %12lld\n", "total", static_cast<long long>(total));
  std::printf("tokens per crop: %d\n", cfg.model.token_count());
  return 0;
}

int cmd_gradcheck(const Flags& flags) {
  uint64_t seed = 12345;
  if (!flags.config.empty()) seed = load_config(flags).seed;
  if (flags.seed) seed = *flags.seed;

  const auto results = run_gradient_suite(seed);
  for (const auto& r : results)
    std::printf("%-28s max rel err %.3e  (tol %.0e, %lld coords)  %s\n", r.name.c_str(),
                r.max_rel_err, r.tolerance, static_cast<long long>(r.coords_checked),
                r.passed ? "ok" : "FAIL");
  if (!all_passed(results)) throw Error("gradient checks failed");
  std::cout << "all " << results.size() << " gradient checks passed\n";
  return 0;
}

int cmd_train(const Flags& flags) {
  const RunConfig cfg = load_config(flags);
  const TrainDataset data = load_dataset(cfg);
  const std::string out = need_out(cfg);

  RangeViT<float> model(cfg.model, cfg.seed);
  load_into(model, flags, cfg.train.policy);

  const TrainResult result = train(model, data, cfg.projection, cfg.train, out, true);
  std::cout << "final train loss " << result.epoch_loss.back();
  if (result.best_epoch >= 0)
    std::cout << ", best val mIoU " << result.best_miou << " at epoch " << (result.best_epoch + 1);
  std::cout << "\nartifacts in " << out << "\n";
  return 0;
}

int cmd_eval(const Flags& flags) {
  const RunConfig cfg = load_config(flags);
  if (flags.init.empty()) throw ConfigError("eval needs a weight archive (--init)", "--init");
  const TrainDataset data = load_dataset(cfg);
  const std::string out = need_out(cfg);

  RangeViT<float> model(cfg.model, cfg.seed);
  load_into(model, flags, cfg.train.policy);

  const auto& scans = data.val.empty() ? data.train : data.val;
  ConfusionMatrix cm(cfg.model.num_classes);
  const IouReport report = evaluate(model, scans, cfg.projection, cfg.infer, &cm);
  if (!report.defined) throw Error("no scored points: every prediction or label was 'ignore'");

  std::ofstream csv(out + "/eval.csv");
  RV_CHECK(csv.good(), "cannot create eval.csv in " + out);
  csv << "class_id,name,iou\n";
  for (int c = 1; c <= cfg.model.num_classes; ++c) {
    csv << c << ',' << class_name(cfg, c) << ',';
    if (report.valid[static_cast<size_t>(c - 1)]) csv << report.per_class[static_cast<size_t>(c - 1)];
    csv << '\n';
  }
  csv << "mean,," << report.mean << '\n';
  std::cout << "mean IoU " << report.mean << " over " << scans.size() << " scans ("
            << cm.total() << " scored points), written to " << out << "/eval.csv\n";
  return 0;
}

int cmd_infer(const Flags& flags) {
  const RunConfig cfg = load_config(flags);
  if (flags.init.empty()) throw ConfigError("infer needs a weight archive (--init)", "--init");
  const TrainDataset data = load_dataset(cfg);
  const std::string out = need_out(cfg);

  RangeViT<float> model(cfg.model, cfg.seed);
  load_into(model, flags, cfg.train.policy);
  model.set_training(false);

  const auto& scans = data.val.empty() ? data.train : data.val;
  for (size_t i = 0; i < scans.size(); ++i) {
    const RangeImage image = cfg.projection.project(scans[i]);
    const auto labels = model.infer_labels(image, packed_xyz(scans[i]), cfg.infer);
    const std::string path = out + "/pred_" + std::to_string(i) + ".label";
    write_labels(path, labels);
    std::cout << path << ": " << labels.size() << " labels\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Range-image vision-transformer LiDAR segmentation toolkit"};
  app.require_subcommand(1);
  Flags flags;

  auto* project = app.add_subcommand("project", "project the dataset to range images + previews");
  add_common(project, flags, true);

  auto* trainc = app.add_subcommand("train", "train a model and write archives + metrics");
  add_common(trainc, flags, true);
  trainc->add_option("--init", flags.init, "weight archive to start from");
  trainc->add_option("--resume", flags.resume, "weight archive to continue from");
  trainc->add_option("--map", flags.name_map, "name map for pretrained encoder import");
  trainc->add_option("--policy", flags.policy, "fine-tune policy: full|none|LN|LN+ATTN|LN+FFN");

  auto* evalc = app.add_subcommand("eval", "score a trained model, write eval.csv");
  add_common(evalc, flags, true);
  evalc->add_option("--init", flags.init, "weight archive to evaluate")->required();

  auto* inferc = app.add_subcommand("infer", "write per-point label predictions");
  add_common(inferc, flags, true);
  inferc->add_option("--init", flags.init, "weight archive to run")->required();

  auto* gradc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gradc, flags, false);

  auto* paramsc = app.add_subcommand("params", "parameter count breakdown");
  add_common(paramsc, flags, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (project->parsed()) return cmd_project(flags);
    if (trainc->parsed()) return cmd_train(flags);
    if (evalc->parsed()) return cmd_eval(flags);
    if (inferc->parsed()) return cmd_infer(flags);
    if (gradc->parsed()) return cmd_gradcheck(flags);
    if (paramsc->parsed()) return cmd_params(flags);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
