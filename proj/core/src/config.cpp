#include "rangevit/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rangevit/data_io.hpp"

namespace rangevit {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw ConfigError(msg, path);
}

std::string type_name(const json& v) {
  switch (v.type()) {
    case json::value_t::object: return "object";
    case json::value_t::array: return "array";
    case json::value_t::string: return "string";
    case json::value_t::boolean: return "bool";
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
    case json::value_t::number_float: return "number";
    case json::value_t::null: return "null";
    default: return "value";
  }
}

// object wrapper that tracks its key path and rejects unknown keys
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object, got " + type_name(j_));
  }

  const std::string& path() const { return path_; }

  // dotted key path; the root contributes no leading dot
  std::string sub(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  bool has(const char* key) const { return j_.contains(key); }

  Node child(const char* key) {
    mark(key);
    if (!j_.contains(key)) fail(sub(key), "missing required object");
    return Node(j_.at(key), sub(key));
  }
  std::optional<Node> opt_child(const char* key) {
    mark(key);
    if (!j_.contains(key)) return std::nullopt;
    return Node(j_.at(key), sub(key));
  }

  template <typename V>
  V get(const char* key, V fallback) {
    mark(key);
    if (!j_.contains(key)) return fallback;
    return convert<V>(j_.at(key), sub(key));
  }
  template <typename V>
  V require(const char* key) {
    mark(key);
    if (!j_.contains(key)) fail(sub(key), "missing required value");
    return convert<V>(j_.at(key), sub(key));
  }

  const json& raw(const char* key) {
    mark(key);
    if (!j_.contains(key)) fail(sub(key), "missing required value");
    return j_.at(key);
  }

  // call after reading everything: any key never asked for is a typo
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) fail(sub(it.key()), "unknown key");
  }

  template <typename V>
  static V convert(const json& v, const std::string& path) {
    try {
      if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) fail(path, "expected a string, got " + type_name(v));
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) fail(path, "expected a bool, got " + type_name(v));
      } else {
        if (!v.is_number()) fail(path, "expected a number, got " + type_name(v));
      }
      return v.get<V>();
    } catch (const json::exception& e) {
      fail(path, e.what());
    }
  }

 private:
  void mark(const char* key) { used_.insert(key); }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

ModelConfig parse_model(Node node) {
  ModelConfig m;
  m.crop_h = node.get("crop_h", m.crop_h);
  m.crop_w = node.get("crop_w", m.crop_w);
  m.patch_h = node.get("patch_h", m.patch_h);
  m.patch_w = node.get("patch_w", m.patch_w);
  m.dim = node.get("dim", m.dim);
  m.depth = node.get("depth", m.depth);
  m.heads = node.get("heads", m.heads);
  m.width_in = node.get("width_in", m.width_in);
  m.width_hidden = node.get("width_hidden", m.width_hidden);
  m.num_classes = node.get("num_classes", m.num_classes);
  m.class_token = node.get("class_token", m.class_token);
  const std::string enc = node.get<std::string>("encoder", "vit");
  if (enc == "vit")
    m.encoder = EncoderKind::vit;
  else if (enc == "identity")
    m.encoder = EncoderKind::identity;
  else
    fail(node.path() + ".encoder", "expected \"vit\" or \"identity\", got \"" + enc + "\"");
  m.use_refiner = node.get("use_refiner", m.use_refiner);
  m.kernel_points = node.get("kernel_points", m.kernel_points);
  m.kp_sigma = node.get("kp_sigma", m.kp_sigma);
  m.max_neighbors = node.get("max_neighbors", m.max_neighbors);
  node.finish();
  return m;
}

TrainConfig parse_train(Node node, uint64_t seed) {
  TrainConfig t;
  t.epochs = node.get("epochs", t.epochs);
  t.batch_size = node.get("batch_size", t.batch_size);
  t.peak_lr = node.get("peak_lr", t.peak_lr);
  t.warmup_epochs = node.get("warmup_epochs", t.warmup_epochs);
  t.beta1 = node.get("beta1", t.beta1);
  t.beta2 = node.get("beta2", t.beta2);
  t.adam_eps = node.get("adam_eps", t.adam_eps);
  t.weight_decay = node.get("weight_decay", t.weight_decay);
  t.augment_prob = node.get("augment_prob", t.augment_prob);
  t.focal_gamma = node.get("focal_gamma", t.focal_gamma);
  if (node.has("policy")) {
    const std::string p = node.get<std::string>("policy", "full");
    try {
      t.policy = parse_policy(p);
    } catch (const Error& e) {
      fail(node.path() + ".policy", e.what());
    }
  }
  t.val_every = node.get("val_every", t.val_every);
  t.seed = seed;
  node.finish();
  return t;
}

ProjectionSpec parse_projection(Node node) {
  ProjectionSpec p;
  const std::string mode = node.get<std::string>("mode", "spherical");
  if (mode == "spherical")
    p.mode = ProjectionSpec::Mode::spherical;
  else if (mode == "unfold")
    p.mode = ProjectionSpec::Mode::unfold;
  else
    fail(node.path() + ".mode", "expected \"spherical\" or \"unfold\", got \"" + mode + "\"");
  p.beams = node.get("beams", p.beams);
  p.width = node.get("width", p.width);
  p.fov.up_deg = node.get("fov_up_deg", p.fov.up_deg);
  p.fov.down_deg = node.get("fov_down_deg", p.fov.down_deg);
  node.finish();
  return p;
}

InferOptions parse_infer(Node node) {
  InferOptions o;
  o.stride = node.get("stride", o.stride);
  const std::string post = node.get<std::string>("post", "refiner");
  if (post == "refiner")
    o.post = InferOptions::Post::refiner;
  else if (post == "knn")
    o.post = InferOptions::Post::knn;
  else
    fail(node.path() + ".post", "expected \"refiner\" or \"knn\", got \"" + post + "\"");
  o.knn_k = node.get("knn_k", o.knn_k);
  o.knn_window = node.get("knn_window", o.knn_window);
  o.knn_sigma = node.get("knn_sigma", o.knn_sigma);
  node.finish();
  return o;
}

SceneSpec parse_scene(Node node) {
  SceneSpec s;
  s.ground = node.get("ground", s.ground);
  s.boxes = node.get("boxes", s.boxes);
  s.cylinders = node.get("cylinders", s.cylinders);
  s.poles = node.get("poles", s.poles);
  s.ground_z = node.get("ground_z", s.ground_z);
  s.enclosure = node.get("enclosure", s.enclosure);
  s.enclosure_radius = node.get("enclosure_radius", s.enclosure_radius);
  s.max_range = node.get("max_range", s.max_range);
  node.finish();
  return s;
}

std::vector<FilePair> parse_file_list(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array, got " + type_name(v));
  std::vector<FilePair> out;
  int i = 0;
  for (const auto& item : v) {
    Node n(item, path + "[" + std::to_string(i) + "]");
    FilePair p;
    p.cloud = n.require<std::string>("cloud");
    p.labels = n.require<std::string>("labels");
    n.finish();
    out.push_back(std::move(p));
    ++i;
  }
  return out;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (projection.beams < 1) fail("projection.beams", "beam count must be positive");
  if (projection.width < 1) fail("projection.width", "width must be positive");
  if (!(projection.fov.up_deg > projection.fov.down_deg))
    fail("projection.fov_up_deg", "vertical field of view is empty");
  if (projection.beams != model.crop_h)
    fail("model.crop_h", "crop height " + std::to_string(model.crop_h) +
                             " must equal the projected beam count " +
                             std::to_string(projection.beams) +
                             " (crops span the full vertical extent)");
  if (projection.width < model.crop_w)
    fail("model.crop_w", "crop width " + std::to_string(model.crop_w) +
                             " exceeds the projected width " + std::to_string(projection.width));
  if (infer.stride < 0) fail("inference.stride", "stride cannot be negative");
  if (infer.stride > model.crop_w)
    fail("inference.stride", "stride " + std::to_string(infer.stride) +
                                 " above the crop width leaves coverage gaps");
  if (infer.post == InferOptions::Post::knn && model.use_refiner)
    fail("inference.post", "knn post-processing requires \"model.use_refiner\": false");
  if (infer.post == InferOptions::Post::refiner && !model.use_refiner)
    fail("inference.post", "refiner post-processing needs \"model.use_refiner\": true");
  if (infer.knn_k < 1) fail("inference.knn_k", "k must be positive");
  if (infer.knn_window < 1 || infer.knn_window % 2 == 0)
    fail("inference.knn_window", "window must be a positive odd number");
  if (!(infer.knn_sigma > 0)) fail("inference.knn_sigma", "sigma must be positive");
  if (scenes && files)
    fail("dataset", "configure exactly one dataset source (scenes or files), not both");
  if (scenes) {
    if (scenes->train_scans < 1) fail("dataset.train_scans", "need at least one training scan");
    if (scenes->val_scans < 0) fail("dataset.val_scans", "negative scan count");
    if (model.num_classes < 4)
      fail("model.num_classes", "synthetic scenes produce classes 1..4; need num_classes >= 4");
  }
  if (files && files->train.empty()) fail("dataset.train", "need at least one training scan");
}

RunConfig parse_run_config_text(const std::string& text) {
  json root_json;
  try {
    root_json = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(e.what(), "<document>");
  }
  Node root(root_json, "");

  RunConfig cfg;
  cfg.seed = root.get<uint64_t>("seed", cfg.seed);
  if (auto m = root.opt_child("model")) cfg.model = parse_model(*m);
  if (auto t = root.opt_child("train"))
    cfg.train = parse_train(*t, cfg.seed);
  else
    cfg.train.seed = cfg.seed;
  if (auto p = root.opt_child("projection")) cfg.projection = parse_projection(*p);
  if (auto i = root.opt_child("inference")) cfg.infer = parse_infer(*i);
  cfg.out_dir = root.get<std::string>("out_dir", "");

  if (auto ds_opt = root.opt_child("dataset")) {
    Node& ds = *ds_opt;
    const std::string kind = ds.require<std::string>("kind");
    if (kind == "scenes") {
      SceneDatasetSpec s;
      s.train_scans = ds.get("train_scans", s.train_scans);
      s.val_scans = ds.get("val_scans", s.val_scans);
      if (auto sc = ds.opt_child("scene")) s.base = parse_scene(*sc);
      cfg.scenes = std::move(s);
    } else if (kind == "files") {
      FileDatasetSpec f;
      f.train = parse_file_list(ds.raw("train"), ds.path() + ".train");
      if (ds.has("val")) f.val = parse_file_list(ds.raw("val"), ds.path() + ".val");
      if (auto cm = ds.opt_child("class_map")) {
        // raw ids come in as string keys
        for (const auto& [key, value] : ds.raw("class_map").items()) {
          uint32_t raw = 0;
          try {
            raw = static_cast<uint32_t>(std::stoul(key));
          } catch (const std::exception&) {
            fail(ds.path() + ".class_map." + key, "class map keys must be numeric");
          }
          f.class_map[raw] =
              Node::convert<int>(value, ds.path() + ".class_map." + key);
        }
      }
      cfg.files = std::move(f);
    } else {
      fail(ds.path() + ".kind", "expected \"scenes\" or \"files\", got \"" + kind + "\"");
    }
    ds.finish();
  }
  root.finish();

  // validation runs of the trainer reuse the inference stride
  cfg.train.infer_stride = cfg.infer.stride;
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw ConfigError("cannot open config file " + path, "<file>");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config_text(ss.str());
}

TrainDataset load_dataset(const RunConfig& cfg) {
  if (!cfg.scenes && !cfg.files)
    throw ConfigError("this command needs a dataset (scenes or files)", "dataset");
  TrainDataset data;
  if (cfg.scenes) {
    SceneSpec base = cfg.scenes->base;
    base.beams = cfg.projection.beams;
    base.width = cfg.projection.width;
    base.fov = cfg.projection.fov;
    const int total = cfg.scenes->train_scans + cfg.scenes->val_scans;
    for (int i = 0; i < total; ++i) {
      SceneSpec s = base;
      s.seed = cfg.seed ^ (0x100000001b3ull * static_cast<uint64_t>(i + 1));
      PointCloud cloud = generate_scene(s);
      if (i < cfg.scenes->train_scans)
        data.train.push_back(std::move(cloud));
      else
        data.val.push_back(std::move(cloud));
    }
    return data;
  }
  const auto& files = *cfg.files;
  const auto& map =
      files.class_map.empty() ? identity_class_map(cfg.model.num_classes) : files.class_map;
  auto load = [&](const FilePair& pair) {
    PointCloud cloud = read_point_cloud(pair.cloud);
    cloud.labels = read_labels(pair.labels, cloud.size(), map);
    return cloud;
  };
  for (const auto& pair : files.train) data.train.push_back(load(pair));
  for (const auto& pair : files.val) data.val.push_back(load(pair));
  return data;
}

}  // namespace rangevit
