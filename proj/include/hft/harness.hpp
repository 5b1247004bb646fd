#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hft/checkpoint.hpp"
#include "hft/dataset.hpp"
#include "hft/graph.hpp"
#include "hft/losses.hpp"
#include "hft/metrics.hpp"
#include "hft/net.hpp"
#include "hft/optim.hpp"
#include "hft/rng.hpp"
#include "hft/synthworld.hpp"

namespace hft {

// Auxiliary weight on the per-branch semantic terms in hybrid mode; the main
// head carries full weight.
inline constexpr double kAuxSemanticWeight = 0.5;

namespace harnessdetail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
  if (!j.is_object()) throw ConfigError("config: " + context + " must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + context);
  }
}

}  // namespace harnessdetail

inline BevGridSpec default_desk_grid() {
  BevGridSpec g;
  g.depth_cells = 64;
  g.lateral_cells = 64;
  g.cell_size = 0.5;
  g.z_min = 1.0;
  g.z_max = 33.0;
  g.extents = {{1.0, 11.5}, {11.5, 22.0}, {22.0, 33.0}};
  return g;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string dataset;
  std::string out_dir;
  std::uint64_t seed = 0;
  int epochs = 30;
  int batch_size = 8;
  std::string precision = "f32";
  BevGridSpec grid = default_desk_grid();
  ModelConfig model;
  LossWeights loss;
  SchemeConfig scheme{MlScheme::OutputSim, MlDistance::L2};
  OptimizerConfig optimizer;
  double hflip_prob = 0.5;
  bool photometric = false;  // optional brightness jitter

  void validate() const {
    if (epochs <= 0) throw ConfigError("config: epochs must be positive");
    if (batch_size <= 0) throw ConfigError("config: batch_size must be positive");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("config: precision must be f32 or f64");
    if (hflip_prob < 0 || hflip_prob > 1) throw ConfigError("config: hflip_prob must be in [0,1]");
    for (int e : optimizer.decay_epochs)
      if (e >= epochs) throw ConfigError("config: decay epochs must precede the last epoch");
    optimizer.validate();
    loss.validate();
    grid.validate();
    if (model.mode != Mode::Hybrid && scheme.scheme != MlScheme::None)
      throw ConfigError("config: mutual-learning schemes need both branches (mode hybrid)");
  }

  static RunConfig from_json(const nlohmann::json& j) {
    harnessdetail::check_keys(j, {"dataset", "out_dir", "seed", "epochs", "batch_size", "precision",
                                  "grid", "model", "loss", "scheme", "optimizer", "augment"},
                              "run config");
    RunConfig c;
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("precision")) c.precision = j.at("precision").get<std::string>();
    if (j.contains("grid")) c.grid = grid_from_json(j.at("grid"));
    if (j.contains("model")) {
      const auto& m = j.at("model");
      harnessdetail::check_keys(m,
                                {"mode", "bev_channels", "global_hidden", "decoder_channels",
                                 "relation", "encoder_channels", "strides", "num_classes",
                                 "image_h", "image_w"},
                                "model");
      if (m.contains("mode")) c.model.mode = mode_from_string(m.at("mode").get<std::string>());
      if (m.contains("bev_channels")) c.model.bev_channels = m.at("bev_channels").get<int>();
      if (m.contains("global_hidden")) c.model.global_hidden = m.at("global_hidden").get<int>();
      if (m.contains("decoder_channels"))
        c.model.decoder_channels = m.at("decoder_channels").get<int>();
      if (m.contains("relation")) c.model.relation = m.at("relation").get<bool>();
      if (m.contains("encoder_channels"))
        c.model.encoder_channels = m.at("encoder_channels").get<std::vector<int>>();
      if (m.contains("strides")) c.model.strides = m.at("strides").get<std::vector<int>>();
      if (m.contains("num_classes")) c.model.num_classes = m.at("num_classes").get<int>();
      if (m.contains("image_h")) c.model.image_h = m.at("image_h").get<int>();
      if (m.contains("image_w")) c.model.image_w = m.at("image_w").get<int>();
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      harnessdetail::check_keys(l, {"lambda1", "lambda2", "alpha", "beta", "class_weights"}, "loss");
      if (l.contains("lambda1")) c.loss.lambda1 = l.at("lambda1").get<double>();
      if (l.contains("lambda2")) c.loss.lambda2 = l.at("lambda2").get<double>();
      if (l.contains("alpha")) c.loss.alpha = l.at("alpha").get<double>();
      if (l.contains("beta")) c.loss.beta = l.at("beta").get<double>();
      if (l.contains("class_weights"))
        c.loss.class_weights = l.at("class_weights").get<std::vector<double>>();
    }
    if (j.contains("scheme")) {
      const auto& s = j.at("scheme");
      harnessdetail::check_keys(s, {"scheme", "distance"}, "scheme");
      if (s.contains("scheme")) c.scheme.scheme = scheme_from_string(s.at("scheme").get<std::string>());
      if (s.contains("distance"))
        c.scheme.distance = distance_from_string(s.at("distance").get<std::string>());
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      harnessdetail::check_keys(o,
                                {"algorithm", "learning_rate", "beta1", "beta2", "eps",
                                 "weight_decay", "clip_max_norm", "decay_epochs", "decay_factor"},
                                "optimizer");
      if (o.contains("algorithm")) c.optimizer.algorithm = o.at("algorithm").get<std::string>();
      if (o.contains("learning_rate")) c.optimizer.learning_rate = o.at("learning_rate").get<double>();
      if (o.contains("beta1")) c.optimizer.beta1 = o.at("beta1").get<double>();
      if (o.contains("beta2")) c.optimizer.beta2 = o.at("beta2").get<double>();
      if (o.contains("eps")) c.optimizer.eps = o.at("eps").get<double>();
      if (o.contains("weight_decay")) c.optimizer.weight_decay = o.at("weight_decay").get<double>();
      if (o.contains("clip_max_norm")) c.optimizer.clip_max_norm = o.at("clip_max_norm").get<double>();
      if (o.contains("decay_epochs"))
        c.optimizer.decay_epochs = o.at("decay_epochs").get<std::vector<int>>();
      if (o.contains("decay_factor")) c.optimizer.decay_factor = o.at("decay_factor").get<double>();
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      harnessdetail::check_keys(a, {"hflip_prob", "photometric"}, "augment");
      if (a.contains("hflip_prob")) c.hflip_prob = a.at("hflip_prob").get<double>();
      if (a.contains("photometric")) c.photometric = a.at("photometric").get<bool>();
    }
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dataset"] = dataset;
    j["out_dir"] = out_dir;
    j["seed"] = seed;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["precision"] = precision;
    j["grid"] = grid_to_json(grid);
    j["model"] = {{"mode", to_string(model.mode)},
                  {"bev_channels", model.bev_channels},
                  {"global_hidden", model.global_hidden},
                  {"decoder_channels", model.decoder_channels},
                  {"relation", model.relation},
                  {"encoder_channels", model.encoder_channels},
                  {"strides", model.strides},
                  {"num_classes", model.num_classes},
                  {"image_h", model.image_h},
                  {"image_w", model.image_w}};
    j["loss"] = {{"lambda1", loss.lambda1},
                 {"lambda2", loss.lambda2},
                 {"alpha", loss.alpha},
                 {"beta", loss.beta},
                 {"class_weights", loss.class_weights}};
    j["scheme"] = {{"scheme", to_string(scheme.scheme)}, {"distance", to_string(scheme.distance)}};
    j["optimizer"] = {{"algorithm", optimizer.algorithm},
                      {"learning_rate", optimizer.learning_rate},
                      {"beta1", optimizer.beta1},
                      {"beta2", optimizer.beta2},
                      {"eps", optimizer.eps},
                      {"weight_decay", optimizer.weight_decay},
                      {"clip_max_norm", optimizer.clip_max_norm},
                      {"decay_epochs", optimizer.decay_epochs},
                      {"decay_factor", optimizer.decay_factor}};
    j["augment"] = {{"hflip_prob", hflip_prob}, {"photometric", photometric}};
    return j;
  }
};

// ---------------------------------------------------------------------------
// Dataset generation config (gen-data subcommand)
// ---------------------------------------------------------------------------

struct GenConfig {
  int num_classes = 4;
  int image_h = 128;
  int image_w = 128;
  CameraIntrinsics intr{128.0, 128.0, 64.0, 64.0, 1.5};
  BevGridSpec grid = default_desk_grid();
  double elevated_prob = 0.25;
  double elevation_min = 0.9;
  double elevation_max = 1.1;
  int num_train = 200;
  int num_val = 50;
  std::map<std::string, std::pair<int, int>> count_overrides;

  static GenConfig from_json(const nlohmann::json& j) {
    harnessdetail::check_keys(j,
                              {"num_classes", "image_h", "image_w", "intrinsics", "grid",
                               "elevated_prob", "elevation_min", "elevation_max", "num_train",
                               "num_val", "counts"},
                              "gen config");
    GenConfig c;
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
    if (j.contains("image_h")) c.image_h = j.at("image_h").get<int>();
    if (j.contains("image_w")) c.image_w = j.at("image_w").get<int>();
    if (j.contains("intrinsics")) c.intr = intrinsics_from_json(j.at("intrinsics"));
    if (j.contains("grid")) c.grid = grid_from_json(j.at("grid"));
    if (j.contains("elevated_prob")) c.elevated_prob = j.at("elevated_prob").get<double>();
    if (j.contains("elevation_min")) c.elevation_min = j.at("elevation_min").get<double>();
    if (j.contains("elevation_max")) c.elevation_max = j.at("elevation_max").get<double>();
    if (j.contains("num_train")) c.num_train = j.at("num_train").get<int>();
    if (j.contains("num_val")) c.num_val = j.at("num_val").get<int>();
    if (j.contains("counts")) {
      for (const auto& [name, range] : j.at("counts").items())
        c.count_overrides[name] = {range.at(0).get<int>(), range.at(1).get<int>()};
    }
    return c;
  }

  static GenConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  SceneConfig scene_config() const {
    SceneConfig sc = num_classes == 4 ? SceneConfig::default4() : SceneConfig::with_classes(num_classes);
    sc.elevated_prob = elevated_prob;
    sc.elevation_min = elevation_min;
    sc.elevation_max = elevation_max;
    sc.x_half = grid.lateral_cells * grid.cell_size / 2.0;
    sc.z_near = grid.z_min;
    sc.z_far = grid.z_max;
    for (auto& cls : sc.classes) {
      auto it = count_overrides.find(cls.name);
      if (it != count_overrides.end()) {
        cls.count_min = it->second.first;
        cls.count_max = it->second.second;
      }
    }
    sc.validate();
    return sc;
  }
};

inline void generate_dataset(const GenConfig& cfg, const std::string& out_dir, std::uint64_t seed) {
  const SceneConfig sc = cfg.scene_config();
  DatasetMeta meta;
  meta.image_h = cfg.image_h;
  meta.image_w = cfg.image_w;
  for (const auto& c : sc.classes) meta.class_names.push_back(c.name);
  meta.static_ids = sc.static_ids();
  meta.dynamic_ids = sc.dynamic_ids();
  meta.grid = cfg.grid;

  std::vector<SampleRecord> samples;
  const int total = cfg.num_train + cfg.num_val;
  samples.reserve(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) {
    std::uint64_t x = seed + 0x9E3779B97f4A7C15ULL * static_cast<std::uint64_t>(i + 1);
    const std::uint64_t scene_seed = Rng::splitmix64(x);
    auto s = make_sample(i, scene_seed, sc, cfg.grid, cfg.intr, cfg.image_h, cfg.image_w);
    s.split = i < cfg.num_train ? "train" : "val";
    samples.push_back(std::move(s));
  }
  write_dataset(samples, out_dir, meta);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

template <class T>
struct SampleTensors {
  int id = 0;
  Tensor<T> image;                // [3, H, W]
  Tensor<std::uint8_t> labels;    // [C, Z, W]
  Tensor<std::uint8_t> validity;  // [Z, W]
  CameraIntrinsics intr;
};

template <class T>
SampleTensors<T> sample_tensors(const SampleRecord& rec, int num_classes) {
  SampleTensors<T> s;
  s.id = rec.id;
  s.image = image_to_tensor<T>(rec.fv);
  s.labels = labels_from_bits(rec.bev_bits, num_classes);
  s.validity = validity_tensor(rec.validity);
  s.intr = rec.intr;
  return s;
}

// Horizontal flip: mirrors the image columns, the BEV lateral axis of labels
// and validity. Consistent with the projection when cx = image_w / 2.
template <class T>
SampleTensors<T> hflip(const SampleTensors<T>& s) {
  SampleTensors<T> f = s;
  const int w = s.image.dim(2);
  for (int c = 0; c < s.image.dim(0); ++c)
    for (int i = 0; i < s.image.dim(1); ++i)
      for (int j = 0; j < w; ++j) f.image.at3(c, i, j) = s.image.at3(c, i, w - 1 - j);
  const int bw = s.labels.dim(2);
  for (int c = 0; c < s.labels.dim(0); ++c)
    for (int zi = 0; zi < s.labels.dim(1); ++zi)
      for (int xi = 0; xi < bw; ++xi) f.labels.at3(c, zi, xi) = s.labels.at3(c, zi, bw - 1 - xi);
  for (int zi = 0; zi < s.validity.dim(0); ++zi)
    for (int xi = 0; xi < bw; ++xi) f.validity.at2(zi, xi) = s.validity.at2(zi, bw - 1 - xi);
  return f;
}

struct LossBreakdown {
  double total = 0, semantic = 0, uncertainty = 0, mutual = 0;
  bool has_mutual = false;
};

// Assembles the total loss for one sample. Semantic and uncertainty terms are
// evaluated on frustum-valid cells only; branch heads receive auxiliary
// semantic supervision in hybrid mode.
template <class T>
std::pair<Var, LossBreakdown> sample_loss(Graph<T>& g, HftModel<T>& model,
                                          const SampleTensors<T>& s, const LossWeights& lw,
                                          const SchemeConfig& scheme, Mode mode) {
  auto out = model.forward(g, s.image, s.intr, mode);

  const int classes = s.labels.dim(0);
  const std::int64_t cells = s.validity.numel();
  std::vector<std::int64_t> valid_cells;
  for (std::int64_t k = 0; k < cells; ++k)
    if (s.validity[k]) valid_cells.push_back(k);
  const int n_valid = static_cast<int>(valid_cells.size());

  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<size_t>(classes) * valid_cells.size());
  Tensor<T> labels({classes, n_valid});
  for (int c = 0; c < classes; ++c)
    for (int k = 0; k < n_valid; ++k) {
      idx.push_back(static_cast<std::int64_t>(c) * cells + valid_cells[static_cast<size_t>(k)]);
      labels.at2(c, k) = static_cast<T>(s.labels[idx.back()]);
    }
  auto gather_valid = [&](Var scores) { return g.reshape(g.gather(scores, idx), {classes, n_valid}); };

  LossBreakdown bd;
  Var ls = semantic_loss(g, gather_valid(out.scores), labels, lw.class_weights).loss;
  if (mode == Mode::Hybrid) {
    Var aux = g.add(semantic_loss(g, gather_valid(*out.geo_scores), labels, lw.class_weights).loss,
                    semantic_loss(g, gather_valid(*out.glo_scores), labels, lw.class_weights).loss);
    ls = g.add(ls, g.scale(aux, static_cast<T>(kAuxSemanticWeight)));
  }

  Var lu = [&] {
    if (mode == Mode::Hybrid) {
      Var both = g.add(uncertainty_loss(g, gather_valid(*out.geo_scores)),
                       uncertainty_loss(g, gather_valid(*out.glo_scores)));
      return g.scale(both, T(0.5));
    }
    return uncertainty_loss(g, gather_valid(out.scores));
  }();

  std::optional<Var> lm;
  if (mode == Mode::Hybrid && scheme.scheme != MlScheme::None) {
    BranchFeatures<T> geo{out.geo_features->concat, out.geo_features->subs};
    BranchFeatures<T> glo{out.glo_features->concat, out.glo_features->subs};
    lm = scheme_mutual_loss(g, scheme, std::move(geo), std::move(glo), *out.geo_scores,
                            *out.glo_scores, lw);
  }

  Var total = total_loss(g, ls, lu, lm, lw);
  bd.semantic = static_cast<double>(g.val(ls)[0]);
  bd.uncertainty = static_cast<double>(g.val(lu)[0]);
  bd.mutual = lm ? static_cast<double>(g.val(*lm)[0]) : 0.0;
  bd.has_mutual = lm.has_value();
  bd.total = static_cast<double>(g.val(total)[0]);
  return {total, bd};
}

// Per-class relative frequencies over the frustum-valid cells of a split.
inline std::vector<double> class_frequencies(const std::vector<SampleRecord>& records,
                                             int num_classes) {
  std::vector<std::int64_t> pos(static_cast<size_t>(num_classes), 0);
  std::int64_t valid_total = 0;
  for (const auto& rec : records) {
    for (int zi = 0; zi < rec.bev_bits.height; ++zi)
      for (int xi = 0; xi < rec.bev_bits.width; ++xi) {
        if (!rec.validity.at(zi, xi, 0)) continue;
        ++valid_total;
        const std::uint16_t bits = rec.bev_bits.at(zi, xi);
        for (int c = 0; c < num_classes; ++c)
          if ((bits >> c) & 1u) ++pos[static_cast<size_t>(c)];
      }
  }
  std::vector<double> freq(static_cast<size_t>(num_classes), 0.0);
  if (valid_total > 0)
    for (int c = 0; c < num_classes; ++c)
      freq[static_cast<size_t>(c)] = static_cast<double>(pos[static_cast<size_t>(c)]) /
                                     static_cast<double>(valid_total);
  return freq;
}

template <class T>
MetricReport evaluate_model(HftModel<T>& model, const std::vector<SampleTensors<T>>& samples,
                            const std::vector<int>& static_ids, const std::vector<int>& dynamic_ids) {
  MetricAccumulator acc(model.config().num_classes);
  for (const auto& s : samples) {
    Graph<T> g;
    auto out = model.forward(g, s.image, s.intr);
    acc.add_sample(g.val(out.scores), s.labels, s.validity);
  }
  return acc.report(static_ids, dynamic_ids);
}

struct TrainResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  double best_val_miou = -1.0;
  MetricReport best_report;
  std::vector<std::string> warnings;
};

namespace harnessdetail {

inline std::string jsonl(const nlohmann::json& j) { return j.dump() + "\n"; }

template <class T>
CheckpointData make_checkpoint(const RunConfig& cfg, HftModel<T>& model, AdamW<T>& opt,
                               const Rng& rng_data, const Rng& rng_aug, int epoch,
                               std::uint64_t step, double best) {
  CheckpointData d;
  d.config_json = cfg.to_json().dump();
  d.epoch = static_cast<std::uint32_t>(epoch);
  d.global_step = step;
  d.best_val_miou = best;
  d.optimizer_step = static_cast<std::uint64_t>(opt.step_count());
  RngStateRecord r1{"data_order", {}}, r2{"augment", {}};
  for (int i = 0; i < 4; ++i) {
    r1.state[i] = rng_data.state()[i];
    r2.state[i] = rng_aug.state()[i];
  }
  d.rng_states = {r1, r2};
  pack_params(model.params(), d);
  return d;
}

}  // namespace harnessdetail

// Fills image/class fields of the model config from the dataset manifest and
// checks the grid matches.
inline void reconcile_with_dataset(RunConfig& cfg, const Dataset& ds) {
  cfg.model.image_h = ds.meta().image_h;
  cfg.model.image_w = ds.meta().image_w;
  cfg.model.num_classes = ds.num_classes();
  if (!(cfg.grid == ds.meta().grid))
    throw ConfigError("config: grid spec does not match the dataset manifest");
}

template <class T>
TrainResult train_impl(RunConfig cfg, const std::string& resume_path = "") {
  const Dataset ds = Dataset::open(cfg.dataset);
  reconcile_with_dataset(cfg, ds);
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  const auto train_idx = ds.split_indices("train");
  const auto val_idx = ds.split_indices("val");
  if (train_idx.empty()) throw DataError("train: empty training split");

  // Cache decoded samples; datasets are desk-scale by construction.
  std::vector<SampleRecord> train_records, val_records;
  for (int i : train_idx) train_records.push_back(ds.load(i));
  for (int i : val_idx) val_records.push_back(ds.load(i));

  TrainResult result;
  if (cfg.loss.class_weights.empty()) {
    const auto freqs = class_frequencies(train_records, ds.num_classes());
    auto cw = compute_class_weights(freqs);
    if (cw.any_excluded)
      for (size_t c = 0; c < cw.excluded.size(); ++c)
        if (cw.excluded[c])
          result.warnings.push_back("class '" + ds.meta().class_names[c] +
                                    "' has zero frequency; excluded from the semantic loss");
    cfg.loss.class_weights = cw.weights;
  }
  if (static_cast<int>(cfg.loss.class_weights.size()) != ds.num_classes())
    throw ConfigError("config: class weight count does not match the dataset");

  std::vector<SampleTensors<T>> train_samples, val_samples;
  for (const auto& r : train_records) train_samples.push_back(sample_tensors<T>(r, ds.num_classes()));
  for (const auto& r : val_records) val_samples.push_back(sample_tensors<T>(r, ds.num_classes()));
  train_records.clear();
  val_records.clear();

  HftModel<T> model(cfg.model, cfg.grid, cfg.seed);
  AdamW<T> opt(cfg.optimizer);
  Rng rng_data = substream(cfg.seed, "data_order");
  Rng rng_aug = substream(cfg.seed, "augment");

  int start_epoch = 0;
  std::uint64_t global_step = 0;
  double best = -1.0;
  if (!resume_path.empty()) {
    const auto d = load_checkpoint(resume_path);
    unpack_params(d, model.params());
    opt.set_step_count(static_cast<std::int64_t>(d.optimizer_step));
    for (const auto& r : d.rng_states) {
      if (r.name == "data_order") rng_data.set_state(r.state);
      if (r.name == "augment") rng_aug.set_state(r.state);
    }
    start_epoch = static_cast<int>(d.epoch);
    global_step = d.global_step;
    best = d.best_val_miou;
  }

  const auto log_mode = start_epoch == 0 ? std::ios::trunc : std::ios::app;
  std::ofstream train_log(cfg.out_dir + "/train_log.jsonl", log_mode);
  std::ofstream val_log(cfg.out_dir + "/val_log.jsonl", log_mode);
  if (!train_log || !val_log) throw DataError("train: cannot write logs in " + cfg.out_dir);
  if (start_epoch == 0) {
    std::ofstream cfg_out(cfg.out_dir + "/config.json", std::ios::trunc);
    cfg_out << cfg.to_json().dump(2) << "\n";
  }

  const auto params = model.params().all();
  const std::string best_path = cfg.out_dir + "/best.hftc";
  const std::string last_path = cfg.out_dir + "/last.hftc";

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    // Deterministic shuffle from the data-order substream.
    std::vector<int> order(train_samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng_data.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    const double lr = cfg.optimizer.lr_at_epoch(epoch);
    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
      const int batch_n = static_cast<int>(b1 - b0);
      model.params().zero_grad();
      LossBreakdown sum;
      std::vector<int> batch_ids;
      try {
        for (size_t k = b0; k < b1; ++k) {
          const auto& base = train_samples[static_cast<size_t>(order[k])];
          batch_ids.push_back(base.id);
          const bool flip = rng_aug.bernoulli(cfg.hflip_prob);
          SampleTensors<T> s = flip ? hflip(base) : base;
          if (cfg.photometric) {
            const T gain = static_cast<T>(rng_aug.uniform(0.9, 1.1));
            for (auto& x : s.image.data) x = std::min(T(1), x * gain);
          }
          Graph<T> g;
          auto [total, bd] = sample_loss(g, model, s, cfg.loss, cfg.scheme, cfg.model.mode);
          g.backward(g.scale(total, T(1) / static_cast<T>(batch_n)));
          sum.total += bd.total;
          sum.semantic += bd.semantic;
          sum.uncertainty += bd.uncertainty;
          sum.mutual += bd.mutual;
          sum.has_mutual = sum.has_mutual || bd.has_mutual;
        }
      } catch (const NumericalError& e) {
        nlohmann::json abort;
        abort["step"] = global_step;
        abort["epoch"] = epoch;
        abort["batch_ids"] = batch_ids;
        abort["error"] = e.what();
        std::ofstream(cfg.out_dir + "/abort.json", std::ios::trunc) << abort.dump(2) << "\n";
        throw NumericalError(std::string(e.what()) + " (step " + std::to_string(global_step) +
                             ", see abort.json)");
      }
      const double pre_norm = clip_global_norm(params, cfg.optimizer.clip_max_norm);
      opt.step(params, lr);
      ++global_step;

      nlohmann::json rec;
      rec["step"] = global_step;
      rec["epoch"] = epoch;
      rec["ls"] = sum.semantic / batch_n;
      rec["lu"] = sum.uncertainty / batch_n;
      rec["lm"] = sum.mutual / batch_n;
      rec["ltot"] = sum.total / batch_n;
      rec["lr"] = lr;
      rec["grad_norm"] = pre_norm;
      rec["grad_norm_clipped"] = std::min(pre_norm, cfg.optimizer.clip_max_norm);
      rec["batch"] = batch_ids;
      train_log << harnessdetail::jsonl(rec);
    }

    MetricReport report;
    if (!val_samples.empty())
      report = evaluate_model(model, val_samples, ds.meta().static_ids, ds.meta().dynamic_ids);
    nlohmann::json vrec;
    vrec["epoch"] = epoch;
    vrec["lr"] = lr;
    vrec["val_miou"] = report.miou;
    vrec["val_map"] = report.map;
    vrec["val_bamiou"] = report.bamiou;
    val_log << harnessdetail::jsonl(vrec);

    const auto d = harnessdetail::make_checkpoint(cfg, model, opt, rng_data, rng_aug, epoch + 1,
                                                  global_step, std::max(best, report.miou));
    save_checkpoint(last_path, d);
    if (report.miou > best) {
      best = report.miou;
      save_checkpoint(best_path, d);
      result.best_report = report;
    }
  }

  result.best_checkpoint = fs::exists(best_path) ? best_path : last_path;
  result.last_checkpoint = last_path;
  result.best_val_miou = best;
  return result;
}

inline TrainResult train_run(const RunConfig& cfg, const std::string& resume_path = "") {
  if (cfg.precision == "f64") return train_impl<double>(cfg, resume_path);
  return train_impl<float>(cfg, resume_path);
}

// ---------------------------------------------------------------------------
// Evaluation from a checkpoint
// ---------------------------------------------------------------------------

template <class T>
MetricReport evaluate_checkpoint_impl(const CheckpointData& d, RunConfig cfg,
                                      const std::string& data_dir, const std::string& split) {
  const Dataset ds = Dataset::open(data_dir);
  if (ds.num_classes() != cfg.model.num_classes)
    throw DataError("eval: class count differs between checkpoint and dataset");
  if (!(cfg.grid == ds.meta().grid))
    throw DataError("eval: grid spec differs between checkpoint and dataset");
  const auto idx = ds.split_indices(split);
  if (idx.empty()) throw DataError("eval: split '" + split + "' is empty");

  HftModel<T> model(cfg.model, cfg.grid, cfg.seed);
  unpack_params(d, model.params());
  std::vector<SampleTensors<T>> samples;
  for (int i : idx) samples.push_back(sample_tensors<T>(ds.load(i), ds.num_classes()));
  return evaluate_model(model, samples, ds.meta().static_ids, ds.meta().dynamic_ids);
}

inline MetricReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_dir,
                                        const std::string& split,
                                        const std::string& report_path = "") {
  const auto d = load_checkpoint(ckpt_path);
  RunConfig cfg = RunConfig::from_json(nlohmann::json::parse(d.config_json));
  const MetricReport report = cfg.precision == "f64"
                                  ? evaluate_checkpoint_impl<double>(d, cfg, data_dir, split)
                                  : evaluate_checkpoint_impl<float>(d, cfg, data_dir, split);
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw DataError("eval: cannot write report " + report_path);
    out << report.to_json().dump(2) << "\n";
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

struct AblateRow {
  std::string variant;
  std::int64_t param_count = 0;
  MetricReport report;
};

struct AblateResult {
  std::string axis;
  std::string dataset_digest;
  std::vector<AblateRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["axis"] = axis;
    auto arr = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row;
      row["variant"] = r.variant;
      row["param_count"] = r.param_count;
      row["dataset_digest"] = dataset_digest;
      row["metrics"] = r.report.to_json();
      arr.push_back(std::move(row));
    }
    j["rows"] = arr;
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "axis: " << axis << "  (dataset " << dataset_digest << ")\n";
    os << std::left;
    os.width(18);
    os << "variant";
    os << "  #params      mIoU     mAP      BamIoU   per-class IoU\n";
    for (const auto& r : rows) {
      os.width(18);
      os << r.variant;
      char buf[96];
      std::snprintf(buf, sizeof(buf), "  %-11lld  %.4f   %.4f   %.4f   ",
                    static_cast<long long>(r.param_count), r.report.miou, r.report.map,
                    r.report.bamiou);
      os << buf;
      for (size_t c = 0; c < r.report.per_class_iou.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%s%.4f", c ? " " : "",
                      r.report.iou_evaluated[c] ? r.report.per_class_iou[c] : -1.0);
        os << buf;
      }
      os << "\n";
    }
    return os.str();
  }
};

inline std::int64_t config_param_count(const RunConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& [name, c] : HftModel<double>::param_count_table(cfg.model, cfg.grid)) n += c;
  return n;
}

inline AblateResult ablate_run(const RunConfig& base, const std::string& axis,
                               const std::string& out_dir) {
  std::vector<std::pair<std::string, RunConfig>> variants;
  auto with = [&](const std::string& name, auto&& edit) {
    RunConfig v = base;
    v.out_dir = out_dir + "/" + name;
    edit(v);
    variants.emplace_back(name, std::move(v));
  };

  if (axis == "scheme") {
    if (base.model.mode != Mode::Hybrid)
      throw ConfigError("ablate: scheme axis requires mode hybrid");
    for (MlScheme s : {MlScheme::None, MlScheme::CbftTeacher, MlScheme::CfftTeacher,
                       MlScheme::OutputSim, MlScheme::SubfeatureSim})
      with(to_string(s), [s](RunConfig& v) { v.scheme.scheme = s; });
  } else if (axis == "distance") {
    if (base.model.mode != Mode::Hybrid || base.scheme.scheme == MlScheme::None)
      throw ConfigError("ablate: distance axis requires a hybrid mode config with a scheme");
    for (MlDistance d : {MlDistance::L1, MlDistance::KL, MlDistance::L2})
      with(to_string(d), [d](RunConfig& v) { v.scheme.distance = d; });
  } else if (axis == "mode") {
    const MlScheme mls =
        base.scheme.scheme == MlScheme::None ? MlScheme::OutputSim : base.scheme.scheme;
    with("cbft_only", [](RunConfig& v) {
      v.model.mode = Mode::CbftOnly;
      v.scheme.scheme = MlScheme::None;
    });
    with("cfft_only", [](RunConfig& v) {
      v.model.mode = Mode::CfftOnly;
      v.scheme.scheme = MlScheme::None;
    });
    with("hybrid_no_mls", [](RunConfig& v) {
      v.model.mode = Mode::Hybrid;
      v.scheme.scheme = MlScheme::None;
    });
    with("hybrid_mls", [mls](RunConfig& v) {
      v.model.mode = Mode::Hybrid;
      v.scheme.scheme = mls;
    });
  } else {
    throw ConfigError("ablate: unknown axis '" + axis + "' (scheme|distance|mode)");
  }

  AblateResult result;
  result.axis = axis;
  result.dataset_digest = Dataset::open(base.dataset).manifest_digest();
  for (auto& [name, cfg] : variants) {
    const auto train_result = train_run(cfg);
    AblateRow row;
    row.variant = name;
    RunConfig effective = cfg;
    reconcile_with_dataset(effective, Dataset::open(cfg.dataset));
    row.param_count = config_param_count(effective);
    row.report = evaluate_checkpoint(train_result.best_checkpoint, cfg.dataset, "val");
    result.rows.push_back(std::move(row));
  }

  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir + "/ablate_" + axis + ".json", std::ios::trunc)
      << result.to_json().dump(2) << "\n";
  std::ofstream(out_dir + "/ablate_" + axis + ".txt", std::ios::trunc) << result.to_text();
  return result;
}

// ---------------------------------------------------------------------------
// Visualization
// ---------------------------------------------------------------------------

// Fig.-5-style BEV rendering: per cell the largest class index with p > 0.5
// wins; cells with no class get the background color; invalid cells are black.
inline ImageU8 render_bev_view(const Tensor<std::uint8_t>& masks,
                               const Tensor<std::uint8_t>& validity) {
  const int classes = masks.dim(0), z = masks.dim(1), w = masks.dim(2);
  ImageU8 img(z, w, 3);
  for (int zi = 0; zi < z; ++zi)
    for (int xi = 0; xi < w; ++xi) {
      if (!validity.at2(zi, xi)) continue;  // stays black
      int chosen = -1;
      for (int c = classes - 1; c >= 0; --c)
        if (masks.at3(c, zi, xi)) {
          chosen = c;
          break;
        }
      if (chosen < 0) {
        for (int ch = 0; ch < 3; ++ch) img.at(zi, xi, ch) = kBackgroundColor[ch];
      } else {
        const auto rgb = class_color(chosen);
        for (int ch = 0; ch < 3; ++ch) img.at(zi, xi, ch) = rgb[static_cast<size_t>(ch)];
      }
    }
  return img;
}

template <class T>
void visualize_impl(const CheckpointData& d, RunConfig cfg, const std::string& data_dir,
                    const std::vector<int>& ids, const std::string& out_dir) {
  const Dataset ds = Dataset::open(data_dir);
  if (ds.num_classes() != cfg.model.num_classes)
    throw DataError("viz: class count differs between checkpoint and dataset");
  HftModel<T> model(cfg.model, cfg.grid, cfg.seed);
  unpack_params(d, model.params());
  std::filesystem::create_directories(out_dir);

  std::map<int, int> id_to_index;
  for (size_t i = 0; i < ds.size(); ++i) {
    // Sample ids are unique by construction of gen-data.
    const auto rec = ds.load(static_cast<int>(i));
    id_to_index[rec.id] = static_cast<int>(i);
  }
  for (int id : ids) {
    auto it = id_to_index.find(id);
    if (it == id_to_index.end()) {
      std::cerr << "viz: sample id " << id << " not found, skipping\n";
      continue;
    }
    const auto rec = ds.load(it->second);
    const auto s = sample_tensors<T>(rec, ds.num_classes());
    Graph<T> g;
    auto out = model.forward(g, s.image, s.intr);
    const auto pred = binarize(g.val(out.scores));
    write_png_rgb8(out_dir + "/fv_" + std::to_string(id) + ".png", rec.fv);
    write_png_rgb8(out_dir + "/pred_" + std::to_string(id) + ".png",
                   render_bev_view(pred, s.validity));
    write_png_rgb8(out_dir + "/gt_" + std::to_string(id) + ".png",
                   render_bev_view(s.labels, s.validity));
  }
}

inline void visualize_run(const std::string& ckpt_path, const std::string& data_dir,
                          const std::vector<int>& ids, const std::string& out_dir) {
  const auto d = load_checkpoint(ckpt_path);
  RunConfig cfg = RunConfig::from_json(nlohmann::json::parse(d.config_json));
  if (cfg.precision == "f64") visualize_impl<double>(d, cfg, data_dir, ids, out_dir);
  else visualize_impl<float>(d, cfg, data_dir, ids, out_dir);
}

// ---------------------------------------------------------------------------
// Parameter accounting (params subcommand)
// ---------------------------------------------------------------------------

inline nlohmann::json params_report(const RunConfig& cfg) {
  nlohmann::json j;
  for (Mode m : {Mode::Hybrid, Mode::CbftOnly, Mode::CfftOnly}) {
    ModelConfig mc = cfg.model;
    mc.mode = m;
    nlohmann::json groups;
    std::int64_t total = 0;
    for (const auto& [name, n] : HftModel<double>::param_count_table(mc, cfg.grid)) {
      groups[name] = n;
      total += n;
    }
    j[to_string(m)] = {{"groups", groups}, {"total", total}};
  }
  return j;
}

inline std::string params_report_text(const nlohmann::json& j) {
  std::ostringstream os;
  for (const auto& [mode, entry] : j.items()) {
    os << mode << "\n";
    for (const auto& [group, n] : entry.at("groups").items())
      os << "  " << group << ": " << n.get<std::int64_t>() << "\n";
    os << "  total: " << entry.at("total").get<std::int64_t>() << "\n";
  }
  return os.str();
}

}  // namespace hft
