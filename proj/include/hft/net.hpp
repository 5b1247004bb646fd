#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hft/geometry.hpp"
#include "hft/graph.hpp"
#include "hft/losses.hpp"
#include "hft/rng.hpp"
#include "hft/tensor.hpp"

namespace hft {

enum class Mode { Hybrid, CbftOnly, CfftOnly };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::Hybrid: return "hybrid";
    case Mode::CbftOnly: return "cbft_only";
    case Mode::CfftOnly: return "cfft_only";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "hybrid") return Mode::Hybrid;
  if (s == "cbft_only") return Mode::CbftOnly;
  if (s == "cfft_only") return Mode::CfftOnly;
  throw ConfigError("unknown mode: " + s);
}

struct ModelConfig {
  int image_h = 128;
  int image_w = 128;
  int in_channels = 3;
  int num_classes = 4;
  std::vector<int> encoder_channels = {32, 64, 128};
  std::vector<int> strides = {8, 16, 32};
  int bev_channels = 64;    // C_b, channel width of BEV features
  int global_hidden = 128;  // hidden width of the spatial MLP
  int decoder_channels = 16;
  bool relation = false;    // cross-attention refinement in the global branch
  Mode mode = Mode::Hybrid;

  void validate() const {
    if (image_h <= 0 || image_w <= 0) throw ConfigError("model: bad image size");
    if (num_classes <= 0) throw ConfigError("model: need at least one class");
    if (encoder_channels.size() != strides.size() || strides.empty())
      throw ConfigError("model: encoder channel/stride count mismatch");
    int prev = 0;
    for (int s : strides) {
      if (s <= prev) throw ConfigError("model: strides must be strictly increasing");
      if (prev != 0 && s != prev * 2) throw ConfigError("model: stride ratio must be 2");
      prev = s;
    }
    const int s0 = strides.front();
    if ((s0 & (s0 - 1)) != 0) throw ConfigError("model: first stride must be a power of two");
    if (image_h % strides.back() != 0 || image_w % strides.back() != 0)
      throw ConfigError("model: image size must be divisible by the largest stride");
    if (bev_channels <= 0 || global_hidden <= 0 || decoder_channels <= 0)
      throw ConfigError("model: channel widths must be positive");
  }

  int num_scales() const { return static_cast<int>(strides.size()); }
  int feat_h(int s) const { return image_h / strides[static_cast<size_t>(s)]; }
  int feat_w(int s) const { return image_w / strides[static_cast<size_t>(s)]; }
  int feat_c(int s) const { return encoder_channels[static_cast<size_t>(s)]; }
};

// Per-branch BEV features: one sub-feature per depth extent plus their
// depth-axis concatenation (extent order, ascending z).
template <class T>
struct BevFeatureSet {
  std::vector<Var> subs;
  Var concat;
};

template <class T>
struct ModelOutput {
  Var scores;  // [C, Z, W] occupancy probabilities of the active head
  std::optional<Var> geo_scores;
  std::optional<Var> glo_scores;
  std::optional<BevFeatureSet<T>> geo_features;
  std::optional<BevFeatureSet<T>> glo_features;
};

namespace netdetail {

// Stem depth and channel ramp for the first pyramid stage.
inline std::vector<int> stem_channels(int in_stride, int out_channels) {
  int n = 0;
  for (int s = in_stride; s > 1; s /= 2) ++n;
  std::vector<int> ch(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int shift = n - 1 - i;
    ch[static_cast<size_t>(i)] = std::max(8, out_channels >> shift);
  }
  if (!ch.empty()) ch.back() = out_channels;
  return ch;
}

}  // namespace netdetail

// Test helper: flatten map that averages the matching input channel over the
// height axis, identically for every depth bin.
template <class T>
void init_flatten_identity(Param<T>& flat_w, Param<T>& flat_b, int bev_channels, int depth_bins,
                           int src_channels, int src_height) {
  flat_w.value.zero();
  flat_b.value.zero();
  const int cols = src_channels * src_height;
  for (int cb = 0; cb < bev_channels; ++cb) {
    if (cb >= src_channels) break;
    for (int d = 0; d < depth_bins; ++d)
      for (int h = 0; h < src_height; ++h)
        flat_w.value.at2(cb * depth_bins + d, cb * src_height + h) = T(1) / static_cast<T>(src_height);
  }
  (void)cols;
}

// The HFT network. A model instance owns the parameter groups its configured
// mode needs; forward() may run any mode whose groups are instantiated.
template <class T>
class HftModel {
 public:
  HftModel(ModelConfig cfg, BevGridSpec grid, std::uint64_t init_seed)
      : cfg_(std::move(cfg)), grid_(std::move(grid)) {
    cfg_.validate();
    grid_.validate();
    if (grid_.num_extents() != cfg_.num_scales())
      throw ConfigError("model: depth extent count must equal the pyramid scale count");
    Rng rng = substream(init_seed, "init");
    build_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const BevGridSpec& grid() const { return grid_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  bool has_group(const std::string& prefix) const { return params_.count(prefix) > 0; }

  // --- core operations --------------------------------------------------------

  std::vector<Var> encode(Graph<T>& g, const Tensor<T>& image) {
    if (image.ndim() != 3 || image.dim(0) != cfg_.in_channels || image.dim(1) != cfg_.image_h ||
        image.dim(2) != cfg_.image_w)
      throw ContractError("encode: image shape mismatch " + shape_str(image.shape));
    return encode(g, g.input(image));
  }

  std::vector<Var> encode(Graph<T>& g, Var image) {
    std::vector<Var> pyramid;
    Var x = image;
    for (size_t i = 0; i < stem_.size(); ++i)
      x = g.relu(g.conv2d(x, g.param(*stem_[i].w), g.param(*stem_[i].b), 2, 1));
    pyramid.push_back(x);
    for (size_t i = 0; i < stage_.size(); ++i) {
      x = g.relu(g.conv2d(x, g.param(*stage_[i].w), g.param(*stage_[i].b), 2, 1));
      pyramid.push_back(x);
    }
    return pyramid;
  }

  BevFeatureSet<T> geometric_transform(Graph<T>& g, const std::vector<Var>& pyramid,
                                       const CameraIntrinsics& intr) {
    require_group("geo", "geometric_transform");
    if (static_cast<int>(pyramid.size()) != cfg_.num_scales())
      throw ConfigError("geometric_transform: scale count mismatch");
    const auto& maps = maps_for(intr);
    BevFeatureSet<T> out;
    for (int s = 0; s < cfg_.num_scales(); ++s) {
      const int cs = cfg_.feat_c(s), hs = cfg_.feat_h(s), ws = cfg_.feat_w(s);
      const int d = grid_.extent_cell_count(s);
      // Height-flatten: one learned dense map per column, shared across columns.
      Var cols = g.reshape(pyramid[static_cast<size_t>(s)], {cs * hs, ws});
      Var polar = g.add_bias_rows(g.matmul(g.param(*geo_flat_[static_cast<size_t>(s)].w), cols),
                                  g.param(*geo_flat_[static_cast<size_t>(s)].b));
      polar = g.reshape(polar, {cfg_.bev_channels, d, ws});
      out.subs.push_back(g.bilinear(polar, maps[static_cast<size_t>(s)]));
    }
    out.concat = g.concat(out.subs, 1);
    return out;
  }

  BevFeatureSet<T> global_transform(Graph<T>& g, const std::vector<Var>& pyramid) {
    require_group("glo", "global_transform");
    if (static_cast<int>(pyramid.size()) != cfg_.num_scales())
      throw ConfigError("global_transform: scale count mismatch");
    BevFeatureSet<T> out;
    for (int s = 0; s < cfg_.num_scales(); ++s) {
      const int cs = cfg_.feat_c(s), hs = cfg_.feat_h(s), ws = cfg_.feat_w(s);
      const int p_in = hs * ws;
      const int d = grid_.extent_cell_count(s);
      const int p_out = d * grid_.lateral_cells;
      const auto& gp = glo_[static_cast<size_t>(s)];
      // Channel projection, then a position MLP shared across channels.
      Var tokens = g.reshape(pyramid[static_cast<size_t>(s)], {cs, p_in});
      tokens = g.add_bias_rows(g.matmul(g.param(*gp.proj_w), tokens), g.param(*gp.proj_b));
      Var hidden = g.relu(g.add_bias_cols(g.matmul(tokens, g.param(*gp.mlp_w1)), g.param(*gp.mlp_b1)));
      Var bev = g.add_bias_cols(g.matmul(hidden, g.param(*gp.mlp_w2)), g.param(*gp.mlp_b2));
      if (cfg_.relation) {
        // Single-head cross-attention between BEV queries and FV tokens.
        Var q = g.add_bias_rows(g.matmul(g.param(*gp.rel_wq), bev), g.param(*gp.rel_bq));
        Var k = g.add_bias_rows(g.matmul(g.param(*gp.rel_wk), tokens), g.param(*gp.rel_bk));
        Var v = g.add_bias_rows(g.matmul(g.param(*gp.rel_wv), tokens), g.param(*gp.rel_bv));
        Var attn = g.softmax_rows(
            g.scale(g.matmul(g.transpose(q), k), T(1) / std::sqrt(static_cast<T>(cfg_.bev_channels))));
        bev = g.add(bev, g.matmul(v, g.transpose(attn)));
      }
      out.subs.push_back(g.reshape(bev, {cfg_.bev_channels, d, grid_.lateral_cells}));
    }
    out.concat = g.concat(out.subs, 1);
    return out;
  }

  Var fuse(Graph<T>& g, const BevFeatureSet<T>& geo, const BevFeatureSet<T>& glo) {
    require_group("fuse", "fuse");
    if (!g.val(geo.concat).same_shape(g.val(glo.concat)))
      throw ContractError("fuse: branch shape mismatch");
    const int zw = grid_.depth_cells * grid_.lateral_cells;
    Var cat = g.concat({geo.concat, glo.concat}, 0);
    Var flat = g.reshape(cat, {2 * cfg_.bev_channels, zw});
    Var fused = g.add_bias_rows(g.matmul(g.param(*fuse_.w), flat), g.param(*fuse_.b));
    return g.reshape(fused, {cfg_.bev_channels, grid_.depth_cells, grid_.lateral_cells});
  }

  Var decode_main(Graph<T>& g, Var fused) { return decode_head(g, dec_main_, fused); }
  Var decode_geo(Graph<T>& g, Var features) { return decode_head(g, dec_geo_, features); }
  Var decode_glo(Graph<T>& g, Var features) { return decode_head(g, dec_glo_, features); }

  ModelOutput<T> forward(Graph<T>& g, const Tensor<T>& image, const CameraIntrinsics& intr) {
    return forward(g, image, intr, cfg_.mode);
  }

  ModelOutput<T> forward(Graph<T>& g, const Tensor<T>& image, const CameraIntrinsics& intr,
                         Mode mode) {
    const auto pyramid = encode(g, image);
    ModelOutput<T> out;
    if (mode == Mode::CbftOnly) {
      out.geo_features = geometric_transform(g, pyramid, intr);
      out.geo_scores = decode_geo(g, out.geo_features->concat);
      out.scores = *out.geo_scores;
      return out;
    }
    if (mode == Mode::CfftOnly) {
      out.glo_features = global_transform(g, pyramid);
      out.glo_scores = decode_glo(g, out.glo_features->concat);
      out.scores = *out.glo_scores;
      return out;
    }
    out.geo_features = geometric_transform(g, pyramid, intr);
    out.glo_features = global_transform(g, pyramid);
    Var fused = fuse(g, *out.geo_features, *out.glo_features);
    out.scores = decode_main(g, fused);
    out.geo_scores = decode_geo(g, out.geo_features->concat);
    out.glo_scores = decode_glo(g, out.glo_features->concat);
    return out;
  }

  std::int64_t param_count(const std::string& prefix = "") const { return params_.count(prefix); }

  // Exact per-group parameter counts derived from the configuration alone.
  static std::vector<std::pair<std::string, std::int64_t>> param_count_table(
      const ModelConfig& cfg, const BevGridSpec& grid) {
    cfg.validate();
    grid.validate();
    std::vector<std::pair<std::string, std::int64_t>> table;
    auto add = [&table](const std::string& name, std::int64_t n) { table.emplace_back(name, n); };

    std::int64_t enc = 0;
    int prev = cfg.in_channels;
    for (int ch : netdetail::stem_channels(cfg.strides.front(), cfg.encoder_channels.front())) {
      enc += static_cast<std::int64_t>(ch) * prev * 9 + ch;
      prev = ch;
    }
    for (size_t i = 1; i < cfg.encoder_channels.size(); ++i) {
      const int ch = cfg.encoder_channels[i];
      enc += static_cast<std::int64_t>(ch) * prev * 9 + ch;
      prev = ch;
    }
    add("encoder", enc);

    const bool geo = cfg.mode != Mode::CfftOnly;
    const bool glo = cfg.mode != Mode::CbftOnly;
    auto decoder_count = [&](int in_ch) {
      std::int64_t n = 0;
      n += static_cast<std::int64_t>(cfg.decoder_channels) * in_ch + cfg.decoder_channels;
      n += static_cast<std::int64_t>(cfg.decoder_channels) * cfg.decoder_channels * 9 +
           cfg.decoder_channels;
      n += static_cast<std::int64_t>(cfg.num_classes) * cfg.decoder_channels + cfg.num_classes;
      return n;
    };
    if (geo) {
      std::int64_t n = 0;
      for (int s = 0; s < cfg.num_scales(); ++s) {
        const std::int64_t rows =
            static_cast<std::int64_t>(cfg.bev_channels) * grid.extent_cell_count(s);
        const std::int64_t colsk = static_cast<std::int64_t>(cfg.feat_c(s)) * cfg.feat_h(s);
        n += rows * colsk + rows;
      }
      add("geo", n);
      add("dec_geo", decoder_count(cfg.bev_channels));
    }
    if (glo) {
      std::int64_t n = 0;
      for (int s = 0; s < cfg.num_scales(); ++s) {
        const std::int64_t p_in = static_cast<std::int64_t>(cfg.feat_h(s)) * cfg.feat_w(s);
        const std::int64_t p_out =
            static_cast<std::int64_t>(grid.extent_cell_count(s)) * grid.lateral_cells;
        n += static_cast<std::int64_t>(cfg.bev_channels) * cfg.feat_c(s) + cfg.bev_channels;
        n += p_in * cfg.global_hidden + cfg.global_hidden;
        n += static_cast<std::int64_t>(cfg.global_hidden) * p_out + p_out;
        if (cfg.relation)
          n += 3 * (static_cast<std::int64_t>(cfg.bev_channels) * cfg.bev_channels +
                    cfg.bev_channels);
      }
      add("glo", n);
      add("dec_glo", decoder_count(cfg.bev_channels));
    }
    if (geo && glo) {
      add("fuse", static_cast<std::int64_t>(cfg.bev_channels) * 2 * cfg.bev_channels +
                      cfg.bev_channels);
      add("dec_main", decoder_count(cfg.bev_channels));
    }
    return table;
  }

 private:
  struct ConvP {
    Param<T>* w = nullptr;
    Param<T>* b = nullptr;
  };
  struct GloP {
    Param<T>*proj_w = nullptr, *proj_b = nullptr;
    Param<T>*mlp_w1 = nullptr, *mlp_b1 = nullptr, *mlp_w2 = nullptr, *mlp_b2 = nullptr;
    Param<T>*rel_wq = nullptr, *rel_bq = nullptr;
    Param<T>*rel_wk = nullptr, *rel_bk = nullptr;
    Param<T>*rel_wv = nullptr, *rel_bv = nullptr;
  };
  struct HeadP {
    Param<T>*w1 = nullptr, *b1 = nullptr;
    Param<T>*w2 = nullptr, *b2 = nullptr;
    Param<T>*w3 = nullptr, *b3 = nullptr;
  };

  void require_group(const std::string& prefix, const char* what) const {
    if (!has_group(prefix))
      throw ConfigError(std::string(what) + ": parameter group '" + prefix +
                        "' not instantiated for mode " + to_string(cfg_.mode));
  }

  Param<T>& weight(Rng& rng, const std::string& name, std::vector<int> shape, std::int64_t fan_in) {
    auto& p = params_.create(name, std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : p.value.data) x = static_cast<T>(rng.normal(0.0, std));
    return p;
  }

  Param<T>& bias(const std::string& name, int n) { return params_.create(name, {n}); }

  ConvP conv_params(Rng& rng, const std::string& name, int out_ch, int in_ch) {
    ConvP c;
    c.w = &weight(rng, name + ".w", {out_ch, in_ch, 3, 3}, static_cast<std::int64_t>(in_ch) * 9);
    c.b = &bias(name + ".b", out_ch);
    return c;
  }

  HeadP head_params(Rng& rng, const std::string& name, int in_ch) {
    HeadP h;
    const int dc = cfg_.decoder_channels;
    h.w1 = &weight(rng, name + ".proj.w", {dc, in_ch}, in_ch);
    h.b1 = &bias(name + ".proj.b", dc);
    h.w2 = &weight(rng, name + ".conv.w", {dc, dc, 3, 3}, static_cast<std::int64_t>(dc) * 9);
    h.b2 = &bias(name + ".conv.b", dc);
    h.w3 = &weight(rng, name + ".cls.w", {cfg_.num_classes, dc}, dc);
    h.b3 = &bias(name + ".cls.b", cfg_.num_classes);
    return h;
  }

  void build_params(Rng& rng) {
    int prev = cfg_.in_channels;
    int idx = 0;
    for (int ch : netdetail::stem_channels(cfg_.strides.front(), cfg_.encoder_channels.front())) {
      stem_.push_back(conv_params(rng, "encoder.stem" + std::to_string(idx++), ch, prev));
      prev = ch;
    }
    for (size_t i = 1; i < cfg_.encoder_channels.size(); ++i) {
      stage_.push_back(conv_params(rng, "encoder.stage" + std::to_string(i),
                                   cfg_.encoder_channels[i], prev));
      prev = cfg_.encoder_channels[i];
    }

    const bool geo = cfg_.mode != Mode::CfftOnly;
    const bool glo = cfg_.mode != Mode::CbftOnly;
    if (geo) {
      for (int s = 0; s < cfg_.num_scales(); ++s) {
        const int rows = cfg_.bev_channels * grid_.extent_cell_count(s);
        const int cols = cfg_.feat_c(s) * cfg_.feat_h(s);
        ConvP f;
        f.w = &weight(rng, "geo.flat" + std::to_string(s) + ".w", {rows, cols}, cols);
        f.b = &bias("geo.flat" + std::to_string(s) + ".b", rows);
        geo_flat_.push_back(f);
      }
      dec_geo_ = head_params(rng, "dec_geo", cfg_.bev_channels);
    }
    if (glo) {
      for (int s = 0; s < cfg_.num_scales(); ++s) {
        const int p_in = cfg_.feat_h(s) * cfg_.feat_w(s);
        const int p_out = grid_.extent_cell_count(s) * grid_.lateral_cells;
        const std::string base = "glo.scale" + std::to_string(s);
        GloP gp;
        gp.proj_w = &weight(rng, base + ".proj.w", {cfg_.bev_channels, cfg_.feat_c(s)}, cfg_.feat_c(s));
        gp.proj_b = &bias(base + ".proj.b", cfg_.bev_channels);
        gp.mlp_w1 = &weight(rng, base + ".mlp.w1", {p_in, cfg_.global_hidden}, p_in);
        gp.mlp_b1 = &bias(base + ".mlp.b1", cfg_.global_hidden);
        gp.mlp_w2 = &weight(rng, base + ".mlp.w2", {cfg_.global_hidden, p_out}, cfg_.global_hidden);
        gp.mlp_b2 = &bias(base + ".mlp.b2", p_out);
        if (cfg_.relation) {
          gp.rel_wq = &weight(rng, base + ".rel.wq", {cfg_.bev_channels, cfg_.bev_channels},
                              cfg_.bev_channels);
          gp.rel_bq = &bias(base + ".rel.bq", cfg_.bev_channels);
          gp.rel_wk = &weight(rng, base + ".rel.wk", {cfg_.bev_channels, cfg_.bev_channels},
                              cfg_.bev_channels);
          gp.rel_bk = &bias(base + ".rel.bk", cfg_.bev_channels);
          gp.rel_wv = &weight(rng, base + ".rel.wv", {cfg_.bev_channels, cfg_.bev_channels},
                              cfg_.bev_channels);
          gp.rel_bv = &bias(base + ".rel.bv", cfg_.bev_channels);
        }
        glo_.push_back(gp);
      }
      dec_glo_ = head_params(rng, "dec_glo", cfg_.bev_channels);
    }
    if (geo && glo) {
      fuse_.w = &weight(rng, "fuse.proj.w", {cfg_.bev_channels, 2 * cfg_.bev_channels},
                        2 * cfg_.bev_channels);
      fuse_.b = &bias("fuse.proj.b", cfg_.bev_channels);
      dec_main_ = head_params(rng, "dec_main", cfg_.bev_channels);
    }
  }

  Var decode_head(Graph<T>& g, const HeadP& h, Var x) {
    if (!h.w1) throw ConfigError("decode: head not instantiated for mode " + std::string(to_string(cfg_.mode)));
    const Tensor<T>& xv = g.val(x);
    if (xv.ndim() != 3) throw ContractError("decode: expected [C, Z, W] input");
    const int z = xv.dim(1), w = xv.dim(2);
    Var flat = g.reshape(x, {xv.dim(0), z * w});
    Var a = g.relu(g.add_bias_rows(g.matmul(g.param(*h.w1), flat), g.param(*h.b1)));
    a = g.reshape(a, {cfg_.decoder_channels, z, w});
    a = g.relu(g.conv2d(a, g.param(*h.w2), g.param(*h.b2), 1, 1));
    Var logits = g.add_bias_rows(g.matmul(g.param(*h.w3), g.reshape(a, {cfg_.decoder_channels, z * w})),
                                 g.param(*h.b3));
    return g.sigmoid(g.reshape(logits, {cfg_.num_classes, z, w}));
  }

  const std::vector<ResampleMap>& maps_for(const CameraIntrinsics& intr) {
    const std::array<double, 5> key{intr.fx, intr.fy, intr.cx, intr.cy, intr.cam_height};
    auto it = map_cache_.find(key);
    if (it != map_cache_.end()) return it->second;
    std::vector<ResampleMap> maps;
    for (int s = 0; s < cfg_.num_scales(); ++s)
      maps.push_back(build_resample_map(intr, grid_, cfg_.strides[static_cast<size_t>(s)], s,
                                        cfg_.image_w));
    return map_cache_.emplace(key, std::move(maps)).first->second;
  }

  ModelConfig cfg_;
  BevGridSpec grid_;
  ParamStore<T> params_;
  std::vector<ConvP> stem_;
  std::vector<ConvP> stage_;
  std::vector<ConvP> geo_flat_;
  std::vector<GloP> glo_;
  ConvP fuse_;
  HeadP dec_main_, dec_geo_, dec_glo_;
  std::map<std::array<double, 5>, std::vector<ResampleMap>> map_cache_;
};

}  // namespace hft
