#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hft/geometry.hpp"
#include "hft/png.hpp"
#include "hft/rng.hpp"
#include "hft/tensor.hpp"

namespace hft {

enum class ClassKind { Road, Strip, Box };

// Distribution parameters for one semantic class.
struct ClassSpec {
  std::string name;
  bool is_static = false;
  ClassKind kind = ClassKind::Box;
  int count_min = 0;
  int count_max = 0;
  double width_min = 0, width_max = 0;    // lateral size; strip width for strips
  double length_min = 0, length_max = 0;  // depth size (boxes)
  double height_min = 0, height_max = 0;
  bool can_elevate = false;
};

struct SceneConfig {
  std::vector<ClassSpec> classes;
  double elevated_prob = 0.0;
  double elevation_min = 0.9;
  double elevation_max = 1.1;
  double x_half = 16.0;  // lateral metric half-range the scene must stay inside
  double z_near = 1.0;
  double z_far = 33.0;

  void validate() const {
    if (classes.empty()) throw ConfigError("scene config: class set must not be empty");
    if (classes.size() > 16) throw ConfigError("scene config: at most 16 classes (bitmask width)");
    for (const auto& c : classes) {
      if (c.count_min < 0 || c.count_max < c.count_min)
        throw ConfigError("scene config: bad count range for class " + c.name);
    }
    if (elevated_prob < 0 || elevated_prob > 1)
      throw ConfigError("scene config: elevated_prob must be in [0,1]");
    if (!(z_near > 0) || !(z_far > z_near)) throw ConfigError("scene config: bad depth range");
  }

  std::vector<int> static_ids() const {
    std::vector<int> ids;
    for (size_t i = 0; i < classes.size(); ++i)
      if (classes[i].is_static) ids.push_back(static_cast<int>(i));
    return ids;
  }
  std::vector<int> dynamic_ids() const {
    std::vector<int> ids;
    for (size_t i = 0; i < classes.size(); ++i)
      if (!classes[i].is_static) ids.push_back(static_cast<int>(i));
    return ids;
  }

  // Desk-scale default: drivable, walkway, vehicle, pedestrian.
  static SceneConfig default4() {
    SceneConfig c;
    c.classes.push_back({"drivable", true, ClassKind::Road, 1, 1, 2.5, 4.5, 0, 0, 0, 0, false});
    c.classes.push_back({"walkway", true, ClassKind::Strip, 0, 2, 1.0, 2.0, 0, 0, 0, 0, false});
    c.classes.push_back({"vehicle", false, ClassKind::Box, 1, 5, 1.6, 2.2, 3.5, 5.0, 1.2, 1.8, true});
    c.classes.push_back(
        {"pedestrian", false, ClassKind::Box, 0, 3, 0.6, 0.9, 0.6, 0.9, 1.5, 1.9, false});
    c.elevated_prob = 0.25;
    return c;
  }

  // Config switch mirroring a larger class count: road + walkway + generic
  // box classes whose sizes cycle through a small catalogue.
  static SceneConfig with_classes(int n) {
    if (n < 2) throw ConfigError("scene config: need at least road + one class");
    SceneConfig c = default4();
    c.classes.resize(2);  // keep drivable + walkway
    struct Cat {
      double w0, w1, l0, l1, h0, h1;
      bool elev;
    };
    const Cat catalogue[] = {
        {1.6, 2.2, 3.5, 5.0, 1.2, 1.8, true},   // car-like
        {0.6, 0.9, 0.6, 0.9, 1.5, 1.9, false},  // pedestrian-like
        {2.2, 2.8, 6.0, 9.0, 2.5, 3.5, true},   // truck-like
        {0.3, 0.5, 0.3, 0.5, 0.5, 0.9, false},  // cone-like
        {0.6, 0.9, 1.6, 2.2, 1.0, 1.4, false},  // bike-like
    };
    for (int i = 2; i < n; ++i) {
      const Cat& k = catalogue[(i - 2) % 5];
      ClassSpec s;
      s.name = "class" + std::to_string(i);
      s.kind = ClassKind::Box;
      s.count_min = 0;
      s.count_max = 3;
      s.width_min = k.w0;
      s.width_max = k.w1;
      s.length_min = k.l0;
      s.length_max = k.l1;
      s.height_min = k.h0;
      s.height_max = k.h1;
      s.can_elevate = k.elev;
      c.classes.push_back(s);
    }
    return c;
  }
};

struct GroundPoly {
  int class_id = 0;
  std::vector<std::pair<double, double>> pts;  // (x, z) on the ground plane
  double brightness = 1.0;
};

struct SceneBox {
  int class_id = 0;
  double x = 0, z = 0;          // footprint center
  double width = 0, length = 0; // lateral / depth extent
  double height = 0;
  double elevation = 0;         // bottom face above the ground
  double brightness = 1.0;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<GroundPoly> drivable;
  std::vector<GroundPoly> walkways;
  std::vector<SceneBox> boxes;
};

// Fixed per-class palette (index = class id), used by the renderer and the
// visualization output. Recorded in the dataset manifest.
inline std::array<std::uint8_t, 3> class_color(int class_id) {
  static const std::uint8_t table[16][3] = {
      {90, 90, 95},    {176, 152, 112}, {204, 44, 44},   {44, 180, 220},
      {60, 160, 60},   {220, 170, 40},  {150, 70, 190},  {240, 110, 60},
      {70, 110, 220},  {180, 200, 60},  {200, 90, 140},  {100, 200, 170},
      {130, 90, 50},   {230, 220, 90},  {90, 60, 120},   {160, 160, 160}};
  const auto* c = table[class_id & 15];
  return {c[0], c[1], c[2]};
}

inline constexpr std::uint8_t kBackgroundColor[3] = {120, 136, 158};

// Deterministic scene draw. Every random quantity comes from one stream
// seeded by `seed`, in a fixed order, so equal (seed, config) pairs produce
// structurally identical scenes.
inline Scene sample_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(Rng::splitmix64(seed));
  Scene scene;
  scene.seed = seed;

  for (size_t ci = 0; ci < cfg.classes.size(); ++ci) {
    const ClassSpec& spec = cfg.classes[ci];
    const int count = static_cast<int>(rng.uniform_int(spec.count_min, spec.count_max));
    for (int k = 0; k < count; ++k) {
      const double brightness = rng.uniform(0.8, 1.2);
      if (spec.kind == ClassKind::Road) {
        // Sizes are clamped so every object fits the metric range even on
        // very small grids.
        const double half0 = std::min(rng.uniform(spec.width_min, spec.width_max), cfg.x_half * 0.9);
        const double half1 = std::min(rng.uniform(spec.width_min, spec.width_max), cfg.x_half * 0.9);
        const double margin = std::max(0.0, cfg.x_half - std::max(half0, half1) - 0.5);
        const double c0 = rng.uniform(-std::min(margin, 3.0), std::min(margin, 3.0));
        const double c1 = c0 + rng.uniform(-2.0, 2.0);
        GroundPoly p;
        p.class_id = static_cast<int>(ci);
        p.brightness = brightness;
        p.pts = {{c0 - half0, cfg.z_near},
                 {c0 + half0, cfg.z_near},
                 {std::clamp(c1 + half1, -cfg.x_half, cfg.x_half), cfg.z_far},
                 {std::clamp(c1 - half1, -cfg.x_half, cfg.x_half), cfg.z_far}};
        scene.drivable.push_back(std::move(p));
      } else if (spec.kind == ClassKind::Strip) {
        const double sw = std::min(rng.uniform(spec.width_min, spec.width_max), cfg.x_half * 0.45);
        const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
        const double inner_lo = std::min(3.0, std::max(0.25, cfg.x_half - sw - 0.75));
        const double inner_hi = std::max(inner_lo, cfg.x_half - sw - 0.25);
        const double inner = rng.uniform(inner_lo, inner_hi);
        GroundPoly p;
        p.class_id = static_cast<int>(ci);
        p.brightness = brightness;
        const double x0 = side * inner, x1 = side * (inner + sw);
        p.pts = {{std::min(x0, x1), cfg.z_near},
                 {std::max(x0, x1), cfg.z_near},
                 {std::max(x0, x1), cfg.z_far},
                 {std::min(x0, x1), cfg.z_far}};
        scene.walkways.push_back(std::move(p));
      } else {
        SceneBox b;
        b.class_id = static_cast<int>(ci);
        b.brightness = brightness;
        b.width = std::min(rng.uniform(spec.width_min, spec.width_max), cfg.x_half * 0.9);
        b.length = std::min(rng.uniform(spec.length_min, spec.length_max),
                            (cfg.z_far - cfg.z_near) * 0.45);
        b.height = rng.uniform(spec.height_min, spec.height_max);
        b.x = rng.uniform(-(cfg.x_half - b.width / 2), cfg.x_half - b.width / 2);
        b.z = rng.uniform(cfg.z_near + b.length / 2, cfg.z_far - b.length / 2);
        b.elevation =
            (spec.can_elevate && rng.bernoulli(cfg.elevated_prob))
                ? rng.uniform(cfg.elevation_min, cfg.elevation_max)
                : 0.0;
        scene.boxes.push_back(b);
      }
    }
  }
  return scene;
}

namespace synthdetail {

inline bool point_in_polygon(const std::vector<std::pair<double, double>>& pts, double x, double y) {
  bool inside = false;
  const size_t n = pts.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& [xi, yi] = pts[i];
    const auto& [xj, yj] = pts[j];
    if ((yi > y) != (yj > y)) {
      const double t = (y - yi) / (yj - yi);
      if (x < xi + t * (xj - xi)) inside = !inside;
    }
  }
  return inside;
}

// Andrew monotone chain; returns the hull in counter-clockwise order.
inline std::vector<std::pair<double, double>> convex_hull(std::vector<std::pair<double, double>> p) {
  std::sort(p.begin(), p.end());
  p.erase(std::unique(p.begin(), p.end()), p.end());
  const size_t n = p.size();
  if (n < 3) return p;
  auto cross = [](const auto& o, const auto& a, const auto& b) {
    return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
  };
  std::vector<std::pair<double, double>> h(2 * n);
  size_t k = 0;
  for (size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  for (size_t i = n - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  h.resize(k - 1);
  return h;
}

inline bool point_in_convex(const std::vector<std::pair<double, double>>& hull, double x, double y) {
  const size_t n = hull.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % n];
    const double cr = (b.first - a.first) * (y - a.second) - (b.second - a.second) * (x - a.first);
    if (cr < -1e-12) return false;
  }
  return true;
}

inline void paint(ImageU8& img, int i, int j, const std::array<std::uint8_t, 3>& rgb,
                  double brightness) {
  for (int c = 0; c < 3; ++c) {
    const double v = rgb[static_cast<size_t>(c)] * brightness;
    img.at(i, j, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
}

}  // namespace synthdetail

// Painter's-algorithm rasterization of the frontal view. Ground surfaces are
// resolved per pixel through the inverse ground-ray; boxes are drawn
// far-to-near as the convex hull of their eight projected corners.
inline ImageU8 render_fv(const Scene& scene, const CameraIntrinsics& intr, int image_h, int image_w) {
  intr.validate();
  ImageU8 img(image_h, image_w, 3);
  for (int i = 0; i < image_h; ++i)
    for (int j = 0; j < image_w; ++j)
      for (int c = 0; c < 3; ++c) img.at(i, j, c) = kBackgroundColor[c];

  // Ground pass: pixels below the horizon, surfaces in paint order.
  for (int i = 0; i < image_h; ++i) {
    const double v = i + 0.5;
    if (!(v > intr.cy)) continue;
    for (int j = 0; j < image_w; ++j) {
      const double u = j + 0.5;
      const auto [x, z] = pixel_to_ground(intr, u, v);
      for (const auto* list : {&scene.drivable, &scene.walkways}) {
        for (const auto& poly : *list) {
          if (synthdetail::point_in_polygon(poly.pts, x, z))
            synthdetail::paint(img, i, j, class_color(poly.class_id), poly.brightness);
        }
      }
    }
  }

  // Boxes far to near.
  std::vector<const SceneBox*> order;
  order.reserve(scene.boxes.size());
  for (const auto& b : scene.boxes) order.push_back(&b);
  std::stable_sort(order.begin(), order.end(),
                   [](const SceneBox* a, const SceneBox* b) { return a->z > b->z; });
  for (const SceneBox* b : order) {
    std::vector<std::pair<double, double>> corners;
    bool behind = false;
    for (const double dx : {-b->width / 2, b->width / 2})
      for (const double dz : {-b->length / 2, b->length / 2})
        for (const double y : {b->elevation, b->elevation + b->height}) {
          const double z = b->z + dz;
          if (z <= 1e-3) {
            behind = true;
            break;
          }
          corners.push_back(point_to_pixel(intr, b->x + dx, y, z));
        }
    if (behind || corners.size() < 8) continue;
    const auto hull = synthdetail::convex_hull(corners);
    double u_lo = 1e18, u_hi = -1e18, v_lo = 1e18, v_hi = -1e18;
    for (const auto& [u, v] : hull) {
      u_lo = std::min(u_lo, u);
      u_hi = std::max(u_hi, u);
      v_lo = std::min(v_lo, v);
      v_hi = std::max(v_hi, v);
    }
    const int j0 = std::max(0, static_cast<int>(std::floor(u_lo - 0.5)));
    const int j1 = std::min(image_w - 1, static_cast<int>(std::ceil(u_hi)));
    const int i0 = std::max(0, static_cast<int>(std::floor(v_lo - 0.5)));
    const int i1 = std::min(image_h - 1, static_cast<int>(std::ceil(v_hi)));
    const auto rgb = class_color(b->class_id);
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j)
        if (synthdetail::point_in_convex(hull, j + 0.5, i + 0.5))
          synthdetail::paint(img, i, j, rgb, b->brightness);
  }
  return img;
}

// Ground-truth occupancy and the frustum validity mask. A cell carries class
// c iff its center lies inside a class-c footprint; cells outside the image
// frustum at ground level are invalid and forced to zero.
inline std::pair<Tensor<std::uint8_t>, Tensor<std::uint8_t>> render_bev_gt(
    const Scene& scene, const BevGridSpec& grid, const CameraIntrinsics& intr, int num_classes,
    int image_h, int image_w) {
  grid.validate();
  intr.validate();
  const int z_cells = grid.depth_cells, x_cells = grid.lateral_cells;
  Tensor<std::uint8_t> labels({num_classes, z_cells, x_cells});
  Tensor<std::uint8_t> validity({z_cells, x_cells});

  for (int zi = 0; zi < z_cells; ++zi) {
    const double z = grid.cell_center_z(zi);
    for (int xi = 0; xi < x_cells; ++xi) {
      const double x = grid.cell_center_x(xi);
      const auto [u, v] = ground_to_pixel(intr, x, z);
      const bool valid = u >= 0.0 && u < image_w && v >= 0.0 && v < image_h;
      validity.at2(zi, xi) = valid ? 1 : 0;
      if (!valid) continue;
      for (const auto* list : {&scene.drivable, &scene.walkways})
        for (const auto& poly : *list)
          if (synthdetail::point_in_polygon(poly.pts, x, z))
            labels.at3(poly.class_id, zi, xi) = 1;
      for (const auto& b : scene.boxes)
        if (std::abs(x - b.x) <= b.width / 2 && std::abs(z - b.z) <= b.length / 2)
          labels.at3(b.class_id, zi, xi) = 1;
    }
  }
  return {std::move(labels), std::move(validity)};
}

// One generated sample: frontal image, BEV class bitmask, validity mask.
struct SampleRecord {
  int id = 0;
  std::string split;
  std::uint64_t scene_seed = 0;
  ImageU8 fv;
  ImageU16 bev_bits;  // bit c set <=> class c occupies the cell
  ImageU8 validity;   // 1 inside the frustum
  CameraIntrinsics intr;
  Scene scene;
};

inline SampleRecord make_sample(int id, std::uint64_t scene_seed, const SceneConfig& cfg,
                                const BevGridSpec& grid, const CameraIntrinsics& intr, int image_h,
                                int image_w) {
  SampleRecord s;
  s.id = id;
  s.scene_seed = scene_seed;
  s.intr = intr;
  s.scene = sample_scene(scene_seed, cfg);
  s.fv = render_fv(s.scene, intr, image_h, image_w);
  const auto [labels, validity] =
      render_bev_gt(s.scene, grid, intr, static_cast<int>(cfg.classes.size()), image_h, image_w);
  s.bev_bits = ImageU16(grid.depth_cells, grid.lateral_cells);
  s.validity = ImageU8(grid.depth_cells, grid.lateral_cells, 1);
  for (int zi = 0; zi < grid.depth_cells; ++zi)
    for (int xi = 0; xi < grid.lateral_cells; ++xi) {
      std::uint16_t bits = 0;
      for (size_t c = 0; c < cfg.classes.size(); ++c)
        if (labels.at3(static_cast<int>(c), zi, xi)) bits |= static_cast<std::uint16_t>(1u << c);
      s.bev_bits.at(zi, xi) = bits;
      s.validity.at(zi, xi, 0) = validity.at2(zi, xi);
    }
  return s;
}

// Expand the stored bitmask back into per-class binary planes.
inline Tensor<std::uint8_t> labels_from_bits(const ImageU16& bits, int num_classes) {
  Tensor<std::uint8_t> out({num_classes, bits.height, bits.width});
  for (int zi = 0; zi < bits.height; ++zi)
    for (int xi = 0; xi < bits.width; ++xi) {
      const std::uint16_t b = bits.at(zi, xi);
      for (int c = 0; c < num_classes; ++c)
        out.at3(c, zi, xi) = (b >> c) & 1u;
    }
  return out;
}

inline Tensor<std::uint8_t> validity_tensor(const ImageU8& validity) {
  Tensor<std::uint8_t> out({validity.height, validity.width});
  for (size_t i = 0; i < validity.data.size(); ++i) out[static_cast<std::int64_t>(i)] = validity.data[i] ? 1 : 0;
  return out;
}

// FV image as a [3, H, W] float tensor in [0, 1].
template <class T>
Tensor<T> image_to_tensor(const ImageU8& img) {
  Tensor<T> out({img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c)
    for (int i = 0; i < img.height; ++i)
      for (int j = 0; j < img.width; ++j)
        out.at3(c, i, j) = static_cast<T>(img.at(i, j, c)) / T(255);
  return out;
}

}  // namespace hft
