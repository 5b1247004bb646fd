#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "hft/tensor.hpp"

namespace hft {

// Pinhole intrinsics plus the camera's height above the ground plane.
// Extrinsics are fixed: zero pitch/roll, optical axis parallel to the ground.
struct CameraIntrinsics {
  double fx = 0;
  double fy = 0;
  double cx = 0;
  double cy = 0;
  double cam_height = 0;  // meters above ground, > 0

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ContractError("intrinsics: focal lengths must be positive");
    if (!(cam_height > 0)) throw ContractError("intrinsics: cam_height must be positive");
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

// Metric BEV grid. Depth axis is z (away from the camera), lateral axis is x,
// symmetric about the optical axis. `extents` assigns a contiguous depth range
// to each pyramid scale; extent boundaries must be cell-aligned.
struct BevGridSpec {
  int depth_cells = 0;    // Z
  int lateral_cells = 0;  // W
  double cell_size = 0;   // meters per cell
  double z_min = 0;
  double z_max = 0;
  std::vector<std::pair<double, double>> extents;  // ordered (z_lo, z_hi)

  void validate() const {
    if (depth_cells <= 0 || lateral_cells <= 0) throw ContractError("grid: cell counts must be positive");
    if (!(cell_size > 0)) throw ContractError("grid: cell_size must be positive");
    if (!(z_min > 0)) throw ContractError("grid: z_min must be positive");
    if (std::abs(depth_cells * cell_size - (z_max - z_min)) > 1e-9)
      throw ContractError("grid: depth_cells * cell_size must equal z_max - z_min");
    if (extents.empty()) throw ContractError("grid: at least one depth extent required");
    double z = z_min;
    for (const auto& [lo, hi] : extents) {
      if (std::abs(lo - z) > 1e-9 || !(hi > lo))
        throw ContractError("grid: extents must be ordered, disjoint and cover [z_min, z_max)");
      const double cells = (hi - lo) / cell_size;
      if (std::abs(cells - std::round(cells)) > 1e-9)
        throw ContractError("grid: extent boundaries must be cell-aligned");
      z = hi;
    }
    if (std::abs(z - z_max) > 1e-9) throw ContractError("grid: extents must end at z_max");
  }

  int num_extents() const { return static_cast<int>(extents.size()); }

  int extent_cell_begin(int i) const {
    return static_cast<int>(std::llround((extents[static_cast<size_t>(i)].first - z_min) / cell_size));
  }
  int extent_cell_count(int i) const {
    const auto& [lo, hi] = extents[static_cast<size_t>(i)];
    return static_cast<int>(std::llround((hi - lo) / cell_size));
  }

  double cell_center_z(int zi) const { return z_min + (zi + 0.5) * cell_size; }
  double cell_center_x(int xi) const { return (xi + 0.5 - lateral_cells * 0.5) * cell_size; }

  bool operator==(const BevGridSpec&) const = default;
};

// Project a ground-plane point (lateral x, depth z) to pixel coordinates.
// Image y-axis points down; the returned coordinates may exceed the image
// bounds, callers do their own clipping.
inline std::pair<double, double> ground_to_pixel(const CameraIntrinsics& intr, double x, double z) {
  if (!(z > 0)) throw ContractError("ground_to_pixel: depth must be positive");
  const double u = intr.fx * x / z + intr.cx;
  const double v = intr.fy * intr.cam_height / z + intr.cy;
  return {u, v};
}

// Project a point at `height` meters above the ground plane.
inline std::pair<double, double> point_to_pixel(const CameraIntrinsics& intr, double x, double height,
                                                double z) {
  if (!(z > 0)) throw ContractError("point_to_pixel: depth must be positive");
  const double u = intr.fx * x / z + intr.cx;
  const double v = intr.fy * (intr.cam_height - height) / z + intr.cy;
  return {u, v};
}

// Intersect the ray through pixel (u, v) with the ground plane. Only pixels
// below the horizon (v > cy) hit the ground in front of the camera.
inline std::pair<double, double> pixel_to_ground(const CameraIntrinsics& intr, double u, double v) {
  if (!(v > intr.cy)) throw ContractError("pixel_to_ground: pixel at or above the horizon");
  const double z = intr.fy * intr.cam_height / (v - intr.cy);
  const double x = (u - intr.cx) * z / intr.fx;
  return {x, z};
}

// Precomputed resampling table mapping BEV cells of one depth extent to
// fractional (depth-bin, column) coordinates in a height-flattened polar
// feature map of shape C x depth_bins x src_cols. Immutable once built.
struct ResampleMap {
  int z_cells = 0;     // rows of the BEV sub-grid (depth cells of the extent)
  int x_cells = 0;     // lateral cells
  int depth_bins = 0;  // D of the source polar map
  int src_cols = 0;    // U of the source polar map
  std::vector<double> u_f;          // size z_cells * x_cells
  std::vector<double> d_f;          // size z_cells * x_cells
  std::vector<std::uint8_t> valid;  // 1 if inside the camera frustum

  std::int64_t cells() const { return static_cast<std::int64_t>(z_cells) * x_cells; }
};

// Build the resampling table for one depth extent at one pyramid scale.
// u_f = (fx*x/z + cx) / stride, d_f spans [0, D-1] linearly in z across the
// extent. Cells whose projected column cannot be bilinearly interpolated from
// the source map are flagged out of frustum.
inline ResampleMap build_resample_map(const CameraIntrinsics& intr, const BevGridSpec& grid,
                                      int scale_stride, int extent_index, int image_width) {
  intr.validate();
  grid.validate();
  if (extent_index < 0 || extent_index >= grid.num_extents())
    throw ContractError("build_resample_map: extent index out of range");
  if (scale_stride <= 0 || image_width % scale_stride != 0)
    throw ContractError("build_resample_map: stride must divide the image width");
  const auto& [z_lo, z_hi] = grid.extents[static_cast<size_t>(extent_index)];
  if (!(z_lo > 0)) throw ContractError("build_resample_map: extent must start at positive depth");

  ResampleMap m;
  m.z_cells = grid.extent_cell_count(extent_index);
  m.x_cells = grid.lateral_cells;
  m.depth_bins = m.z_cells;
  m.src_cols = image_width / scale_stride;
  const std::int64_t n = m.cells();
  m.u_f.assign(static_cast<size_t>(n), 0.0);
  m.d_f.assign(static_cast<size_t>(n), 0.0);
  m.valid.assign(static_cast<size_t>(n), 0);

  const int z0 = grid.extent_cell_begin(extent_index);
  for (int zi = 0; zi < m.z_cells; ++zi) {
    const double z = grid.cell_center_z(z0 + zi);
    const double d = (z - z_lo) / (z_hi - z_lo) * (m.depth_bins - 1);
    for (int xi = 0; xi < m.x_cells; ++xi) {
      const double x = grid.cell_center_x(xi);
      const double u = (intr.fx * x / z + intr.cx) / scale_stride;
      const std::int64_t k = static_cast<std::int64_t>(zi) * m.x_cells + xi;
      m.u_f[static_cast<size_t>(k)] = u;
      m.d_f[static_cast<size_t>(k)] = d;
      m.valid[static_cast<size_t>(k)] = (u >= 0.0 && u <= m.src_cols - 1.0) ? 1 : 0;
    }
  }
  return m;
}

// Bilinear resampling of a polar feature map into BEV cells. Out-of-frustum
// cells are zero-filled. Forward only; the autodiff wrapper lives in graph.hpp.
template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& src, const ResampleMap& m) {
  if (src.ndim() != 3 || src.dim(1) != m.depth_bins || src.dim(2) != m.src_cols)
    throw ContractError("bilinear_sample: source dims do not match the resample map");
  const int channels = src.dim(0);
  Tensor<T> out({channels, m.z_cells, m.x_cells});
  const std::int64_t cells = m.cells();
  const std::int64_t plane = static_cast<std::int64_t>(m.depth_bins) * m.src_cols;
  for (std::int64_t k = 0; k < cells; ++k) {
    if (!m.valid[static_cast<size_t>(k)]) continue;
    double df = m.d_f[static_cast<size_t>(k)];
    double uf = m.u_f[static_cast<size_t>(k)];
    int d0 = static_cast<int>(std::floor(df));
    int u0 = static_cast<int>(std::floor(uf));
    if (d0 >= m.depth_bins - 1) d0 = m.depth_bins - 2;
    if (u0 >= m.src_cols - 1) u0 = m.src_cols - 2;
    if (d0 < 0) d0 = 0;
    if (u0 < 0) u0 = 0;
    const double fd = df - d0;
    const double fu = uf - u0;
    const double w00 = (1 - fd) * (1 - fu), w01 = (1 - fd) * fu;
    const double w10 = fd * (1 - fu), w11 = fd * fu;
    const std::int64_t s00 = static_cast<std::int64_t>(d0) * m.src_cols + u0;
    // Single-bin maps (depth_bins == 1) collapse the depth interpolation.
    const bool has_d1 = m.depth_bins > 1;
    const bool has_u1 = m.src_cols > 1;
    for (int c = 0; c < channels; ++c) {
      const T* sp = src.ptr() + c * plane;
      double acc = w00 * sp[s00];
      if (has_u1) acc += w01 * sp[s00 + 1];
      if (has_d1) acc += w10 * sp[s00 + m.src_cols];
      if (has_d1 && has_u1) acc += w11 * sp[s00 + m.src_cols + 1];
      out.ptr()[c * cells + k] = static_cast<T>(acc);
    }
  }
  return out;
}

}  // namespace hft
