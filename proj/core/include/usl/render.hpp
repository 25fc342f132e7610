#pragma once

// Silhouette rendering: a differentiable soft rasterizer (sigmoid-of-distance
// per face, product aggregation over faces), a z-buffered hard rasterizer for
// ground-truth masks and depth, and dynamic render regions.
//
// Screen-space distances are measured in normalized device coordinates:
// pixel coordinates divided by the full-frame diagonal hypot(width, height),
// so blur_radius and blend_sigma are resolution-independent.

#include "usl/diff.hpp"
#include "usl/geom.hpp"

#include <Eigen/Dense>

#include <limits>
#include <vector>

namespace usl::render {

struct RenderConfig {
  int height = 128;
  int width = 128;
  int faces_per_pixel = 10;
  double blur_radius = 1e-3;  // squared NDC distance cutoff
  double blend_sigma = 1e-3;
  bool cull_backfaces = false;  // silhouette-safe speedup for closed meshes
  int threads = 1;              // pixel-band parallelism; merged in fixed order

  void validate() const;
};

struct SoftSilhouette {
  geom::Box2D region;  // full-frame pixel rectangle the raster covers
  diff::Var values;    // height x width, in [0,1]
};

struct HardRender {
  Eigen::MatrixXi instance_map;  // object id + 1; 0 = background
  Eigen::MatrixXd depth_map;     // meters; +inf where empty
};

inline double ndc_scale(const geom::Camera& cam) {
  return std::hypot(static_cast<double>(cam.width), static_cast<double>(cam.height));
}

// Differentiable silhouette of one mesh over `region`, sampled on a
// config.height x config.width grid of pixel centers spanning the region.
// Gradients flow to the view-space vertices.  Faces entirely behind the
// camera are dropped; vertices closer than 1e-4 m are clamped to that depth.
SoftSilhouette soft_rasterize(diff::Var vertices, const Eigen::MatrixXi& faces,
                              const geom::Camera& camera, const RenderConfig& config,
                              const geom::Box2D& region);

// Full-frame convenience overload.
SoftSilhouette soft_rasterize(diff::Var vertices, const Eigen::MatrixXi& faces,
                              const geom::Camera& camera, const RenderConfig& config);

// Z-buffered rasterization of several view-space meshes at pixel centers.
// Ties broken toward the lower object id, then the lower face index.
HardRender hard_rasterize(const std::vector<geom::Mesh>& meshes,
                          const geom::Camera& camera, int height, int width);

// Union of the GT mask box and the projected-vertex box, padded by `margin`
// pixels and clipped to the frame; the full frame when both are empty.
geom::Box2D dynamic_region(const geom::Box2D& gt_mask_box, const geom::Mesh& mesh,
                           const geom::Camera& camera, double margin);

// Bilinear sample of a full-frame field (H x W, pixel centers at
// integer+0.5) at arbitrary full-frame pixel coordinates, clamped at borders.
double sample_bilinear(const Eigen::MatrixXd& field, double px, double py);

// Bilinear resample of a full-frame image onto the height x width grid a
// soft raster over `region` uses, so targets align with predictions.
Eigen::MatrixXd resample_region(const Eigen::MatrixXd& image, const geom::Box2D& region,
                                int height, int width);

// Binary mask of an instance map restricted to one object id (1-based).
Eigen::MatrixXi instance_mask(const HardRender& hr, int object_id);

constexpr double kNearClip = 1e-4;

}  // namespace usl::render
