#pragma once

// Per-scene silhouette fitting: Adam on per-object layout logits and raw
// vertex offsets, differentiated through the frustum homography, the soft
// rasterizer, and the silhouette losses over a fixed set of views.

#include "usl/diff.hpp"
#include "usl/geom.hpp"
#include "usl/loss.hpp"
#include "usl/render.hpp"
#include "usl/scenegen.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace usl::fit {

struct AdamConfig {
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

struct AdamState {
  Eigen::MatrixXd m, v;  // first/second moments, allocated on first use
  long step = 0;
};

// One Adam update in place.  Gradients with NaN entries raise
// numerical_error before any state changes.
void adam_step(Eigen::MatrixXd& params, const Eigen::MatrixXd& grads, AdamState& state,
               const AdamConfig& config);

enum class InitMode { sphere_center, perturbed_gt };

struct FitConfig {
  int views = 5;                  // M cameras used by the objective
  bool allow_single_view = false; // M = 1 needs this explicit opt-in
  int iterations = 500;
  double lr_layout = 0.05;  // z / rho logits
  double lr_shape = 0.01;   // raw vertex offsets
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  loss::LossWeights weights;
  bool use_dist_loss = true;   // Chamfer term on/off (ablation)
  bool dynamic_render = true;  // concentrate raster samples on a region box
  int render_size = 56;        // soft raster grid edge
  int faces_per_pixel = 10;
  // Sub-pixel blur: the cutoff must stay below the projected face size of
  // the level-3 sphere, and the blend must decay fast enough that adjacent
  // faces stacking their halos cannot push the 0.5 crossing off the rim —
  // both otherwise fatten the silhouette against its own ground truth.
  double blur_radius = 3e-5;  // squared NDC cutoff
  double blend_sigma = 3e-6;
  double region_margin = 3.0;  // pixels around the dynamic region box
  int n_samples = 200;         // surface / silhouette samples per object-view
  std::uint64_t seed = 0;
  InitMode init = InitMode::sphere_center;
  double init_z_logit = 0.0;  // sphere_center starting depth logit
  double perturb = 0.0;       // perturbed_gt noise half-range
  double logit_clamp = 12.0;  // projection bound after each step
  geom::LayoutBounds bounds;
  void validate() const;
};

// Optimization state of one object.  The box is pinned to the ground-truth
// reference-view mask; everything else is free.
struct ObjectHypothesis {
  geom::Box2D box;
  Eigen::MatrixXd z_logit;    // 1 x 1
  Eigen::MatrixXd rho_logit;  // 1 x 1
  Eigen::MatrixXd dv_raw;     // 642 x 3, offsets through tanh
};

struct FittedObject {
  geom::Mesh mesh;  // reference-view coordinates
  double z = 0.0, rho = 0.0;
  geom::Box2D box;
  ObjectHypothesis hypothesis;  // final raw state
};

struct TraceRow {
  int iteration = 0;
  double l3d = 0.0;         // monotone-smoothed (running best) data term
  double l3d_raw = 0.0;     // unsmoothed value at this iteration
  double dist_share = 0.0;  // fraction of the data term from the Chamfer part
  double xent_share = 0.0;
  double total = 0.0;  // weighted objective including regularizers
};

struct FitResult {
  std::vector<FittedObject> objects;
  std::vector<TraceRow> trace;
  bool diverged = false;
  int iterations_run = 0;
};

// Fits all objects jointly against views 0..M-1 of the bundle.  Every
// object must be visible in the reference view.  A non-finite loss aborts
// with the last good state and diverged = true.
FitResult fit_scene(const scenegen::SceneBundle& bundle, const FitConfig& config);

// Initialization only (exposed for inspection and tests).
std::vector<ObjectHypothesis> init_hypotheses(const scenegen::SceneBundle& bundle,
                                              const FitConfig& config, std::mt19937_64& rng);

// Reference-view mesh and decoded layout of one hypothesis.
FittedObject decode_hypothesis(const ObjectHypothesis& hyp, const geom::Camera& camera,
                               const FitConfig& config);

// Mean over views >= first_view (and over objects) of solo-mask IoU between
// the fitted meshes and the baked ground truth: the held-out score when
// first_view = config.views.
double held_out_iou(const scenegen::SceneBundle& bundle,
                    const std::vector<FittedObject>& objects, int first_view);

// Mid-range depth of an object's ground-truth mesh in the reference view:
// the target the fitted z is compared against.
double gt_depth(const scenegen::SceneBundle& bundle, size_t object);

}  // namespace usl::fit
