#pragma once

// Evaluation metrics: 2D mask IoU, box gIoU, nearest-depth L1, 3D Chamfer
// distance, and F1 at a distance threshold, plus the scene-set aggregator.
//
// Predicted meshes live in reference-view (camera 0) coordinates; ground
// truth comes from baked SceneBundles.  Per-object renders are solo (an
// object is never occluded by its siblings), matching the baked masks.

#include "usl/geom.hpp"
#include "usl/scenegen.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

namespace usl::metrics {

// |a AND b| / |a OR b| over nonzero pixels; 1 when both masks are empty,
// 0 when exactly one is.  Shapes must match.
double mask_iou(const Eigen::MatrixXi& a, const Eigen::MatrixXi& b);

// IoU(a,b) - (|hull| - |a UNION b|) / |hull|, hull = smallest enclosing box.
// In (-1, 1]; equals IoU when one box contains the other.  Boxes must be
// valid.
double box_giou(const geom::Box2D& a, const geom::Box2D& b);

struct EvalConfig {
  int chamfer_samples = 10000;
  double tau = 0.1;       // F1 distance threshold, meters
  double z_far = 10.0;    // empty-render depth penalty reference
  std::uint64_t seed = 0x3d;

  void validate() const;
};

// Bidirectional mean squared nearest-neighbor distance between surface
// samples (n from each mesh).  Deterministic for a fixed seed.
double chamfer3d(const geom::Mesh& pred, const geom::Mesh& gt, int n_samples = 10000,
                 std::uint64_t seed = 0x3d);

// Harmonic mean of precision and recall at distance tau, in percent.
double f1_at(const geom::Mesh& pred, const geom::Mesh& gt, double tau = 0.1,
             int n_samples = 10000, std::uint64_t seed = 0x3d);

struct PredictedScene {
  std::vector<geom::Mesh> meshes;  // reference-view coordinates, one per GT object
};

// Mean over GT-visible objects of |predicted nearest depth - GT nearest
// depth| in view j; a prediction that renders empty contributes
// |z_far - gt|.  Empty when no object is GT-visible in that view.
std::optional<double> depth_l1(const PredictedScene& pred, const scenegen::SceneBundle& bundle,
                               int view, const EvalConfig& config = {});

struct SceneEval {
  double mask2d_iou_input = 0.0, mask2d_iou_views = 0.0;
  double box2d_giou_input = 0.0, box2d_giou_views = 0.0;
  double depth_l1_input = 0.0, depth_l1_views = 0.0;
  double chamfer3d = 0.0, f1_at_0p1 = 0.0;
};

struct EvalReport {
  std::vector<SceneEval> scenes;
  SceneEval aggregate;  // mean over scenes
};

// Input metrics from view 0, views metrics averaged over views 1..M-1, both
// then averaged over scenes.  Predictions pair with bundles by index; object
// counts must match.  Scene and view order do not change the aggregates.
EvalReport evaluate(const std::vector<PredictedScene>& preds,
                    const std::vector<scenegen::SceneBundle>& bundles,
                    const EvalConfig& config = {});

}  // namespace usl::metrics
