#pragma once

// The multi-view silhouette objective: a bidirectional Chamfer distance on
// sampled points, a pixel-wise cross-entropy gated by silhouette overlap,
// the per-scene aggregation, and shape regularizers.
//
// 2D point sets live in normalized image coordinates — pixel coordinates
// divided by the full-frame diagonal — so loss magnitudes are independent
// of image resolution.

#include "usl/diff.hpp"
#include "usl/geom.hpp"
#include "usl/render.hpp"

#include <Eigen/Dense>

#include <random>
#include <vector>

namespace usl::loss {

using diff::Array;
using diff::Tape;
using diff::Var;

struct PointSet2D {
  Array points;             // n x 2, normalized image coordinates
  Eigen::VectorXd weights;  // optional per-point mass; empty means uniform
  void validate() const;    // finite coords, weights >= 0 when present
};

enum class RegKind { edge, l2_offsets, l2_offsets_plus_laplacian };

struct LossWeights {
  double mu_3d = 1.0;
  double mu_reg = 0.05;  // the edge-regularized variant uses 0.1
  RegKind reg_kind = RegKind::l2_offsets_plus_laplacian;
  void validate() const;  // weights >= 0
};

// Mean over a of squared distance to the nearest point of b, plus the
// reverse direction; weighted means when masses are present.
double chamfer2d(const PointSet2D& a, const PointSet2D& b);

// Tape route over raw n x 2 coordinate blocks (uniform mass): gradients
// flow through the nearest pairs with the matching held fixed.
Var chamfer2d(Tape& tape, Var a_points, Var b_points);

// n points uniform over the foreground of a binary mask, each jittered
// inside its pixel.  Throws empty_mask_error when nothing is set.
PointSet2D sample_gt_silhouette(const Eigen::MatrixXi& mask, int n,
                                std::mt19937_64& rng);

// Area-weighted surface samples of a view-space mesh, moved into another
// view by `i_to_j` and pinhole-projected to normalized image coordinates.
// Samples that land behind the camera are dropped; if none survive,
// behind_camera_error.  The tape route keeps gradients flowing to the
// vertices (and through them to layout parameters upstream).
PointSet2D project_mesh_samples(const geom::Mesh& mesh, const geom::Camera& camera,
                                const geom::RigidTransform& i_to_j, int n,
                                std::mt19937_64& rng);
Var project_mesh_samples(Tape& tape, Var vertices, const Eigen::MatrixXi& faces,
                         const geom::Camera& camera, const geom::RigidTransform& i_to_j,
                         int n, std::mt19937_64& rng);

// Mean binary cross-entropy between a soft silhouette and a 0/1 target of
// the same shape; predictions clamped to [1e-7, 1 - 1e-7].
Var xent_silhouette(Tape& tape, const render::SoftSilhouette& pred, const Array& gt_region);

struct L2DTerms {
  Var value;   // l_dist + gate * l_xent
  Var l_dist;  // Chamfer between projected and ground-truth samples
  Var l_xent;  // cross-entropy over the render region
  double iou = 0.0;
  bool gate = false;  // iou > 0.5, evaluated without gradient
};

// The per-(object, view) loss.  `gt_region` is the ground-truth mask
// resampled on the prediction's grid; the overlap gate binarizes the soft
// silhouette at 0.5 and is a detached decision.
L2DTerms l2d(Tape& tape, const render::SoftSilhouette& pred, const Array& gt_region,
             Var projected_samples, const PointSet2D& gt_samples);

// Mean over objects of the mean over that object's visible views.  Views
// where an object's ground-truth mask is empty are simply absent from its
// inner list; an empty outer or inner list is invalid.
Var l3d(Tape& tape, const std::vector<std::vector<Var>>& per_object_view_terms);

// Shape regularizers.
Var reg_edge(Tape& tape, Var vertices, const Eigen::MatrixXi& faces);
Var reg_l2_offsets(Tape& tape, Var dv_raw);  // 1/2 * sum of squares, pre-tanh offsets
Var reg_laplacian(Tape& tape, Var vertices, const Eigen::MatrixXi& faces);

// Dispatch on LossWeights::reg_kind.
Var regularizer(Tape& tape, RegKind kind, Var vertices, const Eigen::MatrixXi& faces,
                Var dv_raw);

// mu_3d * l3d + mu_reg * reg.
Var total_loss(Tape& tape, Var l3d_value, Var reg_value, const LossWeights& weights);

}  // namespace usl::loss
