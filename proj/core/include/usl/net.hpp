#pragma once

// Shape and layout prediction plumbing at toy scale: vertex feature sampling
// (a direct feature-map path and a fixed-grid RoI path), graph convolutions,
// bounded vertex refinement stages, and the layout head.  Everything runs on
// the tape, with or without learnable weights.
//
// Graph convolutions follow f'_i = relu(W0 f_i + sum_{j in N(i)} W1 f_j)
// with no bias; Linear layers carry a bias row.

#include "usl/diff.hpp"
#include "usl/geom.hpp"

#include <Eigen/Dense>

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace usl::net {

using diff::Array;
using diff::Tape;
using diff::Var;

// A feature grid over the image; cell (r, c) stores the feature row r*W + c.
// `stride` is image pixels per cell.
struct FeatureMap {
  Var values;  // (H*W) x C
  int width = 0, height = 0;
  double stride = 1.0;

  Eigen::Index channels() const { return values.cols(); }
  void validate() const;  // sizes >= 1, stride > 0, row count H*W
};

// Bilinear interpolation of feature rows at fractional cell coordinates
// (cell (r, c) center sits at (c + 0.5, r + 0.5)); coordinates clamp to the
// border, where their gradient vanishes.  Differentiable in both arguments.
Var bilinear_sample(Var features, int height, int width, Var coords);

// Per-vertex features plus the sampling coordinates that produced them
// (feature-grid cells for the direct path, RoI-grid cells for the RoI path).
struct VertexSamples {
  Var features;  // V x C
  Var coords;    // V x 2
};

// Direct path: warp normalized vertices into the frustum, project, divide by
// stride, and sample the feature map.  Sample spacing is an isotropic
// scaling of image coordinates.
VertexSamples roimap(Tape& tape, const FeatureMap& fm, const geom::Camera& camera,
                     const geom::Frustum& frustum, Var vertices);

// RoI path: resample the frustum box to a fixed roi_size x roi_size grid
// first, then sample vertices from that grid in box-relative coordinates.
// Spacing follows the box aspect ratio, so it is anisotropic in image space.
VertexSamples roialign_vertalign(Tape& tape, const FeatureMap& fm,
                                 const geom::Camera& camera, const geom::Frustum& frustum,
                                 Var vertices, int roi_size = 14);

// Sum of neighbor feature rows along undirected edges.
Var neighbor_sum(Tape& tape, Var features, const Eigen::MatrixXi& edges);

// f'_i = relu(W0 f_i + sum_{j in N(i)} W1 f_j); weights are C_in x C_out.
Var graph_conv(Tape& tape, Var features, const Eigen::MatrixXi& edges, Var w0, Var w1);

struct GraphConvWeights {
  Var w0, w1;
};

struct RefineStageWeights {
  std::array<GraphConvWeights, 3> convs;
  Var w_out;  // (hidden + 3) x 3
  Var b_out;  // 1 x 3
};

struct RefinementState {
  Var vertices;  // V x 3, normalized space, within [-1, 1]
  Var features;  // V x C from the previous stage (unused by stage logic here)
  int stage = 0;
};

// Which vertex-feature sampling path a refinement stage uses; the RoI path
// exists as an ablation baseline.
enum class SamplePath { roimap, roialign_vertalign };

// One refinement stage: sample vertex features, concatenate the coordinates
// before each of three graph convolutions, then a linear layer + tanh for a
// bounded offset; new vertices = clamp(V + dV, -1, 1).
RefinementState refine_stage(Tape& tape, const RefinementState& state,
                             const FeatureMap& fm, const geom::Camera& camera,
                             const geom::Frustum& frustum, const Eigen::MatrixXi& edges,
                             const RefineStageWeights& weights,
                             SamplePath path = SamplePath::roimap);

struct LayoutHeadWeights {
  std::array<Var, 4> w;  // C -> 256, then 256 -> 256
  std::array<Var, 4> b;  // 1 x 256 each
  Var w_rho, b_rho;      // 256 x K, 1 x K
  Var w_z, b_z;
};

struct LayoutPrediction {
  Var rho_t, z_t;  // 1 x K, in (0, 1)
  Var rho, z;      // decoded to the bounds
};

// Mean feature row over all cells; the layout head's pooled input.
Var average_pool(Tape& tape, const FeatureMap& fm);

// 4 hidden linear+relu layers, two per-category sigmoid heads, then
// layout_decode against the bounds.
LayoutPrediction layout_head_forward(Tape& tape, Var pooled, const LayoutHeadWeights& weights,
                                     const geom::LayoutBounds& bounds);

// ---- toy backbones ----

// Fixed-function features from a grayscale image in [0, 1]: per-cell mean
// intensity, horizontal/vertical gradients, and normalized cell coordinates
// (5 channels).  Constant on the tape; fit mode uses this.
FeatureMap fixed_backbone(Tape& tape, const Eigen::MatrixXd& image, int stride);

// Patch extraction for stride-s k x k convolution via matmul: each output
// row holds the flattened patch for one output cell.  `channels` splits the
// input rows into (H*W) cells of that many columns.
Var im2col(Tape& tape, Var cells, int height, int width, int ksize, int stride);

struct ConvBackboneWeights {
  Var k1, b1;  // 9 x C1, 1 x C1
  Var k2, b2;  // (9*C1) x C2, 1 x C2
};

// Two 3x3 stride-2 convolutions with relu; overall stride 4.
FeatureMap conv_backbone(Tape& tape, const Eigen::MatrixXd& image,
                         const ConvBackboneWeights& weights);

// ---- weight checkpoints ----

// Flat binary record: magic "USLW", version u16, count u32, then per array
// a length-prefixed name, u32 rows, u32 cols, and column-major f64 payload.
// Little-endian throughout.  Failures throw io_error.
void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Eigen::MatrixXd>>& arrays);
std::vector<std::pair<std::string, Eigen::MatrixXd>> load_weights(const std::string& path);

}  // namespace usl::net
