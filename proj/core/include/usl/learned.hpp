#pragma once

// Toy learned mode: a tiny conv backbone, one refinement stage, and the
// layout head, trained jointly across scenes with Adam.  This is the
// flag-gated counterpart of the direct per-scene fit; it exists to show the
// same loss and geometry gradients reach network weights, not to be a
// competitive model.  Scenes must have exactly one object (the global
// average pool has no RoI association).

#include "usl/fit.hpp"
#include "usl/geom.hpp"
#include "usl/scenegen.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace usl::learned {

struct LearnedConfig {
  int steps = 2000;
  double lr = 1e-3;  // Adam rate for network weights
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int views = 2;       // views per scene entering the loss
  int n_samples = 80;  // surface / silhouette samples per object-view
  int conv1 = 8, conv2 = 6;  // backbone channel widths
  int hidden = 16;           // graph-conv width in the refinement stage
  int ico_level = 2;
  double mu_reg = 0.01;  // edge regularizer weight
  bool roialign = false;  // sample vertex features via the RoI baseline path
  std::uint64_t seed = 0;
  geom::LayoutBounds bounds;

  void validate() const;  // throws std::invalid_argument
};

struct LearnedResult {
  std::vector<double> losses;  // one entry per step, full-batch objective
  // Largest-magnitude gradient seen per weight array on the first step; an
  // all-zero entry means that array is cut off from the loss.
  std::vector<std::pair<std::string, double>> first_step_grad_linf;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> weights;  // final values
  bool diverged = false;
};

// Full-batch Adam training of the weights against the fit objective on all
// bundles jointly.  Deterministic for a fixed config.
LearnedResult learned_overfit(const std::vector<scenegen::SceneBundle>& bundles,
                              const LearnedConfig& config);

}  // namespace usl::learned
