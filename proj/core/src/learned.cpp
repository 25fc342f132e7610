#include "usl/learned.hpp"

#include "usl/errors.hpp"
#include "usl/loss.hpp"
#include "usl/net.hpp"
#include "usl/render.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace usl::learned {
namespace {

using diff::Tape;
using diff::Var;
using Array = Eigen::MatrixXd;

Array rand_array(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo,
                 double hi) {
  Array a(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) a(r, c) = lo + (hi - lo) * geom::uniform01(rng);
  return a;
}

struct NamedParam {
  std::string name;
  Array value;
  fit::AdamState state;
};

struct PerScene {
  Array image;  // reference-view joint silhouette, 0/1
  geom::Box2D box;
  Eigen::VectorXi face_index;
  Array bary;
  std::vector<geom::RigidTransform> to_view;
  std::vector<loss::PointSet2D> gt_points;  // empty points when invisible
};

}  // namespace

void LearnedConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("learned: steps must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("learned: lr must be positive");
  if (views < 1) throw std::invalid_argument("learned: views must be positive");
  if (n_samples < 1) throw std::invalid_argument("learned: n_samples must be positive");
  if (conv1 < 1 || conv2 < 1 || hidden < 1)
    throw std::invalid_argument("learned: channel widths must be positive");
  if (ico_level < 0 || ico_level > 5) throw std::invalid_argument("learned: bad ico_level");
  if (mu_reg < 0.0) throw std::invalid_argument("learned: mu_reg must be nonnegative");
  bounds.validate();
}

LearnedResult learned_overfit(const std::vector<scenegen::SceneBundle>& bundles,
                              const LearnedConfig& config) {
  config.validate();
  if (bundles.empty()) throw std::invalid_argument("learned: no scenes");
  for (const auto& bundle : bundles) {
    if (bundle.spec.objects.size() != 1)
      throw std::invalid_argument("learned: scenes must have exactly one object");
    if (static_cast<int>(bundle.views.size()) < config.views)
      throw std::invalid_argument("learned: a scene has fewer views than configured");
    if (!bundle.views[0].objects[0].visible)
      throw std::invalid_argument("learned: object invisible in the reference view");
  }

  const geom::Mesh ico = geom::icosphere(config.ico_level);
  const Eigen::MatrixXi edges = geom::mesh_edges(ico.faces);
  std::mt19937_64 rng(config.seed);

  // Weights, in a fixed order so reports and checkpoints are stable.
  const int c1 = config.conv1, c2 = config.conv2, hidden = config.hidden;
  std::vector<NamedParam> params;
  auto add_param = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols, double lo,
                       double hi) {
    params.push_back({name, rand_array(rows, cols, rng, lo, hi), {}});
  };
  add_param("backbone.k1", 9, c1, -0.3, 0.3);
  add_param("backbone.b1", 1, c1, -0.1, 0.3);
  add_param("backbone.k2", 9 * c1, c2, -0.3, 0.3);
  add_param("backbone.b2", 1, c2, -0.1, 0.3);
  for (int k = 0; k < 3; ++k) {
    const int cin = (k == 0 ? c2 : hidden) + 3;
    add_param("refine.conv" + std::to_string(k) + ".w0", cin, hidden, -0.3, 0.3);
    add_param("refine.conv" + std::to_string(k) + ".w1", cin, hidden, -0.3, 0.3);
  }
  add_param("refine.w_out", hidden + 3, 3, -0.3, 0.3);
  add_param("refine.b_out", 1, 3, -0.1, 0.1);
  add_param("layout.w0", c2, hidden, -0.3, 0.3);
  for (int i = 1; i < 4; ++i) add_param("layout.w" + std::to_string(i), hidden, hidden, -0.3, 0.3);
  for (int i = 0; i < 4; ++i) add_param("layout.b" + std::to_string(i), 1, hidden, -0.1, 0.3);
  add_param("layout.w_rho", hidden, 1, -0.3, 0.3);
  add_param("layout.b_rho", 1, 1, -0.1, 0.1);
  add_param("layout.w_z", hidden, 1, -0.3, 0.3);
  add_param("layout.b_z", 1, 1, -0.1, 0.1);

  // Fixed sample draws, as in the direct fit, so the objective is smooth.
  std::vector<PerScene> scenes;
  for (const auto& bundle : bundles) {
    PerScene s;
    s.image = bundle.views[0].instance_map.cast<double>().cwiseMin(1.0);
    s.box = bundle.views[0].objects[0].box;
    geom::Mesh init = ico;
    init.vertices = geom::frustum_apply(
        ico.vertices, geom::Frustum{s.box, 2.0, 0.5}, bundle.spec.cameras[0]);
    init.space = geom::SpaceTag::view;
    const auto draws = geom::sample_surface(init, config.n_samples, rng);
    s.face_index = draws.face_index;
    s.bary = draws.bary;
    for (int j = 0; j < config.views; ++j) {
      s.to_view.push_back(
          geom::relative_transform(bundle.spec.cameras[0], bundle.spec.cameras[j]));
      const auto& obj = bundle.views[j].objects[0];
      s.gt_points.push_back(obj.visible ? loss::sample_gt_silhouette(obj.mask, config.n_samples, rng)
                                        : loss::PointSet2D{});
    }
    scenes.push_back(std::move(s));
  }

  const fit::AdamConfig adam{config.lr, config.beta1, config.beta2, config.eps};
  LearnedResult result;
  for (int step = 0; step < config.steps; ++step) {
    Tape tp;
    std::vector<Var> w;
    w.reserve(params.size());
    for (const auto& p : params) w.push_back(tp.input(p.value));

    size_t i = 0;
    net::ConvBackboneWeights cw{w[i], w[i + 1], w[i + 2], w[i + 3]};
    i += 4;
    net::RefineStageWeights rw;
    for (size_t k = 0; k < 3; ++k) {
      rw.convs[k] = {w[i], w[i + 1]};
      i += 2;
    }
    rw.w_out = w[i++];
    rw.b_out = w[i++];
    net::LayoutHeadWeights lw;
    lw.w[0] = w[i++];
    for (size_t k = 1; k < 4; ++k) lw.w[k] = w[i++];
    for (size_t k = 0; k < 4; ++k) lw.b[k] = w[i++];
    lw.w_rho = w[i++];
    lw.b_rho = w[i++];
    lw.w_z = w[i++];
    lw.b_z = w[i++];

    std::vector<std::vector<Var>> terms;
    Var reg_sum;
    for (size_t s = 0; s < scenes.size(); ++s) {
      const auto& scene = scenes[s];
      const auto& cam0 = bundles[s].spec.cameras[0];
      net::FeatureMap fm = net::conv_backbone(tp, scene.image, cw);
      net::LayoutPrediction layout =
          net::layout_head_forward(tp, net::average_pool(tp, fm), lw, config.bounds);

      // The sampling frustum follows the current prediction but is detached;
      // layout gradients flow through the geometry below instead.
      const geom::Frustum sample_frustum{scene.box, layout.z.scalar(), layout.rho.scalar()};
      net::RefinementState state{tp.constant(ico.vertices), Var{}, 0};
      state = net::refine_stage(tp, state, fm, cam0, sample_frustum, edges, rw,
                                config.roialign ? net::SamplePath::roialign_vertalign
                                                : net::SamplePath::roimap);

      Var v0 = geom::frustum_apply(state.vertices, layout.z, layout.rho, scene.box, cam0);
      Var pts = geom::surface_points(v0, ico.faces, scene.face_index, scene.bary);

      std::vector<Var> view_terms;
      for (int j = 0; j < config.views; ++j) {
        if (scene.gt_points[j].points.rows() == 0) continue;
        Var pj = j == 0 ? pts : geom::transform_points(scene.to_view[j], pts);
        auto [pix, depth] = geom::project(bundles[s].spec.cameras[j], pj);
        Var proj = tp.scale(pix, 1.0 / render::ndc_scale(bundles[s].spec.cameras[j]));
        view_terms.push_back(
            loss::chamfer2d(tp, proj, tp.constant(scene.gt_points[j].points)));
      }
      if (view_terms.empty())
        throw std::invalid_argument("learned: object invisible in every used view");
      terms.push_back(std::move(view_terms));

      Var reg = loss::reg_edge(tp, state.vertices, ico.faces);
      reg_sum = reg_sum.valid() ? tp.add(reg_sum, reg) : reg;
    }

    Var objective = tp.add(loss::l3d(tp, terms),
                           tp.scale(reg_sum, config.mu_reg / static_cast<double>(scenes.size())));
    const double value = objective.scalar();
    if (!std::isfinite(value)) {
      result.diverged = true;
      break;
    }
    result.losses.push_back(value);
    auto grads = tp.backward(objective);

    if (step == 0)
      for (size_t k = 0; k < params.size(); ++k)
        result.first_step_grad_linf.emplace_back(
            params[k].name,
            grads.has(w[k]) ? grads.grad(w[k]).cwiseAbs().maxCoeff() : 0.0);

    bool bad = false;
    for (size_t k = 0; k < params.size() && !bad; ++k)
      bad = grads.has(w[k]) && !grads.grad(w[k]).allFinite();
    if (bad) {
      result.diverged = true;
      break;
    }
    for (size_t k = 0; k < params.size(); ++k) {
      const Array g =
          grads.has(w[k]) ? grads.grad(w[k]) : Array::Zero(params[k].value.rows(),
                                                           params[k].value.cols()).eval();
      fit::adam_step(params[k].value, g, params[k].state, adam);
    }
  }

  for (const auto& p : params) result.weights.emplace_back(p.name, p.value);
  return result;
}

}  // namespace usl::learned
