#include "usl/metrics.hpp"

#include "usl/kdtree.hpp"
#include "usl/render.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace usl::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::uint64_t kSeedMix = 0x9e3779b97f4a7c15ull;

// Solo hard render of one view-space mesh: mask, tight pixel box, and the
// nearest depth over the mask.
struct SoloView {
  Eigen::MatrixXi mask;
  geom::Box2D box;
  double nearest = kInf;
  bool visible = false;
};

SoloView render_solo(const geom::Mesh& view_mesh, const geom::Camera& camera, int height,
                     int width) {
  const render::HardRender hr = render::hard_rasterize({view_mesh}, camera, height, width);
  SoloView out;
  out.mask = (hr.instance_map.array() > 0).cast<int>().matrix();
  int r0 = height, r1 = -1, c0 = width, c1 = -1;
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      if (!out.mask(r, c)) continue;
      out.visible = true;
      out.nearest = std::min(out.nearest, hr.depth_map(r, c));
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  if (out.visible)
    out.box = {static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1),
               static_cast<double>(r1 + 1)};
  return out;
}

Eigen::MatrixXd sampled_points(const geom::Mesh& mesh, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return geom::sample_surface(mesh, n, rng).points;
}

// Per-view scores against the baked ground truth.  giou and depth are empty
// when no object is GT-visible in the view.
struct ViewScores {
  double iou = 0.0;
  std::optional<double> giou;
  std::optional<double> depth;
};

ViewScores score_view(const PredictedScene& pred, const scenegen::SceneBundle& bundle, int view,
                      const EvalConfig& config) {
  const scenegen::ViewBundle& vb = bundle.views[static_cast<size_t>(view)];
  const geom::Camera& cam = bundle.spec.cameras[static_cast<size_t>(view)];
  const int height = static_cast<int>(vb.instance_map.rows());
  const int width = static_cast<int>(vb.instance_map.cols());
  const geom::RigidTransform to_view =
      geom::relative_transform(bundle.spec.cameras[0], cam);

  ViewScores scores;
  double giou_sum = 0.0, depth_sum = 0.0;
  int n_visible = 0;
  for (size_t o = 0; o < pred.meshes.size(); ++o) {
    geom::Mesh pm = pred.meshes[o];
    pm.vertices = geom::transform_points(to_view, pm.vertices);
    const SoloView sv = render_solo(pm, cam, height, width);
    const scenegen::ObjectView& gt = vb.objects[o];
    scores.iou += mask_iou(sv.mask, gt.mask);
    if (!gt.visible) continue;
    ++n_visible;
    giou_sum += sv.visible ? box_giou(sv.box, gt.box) : -1.0;
    depth_sum += sv.visible ? std::abs(sv.nearest - gt.nearest_depth)
                            : std::abs(config.z_far - gt.nearest_depth);
  }
  scores.iou /= static_cast<double>(pred.meshes.size());
  if (n_visible > 0) {
    scores.giou = giou_sum / n_visible;
    scores.depth = depth_sum / n_visible;
  }
  return scores;
}

void check_pair(const PredictedScene& pred, const scenegen::SceneBundle& bundle) {
  if (bundle.views.size() < 2)
    throw std::invalid_argument("metrics: bundle needs at least 2 views");
  if (bundle.spec.cameras.size() != bundle.views.size())
    throw std::invalid_argument("metrics: bundle camera/view count mismatch");
  if (pred.meshes.size() != bundle.gt_world.size() ||
      pred.meshes.size() != bundle.views[0].objects.size())
    throw std::invalid_argument("metrics: prediction/bundle object count mismatch");
  if (pred.meshes.empty()) throw std::invalid_argument("metrics: scene has no objects");
  for (const geom::Mesh& m : pred.meshes) m.validate();
}

}  // namespace

void EvalConfig::validate() const {
  if (chamfer_samples < 1) throw std::invalid_argument("EvalConfig: chamfer_samples < 1");
  if (!(tau > 0.0)) throw std::invalid_argument("EvalConfig: tau must be positive");
  if (!(z_far > 0.0)) throw std::invalid_argument("EvalConfig: z_far must be positive");
}

double mask_iou(const Eigen::MatrixXi& a, const Eigen::MatrixXi& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mask_iou: shape mismatch");
  const auto fa = (a.array() != 0), fb = (b.array() != 0);
  const long inter = (fa && fb).count();
  const long uni = (fa || fb).count();
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double box_giou(const geom::Box2D& a, const geom::Box2D& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("box_giou: invalid box");
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) *
                      (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
  return inter / uni - (hull - uni) / hull;
}

double chamfer3d(const geom::Mesh& pred, const geom::Mesh& gt, int n_samples,
                 std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("chamfer3d: n_samples < 1");
  pred.validate();
  gt.validate();
  const Eigen::MatrixXd pp = sampled_points(pred, n_samples, seed);
  const Eigen::MatrixXd gp = sampled_points(gt, n_samples, seed ^ kSeedMix);
  const KdTree<3> pred_tree(pp), gt_tree(gp);
  double to_gt = 0.0, to_pred = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    to_gt += gt_tree.nearest(pp.row(i)).d2;
    to_pred += pred_tree.nearest(gp.row(i)).d2;
  }
  return (to_gt + to_pred) / n_samples;
}

double f1_at(const geom::Mesh& pred, const geom::Mesh& gt, double tau, int n_samples,
             std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("f1_at: n_samples < 1");
  if (!(tau > 0.0)) throw std::invalid_argument("f1_at: tau must be positive");
  pred.validate();
  gt.validate();
  const Eigen::MatrixXd pp = sampled_points(pred, n_samples, seed);
  const Eigen::MatrixXd gp = sampled_points(gt, n_samples, seed ^ kSeedMix);
  const KdTree<3> pred_tree(pp), gt_tree(gp);
  const double tau2 = tau * tau;
  int hit_p = 0, hit_g = 0;
  for (int i = 0; i < n_samples; ++i) {
    if (gt_tree.nearest(pp.row(i)).d2 <= tau2) ++hit_p;
    if (pred_tree.nearest(gp.row(i)).d2 <= tau2) ++hit_g;
  }
  const double precision = static_cast<double>(hit_p) / n_samples;
  const double recall = static_cast<double>(hit_g) / n_samples;
  if (precision + recall == 0.0) return 0.0;
  return 100.0 * 2.0 * precision * recall / (precision + recall);
}

std::optional<double> depth_l1(const PredictedScene& pred, const scenegen::SceneBundle& bundle,
                               int view, const EvalConfig& config) {
  config.validate();
  check_pair(pred, bundle);
  if (view < 0 || view >= static_cast<int>(bundle.views.size()))
    throw std::invalid_argument("depth_l1: view out of range");
  return score_view(pred, bundle, view, config).depth;
}

EvalReport evaluate(const std::vector<PredictedScene>& preds,
                    const std::vector<scenegen::SceneBundle>& bundles,
                    const EvalConfig& config) {
  config.validate();
  if (preds.size() != bundles.size())
    throw std::invalid_argument("evaluate: prediction/bundle scene count mismatch");
  if (preds.empty()) throw std::invalid_argument("evaluate: no scenes");

  EvalReport report;
  report.scenes.reserve(preds.size());
  for (size_t s = 0; s < preds.size(); ++s) {
    const PredictedScene& pred = preds[s];
    const scenegen::SceneBundle& bundle = bundles[s];
    check_pair(pred, bundle);

    SceneEval ev;
    // 3D metrics compare reference-view meshes object by object.  Sample
    // seeds depend on the object index only, so scene order cannot change
    // any per-scene value.
    const geom::RigidTransform to_ref{bundle.spec.cameras[0].rotation,
                                      bundle.spec.cameras[0].translation};
    for (size_t o = 0; o < pred.meshes.size(); ++o) {
      geom::Mesh gt = bundle.gt_world[o];
      gt.vertices = geom::transform_points(to_ref, gt.vertices);
      const std::uint64_t seed = config.seed + kSeedMix * (o + 1);
      ev.chamfer3d += chamfer3d(pred.meshes[o], gt, config.chamfer_samples, seed);
      ev.f1_at_0p1 += f1_at(pred.meshes[o], gt, config.tau, config.chamfer_samples, seed);
    }
    ev.chamfer3d /= static_cast<double>(pred.meshes.size());
    ev.f1_at_0p1 /= static_cast<double>(pred.meshes.size());

    const ViewScores input = score_view(pred, bundle, 0, config);
    ev.mask2d_iou_input = input.iou;
    ev.box2d_giou_input = input.giou.value_or(0.0);
    ev.depth_l1_input = input.depth.value_or(0.0);

    double iou_sum = 0.0, giou_sum = 0.0, depth_sum = 0.0;
    int n_views = 0, n_giou = 0, n_depth = 0;
    for (int j = 1; j < static_cast<int>(bundle.views.size()); ++j) {
      const ViewScores vs = score_view(pred, bundle, j, config);
      iou_sum += vs.iou;
      ++n_views;
      if (vs.giou) {
        giou_sum += *vs.giou;
        ++n_giou;
      }
      if (vs.depth) {
        depth_sum += *vs.depth;
        ++n_depth;
      }
    }
    ev.mask2d_iou_views = iou_sum / n_views;
    ev.box2d_giou_views = n_giou ? giou_sum / n_giou : 0.0;
    ev.depth_l1_views = n_depth ? depth_sum / n_depth : 0.0;
    report.scenes.push_back(ev);
  }

  SceneEval& agg = report.aggregate;
  for (const SceneEval& ev : report.scenes) {
    agg.mask2d_iou_input += ev.mask2d_iou_input;
    agg.mask2d_iou_views += ev.mask2d_iou_views;
    agg.box2d_giou_input += ev.box2d_giou_input;
    agg.box2d_giou_views += ev.box2d_giou_views;
    agg.depth_l1_input += ev.depth_l1_input;
    agg.depth_l1_views += ev.depth_l1_views;
    agg.chamfer3d += ev.chamfer3d;
    agg.f1_at_0p1 += ev.f1_at_0p1;
  }
  const double n = static_cast<double>(report.scenes.size());
  agg.mask2d_iou_input /= n;
  agg.mask2d_iou_views /= n;
  agg.box2d_giou_input /= n;
  agg.box2d_giou_views /= n;
  agg.depth_l1_input /= n;
  agg.depth_l1_views /= n;
  agg.chamfer3d /= n;
  agg.f1_at_0p1 /= n;
  return report;
}

}  // namespace usl::metrics
