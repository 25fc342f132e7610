#include "usl/fit.hpp"

#include "usl/errors.hpp"
#include "usl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace usl::fit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double logit(double t) {
  const double c = std::clamp(t, 1e-6, 1.0 - 1e-6);
  return std::log(c / (1.0 - c));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double signed_noise(std::mt19937_64& rng) { return 2.0 * geom::uniform01(rng) - 1.0; }

// Moeller-Trumbore intersection of the ray t*dir (t > 0) from the origin
// with one triangle; infinity on a miss.
double ray_triangle(const Eigen::Vector3d& dir, const Eigen::Vector3d& a,
                    const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  const Eigen::Vector3d e1 = b - a, e2 = c - a;
  const Eigen::Vector3d p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-14) return kInf;
  const Eigen::Vector3d s = -a;  // ray origin is the frustum center
  const double u = s.dot(p) / det;
  if (u < -1e-9 || u > 1.0 + 1e-9) return kInf;
  const Eigen::Vector3d q = s.cross(e1);
  const double v = dir.dot(q) / det;
  if (v < -1e-9 || u + v > 1.0 + 1e-9) return kInf;
  const double t = e2.dot(q) / det;
  return t > 1e-9 ? t : kInf;
}

// Ground-truth mesh of one object mapped to reference-view coordinates.
geom::Mesh gt_in_reference(const scenegen::SceneBundle& bundle, size_t object) {
  geom::Mesh m = bundle.gt_world[object];
  const geom::RigidTransform to_ref{bundle.spec.cameras[0].rotation,
                                    bundle.spec.cameras[0].translation};
  m.vertices = geom::transform_points(to_ref, m.vertices);
  return m;
}

struct ParamBundle {
  AdamState z, rho, dv;
};

Eigen::MatrixXd grad_or_zero(const diff::Gradients& grads, diff::Var v) {
  if (grads.has(v)) return grads.grad(v);
  return Eigen::MatrixXd::Zero(v.rows(), v.cols());
}

}  // namespace

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("adam: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("adam: betas must lie in [0,1)");
  if (!(eps > 0.0)) throw std::invalid_argument("adam: eps must be positive");
}

void adam_step(Eigen::MatrixXd& params, const Eigen::MatrixXd& grads, AdamState& state,
               const AdamConfig& config) {
  config.validate();
  if (params.rows() != grads.rows() || params.cols() != grads.cols())
    throw std::invalid_argument("adam_step: parameter/gradient shape mismatch");
  if (!grads.allFinite()) throw numerical_error("adam_step: non-finite gradient");
  if (state.m.size() == 0) {
    state.m = Eigen::MatrixXd::Zero(params.rows(), params.cols());
    state.v = Eigen::MatrixXd::Zero(params.rows(), params.cols());
  }
  if (state.m.rows() != params.rows() || state.m.cols() != params.cols())
    throw std::invalid_argument("adam_step: state shape mismatch");
  ++state.step;
  state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads;
  state.v = (config.beta2 * state.v.array() + (1.0 - config.beta2) * grads.array().square())
                .matrix();
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  params.array() -=
      config.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + config.eps);
}

void FitConfig::validate() const {
  if (views < 1) throw std::invalid_argument("fit: views must be >= 1");
  if (views < 2 && !allow_single_view)
    throw std::invalid_argument("fit: single-view runs need the explicit opt-in");
  if (iterations < 1) throw std::invalid_argument("fit: iterations must be >= 1");
  AdamConfig{lr_layout, beta1, beta2, eps}.validate();
  AdamConfig{lr_shape, beta1, beta2, eps}.validate();
  weights.validate();
  if (render_size < 4) throw std::invalid_argument("fit: render_size too small");
  if (faces_per_pixel < 1 || faces_per_pixel > 64)
    throw std::invalid_argument("fit: faces_per_pixel out of range");
  if (!(blur_radius > 0.0) || !(blend_sigma > 0.0))
    throw std::invalid_argument("fit: blur and sigma must be positive");
  if (n_samples < 8) throw std::invalid_argument("fit: n_samples too small");
  if (!(logit_clamp > 0.0)) throw std::invalid_argument("fit: logit_clamp must be positive");
  if (!(perturb >= 0.0)) throw std::invalid_argument("fit: perturb must be >= 0");
  if (!(region_margin >= 0.0)) throw std::invalid_argument("fit: margin must be >= 0");
  bounds.validate();
}

double gt_depth(const scenegen::SceneBundle& bundle, size_t object) {
  if (object >= bundle.gt_world.size()) throw std::invalid_argument("gt_depth: bad object");
  const geom::Mesh m = gt_in_reference(bundle, object);
  const double lo = m.vertices.col(2).minCoeff(), hi = m.vertices.col(2).maxCoeff();
  return 0.5 * (lo + hi);
}

std::vector<ObjectHypothesis> init_hypotheses(const scenegen::SceneBundle& bundle,
                                              const FitConfig& config, std::mt19937_64& rng) {
  config.validate();
  if (bundle.views.empty()) throw std::invalid_argument("fit: bundle has no views");
  const geom::Mesh ico = geom::icosphere(3);
  const int n_verts = static_cast<int>(ico.vertices.rows());
  const geom::Camera& cam = bundle.spec.cameras[0];

  std::vector<ObjectHypothesis> hyps;
  for (size_t o = 0; o < bundle.gt_world.size(); ++o) {
    const scenegen::ObjectView& ref = bundle.views[0].objects[o];
    if (!ref.visible)
      throw std::invalid_argument("fit: object invisible in the reference view");
    ObjectHypothesis hyp;
    hyp.box = ref.box;
    hyp.z_logit = Eigen::MatrixXd::Zero(1, 1);
    hyp.rho_logit = Eigen::MatrixXd::Zero(1, 1);
    hyp.dv_raw = Eigen::MatrixXd::Zero(n_verts, 3);

    if (config.init == InitMode::sphere_center) {
      hyp.z_logit(0, 0) = config.init_z_logit;
    } else {
      // Invert the ground truth: mid-range depth and depth extent give
      // (z, rho); radial ray casts against the normalized ground-truth
      // surface give per-vertex offsets of the unit sphere.
      const geom::Mesh gt = gt_in_reference(bundle, o);
      const double lo = gt.vertices.col(2).minCoeff(), hi = gt.vertices.col(2).maxCoeff();
      const double z = std::clamp(0.5 * (lo + hi), config.bounds.z0 + 1e-6,
                                  config.bounds.z1 - 1e-6);
      const double rho =
          std::clamp(hi - lo, config.bounds.rho0 + 1e-6, config.bounds.rho1 - 1e-6);
      hyp.z_logit(0, 0) = logit((z - config.bounds.z0) / (config.bounds.z1 - config.bounds.z0));
      hyp.rho_logit(0, 0) =
          logit((rho - config.bounds.rho0) / (config.bounds.rho1 - config.bounds.rho0));

      const double bx = hyp.box.center_x(), by = hyp.box.center_y();
      const double hw = hyp.box.width() / 2, hh = hyp.box.height() / 2;
      Eigen::MatrixXd norm(gt.vertices.rows(), 3);
      for (Eigen::Index i = 0; i < gt.vertices.rows(); ++i) {
        const double d = gt.vertices(i, 2);
        norm(i, 0) = (gt.vertices(i, 0) * cam.fx / d + cam.cx - bx) / hw;
        norm(i, 1) = (gt.vertices(i, 1) * cam.fy / d + cam.cy - by) / hh;
        norm(i, 2) = 2.0 * (d - z) / rho;
      }
      for (int i = 0; i < n_verts; ++i) {
        const Eigen::Vector3d dir = ico.vertices.row(i).transpose();
        double t_exit = 0.0;  // farthest hit = the exit face seen from inside
        for (Eigen::Index f = 0; f < gt.faces.rows(); ++f) {
          const double t = ray_triangle(dir, norm.row(gt.faces(f, 0)).transpose(),
                                        norm.row(gt.faces(f, 1)).transpose(),
                                        norm.row(gt.faces(f, 2)).transpose());
          if (std::isfinite(t)) t_exit = std::max(t_exit, t);
        }
        if (t_exit > 0.0) {
          const Eigen::Vector3d offset = (t_exit - 1.0) * dir;
          for (int k = 0; k < 3; ++k)
            hyp.dv_raw(i, k) = std::atanh(std::clamp(offset(k), -1.0 + 1e-9, 1.0 - 1e-9));
        }
      }
    }

    if (config.perturb > 0.0) {
      hyp.z_logit(0, 0) += config.perturb * signed_noise(rng);
      hyp.rho_logit(0, 0) += config.perturb * signed_noise(rng);
      for (int i = 0; i < n_verts; ++i)
        for (int k = 0; k < 3; ++k)
          hyp.dv_raw(i, k) += 0.2 * config.perturb * signed_noise(rng);
    }
    hyps.push_back(std::move(hyp));
  }
  return hyps;
}

FittedObject decode_hypothesis(const ObjectHypothesis& hyp, const geom::Camera& camera,
                               const FitConfig& config) {
  const geom::Mesh ico = geom::icosphere(3);
  const double zl = std::clamp(hyp.z_logit(0, 0), -config.logit_clamp, config.logit_clamp);
  const double rl = std::clamp(hyp.rho_logit(0, 0), -config.logit_clamp, config.logit_clamp);
  const auto [rho, z] = geom::layout_decode(sigmoid(rl), sigmoid(zl), config.bounds);

  FittedObject out;
  out.z = z;
  out.rho = rho;
  out.box = hyp.box;
  out.hypothesis = hyp;
  Eigen::MatrixXd norm =
      (ico.vertices.array() + hyp.dv_raw.array().tanh()).cwiseMax(-1.0).cwiseMin(1.0);
  out.mesh.vertices = geom::frustum_apply(norm, geom::Frustum{hyp.box, z, rho}, camera);
  out.mesh.faces = ico.faces;
  out.mesh.space = geom::SpaceTag::view;
  return out;
}

FitResult fit_scene(const scenegen::SceneBundle& bundle, const FitConfig& config) {
  config.validate();
  const int total_views = static_cast<int>(bundle.views.size());
  const int m_views = config.views;
  if (m_views > total_views)
    throw std::invalid_argument("fit: config asks for more views than the bundle has");
  if (bundle.spec.cameras.size() != bundle.views.size())
    throw std::invalid_argument("fit: bundle camera/view count mismatch");

  std::mt19937_64 rng(config.seed);
  std::vector<ObjectHypothesis> hyps = init_hypotheses(bundle, config, rng);
  const size_t n_objects = hyps.size();
  const geom::Mesh ico = geom::icosphere(3);
  const geom::Camera& cam0 = bundle.spec.cameras[0];

  std::vector<geom::RigidTransform> to_view;
  for (int j = 0; j < m_views; ++j)
    to_view.push_back(geom::relative_transform(cam0, bundle.spec.cameras[static_cast<size_t>(j)]));

  // Sample draws are fixed at setup and re-evaluated at the current state
  // every iteration, so the objective is a smooth deterministic function and
  // Adam's normalized steps cannot random-walk on sampling noise.
  std::vector<Eigen::VectorXi> face_pick(n_objects);
  std::vector<Eigen::MatrixXd> bary_pick(n_objects);
  for (size_t o = 0; o < n_objects; ++o) {
    const geom::Mesh start = decode_hypothesis(hyps[o], cam0, config).mesh;
    const geom::SurfaceSamples s = geom::sample_surface(start, config.n_samples, rng);
    face_pick[o] = s.face_index;
    bary_pick[o] = s.bary;
  }

  // Per-(object, view) ground truth, cached once.
  std::vector<std::vector<Eigen::MatrixXd>> mask_d(n_objects);
  std::vector<std::vector<loss::PointSet2D>> gt_pts(n_objects);
  for (size_t o = 0; o < n_objects; ++o)
    for (int j = 0; j < m_views; ++j) {
      const scenegen::ObjectView& ov = bundle.views[static_cast<size_t>(j)].objects[o];
      mask_d[o].push_back(ov.mask.cast<double>());
      gt_pts[o].push_back(ov.visible
                              ? loss::sample_gt_silhouette(ov.mask, config.n_samples, rng)
                              : loss::PointSet2D{});
    }

  render::RenderConfig rcfg;
  rcfg.height = rcfg.width = config.render_size;
  rcfg.faces_per_pixel = config.faces_per_pixel;
  rcfg.blur_radius = config.blur_radius;
  rcfg.blend_sigma = config.blend_sigma;
  rcfg.cull_backfaces = true;

  std::vector<ParamBundle> states(n_objects);

  FitResult result;
  result.trace.reserve(static_cast<size_t>(config.iterations));
  double best_l3d = kInf;

  for (int it = 0; it < config.iterations; ++it) {
    diff::Tape tape;
    std::vector<diff::Var> z_vars, rho_vars, dv_vars, v0_vars, norm_vars;
    for (size_t o = 0; o < n_objects; ++o) {
      diff::Var zl = tape.input(hyps[o].z_logit);
      diff::Var rl = tape.input(hyps[o].rho_logit);
      diff::Var dv = tape.input(hyps[o].dv_raw);
      auto [rho, z] = geom::layout_decode(tape.sigmoid(rl), tape.sigmoid(zl), config.bounds);
      diff::Var norm = tape.clamp(tape.add(tape.constant(ico.vertices), tape.tanh(dv)), -1.0, 1.0);
      z_vars.push_back(zl);
      rho_vars.push_back(rl);
      dv_vars.push_back(dv);
      norm_vars.push_back(norm);
      v0_vars.push_back(geom::frustum_apply(norm, z, rho, hyps[o].box, cam0));
    }

    std::vector<std::vector<diff::Var>> per_object(n_objects);
    double dist_sum = 0.0, xent_sum = 0.0;
    for (int j = 0; j < m_views; ++j) {
      const geom::Camera& cam = bundle.spec.cameras[static_cast<size_t>(j)];
      const scenegen::ViewBundle& vb = bundle.views[static_cast<size_t>(j)];
      for (size_t o = 0; o < n_objects; ++o) {
        if (!vb.objects[o].visible) continue;
        diff::Var vj = (j == 0) ? v0_vars[o] : geom::transform_points(to_view[j], v0_vars[o]);
        geom::Box2D region{0.0, 0.0, static_cast<double>(cam.width),
                           static_cast<double>(cam.height)};
        if (config.dynamic_render) {
          geom::Mesh snapshot{vj.value(), ico.faces, geom::SpaceTag::view};
          region = render::dynamic_region(vb.objects[o].box, snapshot, cam,
                                          config.region_margin);
        }
        const render::SoftSilhouette soft =
            render::soft_rasterize(vj, ico.faces, cam, rcfg, region);
        const diff::Array gt_region = render::resample_region(
            mask_d[o][static_cast<size_t>(j)], region, config.render_size, config.render_size);
        diff::Var pts = geom::surface_points(v0_vars[o], ico.faces, face_pick[o], bary_pick[o]);
        auto [pix, depth] = geom::project(cam, geom::transform_points(to_view[j], pts));
        (void)depth;
        diff::Var projected = tape.scale(pix, 1.0 / render::ndc_scale(cam));
        const loss::L2DTerms terms =
            loss::l2d(tape, soft, gt_region, projected, gt_pts[o][static_cast<size_t>(j)]);
        diff::Var term = terms.value;
        if (!config.use_dist_loss)
          term = terms.gate ? terms.l_xent : tape.scale(terms.l_xent, 0.0);
        else
          dist_sum += terms.l_dist.scalar();
        if (terms.gate) xent_sum += terms.l_xent.scalar();
        per_object[o].push_back(term);
      }
    }

    diff::Var l3d_var = loss::l3d(tape, per_object);
    diff::Var reg_acc = loss::regularizer(tape, config.weights.reg_kind, norm_vars[0],
                                          ico.faces, dv_vars[0]);
    for (size_t o = 1; o < n_objects; ++o)
      reg_acc = tape.add(reg_acc, loss::regularizer(tape, config.weights.reg_kind,
                                                    norm_vars[o], ico.faces, dv_vars[o]));
    reg_acc = tape.scale(reg_acc, 1.0 / static_cast<double>(n_objects));
    diff::Var total = loss::total_loss(tape, l3d_var, reg_acc, config.weights);

    const double raw = l3d_var.scalar();
    const double tot = total.scalar();
    if (!std::isfinite(tot) || !std::isfinite(raw)) {
      result.diverged = true;
      break;
    }

    const diff::Gradients grads = tape.backward(total);
    std::vector<std::array<Eigen::MatrixXd, 3>> g(n_objects);
    bool finite = true;
    for (size_t o = 0; o < n_objects; ++o) {
      g[o] = {grad_or_zero(grads, z_vars[o]), grad_or_zero(grads, rho_vars[o]),
              grad_or_zero(grads, dv_vars[o])};
      finite = finite && g[o][0].allFinite() && g[o][1].allFinite() && g[o][2].allFinite();
    }
    if (!finite) {
      result.diverged = true;
      break;
    }

    best_l3d = std::min(best_l3d, raw);
    TraceRow row;
    row.iteration = it;
    row.l3d = best_l3d;
    row.l3d_raw = raw;
    const double share_total = dist_sum + xent_sum;
    row.dist_share = share_total > 0.0 ? dist_sum / share_total : 0.0;
    row.xent_share = share_total > 0.0 ? xent_sum / share_total : 0.0;
    row.total = tot;
    result.trace.push_back(row);

    // Linear learning-rate decay: Adam's normalized steps otherwise keep
    // bouncing at the initial step scale around the optimum.
    const double decay =
        1.0 - static_cast<double>(it) / static_cast<double>(config.iterations);
    const AdamConfig layout_adam{config.lr_layout * decay, config.beta1, config.beta2,
                                 config.eps};
    const AdamConfig shape_adam{config.lr_shape * decay, config.beta1, config.beta2,
                                config.eps};
    for (size_t o = 0; o < n_objects; ++o) {
      adam_step(hyps[o].z_logit, g[o][0], states[o].z, layout_adam);
      adam_step(hyps[o].rho_logit, g[o][1], states[o].rho, layout_adam);
      adam_step(hyps[o].dv_raw, g[o][2], states[o].dv, shape_adam);
      hyps[o].z_logit(0, 0) =
          std::clamp(hyps[o].z_logit(0, 0), -config.logit_clamp, config.logit_clamp);
      hyps[o].rho_logit(0, 0) =
          std::clamp(hyps[o].rho_logit(0, 0), -config.logit_clamp, config.logit_clamp);
    }
    result.iterations_run = it + 1;
  }

  for (const ObjectHypothesis& hyp : hyps)
    result.objects.push_back(decode_hypothesis(hyp, cam0, config));
  return result;
}

double held_out_iou(const scenegen::SceneBundle& bundle,
                    const std::vector<FittedObject>& objects, int first_view) {
  const int total_views = static_cast<int>(bundle.views.size());
  if (first_view < 0 || first_view >= total_views)
    throw std::invalid_argument("held_out_iou: no views at or after first_view");
  if (objects.size() != bundle.gt_world.size())
    throw std::invalid_argument("held_out_iou: object count mismatch");
  const geom::Camera& cam0 = bundle.spec.cameras[0];
  double sum = 0.0;
  int n = 0;
  for (int j = first_view; j < total_views; ++j) {
    const geom::Camera& cam = bundle.spec.cameras[static_cast<size_t>(j)];
    const geom::RigidTransform t = geom::relative_transform(cam0, cam);
    const scenegen::ViewBundle& vb = bundle.views[static_cast<size_t>(j)];
    const int h = static_cast<int>(vb.instance_map.rows());
    const int w = static_cast<int>(vb.instance_map.cols());
    for (size_t o = 0; o < objects.size(); ++o) {
      geom::Mesh m = objects[o].mesh;
      m.vertices = geom::transform_points(t, m.vertices);
      const render::HardRender hr = render::hard_rasterize({m}, cam, h, w);
      sum += metrics::mask_iou(render::instance_mask(hr, 1), vb.objects[o].mask);
      ++n;
    }
  }
  return sum / n;
}

}  // namespace usl::fit
