#include "usl/loss.hpp"

#include "usl/errors.hpp"
#include "usl/kdtree.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace usl::loss {

namespace {

Array scalar_array(double v) {
  Array a(1, 1);
  a(0, 0) = v;
  return a;
}

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

void PointSet2D::validate() const {
  require(points.rows() == 0 || points.cols() == 2, "PointSet2D: points must be n x 2");
  require(points.allFinite(), "PointSet2D: non-finite coordinates");
  if (weights.size() != 0) {
    require(weights.size() == points.rows(), "PointSet2D: weight count mismatch");
    require((weights.array() >= 0.0).all(), "PointSet2D: negative weight");
  }
}

void LossWeights::validate() const {
  require(mu_3d >= 0.0 && mu_reg >= 0.0, "LossWeights: weights must be >= 0");
}

double chamfer2d(const PointSet2D& a, const PointSet2D& b) {
  a.validate();
  b.validate();
  require(a.points.rows() > 0 && b.points.rows() > 0, "chamfer2d: empty point set");

  const KdTree<2> tree_a(a.points), tree_b(b.points);
  auto directed = [](const PointSet2D& from, const KdTree<2>& to) {
    double acc = 0.0, mass = 0.0;
    for (Eigen::Index i = 0; i < from.points.rows(); ++i) {
      const double w = from.weights.size() ? from.weights(i) : 1.0;
      acc += w * to.nearest(from.points.row(i)).d2;
      mass += w;
    }
    if (mass <= 0.0) throw std::invalid_argument("chamfer2d: zero total mass");
    return acc / mass;
  };
  return directed(a, tree_b) + directed(b, tree_a);
}

Var chamfer2d(Tape& tape, Var a_points, Var b_points) {
  const Array& A = a_points.value();
  const Array& B = b_points.value();
  require(A.cols() == 2 && B.cols() == 2, "chamfer2d: points must be n x 2");
  require(A.rows() > 0 && B.rows() > 0, "chamfer2d: empty point set");
  const Eigen::Index na = A.rows(), nb = B.rows();

  const KdTree<2> tree_a(A), tree_b(B);
  std::vector<Eigen::Index> to_b(static_cast<size_t>(na));
  std::vector<Eigen::Index> to_a(static_cast<size_t>(nb));
  double va = 0.0, vb = 0.0;
  for (Eigen::Index i = 0; i < na; ++i) {
    const auto hit = tree_b.nearest(A.row(i));
    to_b[static_cast<size_t>(i)] = hit.index;
    va += hit.d2;
  }
  for (Eigen::Index j = 0; j < nb; ++j) {
    const auto hit = tree_a.nearest(B.row(j));
    to_a[static_cast<size_t>(j)] = hit.index;
    vb += hit.d2;
  }
  const double value = va / static_cast<double>(na) + vb / static_cast<double>(nb);

  auto backward = [to_b = std::move(to_b), to_a = std::move(to_a), na, nb](
                      const Array& grad_out, const Array&,
                      const std::vector<const Array*>& pv, const std::vector<Array*>& pg) {
    const Array& av = *pv[0];
    const Array& bv = *pv[1];
    Array* ga = pg[0];
    Array* gb = pg[1];
    const double g = grad_out(0, 0);
    const double sa = 2.0 * g / static_cast<double>(na);
    const double sb = 2.0 * g / static_cast<double>(nb);
    for (Eigen::Index i = 0; i < na; ++i) {
      const Eigen::Index j = to_b[static_cast<size_t>(i)];
      const Eigen::RowVector2d d = (av.row(i) - bv.row(j)) * sa;
      if (ga) ga->row(i) += d;
      if (gb) gb->row(j) -= d;
    }
    for (Eigen::Index j = 0; j < nb; ++j) {
      const Eigen::Index i = to_a[static_cast<size_t>(j)];
      const Eigen::RowVector2d d = (bv.row(j) - av.row(i)) * sb;
      if (gb) gb->row(j) += d;
      if (ga) ga->row(i) -= d;
    }
  };
  return tape.custom({a_points, b_points}, scalar_array(value), backward, "chamfer2d");
}

PointSet2D sample_gt_silhouette(const Eigen::MatrixXi& mask, int n, std::mt19937_64& rng) {
  require(n > 0, "sample_gt_silhouette: n must be positive");
  std::vector<std::pair<int, int>> fg;
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      if (mask(r, c) != 0) fg.emplace_back(static_cast<int>(r), static_cast<int>(c));
  if (fg.empty()) throw empty_mask_error("sample_gt_silhouette: mask has no foreground");

  const double diag = std::hypot(static_cast<double>(mask.cols()),
                                 static_cast<double>(mask.rows()));
  PointSet2D out;
  out.points.resize(n, 2);
  for (int k = 0; k < n; ++k) {
    const auto idx = std::min(fg.size() - 1,
                              static_cast<size_t>(geom::uniform01(rng) *
                                                  static_cast<double>(fg.size())));
    const double u = geom::uniform01(rng);
    const double v = geom::uniform01(rng);
    out.points(k, 0) = (static_cast<double>(fg[idx].second) + u) / diag;
    out.points(k, 1) = (static_cast<double>(fg[idx].first) + v) / diag;
  }
  return out;
}

namespace {

// Keeps only samples whose transformed position is in front of the camera.
// Returns the kept (face, barycentric) rows; throws when none survive.
std::pair<Eigen::VectorXi, Eigen::MatrixXd> front_facing_subset(
    const geom::SurfaceSamples& s, const geom::RigidTransform& i_to_j) {
  const Eigen::MatrixXd moved = geom::transform_points(i_to_j, s.points);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < moved.rows(); ++k)
    if (moved(k, 2) > 0.0) keep.push_back(k);
  if (keep.empty())
    throw behind_camera_error("project_mesh_samples: all surface samples behind the camera");
  Eigen::VectorXi fi(static_cast<Eigen::Index>(keep.size()));
  Eigen::MatrixXd by(static_cast<Eigen::Index>(keep.size()), 3);
  for (Eigen::Index k = 0; k < fi.size(); ++k) {
    fi(k) = s.face_index(keep[static_cast<size_t>(k)]);
    by.row(k) = s.bary.row(keep[static_cast<size_t>(k)]);
  }
  return {std::move(fi), std::move(by)};
}

}  // namespace

PointSet2D project_mesh_samples(const geom::Mesh& mesh, const geom::Camera& camera,
                                const geom::RigidTransform& i_to_j, int n,
                                std::mt19937_64& rng) {
  require(n > 0, "project_mesh_samples: n must be positive");
  require(mesh.space == geom::SpaceTag::view, "project_mesh_samples: mesh must be in view space");
  const geom::SurfaceSamples s = geom::sample_surface(mesh, n, rng);
  const auto [fi, by] = front_facing_subset(s, i_to_j);
  Eigen::MatrixXd pts(fi.size(), 3);
  for (Eigen::Index k = 0; k < fi.size(); ++k) {
    const auto f = mesh.faces.row(fi(k));
    pts.row(k) = by(k, 0) * mesh.vertices.row(f(0)) + by(k, 1) * mesh.vertices.row(f(1)) +
                 by(k, 2) * mesh.vertices.row(f(2));
  }
  const auto [pix, depth] = geom::project(camera, geom::transform_points(i_to_j, pts));
  (void)depth;
  PointSet2D out;
  out.points = pix / render::ndc_scale(camera);
  return out;
}

Var project_mesh_samples(Tape& tape, Var vertices, const Eigen::MatrixXi& faces,
                         const geom::Camera& camera, const geom::RigidTransform& i_to_j,
                         int n, std::mt19937_64& rng) {
  require(n > 0, "project_mesh_samples: n must be positive");
  geom::Mesh snapshot{vertices.value(), faces, geom::SpaceTag::view};
  const geom::SurfaceSamples s = geom::sample_surface(snapshot, n, rng);
  const auto [fi, by] = front_facing_subset(s, i_to_j);
  Var pts = geom::surface_points(vertices, faces, fi, by);
  Var moved = geom::transform_points(i_to_j, pts);
  auto [pix, depth] = geom::project(camera, moved);
  (void)depth;
  return tape.scale(pix, 1.0 / render::ndc_scale(camera));
}

Var xent_silhouette(Tape& tape, const render::SoftSilhouette& pred, const Array& gt_region) {
  require(gt_region.rows() == pred.values.rows() && gt_region.cols() == pred.values.cols(),
          "xent_silhouette: shape mismatch");
  require((gt_region.array() >= 0.0).all() && (gt_region.array() <= 1.0).all(),
          "xent_silhouette: target outside [0, 1]");
  Var p = tape.clamp(pred.values, 1e-7, 1.0 - 1e-7);
  Var g = tape.constant(gt_region);
  Var g_off = tape.constant(Array(1.0 - gt_region.array()));
  Var on = tape.mul(g, tape.log(p));
  Var off = tape.mul(g_off, tape.log(tape.add_const(tape.neg(p), 1.0)));
  return tape.neg(tape.mean(tape.add(on, off)));
}

L2DTerms l2d(Tape& tape, const render::SoftSilhouette& pred, const Array& gt_region,
             Var projected_samples, const PointSet2D& gt_samples) {
  gt_samples.validate();
  require(gt_samples.points.rows() > 0, "l2d: empty ground-truth samples");

  L2DTerms out;
  out.l_dist = chamfer2d(tape, projected_samples, tape.constant(gt_samples.points));
  out.l_xent = xent_silhouette(tape, pred, gt_region);

  // the overlap gate is a detached decision on binarized silhouettes
  const Array& pv = pred.values.value();
  long inter = 0, uni = 0;
  for (Eigen::Index r = 0; r < pv.rows(); ++r)
    for (Eigen::Index c = 0; c < pv.cols(); ++c) {
      const bool p = pv(r, c) > 0.5;
      const bool g = gt_region(r, c) > 0.5;
      inter += p && g;
      uni += p || g;
    }
  out.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  out.gate = out.iou > 0.5;
  out.value = out.gate ? tape.add(out.l_dist, out.l_xent) : out.l_dist;
  return out;
}

Var l3d(Tape& tape, const std::vector<std::vector<Var>>& per_object_view_terms) {
  require(!per_object_view_terms.empty(), "l3d: no objects");
  std::optional<Var> outer;
  for (const auto& views : per_object_view_terms) {
    require(!views.empty(), "l3d: object with no visible views");
    Var acc = views[0];
    for (size_t j = 1; j < views.size(); ++j) acc = tape.add(acc, views[j]);
    Var obj_mean = tape.scale(acc, 1.0 / static_cast<double>(views.size()));
    outer = outer ? tape.add(*outer, obj_mean) : obj_mean;
  }
  return tape.scale(*outer, 1.0 / static_cast<double>(per_object_view_terms.size()));
}

Var reg_edge(Tape& tape, Var vertices, const Eigen::MatrixXi& faces) {
  const Eigen::MatrixXi edges = geom::mesh_edges(faces);
  require(edges.rows() > 0, "reg_edge: mesh has no edges");
  const Array& v = vertices.value();
  const Eigen::Index ne = edges.rows();
  double acc = 0.0;
  for (Eigen::Index e = 0; e < ne; ++e)
    acc += (v.row(edges(e, 0)) - v.row(edges(e, 1))).squaredNorm();

  auto backward = [edges, ne](const Array& grad_out, const Array&,
                              const std::vector<const Array*>& pv,
                              const std::vector<Array*>& pg) {
    Array* gv = pg[0];
    if (!gv) return;
    const Array& val = *pv[0];
    const double g = grad_out(0, 0) * 2.0 / static_cast<double>(ne);
    for (Eigen::Index e = 0; e < ne; ++e) {
      const Eigen::RowVector3d d = (val.row(edges(e, 0)) - val.row(edges(e, 1))) * g;
      gv->row(edges(e, 0)) += d;
      gv->row(edges(e, 1)) -= d;
    }
  };
  return tape.custom({vertices}, scalar_array(acc / static_cast<double>(ne)), backward,
                     "reg_edge");
}

Var reg_l2_offsets(Tape& tape, Var dv_raw) {
  return tape.scale(tape.squared_norm(dv_raw), 0.5);
}

Var reg_laplacian(Tape& tape, Var vertices, const Eigen::MatrixXi& faces) {
  const Eigen::MatrixXi edges = geom::mesh_edges(faces);
  const Eigen::Index nv = vertices.rows();
  std::vector<std::vector<Eigen::Index>> nbs(static_cast<size_t>(nv));
  for (Eigen::Index e = 0; e < edges.rows(); ++e) {
    nbs[static_cast<size_t>(edges(e, 0))].push_back(edges(e, 1));
    nbs[static_cast<size_t>(edges(e, 1))].push_back(edges(e, 0));
  }

  auto residual = [](const std::vector<std::vector<Eigen::Index>>& adj, const Array& v,
                     Eigen::Index i) -> Eigen::RowVector3d {
    const auto& nb = adj[static_cast<size_t>(i)];
    Eigen::RowVector3d mean = Eigen::RowVector3d::Zero();
    for (Eigen::Index j : nb) mean += v.row(j);
    mean /= static_cast<double>(nb.size());
    return Eigen::RowVector3d(v.row(i)) - mean;
  };

  const Array& v = vertices.value();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < nv; ++i)
    if (!nbs[static_cast<size_t>(i)].empty()) acc += residual(nbs, v, i).squaredNorm();

  auto backward = [nbs, residual, nv](const Array& grad_out, const Array&,
                                      const std::vector<const Array*>& pv,
                                      const std::vector<Array*>& pg) {
    Array* gv = pg[0];
    if (!gv) return;
    const Array& val = *pv[0];
    const double g = grad_out(0, 0) * 2.0 / static_cast<double>(nv);
    for (Eigen::Index i = 0; i < nv; ++i) {
      const auto& nb = nbs[static_cast<size_t>(i)];
      if (nb.empty()) continue;
      const Eigen::RowVector3d li = residual(nbs, val, i) * g;
      gv->row(i) += li;
      for (Eigen::Index j : nb) gv->row(j) -= li / static_cast<double>(nb.size());
    }
  };
  return tape.custom({vertices}, scalar_array(acc / static_cast<double>(nv)), backward,
                     "reg_laplacian");
}

Var regularizer(Tape& tape, RegKind kind, Var vertices, const Eigen::MatrixXi& faces,
                Var dv_raw) {
  switch (kind) {
    case RegKind::edge:
      return reg_edge(tape, vertices, faces);
    case RegKind::l2_offsets:
      return reg_l2_offsets(tape, dv_raw);
    case RegKind::l2_offsets_plus_laplacian:
      return tape.add(reg_l2_offsets(tape, dv_raw), reg_laplacian(tape, vertices, faces));
  }
  throw std::invalid_argument("regularizer: unknown kind");
}

Var total_loss(Tape& tape, Var l3d_value, Var reg_value, const LossWeights& weights) {
  weights.validate();
  return tape.add(tape.scale(l3d_value, weights.mu_3d), tape.scale(reg_value, weights.mu_reg));
}

}  // namespace usl::loss
