#include "usl/geom.hpp"

#include "usl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

namespace usl::geom {

using diff::Array;
using diff::Var;

void Mesh::validate() const {
  if (vertices.cols() != 3 || (faces.size() > 0 && faces.cols() != 3))
    throw std::invalid_argument("mesh: vertices must be Vx3 and faces Fx3");
  const int v = static_cast<int>(vertices.rows());
  for (Eigen::Index i = 0; i < faces.rows(); ++i) {
    const int a = faces(i, 0), b = faces(i, 1), c = faces(i, 2);
    if (a < 0 || b < 0 || c < 0 || a >= v || b >= v || c >= v)
      throw std::invalid_argument("mesh: face index out of range");
    if (a == b || b == c || a == c)
      throw std::invalid_argument("mesh: face repeats a vertex index");
  }
  if (space == SpaceTag::normalized) {
    if (vertices.size() > 0 &&
        (vertices.minCoeff() < -1.0 - 1e-12 || vertices.maxCoeff() > 1.0 + 1e-12))
      throw std::invalid_argument("mesh: normalized vertices must lie in [-1,1]");
  }
}

void Camera::validate() const {
  if (fx <= 0 || fy <= 0) throw std::invalid_argument("camera: focal lengths must be positive");
  if (width < 1 || height < 1) throw std::invalid_argument("camera: image size must be >= 1");
  const Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
  if (err.cwiseAbs().maxCoeff() > 1e-9)
    throw std::invalid_argument("camera: rotation is not orthonormal");
}

Box2D box_union(const Box2D& a, const Box2D& b) {
  if (!a.valid()) return b;
  if (!b.valid()) return a;
  return {std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1),
          std::max(a.y1, b.y1)};
}

Box2D box_intersection(const Box2D& a, const Box2D& b) {
  return {std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
          std::min(a.y1, b.y1)};
}

Box2D bounding_box(const Eigen::MatrixXd& points2d) {
  if (points2d.rows() < 1 || points2d.cols() != 2)
    throw std::invalid_argument("bounding_box: need Nx2 points, N >= 1");
  return {points2d.col(0).minCoeff(), points2d.col(1).minCoeff(),
          points2d.col(0).maxCoeff(), points2d.col(1).maxCoeff()};
}

void LayoutBounds::validate() const {
  if (!(0 < rho0 && rho0 < rho1) || !(0 < z0 && z0 < z1))
    throw std::invalid_argument("layout bounds: need 0 < rho0 < rho1 and 0 < z0 < z1");
}

// ---- icosphere ----

namespace {

Mesh icosahedron() {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  Mesh m;
  m.vertices.resize(12, 3);
  m.vertices << -1, t, 0, 1, t, 0, -1, -t, 0, 1, -t, 0, 0, -1, t, 0, 1, t, 0, -1, -t, 0,
      1, -t, t, 0, -1, t, 0, 1, -t, 0, -1, -t, 0, 1;
  m.vertices.rowwise().normalize();
  m.faces.resize(20, 3);
  m.faces << 0, 11, 5, 0, 5, 1, 0, 1, 7, 0, 7, 10, 0, 10, 11, 1, 5, 9, 5, 11, 4, 11, 10,
      2, 10, 7, 6, 7, 1, 8, 3, 9, 4, 3, 4, 2, 3, 2, 6, 3, 6, 8, 3, 8, 9, 4, 9, 5, 2, 4,
      11, 6, 2, 10, 8, 6, 7, 9, 8, 1;
  m.space = SpaceTag::normalized;
  return m;
}

}  // namespace

Mesh icosphere(int level) {
  if (level < 0 || level > 5) throw std::invalid_argument("icosphere: level must be in [0,5]");
  Mesh m = icosahedron();
  for (int iter = 0; iter < level; ++iter) {
    std::map<std::pair<int, int>, int> midpoint;
    std::vector<Eigen::Vector3d> verts;
    verts.reserve(static_cast<size_t>(m.vertices.rows()) * 4);
    for (Eigen::Index i = 0; i < m.vertices.rows(); ++i) verts.push_back(m.vertices.row(i));
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      Eigen::Vector3d p = (verts[static_cast<size_t>(a)] + verts[static_cast<size_t>(b)]).normalized();
      verts.push_back(p);
      const int idx = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    Eigen::MatrixXi nf(m.faces.rows() * 4, 3);
    for (Eigen::Index i = 0; i < m.faces.rows(); ++i) {
      const int a = m.faces(i, 0), b = m.faces(i, 1), c = m.faces(i, 2);
      const int ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
      nf.row(4 * i + 0) << a, ab, ca;
      nf.row(4 * i + 1) << b, bc, ab;
      nf.row(4 * i + 2) << c, ca, bc;
      nf.row(4 * i + 3) << ab, bc, ca;
    }
    m.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
    for (size_t i = 0; i < verts.size(); ++i) m.vertices.row(static_cast<Eigen::Index>(i)) = verts[i];
    m.faces = std::move(nf);
  }
  // unit vectors can exceed 1 by an ulp after normalize; keep the tag honest
  m.vertices = m.vertices.cwiseMax(-1.0).cwiseMin(1.0);
  return m;
}

// ---- layout decode ----

std::pair<double, double> layout_decode(double rho_t, double z_t, const LayoutBounds& b) {
  b.validate();
  if (!(rho_t > 0.0 && rho_t < 1.0) || !(z_t > 0.0 && z_t < 1.0))
    throw std::invalid_argument("layout_decode: inputs must lie strictly in (0,1)");
  return {b.rho0 + rho_t * (b.rho1 - b.rho0), b.z0 + z_t * (b.z1 - b.z0)};
}

std::pair<Var, Var> layout_decode(Var rho_t, Var z_t, const LayoutBounds& b) {
  b.validate();
  const auto rt = rho_t.value().array(), zt = z_t.value().array();
  if (!((rt > 0.0).all() && (rt < 1.0).all() && (zt > 0.0).all() && (zt < 1.0).all()))
    throw std::invalid_argument("layout_decode: inputs must lie strictly in (0,1)");
  diff::Tape& tp = *rho_t.tape;
  Var rho = tp.add_const(tp.scale(rho_t, b.rho1 - b.rho0), b.rho0);
  Var z = tp.add_const(tp.scale(z_t, b.z1 - b.z0), b.z0);
  return {rho, z};
}

// ---- frustum homography ----

void validate_frustum(const Frustum& f, const Camera& cam) {
  if (!f.box.valid()) throw std::invalid_argument("frustum: box is empty");
  if (f.box.x0 < 0 || f.box.y0 < 0 || f.box.x1 > cam.width || f.box.y1 > cam.height)
    throw std::invalid_argument("frustum: box extends outside the image");
  if (!(f.rho > 0)) throw std::invalid_argument("frustum: rho must be positive");
  if (!(f.z - f.rho / 2 > 0))
    throw std::invalid_argument("frustum: near face is behind the camera");
}

Eigen::MatrixXd frustum_apply(const Eigen::MatrixXd& pts_norm, const Frustum& f,
                              const Camera& cam) {
  validate_frustum(f, cam);
  if (pts_norm.cols() != 3) throw std::invalid_argument("frustum_apply: points must be Nx3");
  const double bx = f.box.center_x(), by = f.box.center_y();
  const double hw = f.box.width() / 2, hh = f.box.height() / 2;
  Eigen::MatrixXd out(pts_norm.rows(), 3);
  for (Eigen::Index i = 0; i < pts_norm.rows(); ++i) {
    const double u = pts_norm(i, 0), v = pts_norm(i, 1), w = pts_norm(i, 2);
    const double d = f.z + w * f.rho / 2;
    const double px = bx + u * hw, py = by + v * hh;
    out(i, 0) = (px - cam.cx) * d / cam.fx;
    out(i, 1) = (py - cam.cy) * d / cam.fy;
    out(i, 2) = d;
  }
  return out;
}

Var frustum_apply(Var pts_norm, Var z, Var rho, const Box2D& box, const Camera& cam) {
  Frustum f{box, z.scalar(), rho.scalar()};
  Eigen::MatrixXd out = frustum_apply(pts_norm.value(), f, cam);
  const double bx = box.center_x(), by = box.center_y();
  const double hw = box.width() / 2, hh = box.height() / 2;
  const double fx = cam.fx, fy = cam.fy, cx = cam.cx, cy = cam.cy;
  diff::Tape& tp = *pts_norm.tape;
  return tp.custom(
      {pts_norm, z, rho}, std::move(out),
      [bx, by, hw, hh, fx, fy, cx, cy](const Array& g, const Array& val,
                                       const std::vector<const Array*>& pv,
                                       const std::vector<Array*>& pg) {
        const Array& pts = *pv[0];
        const double zc = (*pv[1])(0, 0);
        const double rc = (*pv[2])(0, 0);
        (void)zc;
        double gz = 0.0, grho = 0.0;
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
          const double u = pts(i, 0), v = pts(i, 1), w = pts(i, 2);
          const double d = val(i, 2);
          const double px = bx + u * hw, py = by + v * hh;
          const double gd = g(i, 0) * (px - cx) / fx + g(i, 1) * (py - cy) / fy + g(i, 2);
          if (pg[0]) {
            (*pg[0])(i, 0) += g(i, 0) * hw * d / fx;
            (*pg[0])(i, 1) += g(i, 1) * hh * d / fy;
            (*pg[0])(i, 2) += gd * rc / 2;
          }
          gz += gd;
          grho += gd * w / 2;
        }
        if (pg[1]) (*pg[1])(0, 0) += gz;
        if (pg[2]) (*pg[2])(0, 0) += grho;
      },
      "frustum_apply");
}

// ---- projection ----

std::pair<Eigen::MatrixXd, Eigen::VectorXd> project(const Camera& cam,
                                                    const Eigen::MatrixXd& points) {
  if (points.cols() != 3) throw std::invalid_argument("project: points must be Nx3");
  Eigen::MatrixXd px(points.rows(), 2);
  Eigen::VectorXd depth(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const double Z = points(i, 2);
    if (!(Z > 0)) throw behind_camera_error("project: point " + std::to_string(i) +
                                            " has nonpositive depth");
    px(i, 0) = cam.fx * points(i, 0) / Z + cam.cx;
    px(i, 1) = cam.fy * points(i, 1) / Z + cam.cy;
    depth(i) = Z;
  }
  return {std::move(px), std::move(depth)};
}

std::pair<Var, Var> project(const Camera& cam, Var points) {
  auto [px, depth] = project(cam, points.value());
  (void)depth;
  const double fx = cam.fx, fy = cam.fy;
  diff::Tape& tp = *points.tape;
  Var px_var = tp.custom(
      {points}, std::move(px),
      [fx, fy](const Array& g, const Array&, const std::vector<const Array*>& pv,
               const std::vector<Array*>& pg) {
        if (!pg[0]) return;
        const Array& pts = *pv[0];
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
          const double X = pts(i, 0), Y = pts(i, 1), Z = pts(i, 2);
          (*pg[0])(i, 0) += g(i, 0) * fx / Z;
          (*pg[0])(i, 1) += g(i, 1) * fy / Z;
          (*pg[0])(i, 2) -= (g(i, 0) * fx * X + g(i, 1) * fy * Y) / (Z * Z);
        }
      },
      "project");
  Var depth_var = tp.cols(points, 2, 1);
  return {px_var, depth_var};
}

// ---- relative transforms ----

RigidTransform relative_transform(const Camera& pose_i, const Camera& pose_j) {
  const Eigen::Matrix3d R = pose_j.rotation * pose_i.rotation.transpose();
  return {R, pose_j.translation - R * pose_i.translation};
}

Eigen::MatrixXd transform_points(const RigidTransform& T, const Eigen::MatrixXd& pts) {
  if (pts.cols() != 3) throw std::invalid_argument("transform_points: points must be Nx3");
  return (pts * T.R.transpose()).rowwise() + T.t.transpose();
}

Var transform_points(const RigidTransform& T, Var pts) {
  Eigen::MatrixXd out = transform_points(T, pts.value());
  const Eigen::Matrix3d R = T.R;
  return pts.tape->custom(
      {pts}, std::move(out),
      [R](const Array& g, const Array&, const std::vector<const Array*>&,
          const std::vector<Array*>& pg) {
        if (pg[0]) *pg[0] += g * R;
      },
      "transform_points");
}

// ---- surface sampling ----

SurfaceSamples sample_surface(const Mesh& mesh, int n, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("sample_surface: n must be >= 1");
  const Eigen::VectorXd areas = face_areas(mesh);
  const double total = areas.sum();
  if (!(total > 0)) throw degenerate_mesh_error("sample_surface: mesh has zero surface area");

  Eigen::VectorXd cum(areas.size());
  double acc = 0;
  for (Eigen::Index i = 0; i < areas.size(); ++i) {
    acc += areas(i);
    cum(i) = acc;
  }

  SurfaceSamples s;
  s.points.resize(n, 3);
  s.face_index.resize(n);
  s.bary.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    const double r = uniform01(rng) * total;
    Eigen::Index lo = 0, hi = cum.size() - 1;
    while (lo < hi) {
      const Eigen::Index midp = (lo + hi) / 2;
      if (cum(midp) > r)
        hi = midp;
      else
        lo = midp + 1;
    }
    // skip zero-area faces the search may have landed on (exact boundary hits)
    while (lo + 1 < cum.size() && areas(lo) == 0.0) ++lo;
    const double r1 = uniform01(rng), r2 = uniform01(rng);
    const double sq = std::sqrt(r1);
    const double b0 = 1.0 - sq, b1 = sq * (1.0 - r2), b2 = sq * r2;
    const int f = static_cast<int>(lo);
    const Eigen::Vector3d p = b0 * mesh.vertices.row(mesh.faces(f, 0)).transpose() +
                              b1 * mesh.vertices.row(mesh.faces(f, 1)).transpose() +
                              b2 * mesh.vertices.row(mesh.faces(f, 2)).transpose();
    s.points.row(i) = p;
    s.face_index(i) = f;
    s.bary.row(i) << b0, b1, b2;
  }
  return s;
}

Var surface_points(Var vertices, const Eigen::MatrixXi& faces,
                   const Eigen::VectorXi& face_index, const Eigen::MatrixXd& bary) {
  const Eigen::Index n = face_index.size();
  if (bary.rows() != n || bary.cols() != 3)
    throw std::invalid_argument("surface_points: bary must be n x 3");
  const Array& V = vertices.value();
  Array out(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int f = face_index(i);
    out.row(i) = bary(i, 0) * V.row(faces(f, 0)) + bary(i, 1) * V.row(faces(f, 1)) +
                 bary(i, 2) * V.row(faces(f, 2));
  }
  return vertices.tape->custom(
      {vertices}, std::move(out),
      [faces, face_index, bary](const Array& g, const Array&,
                                const std::vector<const Array*>&,
                                const std::vector<Array*>& pg) {
        if (!pg[0]) return;
        for (Eigen::Index i = 0; i < face_index.size(); ++i) {
          const int f = face_index(i);
          for (int k = 0; k < 3; ++k)
            pg[0]->row(faces(f, k)) += bary(i, k) * g.row(i);
        }
      },
      "surface_points");
}

// ---- mesh utilities ----

Eigen::MatrixXi mesh_edges(const Eigen::MatrixXi& faces) {
  std::vector<std::pair<int, int>> edges;
  edges.reserve(static_cast<size_t>(faces.rows()) * 3);
  for (Eigen::Index i = 0; i < faces.rows(); ++i)
    for (int k = 0; k < 3; ++k) {
      const int a = faces(i, k), b = faces(i, (k + 1) % 3);
      edges.push_back(std::minmax(a, b));
    }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  Eigen::MatrixXi out(static_cast<Eigen::Index>(edges.size()), 2);
  for (size_t i = 0; i < edges.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) << edges[i].first, edges[i].second;
  return out;
}

Eigen::VectorXd face_areas(const Mesh& mesh) {
  Eigen::VectorXd areas(mesh.faces.rows());
  for (Eigen::Index i = 0; i < mesh.faces.rows(); ++i) {
    const Eigen::Vector3d a = mesh.vertices.row(mesh.faces(i, 0));
    const Eigen::Vector3d b = mesh.vertices.row(mesh.faces(i, 1));
    const Eigen::Vector3d c = mesh.vertices.row(mesh.faces(i, 2));
    areas(i) = 0.5 * (b - a).cross(c - a).norm();
  }
  return areas;
}

double signed_volume(const Mesh& mesh) {
  double vol = 0;
  for (Eigen::Index i = 0; i < mesh.faces.rows(); ++i) {
    const Eigen::Vector3d a = mesh.vertices.row(mesh.faces(i, 0));
    const Eigen::Vector3d b = mesh.vertices.row(mesh.faces(i, 1));
    const Eigen::Vector3d c = mesh.vertices.row(mesh.faces(i, 2));
    vol += a.dot(b.cross(c)) / 6.0;
  }
  return vol;
}

}  // namespace usl::geom
