#pragma once

// Meshes, pinhole cameras, rigid transforms, the cube-to-frustum homography,
// icosphere construction, and area-weighted surface sampling.
//
// Conventions used throughout: +X right, +Y down, +Z forward; pixel (0,0) is
// the top-left corner and pixel centers sit at integer+0.5.  Cameras store a
// world-to-view rotation/translation pair (x_view = R x_world + t).

#include "usl/diff.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <utility>

namespace usl::geom {

enum class SpaceTag { normalized, view };

struct Mesh {
  Eigen::MatrixXd vertices;  // V x 3
  Eigen::MatrixXi faces;     // F x 3
  SpaceTag space = SpaceTag::view;

  // Checks index bounds, face non-degeneracy (no repeated index within a
  // face), and the [-1,1] coordinate range for normalized meshes.  Throws
  // std::invalid_argument.
  void validate() const;
};

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const;  // orthonormality within 1e-9, positive focals, size >= 1
  Eigen::Vector3d to_view(const Eigen::Vector3d& p_world) const {
    return rotation * p_world + translation;
  }
  Eigen::Vector3d center_world() const {  // camera position in world coordinates
    return -rotation.transpose() * translation;
  }
};

struct Box2D {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool valid() const { return x0 < x1 && y0 < y1; }
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return valid() ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }

  Box2D expanded(double margin) const {
    return {x0 - margin, y0 - margin, x1 + margin, y1 + margin};
  }
  Box2D clipped(double w, double h) const {
    return {std::max(x0, 0.0), std::max(y0, 0.0), std::min(x1, w), std::min(y1, h)};
  }
};

Box2D box_union(const Box2D& a, const Box2D& b);
Box2D box_intersection(const Box2D& a, const Box2D& b);  // may be invalid (empty)
Box2D bounding_box(const Eigen::MatrixXd& points2d);      // N x 2, N >= 1

struct LayoutBounds {
  double rho0 = 0.05, rho1 = 1.5;
  double z0 = 1.0, z1 = 3.0;
  void validate() const;  // 0 < rho0 < rho1, 0 < z0 < z1
};

struct Frustum {
  Box2D box;
  double z = 0;    // center depth, meters
  double rho = 0;  // depth extent, meters
};

struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  // this ∘ other: apply `other` first
  RigidTransform compose(const RigidTransform& other) const {
    return {R * other.R, R * other.t + t};
  }
};

// ---- icosphere ----

// Regular icosahedron subdivided `level` times (0..5), vertices on the unit
// sphere, faces wound outward.
Mesh icosphere(int level);

// ---- layout decode ----

// (rho_t, z_t) in (0,1) -> (rho, z) by linear interpolation of the bounds.
// The tape route is elementwise, so per-category rows decode in one call.
std::pair<double, double> layout_decode(double rho_t, double z_t, const LayoutBounds& b);
std::pair<diff::Var, diff::Var> layout_decode(diff::Var rho_t, diff::Var z_t,
                                              const LayoutBounds& b);

// ---- frustum homography ----

void validate_frustum(const Frustum& f, const Camera& cam);  // throws std::invalid_argument

// Maps normalized points (u,v,w) in [-1,1]^3 into the view-space frustum:
// d = z + w*rho/2, the (u,v) slice is scaled so its pinhole projection at
// depth d covers exactly the frustum box.
Eigen::MatrixXd frustum_apply(const Eigen::MatrixXd& pts_norm, const Frustum& f,
                              const Camera& cam);

// Tape version; gradients flow to the normalized points and to z and rho.
diff::Var frustum_apply(diff::Var pts_norm, diff::Var z, diff::Var rho,
                        const Box2D& box, const Camera& cam);

// ---- projection ----

// Pinhole projection of view-space points (N x 3) to pixel coordinates
// (N x 2) plus depths (N).  Any nonpositive depth throws behind_camera_error.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> project(const Camera& cam,
                                                    const Eigen::MatrixXd& points);
std::pair<diff::Var, diff::Var> project(const Camera& cam, diff::Var points);

// ---- relative camera transforms ----

// Transform taking view-i coordinates to view-j coordinates.
RigidTransform relative_transform(const Camera& pose_i, const Camera& pose_j);

Eigen::MatrixXd transform_points(const RigidTransform& T, const Eigen::MatrixXd& pts);
diff::Var transform_points(const RigidTransform& T, diff::Var pts);

// ---- surface sampling ----

struct SurfaceSamples {
  Eigen::MatrixXd points;      // n x 3
  Eigen::VectorXi face_index;  // n
  Eigen::MatrixXd bary;        // n x 3
};

// Area-weighted point sampling; zero-area faces are skipped.  Throws
// degenerate_mesh_error when the whole mesh has zero area.
SurfaceSamples sample_surface(const Mesh& mesh, int n, std::mt19937_64& rng);

// Re-evaluates sample positions from tape vertices with face choice and
// barycentric weights held fixed.
diff::Var surface_points(diff::Var vertices, const Eigen::MatrixXi& faces,
                         const Eigen::VectorXi& face_index, const Eigen::MatrixXd& bary);

// ---- mesh utilities ----

// Unique undirected edges, each row (a,b) with a < b, sorted lexicographically.
Eigen::MatrixXi mesh_edges(const Eigen::MatrixXi& faces);

Eigen::VectorXd face_areas(const Mesh& mesh);
double signed_volume(const Mesh& mesh);  // positive for outward-wound closed meshes

// Uniform double in [0,1) from the top 53 bits; used everywhere randomness
// must be reproducible independent of stdlib distribution internals.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace usl::geom
