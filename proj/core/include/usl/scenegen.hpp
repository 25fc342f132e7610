#pragma once

// Procedural multi-view scenes with exact ground truth: primitive objects
// scattered on the Y = 0 plane, a camera rig on a sphere around the scene,
// and per-view instance maps, depth maps, and per-object masks.

#include "usl/geom.hpp"
#include "usl/render.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace usl::scenegen {

enum class PrimitiveKind { icosphere, cuboid, cylinder, superellipsoid };

struct ObjectSpec {
  PrimitiveKind kind = PrimitiveKind::icosphere;
  Eigen::Vector3d scale = Eigen::Vector3d::Ones();    // per-axis half extents, meters
  double yaw_deg = 0.0;                               // rotation about +Y
  Eigen::Vector3d position = Eigen::Vector3d::Zero(); // world meters, on the Y = 0 plane
};

struct SceneSpec {
  std::vector<ObjectSpec> objects;
  std::vector<geom::Camera> cameras;
  std::uint64_t seed = 0;
};

struct GenConfig {
  int n_objects = 2;
  double x_min = -0.4, x_max = 0.4;  // placement bounds, meters
  double z_min = 1.5, z_max = 1.9;
  double scale_min = 0.12, scale_max = 0.28;
  int n_azimuth = 8;
  int n_elevation = 1;
  double radius = 2.5;
  Eigen::Vector3d look_at = Eigen::Vector3d(0.0, 0.0, 1.7);
  int resolution = 128;

  void validate() const;  // throws std::invalid_argument
};

// Canonical primitive inside [-1,1]^3, centered at the origin, faces wound
// outward.
geom::Mesh primitive_mesh(PrimitiveKind kind);

// The object's world-space mesh: canonical primitive scaled per axis, yawed
// about +Y, then translated to the position.
geom::Mesh object_mesh(const ObjectSpec& obj);

// Divergence-theorem volume; positive for outward-wound closed meshes.
double signed_volume(const geom::Mesh& mesh);

// Samples kinds, scales, yaws in [0,360), and (X, Z) positions uniformly
// inside the config bounds; intersecting placements are kept.  Cameras come
// from generate_cameras with the config's rig parameters.
SceneSpec generate_scene(const GenConfig& config, std::mt19937_64& rng);

// Cameras on a sphere of `radius` around `look_at`, ring by ring from
// elevation 0 upward in `elevation_step_deg` increments, each ring holding
// n_azimuth evenly spaced cameras, all oriented toward look_at.  Camera 0
// (azimuth 0, elevation 0) is the reference view by convention.
std::vector<geom::Camera> generate_cameras(int n_azimuth, int n_elevation, double radius,
                                           const Eigen::Vector3d& look_at,
                                           int resolution = 128,
                                           double elevation_step_deg = 20.0);

struct ObjectView {
  Eigen::MatrixXi mask;  // this object rendered alone, 0/1
  geom::Box2D box;       // tight pixel box of the mask; invalid when empty
  double nearest_depth = std::numeric_limits<double>::infinity();
  bool visible = false;
};

struct ViewBundle {
  Eigen::MatrixXi instance_map;  // joint render; object id + 1, 0 = background
  Eigen::MatrixXd depth_map;     // joint render; +inf where empty
  std::vector<ObjectView> objects;
};

struct SceneBundle {
  SceneSpec spec;
  std::vector<geom::Mesh> gt_world;  // world-coordinate object meshes
  std::vector<ViewBundle> views;
};

// Rasterizes every view of the spec.  Per-object masks are each object's own
// silhouette (no occlusion by the others), matching what a per-object
// renderer can reproduce; the instance and depth maps are the joint render.
// An object fully behind a camera gets an empty mask there.
SceneBundle bake_scene(const SceneSpec& spec, int resolution);

struct GenStats {
  int generated = 0;  // accepted + rejected draws
  int rejected = 0;
};

// generate_scene, redrawing until every object has a non-empty mask in the
// reference view (camera 0).  Rejected draws are counted in stats.  Throws
// std::runtime_error if no draw passes within a generous attempt budget.
SceneSpec generate_visible_scene(const GenConfig& config, std::mt19937_64& rng,
                                 GenStats* stats = nullptr);

}  // namespace usl::scenegen
