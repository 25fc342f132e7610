#include "usl/scenegen.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace usl::scenegen {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Flips faces whose normal points toward the origin.  Correct for convex
// origin-centered shapes, which all canonical primitives are.
void orient_outward(geom::Mesh& mesh) {
  for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f) {
    const Eigen::Vector3d a = mesh.vertices.row(mesh.faces(f, 0));
    const Eigen::Vector3d b = mesh.vertices.row(mesh.faces(f, 1));
    const Eigen::Vector3d c = mesh.vertices.row(mesh.faces(f, 2));
    const Eigen::Vector3d center = (a + b + c) / 3.0;
    if ((b - a).cross(c - a).dot(center) < 0.0) std::swap(mesh.faces(f, 1), mesh.faces(f, 2));
  }
}

geom::Mesh cuboid_mesh() {
  geom::Mesh m;
  m.vertices.resize(8, 3);
  int row = 0;
  for (int z = -1; z <= 1; z += 2)
    for (int y = -1; y <= 1; y += 2)
      for (int x = -1; x <= 1; x += 2) m.vertices.row(row++) << x, y, z;
  m.faces.resize(12, 3);
  m.faces << 0, 1, 3, 0, 3, 2,  // z = -1
      4, 7, 5, 4, 6, 7,         // z = +1
      0, 5, 1, 0, 4, 5,         // y = -1
      2, 3, 7, 2, 7, 6,         // y = +1
      0, 2, 6, 0, 6, 4,         // x = -1
      1, 5, 7, 1, 7, 3;         // x = +1
  m.space = geom::SpaceTag::normalized;
  orient_outward(m);
  return m;
}

geom::Mesh cylinder_mesh(int segments) {
  geom::Mesh m;
  m.vertices.resize(2 * segments + 2, 3);
  for (int k = 0; k < segments; ++k) {
    const double a = 2.0 * std::numbers::pi * k / segments;
    m.vertices.row(k) << std::cos(a), -1.0, std::sin(a);
    m.vertices.row(segments + k) << std::cos(a), 1.0, std::sin(a);
  }
  const int c0 = 2 * segments, c1 = 2 * segments + 1;
  m.vertices.row(c0) << 0.0, -1.0, 0.0;
  m.vertices.row(c1) << 0.0, 1.0, 0.0;

  m.faces.resize(4 * segments, 3);
  for (int k = 0; k < segments; ++k) {
    const int kn = (k + 1) % segments;
    m.faces.row(2 * k) << k, kn, segments + k;
    m.faces.row(2 * k + 1) << kn, segments + kn, segments + k;
    m.faces.row(2 * segments + k) << c0, k, kn;
    m.faces.row(3 * segments + k) << c1, segments + kn, segments + k;
  }
  m.space = geom::SpaceTag::normalized;
  orient_outward(m);
  return m;
}

geom::Mesh superellipsoid_mesh(int n_lat, int n_lon, double e1, double e2) {
  auto spow = [](double w, double e) {
    return w >= 0.0 ? std::pow(w, e) : -std::pow(-w, e);
  };
  geom::Mesh m;
  const int rows = n_lat - 1;  // interior latitude rings; poles are single points
  m.vertices.resize(rows * n_lon + 2, 3);
  for (int i = 0; i < rows; ++i) {
    const double eta = -std::numbers::pi / 2 +
                       std::numbers::pi * (i + 1) / static_cast<double>(n_lat);
    for (int j = 0; j < n_lon; ++j) {
      const double omega = 2.0 * std::numbers::pi * j / n_lon;
      m.vertices.row(i * n_lon + j) << spow(std::cos(eta), e1) * spow(std::cos(omega), e2),
          spow(std::sin(eta), e1), spow(std::cos(eta), e1) * spow(std::sin(omega), e2);
    }
  }
  const int south = rows * n_lon, north = rows * n_lon + 1;
  m.vertices.row(south) << 0.0, -1.0, 0.0;
  m.vertices.row(north) << 0.0, 1.0, 0.0;

  m.faces.resize(2 * n_lon * rows, 3);
  int f = 0;
  for (int j = 0; j < n_lon; ++j) {  // pole fans
    const int jn = (j + 1) % n_lon;
    m.faces.row(f++) << south, j, jn;
    m.faces.row(f++) << north, (rows - 1) * n_lon + jn, (rows - 1) * n_lon + j;
  }
  for (int i = 0; i + 1 < rows; ++i)
    for (int j = 0; j < n_lon; ++j) {
      const int jn = (j + 1) % n_lon;
      m.faces.row(f++) << i * n_lon + j, i * n_lon + jn, (i + 1) * n_lon + j;
      m.faces.row(f++) << i * n_lon + jn, (i + 1) * n_lon + jn, (i + 1) * n_lon + j;
    }
  m.space = geom::SpaceTag::normalized;
  orient_outward(m);
  return m;
}

}  // namespace

void GenConfig::validate() const {
  require(n_objects >= 1, "GenConfig: need at least one object");
  require(x_min <= x_max && z_min <= z_max, "GenConfig: inverted placement bounds");
  require(z_min > 0.0, "GenConfig: objects must sit in front of the origin plane");
  require(0.0 < scale_min && scale_min <= scale_max, "GenConfig: bad scale range");
  require(n_azimuth >= 1 && n_elevation >= 1, "GenConfig: need at least one camera");
  require(radius > 0.0, "GenConfig: camera radius must be positive");
  require(resolution >= 1, "GenConfig: bad resolution");
}

geom::Mesh primitive_mesh(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::icosphere:
      return geom::icosphere(3);
    case PrimitiveKind::cuboid:
      return cuboid_mesh();
    case PrimitiveKind::cylinder:
      return cylinder_mesh(32);
    case PrimitiveKind::superellipsoid:
      return superellipsoid_mesh(16, 32, 0.5, 0.5);
  }
  throw std::invalid_argument("primitive_mesh: unknown kind");
}

geom::Mesh object_mesh(const ObjectSpec& obj) {
  require(obj.scale.minCoeff() > 0.0, "object_mesh: scale must be positive");
  geom::Mesh m = primitive_mesh(obj.kind);
  const double a = obj.yaw_deg * std::numbers::pi / 180.0;
  Eigen::Matrix3d yaw;
  yaw << std::cos(a), 0.0, std::sin(a), 0.0, 1.0, 0.0, -std::sin(a), 0.0, std::cos(a);
  for (Eigen::Index i = 0; i < m.vertices.rows(); ++i) {
    const Eigen::Vector3d v = m.vertices.row(i).transpose().cwiseProduct(obj.scale);
    m.vertices.row(i) = (yaw * v + obj.position).transpose();
  }
  m.space = geom::SpaceTag::view;  // metric coordinates
  return m;
}

double signed_volume(const geom::Mesh& mesh) {
  double vol = 0.0;
  for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f) {
    const Eigen::Vector3d a = mesh.vertices.row(mesh.faces(f, 0));
    const Eigen::Vector3d b = mesh.vertices.row(mesh.faces(f, 1));
    const Eigen::Vector3d c = mesh.vertices.row(mesh.faces(f, 2));
    vol += a.dot(b.cross(c)) / 6.0;
  }
  return vol;
}

SceneSpec generate_scene(const GenConfig& config, std::mt19937_64& rng) {
  config.validate();
  SceneSpec spec;
  spec.objects.reserve(static_cast<size_t>(config.n_objects));
  for (int i = 0; i < config.n_objects; ++i) {
    ObjectSpec obj;
    const int kind = std::min(3, static_cast<int>(geom::uniform01(rng) * 4.0));
    obj.kind = static_cast<PrimitiveKind>(kind);
    for (int k = 0; k < 3; ++k)
      obj.scale(k) =
          config.scale_min + (config.scale_max - config.scale_min) * geom::uniform01(rng);
    obj.yaw_deg = 360.0 * geom::uniform01(rng);
    obj.position = Eigen::Vector3d(
        config.x_min + (config.x_max - config.x_min) * geom::uniform01(rng), 0.0,
        config.z_min + (config.z_max - config.z_min) * geom::uniform01(rng));
    spec.objects.push_back(obj);
  }
  spec.cameras = generate_cameras(config.n_azimuth, config.n_elevation, config.radius,
                                  config.look_at, config.resolution);
  return spec;
}

std::vector<geom::Camera> generate_cameras(int n_azimuth, int n_elevation, double radius,
                                           const Eigen::Vector3d& look_at, int resolution,
                                           double elevation_step_deg) {
  require(n_azimuth >= 1 && n_elevation >= 1, "generate_cameras: need at least one camera");
  require(radius > 0.0, "generate_cameras: radius must be positive");
  require(resolution >= 1, "generate_cameras: bad resolution");
  require((n_elevation - 1) * elevation_step_deg < 90.0 - 1e-9,
          "generate_cameras: top ring would reach the pole");

  std::vector<geom::Camera> cams;
  cams.reserve(static_cast<size_t>(n_azimuth) * n_elevation);
  const Eigen::Vector3d world_down(0.0, 1.0, 0.0);
  for (int e = 0; e < n_elevation; ++e) {
    const double ele = e * elevation_step_deg * std::numbers::pi / 180.0;
    for (int a = 0; a < n_azimuth; ++a) {
      const double az = 2.0 * std::numbers::pi * a / n_azimuth;
      // +Y points down, so raising the camera lowers its Y coordinate
      const Eigen::Vector3d pos =
          look_at + radius * Eigen::Vector3d(std::sin(az) * std::cos(ele), -std::sin(ele),
                                             -std::cos(az) * std::cos(ele));
      const Eigen::Vector3d forward = (look_at - pos).normalized();
      const Eigen::Vector3d right = world_down.cross(forward).normalized();
      const Eigen::Vector3d down = forward.cross(right);

      geom::Camera cam;
      cam.fx = cam.fy = 1.4 * resolution;
      cam.cx = cam.cy = resolution / 2.0;
      cam.width = cam.height = resolution;
      cam.rotation.row(0) = right.transpose();
      cam.rotation.row(1) = down.transpose();
      cam.rotation.row(2) = forward.transpose();
      cam.translation = -cam.rotation * pos;
      cam.validate();
      cams.push_back(cam);
    }
  }
  return cams;
}

namespace {

ObjectView rasterize_solo(const geom::Mesh& view_mesh, const geom::Camera& cam,
                          int resolution) {
  const render::HardRender solo = render::hard_rasterize({view_mesh}, cam, resolution,
                                                         resolution);
  ObjectView ov;
  ov.mask = (solo.instance_map.array() > 0).cast<int>().matrix();
  int min_r = resolution, max_r = -1, min_c = resolution, max_c = -1;
  for (int r = 0; r < resolution; ++r)
    for (int c = 0; c < resolution; ++c)
      if (ov.mask(r, c)) {
        ov.visible = true;
        ov.nearest_depth = std::min(ov.nearest_depth, solo.depth_map(r, c));
        min_r = std::min(min_r, r);
        max_r = std::max(max_r, r);
        min_c = std::min(min_c, c);
        max_c = std::max(max_c, c);
      }
  if (ov.visible)
    ov.box = {static_cast<double>(min_c), static_cast<double>(min_r),
              static_cast<double>(max_c + 1), static_cast<double>(max_r + 1)};
  return ov;
}

}  // namespace

SceneBundle bake_scene(const SceneSpec& spec, int resolution) {
  require(resolution >= 1, "bake_scene: bad resolution");
  require(!spec.objects.empty(), "bake_scene: no objects");
  require(!spec.cameras.empty(), "bake_scene: no cameras");

  SceneBundle bundle;
  bundle.spec = spec;
  bundle.gt_world.reserve(spec.objects.size());
  for (const ObjectSpec& obj : spec.objects) bundle.gt_world.push_back(object_mesh(obj));

  bundle.views.reserve(spec.cameras.size());
  for (const geom::Camera& cam : spec.cameras) {
    const geom::RigidTransform world_to_view{cam.rotation, cam.translation};
    std::vector<geom::Mesh> view_meshes;
    view_meshes.reserve(bundle.gt_world.size());
    for (const geom::Mesh& m : bundle.gt_world) {
      geom::Mesh mv = m;
      mv.vertices = geom::transform_points(world_to_view, m.vertices);
      view_meshes.push_back(std::move(mv));
    }

    ViewBundle vb;
    const render::HardRender joint = render::hard_rasterize(view_meshes, cam, resolution,
                                                            resolution);
    vb.instance_map = joint.instance_map;
    vb.depth_map = joint.depth_map;
    vb.objects.reserve(view_meshes.size());
    for (const geom::Mesh& mv : view_meshes)
      vb.objects.push_back(rasterize_solo(mv, cam, resolution));
    bundle.views.push_back(std::move(vb));
  }
  return bundle;
}

SceneSpec generate_visible_scene(const GenConfig& config, std::mt19937_64& rng,
                                 GenStats* stats) {
  config.validate();
  constexpr int kMaxAttempts = 1000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    SceneSpec spec = generate_scene(config, rng);
    if (stats) ++stats->generated;

    const geom::Camera& cam = spec.cameras.front();
    const geom::RigidTransform world_to_view{cam.rotation, cam.translation};
    bool all_visible = true;
    for (const ObjectSpec& obj : spec.objects) {
      geom::Mesh mv = object_mesh(obj);
      mv.vertices = geom::transform_points(world_to_view, mv.vertices);
      if (!rasterize_solo(mv, cam, config.resolution).visible) {
        all_visible = false;
        break;
      }
    }
    if (all_visible) return spec;
    if (stats) ++stats->rejected;
  }
  throw std::runtime_error(
      "generate_visible_scene: no draw produced a fully visible reference view");
}

}  // namespace usl::scenegen
