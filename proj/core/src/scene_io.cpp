#include "usl/scene_io.hpp"

#include "usl/errors.hpp"
#include "usl/image_io.hpp"
#include "usl/obj_io.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace usl::sceneio {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

json vec3_to_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw io_error("scene.json: expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

const char* kind_name(scenegen::PrimitiveKind kind) {
  switch (kind) {
    case scenegen::PrimitiveKind::icosphere: return "icosphere";
    case scenegen::PrimitiveKind::cuboid: return "cuboid";
    case scenegen::PrimitiveKind::cylinder: return "cylinder";
    case scenegen::PrimitiveKind::superellipsoid: return "superellipsoid";
  }
  throw std::logic_error("unreachable primitive kind");
}

scenegen::PrimitiveKind kind_from_name(const std::string& name) {
  if (name == "icosphere") return scenegen::PrimitiveKind::icosphere;
  if (name == "cuboid") return scenegen::PrimitiveKind::cuboid;
  if (name == "cylinder") return scenegen::PrimitiveKind::cylinder;
  if (name == "superellipsoid") return scenegen::PrimitiveKind::superellipsoid;
  throw io_error("scene.json: unknown primitive kind '" + name + "'");
}

json camera_json(const geom::Camera& cam) {
  json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  json rot = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(cam.rotation(r, c));
  j["rotation"] = std::move(rot);
  j["translation"] = vec3_to_json(cam.translation);
  return j;
}

geom::Camera camera_parse(const json& j) {
  geom::Camera cam;
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  const auto& rot = j.at("rotation");
  if (!rot.is_array() || rot.size() != 9) throw io_error("camera: rotation must hold 9 values");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.rotation(r, c) = rot[3 * r + c].get<double>();
  cam.translation = vec3_from_json(j.at("translation"));
  cam.validate();
  return cam;
}

json box_to_json(const geom::Box2D& box) {
  return json::array({box.x0, box.y0, box.x1, box.y1});
}

void dump_to_file(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

json parse_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path.string() + ": " + e.what());
  }
}

}  // namespace

std::string camera_to_json(const geom::Camera& cam) { return camera_json(cam).dump(2); }

geom::Camera camera_from_json(const std::string& text) {
  try {
    return camera_parse(json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("camera json: ") + e.what());
  }
}

void write_scene_dir(const std::string& dir, const scenegen::SceneBundle& bundle) {
  const fs::path root(dir);
  fs::create_directories(root / "gt");

  json manifest_views = json::array();
  for (size_t j = 0; j < bundle.views.size(); ++j) {
    const auto& view = bundle.views[j];
    const std::string vdir = "view_" + std::to_string(j);
    fs::create_directories(root / vdir);
    imageio::write_png_gray((root / vdir / "instance.png").string(), view.instance_map);
    imageio::write_depth((root / vdir / "depth.dpt").string(), view.depth_map);
    json masks = json::array();
    for (size_t o = 0; o < view.objects.size(); ++o) {
      const std::string name = "obj_" + std::to_string(o) + "_mask.png";
      imageio::write_png_mask((root / vdir / name).string(), view.objects[o].mask);
      masks.push_back(vdir + "/" + name);
    }
    json entry;
    entry["instance"] = vdir + "/instance.png";
    entry["depth"] = vdir + "/depth.dpt";
    entry["masks"] = std::move(masks);
    manifest_views.push_back(std::move(entry));
  }

  json gt_files = json::array();
  for (size_t o = 0; o < bundle.gt_world.size(); ++o) {
    const std::string name = "gt/obj_" + std::to_string(o) + ".obj";
    objio::write_obj((root / name).string(), bundle.gt_world[o]);
    gt_files.push_back(name);
  }

  json objects = json::array();
  for (const auto& obj : bundle.spec.objects) {
    json jo;
    jo["kind"] = kind_name(obj.kind);
    jo["scale"] = vec3_to_json(obj.scale);
    jo["yaw_deg"] = obj.yaw_deg;
    jo["position"] = vec3_to_json(obj.position);
    objects.push_back(std::move(jo));
  }
  json cameras = json::array();
  for (const auto& cam : bundle.spec.cameras) cameras.push_back(camera_json(cam));

  json scene;
  scene["seed"] = bundle.spec.seed;
  scene["objects"] = std::move(objects);
  scene["cameras"] = std::move(cameras);
  scene["files"] = json{{"views", std::move(manifest_views)}, {"gt", std::move(gt_files)}};
  dump_to_file(root / "scene.json", scene);
}

scenegen::SceneBundle read_scene_dir(const std::string& dir) {
  const fs::path root(dir);
  const json scene = parse_file(root / "scene.json");

  scenegen::SceneSpec spec;
  try {
    spec.seed = scene.at("seed").get<std::uint64_t>();
    for (const auto& jo : scene.at("objects")) {
      scenegen::ObjectSpec obj;
      obj.kind = kind_from_name(jo.at("kind").get<std::string>());
      obj.scale = vec3_from_json(jo.at("scale"));
      obj.yaw_deg = jo.at("yaw_deg").get<double>();
      obj.position = vec3_from_json(jo.at("position"));
      spec.objects.push_back(obj);
    }
    for (const auto& jc : scene.at("cameras")) spec.cameras.push_back(camera_parse(jc));
  } catch (const nlohmann::json::exception& e) {
    throw io_error((root / "scene.json").string() + ": " + e.what());
  }
  if (spec.cameras.empty()) throw io_error(dir + ": scene has no cameras");
  if (spec.objects.empty()) throw io_error(dir + ": scene has no objects");

  scenegen::SceneBundle bundle = scenegen::bake_scene(spec, spec.cameras[0].width);

  // Rendering is deterministic, so the stored reference view must agree with
  // the re-bake; a mismatch means the directory was edited or corrupted.
  const Eigen::MatrixXi stored =
      imageio::read_png_gray((root / "view_0" / "instance.png").string());
  if (stored.rows() != bundle.views[0].instance_map.rows() ||
      stored.cols() != bundle.views[0].instance_map.cols() ||
      stored != bundle.views[0].instance_map)
    throw io_error(dir + ": view_0/instance.png does not match the scene spec");
  return bundle;
}

std::vector<std::string> list_scene_dirs(const std::string& root) {
  std::vector<std::string> dirs;
  for (int i = 0;; ++i) {
    const fs::path candidate = fs::path(root) / ("scene_" + std::to_string(i));
    if (!fs::exists(candidate / "scene.json")) break;
    dirs.push_back(candidate.string());
  }
  if (dirs.empty()) throw io_error(root + ": no scene_{i} directories found");
  return dirs;
}

void write_fit_dir(const std::string& dir, const fit::FitResult& result) {
  const fs::path root(dir);
  fs::create_directories(root);

  json layout = json::array();
  for (size_t o = 0; o < result.objects.size(); ++o) {
    const auto& obj = result.objects[o];
    objio::write_obj((root / ("obj_" + std::to_string(o) + "_fit.obj")).string(), obj.mesh);
    json jo;
    jo["object"] = o;
    jo["z"] = obj.z;
    jo["rho"] = obj.rho;
    jo["box"] = box_to_json(obj.box);
    layout.push_back(std::move(jo));
  }
  json top;
  top["diverged"] = result.diverged;
  top["iterations_run"] = result.iterations_run;
  top["objects"] = std::move(layout);
  dump_to_file(root / "layout.json", top);

  std::ofstream csv(root / "trace.csv", std::ios::binary);
  if (!csv) throw io_error("cannot open " + (root / "trace.csv").string() + " for writing");
  csv << "iteration,L_3D,dist_share,xent_share\n";
  char line[160];
  for (const auto& row : result.trace) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g\n", row.iteration, row.l3d,
                  row.dist_share, row.xent_share);
    csv << line;
  }
}

metrics::PredictedScene read_pred_dir(const std::string& dir) {
  metrics::PredictedScene pred;
  for (int o = 0;; ++o) {
    const fs::path path = fs::path(dir) / ("obj_" + std::to_string(o) + "_fit.obj");
    if (!fs::exists(path)) break;
    pred.meshes.push_back(objio::read_obj(path.string()));
  }
  if (pred.meshes.empty()) throw io_error(dir + ": no obj_{o}_fit.obj files found");
  return pred;
}

namespace {

json scene_eval_json(const metrics::SceneEval& e) {
  json j;
  j["mask2d_iou_input"] = e.mask2d_iou_input;
  j["mask2d_iou_views"] = e.mask2d_iou_views;
  j["box2d_giou_input"] = e.box2d_giou_input;
  j["box2d_giou_views"] = e.box2d_giou_views;
  j["depth_l1_input"] = e.depth_l1_input;
  j["depth_l1_views"] = e.depth_l1_views;
  j["chamfer3d"] = e.chamfer3d;
  j["f1_at_0p1"] = e.f1_at_0p1;
  return j;
}

}  // namespace

void write_report(const std::string& path, const metrics::EvalReport& report) {
  json scenes = json::array();
  for (const auto& scene : report.scenes) scenes.push_back(scene_eval_json(scene));
  json j;
  j["n_scenes"] = report.scenes.size();
  j["aggregate"] = scene_eval_json(report.aggregate);
  j["scenes"] = std::move(scenes);
  dump_to_file(path, j);
}

}  // namespace usl::sceneio
