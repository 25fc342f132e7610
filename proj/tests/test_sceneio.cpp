#include <doctest.h>

#include "usl/errors.hpp"
#include "usl/fit.hpp"
#include "usl/image_io.hpp"
#include "usl/metrics.hpp"
#include "usl/scene_io.hpp"
#include "usl/scenegen.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

usl::scenegen::SceneBundle small_bundle(std::uint64_t seed) {
  usl::scenegen::GenConfig config;
  config.n_objects = 2;
  config.n_azimuth = 4;
  config.resolution = 48;
  std::mt19937_64 rng(seed);
  const auto spec = usl::scenegen::generate_visible_scene(config, rng);
  return usl::scenegen::bake_scene(spec, config.resolution);
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("sceneio") {
  TEST_CASE("camera json round-trips exactly") {
    const auto cams =
        usl::scenegen::generate_cameras(3, 2, 2.5, Eigen::Vector3d(0.1, -0.2, 1.7), 96);
    for (const auto& cam : cams) {
      const auto back = usl::sceneio::camera_from_json(usl::sceneio::camera_to_json(cam));
      CHECK(back.fx == cam.fx);
      CHECK(back.fy == cam.fy);
      CHECK(back.cx == cam.cx);
      CHECK(back.cy == cam.cy);
      CHECK(back.width == cam.width);
      CHECK(back.height == cam.height);
      CHECK((back.rotation.array() == cam.rotation.array()).all());
      CHECK((back.translation.array() == cam.translation.array()).all());
    }
    CHECK_THROWS_AS(usl::sceneio::camera_from_json("{\"fx\": 1.0}"), usl::io_error);
    CHECK_THROWS_AS(usl::sceneio::camera_from_json("not json"), usl::io_error);
  }

  TEST_CASE("scene directories round-trip through bake") {
    const auto bundle = small_bundle(17);
    const std::string dir = fresh_dir("usl_test_scene_rt");
    usl::sceneio::write_scene_dir(dir, bundle);

    for (const char* name : {"scene.json", "view_0/instance.png", "view_0/depth.dpt",
                             "view_0/obj_0_mask.png", "view_0/obj_1_mask.png", "gt/obj_0.obj",
                             "gt/obj_1.obj"})
      CHECK_MESSAGE(fs::exists(fs::path(dir) / name), "missing ", name);

    const auto back = usl::sceneio::read_scene_dir(dir);
    REQUIRE(back.spec.objects.size() == bundle.spec.objects.size());
    REQUIRE(back.spec.cameras.size() == bundle.spec.cameras.size());
    REQUIRE(back.views.size() == bundle.views.size());
    CHECK(back.spec.seed == bundle.spec.seed);
    for (size_t o = 0; o < bundle.spec.objects.size(); ++o) {
      CHECK(back.spec.objects[o].kind == bundle.spec.objects[o].kind);
      CHECK((back.spec.objects[o].scale.array() == bundle.spec.objects[o].scale.array()).all());
      CHECK(back.spec.objects[o].yaw_deg == bundle.spec.objects[o].yaw_deg);
      CHECK(
          (back.spec.objects[o].position.array() == bundle.spec.objects[o].position.array()).all());
    }
    for (size_t j = 0; j < bundle.views.size(); ++j) {
      CHECK(back.views[j].instance_map == bundle.views[j].instance_map);
      CHECK((back.views[j].depth_map.array() == bundle.views[j].depth_map.array()).all());
      for (size_t o = 0; o < bundle.views[j].objects.size(); ++o) {
        CHECK(back.views[j].objects[o].mask == bundle.views[j].objects[o].mask);
        CHECK(back.views[j].objects[o].visible == bundle.views[j].objects[o].visible);
      }
    }
    for (size_t o = 0; o < bundle.gt_world.size(); ++o)
      CHECK((back.gt_world[o].vertices.array() == bundle.gt_world[o].vertices.array()).all());

    // Writing the same bundle twice produces identical bytes.
    const std::string dir2 = fresh_dir("usl_test_scene_rt2");
    usl::sceneio::write_scene_dir(dir2, bundle);
    CHECK(file_bytes(fs::path(dir) / "scene.json") == file_bytes(fs::path(dir2) / "scene.json"));
    CHECK(file_bytes(fs::path(dir) / "view_0/instance.png") ==
          file_bytes(fs::path(dir2) / "view_0/instance.png"));

    fs::remove_all(dir);
    fs::remove_all(dir2);
  }

  TEST_CASE("tampered or missing scene directories are rejected") {
    CHECK_THROWS_AS(usl::sceneio::read_scene_dir("/nonexistent/usl_scene"), usl::io_error);

    const auto bundle = small_bundle(19);
    const std::string dir = fresh_dir("usl_test_scene_tamper");
    usl::sceneio::write_scene_dir(dir, bundle);

    auto img = usl::imageio::read_png_gray(dir + "/view_0/instance.png");
    img(img.rows() / 2, img.cols() / 2) = 200;
    usl::imageio::write_png_gray(dir + "/view_0/instance.png", img);
    CHECK_THROWS_AS(usl::sceneio::read_scene_dir(dir), usl::io_error);
    fs::remove_all(dir);
  }

  TEST_CASE("scene roots list their scene_{i} directories in order") {
    const std::string root = fresh_dir("usl_test_scene_root");
    const auto bundle = small_bundle(23);
    usl::sceneio::write_scene_dir(root + "/scene_0", bundle);
    usl::sceneio::write_scene_dir(root + "/scene_1", bundle);
    usl::sceneio::write_scene_dir(root + "/scene_3", bundle);  // gap stops the scan

    const auto dirs = usl::sceneio::list_scene_dirs(root);
    REQUIRE(dirs.size() == 2);
    CHECK(dirs[0] == root + "/scene_0");
    CHECK(dirs[1] == root + "/scene_1");

    CHECK_THROWS_AS(usl::sceneio::list_scene_dirs(root + "/empty"), usl::io_error);
    fs::remove_all(root);
  }

  TEST_CASE("fit outputs round-trip and are byte-stable") {
    const auto bundle = small_bundle(29);
    usl::fit::FitConfig config;
    config.views = 2;
    config.iterations = 3;
    config.seed = 5;
    const auto result = usl::fit::fit_scene(bundle, config);

    const std::string dir = fresh_dir("usl_test_fit_out");
    usl::sceneio::write_fit_dir(dir, result);

    const auto pred = usl::sceneio::read_pred_dir(dir);
    REQUIRE(pred.meshes.size() == result.objects.size());
    for (size_t o = 0; o < pred.meshes.size(); ++o) {
      CHECK((pred.meshes[o].vertices.array() == result.objects[o].mesh.vertices.array()).all());
      CHECK(pred.meshes[o].faces == result.objects[o].mesh.faces);
    }

    const auto layout = nlohmann::json::parse(file_bytes(fs::path(dir) / "layout.json"));
    REQUIRE(layout.at("objects").size() == result.objects.size());
    CHECK(layout.at("diverged").get<bool>() == result.diverged);
    CHECK(layout.at("iterations_run").get<int>() == result.iterations_run);
    for (size_t o = 0; o < result.objects.size(); ++o) {
      const auto& jo = layout.at("objects").at(o);
      CHECK(jo.at("z").get<double>() == result.objects[o].z);
      CHECK(jo.at("rho").get<double>() == result.objects[o].rho);
      CHECK(jo.at("box").at(0).get<double>() == result.objects[o].box.x0);
      CHECK(jo.at("box").at(3).get<double>() == result.objects[o].box.y1);
    }

    const auto trace = file_bytes(fs::path(dir) / "trace.csv");
    CHECK(trace.rfind("iteration,L_3D,dist_share,xent_share\n", 0) == 0);
    CHECK(std::count(trace.begin(), trace.end(), '\n') == 1 + result.trace.size());

    const std::string dir2 = fresh_dir("usl_test_fit_out2");
    usl::sceneio::write_fit_dir(dir2, result);
    CHECK(file_bytes(fs::path(dir) / "trace.csv") == file_bytes(fs::path(dir2) / "trace.csv"));
    CHECK(file_bytes(fs::path(dir) / "layout.json") ==
          file_bytes(fs::path(dir2) / "layout.json"));

    CHECK_THROWS_AS(usl::sceneio::read_pred_dir(dir + "/empty"), usl::io_error);
    fs::remove_all(dir);
    fs::remove_all(dir2);
  }

  TEST_CASE("eval reports serialize with fixed keys and stable bytes") {
    usl::metrics::EvalReport report;
    usl::metrics::SceneEval a;
    a.mask2d_iou_input = 0.9;
    a.mask2d_iou_views = 0.8;
    a.box2d_giou_input = 0.7;
    a.box2d_giou_views = 0.6;
    a.depth_l1_input = 0.05;
    a.depth_l1_views = 0.1;
    a.chamfer3d = 1e-3;
    a.f1_at_0p1 = 99.5;
    report.scenes = {a, a};
    report.aggregate = a;

    const std::string dir = fresh_dir("usl_test_report");
    usl::sceneio::write_report(dir + "/report.json", report);
    const auto j = nlohmann::json::parse(file_bytes(fs::path(dir) / "report.json"));
    CHECK(j.at("n_scenes").get<int>() == 2);
    CHECK(j.at("aggregate").at("mask2d_iou_input").get<double>() == 0.9);
    CHECK(j.at("aggregate").at("f1_at_0p1").get<double>() == 99.5);
    CHECK(j.at("scenes").size() == 2);

    usl::sceneio::write_report(dir + "/report2.json", report);
    CHECK(file_bytes(fs::path(dir) / "report.json") ==
          file_bytes(fs::path(dir) / "report2.json"));
    fs::remove_all(dir);
  }
}
