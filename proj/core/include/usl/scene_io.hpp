#pragma once

// On-disk formats for scenes and pipeline outputs.
//
// Scene directory:
//   scene.json                 object specs, cameras, seed, file manifest
//   view_{j}/instance.png      joint render, gray value = object id + 1
//   view_{j}/depth.dpt         joint depth map
//   view_{j}/obj_{o}_mask.png  per-object solo silhouette, 0/255
//   gt/obj_{o}.obj             world-coordinate ground-truth mesh
//
// Fit output directory: obj_{o}_fit.obj (reference-view coordinates),
// layout.json (z, rho, box per object), trace.csv (iteration, L_3D,
// dist_share, xent_share).  All writers emit canonical bytes (fixed key
// order, shortest round-trip floats), so identical inputs produce identical
// files.  Read failures throw usl::io_error.

#include "usl/fit.hpp"
#include "usl/geom.hpp"
#include "usl/metrics.hpp"
#include "usl/scenegen.hpp"

#include <string>
#include <vector>

namespace usl::sceneio {

void write_scene_dir(const std::string& dir, const scenegen::SceneBundle& bundle);

// Parses scene.json and re-bakes the views from the spec (rendering is
// deterministic, so the result matches the stored images; view 0's instance
// map is checked against instance.png as an integrity guard).
scenegen::SceneBundle read_scene_dir(const std::string& dir);

// Scene directories under `root` named scene_{i}, in index order.
std::vector<std::string> list_scene_dirs(const std::string& root);

void write_fit_dir(const std::string& dir, const fit::FitResult& result);

// Reads obj_{o}_fit.obj back as a predicted scene (meshes only).
metrics::PredictedScene read_pred_dir(const std::string& dir);

void write_report(const std::string& path, const metrics::EvalReport& report);

// Camera serialization: fx, fy, cx, cy, width, height, rotation (row-major,
// 9 values), translation (3 values), as a JSON object string.
std::string camera_to_json(const geom::Camera& cam);
geom::Camera camera_from_json(const std::string& text);

}  // namespace usl::sceneio
