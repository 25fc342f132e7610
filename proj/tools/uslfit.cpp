// uslfit: scene generation, multi-view silhouette fitting, evaluation,
// rendering, and gradient audits from one binary.
//
// Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 gradient-check
// failure.  USL_THREADS caps the scene-level worker pool.  Every subcommand
// accepts --config FILE with flat key=value lines mirroring its flags.

#include "usl/errors.hpp"
#include "usl/fit.hpp"
#include "usl/gradsuite.hpp"
#include "usl/image_io.hpp"
#include "usl/learned.hpp"
#include "usl/metrics.hpp"
#include "usl/net.hpp"
#include "usl/obj_io.hpp"
#include "usl/render.hpp"
#include "usl/scene_io.hpp"
#include "usl/scenegen.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitBadInput = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitGradcheck = 4;

int worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("USL_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, static_cast<unsigned>(cap));
  }
  return static_cast<int>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// Runs fn(i) for i in [0, jobs) on a bounded pool; rethrows the failure with
// the lowest index so errors are deterministic.
template <typename Fn>
void parallel_over(std::size_t jobs, const Fn& fn) {
  const int workers = worker_count(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < jobs; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);
}

struct GenArgs {
  std::string out;
  int num = 1;
  int views = 8;
  int res = 128;
  std::uint64_t seed = 0;
  int objects = 2;
};

int run_gen_scenes(const GenArgs& args) {
  usl::scenegen::GenConfig config;
  config.n_objects = args.objects;
  config.n_azimuth = args.views;
  config.n_elevation = 1;
  config.resolution = args.res;
  config.validate();

  parallel_over(static_cast<std::size_t>(args.num), [&](std::size_t i) {
    const std::uint64_t stream = args.seed ^ static_cast<std::uint64_t>(i);
    std::mt19937_64 rng(stream);
    auto spec = usl::scenegen::generate_visible_scene(config, rng);
    spec.seed = stream;
    const auto bundle = usl::scenegen::bake_scene(spec, config.resolution);
    usl::sceneio::write_scene_dir(
        (fs::path(args.out) / ("scene_" + std::to_string(i))).string(), bundle);
  });
  std::printf("wrote %d scene%s under %s (%d views, %dx%d, %d objects)\n", args.num,
              args.num == 1 ? "" : "s", args.out.c_str(), args.views, args.res, args.res,
              args.objects);
  return kExitOk;
}

struct FitArgs {
  std::string scene;
  std::string out;
  int views = 5;
  int iters = 500;
  double lr = 0.05;
  std::uint64_t seed = 0;
  bool no_dist_loss = false;
  bool roialign = false;
  bool dynamic_render = false;
  bool learned = false;
  std::string init = "sphere_center";
};

usl::fit::FitConfig make_fit_config(const FitArgs& args) {
  usl::fit::FitConfig config;
  config.views = args.views;
  config.iterations = args.iters;
  // One --lr scales both parameter groups, keeping the default 5:1 ratio
  // between layout logits and vertex offsets.
  config.lr_layout = args.lr;
  config.lr_shape = args.lr / 5.0;
  config.seed = args.seed;
  config.use_dist_loss = !args.no_dist_loss;
  config.dynamic_render = args.dynamic_render;
  if (args.init == "sphere_center")
    config.init = usl::fit::InitMode::sphere_center;
  else if (args.init == "perturbed_gt")
    config.init = usl::fit::InitMode::perturbed_gt;
  else
    throw std::invalid_argument("fit: unknown init mode '" + args.init + "'");
  config.validate();
  return config;
}

int run_fit(const FitArgs& args) {
  if (args.learned) {
    const auto dirs = usl::sceneio::list_scene_dirs(args.scene);
    std::vector<usl::scenegen::SceneBundle> bundles;
    bundles.reserve(dirs.size());
    for (const auto& dir : dirs) bundles.push_back(usl::sceneio::read_scene_dir(dir));

    usl::learned::LearnedConfig config;
    config.views = args.views;
    config.steps = args.iters;
    config.lr = args.lr;
    config.seed = args.seed;
    config.roialign = args.roialign;
    const auto result = usl::learned::learned_overfit(bundles, config);

    fs::create_directories(args.out);
    std::ofstream csv(fs::path(args.out) / "learned_trace.csv", std::ios::binary);
    csv << "step,loss\n";
    char line[64];
    for (std::size_t i = 0; i < result.losses.size(); ++i) {
      std::snprintf(line, sizeof line, "%zu,%.17g\n", i, result.losses[i]);
      csv << line;
    }
    usl::net::save_weights((fs::path(args.out) / "weights.bin").string(), result.weights);
    if (result.diverged) {
      std::fprintf(stderr, "error: learned training diverged after %zu steps\n",
                   result.losses.size());
      return kExitNumerical;
    }
    std::printf("learned mode: %zu steps, loss %.6g -> %.6g, weights in %s\n",
                result.losses.size(), result.losses.front(), result.losses.back(),
                args.out.c_str());
    return kExitOk;
  }

  const auto config = make_fit_config(args);
  const bool single = fs::exists(fs::path(args.scene) / "scene.json");
  const std::vector<std::string> dirs =
      single ? std::vector<std::string>{args.scene} : usl::sceneio::list_scene_dirs(args.scene);

  std::atomic<int> diverged{0};
  parallel_over(dirs.size(), [&](std::size_t i) {
    const auto bundle = usl::sceneio::read_scene_dir(dirs[i]);
    usl::fit::FitConfig scene_config = config;
    scene_config.seed = args.seed ^ static_cast<std::uint64_t>(single ? 0 : i);
    const auto result = usl::fit::fit_scene(bundle, scene_config);
    const std::string out =
        single ? args.out : (fs::path(args.out) / ("scene_" + std::to_string(i))).string();
    usl::sceneio::write_fit_dir(out, result);
    if (result.diverged) ++diverged;
  });

  if (diverged > 0) {
    std::fprintf(stderr, "error: %d of %zu fits diverged; last good states were written\n",
                 diverged.load(), dirs.size());
    return kExitNumerical;
  }
  std::printf("fitted %zu scene%s -> %s (%d views, %d iterations)\n", dirs.size(),
              dirs.size() == 1 ? "" : "s", args.out.c_str(), args.views, args.iters);
  return kExitOk;
}

struct EvalArgs {
  std::string pred;
  std::string scenes;
  std::string out;
};

int run_eval(const EvalArgs& args) {
  const bool single = fs::exists(fs::path(args.scenes) / "scene.json");
  const std::vector<std::string> scene_dirs =
      single ? std::vector<std::string>{args.scenes}
             : usl::sceneio::list_scene_dirs(args.scenes);

  std::vector<usl::scenegen::SceneBundle> bundles(scene_dirs.size());
  std::vector<usl::metrics::PredictedScene> preds(scene_dirs.size());
  parallel_over(scene_dirs.size(), [&](std::size_t i) {
    bundles[i] = usl::sceneio::read_scene_dir(scene_dirs[i]);
    const std::string pred_dir =
        single ? args.pred : (fs::path(args.pred) / ("scene_" + std::to_string(i))).string();
    preds[i] = usl::sceneio::read_pred_dir(pred_dir);
  });

  const auto report = usl::metrics::evaluate(preds, bundles);
  usl::sceneio::write_report(args.out, report);
  std::printf("evaluated %zu scene%s -> %s\n", scene_dirs.size(),
              scene_dirs.size() == 1 ? "" : "s", args.out.c_str());
  std::printf("  mask IoU input %.4f / views %.4f, gIoU input %.4f / views %.4f\n",
              report.aggregate.mask2d_iou_input, report.aggregate.mask2d_iou_views,
              report.aggregate.box2d_giou_input, report.aggregate.box2d_giou_views);
  std::printf("  depth L1 input %.4f / views %.4f, chamfer %.6f, F1@0.1 %.2f\n",
              report.aggregate.depth_l1_input, report.aggregate.depth_l1_views,
              report.aggregate.chamfer3d, report.aggregate.f1_at_0p1);
  return kExitOk;
}

struct RenderArgs {
  std::string mesh;
  std::string camera;
  std::string out;
  bool soft = false;
  bool hard = false;
};

int run_render(const RenderArgs& args) {
  std::ifstream in(args.camera, std::ios::binary);
  if (!in) throw usl::io_error("cannot open " + args.camera);
  const std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  const usl::geom::Camera cam = usl::sceneio::camera_from_json(text);
  usl::geom::Mesh mesh = usl::objio::read_obj(args.mesh);
  mesh.space = usl::geom::SpaceTag::view;

  if (args.hard) {
    const auto hr = usl::render::hard_rasterize({mesh}, cam, cam.height, cam.width);
    usl::imageio::write_png_mask(args.out, usl::render::instance_mask(hr, 1));
  } else {
    usl::diff::Tape tape;
    usl::render::RenderConfig config;
    config.height = cam.height;
    config.width = cam.width;
    const auto soft =
        usl::render::soft_rasterize(tape.constant(mesh.vertices), mesh.faces, cam, config);
    usl::imageio::write_png_soft(args.out, soft.values.value());
  }
  std::printf("rendered %s -> %s (%s)\n", args.mesh.c_str(), args.out.c_str(),
              args.hard ? "hard" : "soft");
  return kExitOk;
}

struct GradcheckArgs {
  std::string suite = "all";
  double tol = 1e-3;
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradcheckArgs& args) {
  const auto report = usl::gradsuite::run(args.suite, args.tol, args.seed);
  std::printf("%-8s %-22s %-6s %12s %9s %9s\n", "suite", "check", "status", "max_rel_err",
              "coords", "seconds");
  for (const auto& check : report.checks)
    std::printf("%-8s %-22s %-6s %12.3e %9lld %9.3f\n", check.suite.c_str(),
                check.name.c_str(), check.report.passed ? "pass" : "FAIL",
                check.report.max_rel_err, static_cast<long long>(check.report.n_coords),
                check.seconds);
  std::printf("%s: %zu checks, tol %g, %.2f s total\n", report.passed ? "PASS" : "FAIL",
              report.checks.size(), args.tol, report.seconds);
  return report.passed ? kExitOk : kExitGradcheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view silhouette fitting toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-scenes", "generate synthetic scene directories");
  gen_cmd->set_config("--config");
  gen_cmd->add_option("--out", gen.out, "output root; scenes land in scene_{i}/")->required();
  gen_cmd->add_option("--num", gen.num, "number of scenes")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--views", gen.views, "cameras on the azimuth ring")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--res", gen.res, "image resolution")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "master seed; scene i uses seed^i");
  gen_cmd->add_option("--objects", gen.objects, "objects per scene")
      ->check(CLI::PositiveNumber);

  FitArgs fit;
  auto* fit_cmd =
      app.add_subcommand("fit", "fit shape and layout to a scene directory (or a root of them)");
  fit_cmd->set_config("--config");
  fit_cmd->add_option("--scene", fit.scene, "scene directory, or a root holding scene_{i}/")
      ->required();
  fit_cmd->add_option("--out", fit.out, "output directory")->required();
  fit_cmd->add_option("--views", fit.views, "views used by the objective")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--iters", fit.iters, "optimization iterations")
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--lr", fit.lr, "layout learning rate; offsets use lr/5");
  fit_cmd->add_option("--seed", fit.seed, "seed; scene i of a root uses seed^i");
  fit_cmd->add_option("--init", fit.init, "init mode: sphere_center or perturbed_gt");
  fit_cmd->add_flag("--no-dist-loss", fit.no_dist_loss,
                    "drop the Chamfer term (gated cross-entropy only)");
  fit_cmd->add_flag("--roialign", fit.roialign,
                    "learned mode: sample features via the RoI baseline path");
  fit_cmd->add_flag("--dynamic-render", fit.dynamic_render,
                    "render a zoomed region around each object instead of the full frame");
  fit_cmd->add_flag("--learned", fit.learned,
                    "train the toy network across the scene root instead of direct fitting");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "score fit outputs against their scenes");
  eval_cmd->set_config("--config");
  eval_cmd->add_option("--pred", eval.pred, "fit output directory (or root)")->required();
  eval_cmd->add_option("--scenes", eval.scenes, "scene directory (or root)")->required();
  eval_cmd->add_option("--out", eval.out, "report path")->required();

  RenderArgs render;
  auto* render_cmd = app.add_subcommand("render", "render an OBJ mesh through a camera");
  render_cmd->set_config("--config");
  render_cmd->add_option("--mesh", render.mesh, "OBJ mesh in view coordinates")->required();
  render_cmd->add_option("--camera", render.camera, "camera JSON file")->required();
  render_cmd->add_option("--out", render.out, "output PNG")->required();
  auto* soft_flag = render_cmd->add_flag("--soft", render.soft, "soft silhouette");
  render_cmd->add_flag("--hard", render.hard, "hard mask")->excludes(soft_flag);

  GradcheckArgs gradcheck;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference audit of the gradients");
  grad_cmd->set_config("--config");
  grad_cmd->add_option("--suite", gradcheck.suite, "all, render, loss, or net");
  grad_cmd->add_option("--tol", gradcheck.tol, "max relative error")
      ->check(CLI::PositiveNumber);
  grad_cmd->add_option("--seed", gradcheck.seed, "probe-state seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitBadInput;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_scenes(gen);
    if (fit_cmd->parsed()) return run_fit(fit);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (render_cmd->parsed()) return run_render(render);
    if (grad_cmd->parsed()) return run_gradcheck(gradcheck);
  } catch (const usl::numerical_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitBadInput;
  }
  return kExitBadInput;
}
