#include "usl/net.hpp"

#include "usl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace usl::net {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void FeatureMap::validate() const {
  require(width >= 1 && height >= 1, "FeatureMap: size must be >= 1");
  require(stride > 0.0, "FeatureMap: stride must be > 0");
  require(values.rows() == static_cast<Eigen::Index>(height) * width,
          "FeatureMap: row count must be height*width");
  require(values.cols() >= 1, "FeatureMap: needs at least one channel");
}

Var bilinear_sample(Var features, int height, int width, Var coords) {
  require(height >= 1 && width >= 1, "bilinear_sample: grid size must be >= 1");
  require(features.rows() == static_cast<Eigen::Index>(height) * width,
          "bilinear_sample: feature row count must be height*width");
  require(coords.cols() == 2, "bilinear_sample: coords must be n x 2");

  const int h = height, w = width;
  // shared by forward and backward: corner rows and weights for one point
  auto corners = [h, w](const Array& pts, Eigen::Index n, Eigen::Index idx[4], double wt[4],
                        bool clamped[2], double diff_w[2][4]) {
    const double u = std::clamp(pts(n, 0) - 0.5, 0.0, static_cast<double>(w - 1));
    const double v = std::clamp(pts(n, 1) - 0.5, 0.0, static_cast<double>(h - 1));
    clamped[0] = pts(n, 0) - 0.5 != u;
    clamped[1] = pts(n, 1) - 0.5 != v;
    const Eigen::Index x0 = std::min(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(w - 1));
    const Eigen::Index y0 = std::min(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(h - 1));
    const Eigen::Index x1 = std::min(x0 + 1, static_cast<Eigen::Index>(w - 1));
    const Eigen::Index y1 = std::min(y0 + 1, static_cast<Eigen::Index>(h - 1));
    const double fx = u - static_cast<double>(x0), fy = v - static_cast<double>(y0);
    idx[0] = y0 * w + x0;
    idx[1] = y0 * w + x1;
    idx[2] = y1 * w + x0;
    idx[3] = y1 * w + x1;
    wt[0] = (1 - fx) * (1 - fy);
    wt[1] = fx * (1 - fy);
    wt[2] = (1 - fx) * fy;
    wt[3] = fx * fy;
    // d(value)/du and /dv as weights over the same four corners
    diff_w[0][0] = -(1 - fy);
    diff_w[0][1] = (1 - fy);
    diff_w[0][2] = -fy;
    diff_w[0][3] = fy;
    diff_w[1][0] = -(1 - fx);
    diff_w[1][1] = -fx;
    diff_w[1][2] = (1 - fx);
    diff_w[1][3] = fx;
  };

  const Array& f = features.value();
  const Array& pts = coords.value();
  Array out(pts.rows(), f.cols());
  for (Eigen::Index n = 0; n < pts.rows(); ++n) {
    Eigen::Index idx[4];
    double wt[4], dw[2][4];
    bool cl[2];
    corners(pts, n, idx, wt, cl, dw);
    out.row(n) = wt[0] * f.row(idx[0]) + wt[1] * f.row(idx[1]) + wt[2] * f.row(idx[2]) +
                 wt[3] * f.row(idx[3]);
  }

  auto backward = [corners](const Array& grad_out, const Array&,
                            const std::vector<const Array*>& pv,
                            const std::vector<Array*>& pg) {
    const Array& fv = *pv[0];
    const Array& cv = *pv[1];
    Array* gf = pg[0];
    Array* gc = pg[1];
    for (Eigen::Index n = 0; n < cv.rows(); ++n) {
      Eigen::Index idx[4];
      double wt[4], dw[2][4];
      bool cl[2];
      corners(cv, n, idx, wt, cl, dw);
      if (gf)
        for (int k = 0; k < 4; ++k) gf->row(idx[k]) += wt[k] * grad_out.row(n);
      if (gc) {
        for (int axis = 0; axis < 2; ++axis) {
          if (cl[axis]) continue;  // border clamp freezes the coordinate
          double acc = 0.0;
          for (int k = 0; k < 4; ++k)
            acc += dw[axis][k] * grad_out.row(n).dot(fv.row(idx[k]));
          (*gc)(n, axis) += acc;
        }
      }
    }
  };
  return features.tape->custom({features, coords}, std::move(out), backward,
                               "bilinear_sample");
}

VertexSamples roimap(Tape& tape, const FeatureMap& fm, const geom::Camera& camera,
                     const geom::Frustum& frustum, Var vertices) {
  fm.validate();
  geom::validate_frustum(frustum, camera);
  Var warped = geom::frustum_apply(vertices, tape.constant(frustum.z),
                                   tape.constant(frustum.rho), frustum.box, camera);
  auto [pix, depth] = geom::project(camera, warped);
  (void)depth;
  Var cells = tape.scale(pix, 1.0 / fm.stride);
  return {bilinear_sample(fm.values, fm.height, fm.width, cells), cells};
}

VertexSamples roialign_vertalign(Tape& tape, const FeatureMap& fm,
                                 const geom::Camera& camera, const geom::Frustum& frustum,
                                 Var vertices, int roi_size) {
  fm.validate();
  geom::validate_frustum(frustum, camera);
  require(roi_size >= 1, "roialign_vertalign: roi_size must be >= 1");
  const geom::Box2D& box = frustum.box;
  const int s = roi_size;

  // fixed square grid over the box, in feature cells
  Array grid(static_cast<Eigen::Index>(s) * s, 2);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      grid(static_cast<Eigen::Index>(i) * s + j, 0) =
          (box.x0 + (j + 0.5) * box.width() / s) / fm.stride;
      grid(static_cast<Eigen::Index>(i) * s + j, 1) =
          (box.y0 + (i + 0.5) * box.height() / s) / fm.stride;
    }
  Var roi = bilinear_sample(fm.values, fm.height, fm.width, tape.constant(grid));

  Var warped = geom::frustum_apply(vertices, tape.constant(frustum.z),
                                   tape.constant(frustum.rho), box, camera);
  auto [pix, depth] = geom::project(camera, warped);
  (void)depth;
  // box-relative coordinates: per-axis scale follows the box aspect ratio
  Var u = tape.scale(tape.add_const(tape.cols(pix, 0, 1), -box.x0), s / box.width());
  Var v = tape.scale(tape.add_const(tape.cols(pix, 1, 1), -box.y0), s / box.height());
  Var uv = tape.concat_cols(u, v);
  return {bilinear_sample(roi, s, s, uv), uv};
}

Var neighbor_sum(Tape& tape, Var features, const Eigen::MatrixXi& edges) {
  require(edges.cols() == 2 || edges.rows() == 0, "neighbor_sum: edges must be e x 2");
  const Array& f = features.value();
  for (Eigen::Index e = 0; e < edges.rows(); ++e)
    require(edges(e, 0) >= 0 && edges(e, 0) < f.rows() && edges(e, 1) >= 0 &&
                edges(e, 1) < f.rows(),
            "neighbor_sum: edge index out of range");

  auto scatter = [edges](const Array& in) {
    Array out = Array::Zero(in.rows(), in.cols());
    for (Eigen::Index e = 0; e < edges.rows(); ++e) {
      out.row(edges(e, 0)) += in.row(edges(e, 1));
      out.row(edges(e, 1)) += in.row(edges(e, 0));
    }
    return out;
  };
  auto backward = [scatter](const Array& grad_out, const Array&,
                            const std::vector<const Array*>&, const std::vector<Array*>& pg) {
    if (pg[0]) *pg[0] += scatter(grad_out);  // the adjacency is symmetric
  };
  return tape.custom({features}, scatter(f), backward, "neighbor_sum");
}

Var graph_conv(Tape& tape, Var features, const Eigen::MatrixXi& edges, Var w0, Var w1) {
  require(w0.rows() == w1.rows() && w0.cols() == w1.cols(),
          "graph_conv: weight shape mismatch");
  require(features.cols() == w0.rows(), "graph_conv: feature/weight dimension mismatch");
  return tape.relu(
      tape.add(tape.matmul(features, w0), tape.matmul(neighbor_sum(tape, features, edges), w1)));
}

RefinementState refine_stage(Tape& tape, const RefinementState& state,
                             const FeatureMap& fm, const geom::Camera& camera,
                             const geom::Frustum& frustum, const Eigen::MatrixXi& edges,
                             const RefineStageWeights& weights, SamplePath path) {
  require(state.vertices.cols() == 3, "refine_stage: vertices must be v x 3");
  VertexSamples samples = path == SamplePath::roimap
                              ? roimap(tape, fm, camera, frustum, state.vertices)
                              : roialign_vertalign(tape, fm, camera, frustum, state.vertices);
  Var h = samples.features;
  for (const GraphConvWeights& gcw : weights.convs) {
    Var x = tape.concat_cols(h, state.vertices);
    h = graph_conv(tape, x, edges, gcw.w0, gcw.w1);
  }
  Var xo = tape.concat_cols(h, state.vertices);
  Var dv = tape.tanh(tape.add_rowvec(tape.matmul(xo, weights.w_out), weights.b_out));
  Var next = tape.clamp(tape.add(state.vertices, dv), -1.0, 1.0);
  return {next, h, state.stage + 1};
}

Var average_pool(Tape& tape, const FeatureMap& fm) {
  fm.validate();
  const Eigen::Index n = fm.values.rows();
  return tape.matmul(
      tape.constant(Array::Constant(1, n, 1.0 / static_cast<double>(n))), fm.values);
}

LayoutPrediction layout_head_forward(Tape& tape, Var pooled, const LayoutHeadWeights& weights,
                                     const geom::LayoutBounds& bounds) {
  require(pooled.rows() == 1, "layout_head_forward: pooled feature must be a row");
  Var h = pooled;
  for (int k = 0; k < 4; ++k)
    h = tape.relu(tape.add_rowvec(tape.matmul(h, weights.w[static_cast<size_t>(k)]),
                                  weights.b[static_cast<size_t>(k)]));
  LayoutPrediction out;
  out.rho_t = tape.sigmoid(tape.add_rowvec(tape.matmul(h, weights.w_rho), weights.b_rho));
  out.z_t = tape.sigmoid(tape.add_rowvec(tape.matmul(h, weights.w_z), weights.b_z));
  auto [rho, z] = geom::layout_decode(out.rho_t, out.z_t, bounds);
  out.rho = rho;
  out.z = z;
  return out;
}

FeatureMap fixed_backbone(Tape& tape, const Eigen::MatrixXd& image, int stride) {
  require(stride >= 1, "fixed_backbone: stride must be >= 1");
  const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
  require(h % stride == 0 && w % stride == 0,
          "fixed_backbone: image size must be divisible by the stride");
  const int ho = h / stride, wo = w / stride;

  Eigen::MatrixXd pooled(ho, wo);
  for (int r = 0; r < ho; ++r)
    for (int c = 0; c < wo; ++c)
      pooled(r, c) = image.block(r * stride, c * stride, stride, stride).mean();

  Array values(static_cast<Eigen::Index>(ho) * wo, 5);
  for (int r = 0; r < ho; ++r)
    for (int c = 0; c < wo; ++c) {
      const Eigen::Index row = static_cast<Eigen::Index>(r) * wo + c;
      const double left = pooled(r, std::max(c - 1, 0));
      const double right = pooled(r, std::min(c + 1, wo - 1));
      const double up = pooled(std::max(r - 1, 0), c);
      const double down = pooled(std::min(r + 1, ho - 1), c);
      values(row, 0) = pooled(r, c);
      values(row, 1) = 0.5 * (right - left);
      values(row, 2) = 0.5 * (down - up);
      values(row, 3) = (c + 0.5) / wo;
      values(row, 4) = (r + 0.5) / ho;
    }
  return {tape.constant(std::move(values)), wo, ho, static_cast<double>(stride)};
}

Var im2col(Tape& tape, Var cells, int height, int width, int ksize, int stride) {
  require(ksize >= 1 && stride >= 1, "im2col: ksize and stride must be >= 1");
  require(height >= ksize && width >= ksize, "im2col: kernel larger than input");
  require(cells.rows() == static_cast<Eigen::Index>(height) * width,
          "im2col: cell row count must be height*width");
  const int ho = (height - ksize) / stride + 1;
  const int wo = (width - ksize) / stride + 1;
  const Eigen::Index ch = cells.cols();

  // patch layout: (dr, dc) major, channel minor
  auto gather = [=](const Array& in) {
    Array out(static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(ksize) * ksize * ch);
    for (int r = 0; r < ho; ++r)
      for (int c = 0; c < wo; ++c) {
        const Eigen::Index row = static_cast<Eigen::Index>(r) * wo + c;
        for (int dr = 0; dr < ksize; ++dr)
          for (int dc = 0; dc < ksize; ++dc) {
            const Eigen::Index src = static_cast<Eigen::Index>(r * stride + dr) * width +
                                     (c * stride + dc);
            out.block(row, (static_cast<Eigen::Index>(dr) * ksize + dc) * ch, 1, ch) =
                in.row(src);
          }
      }
    return out;
  };
  auto backward = [=](const Array& grad_out, const Array&,
                      const std::vector<const Array*>&, const std::vector<Array*>& pg) {
    Array* g = pg[0];
    if (!g) return;
    for (int r = 0; r < ho; ++r)
      for (int c = 0; c < wo; ++c) {
        const Eigen::Index row = static_cast<Eigen::Index>(r) * wo + c;
        for (int dr = 0; dr < ksize; ++dr)
          for (int dc = 0; dc < ksize; ++dc) {
            const Eigen::Index src = static_cast<Eigen::Index>(r * stride + dr) * width +
                                     (c * stride + dc);
            g->row(src) +=
                grad_out.block(row, (static_cast<Eigen::Index>(dr) * ksize + dc) * ch, 1, ch);
          }
      }
  };
  return tape.custom({cells}, gather(cells.value()), backward, "im2col");
}

FeatureMap conv_backbone(Tape& tape, const Eigen::MatrixXd& image,
                         const ConvBackboneWeights& weights) {
  const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
  require(h >= 7 && w >= 7, "conv_backbone: image too small");
  Array flat(static_cast<Eigen::Index>(h) * w, 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) flat(static_cast<Eigen::Index>(r) * w + c, 0) = image(r, c);

  Var x = tape.constant(std::move(flat));
  Var p1 = im2col(tape, x, h, w, 3, 2);
  Var h1 = tape.relu(tape.add_rowvec(tape.matmul(p1, weights.k1), weights.b1));
  const int h1h = (h - 3) / 2 + 1, h1w = (w - 3) / 2 + 1;
  Var p2 = im2col(tape, h1, h1h, h1w, 3, 2);
  Var h2 = tape.relu(tape.add_rowvec(tape.matmul(p2, weights.k2), weights.b2));
  const int h2h = (h1h - 3) / 2 + 1, h2w = (h1w - 3) / 2 + 1;
  // receptive-field centers sit ~1.5 px off the nominal stride-4 grid;
  // acceptable at toy scale
  return {h2, h2w, h2h, 4.0};
}

void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Eigen::MatrixXd>>& arrays) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw io_error("save_weights: cannot open " + path);
  auto put = [&](const void* p, size_t n) {
    if (std::fwrite(p, 1, n, f.get()) != n) throw io_error("save_weights: short write");
  };
  put("USLW", 4);
  const std::uint16_t version = 1;
  put(&version, 2);
  const std::uint32_t count = static_cast<std::uint32_t>(arrays.size());
  put(&count, 4);
  for (const auto& [name, m] : arrays) {
    if (name.size() > 0xffff) throw io_error("save_weights: name too long");
    const std::uint16_t len = static_cast<std::uint16_t>(name.size());
    put(&len, 2);
    put(name.data(), name.size());
    const std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
    const std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
    put(&rows, 4);
    put(&cols, 4);
    put(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
  }
}

std::vector<std::pair<std::string, Eigen::MatrixXd>> load_weights(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw io_error("load_weights: cannot open " + path);
  auto get = [&](void* p, size_t n) {
    if (std::fread(p, 1, n, f.get()) != n) throw io_error("load_weights: truncated file");
  };
  char magic[4];
  get(magic, 4);
  if (std::string(magic, 4) != "USLW") throw io_error("load_weights: bad magic");
  std::uint16_t version = 0;
  get(&version, 2);
  if (version != 1) throw io_error("load_weights: unsupported version");
  std::uint32_t count = 0;
  get(&count, 4);
  std::vector<std::pair<std::string, Eigen::MatrixXd>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    get(&len, 2);
    std::string name(len, '\0');
    get(name.data(), len);
    std::uint32_t rows = 0, cols = 0;
    get(&rows, 4);
    get(&cols, 4);
    Eigen::MatrixXd m(rows, cols);
    get(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

}  // namespace usl::net
