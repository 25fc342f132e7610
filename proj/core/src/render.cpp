#include "usl/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <thread>
#include <vector>

namespace usl::render {

using diff::Array;
using diff::Var;

void RenderConfig::validate() const {
  if (height < 1 || width < 1) throw std::invalid_argument("render: resolution must be >= 1");
  if (faces_per_pixel < 1) throw std::invalid_argument("render: faces_per_pixel must be >= 1");
  if (!(blur_radius > 0) || !(blend_sigma > 0))
    throw std::invalid_argument("render: blur_radius and blend_sigma must be positive");
  if (threads < 1) throw std::invalid_argument("render: threads must be >= 1");
}

namespace {

struct Cand {
  int32_t face;
  int8_t inside;
  int8_t edge;    // argmin edge segment: 0=(a,b), 1=(b,c), 2=(c,a)
  double d2;      // squared NDC distance to that segment
  double t;       // clamped segment parameter of the closest point
};

struct FaceMeta {
  double depth;   // mean clamped vertex depth, the truncation key
  double min_x, min_y, max_x, max_y;  // NDC bbox of the projected triangle
  bool active;
};

double cross2(double ux, double uy, double vx, double vy) { return ux * vy - uy * vx; }

// closest-point parameter and squared distance from q to segment [p0, p1]
void point_segment(double qx, double qy, double p0x, double p0y, double p1x, double p1y,
                   double& t, double& d2) {
  const double ex = p1x - p0x, ey = p1y - p0y;
  const double len2 = ex * ex + ey * ey;
  t = len2 > 0 ? std::clamp(((qx - p0x) * ex + (qy - p0y) * ey) / len2, 0.0, 1.0) : 0.0;
  const double dx = qx - (p0x + t * ex), dy = qy - (p0y + t * ey);
  d2 = dx * dx + dy * dy;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct RasterState {
  Eigen::MatrixXi faces;
  Eigen::MatrixXd ndc;      // V x 2 projected vertices
  Eigen::VectorXd zc;       // V clamped depths
  std::vector<char> z_clamped;
  std::vector<Cand> cands;  // H*W*K slots
  std::vector<int> counts;  // per pixel
  RenderConfig cfg;
  geom::Box2D region;
  double diag;
  double fx, fy;
};

void run_bands(int height, int threads, const std::function<void(int, int)>& body) {
  if (threads <= 1) {
    body(0, height);
    return;
  }
  const int bands = std::min(threads, height);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(bands));
  for (int b = 0; b < bands; ++b) {
    const int r0 = height * b / bands, r1 = height * (b + 1) / bands;
    pool.emplace_back(body, r0, r1);
  }
  for (auto& th : pool) th.join();
}

}  // namespace

SoftSilhouette soft_rasterize(Var vertices, const Eigen::MatrixXi& faces,
                              const geom::Camera& camera, const RenderConfig& config,
                              const geom::Box2D& region) {
  config.validate();
  if (!region.valid()) throw std::invalid_argument("soft_rasterize: empty region");
  const Array& V = vertices.value();
  if (V.size() > 0 && V.cols() != 3)
    throw std::invalid_argument("soft_rasterize: vertices must be Nx3");

  const int H = config.height, W = config.width, K = config.faces_per_pixel;
  const double diag = ndc_scale(camera);
  const Eigen::Index nv = V.rows();
  const Eigen::Index nf = faces.rows();

  auto st = std::make_shared<RasterState>();
  st->faces = faces;
  st->cfg = config;
  st->region = region;
  st->diag = diag;
  st->fx = camera.fx;
  st->fy = camera.fy;
  st->ndc.resize(nv, 2);
  st->zc.resize(nv);
  st->z_clamped.assign(static_cast<size_t>(nv), 0);

  for (Eigen::Index i = 0; i < nv; ++i) {
    double z = V(i, 2);
    if (z < kNearClip) {
      z = kNearClip;
      st->z_clamped[static_cast<size_t>(i)] = 1;
    }
    st->zc(i) = z;
    st->ndc(i, 0) = (camera.fx * V(i, 0) / z + camera.cx) / diag;
    st->ndc(i, 1) = (camera.fy * V(i, 1) / z + camera.cy) / diag;
  }

  std::vector<FaceMeta> meta(static_cast<size_t>(nf));
  for (Eigen::Index f = 0; f < nf; ++f) {
    FaceMeta& m = meta[static_cast<size_t>(f)];
    const int a = faces(f, 0), b = faces(f, 1), c = faces(f, 2);
    m.active = !(V(a, 2) <= 0 && V(b, 2) <= 0 && V(c, 2) <= 0);
    if (m.active && config.cull_backfaces) {
      const Eigen::Vector3d va = V.row(a), vb = V.row(b), vc = V.row(c);
      const Eigen::Vector3d n = (vb - va).cross(vc - va);
      if (n.dot(va + vb + vc) >= 0) m.active = false;  // facing away from origin
    }
    if (!m.active) continue;
    m.depth = (st->zc(a) + st->zc(b) + st->zc(c)) / 3.0;
    m.min_x = std::min({st->ndc(a, 0), st->ndc(b, 0), st->ndc(c, 0)});
    m.max_x = std::max({st->ndc(a, 0), st->ndc(b, 0), st->ndc(c, 0)});
    m.min_y = std::min({st->ndc(a, 1), st->ndc(b, 1), st->ndc(c, 1)});
    m.max_y = std::max({st->ndc(a, 1), st->ndc(b, 1), st->ndc(c, 1)});
  }

  st->cands.assign(static_cast<size_t>(H) * W * K, Cand{});
  st->counts.assign(static_cast<size_t>(H) * W, 0);

  const double sx = region.width() / W, sy = region.height() / H;
  const double blur_reach = std::sqrt(config.blur_radius);
  Array values = Array::Zero(H, W);

  auto forward_band = [&](int r0, int r1) {
    for (Eigen::Index f = 0; f < nf; ++f) {
      const FaceMeta& m = meta[static_cast<size_t>(f)];
      if (!m.active) continue;
      // face bbox + blur reach, NDC -> region pixel indices
      const double px0 = (m.min_x - blur_reach) * diag, px1 = (m.max_x + blur_reach) * diag;
      const double py0 = (m.min_y - blur_reach) * diag, py1 = (m.max_y + blur_reach) * diag;
      int c0 = static_cast<int>(std::floor((px0 - region.x0) / sx - 0.5));
      int c1 = static_cast<int>(std::ceil((px1 - region.x0) / sx - 0.5));
      int rr0 = static_cast<int>(std::floor((py0 - region.y0) / sy - 0.5));
      int rr1 = static_cast<int>(std::ceil((py1 - region.y0) / sy - 0.5));
      c0 = std::max(c0, 0);
      c1 = std::min(c1, W - 1);
      rr0 = std::max(rr0, r0);
      rr1 = std::min(rr1, r1 - 1);
      if (c0 > c1 || rr0 > rr1) continue;

      const int ia = faces(f, 0), ib = faces(f, 1), ic = faces(f, 2);
      const double ax = st->ndc(ia, 0), ay = st->ndc(ia, 1);
      const double bx = st->ndc(ib, 0), by = st->ndc(ib, 1);
      const double cx2 = st->ndc(ic, 0), cy2 = st->ndc(ic, 1);

      for (int r = rr0; r <= rr1; ++r) {
        const double qy = (region.y0 + (r + 0.5) * sy) / diag;
        for (int c = c0; c <= c1; ++c) {
          const double qx = (region.x0 + (c + 0.5) * sx) / diag;
          const double s1 = cross2(bx - ax, by - ay, qx - ax, qy - ay);
          const double s2 = cross2(cx2 - bx, cy2 - by, qx - bx, qy - by);
          const double s3 = cross2(ax - cx2, ay - cy2, qx - cx2, qy - cy2);
          const bool inside = (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);

          double t01, d01, t12, d12, t20, d20;
          point_segment(qx, qy, ax, ay, bx, by, t01, d01);
          point_segment(qx, qy, bx, by, cx2, cy2, t12, d12);
          point_segment(qx, qy, cx2, cy2, ax, ay, t20, d20);
          int edge = 0;
          double d2 = d01, t = t01;
          if (d12 < d2) {
            d2 = d12;
            t = t12;
            edge = 1;
          }
          if (d20 < d2) {
            d2 = d20;
            t = t20;
            edge = 2;
          }
          if (!inside && d2 > config.blur_radius) continue;

          const size_t pix = static_cast<size_t>(r) * W + c;
          Cand* slot = &st->cands[pix * K];
          int& n = st->counts[pix];
          Cand cand{static_cast<int32_t>(f), static_cast<int8_t>(inside ? 1 : 0),
                    static_cast<int8_t>(edge), d2, t};
          if (n < K) {
            slot[n++] = cand;
          } else {
            // replace the farthest-by-depth slot when strictly nearer
            int worst = 0;
            double worst_depth = meta[static_cast<size_t>(slot[0].face)].depth;
            for (int k = 1; k < K; ++k) {
              const double dk = meta[static_cast<size_t>(slot[k].face)].depth;
              if (dk > worst_depth) {
                worst_depth = dk;
                worst = k;
              }
            }
            if (m.depth < worst_depth) slot[worst] = cand;
          }
        }
      }
    }
    // aggregate
    for (int r = r0; r < r1; ++r)
      for (int c = 0; c < W; ++c) {
        const size_t pix = static_cast<size_t>(r) * W + c;
        const int n = st->counts[pix];
        double prod = 1.0;
        for (int k = 0; k < n; ++k) {
          const Cand& cd = st->cands[pix * K + k];
          const double arg = (cd.inside ? 1.0 : -1.0) * cd.d2 / config.blend_sigma;
          prod *= 1.0 - stable_sigmoid(arg);
        }
        values(r, c) = 1.0 - prod;
      }
  };
  run_bands(H, config.threads, forward_band);

  const int threads = config.threads;
  auto backward = [st, H, W, K, threads](const Array& g, const Array&,
                                         const std::vector<const Array*>& pv,
                                         const std::vector<Array*>& pg) {
    if (!pg[0]) return;
    const Array& V = *pv[0];
    const Eigen::Index nv = V.rows();
    const int bands = threads <= 1 ? 1 : std::min(threads, H);
    std::vector<Eigen::MatrixXd> band_ndc_grad(static_cast<size_t>(bands));

    auto band_body = [&](int band) {
      Eigen::MatrixXd& gn = band_ndc_grad[static_cast<size_t>(band)];
      gn = Eigen::MatrixXd::Zero(nv, 2);
      const int r0 = H * band / bands, r1 = H * (band + 1) / bands;
      double D[64], pref[64], suf[64];
      for (int r = r0; r < r1; ++r)
        for (int c = 0; c < W; ++c) {
          const double ga = g(r, c);
          if (ga == 0.0) continue;
          const size_t pix = static_cast<size_t>(r) * W + c;
          const int n = st->counts[pix];
          if (n == 0) continue;
          const Cand* slot = &st->cands[pix * K];
          for (int k = 0; k < n; ++k) {
            const double arg =
                (slot[k].inside ? 1.0 : -1.0) * slot[k].d2 / st->cfg.blend_sigma;
            D[k] = stable_sigmoid(arg);
          }
          double acc = 1.0;
          for (int k = 0; k < n; ++k) {
            pref[k] = acc;
            acc *= 1.0 - D[k];
          }
          acc = 1.0;
          for (int k = n - 1; k >= 0; --k) {
            suf[k] = acc;
            acc *= 1.0 - D[k];
          }
          for (int k = 0; k < n; ++k) {
            const Cand& cd = slot[k];
            // dA/dD_k = prod_{j != k} (1 - D_j)
            const double gD = ga * pref[k] * suf[k];
            const double delta = cd.inside ? 1.0 : -1.0;
            const double gd2 = gD * delta * D[k] * (1.0 - D[k]) / st->cfg.blend_sigma;
            if (gd2 == 0.0) continue;
            const int f = cd.face;
            const int i0 = st->faces(f, cd.edge);
            const int i1 = st->faces(f, (cd.edge + 1) % 3);
            const double p0x = st->ndc(i0, 0), p0y = st->ndc(i0, 1);
            const double p1x = st->ndc(i1, 0), p1y = st->ndc(i1, 1);
            const double sxp = st->region.width() / st->cfg.width;
            const double syp = st->region.height() / st->cfg.height;
            const double qx = (st->region.x0 + (c + 0.5) * sxp) / st->diag;
            const double qy = (st->region.y0 + (r + 0.5) * syp) / st->diag;
            const double t = cd.t;
            const double ex = qx - (p0x + t * (p1x - p0x));
            const double ey = qy - (p0y + t * (p1y - p0y));
            // envelope rule: t held fixed at its optimum
            gn(i0, 0) += gd2 * (-2.0) * ex * (1.0 - t);
            gn(i0, 1) += gd2 * (-2.0) * ey * (1.0 - t);
            gn(i1, 0) += gd2 * (-2.0) * ex * t;
            gn(i1, 1) += gd2 * (-2.0) * ey * t;
          }
        }
    };
    if (bands == 1) {
      band_body(0);
    } else {
      std::vector<std::thread> pool;
      pool.reserve(static_cast<size_t>(bands));
      for (int b = 0; b < bands; ++b) pool.emplace_back(band_body, b);
      for (auto& th : pool) th.join();
    }

    Eigen::MatrixXd gndc = Eigen::MatrixXd::Zero(nv, 2);
    for (int b = 0; b < bands; ++b) gndc += band_ndc_grad[static_cast<size_t>(b)];

    // NDC -> view space through the pinhole jacobian
    for (Eigen::Index i = 0; i < nv; ++i) {
      const double gx = gndc(i, 0) / st->diag, gy = gndc(i, 1) / st->diag;
      if (gx == 0.0 && gy == 0.0) continue;
      const double z = st->zc(i);
      (*pg[0])(i, 0) += gx * st->fx / z;
      (*pg[0])(i, 1) += gy * st->fy / z;
      if (!st->z_clamped[static_cast<size_t>(i)])
        (*pg[0])(i, 2) -= (gx * st->fx * V(i, 0) + gy * st->fy * V(i, 1)) / (z * z);
    }
  };

  if (K > 64) throw std::invalid_argument("soft_rasterize: faces_per_pixel > 64 unsupported");
  Var out = vertices.tape->custom({vertices}, std::move(values), backward, "soft_raster");
  return SoftSilhouette{region, out};
}

SoftSilhouette soft_rasterize(Var vertices, const Eigen::MatrixXi& faces,
                              const geom::Camera& camera, const RenderConfig& config) {
  return soft_rasterize(vertices, faces, camera, config,
                        geom::Box2D{0, 0, static_cast<double>(camera.width),
                                    static_cast<double>(camera.height)});
}

HardRender hard_rasterize(const std::vector<geom::Mesh>& meshes, const geom::Camera& camera,
                          int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("hard_rasterize: bad resolution");
  HardRender hr;
  hr.instance_map = Eigen::MatrixXi::Zero(height, width);
  hr.depth_map = Eigen::MatrixXd::Constant(height, width,
                                           std::numeric_limits<double>::infinity());

  for (size_t o = 0; o < meshes.size(); ++o) {
    const geom::Mesh& mesh = meshes[o];
    const Eigen::MatrixXd& V = mesh.vertices;
    Eigen::MatrixXd px(V.rows(), 2);
    std::vector<char> ok(static_cast<size_t>(V.rows()), 0);
    for (Eigen::Index i = 0; i < V.rows(); ++i) {
      if (V(i, 2) > kNearClip) {
        ok[static_cast<size_t>(i)] = 1;
        px(i, 0) = camera.fx * V(i, 0) / V(i, 2) + camera.cx;
        px(i, 1) = camera.fy * V(i, 1) / V(i, 2) + camera.cy;
      }
    }
    for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f) {
      const int a = mesh.faces(f, 0), b = mesh.faces(f, 1), c = mesh.faces(f, 2);
      if (!ok[static_cast<size_t>(a)] || !ok[static_cast<size_t>(b)] ||
          !ok[static_cast<size_t>(c)])
        continue;
      const double ax = px(a, 0), ay = px(a, 1), bx = px(b, 0), by = px(b, 1),
                   cx2 = px(c, 0), cy2 = px(c, 1);
      const double area = cross2(bx - ax, by - ay, cx2 - ax, cy2 - ay);
      if (area == 0.0) continue;
      int c0 = std::max(0, static_cast<int>(std::floor(std::min({ax, bx, cx2}) - 0.5)));
      int c1 = std::min(width - 1, static_cast<int>(std::ceil(std::max({ax, bx, cx2}))));
      int r0 = std::max(0, static_cast<int>(std::floor(std::min({ay, by, cy2}) - 0.5)));
      int r1 = std::min(height - 1, static_cast<int>(std::ceil(std::max({ay, by, cy2}))));
      const double iza = 1.0 / V(a, 2), izb = 1.0 / V(b, 2), izc = 1.0 / V(c, 2);
      for (int r = r0; r <= r1; ++r) {
        const double qy = r + 0.5;
        for (int cc = c0; cc <= c1; ++cc) {
          const double qx = cc + 0.5;
          const double wa = cross2(bx - qx, by - qy, cx2 - qx, cy2 - qy);
          const double wb = cross2(cx2 - qx, cy2 - qy, ax - qx, ay - qy);
          const double wc = cross2(ax - qx, ay - qy, bx - qx, by - qy);
          const bool in_pos = wa >= 0 && wb >= 0 && wc >= 0;
          const bool in_neg = wa <= 0 && wb <= 0 && wc <= 0;
          if (!(area > 0 ? in_pos : in_neg)) continue;
          const double invz = (wa * iza + wb * izb + wc * izc) / area;
          if (invz <= 0) continue;
          const double z = 1.0 / invz;
          if (z < hr.depth_map(r, cc)) {
            hr.depth_map(r, cc) = z;
            hr.instance_map(r, cc) = static_cast<int>(o) + 1;
          }
        }
      }
    }
  }
  return hr;
}

geom::Box2D dynamic_region(const geom::Box2D& gt_mask_box, const geom::Mesh& mesh,
                           const geom::Camera& camera, double margin) {
  const geom::Box2D frame{0, 0, static_cast<double>(camera.width),
                          static_cast<double>(camera.height)};
  geom::Box2D verts_box{0, 0, -1, -1};  // invalid until a vertex lands
  bool any = false;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    const double z = mesh.vertices(i, 2);
    if (z <= 0) continue;
    const double px = camera.fx * mesh.vertices(i, 0) / z + camera.cx;
    const double py = camera.fy * mesh.vertices(i, 1) / z + camera.cy;
    if (!any) {
      x0 = x1 = px;
      y0 = y1 = py;
      any = true;
    } else {
      x0 = std::min(x0, px);
      x1 = std::max(x1, px);
      y0 = std::min(y0, py);
      y1 = std::max(y1, py);
    }
  }
  if (any) verts_box = geom::Box2D{x0, y0, x1, y1};

  geom::Box2D region;
  if (gt_mask_box.valid() && verts_box.valid())
    region = geom::box_union(gt_mask_box, verts_box);
  else if (gt_mask_box.valid())
    region = gt_mask_box;
  else if (verts_box.valid())
    region = verts_box;
  else
    return frame;

  region = region.expanded(margin).clipped(frame.x1, frame.y1);
  if (!region.valid()) return frame;
  return region;
}

double sample_bilinear(const Eigen::MatrixXd& field, double px, double py) {
  const Eigen::Index H = field.rows(), W = field.cols();
  const double u = std::clamp(px - 0.5, 0.0, static_cast<double>(W - 1));
  const double v = std::clamp(py - 0.5, 0.0, static_cast<double>(H - 1));
  const Eigen::Index x0 = std::min(static_cast<Eigen::Index>(u), W - 1);
  const Eigen::Index y0 = std::min(static_cast<Eigen::Index>(v), H - 1);
  const Eigen::Index x1 = std::min(x0 + 1, W - 1);
  const Eigen::Index y1 = std::min(y0 + 1, H - 1);
  const double fx = u - static_cast<double>(x0), fy = v - static_cast<double>(y0);
  return field(y0, x0) * (1 - fx) * (1 - fy) + field(y0, x1) * fx * (1 - fy) +
         field(y1, x0) * (1 - fx) * fy + field(y1, x1) * fx * fy;
}

Eigen::MatrixXd resample_region(const Eigen::MatrixXd& image, const geom::Box2D& region,
                                int height, int width) {
  if (height < 1 || width < 1)
    throw std::invalid_argument("resample_region: output size must be >= 1");
  if (!region.valid()) throw std::invalid_argument("resample_region: invalid region");
  const double sx = region.width() / width, sy = region.height() / height;
  Eigen::MatrixXd out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      out(r, c) = sample_bilinear(image, region.x0 + (c + 0.5) * sx,
                                  region.y0 + (r + 0.5) * sy);
  return out;
}

Eigen::MatrixXi instance_mask(const HardRender& hr, int object_id) {
  return (hr.instance_map.array() == object_id).cast<int>();
}

}  // namespace usl::render
