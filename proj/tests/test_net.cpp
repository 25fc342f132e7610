#include "usl/net.hpp"

#include "usl/errors.hpp"
#include "usl/loss.hpp"
#include "usl/render.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

using usl::diff::Array;
using usl::diff::Tape;
using usl::diff::Var;
namespace geom = usl::geom;
namespace net = usl::net;

namespace {

geom::Camera basic_camera(int res) {
  geom::Camera cam;
  cam.fx = cam.fy = 1.4 * res;
  cam.cx = cam.cy = res / 2.0;
  cam.width = cam.height = res;
  return cam;
}

Array random_array(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                   double lo = -1.0, double hi = 1.0) {
  Array m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = lo + (hi - lo) * geom::uniform01(rng);
  return m;
}

// a small asymmetric tetrahedron in normalized space
geom::Mesh tetra_mesh() {
  geom::Mesh m;
  m.vertices.resize(4, 3);
  m.vertices << -0.42, -0.35, -0.3,  //
      0.5, -0.28, 0.1,               //
      0.05, 0.45, -0.15,             //
      -0.1, 0.02, 0.48;
  m.faces.resize(4, 3);
  m.faces << 0, 2, 1, 0, 1, 3, 0, 3, 2, 1, 2, 3;
  m.space = geom::SpaceTag::normalized;
  return m;
}

net::FeatureMap linear_field_map(Tape& tape, int height, int width, double a, double b,
                                 double c, double stride) {
  Array values(static_cast<Eigen::Index>(height) * width, 1);
  for (int r = 0; r < height; ++r)
    for (int col = 0; col < width; ++col)
      values(static_cast<Eigen::Index>(r) * width + col, 0) =
          a + b * (col + 0.5) + c * (r + 0.5);
  return {tape.constant(values), width, height, stride};
}

}  // namespace

TEST_SUITE("net") {
  TEST_CASE("bilinear sampling hits cell centers, midpoints, and borders") {
    Tape tape;
    Array f(6, 2);  // 2 x 3 grid
    for (Eigen::Index i = 0; i < 6; ++i) {
      f(i, 0) = 10.0 * i;
      f(i, 1) = 3.0 - i;
    }
    Var features = tape.input(f);

    Array pts(4, 2);
    pts << 1.5, 0.5,  // center of cell (r=0, c=1)
        1.0, 0.5,     // midway between cells (0,0) and (0,1)
        -5.0, 0.5,    // clamps to cell (0,0)
        100.0, 99.0;  // clamps to cell (1,2)
    Var out = net::bilinear_sample(features, 2, 3, tape.constant(pts));

    CHECK(out.value().row(0) == f.row(1));
    CHECK(out.value()(1, 0) == doctest::Approx(0.5 * (f(0, 0) + f(1, 0))));
    CHECK(out.value()(1, 1) == doctest::Approx(0.5 * (f(0, 1) + f(1, 1))));
    CHECK(out.value().row(2) == f.row(0));
    CHECK(out.value().row(3) == f.row(5));
  }

  TEST_CASE("bilinear sampling rejects bad shapes") {
    Tape tape;
    Var features = tape.input(Array::Zero(6, 2));
    CHECK_THROWS_AS(net::bilinear_sample(features, 2, 2, tape.constant(Array::Zero(1, 2))),
                    std::invalid_argument);
    CHECK_THROWS_AS(net::bilinear_sample(features, 2, 3, tape.constant(Array::Zero(1, 3))),
                    std::invalid_argument);
  }

  TEST_CASE("bilinear sampling gradients match finite differences") {
    std::mt19937_64 rng(71);
    const Array f0 = random_array(6, 2, rng);
    Array pts(3, 2);
    pts << 1.3, 0.8,  //
        2.1, 1.2,     //
        -3.0, 0.9;    // x clamps; its coordinate gradient must stay zero

    SUBCASE("with respect to the features") {
      auto fn = [&](const Eigen::VectorXd& x) {
        Tape tape;
        Array f = f0;
        for (Eigen::Index i = 0; i < x.size(); ++i) f(i / 2, i % 2) = x(i);
        Var features = tape.input(f);
        Var out = net::bilinear_sample(features, 2, 3, tape.constant(pts));
        Var value = tape.squared_norm(out);
        auto grads = tape.backward(value);
        const Array& g = grads.grad(features);
        Eigen::VectorXd gv(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) gv(i) = g(i / 2, i % 2);
        return std::make_pair(value.scalar(), gv);
      };
      Eigen::VectorXd x0(12);
      for (Eigen::Index i = 0; i < 12; ++i) x0(i) = f0(i / 2, i % 2);
      const auto rep = usl::diff::gradcheck(fn, x0);
      CHECK_MESSAGE(rep.passed, "worst coord ", rep.worst_coord, ": analytic ",
                    rep.worst_analytic, " vs numeric ", rep.worst_numeric);
    }

    SUBCASE("with respect to the coordinates") {
      auto fn = [&](const Eigen::VectorXd& x) {
        Tape tape;
        Array p = pts;
        for (Eigen::Index i = 0; i < x.size(); ++i) p(i / 2, i % 2) = x(i);
        Var coords = tape.input(p);
        Var out = net::bilinear_sample(tape.constant(f0), 2, 3, coords);
        Var value = tape.squared_norm(out);
        auto grads = tape.backward(value);
        const Array& g = grads.grad(coords);
        Eigen::VectorXd gv(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) gv(i) = g(i / 2, i % 2);
        return std::make_pair(value.scalar(), gv);
      };
      Eigen::VectorXd x0(6);
      for (Eigen::Index i = 0; i < 6; ++i) x0(i) = pts(i / 2, i % 2);
      const auto rep = usl::diff::gradcheck(fn, x0);
      CHECK_MESSAGE(rep.passed, "worst coord ", rep.worst_coord, ": analytic ",
                    rep.worst_analytic, " vs numeric ", rep.worst_numeric);
    }
  }

  TEST_CASE("roimap samples a constant map to the constant") {
    Tape tape;
    Array values(64, 2);
    values.col(0).setConstant(3.25);
    values.col(1).setConstant(-1.5);
    net::FeatureMap fm{tape.constant(values), 8, 8, 4.0};
    const geom::Camera cam = basic_camera(32);
    const geom::Frustum frustum{{4.0, 6.0, 20.0, 14.0}, 1.7, 0.4};

    Var vertices = tape.input(tetra_mesh().vertices);
    net::VertexSamples s = net::roimap(tape, fm, cam, frustum, vertices);
    net::VertexSamples roi = net::roialign_vertalign(tape, fm, cam, frustum, vertices);
    CHECK(s.features.rows() == 4);
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(s.features.value()(i, 0) == doctest::Approx(3.25));
      CHECK(s.features.value()(i, 1) == doctest::Approx(-1.5));
      CHECK(roi.features.value()(i, 0) == doctest::Approx(3.25));
      CHECK(roi.features.value()(i, 1) == doctest::Approx(-1.5));
    }

    // a flat map gives the vertices nothing to pull on
    Var total = tape.sum(s.features);
    auto grads = tape.backward(total);
    CHECK(grads.grad(vertices).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  }

  TEST_CASE("roimap lands on the projected pixel over the stride") {
    Tape tape;
    const geom::Camera cam = basic_camera(32);
    // box centered at pixel (6, 10): the normalized origin projects there,
    // cell coordinates (1.5, 2.5), the center of cell (r=2, c=1)
    const geom::Frustum frustum{{3.0, 6.0, 9.0, 14.0}, 1.7, 0.4};
    std::mt19937_64 rng(5);
    Array values = random_array(64, 3, rng);
    net::FeatureMap fm{tape.constant(values), 8, 8, 4.0};

    Array v(1, 3);
    v << 0.0, 0.0, 0.0;
    net::VertexSamples s = net::roimap(tape, fm, cam, frustum, tape.input(v));

    CHECK(s.coords.value()(0, 0) == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(s.coords.value()(0, 1) == doctest::Approx(2.5).epsilon(1e-12));
    for (Eigen::Index ch = 0; ch < 3; ++ch)
      CHECK(s.features.value()(0, ch) == doctest::Approx(values(2 * 8 + 1, ch)).epsilon(1e-12));

    // oracle: the plain (non-tape) warp/projection pipeline
    const Array warped = geom::frustum_apply(v, frustum, cam);
    const auto [pix, depth] = geom::project(cam, warped);
    CHECK(s.coords.value()(0, 0) == doctest::Approx(pix(0, 0) / fm.stride).epsilon(1e-12));
    CHECK(s.coords.value()(0, 1) == doctest::Approx(pix(0, 1) / fm.stride).epsilon(1e-12));
  }

  TEST_CASE("roimap gradients reach the vertices") {
    const geom::Camera cam = basic_camera(32);
    const geom::Frustum frustum{{4.0, 6.0, 20.0, 14.0}, 1.7, 0.4};
    std::mt19937_64 rng(17);
    const Array fmap = random_array(64, 2, rng);
    const Array v0 = tetra_mesh().vertices;

    auto fn = [&](const Eigen::VectorXd& x) {
      Tape tape;
      Array v = v0;
      for (Eigen::Index i = 0; i < x.size(); ++i) v(i / 3, i % 3) = x(i);
      Var vertices = tape.input(v);
      net::FeatureMap fm{tape.constant(fmap), 8, 8, 4.0};
      net::VertexSamples s = net::roimap(tape, fm, cam, frustum, vertices);
      Var value = tape.squared_norm(s.features);
      auto grads = tape.backward(value);
      const Array& g = grads.grad(vertices);
      Eigen::VectorXd gv(x.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) gv(i) = g(i / 3, i % 3);
      return std::make_pair(value.scalar(), gv);
    };
    Eigen::VectorXd x0(12);
    for (Eigen::Index i = 0; i < 12; ++i) x0(i) = v0(i / 3, i % 3);
    const auto rep = usl::diff::gradcheck(fn, x0);
    CHECK_MESSAGE(rep.passed, "worst coord ", rep.worst_coord, ": analytic ",
                  rep.worst_analytic, " vs numeric ", rep.worst_numeric);
  }

  TEST_CASE("both sampling paths agree on a linear feature field") {
    Tape tape;
    const geom::Camera cam = basic_camera(32);
    const geom::Frustum frustum{{6.0, 6.0, 18.0, 18.0}, 1.7, 0.4};  // square box
    const double a = 0.7, b = -0.35, c = 0.2, stride = 4.0;
    net::FeatureMap fm = linear_field_map(tape, 8, 8, a, b, c, stride);

    Array v = tetra_mesh().vertices * 0.5;  // keep projections inside the box
    Var vertices = tape.input(v);
    net::VertexSamples direct = net::roimap(tape, fm, cam, frustum, vertices);
    net::VertexSamples roi = net::roialign_vertalign(tape, fm, cam, frustum, vertices);

    const Array warped = geom::frustum_apply(v, frustum, cam);
    const auto [pix, depth] = geom::project(cam, warped);
    for (Eigen::Index i = 0; i < 4; ++i) {
      const double expected = a + b * pix(i, 0) / stride + c * pix(i, 1) / stride;
      CHECK(direct.features.value()(i, 0) == doctest::Approx(expected).epsilon(1e-9));
      CHECK(roi.features.value()(i, 0) == doctest::Approx(expected).epsilon(1e-9));
    }
  }

  TEST_CASE("roi-path coordinates follow the box aspect while the direct path is isotropic") {
    Tape tape;
    const geom::Camera cam = basic_camera(32);
    // 2:1 aspect box: 16 pixels wide, 8 tall
    const geom::Frustum frustum{{4.0, 8.0, 20.0, 16.0}, 1.7, 0.4};
    std::mt19937_64 rng(23);
    net::FeatureMap fm{tape.constant(random_array(64, 2, rng)), 8, 8, 4.0};

    Array v(3, 3);
    v << 0.0, 0.0, 0.0,  //
        0.3, 0.0, 0.0,   // displaced along image x
        0.0, 0.3, 0.0;   // displaced along image y
    Var vertices = tape.input(v);
    net::VertexSamples direct = net::roimap(tape, fm, cam, frustum, vertices);
    net::VertexSamples roi = net::roialign_vertalign(tape, fm, cam, frustum, vertices);

    const Array warped = geom::frustum_apply(v, frustum, cam);
    const auto [pix, depth] = geom::project(cam, warped);
    const double dpx = pix(1, 0) - pix(0, 0);  // image-pixel displacements
    const double dpy = pix(2, 1) - pix(0, 1);

    // direct path: one scale for both axes (1 / stride)
    const double direct_sx = (direct.coords.value()(1, 0) - direct.coords.value()(0, 0)) / dpx;
    const double direct_sy = (direct.coords.value()(2, 1) - direct.coords.value()(0, 1)) / dpy;
    CHECK(direct_sx == doctest::Approx(direct_sy).epsilon(1e-9));
    CHECK(direct_sx == doctest::Approx(1.0 / fm.stride).epsilon(1e-9));

    // roi path: per-axis scales differ by exactly the aspect factor
    const double roi_sx = (roi.coords.value()(1, 0) - roi.coords.value()(0, 0)) / dpx;
    const double roi_sy = (roi.coords.value()(2, 1) - roi.coords.value()(0, 1)) / dpy;
    CHECK(roi_sy / roi_sx == doctest::Approx(2.0).epsilon(1e-9));
  }

  TEST_CASE("neighbor sums follow the edge list") {
    Tape tape;
    Array f(3, 2);
    f << 1.0, 2.0, 10.0, 20.0, 100.0, 200.0;
    Var features = tape.input(f);

    Eigen::MatrixXi edges(2, 2);  // path graph 0 - 1 - 2
    edges << 0, 1, 1, 2;
    Var out = net::neighbor_sum(tape, features, edges);
    CHECK(out.value().row(0) == f.row(1));
    CHECK(out.value()(1, 0) == doctest::Approx(101.0));
    CHECK(out.value()(1, 1) == doctest::Approx(202.0));
    CHECK(out.value().row(2) == f.row(1));

    Var empty = net::neighbor_sum(tape, features, Eigen::MatrixXi(0, 2));
    CHECK(empty.value().cwiseAbs().maxCoeff() == doctest::Approx(0.0));

    Eigen::MatrixXi bad(1, 2);
    bad << 0, 3;
    CHECK_THROWS_AS(net::neighbor_sum(tape, features, bad), std::invalid_argument);
  }

  TEST_CASE("graph convolution matches the dense oracle") {
    std::mt19937_64 rng(31);
    const int n = 5, cin = 3, cout = 2;
    Eigen::MatrixXi edges(6, 2);
    edges << 0, 1, 1, 2, 2, 3, 3, 4, 0, 4, 1, 3;

    Tape tape;
    Var features = tape.input(random_array(n, cin, rng));
    Var w0 = tape.input(random_array(cin, cout, rng));
    Var w1 = tape.input(random_array(cin, cout, rng));
    Var out = net::graph_conv(tape, features, edges, w0, w1);

    Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index e = 0; e < edges.rows(); ++e) {
      adj(edges(e, 0), edges(e, 1)) = 1.0;
      adj(edges(e, 1), edges(e, 0)) = 1.0;
    }
    const Eigen::MatrixXd expected =
        (features.value() * w0.value() + adj * features.value() * w1.value()).cwiseMax(0.0);
    CHECK((out.value() - expected).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("graph convolution degenerate weights") {
    Tape tape;
    Array f(3, 2);
    f << 0.5, 1.0, 2.0, 0.25, 1.5, 3.0;  // nonnegative
    Var features = tape.input(f);
    Eigen::MatrixXi edges(2, 2);
    edges << 0, 1, 1, 2;

    Var zeros = net::graph_conv(tape, features, edges, tape.input(Array::Zero(2, 2)),
                                tape.input(Array::Zero(2, 2)));
    CHECK(zeros.value().cwiseAbs().maxCoeff() == doctest::Approx(0.0));

    Var identity = net::graph_conv(tape, features, edges,
                                   tape.input(Array::Identity(2, 2)),
                                   tape.input(Array::Zero(2, 2)));
    CHECK((identity.value() - f).cwiseAbs().maxCoeff() == doctest::Approx(0.0));

    CHECK_THROWS_AS(net::graph_conv(tape, features, edges, tape.input(Array::Zero(2, 2)),
                                    tape.input(Array::Zero(2, 3))),
                    std::invalid_argument);
    CHECK_THROWS_AS(net::graph_conv(tape, features, edges, tape.input(Array::Zero(3, 2)),
                                    tape.input(Array::Zero(3, 2))),
                    std::invalid_argument);
  }

  TEST_CASE("graph convolution gradients match finite differences") {
    std::mt19937_64 rng(37);
    const int n = 4, cin = 2, cout = 2;
    Eigen::MatrixXi edges(3, 2);
    edges << 0, 1, 1, 2, 2, 3;
    // positive features and weights keep every preactivation away from the
    // relu kink
    const Array f0 = random_array(n, cin, rng, 0.5, 1.0);
    const Array a0 = random_array(cin, cout, rng, 0.1, 0.3);
    const Array a1 = random_array(cin, cout, rng, 0.1, 0.3);

    auto fn = [&](const Eigen::VectorXd& x) {
      Tape tape;
      Array f = f0, w0v = a0, w1v = a1;
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < f.size(); ++i, ++k) f(i / cin, i % cin) = x(k);
      for (Eigen::Index i = 0; i < w0v.size(); ++i, ++k) w0v(i / cout, i % cout) = x(k);
      for (Eigen::Index i = 0; i < w1v.size(); ++i, ++k) w1v(i / cout, i % cout) = x(k);
      Var features = tape.input(f);
      Var w0 = tape.input(w0v);
      Var w1 = tape.input(w1v);
      Var value = tape.squared_norm(net::graph_conv(tape, features, edges, w0, w1));
      auto grads = tape.backward(value);
      Eigen::VectorXd gv(x.size());
      k = 0;
      const Array& gf = grads.grad(features);
      const Array& g0 = grads.grad(w0);
      const Array& g1 = grads.grad(w1);
      for (Eigen::Index i = 0; i < gf.size(); ++i, ++k) gv(k) = gf(i / cin, i % cin);
      for (Eigen::Index i = 0; i < g0.size(); ++i, ++k) gv(k) = g0(i / cout, i % cout);
      for (Eigen::Index i = 0; i < g1.size(); ++i, ++k) gv(k) = g1(i / cout, i % cout);
      return std::make_pair(value.scalar(), gv);
    };
    Eigen::VectorXd x0(n * cin + 2 * cin * cout);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < f0.size(); ++i, ++k) x0(k) = f0(i / cin, i % cin);
    for (Eigen::Index i = 0; i < a0.size(); ++i, ++k) x0(k) = a0(i / cout, i % cout);
    for (Eigen::Index i = 0; i < a1.size(); ++i, ++k) x0(k) = a1(i / cout, i % cout);
    const auto rep = usl::diff::gradcheck(fn, x0);
    CHECK_MESSAGE(rep.passed, "worst coord ", rep.worst_coord, ": analytic ",
                  rep.worst_analytic, " vs numeric ", rep.worst_numeric);
  }

  TEST_CASE("refinement stage with zero output weights keeps the vertices") {
    Tape tape;
    std::mt19937_64 rng(41);
    const geom::Camera cam = basic_camera(32);
    const geom::Frustum frustum{{4.0, 6.0, 20.0, 14.0}, 1.7, 0.4};
    net::FeatureMap fm{tape.constant(random_array(64, 4, rng)), 8, 8, 4.0};
    const geom::Mesh mesh = tetra_mesh();
    const Eigen::MatrixXi edges = geom::mesh_edges(mesh.faces);

    const int hidden = 6;
    net::RefineStageWeights w;
    w.convs[0] = {tape.input(random_array(4 + 3, hidden, rng)),
                  tape.input(random_array(4 + 3, hidden, rng))};
    for (int k = 1; k < 3; ++k)
      w.convs[static_cast<size_t>(k)] = {tape.input(random_array(hidden + 3, hidden, rng)),
                                         tape.input(random_array(hidden + 3, hidden, rng))};
    w.w_out = tape.input(Array::Zero(hidden + 3, 3));
    w.b_out = tape.input(Array::Zero(1, 3));

    net::RefinementState state{tape.input(mesh.vertices), Var{}, 0};
    net::RefinementState next = net::refine_stage(tape, state, fm, cam, frustum, edges, w);
    CHECK(next.stage == 1);
    CHECK((next.vertices.value() - mesh.vertices).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
    CHECK(next.features.cols() == hidden);
  }

  TEST_CASE("refinement stages stay inside the normalized cube") {
    Tape tape;
    std::mt19937_64 rng(43);
    const geom::Camera cam = basic_camera(32);
    const geom::Frustum frustum{{4.0, 6.0, 20.0, 14.0}, 1.7, 0.4};
    net::FeatureMap fm{tape.constant(random_array(64, 4, rng, 0.0, 5.0)), 8, 8, 4.0};
    const geom::Mesh mesh = tetra_mesh();
    const Eigen::MatrixXi edges = geom::mesh_edges(mesh.faces);

    const int hidden = 6;
    net::RefineStageWeights w;
    w.convs[0] = {tape.input(random_array(4 + 3, hidden, rng, -3.0, 3.0)),
                  tape.input(random_array(4 + 3, hidden, rng, -3.0, 3.0))};
    for (int k = 1; k < 3; ++k)
      w.convs[static_cast<size_t>(k)] = {
          tape.input(random_array(hidden + 3, hidden, rng, -3.0, 3.0)),
          tape.input(random_array(hidden + 3, hidden, rng, -3.0, 3.0))};
    w.w_out = tape.input(random_array(hidden + 3, 3, rng, -5.0, 5.0));
    w.b_out = tape.input(random_array(1, 3, rng, -5.0, 5.0));

    net::RefinementState state{tape.input(mesh.vertices), Var{}, 0};
    for (int s = 0; s < 3; ++s) {
      state = net::refine_stage(tape, state, fm, cam, frustum, edges, w);
      CHECK(state.vertices.value().cwiseAbs().maxCoeff() <= 1.0);
    }
    CHECK(state.stage == 3);
  }

  TEST_CASE("refinement stage is equivariant to vertex relabeling") {
    std::mt19937_64 rng(47);
    const geom::Camera cam = basic_camera(32);
    const geom::Frustum frustum{{4.0, 6.0, 20.0, 14.0}, 1.7, 0.4};
    const Array fmap = random_array(64, 4, rng);
    const geom::Mesh mesh = tetra_mesh();
    const Eigen::MatrixXi edges = geom::mesh_edges(mesh.faces);
    const int hidden = 6;

    const Array c0a = random_array(4 + 3, hidden, rng), c0b = random_array(4 + 3, hidden, rng);
    const Array c1a = random_array(hidden + 3, hidden, rng),
                c1b = random_array(hidden + 3, hidden, rng);
    const Array c2a = random_array(hidden + 3, hidden, rng),
                c2b = random_array(hidden + 3, hidden, rng);
    const Array wo = random_array(hidden + 3, 3, rng), bo = random_array(1, 3, rng);

    auto run = [&](const Array& verts, const Eigen::MatrixXi& e) {
      Tape tape;
      net::FeatureMap fm{tape.constant(fmap), 8, 8, 4.0};
      net::RefineStageWeights w;
      w.convs[0] = {tape.input(c0a), tape.input(c0b)};
      w.convs[1] = {tape.input(c1a), tape.input(c1b)};
      w.convs[2] = {tape.input(c2a), tape.input(c2b)};
      w.w_out = tape.input(wo);
      w.b_out = tape.input(bo);
      net::RefinementState state{tape.input(verts), Var{}, 0};
      return net::refine_stage(tape, state, fm, cam, frustum, e, w).vertices.value();
    };

    const std::array<int, 4> perm = {2, 0, 3, 1};  // row k of the permuted mesh
    Array pverts(4, 3);
    std::array<int, 4> inv{};
    for (int k = 0; k < 4; ++k) {
      pverts.row(k) = mesh.vertices.row(perm[static_cast<size_t>(k)]);
      inv[static_cast<size_t>(perm[static_cast<size_t>(k)])] = k;
    }
    Eigen::MatrixXi pedges = edges;
    for (Eigen::Index e = 0; e < edges.rows(); ++e) {
      pedges(e, 0) = inv[static_cast<size_t>(edges(e, 0))];
      pedges(e, 1) = inv[static_cast<size_t>(edges(e, 1))];
    }

    const Array base = run(mesh.vertices, edges);
    const Array permuted = run(pverts, pedges);
    for (int k = 0; k < 4; ++k)
      CHECK((permuted.row(k) - base.row(perm[static_cast<size_t>(k)])).cwiseAbs().maxCoeff() <
            1e-12);
  }

  TEST_CASE("layout head decodes the midpoint from zero weights") {
    Tape tape;
    const int cin = 5, hidden = 8, k = 3;
    net::LayoutHeadWeights w;
    w.w[0] = tape.input(Array::Zero(cin, hidden));
    for (int i = 1; i < 4; ++i) w.w[static_cast<size_t>(i)] = tape.input(Array::Zero(hidden, hidden));
    for (int i = 0; i < 4; ++i) w.b[static_cast<size_t>(i)] = tape.input(Array::Zero(1, hidden));
    w.w_rho = tape.input(Array::Zero(hidden, k));
    w.b_rho = tape.input(Array::Zero(1, k));
    w.w_z = tape.input(Array::Zero(hidden, k));
    w.b_z = tape.input(Array::Zero(1, k));

    std::mt19937_64 rng(53);
    Var pooled = tape.input(random_array(1, cin, rng));
    const geom::LayoutBounds bounds;
    net::LayoutPrediction pred = net::layout_head_forward(tape, pooled, w, bounds);
    for (int i = 0; i < k; ++i) {
      CHECK(pred.rho_t.value()(0, i) == doctest::Approx(0.5));
      CHECK(pred.z_t.value()(0, i) == doctest::Approx(0.5));
      CHECK(pred.z.value()(0, i) == doctest::Approx(2.0).epsilon(1e-12));
      CHECK(pred.rho.value()(0, i) == doctest::Approx(0.775).epsilon(1e-12));
    }
  }

  TEST_CASE("layout head outputs stay inside the bounds") {
    Tape tape;
    std::mt19937_64 rng(59);
    const int cin = 5, hidden = 8, k = 2;
    net::LayoutHeadWeights w;
    w.w[0] = tape.input(random_array(cin, hidden, rng, -0.4, 0.4));
    for (int i = 1; i < 4; ++i)
      w.w[static_cast<size_t>(i)] = tape.input(random_array(hidden, hidden, rng, -0.4, 0.4));
    for (int i = 0; i < 4; ++i)
      w.b[static_cast<size_t>(i)] = tape.input(random_array(1, hidden, rng, -0.4, 0.4));
    w.w_rho = tape.input(random_array(hidden, k, rng, -0.4, 0.4));
    w.b_rho = tape.input(random_array(1, k, rng, -0.4, 0.4));
    w.w_z = tape.input(random_array(hidden, k, rng, -0.4, 0.4));
    w.b_z = tape.input(random_array(1, k, rng, -0.4, 0.4));

    const geom::LayoutBounds bounds;
    for (int trial = 0; trial < 4; ++trial) {
      Var pooled = tape.input(random_array(1, cin, rng, -1.0, 1.0));
      net::LayoutPrediction pred = net::layout_head_forward(tape, pooled, w, bounds);
      for (int i = 0; i < k; ++i) {
        CHECK(pred.z.value()(0, i) > bounds.z0);
        CHECK(pred.z.value()(0, i) < bounds.z1);
        CHECK(pred.rho.value()(0, i) > bounds.rho0);
        CHECK(pred.rho.value()(0, i) < bounds.rho1);
      }
    }
  }

  TEST_CASE("layout gradients reach the weights through the render loss") {
    const int res = 24;
    const geom::Camera cam = basic_camera(res);
    const geom::Box2D box{6.0, 6.0, 18.0, 18.0};
    const geom::Mesh mesh = tetra_mesh();
    const geom::LayoutBounds bounds;
    // render from a second, translated view: in the frustum's own camera the
    // warp is exactly depth-blind, so z and rho gradients would vanish there
    geom::RigidTransform offset;
    offset.R = Eigen::AngleAxisd(0.3, Eigen::Vector3d::UnitY()).toRotationMatrix();
    offset.t = Eigen::Vector3d(-0.5, 0.0, 0.3);

    usl::render::RenderConfig cfg;
    cfg.height = cfg.width = res;
    cfg.faces_per_pixel = 8;  // above the face count: no top-K truncation
    cfg.blur_radius = 4e-3;
    cfg.blend_sigma = 2e-4;

    // fixed-function features of a bright centered square
    Eigen::MatrixXd image = Eigen::MatrixXd::Zero(res, res);
    image.block(8, 8, 8, 8).setConstant(1.0);

    const int cin = 5, hidden = 6;
    Array w0(cin, hidden), wrho(hidden, 1), wz(hidden, 1);
    for (Eigen::Index i = 0; i < w0.size(); ++i) w0(i / hidden, i % hidden) = 0.1 + 0.02 * (i % 7);
    for (Eigen::Index i = 0; i < hidden; ++i) {
      wrho(i, 0) = 0.12 + 0.03 * i;
      wz(i, 0) = 0.25 - 0.02 * i;
    }

    // gt target: the hard version of the forward render at the base weights
    Eigen::MatrixXd gt;
    auto forward = [&](const Array& w0v, const Array& wrhov, const Array& wzv, Tape& tape,
                       Var& w0_var, Var& wrho_var, Var& wz_var) {
      net::FeatureMap fm = net::fixed_backbone(tape, image, 4);
      Var pooled = net::average_pool(tape, fm);
      net::LayoutHeadWeights w;
      w0_var = tape.input(w0v);
      w.w[0] = w0_var;
      for (int i = 1; i < 4; ++i)
        w.w[static_cast<size_t>(i)] = tape.constant(Array::Identity(hidden, hidden));
      for (int i = 0; i < 4; ++i)
        w.b[static_cast<size_t>(i)] = tape.constant(Array::Constant(1, hidden, 0.05));
      wrho_var = tape.input(wrhov);
      wz_var = tape.input(wzv);
      w.w_rho = wrho_var;
      w.b_rho = tape.constant(Array::Zero(1, 1));
      w.w_z = wz_var;
      w.b_z = tape.constant(Array::Zero(1, 1));
      net::LayoutPrediction pred = net::layout_head_forward(tape, pooled, w, bounds);
      Var warped = geom::frustum_apply(tape.input(mesh.vertices), pred.z, pred.rho, box, cam);
      Var shifted = geom::transform_points(offset, warped);
      return usl::render::soft_rasterize(shifted, mesh.faces, cam, cfg);
    };
    {
      Tape tape;
      Var a, b, c;
      usl::render::SoftSilhouette sil = forward(w0, wrho, wz, tape, a, b, c);
      gt = (sil.values.value().array() > 0.5).cast<double>();
    }

    auto fn = [&](const Eigen::VectorXd& x) {
      Array w0v = w0, wrhov = wrho, wzv = wz;
      Eigen::Index k = 0;
      for (Eigen::Index i = 0; i < w0v.size(); ++i, ++k) w0v(i / hidden, i % hidden) = x(k);
      for (Eigen::Index i = 0; i < hidden; ++i, ++k) wrhov(i, 0) = x(k);
      for (Eigen::Index i = 0; i < hidden; ++i, ++k) wzv(i, 0) = x(k);
      Tape tape;
      Var w0_var, wrho_var, wz_var;
      usl::render::SoftSilhouette sil = forward(w0v, wrhov, wzv, tape, w0_var, wrho_var, wz_var);
      Var value = usl::loss::xent_silhouette(tape, sil, gt);
      auto grads = tape.backward(value);
      Eigen::VectorXd gv(x.size());
      k = 0;
      const Array& g0 = grads.grad(w0_var);
      for (Eigen::Index i = 0; i < g0.size(); ++i, ++k) gv(k) = g0(i / hidden, i % hidden);
      const Array& gr = grads.grad(wrho_var);
      for (Eigen::Index i = 0; i < hidden; ++i, ++k) gv(k) = gr(i, 0);
      const Array& gz = grads.grad(wz_var);
      for (Eigen::Index i = 0; i < hidden; ++i, ++k) gv(k) = gz(i, 0);
      return std::make_pair(value.scalar(), gv);
    };

    Eigen::VectorXd x0(w0.size() + 2 * hidden);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < w0.size(); ++i, ++k) x0(k) = w0(i / hidden, i % hidden);
    for (Eigen::Index i = 0; i < hidden; ++i, ++k) x0(k) = wrho(i, 0);
    for (Eigen::Index i = 0; i < hidden; ++i, ++k) x0(k) = wz(i, 0);

    const auto rep = usl::diff::gradcheck(fn, x0);
    CHECK_MESSAGE(rep.passed, "worst coord ", rep.worst_coord, ": analytic ",
                  rep.worst_analytic, " vs numeric ", rep.worst_numeric);

    // and the gradient is genuinely nonzero
    const auto [value, grad] = fn(x0);
    CHECK(grad.cwiseAbs().maxCoeff() > 1e-8);
  }

  TEST_CASE("average pooling is the mean feature row") {
    Tape tape;
    Array values(4, 3);
    values << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
    net::FeatureMap fm{tape.input(values), 2, 2, 1.0};
    Var pooled = net::average_pool(tape, fm);
    CHECK(pooled.rows() == 1);
    for (Eigen::Index c = 0; c < 3; ++c)
      CHECK(pooled.value()(0, c) == doctest::Approx(values.col(c).mean()));
  }

  TEST_CASE("fixed backbone pools blocks and differentiates them") {
    Tape tape;
    Eigen::MatrixXd image(4, 4);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) image(r, c) = r * 4 + c;

    net::FeatureMap fm = net::fixed_backbone(tape, image, 2);
    CHECK(fm.width == 2);
    CHECK(fm.height == 2);
    CHECK(fm.stride == 2.0);
    CHECK(fm.channels() == 5);

    // pooled intensities: means of the four 2x2 blocks
    Array expected(4, 5);
    expected << 2.5, 1.0, 4.0, 0.25, 0.25,  //
        4.5, 1.0, 4.0, 0.75, 0.25,          //
        10.5, 1.0, 4.0, 0.25, 0.75,         //
        12.5, 1.0, 4.0, 0.75, 0.75;
    CHECK((fm.values.value() - expected).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(net::fixed_backbone(tape, image, 3), std::invalid_argument);
  }

  TEST_CASE("im2col gathers patches in scan order") {
    Tape tape;
    Array cells(9, 2);  // 3 x 3 grid, 2 channels
    for (Eigen::Index i = 0; i < 9; ++i) {
      cells(i, 0) = static_cast<double>(i);
      cells(i, 1) = 50.0 + i;
    }
    Var out = net::im2col(tape, tape.input(cells), 3, 3, 3, 1);
    REQUIRE(out.rows() == 1);
    REQUIRE(out.cols() == 18);
    for (Eigen::Index i = 0; i < 9; ++i) {
      CHECK(out.value()(0, 2 * i) == doctest::Approx(static_cast<double>(i)));
      CHECK(out.value()(0, 2 * i + 1) == doctest::Approx(50.0 + i));
    }

    // stride-1 4x4: the (0,1) patch starts one cell to the right
    Array grid(16, 1);
    for (Eigen::Index i = 0; i < 16; ++i) grid(i, 0) = static_cast<double>(i);
    Var out2 = net::im2col(tape, tape.input(grid), 4, 4, 3, 1);
    REQUIRE(out2.rows() == 4);
    CHECK(out2.value()(1, 0) == doctest::Approx(1.0));
    CHECK(out2.value()(1, 8) == doctest::Approx(11.0));
    CHECK(out2.value()(2, 0) == doctest::Approx(4.0));
  }

  TEST_CASE("conv backbone matches direct convolution") {
    std::mt19937_64 rng(61);
    const int res = 11, c1 = 2, c2 = 3;
    Eigen::MatrixXd image(res, res);
    for (int r = 0; r < res; ++r)
      for (int c = 0; c < res; ++c) image(r, c) = geom::uniform01(rng);

    Tape tape;
    net::ConvBackboneWeights w;
    const Array k1 = random_array(9, c1, rng), b1 = random_array(1, c1, rng);
    const Array k2 = random_array(9 * c1, c2, rng), b2 = random_array(1, c2, rng);
    w.k1 = tape.input(k1);
    w.b1 = tape.input(b1);
    w.k2 = tape.input(k2);
    w.b2 = tape.input(b2);
    net::FeatureMap fm = net::conv_backbone(tape, image, w);

    const int h1 = 5, h2 = 2;  // (11-3)/2+1, (5-3)/2+1
    CHECK(fm.height == h2);
    CHECK(fm.width == h2);
    CHECK(fm.stride == 4.0);

    // direct convolution oracle
    Eigen::MatrixXd layer1(h1 * h1, c1);
    for (int r = 0; r < h1; ++r)
      for (int c = 0; c < h1; ++c)
        for (int ch = 0; ch < c1; ++ch) {
          double acc = b1(0, ch);
          for (int dr = 0; dr < 3; ++dr)
            for (int dc = 0; dc < 3; ++dc)
              acc += image(2 * r + dr, 2 * c + dc) * k1(dr * 3 + dc, ch);
          layer1(r * h1 + c, ch) = std::max(acc, 0.0);
        }
    Eigen::MatrixXd layer2(h2 * h2, c2);
    for (int r = 0; r < h2; ++r)
      for (int c = 0; c < h2; ++c)
        for (int ch = 0; ch < c2; ++ch) {
          double acc = b2(0, ch);
          for (int dr = 0; dr < 3; ++dr)
            for (int dc = 0; dc < 3; ++dc)
              for (int ci = 0; ci < c1; ++ci)
                acc += layer1((2 * r + dr) * h1 + (2 * c + dc), ci) *
                       k2((dr * 3 + dc) * c1 + ci, ch);
          layer2(r * h2 + c, ch) = std::max(acc, 0.0);
        }
    CHECK((fm.values.value() - layer2).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("conv backbone gradients match finite differences") {
    std::mt19937_64 rng(67);
    const int res = 9, c1 = 2, c2 = 2;
    Eigen::MatrixXd image(res, res);
    for (int r = 0; r < res; ++r)
      for (int c = 0; c < res; ++c) image(r, c) = 0.2 + 0.8 * geom::uniform01(rng);
    // positive weights and biases keep the relus in their linear region
    const Array k1 = random_array(9, c1, rng, 0.05, 0.3), b1 = random_array(1, c1, rng, 0.1, 0.2);
    const Array k2 = random_array(9 * c1, c2, rng, 0.05, 0.3),
                b2 = random_array(1, c2, rng, 0.1, 0.2);

    auto fn = [&](const Eigen::VectorXd& x) {
      Array k1v = k1;
      for (Eigen::Index i = 0; i < k1v.size(); ++i) k1v(i / c1, i % c1) = x(i);
      Tape tape;
      net::ConvBackboneWeights w;
      w.k1 = tape.input(k1v);
      w.b1 = tape.input(b1);
      w.k2 = tape.input(k2);
      w.b2 = tape.input(b2);
      net::FeatureMap fm = net::conv_backbone(tape, image, w);
      Var value = tape.squared_norm(fm.values);
      auto grads = tape.backward(value);
      const Array& g = grads.grad(w.k1);
      Eigen::VectorXd gv(x.size());
      for (Eigen::Index i = 0; i < g.size(); ++i) gv(i) = g(i / c1, i % c1);
      return std::make_pair(value.scalar(), gv);
    };
    Eigen::VectorXd x0(9 * c1);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0(i) = k1(i / c1, i % c1);
    const auto rep = usl::diff::gradcheck(fn, x0);
    CHECK_MESSAGE(rep.passed, "worst coord ", rep.worst_coord, ": analytic ",
                  rep.worst_analytic, " vs numeric ", rep.worst_numeric);
  }

  TEST_CASE("weight checkpoints round-trip exactly") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "usl_test_weights.bin";
    std::mt19937_64 rng(73);
    std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays;
    arrays.emplace_back("stage0.conv1.w0", random_array(3, 2, rng));
    arrays.emplace_back("b", random_array(1, 1, rng));
    arrays.emplace_back("empty", Eigen::MatrixXd(0, 4));

    net::save_weights(path.string(), arrays);
    const auto loaded = net::load_weights(path.string());
    REQUIRE(loaded.size() == arrays.size());
    for (size_t i = 0; i < arrays.size(); ++i) {
      CHECK(loaded[i].first == arrays[i].first);
      REQUIRE(loaded[i].second.rows() == arrays[i].second.rows());
      REQUIRE(loaded[i].second.cols() == arrays[i].second.cols());
      CHECK((loaded[i].second.array() == arrays[i].second.array()).all());
    }
    fs::remove(path);
  }

  TEST_CASE("weight checkpoint failures throw io_error") {
    namespace fs = std::filesystem;
    CHECK_THROWS_AS(net::load_weights("/nonexistent/usl_weights.bin"), usl::io_error);

    const fs::path bad = fs::temp_directory_path() / "usl_test_bad_weights.bin";
    {
      std::ofstream out(bad, std::ios::binary);
      out << "JUNKJUNKJUNK";
    }
    CHECK_THROWS_AS(net::load_weights(bad.string()), usl::io_error);

    // valid header, then cut off mid-array
    std::mt19937_64 rng(79);
    net::save_weights(bad.string(), {{"w", random_array(4, 4, rng)}});
    fs::resize_file(bad, 20);
    CHECK_THROWS_AS(net::load_weights(bad.string()), usl::io_error);

    // wrong version
    {
      std::ofstream out(bad, std::ios::binary | std::ios::trunc);
      out << "USLW";
      const std::uint16_t version = 9;
      out.write(reinterpret_cast<const char*>(&version), 2);
      const std::uint32_t count = 0;
      out.write(reinterpret_cast<const char*>(&count), 4);
    }
    CHECK_THROWS_AS(net::load_weights(bad.string()), usl::io_error);
    fs::remove(bad);
  }
}
