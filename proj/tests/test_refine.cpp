#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "eqlf/refine.hpp"
#include "eqlf/train.hpp"
#include "oracles.hpp"

using namespace eqlf;

namespace {

Tensor rand_cloud(Rng& rng, int n) { return Tensor::uniform({n, 3}, rng, -1, 1); }

Tensor rotate_rows(const Tensor& t, const Eigen::Matrix3d& R,
                   const Eigen::Vector3d& shift = Eigen::Vector3d::Zero()) {
  const int n = t.dim(0);
  std::vector<double> out(static_cast<std::size_t>(n) * 3);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d p(t.at({i, 0}), t.at({i, 1}), t.at({i, 2}));
    Eigen::Vector3d q = R * p + shift;
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(i) * 3 + c] = q(c);
  }
  return Tensor({n, 3}, std::move(out));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

EquiShapeConfig tiny_config(std::uint64_t seed = 7) {
  EquiShapeConfig cfg;
  cfg.net.L = 1;
  cfg.net.d = 6;
  cfg.net.nu = 2;
  cfg.net.k = 4;
  cfg.net.seed = seed;
  cfg.d_t = 6;
  cfg.k_latent = 3;
  return cfg;
}

bool all_zero(const Tensor& t) {
  for (double v : t.values())
    if (v != 0.0) return false;
  return true;
}

}  // namespace

TEST_CASE("zero refinement steps reproduce the unrefined pipeline exactly") {
  Rng rng(1);
  EquiShapeParams params = make_equishape(tiny_config());
  const Tensor x = rand_cloud(rng, 14), y = rand_cloud(rng, 14);

  RefineConfig cfg;
  cfg.steps = 0;
  cfg.lr = 1e-3;
  const RefineResult r = lrf_refine(params, x, y, cfg);

  const ForwardResult base = equishape_forward(x, y, params);
  const Tensor S = similarity(base.feat_x, base.feat_y);
  CHECK(r.trace.size() == 1);
  CHECK(r.best_step == 0);
  CHECK(max_abs_diff(r.similarity, S) == 0.0);
  CHECK(r.match.match == hard_match(S).match);
  CHECK(all_zero(r.delta.du_x));
  CHECK(all_zero(r.delta.dv_x));
  CHECK(all_zero(r.delta.du_y));
  CHECK(all_zero(r.delta.dv_y));
}

TEST_CASE("model parameters are bit-identical before and after refinement") {
  Rng rng(2);
  EquiShapeParams params = make_equishape(tiny_config());
  auto named = named_params(params);
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : named) before.push_back(t->values());

  const Tensor x = rand_cloud(rng, 12), y = rand_cloud(rng, 12);
  RefineConfig cfg;
  cfg.steps = 4;
  cfg.lr = 1e-3;
  lrf_refine(params, x, y, cfg);

  for (std::size_t i = 0; i < named.size(); ++i) {
    REQUIRE(named[i].second->values().size() == before[i].size());
    CHECK(std::memcmp(named[i].second->values().data(), before[i].data(),
                      sizeof(double) * before[i].size()) == 0);
  }
}

TEST_CASE("refined loss never exceeds the initial loss") {
  Rng rng(3);
  EquiShapeParams params = make_equishape(tiny_config(9));
  RefineConfig cfg;
  cfg.steps = 3;
  cfg.lr = 1e-3;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = rand_cloud(rng, 12), y = rand_cloud(rng, 12);
    const RefineResult r = lrf_refine(params, x, y, cfg);
    REQUIRE(r.trace.size() == static_cast<std::size_t>(cfg.steps) + 1);
    const double initial = r.trace.front().total;
    const double reported = r.trace[static_cast<std::size_t>(r.best_step)].total;
    CHECK(reported <= initial);
    for (const TraceRow& row : r.trace) CHECK(reported <= row.total);
  }
}

TEST_CASE("zero learning rate leaves the corrections untouched") {
  Rng rng(4);
  EquiShapeParams params = make_equishape(tiny_config());
  const Tensor x = rand_cloud(rng, 10), y = rand_cloud(rng, 10);
  RefineConfig cfg;
  cfg.steps = 3;
  cfg.lr = 0.0;
  const RefineResult r = lrf_refine(params, x, y, cfg);
  CHECK(all_zero(r.delta.du_x));
  CHECK(all_zero(r.delta.dv_x));
  CHECK(all_zero(r.delta.du_y));
  CHECK(all_zero(r.delta.dv_y));
  for (const TraceRow& row : r.trace) CHECK(row.total == r.trace.front().total);
}

TEST_CASE("refinement preserves the rigid-motion contract") {
  // The correction gradients flow through invariant/equivariant ops only, so
  // they rotate per point exactly with each shape's motion. Adam's
  // per-coordinate second-moment scaling is not rotation-equivariant, which
  // makes exact trace equality a small-step property: the drift per step is
  // bounded by the step size times the l1 gradient mass, so the trace check
  // runs at a rate where that bound sits far below the tolerance.
  Rng rng(5);
  EquiShapeParams params = make_equishape(tiny_config(13));
  const int n = 12;
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor x = rand_cloud(rng, n), y = rand_cloud(rng, n);
    const Eigen::Matrix3d Rx = oracle::random_orthogonal(rng);
    const Eigen::Matrix3d Ry = oracle::random_orthogonal(rng);
    const Eigen::Vector3d tx(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Eigen::Vector3d ty(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Tensor xm = rotate_rows(x, Rx, tx);
    const Tensor ym = rotate_rows(y, Ry, ty);

    // Mechanism: per-point equivariance of the correction gradients at zero.
    auto grad_at_zero = [&](const Tensor& xx, const Tensor& yy) {
      Tensor dux = Tensor::zeros({n, 3}, true), dvx = Tensor::zeros({n, 3}, true);
      Tensor duy = Tensor::zeros({n, 3}, true), dvy = Tensor::zeros({n, 3}, true);
      auto [lx, ly] = cross_gvp(xx, yy, params.net);
      Tape tape;
      const LrfVectors ax{add(lx.u, dux), add(lx.v, dvx)};
      const LrfVectors ay{add(ly.u, duy), add(ly.v, dvy)};
      const StageTwoResult s2 = equishape_stage2(xx, yy, ax, ay, params);
      const GradientMap g =
          tape.backward(total_loss(xx, yy, s2.feat_x, s2.feat_y, params.config).total);
      return std::vector<Tensor>{g.at(dux), g.at(dvx), g.at(duy), g.at(dvy)};
    };
    const auto ga = grad_at_zero(x, y);
    const auto gb = grad_at_zero(xm, ym);
    for (int q = 0; q < 4; ++q) {
      const Eigen::Matrix3d& R = q < 2 ? Rx : Ry;
      for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d va(ga[q].at({i, 0}), ga[q].at({i, 1}), ga[q].at({i, 2}));
        const Eigen::Vector3d vb(gb[q].at({i, 0}), gb[q].at({i, 1}), gb[q].at({i, 2}));
        CHECK((vb - R * va).norm() < 1e-6 * std::max(1.0, va.norm()));
      }
    }

    // Consequence: equal loss traces when the steps are small.
    RefineConfig cfg;
    cfg.steps = 10;
    cfg.lr = 1e-10;
    const RefineResult a = lrf_refine(params, x, y, cfg);
    const RefineResult b = lrf_refine(params, xm, ym, cfg);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t s = 0; s < a.trace.size(); ++s)
      CHECK(std::abs(a.trace[s].total - b.trace[s].total) <
            1e-4 * std::max(1.0, std::abs(a.trace[s].total)));
  }
}

TEST_CASE("correction gradients match finite differences") {
  Rng rng(6);
  EquiShapeConfig cfg = tiny_config(21);
  cfg.net.k = 3;
  cfg.k_latent = 2;
  EquiShapeParams params = make_equishape(cfg);
  const int n = 8;
  const Tensor x = rand_cloud(rng, n), y = rand_cloud(rng, n);
  auto [lx, ly] = cross_gvp(x, y, params.net);
  const Tensor ux = lx.u.detached(), vx = lx.v.detached();
  const Tensor uy = ly.u.detached(), vy = ly.v.detached();

  auto f = [&](const std::vector<Tensor>& in) {
    const LrfVectors ax{add(ux, in[0]), add(vx, in[1])};
    const LrfVectors ay{add(uy, in[2]), add(vy, in[3])};
    const StageTwoResult s2 = equishape_stage2(x, y, ax, ay, params);
    return total_loss(x, y, s2.feat_x, s2.feat_y, params.config).total;
  };
  // The frame normalization gives this loss third derivatives large enough
  // that the default difference step is truncation-limited; 1e-7 sits at the
  // bottom of the error curve (verified by a step sweep).
  Rng drng(61);
  const auto r = grad_check(f,
                            {Tensor::uniform({n, 3}, drng, -0.05, 0.05),
                             Tensor::uniform({n, 3}, drng, -0.05, 0.05),
                             Tensor::uniform({n, 3}, drng, -0.05, 0.05),
                             Tensor::uniform({n, 3}, drng, -0.05, 0.05)},
                            1e-7);
  CHECK(r.max_rel_err < 1e-4);
  CHECK(r.checked > 90);
}

TEST_CASE("degenerate predicted frames switch to the stabilized path") {
  Rng rng(8);
  EquiShapeParams params = make_equishape(tiny_config());
  // A zeroed head output projection collapses every predicted frame vector
  // to zero, the degenerate case by construction.
  params.net.head.Wmu = Tensor::zeros(params.net.head.Wmu.shape(), true);
  const Tensor x = rand_cloud(rng, 10), y = rand_cloud(rng, 10);
  RefineConfig cfg;
  cfg.steps = 1;
  cfg.lr = 1e-3;
  const RefineResult r = lrf_refine(params, x, y, cfg);
  CHECK(r.stabilized_frames);
  for (const TraceRow& row : r.trace) CHECK(std::isfinite(row.total));
}

TEST_CASE("refine configuration validation") {
  Rng rng(9);
  EquiShapeParams params = make_equishape(tiny_config());
  const Tensor x = rand_cloud(rng, 10), y = rand_cloud(rng, 10);
  RefineConfig cfg;
  cfg.lr = -1e-8;
  CHECK_THROWS_AS(lrf_refine(params, x, y, cfg), std::invalid_argument);
  cfg = RefineConfig{};
  cfg.steps = -1;
  CHECK_THROWS_AS(lrf_refine(params, x, y, cfg), std::invalid_argument);
}

TEST_CASE("loss trace export") {
  std::vector<TraceRow> trace;
  for (int s = 0; s < 4; ++s)
    trace.push_back({s, 10.0 - s, 1.5 * s, 0.25 * s, 0.125 * s});
  const std::string path = "/tmp/eqlf_test_trace.csv";
  save_loss_trace(path, trace);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,total,cd_cross,cd_self,map");
  int rows = 0;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    int s;
    double total, cc, cs, mp;
    REQUIRE((ss >> s >> total >> cc >> cs >> mp));
    CHECK(s == rows);
    CHECK(total == doctest::Approx(10.0 - rows));
    CHECK(cc == doctest::Approx(1.5 * rows));
    ++rows;
  }
  CHECK(rows == 4);
  std::remove(path.c_str());
}

TEST_CASE("coordinate baseline with zero steps equals the base matching") {
  Rng rng(10);
  EquiShapeConfig model = tiny_config();
  const int n = 12;
  const Tensor x = rand_cloud(rng, n), y = rand_cloud(rng, n);
  const Tensor fx = Tensor::uniform({n, 8}, rng, -1, 1);
  const Tensor fy = Tensor::uniform({n, 8}, rng, -1, 1);

  RefineConfig cfg;
  cfg.steps = 0;
  const Correspondence c = coord_refine_baseline(x, y, fx, fy, model, cfg);
  CHECK(c.match == hard_match(similarity(fx, fy)).match);
}

TEST_CASE("coordinate baseline returns valid indices after optimization") {
  Rng rng(11);
  EquiShapeConfig model = tiny_config();
  const int n = 12;
  const Tensor x = rand_cloud(rng, n), y = rand_cloud(rng, n);
  const Tensor fx = Tensor::uniform({n, 8}, rng, -1, 1);
  const Tensor fy = Tensor::uniform({n, 8}, rng, -1, 1);

  RefineConfig cfg;
  cfg.steps = 6;
  cfg.lr = 1e-2;
  const Correspondence c = coord_refine_baseline(x, y, fx, fy, model, cfg);
  REQUIRE(c.match.size() == static_cast<std::size_t>(n));
  for (int j : c.match) {
    CHECK(j >= 0);
    CHECK(j < n);
  }
}
