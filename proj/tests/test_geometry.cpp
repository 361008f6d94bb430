#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "eqlf/geometry.hpp"
#include "oracles.hpp"

using namespace eqlf;

namespace {

PointCloud random_cloud(int n, Rng& rng, double scale = 1.0) {
  PointCloud c(n, 3);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j) c(i, j) = rng.uniform(-scale, scale);
  return c;
}

std::vector<Eigen::Vector3d> to_vec(const PointCloud& c) {
  std::vector<Eigen::Vector3d> v;
  for (int i = 0; i < c.rows(); ++i) v.push_back(c.row(i).transpose());
  return v;
}

}  // namespace

TEST_CASE("knn matches brute force including order") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const int n = 10 + rng.uniform_int(50);
    const int k = 1 + rng.uniform_int(std::min(n - 1, 8));
    PointCloud c = random_cloud(n, rng);
    KnnGraph g = knn_graph(c, k);
    auto expect = oracle::knn_bruteforce(to_vec(c), k);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        CHECK(g.at(i, j) == expect[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
  }
}

TEST_CASE("knn on three collinear points") {
  PointCloud c(3, 3);
  c << 0, 0, 0, 1, 0, 0, 3, 0, 0;
  KnnGraph g = knn_graph(c, 1);
  CHECK(g.at(0, 0) == 1);
  CHECK(g.at(1, 0) == 0);
  CHECK(g.at(2, 0) == 1);
}

TEST_CASE("knn ties resolve to the lowest index") {
  PointCloud c(4, 3);
  // points 1, 2, 3 all at distance 1 from point 0
  c << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  KnnGraph g = knn_graph(c, 2);
  CHECK(g.at(0, 0) == 1);
  CHECK(g.at(0, 1) == 2);
}

TEST_CASE("knn preconditions") {
  Rng rng(3);
  PointCloud c = random_cloud(5, rng);
  CHECK_THROWS_AS(knn_graph(c, 0), std::invalid_argument);
  CHECK_THROWS_AS(knn_graph(c, 5), std::invalid_argument);
  CHECK_NOTHROW(knn_graph(c, 4));
}

TEST_CASE("random_se3 produces proper rotations, deterministically") {
  Rng a(99), b(99);
  for (int i = 0; i < 50; ++i) {
    Se3Transform g = random_se3(a);
    Se3Transform h = random_se3(b);
    CHECK((g.R - h.R).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g.t - h.t).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g.R.transpose() * g.R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(std::fabs(g.R.determinant() - 1.0) <= 1e-10);
    for (int j = 0; j < 3; ++j) CHECK(std::fabs(g.t(j)) <= 1.0);
  }
}

TEST_CASE("random_se3 rotation marginals are uniform") {
  // E[R] = 0 for the uniform measure on SO(3).
  Rng rng(2026);
  Eigen::Matrix3d acc = Eigen::Matrix3d::Zero();
  Eigen::Vector3d tacc = Eigen::Vector3d::Zero();
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    Se3Transform g = random_se3(rng);
    acc += g.R;
    tacc += g.t;
  }
  acc /= trials;
  tacc /= trials;
  CHECK(acc.cwiseAbs().maxCoeff() <= 0.02);
  CHECK(tacc.cwiseAbs().maxCoeff() <= 0.02);
}

TEST_CASE("se3 constructor rejects improper rotations") {
  Eigen::Matrix3d reflect = Eigen::Matrix3d::Identity();
  reflect(2, 2) = -1.0;
  CHECK_THROWS_AS(Se3Transform(reflect, Eigen::Vector3d::Zero()), std::invalid_argument);
  Eigen::Matrix3d scaled = 2.0 * Eigen::Matrix3d::Identity();
  CHECK_THROWS_AS(Se3Transform(scaled, Eigen::Vector3d::Zero()), std::invalid_argument);
}

TEST_CASE("apply_se3 preserves pairwise distances and diameter") {
  Rng rng(17);
  PointCloud c = random_cloud(40, rng);
  Se3Transform g = random_se3(rng);
  PointCloud moved = apply_se3(c, g);
  for (int i = 0; i < c.rows(); ++i)
    for (int j = i + 1; j < c.rows(); ++j)
      CHECK(std::fabs((c.row(i) - c.row(j)).norm() - (moved.row(i) - moved.row(j)).norm()) <= 1e-12);
  CHECK(std::fabs(max_diameter(c) - max_diameter(moved)) <= 1e-12);
}

TEST_CASE("center subtracts the centroid") {
  Rng rng(23);
  PointCloud c = random_cloud(33, rng);
  PointCloud z = center(c);
  CHECK(centroid(z).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("gram_schmidt identity example") {
  Eigen::Matrix3d o = gram_schmidt({2, 0, 0}, {1, 1, 0});
  CHECK((o - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("gram_schmidt axis-swap example") {
  Eigen::Matrix3d o = gram_schmidt({0, 0, 3}, {0, 2, 0});
  Eigen::Matrix3d expect;
  expect << 0, 0, -1, 0, 1, 0, 1, 0, 0;  // columns (0,0,1), (0,1,0), (-1,0,0)
  CHECK((o - expect).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("gram_schmidt output is orthonormal right-handed") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Vector3d u(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Eigen::Vector3d v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (u.norm() < 0.1 || u.cross(v).norm() < 0.1) continue;
    Eigen::Matrix3d o = gram_schmidt(u, v);
    CHECK((o.transpose() * o - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(std::fabs(o.determinant() - 1.0) <= 1e-10);
    CHECK((o.col(2) - o.col(0).cross(o.col(1))).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("gram_schmidt commutes with rotations; reflections flip the third axis") {
  Rng rng(37);
  for (int trial = 0; trial < 30; ++trial) {
    Eigen::Vector3d u(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    Eigen::Vector3d v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (u.norm() < 0.1 || u.cross(v).norm() < 0.1) continue;
    Eigen::Matrix3d o = gram_schmidt(u, v);

    Eigen::Matrix3d r = oracle::random_orthogonal(rng, false);
    Eigen::Matrix3d ro = gram_schmidt(r * u, r * v);
    CHECK((ro - r * o).cwiseAbs().maxCoeff() <= 1e-10);

    Eigen::Matrix3d m = oracle::random_orthogonal(rng, true);
    Eigen::Matrix3d mo = gram_schmidt(m * u, m * v);
    CHECK((mo.col(0) - m * o.col(0)).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((mo.col(1) - m * o.col(1)).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((mo.col(2) + m * o.col(2)).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("gram_schmidt rejects degenerate inputs") {
  CHECK_THROWS_AS(gram_schmidt({1e-9, 0, 0}, {0, 1, 0}), DegenerateFrame);
  CHECK_THROWS_AS(gram_schmidt({1, 0, 0}, {2, 1e-9, 0}), DegenerateFrame);
  PointCloud u(2, 3), v(2, 3);
  u << 1, 0, 0, 1, 0, 0;
  v << 0, 1, 0, 1, 0, 0;  // second row collinear
  CHECK_THROWS_WITH_AS(gram_schmidt_frames(u, v), doctest::Contains("point 1"), DegenerateFrame);
}

TEST_CASE("stable gram_schmidt matches the strict version away from degeneracy") {
  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    PointCloud u = random_cloud(8, rng), v = random_cloud(8, rng);
    bool ok = true;
    for (int i = 0; i < 8; ++i)
      ok = ok && u.row(i).norm() > 0.2 &&
           Eigen::Vector3d(u.row(i)).cross(Eigen::Vector3d(v.row(i))).norm() > 0.2 * u.row(i).norm();
    if (!ok) continue;
    LrfSet strict = gram_schmidt_frames(u, v);
    FrameTensors f = gram_schmidt_stable(cloud_to_tensor(u), cloud_to_tensor(v));
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 3; ++j) {
        CHECK(std::fabs(f.e1.at({i, j}) - strict.O[static_cast<std::size_t>(i)](j, 0)) <= 1e-6);
        CHECK(std::fabs(f.e2.at({i, j}) - strict.O[static_cast<std::size_t>(i)](j, 1)) <= 1e-6);
        CHECK(std::fabs(f.e3.at({i, j}) - strict.O[static_cast<std::size_t>(i)](j, 2)) <= 1e-6);
      }
  }
}

TEST_CASE("stable gram_schmidt stays finite on collinear input") {
  PointCloud u(1, 3), v(1, 3);
  u << 1, 0, 0;
  v << 2, 0, 0;
  FrameTensors f = gram_schmidt_stable(cloud_to_tensor(u), cloud_to_tensor(v));
  for (int j = 0; j < 3; ++j) {
    CHECK(std::isfinite(f.e2.at({0, j})));
    CHECK(std::isfinite(f.e3.at({0, j})));
  }
  // rejection is ~0 so the second and third axes collapse towards zero
  CHECK(row_l2_norm(f.e3).at({0}) <= 1e-3);
}

TEST_CASE("stable gram_schmidt is differentiable") {
  Rng rng(43);
  PointCloud u = random_cloud(4, rng), v = random_cloud(4, rng);
  for (int i = 0; i < 4; ++i) {  // keep clear of the degenerate region
    u.row(i) *= (1.0 + 1.0 / std::max(0.2, u.row(i).norm()));
    if (Eigen::Vector3d(u.row(i)).cross(Eigen::Vector3d(v.row(i))).norm() < 0.3) v(i, 1) += 1.0;
  }
  Tensor proj({4, 9}, [&] {
    std::vector<double> w(36);
    for (auto& x : w) x = rng.uniform(-1, 1);
    return w;
  }());
  auto f = [&](const std::vector<Tensor>& in) {
    FrameTensors ft = gram_schmidt_stable(in[0], in[1]);
    return sum_all(mul(concat({ft.e1, ft.e2, ft.e3}, 1), proj));
  };
  auto r = grad_check(f, {cloud_to_tensor(u), cloud_to_tensor(v)});
  CHECK(r.max_rel_err <= 1e-4);
  CHECK(r.checked > 0);
}

TEST_CASE("covariance frames are orthonormal and right-handed") {
  Rng rng(47);
  PointCloud c(30, 3);
  for (int i = 0; i < 30; ++i) {  // anisotropic patch: distinct eigenvalues
    c(i, 0) = rng.uniform(-2.0, 2.0);
    c(i, 1) = rng.uniform(-1.0, 1.0);
    c(i, 2) = rng.uniform(-0.3, 0.3);
  }
  LrfSet set = covariance_lrf(c, knn_graph(c, 10));
  for (const Eigen::Matrix3d& o : set.O) {
    CHECK((o.transpose() * o - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(std::fabs(o.determinant() - 1.0) <= 1e-6);
    CHECK((o.col(2) - o.col(0).cross(o.col(1))).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("covariance frames give invariant local coordinates on sign-stable patches") {
  // Skewed anisotropic patch: clear eigenvalue gaps and decisive sign votes.
  Rng rng(53);
  PointCloud c(25, 3);
  for (int i = 0; i < 25; ++i) {
    const double x = rng.uniform(0.0, 2.0);  // one-sided along the main axis
    c(i, 0) = x * x * 0.5;
    c(i, 1) = rng.uniform(0.0, 0.8);
    c(i, 2) = rng.uniform(-0.1, 0.2);
  }
  const int k = 7;  // odd: the sign votes cannot tie, so frames are sign-stable
  KnnGraph g = knn_graph(c, k);
  LrfSet base = covariance_lrf(c, g);
  Se3Transform motion = random_se3(rng);
  PointCloud moved = apply_se3(c, motion);
  LrfSet rot = covariance_lrf(moved, knn_graph(moved, k));
  for (int i = 0; i < c.rows(); ++i)
    for (int j = 0; j < k; ++j) {
      const Eigen::Vector3d d0 = (c.row(g.at(i, j)) - c.row(i)).transpose();
      const Eigen::Vector3d d1 = (moved.row(g.at(i, j)) - moved.row(i)).transpose();
      const Eigen::Vector3d p0 = base.O[static_cast<std::size_t>(i)].transpose() * d0;
      const Eigen::Vector3d p1 = rot.O[static_cast<std::size_t>(i)].transpose() * d1;
      CHECK((p0 - p1).cwiseAbs().maxCoeff() <= 1e-8);
    }
}

TEST_CASE("covariance frames reject isotropic neighbourhoods") {
  PointCloud c(7, 3);
  c << 0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1;
  CHECK_THROWS_AS(covariance_lrf(c, knn_graph(c, 6)), DegenerateFrame);
}

TEST_CASE("xyz round trip and parse errors") {
  Rng rng(59);
  PointCloud c = random_cloud(17, rng, 3.0);
  const std::string path = "/tmp/eqlf_test_cloud.xyz";
  save_xyz(path, c);
  PointCloud back = load_xyz(path);
  REQUIRE(back.rows() == c.rows());
  CHECK((back - c).cwiseAbs().maxCoeff() <= 1e-6);

  {
    std::ofstream out(path);
    out << "# a comment line\n\n 1.0 2.0 3.0\n# another\n4 5 6\n";
  }
  PointCloud two = load_xyz(path);
  REQUIRE(two.rows() == 2);
  CHECK(two(1, 2) == 6.0);

  {
    std::ofstream out(path);
    out << "1 2 3\n1 2\n";
  }
  CHECK_THROWS_WITH_AS(load_xyz(path), doctest::Contains(":2:"), std::runtime_error);
  {
    std::ofstream out(path);
    out << "1 2 3 4\n";
  }
  CHECK_THROWS_AS(load_xyz(path), std::runtime_error);
  CHECK_THROWS_AS(load_xyz("/tmp/eqlf_does_not_exist.xyz"), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("colored export writes six columns") {
  PointCloud c(2, 3);
  c << 0, 0, 0, 1, 1, 1;
  std::vector<Eigen::Vector3d> rgb{{1, 0, 0}, {0, 0.5, 1}};
  const std::string path = "/tmp/eqlf_test_colored.xyz";
  save_xyz_colored(path, c, rgb);
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    double f;
    int fields = 0;
    while (ss >> f) ++fields;
    CHECK(fields == 6);
    ++rows;
  }
  CHECK(rows == 2);
  std::remove(path.c_str());
}
