#include "eqlf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace eqlf {

namespace {

constexpr double kFrameEps = 1e-8;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

Se3Transform::Se3Transform(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
    : R(rotation), t(translation) {
  const double ortho = (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-10 || std::fabs(R.determinant() - 1.0) > 1e-10)
    fail("Se3Transform: rotation block is not a proper rotation (orthogonality defect " +
         std::to_string(ortho) + ", det " + std::to_string(R.determinant()) + ")");
}

KnnGraph knn_graph(const PointCloud& cloud, int k) {
  const int n = static_cast<int>(cloud.rows());
  if (k < 1) fail("knn_graph: k must be >= 1, got " + std::to_string(k));
  if (n < k + 1)
    fail("knn_graph: need at least k+1 = " + std::to_string(k + 1) + " points, got " +
         std::to_string(n));
  KnnGraph g;
  g.n = n;
  g.k = k;
  g.nbr.resize(static_cast<std::size_t>(n) * k);
  std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n - 1));
  for (int i = 0; i < n; ++i) {
    int m = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      dist[static_cast<std::size_t>(m++)] = {(cloud.row(i) - cloud.row(j)).squaredNorm(), j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());  // (distance, index) ascending
    for (int j = 0; j < k; ++j) g.nbr[static_cast<std::size_t>(i) * k + j] = dist[static_cast<std::size_t>(j)].second;
  }
  return g;
}

PointCloud apply_se3(const PointCloud& cloud, const Se3Transform& g) {
  PointCloud out = cloud * g.R.transpose();
  out.rowwise() += g.t.transpose();
  return out;
}

Se3Transform random_se3(Rng& rng) {
  // Shoemake's subgroup-algorithm quaternion: uniform over SO(3).
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();
  const double u3 = rng.uniform();
  const double two_pi = 6.283185307179586476925286766559;
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const Eigen::Quaterniond q(b * std::cos(two_pi * u3),   // w
                             a * std::sin(two_pi * u2),   // x
                             a * std::cos(two_pi * u2),   // y
                             b * std::sin(two_pi * u3));  // z
  Eigen::Vector3d t(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
  return Se3Transform(q.toRotationMatrix(), t);
}

Eigen::Vector3d centroid(const PointCloud& cloud) {
  if (cloud.rows() == 0) fail("centroid: empty cloud");
  return cloud.colwise().mean().transpose();
}

PointCloud center(const PointCloud& cloud) {
  PointCloud out = cloud;
  out.rowwise() -= centroid(cloud).transpose();
  return out;
}

double max_diameter(const PointCloud& cloud) {
  const int n = static_cast<int>(cloud.rows());
  double best = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      best = std::max(best, (cloud.row(i) - cloud.row(j)).norm());
  return best;
}

Eigen::Matrix3d gram_schmidt(const Eigen::Vector3d& u, const Eigen::Vector3d& v) {
  const double nu = u.norm();
  if (nu < kFrameEps)
    throw DegenerateFrame("gram_schmidt: first direction has norm " + std::to_string(nu));
  const Eigen::Vector3d e1 = u / nu;
  const Eigen::Vector3d w = v - v.dot(e1) * e1;
  const double nw = w.norm();
  if (nw < kFrameEps)
    throw DegenerateFrame("gram_schmidt: second direction is collinear with the first (rejection norm " +
                          std::to_string(nw) + ")");
  const Eigen::Vector3d e2 = w / nw;
  Eigen::Matrix3d out;
  out.col(0) = e1;
  out.col(1) = e2;
  out.col(2) = e1.cross(e2);
  return out;
}

LrfSet gram_schmidt_frames(const PointCloud& u, const PointCloud& v) {
  if (u.rows() != v.rows()) fail("gram_schmidt_frames: point counts differ");
  LrfSet set;
  set.O.reserve(static_cast<std::size_t>(u.rows()));
  for (int i = 0; i < u.rows(); ++i) {
    try {
      set.O.push_back(gram_schmidt(u.row(i).transpose(), v.row(i).transpose()));
    } catch (const DegenerateFrame& e) {
      throw DegenerateFrame("point " + std::to_string(i) + ": " + e.what());
    }
  }
  return set;
}

FrameTensors gram_schmidt_stable(const Tensor& u, const Tensor& v) {
  if (u.ndim() != 2 || u.dim(1) != 3 || u.shape() != v.shape())
    fail("gram_schmidt_stable: expected matching [n,3] tensors, got " + shape_str(u.shape()) +
         " and " + shape_str(v.shape()));
  const int n = u.dim(0);
  FrameTensors f;
  Tensor nu = reshape(add(row_l2_norm(u), kFrameEps), {n, 1});
  f.e1 = div(u, nu);
  Tensor proj = reshape(sum(mul(v, f.e1), 1), {n, 1});
  Tensor w = sub(v, mul(proj, f.e1));
  Tensor nw = reshape(add(row_l2_norm(w), kFrameEps), {n, 1});
  f.e2 = div(w, nw);
  f.e3 = cross3(f.e1, f.e2);
  return f;
}

LrfSet covariance_lrf(const PointCloud& cloud, const KnnGraph& graph) {
  if (graph.n != cloud.rows()) fail("covariance_lrf: graph does not match cloud");
  LrfSet set;
  set.O.reserve(static_cast<std::size_t>(graph.n));
  for (int i = 0; i < graph.n; ++i) {
    Eigen::Matrix3d c = Eigen::Matrix3d::Zero();
    for (int j = 0; j < graph.k; ++j) {
      const Eigen::Vector3d d = (cloud.row(graph.at(i, j)) - cloud.row(i)).transpose();
      c += d * d.transpose();
    }
    c /= static_cast<double>(graph.k);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(c);  // eigenvalues ascending
    const Eigen::Vector3d ev = eig.eigenvalues();
    if (ev(1) - ev(0) < 1e-10)
      throw DegenerateFrame("covariance_lrf: point " + std::to_string(i) +
                            " has an ambiguous normal plane (smallest eigenvalues " +
                            std::to_string(ev(0)) + ", " + std::to_string(ev(1)) + ")");
    Eigen::Vector3d e1 = eig.eigenvectors().col(2);  // largest eigenvalue
    Eigen::Vector3d e3 = eig.eigenvectors().col(0);  // smallest eigenvalue
    int pos1 = 0, neg1 = 0, pos3 = 0, neg3 = 0;
    for (int j = 0; j < graph.k; ++j) {
      const Eigen::Vector3d d = (cloud.row(graph.at(i, j)) - cloud.row(i)).transpose();
      const double d1 = d.dot(e1), d3 = d.dot(e3);
      pos1 += d1 > 0;
      neg1 += d1 < 0;
      pos3 += d3 > 0;
      neg3 += d3 < 0;
    }
    if (neg1 > pos1) e1 = -e1;
    if (neg3 > pos3) e3 = -e3;
    Eigen::Matrix3d o;
    o.col(0) = e1;
    o.col(1) = e3.cross(e1);
    o.col(2) = e3;
    set.O.push_back(o);
  }
  return set;
}

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Eigen::Vector3d> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double x, y, z;
    if (!(ss >> x >> y >> z))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected three numeric fields");
    std::string rest;
    if (ss >> rest)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": trailing content '" + rest + "'");
    pts.emplace_back(x, y, z);
  }
  PointCloud cloud(static_cast<int>(pts.size()), 3);
  for (int i = 0; i < cloud.rows(); ++i) cloud.row(i) = pts[static_cast<std::size_t>(i)].transpose();
  return cloud;
}

namespace {

void write_atomic(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out << body;
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

}  // namespace

void save_xyz(const std::string& path, const PointCloud& cloud) {
  std::ostringstream body;
  char buf[128];
  for (int i = 0; i < cloud.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.12g %.12g %.12g\n", cloud(i, 0), cloud(i, 1), cloud(i, 2));
    body << buf;
  }
  write_atomic(path, body.str());
}

void save_xyz_colored(const std::string& path, const PointCloud& cloud,
                      const std::vector<Eigen::Vector3d>& rgb) {
  if (static_cast<int>(rgb.size()) != cloud.rows())
    fail("save_xyz_colored: colour count does not match point count");
  std::ostringstream body;
  char buf[192];
  for (int i = 0; i < cloud.rows(); ++i) {
    const Eigen::Vector3d& c = rgb[static_cast<std::size_t>(i)];
    std::snprintf(buf, sizeof(buf), "%.12g %.12g %.12g %.4f %.4f %.4f\n", cloud(i, 0), cloud(i, 1),
                  cloud(i, 2), c.x(), c.y(), c.z());
    body << buf;
  }
  write_atomic(path, body.str());
}

Tensor cloud_to_tensor(const PointCloud& cloud) {
  std::vector<double> v(cloud.data(), cloud.data() + cloud.size());
  return Tensor({static_cast<int>(cloud.rows()), 3}, std::move(v));
}

PointCloud tensor_to_cloud(const Tensor& t) {
  if (t.ndim() != 2 || t.dim(1) != 3)
    fail("tensor_to_cloud: expected an [n,3] tensor, got " + shape_str(t.shape()));
  PointCloud cloud(t.dim(0), 3);
  std::copy(t.values().begin(), t.values().end(), cloud.data());
  return cloud;
}

}  // namespace eqlf
