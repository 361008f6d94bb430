#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

#include "eqlf/common.hpp"
#include "eqlf/tensor.hpp"

namespace eqlf {

// Clouds are n x 3 row-major so a row is one point and the buffer matches the
// tensor layout byte for byte.
using PointCloud = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

// Thrown when a local frame cannot be built: (near-)collinear inputs to
// Gram-Schmidt or an ambiguous covariance eigenbasis.
struct DegenerateFrame : std::runtime_error {
  explicit DegenerateFrame(const std::string& what) : std::runtime_error(what) {}
};

// Rigid motion x -> R x + t with R a proper rotation. The constructor rejects
// anything whose rotation block is not orthonormal with det +1 within 1e-10.
struct Se3Transform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Se3Transform() = default;
  Se3Transform(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);
};

// k nearest neighbours of every point, neighbours of i at nbr[i*k .. i*k+k),
// ascending by (distance, index), never including i itself.
struct KnnGraph {
  int n = 0;
  int k = 0;
  std::vector<int> nbr;

  int at(int i, int j) const { return nbr[static_cast<std::size_t>(i) * k + j]; }
};

// One orthonormal right-handed frame per point, columns (e1, e2, e3) with
// e3 = e1 x e2.
struct LrfSet {
  std::vector<Eigen::Matrix3d> O;

  int n() const { return static_cast<int>(O.size()); }
};

// Differentiable frame columns as [n,3] tensors.
struct FrameTensors {
  Tensor e1, e2, e3;
};

// Exact O(n^2) k nearest neighbours. Requires 1 <= k < n.
KnnGraph knn_graph(const PointCloud& cloud, int k);

PointCloud apply_se3(const PointCloud& cloud, const Se3Transform& g);

// Rotation uniform over SO(3) (quaternion method), translation uniform in
// [-1,1]^3. Deterministic in the generator state.
Se3Transform random_se3(Rng& rng);

Eigen::Vector3d centroid(const PointCloud& cloud);
PointCloud center(const PointCloud& cloud);

// Largest pairwise distance, O(n^2).
double max_diameter(const PointCloud& cloud);

// Strict Gram-Schmidt: e1 = u/|u|, e2 = normalized rejection of v, e3 = e1 x e2.
// Throws DegenerateFrame if |u| < 1e-8 or the rejection norm is < 1e-8.
Eigen::Matrix3d gram_schmidt(const Eigen::Vector3d& u, const Eigen::Vector3d& v);
LrfSet gram_schmidt_frames(const PointCloud& u, const PointCloud& v);

// Differentiable variant used inside the network: both normalizations carry a
// +1e-8 in the denominator instead of throwing, so collinear inputs yield a
// small (even zero) third axis but never NaN.
FrameTensors gram_schmidt_stable(const Tensor& u, const Tensor& v);

// Handcrafted frames from the eigen-decomposition of the neighbour-offset
// covariance: e1 along the largest eigenvalue, e3 along the smallest, signs
// fixed by the positive-dot majority over the neighbourhood, e2 = e3 x e1.
// Throws DegenerateFrame when the two smallest eigenvalues differ by < 1e-10.
LrfSet covariance_lrf(const PointCloud& cloud, const KnnGraph& graph);

// Plain text '.xyz': one "x y z" line per point, '#' lines ignored. Parse
// errors carry the 1-based line number. Writes are atomic (tmp file + rename).
PointCloud load_xyz(const std::string& path);
void save_xyz(const std::string& path, const PointCloud& cloud);
// Six-column variant with an RGB triple in [0,1] per point.
void save_xyz_colored(const std::string& path, const PointCloud& cloud,
                      const std::vector<Eigen::Vector3d>& rgb);

// Bridges to the autodiff world; the tensor is [n,3].
Tensor cloud_to_tensor(const PointCloud& cloud);
PointCloud tensor_to_cloud(const Tensor& t);

}  // namespace eqlf
