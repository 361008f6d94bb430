#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "eqlf/matcher.hpp"

namespace eqlf {

// One verified property: the observed error (or violation count) and the
// inclusive bound it has to stay under. `pass` is stored rather than derived
// so a property can also fail for structural reasons (nothing audited).
struct PropertyResult {
  std::string name;
  double observed = 0.0;
  double bound = 0.0;
  bool pass = false;
};

bool all_pass(const std::vector<PropertyResult>& results);
void print_results(std::ostream& out, const std::vector<PropertyResult>& results);

// Uniformly random rotation matrix (det +1), quaternion construction.
Eigen::Matrix3d random_rotation(Rng& rng);
PointCloud random_cloud(Rng& rng, int n, double lo = -1.0, double hi = 1.0);

// The learned LRF vectors of both shapes commute with independent rigid
// motions applied to either cloud. Fresh random weights every few trials.
std::vector<PropertyResult> equivariance_suite(int trials, int n, std::uint64_t seed);

// Orthonormalization properties: rotation equivariance, the bitwise
// third-axis sign flip under a coordinate reflection, orthonormality and
// determinant of the assembled frames.
std::vector<PropertyResult> frame_suite(int trials, std::uint64_t seed);

// Similarity matrices are unchanged by independent rigid motions, and hard
// matches agree wherever the top-1 margin is decisive.
std::vector<PropertyResult> invariance_suite(int trials, int n, std::uint64_t seed);

// Central-difference audits of every differentiable op plus the full
// objective through sampled coordinates of every parameter tensor.
std::vector<PropertyResult> gradient_suite(std::uint64_t seed);

}  // namespace eqlf
