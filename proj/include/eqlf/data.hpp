#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eqlf/common.hpp"
#include "eqlf/geometry.hpp"

namespace eqlf {

// Synthetic pair generator: a chain of capsule segments, re-posed at the
// joints. Points are sampled on the lateral surfaces with a per-point
// (segment, angle, height) parameterization, so re-posing moves each point
// rigidly with its segment and the ground-truth correspondence is the
// identity.
struct ShapeSpec {
  int segment_count = 5;
  double joint_angle_range = 0.6;  // radians; double it for the harder split
  int n = 128;                     // points per cloud, minimum 32
  std::uint64_t seed = 0;
};

struct ShapePair {
  PointCloud source;        // centred, max radius exactly 1
  PointCloud target;        // re-posed, same scale, random global rigid motion
  std::vector<int> gt;      // gt[i] = i
  std::vector<int> segment; // segment id per point
  Se3Transform target_motion;
};

ShapePair generate_pair(const ShapeSpec& spec);

// Writes pair_%05d_{src,tgt}.xyz, pair_%05d_gt.txt and a tab-separated
// manifest "src<TAB>tgt<TAB>gt" (paths relative to the manifest). Every file
// is written to a temp name and renamed. Returns the manifest path.
std::string generate_dataset(const std::string& dir, const ShapeSpec& base, int count,
                             std::uint64_t seed);

struct LoadedPair {
  PointCloud source, target;
  std::vector<int> gt;  // empty when the manifest row has '-'
};

LoadedPair load_pair(const std::string& src_path, const std::string& tgt_path,
                     const std::string& gt_path_or_dash);
std::vector<LoadedPair> load_manifest(const std::string& manifest_path);

}  // namespace eqlf
