#include "eqlf/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace eqlf {

namespace {

namespace fs = std::filesystem;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Rotation by `angle` about an axis drawn perpendicular to the chain
// direction, so a bend never twists the tube about its own axis.
Eigen::Matrix3d bend(const Eigen::Matrix3d& frame, double angle, double axis_phase) {
  const Eigen::Vector3d axis =
      std::cos(axis_phase) * frame.col(1) + std::sin(axis_phase) * frame.col(2);
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix() * frame;
}

struct Skeleton {
  std::vector<double> length, radius;
  std::vector<double> base_angle, base_phase;  // joint bends of the rest pose
};

// Forward kinematics: world position of every sampled point for the given
// extra joint bends (empty = rest pose).
PointCloud pose_points(const Skeleton& sk, const std::vector<int>& seg,
                       const std::vector<double>& phi, const std::vector<double>& height,
                       const std::vector<double>& delta_angle,
                       const std::vector<double>& delta_phase) {
  const int segments = static_cast<int>(sk.length.size());
  std::vector<Eigen::Matrix3d> frame(static_cast<std::size_t>(segments));
  std::vector<Eigen::Vector3d> base(static_cast<std::size_t>(segments));
  Eigen::Matrix3d f = Eigen::Matrix3d::Identity();
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  for (int s = 0; s < segments; ++s) {
    if (s > 0) {
      f = bend(f, sk.base_angle[static_cast<std::size_t>(s)], sk.base_phase[static_cast<std::size_t>(s)]);
      if (!delta_angle.empty())
        f = bend(f, delta_angle[static_cast<std::size_t>(s)], delta_phase[static_cast<std::size_t>(s)]);
    }
    frame[static_cast<std::size_t>(s)] = f;
    base[static_cast<std::size_t>(s)] = p;
    p += f.col(0) * sk.length[static_cast<std::size_t>(s)];
  }
  PointCloud cloud(static_cast<int>(seg.size()), 3);
  for (int i = 0; i < cloud.rows(); ++i) {
    const int s = seg[static_cast<std::size_t>(i)];
    const Eigen::Matrix3d& fr = frame[static_cast<std::size_t>(s)];
    const double r = sk.radius[static_cast<std::size_t>(s)];
    const Eigen::Vector3d local =
        fr.col(0) * (height[static_cast<std::size_t>(i)] * sk.length[static_cast<std::size_t>(s)]) +
        r * (std::cos(phi[static_cast<std::size_t>(i)]) * fr.col(1) +
             std::sin(phi[static_cast<std::size_t>(i)]) * fr.col(2));
    cloud.row(i) = (base[static_cast<std::size_t>(s)] + local).transpose();
  }
  return cloud;
}

std::vector<int> parse_gt(const std::string& path, int n) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<int> gt;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    long v;
    if (!(ss >> v))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected an index");
    if (v < 0 || v >= n)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": index " + std::to_string(v) +
                               " outside [0," + std::to_string(n) + ")");
    gt.push_back(static_cast<int>(v));
  }
  if (static_cast<int>(gt.size()) != n)
    throw std::runtime_error(path + ": has " + std::to_string(gt.size()) +
                             " indices for a cloud of " + std::to_string(n) + " points");
  return gt;
}

}  // namespace

ShapePair generate_pair(const ShapeSpec& spec) {
  if (spec.segment_count < 1) fail("generate_pair: segment_count must be >= 1");
  if (spec.n < 32) fail("generate_pair: n must be >= 32, got " + std::to_string(spec.n));
  if (spec.joint_angle_range < 0.0) fail("generate_pair: joint_angle_range must be >= 0");
  Rng rng(spec.seed);

  // Draw order is fixed: skeleton, sampling parameters, deformation, motion.
  const int segments = spec.segment_count;
  Skeleton sk;
  for (int s = 0; s < segments; ++s) {
    sk.length.push_back(rng.uniform(0.8, 1.4));
    sk.radius.push_back(rng.uniform(0.10, 0.16));
    sk.base_angle.push_back(s == 0 ? 0.0 : rng.uniform(-0.5, 0.5));
    sk.base_phase.push_back(rng.uniform(0.0, kTwoPi));
  }

  // Sample counts proportional to lateral area, every segment non-empty.
  std::vector<double> area(static_cast<std::size_t>(segments));
  double total = 0.0;
  for (int s = 0; s < segments; ++s)
    total += area[static_cast<std::size_t>(s)] =
        sk.length[static_cast<std::size_t>(s)] * sk.radius[static_cast<std::size_t>(s)];
  std::vector<int> count(static_cast<std::size_t>(segments), 1);
  int assigned = segments;
  if (assigned > spec.n) fail("generate_pair: more segments than points");
  for (int s = 0; s < segments && assigned < spec.n; ++s) {
    const int extra = std::min(spec.n - assigned,
                               static_cast<int>(std::floor(area[static_cast<std::size_t>(s)] / total *
                                                           (spec.n - segments))));
    count[static_cast<std::size_t>(s)] += extra;
    assigned += extra;
  }
  for (int s = 0; assigned < spec.n; s = (s + 1) % segments) {  // leftovers round-robin
    ++count[static_cast<std::size_t>(s)];
    ++assigned;
  }

  ShapePair pair;
  std::vector<double> phi, height;
  for (int s = 0; s < segments; ++s)
    for (int c = 0; c < count[static_cast<std::size_t>(s)]; ++c) {
      pair.segment.push_back(s);
      phi.push_back(rng.uniform(0.0, kTwoPi));
      height.push_back(rng.uniform(0.0, 1.0));
    }

  std::vector<double> delta_angle(static_cast<std::size_t>(segments), 0.0);
  std::vector<double> delta_phase(static_cast<std::size_t>(segments), 0.0);
  for (int s = 1; s < segments; ++s) {
    delta_angle[static_cast<std::size_t>(s)] =
        rng.uniform(-spec.joint_angle_range, spec.joint_angle_range);
    delta_phase[static_cast<std::size_t>(s)] = rng.uniform(0.0, kTwoPi);
  }

  PointCloud src = pose_points(sk, pair.segment, phi, height, {}, {});
  PointCloud tgt = pose_points(sk, pair.segment, phi, height, delta_angle, delta_phase);

  // Shared scale keeps the per-segment geometry identical across the pair;
  // the source ends up with max radius exactly 1.
  const Eigen::Vector3d cs = centroid(src);
  src.rowwise() -= cs.transpose();
  const double scale = src.rowwise().norm().maxCoeff();
  src /= scale;
  tgt.rowwise() -= centroid(tgt).transpose();
  tgt /= scale;

  pair.target_motion = random_se3(rng);
  pair.source = std::move(src);
  pair.target = apply_se3(tgt, pair.target_motion);
  pair.gt.resize(static_cast<std::size_t>(spec.n));
  for (int i = 0; i < spec.n; ++i) pair.gt[static_cast<std::size_t>(i)] = i;
  return pair;
}

std::string generate_dataset(const std::string& dir, const ShapeSpec& base, int count,
                             std::uint64_t seed) {
  if (count < 1) fail("generate_dataset: count must be >= 1");
  fs::create_directories(dir);
  Rng top(seed);
  std::ostringstream manifest;
  char name[64];
  for (int i = 0; i < count; ++i) {
    ShapeSpec spec = base;
    spec.seed = top.split(static_cast<std::uint64_t>(i)).seed();
    ShapePair pair = generate_pair(spec);
    std::snprintf(name, sizeof(name), "pair_%05d", i);
    const std::string stem = std::string(name);
    save_xyz(dir + "/" + stem + "_src.xyz", pair.source);
    save_xyz(dir + "/" + stem + "_tgt.xyz", pair.target);
    {
      std::ostringstream body;
      for (int g : pair.gt) body << g << "\n";
      const std::string path = dir + "/" + stem + "_gt.txt";
      const std::string tmp = path + ".tmp";
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot open " + tmp);
      out << body.str();
      out.close();
      if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename " + tmp);
    }
    manifest << stem << "_src.xyz\t" << stem << "_tgt.xyz\t" << stem << "_gt.txt\n";
  }
  const std::string mpath = dir + "/manifest.tsv";
  const std::string tmp = mpath + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp);
    out << manifest.str();
  }
  if (std::rename(tmp.c_str(), mpath.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp);
  return mpath;
}

LoadedPair load_pair(const std::string& src_path, const std::string& tgt_path,
                     const std::string& gt_path_or_dash) {
  LoadedPair pair;
  pair.source = load_xyz(src_path);
  pair.target = load_xyz(tgt_path);
  if (pair.source.rows() == 0) throw std::runtime_error(src_path + ": empty cloud");
  if (gt_path_or_dash != "-")
    pair.gt = parse_gt(gt_path_or_dash, static_cast<int>(pair.target.rows()));
  return pair;
}

std::vector<LoadedPair> load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open " + manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& p) {
    return p == "-" || fs::path(p).is_absolute() ? p : (root / p).string();
  };
  std::vector<LoadedPair> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string src, tgt, gt;
    if (!std::getline(ss, src, '\t') || !std::getline(ss, tgt, '\t') || !std::getline(ss, gt))
      throw std::runtime_error(manifest_path + ":" + std::to_string(lineno) +
                               ": expected three tab-separated fields");
    if (!gt.empty() && gt.back() == '\r') gt.pop_back();
    pairs.push_back(load_pair(resolve(src), resolve(tgt), resolve(gt)));
  }
  if (pairs.empty()) throw std::runtime_error(manifest_path + ": no pairs listed");
  return pairs;
}

}  // namespace eqlf
