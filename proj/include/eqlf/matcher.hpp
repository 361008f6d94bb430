#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "eqlf/equinet.hpp"
#include "eqlf/geometry.hpp"
#include "eqlf/tensor.hpp"

namespace eqlf {

// Descriptor widths of the five EdgeConv stages; the last one is the final
// feature dimension.
inline constexpr std::array<int, 5> kConvChannels{64, 64, 128, 256, 512};

struct EquiShapeConfig {
  CrossGvpConfig net;   // equivariant front end
  int d_t = 64;         // width of the frame-projection perceptron
  int k_latent = 10;    // latent neighbours for soft construction
  double lambda_cc = 1.0;
  double lambda_sc = 10.0;
  double lambda_m = 1.0;
  double alpha = 0.01;  // squared-distance scale of the mapping weights
};

struct EdgeConvLayer {
  Tensor W, b;           // [c_out, 2*c_in], [c_out]
  Tensor gamma, beta;    // per-channel batch-norm affine
};

// The whole trainable model: equivariant front end plus the invariant
// descriptor head.
struct EquiShapeParams {
  EquiShapeConfig config;
  CrossGvpParams net;
  Tensor T1, tb1, T2, tb2;          // frame-projection perceptron 3 -> d_t -> d_t
  std::vector<EdgeConvLayer> conv;  // the five EdgeConv stages
};

EquiShapeParams make_equishape(const EquiShapeConfig& config);
std::vector<std::pair<std::string, Tensor*>> named_params(EquiShapeParams& params);

// Hard correspondence: match[i] is the target index chosen for source point i.
struct Correspondence {
  std::vector<int> match;
};

struct LossBreakdown {
  double cd_cross_x = 0, cd_cross_y = 0;  // cloud vs cross-construction
  double cd_self_x = 0, cd_self_y = 0;    // cloud vs self-construction
  double map_x = 0, map_y = 0;            // neighbourhood mapping penalties
  double total = 0;
};

struct LossResult {
  LossBreakdown parts;
  Tensor total;  // differentiable scalar; parts.total is its value
};

// Per-shape products of a full forward pass. The (u, v) pair is the
// refinement injection point: re-running the stage-two half with displaced
// copies reproduces exactly the same features.
struct ForwardResult {
  LrfVectors lrf_x, lrf_y;
  FrameTensors frames_x, frames_y;
  Tensor feat_x, feat_y;  // [n, 512], rows L2-normalized
};

struct StageTwoResult {
  FrameTensors frames_x, frames_y;
  Tensor feat_x, feat_y;
};

// Neighbour features projected into per-point frames, passed through a shared
// perceptron and max-pooled: invariant under a common rigid motion of frames
// and cloud.
Tensor lrf_transform(const FrameTensors& frames, const Tensor& xyz, const KnnGraph& graph,
                     const EquiShapeParams& params);

// Brute-force k nearest neighbours in feature space (row = one point).
KnnGraph feature_knn(const Tensor& feats, int k);

// Five EdgeConv stages with dynamic feature-space graphs, per-forward batch
// normalization, leaky_relu(0.2) and neighbour max-pooling; output rows
// L2-normalized.
Tensor edgeconv_extractor(const Tensor& h, int k, const EquiShapeParams& params);

// Handcrafted frames as constant tensors, for the covariance ablation.
FrameTensors frames_to_tensors(const LrfSet& frames);

// Cosine similarities: [n,c] x [m,c] -> [n,m], stabilized by 1e-12.
Tensor similarity(const Tensor& feat_x, const Tensor& feat_y);

// Row-wise argmax, ties to the lowest index.
Correspondence hard_match(const Tensor& S);

// Differentiable construction: each source row softmaxes the similarities of
// its k_latent most-similar target points (discrete selection fixed per call)
// and mixes their coordinates. exclude_diagonal drops entry (i,i) from the
// candidates, for self-construction on a square S.
Tensor soft_construct(const Tensor& S, const Tensor& target, int k_latent,
                      bool exclude_diagonal = false);

// Bidirectional mean of squared nearest-neighbour distances.
double chamfer(const PointCloud& a, const PointCloud& b);
Tensor chamfer(const Tensor& a, const Tensor& b);  // argmins fixed per call

Tensor construction_loss(const Tensor& x, const Tensor& y, const Tensor& x_cross,
                         const Tensor& y_cross, const Tensor& x_self, const Tensor& y_self,
                         double lambda_cc, double lambda_sc);

// Sum over graph edges of exp(-|x_i - x_l|^2 / alpha) * |yc_i - yc_l|^2.
Tensor mapping_regularizer(const Tensor& x, const Tensor& y_constructed, const KnnGraph& graph_x,
                           double alpha);

// Full training objective from a completed forward pass.
LossResult total_loss(const Tensor& x, const Tensor& y, const Tensor& feat_x,
                      const Tensor& feat_y, const EquiShapeConfig& config);

// Stage one + stage two.
ForwardResult equishape_forward(const Tensor& x, const Tensor& y, const EquiShapeParams& params);
// Stage two alone, from externally supplied LRF vector pairs.
StageTwoResult equishape_stage2(const Tensor& x, const Tensor& y, const LrfVectors& lrf_x,
                                const LrfVectors& lrf_y, const EquiShapeParams& params);

// Fraction of matches within eps * (max pairwise target distance) of the
// ground truth (strict inequality), and the mean distance itself.
double accuracy(const Correspondence& match, const std::vector<int>& gt, const PointCloud& target,
                double eps);
double avg_error(const Correspondence& match, const std::vector<int>& gt,
                 const PointCloud& target);

// One line per source point: "i j* s_ij*".
void save_correspondence(const std::string& path, const Correspondence& match, const Tensor& S);

// Color per source point encoding its matched target index on a fixed HSV
// ramp; pass through save_xyz_colored.
std::vector<Eigen::Vector3d> index_color_ramp(const std::vector<int>& idx, int n);

}  // namespace eqlf
