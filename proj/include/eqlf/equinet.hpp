#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eqlf/geometry.hpp"
#include "eqlf/tensor.hpp"

namespace eqlf {

// Vector channels in structure-of-arrays form: three [n, nu] matrices, one per
// spatial coordinate, so channel mixing is an ordinary matmul per coordinate
// and a rotation acts by recombining the three matrices.
struct VecChannels {
  Tensor x, y, z;

  int rows() const { return x.dim(0); }
  int channels() const { return x.dim(1); }
};

// Per-node network state: invariant scalars plus equivariant vectors.
struct NodeState {
  Tensor h;       // [n, d]
  VecChannels Z;  // [n, nu] per coordinate
};

// Relative features of the edges of a kNN graph, one row per (i, j) slot in
// graph order: off = x_j - x_i and dist = |off|.
struct EdgeFeatures {
  Tensor dist;      // [n*k, 1]
  VecChannels off;  // [n*k, 1] per coordinate
};

// One geometric vector perceptron. Vector channels are only ever mixed
// linearly (no bias, no coordinate-wise nonlinearity) and modulated by a
// sigmoid gate computed from the invariant scalar path; that discipline is
// what keeps the output equivariant.
struct GvpParams {
  Tensor Wh;   // [nu_hid, v_in]   vector channel mixing
  Tensor Wmu;  // [v_out, nu_hid]  vector output
  Tensor Ws;   // [s_out, s_in + nu_hid]
  Tensor bs;   // [s_out]
  Tensor Wg;   // [v_out, s_out]   per-channel gate
  Tensor bg;   // [v_out]
};

struct CrossGvpConfig {
  int L = 3;    // graph-conv rounds
  int d = 64;   // scalar channels
  int nu = 16;  // vector channels
  int k = 27;   // graph degree
  std::uint64_t seed = 0;
};

// One round of the network; a single copy of these weights serves both
// shapes.
struct LayerParams {
  GvpParams message;          // [h_i|h_j|d_ij], [Z_i;Z_j;off] -> (d, nu)
  GvpParams update;           // node-wise (d, nu) -> (d, nu)
  Tensor Wq1, bq1, Wq2, bq2;  // query perceptron d->d->d
  Tensor Wk1, bk1, Wk2, bk2;  // key perceptron d->d->d
  Tensor Wv;                  // value projection [d, d]
  Tensor P, bp;               // fusion [d, 2d] + [d]
};

struct CrossGvpParams {
  CrossGvpConfig config;
  std::vector<LayerParams> layers;
  GvpParams head;  // (d, nu) -> (d, 2): the two output vector channels
};

// Equivariant frame vector pair for one cloud.
struct LrfVectors {
  Tensor u, v;  // each [n, 3]
};

// Scalar channels after every round, for inspection.
struct LayerTrace {
  std::vector<Tensor> h_x, h_y;
};

// Seeded Xavier-uniform weights, zero biases, every tensor a gradient leaf.
CrossGvpParams make_cross_gvp(const CrossGvpConfig& config);

// Parameters in a fixed traversal order under stable dotted names; the order
// defines the optimizer and checkpoint layout.
std::vector<std::pair<std::string, Tensor*>> named_params(CrossGvpParams& params);

// h = 0, Z = coordinates minus their centroid (one vector channel).
NodeState init_states(const Tensor& xyz, int d);

EdgeFeatures edge_features(const Tensor& xyz, const KnnGraph& graph);

std::pair<Tensor, VecChannels> gvp(const Tensor& h, const VecChannels& Z, const GvpParams& p);

// Message passing over the graph (mean aggregation) followed by a node-wise
// update, both residual. first_layer widens the single positional vector
// channel to nu by assignment instead of a residual sum.
NodeState gvp_g_layer(const NodeState& state, const KnnGraph& graph, const EdgeFeatures& edges,
                      const LayerParams& lp, bool first_layer);

// Row-stochastic attention of every X node over all Y nodes and vice versa.
std::pair<Tensor, Tensor> cross_attention_weights(const Tensor& h_x, const Tensor& h_y,
                                                  const LayerParams& lp);
// Attention-weighted value summaries: mu_x gathered over Y, mu_y over X. Only
// the invariant scalar channels ever cross between the shapes.
std::pair<Tensor, Tensor> cross_attention(const Tensor& h_x, const Tensor& h_y,
                                          const LayerParams& lp);
// Concatenate the summary onto the local scalars and project back to width d.
Tensor fuse(const Tensor& h, const Tensor& mu, const LayerParams& lp);

// The full network: L rounds of per-shape graph convolution, scalar-channel
// cross-attention and fusion, then a head emitting two vector channels per
// point. Requires at least k+1 points per cloud.
std::pair<LrfVectors, LrfVectors> cross_gvp(const Tensor& x_xyz, const Tensor& y_xyz,
                                            const CrossGvpParams& params,
                                            LayerTrace* trace = nullptr);

}  // namespace eqlf
