#include "eqlf/equinet.hpp"

#include <cmath>
#include <functional>

namespace eqlf {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Tensor xavier(int out, int in, Rng& rng) {
  const double a = std::sqrt(6.0 / (in + out));
  return Tensor::uniform({out, in}, rng, -a, a, true);
}

GvpParams make_gvp(int s_in, int s_out, int v_in, int v_out, Rng& rng) {
  const int hid = std::max(v_in, v_out);
  GvpParams p;
  p.Wh = xavier(hid, v_in, rng);
  p.Wmu = xavier(v_out, hid, rng);
  p.Ws = xavier(s_out, s_in + hid, rng);
  p.bs = Tensor::zeros({s_out}, true);
  p.Wg = xavier(v_out, s_out, rng);
  p.bg = Tensor::zeros({v_out}, true);
  return p;
}

VecChannels per_coord(const VecChannels& Z, const std::function<Tensor(const Tensor&)>& f) {
  return {f(Z.x), f(Z.y), f(Z.z)};
}

// Per-(row, channel) norms over the three coordinate matrices.
Tensor channel_norms(const VecChannels& V) {
  const int n = V.rows();
  const int c = V.channels();
  const std::vector<int> flat{n * c, 1};
  Tensor stacked = concat({reshape(V.x, flat), reshape(V.y, flat), reshape(V.z, flat)}, 1);
  return reshape(row_l2_norm(stacked), {n, c});
}

Tensor mlp2(const Tensor& in, const Tensor& W1, const Tensor& b1, const Tensor& W2,
            const Tensor& b2) {
  const Tensor hidden = leaky_relu(add(matmul(in, transpose(W1)), b1));
  return leaky_relu(add(matmul(hidden, transpose(W2)), b2));
}

std::vector<int> self_rows(const KnnGraph& graph) {
  std::vector<int> rows(static_cast<std::size_t>(graph.n) * static_cast<std::size_t>(graph.k));
  for (int i = 0; i < graph.n; ++i)
    for (int j = 0; j < graph.k; ++j)
      rows[static_cast<std::size_t>(i) * graph.k + j] = i;
  return rows;
}

}  // namespace

CrossGvpParams make_cross_gvp(const CrossGvpConfig& config) {
  if (config.L < 1) fail("cross_gvp config: L must be >= 1");
  if (config.d < 1) fail("cross_gvp config: d must be >= 1");
  if (config.nu < 2) fail("cross_gvp config: nu must be >= 2");
  if (config.k < 1) fail("cross_gvp config: k must be >= 1");
  Rng rng(config.seed);
  const int d = config.d;
  const int nu = config.nu;
  CrossGvpParams params;
  params.config = config;
  for (int l = 0; l < config.L; ++l) {
    LayerParams lp;
    const int v_in = l == 0 ? 3 : 2 * nu + 1;  // [Z_i ; Z_j ; off]
    lp.message = make_gvp(2 * d + 1, d, v_in, nu, rng);
    lp.update = make_gvp(d, d, nu, nu, rng);
    lp.Wq1 = xavier(d, d, rng);
    lp.bq1 = Tensor::zeros({d}, true);
    lp.Wq2 = xavier(d, d, rng);
    lp.bq2 = Tensor::zeros({d}, true);
    lp.Wk1 = xavier(d, d, rng);
    lp.bk1 = Tensor::zeros({d}, true);
    lp.Wk2 = xavier(d, d, rng);
    lp.bk2 = Tensor::zeros({d}, true);
    lp.Wv = xavier(d, d, rng);
    lp.P = xavier(d, 2 * d, rng);
    lp.bp = Tensor::zeros({d}, true);
    params.layers.push_back(std::move(lp));
  }
  params.head = make_gvp(d, d, nu, 2, rng);
  return params;
}

std::vector<std::pair<std::string, Tensor*>> named_params(CrossGvpParams& params) {
  std::vector<std::pair<std::string, Tensor*>> out;
  const auto add_gvp = [&out](const std::string& prefix, GvpParams& g) {
    out.emplace_back(prefix + ".Wh", &g.Wh);
    out.emplace_back(prefix + ".Wmu", &g.Wmu);
    out.emplace_back(prefix + ".Ws", &g.Ws);
    out.emplace_back(prefix + ".bs", &g.bs);
    out.emplace_back(prefix + ".Wg", &g.Wg);
    out.emplace_back(prefix + ".bg", &g.bg);
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l);
    LayerParams& lp = params.layers[l];
    add_gvp(base + ".message", lp.message);
    add_gvp(base + ".update", lp.update);
    out.emplace_back(base + ".Wq1", &lp.Wq1);
    out.emplace_back(base + ".bq1", &lp.bq1);
    out.emplace_back(base + ".Wq2", &lp.Wq2);
    out.emplace_back(base + ".bq2", &lp.bq2);
    out.emplace_back(base + ".Wk1", &lp.Wk1);
    out.emplace_back(base + ".bk1", &lp.bk1);
    out.emplace_back(base + ".Wk2", &lp.Wk2);
    out.emplace_back(base + ".bk2", &lp.bk2);
    out.emplace_back(base + ".Wv", &lp.Wv);
    out.emplace_back(base + ".P", &lp.P);
    out.emplace_back(base + ".bp", &lp.bp);
  }
  add_gvp("head", params.head);
  return out;
}

NodeState init_states(const Tensor& xyz, int d) {
  if (xyz.ndim() != 2 || xyz.dim(1) != 3) fail("init_states: expected an [n,3] tensor");
  const Tensor centered = sub(xyz, mean(xyz, 0));
  NodeState s;
  s.h = Tensor::zeros({xyz.dim(0), d});
  s.Z = {slice(centered, 1, 0, 1), slice(centered, 1, 1, 2), slice(centered, 1, 2, 3)};
  return s;
}

EdgeFeatures edge_features(const Tensor& xyz, const KnnGraph& graph) {
  if (xyz.dim(0) != graph.n) fail("edge_features: cloud and graph sizes differ");
  const Tensor off = sub(gather(xyz, graph.nbr), gather(xyz, self_rows(graph)));
  EdgeFeatures e;
  e.off = {slice(off, 1, 0, 1), slice(off, 1, 1, 2), slice(off, 1, 2, 3)};
  e.dist = reshape(row_l2_norm(off), {graph.n * graph.k, 1});
  return e;
}

std::pair<Tensor, VecChannels> gvp(const Tensor& h, const VecChannels& Z, const GvpParams& p) {
  if (h.dim(0) != Z.rows()) fail("gvp: scalar and vector row counts differ");
  if (Z.channels() != p.Wh.dim(1))
    fail("gvp: " + std::to_string(Z.channels()) + " vector channels, weights expect " +
         std::to_string(p.Wh.dim(1)));
  if (h.dim(1) + p.Wh.dim(0) != p.Ws.dim(1))
    fail("gvp: " + std::to_string(h.dim(1)) + " scalar channels, weights expect " +
         std::to_string(p.Ws.dim(1) - p.Wh.dim(0)));
  const Tensor WhT = transpose(p.Wh);
  const VecChannels V = per_coord(Z, [&](const Tensor& c) { return matmul(c, WhT); });
  const Tensor s = leaky_relu(add(matmul(concat({h, channel_norms(V)}, 1), transpose(p.Ws)), p.bs));
  const Tensor gate = sigmoid(add(matmul(s, transpose(p.Wg)), p.bg));
  const Tensor WmuT = transpose(p.Wmu);
  VecChannels Zp = per_coord(V, [&](const Tensor& c) { return mul(matmul(c, WmuT), gate); });
  return {s, std::move(Zp)};
}

NodeState gvp_g_layer(const NodeState& state, const KnnGraph& graph, const EdgeFeatures& edges,
                      const LayerParams& lp, bool first_layer) {
  if (state.h.dim(0) != graph.n) fail("gvp_g_layer: state and graph sizes differ");
  const int n = graph.n;
  const int k = graph.k;
  const std::vector<int> rows_i = self_rows(graph);

  const Tensor mh_in = concat({gather(state.h, rows_i), gather(state.h, graph.nbr), edges.dist}, 1);
  const auto edge_stack = [&](const Tensor& Zc, const Tensor& off_c) {
    return concat({gather(Zc, rows_i), gather(Zc, graph.nbr), off_c}, 1);
  };
  const VecChannels mz_in{edge_stack(state.Z.x, edges.off.x), edge_stack(state.Z.y, edges.off.y),
                          edge_stack(state.Z.z, edges.off.z)};
  auto [mh, mZ] = gvp(mh_in, mz_in, lp.message);

  const auto pool = [&](const Tensor& t) { return mean(reshape(t, {n, k, t.dim(1)}), 1); };
  NodeState mixed;
  mixed.h = add(state.h, pool(mh));
  mixed.Z = first_layer ? per_coord(mZ, pool)
                        : VecChannels{add(state.Z.x, pool(mZ.x)), add(state.Z.y, pool(mZ.y)),
                                      add(state.Z.z, pool(mZ.z))};

  auto [uh, uZ] = gvp(mixed.h, mixed.Z, lp.update);
  return {add(mixed.h, uh),
          {add(mixed.Z.x, uZ.x), add(mixed.Z.y, uZ.y), add(mixed.Z.z, uZ.z)}};
}

std::pair<Tensor, Tensor> cross_attention_weights(const Tensor& h_x, const Tensor& h_y,
                                                  const LayerParams& lp) {
  const Tensor qx = mlp2(h_x, lp.Wq1, lp.bq1, lp.Wq2, lp.bq2);
  const Tensor kx = mlp2(h_x, lp.Wk1, lp.bk1, lp.Wk2, lp.bk2);
  const Tensor qy = mlp2(h_y, lp.Wq1, lp.bq1, lp.Wq2, lp.bq2);
  const Tensor ky = mlp2(h_y, lp.Wk1, lp.bk1, lp.Wk2, lp.bk2);
  return {softmax(matmul(qx, transpose(ky)), 1), softmax(matmul(qy, transpose(kx)), 1)};
}

std::pair<Tensor, Tensor> cross_attention(const Tensor& h_x, const Tensor& h_y,
                                          const LayerParams& lp) {
  auto [ax, ay] = cross_attention_weights(h_x, h_y, lp);
  const Tensor WvT = transpose(lp.Wv);
  return {matmul(ax, matmul(h_y, WvT)), matmul(ay, matmul(h_x, WvT))};
}

Tensor fuse(const Tensor& h, const Tensor& mu, const LayerParams& lp) {
  return leaky_relu(add(matmul(concat({h, mu}, 1), transpose(lp.P)), lp.bp));
}

std::pair<LrfVectors, LrfVectors> cross_gvp(const Tensor& x_xyz, const Tensor& y_xyz,
                                            const CrossGvpParams& params, LayerTrace* trace) {
  const CrossGvpConfig& cfg = params.config;
  if (static_cast<int>(params.layers.size()) != cfg.L)
    fail("cross_gvp: parameter set has " + std::to_string(params.layers.size()) +
         " layers, config says " + std::to_string(cfg.L));
  if (x_xyz.dim(0) < cfg.k + 1 || y_xyz.dim(0) < cfg.k + 1)
    fail("cross_gvp: clouds need at least k+1 = " + std::to_string(cfg.k + 1) + " points");

  // Graph topology is a discrete selection made once per forward pass from the
  // raw coordinates; gradients flow through the edge features, not the
  // neighbour choice.
  const KnnGraph gx = knn_graph(tensor_to_cloud(x_xyz), cfg.k);
  const KnnGraph gy = knn_graph(tensor_to_cloud(y_xyz), cfg.k);
  const EdgeFeatures ex = edge_features(x_xyz, gx);
  const EdgeFeatures ey = edge_features(y_xyz, gy);

  NodeState sx = init_states(x_xyz, cfg.d);
  NodeState sy = init_states(y_xyz, cfg.d);
  for (int l = 0; l < cfg.L; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    sx = gvp_g_layer(sx, gx, ex, lp, l == 0);
    sy = gvp_g_layer(sy, gy, ey, lp, l == 0);
    auto [mux, muy] = cross_attention(sx.h, sy.h, lp);
    sx.h = fuse(sx.h, mux, lp);
    sy.h = fuse(sy.h, muy, lp);
    if (trace != nullptr) {
      trace->h_x.push_back(sx.h);
      trace->h_y.push_back(sy.h);
    }
  }

  const auto head = [&params](const NodeState& s) {
    auto [hs, Zs] = gvp(s.h, s.Z, params.head);
    (void)hs;
    const auto channel = [&Zs](int c) {
      return concat({slice(Zs.x, 1, c, c + 1), slice(Zs.y, 1, c, c + 1),
                     slice(Zs.z, 1, c, c + 1)},
                    1);
    };
    return LrfVectors{channel(0), channel(1)};
  };
  return {head(sx), head(sy)};
}

}  // namespace eqlf
