#include "eqlf/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace eqlf {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Tensor xavier(int out, int in, Rng& rng) {
  const double a = std::sqrt(6.0 / (in + out));
  return Tensor::uniform({out, in}, rng, -a, a, true);
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

// Normalize each channel over every row of the block, then shift and scale.
// Statistics are recomputed per call, so inference is deterministic and
// single pairs need no running averages.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const Tensor m = mean(x, 0);
  const Tensor centered = sub(x, m);
  const Tensor var = mean(mul(centered, centered), 0);
  const Tensor xhat = div(centered, sqrt(add(var, 1e-5)));
  return add(mul(xhat, gamma), beta);
}

// Nearest row of b for every row of a, by squared distance, ties to the
// lowest index.
std::vector<int> nearest_rows(const Tensor& a, const Tensor& b) {
  const int n = a.dim(0);
  const int m = b.dim(0);
  const int c = a.dim(1);
  const std::vector<double>& av = a.values();
  const std::vector<double>& bv = b.values();
  std::vector<int> nn(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (int t = 0; t < c; ++t) {
        const double diff = av[static_cast<std::size_t>(i) * c + t] -
                            bv[static_cast<std::size_t>(j) * c + t];
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        arg = j;
      }
    }
    nn[static_cast<std::size_t>(i)] = arg;
  }
  return nn;
}

Tensor mean_sq_to_nearest(const Tensor& a, const Tensor& b) {
  const Tensor diff = sub(a, gather(b, nearest_rows(a, b)));
  return mul(sum_all(mul(diff, diff)), 1.0 / a.dim(0));
}

}  // namespace

EquiShapeParams make_equishape(const EquiShapeConfig& config) {
  if (config.d_t < 1) fail("equishape config: d_t must be >= 1");
  if (config.k_latent < 1) fail("equishape config: k_latent must be >= 1");
  if (config.alpha <= 0.0) fail("equishape config: alpha must be positive");
  if (config.lambda_cc < 0.0 || config.lambda_sc < 0.0 || config.lambda_m < 0.0)
    fail("equishape config: loss weights must be non-negative");
  EquiShapeParams p;
  p.config = config;
  p.net = make_cross_gvp(config.net);
  Rng rng = Rng(config.net.seed).split(1);
  p.T1 = xavier(config.d_t, 3, rng);
  p.tb1 = Tensor::zeros({config.d_t}, true);
  p.T2 = xavier(config.d_t, config.d_t, rng);
  p.tb2 = Tensor::zeros({config.d_t}, true);
  int c_in = config.d_t;
  for (int c_out : kConvChannels) {
    EdgeConvLayer layer;
    layer.W = xavier(c_out, 2 * c_in, rng);
    layer.b = Tensor::zeros({c_out}, true);
    layer.gamma = Tensor::constant({c_out}, 1.0).leaf();
    layer.beta = Tensor::zeros({c_out}, true);
    p.conv.push_back(std::move(layer));
    c_in = c_out;
  }
  return p;
}

std::vector<std::pair<std::string, Tensor*>> named_params(EquiShapeParams& params) {
  auto out = named_params(params.net);
  out.emplace_back("frame_mlp.W1", &params.T1);
  out.emplace_back("frame_mlp.b1", &params.tb1);
  out.emplace_back("frame_mlp.W2", &params.T2);
  out.emplace_back("frame_mlp.b2", &params.tb2);
  for (std::size_t l = 0; l < params.conv.size(); ++l) {
    const std::string base = "conv" + std::to_string(l);
    out.emplace_back(base + ".W", &params.conv[l].W);
    out.emplace_back(base + ".b", &params.conv[l].b);
    out.emplace_back(base + ".gamma", &params.conv[l].gamma);
    out.emplace_back(base + ".beta", &params.conv[l].beta);
  }
  return out;
}

Tensor lrf_transform(const FrameTensors& frames, const Tensor& xyz, const KnnGraph& graph,
                     const EquiShapeParams& params) {
  if (xyz.dim(0) != graph.n) fail("lrf_transform: cloud and graph sizes differ");
  if (frames.e1.dim(0) != graph.n) fail("lrf_transform: frames and graph sizes differ");
  const int n = graph.n;
  const int k = graph.k;
  const std::vector<int> rows_i = self_rows(graph);
  const Tensor off = sub(gather(xyz, graph.nbr), gather(xyz, rows_i));
  const auto dot = [&](const Tensor& axis) {
    return reshape(sum(mul(gather(axis, rows_i), off), 1), {n * k, 1});
  };
  const Tensor local = concat({dot(frames.e1), dot(frames.e2), dot(frames.e3)}, 1);
  const Tensor lifted = mlp2(local, params.T1, params.tb1, params.T2, params.tb2);
  return max(reshape(lifted, {n, k, params.config.d_t}), 1);
}

KnnGraph feature_knn(const Tensor& feats, int k) {
  const int n = feats.dim(0);
  const int c = feats.dim(1);
  if (k < 1 || k >= n)
    fail("feature_knn: need 1 <= k < n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
  const std::vector<double>& v = feats.values();
  KnnGraph g;
  g.n = n;
  g.k = k;
  g.nbr.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(k));
  std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(n) - 1);
  for (int i = 0; i < n; ++i) {
    std::size_t w = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (int t = 0; t < c; ++t) {
        const double diff =
            v[static_cast<std::size_t>(i) * c + t] - v[static_cast<std::size_t>(j) * c + t];
        d2 += diff * diff;
      }
      cand[w++] = {d2, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int j = 0; j < k; ++j) g.nbr[static_cast<std::size_t>(i) * k + j] = cand[static_cast<std::size_t>(j)].second;
  }
  return g;
}

Tensor edgeconv_extractor(const Tensor& h, int k, const EquiShapeParams& params) {
  const int n = h.dim(0);
  if (n < k + 1) fail("edgeconv_extractor: need at least k+1 points");
  Tensor cur = h;
  for (const EdgeConvLayer& layer : params.conv) {
    // The graph follows the features: recomputed from the current layer's
    // input, outside the tape.
    const KnnGraph g = feature_knn(cur, k);
    const std::vector<int> rows_i = self_rows(g);
    // The edge lift [h_i | h_j - h_i] W^T splits as h_i (W1 - W2)^T +
    // h_j W2^T, so the two matmuls run on n rows instead of n*k and the
    // per-edge work is just gathers and an add.
    const int c_in = cur.dim(1);
    const Tensor W1 = slice(layer.W, 1, 0, c_in);
    const Tensor W2 = slice(layer.W, 1, c_in, 2 * c_in);
    const Tensor self_part = matmul(cur, transpose(sub(W1, W2)));
    const Tensor nbr_part = matmul(cur, transpose(W2));
    const Tensor lin =
        add(add(gather(self_part, rows_i), gather(nbr_part, g.nbr)), layer.b);
    const Tensor act = leaky_relu(batch_norm(lin, layer.gamma, layer.beta), 0.2);
    cur = max(reshape(act, {n, k, layer.W.dim(0)}), 1);
  }
  return div(cur, add(reshape(row_l2_norm(cur), {n, 1}), 1e-12));
}

FrameTensors frames_to_tensors(const LrfSet& frames) {
  const int n = frames.n();
  std::vector<double> e1(static_cast<std::size_t>(n) * 3);
  std::vector<double> e2(e1.size());
  std::vector<double> e3(e1.size());
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      e1[static_cast<std::size_t>(i) * 3 + c] = frames.O[static_cast<std::size_t>(i)](c, 0);
      e2[static_cast<std::size_t>(i) * 3 + c] = frames.O[static_cast<std::size_t>(i)](c, 1);
      e3[static_cast<std::size_t>(i) * 3 + c] = frames.O[static_cast<std::size_t>(i)](c, 2);
    }
  return {Tensor({n, 3}, std::move(e1)), Tensor({n, 3}, std::move(e2)),
          Tensor({n, 3}, std::move(e3))};
}

Tensor similarity(const Tensor& feat_x, const Tensor& feat_y) {
  if (feat_x.dim(1) != feat_y.dim(1)) fail("similarity: feature widths differ");
  const Tensor nx = reshape(row_l2_norm(feat_x), {feat_x.dim(0), 1});
  const Tensor ny = reshape(row_l2_norm(feat_y), {1, feat_y.dim(0)});
  return div(matmul(feat_x, transpose(feat_y)), add(matmul(nx, ny), 1e-12));
}

Correspondence hard_match(const Tensor& S) {
  const int n = S.dim(0);
  const int m = S.dim(1);
  const std::vector<double>& v = S.values();
  Correspondence c;
  c.match.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int arg = 0;
    double best = v[static_cast<std::size_t>(i) * m];
    for (int j = 1; j < m; ++j)
      if (v[static_cast<std::size_t>(i) * m + j] > best) {
        best = v[static_cast<std::size_t>(i) * m + j];
        arg = j;
      }
    c.match[static_cast<std::size_t>(i)] = arg;
  }
  return c;
}

Tensor soft_construct(const Tensor& S, const Tensor& target, int k_latent, bool exclude_diagonal) {
  const int n = S.dim(0);
  const int m = S.dim(1);
  if (target.dim(0) != m) fail("soft_construct: similarity and target sizes differ");
  if (exclude_diagonal && n != m) fail("soft_construct: diagonal exclusion needs a square matrix");
  const int avail = exclude_diagonal ? m - 1 : m;
  if (k_latent < 1 || k_latent > avail)
    fail("soft_construct: k_latent " + std::to_string(k_latent) + " outside [1," +
         std::to_string(avail) + "]");

  // Choose each row's latent neighbourhood from the raw values; only the
  // selected entries take part in the differentiable softmax.
  const std::vector<double>& sv = S.values();
  std::vector<int> flat;
  std::vector<int> sel;
  flat.reserve(static_cast<std::size_t>(n) * k_latent);
  sel.reserve(flat.capacity());
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int j = 0; j < m; ++j) {
      if (exclude_diagonal && j == i) continue;
      cand.emplace_back(-sv[static_cast<std::size_t>(i) * m + j], j);
    }
    std::partial_sort(cand.begin(), cand.begin() + k_latent, cand.end());
    for (int j = 0; j < k_latent; ++j) {
      flat.push_back(i * m + cand[static_cast<std::size_t>(j)].second);
      sel.push_back(cand[static_cast<std::size_t>(j)].second);
    }
  }

  const Tensor w =
      softmax(reshape(gather(reshape(S, {n * m, 1}), flat), {n, k_latent}), 1);
  const Tensor picked = gather(target, sel);
  std::vector<Tensor> coords;
  for (int c = 0; c < 3; ++c) {
    const Tensor col = reshape(slice(picked, 1, c, c + 1), {n, k_latent});
    coords.push_back(reshape(sum(mul(w, col), 1), {n, 1}));
  }
  return concat(coords, 1);
}

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.rows() == 0 || b.rows() == 0) fail("chamfer: empty cloud");
  double total = 0.0;
  double acc = 0.0;
  for (int i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < b.rows(); ++j)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    acc += best;
  }
  total += acc / static_cast<double>(a.rows());
  acc = 0.0;
  for (int j = 0; j < b.rows(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < a.rows(); ++i)
      best = std::min(best, (b.row(j) - a.row(i)).squaredNorm());
    acc += best;
  }
  return total + acc / static_cast<double>(b.rows());
}

Tensor chamfer(const Tensor& a, const Tensor& b) {
  if (a.dim(1) != 3 || b.dim(1) != 3) fail("chamfer: expected [n,3] tensors");
  return add(mean_sq_to_nearest(a, b), mean_sq_to_nearest(b, a));
}

Tensor construction_loss(const Tensor& x, const Tensor& y, const Tensor& x_cross,
                         const Tensor& y_cross, const Tensor& x_self, const Tensor& y_self,
                         double lambda_cc, double lambda_sc) {
  const Tensor cross = add(chamfer(y, y_cross), chamfer(x, x_cross));
  const Tensor self = add(chamfer(y, y_self), chamfer(x, x_self));
  return add(mul(cross, lambda_cc), mul(self, lambda_sc));
}

Tensor mapping_regularizer(const Tensor& x, const Tensor& y_constructed, const KnnGraph& graph_x,
                           double alpha) {
  if (alpha <= 0.0) fail("mapping_regularizer: alpha must be positive");
  if (x.dim(0) != graph_x.n || y_constructed.dim(0) != graph_x.n)
    fail("mapping_regularizer: graph does not cover the clouds");
  const std::vector<int> rows_i = self_rows(graph_x);
  const Tensor dx = sub(gather(x, rows_i), gather(x, graph_x.nbr));
  const Tensor w = exp(mul(sum(mul(dx, dx), 1), -1.0 / alpha));
  const Tensor dy = sub(gather(y_constructed, rows_i), gather(y_constructed, graph_x.nbr));
  return sum_all(mul(w, sum(mul(dy, dy), 1)));
}

LossResult total_loss(const Tensor& x, const Tensor& y, const Tensor& feat_x,
                      const Tensor& feat_y, const EquiShapeConfig& config) {
  const KnnGraph gx = knn_graph(tensor_to_cloud(x), config.net.k);
  const KnnGraph gy = knn_graph(tensor_to_cloud(y), config.net.k);

  const Tensor s_xy = similarity(feat_x, feat_y);
  const Tensor y_cross = soft_construct(s_xy, y, config.k_latent);
  const Tensor x_cross = soft_construct(transpose(s_xy), x, config.k_latent);
  const Tensor x_self = soft_construct(similarity(feat_x, feat_x), x, config.k_latent, true);
  const Tensor y_self = soft_construct(similarity(feat_y, feat_y), y, config.k_latent, true);

  const Tensor ccx = chamfer(x, x_cross);
  const Tensor ccy = chamfer(y, y_cross);
  const Tensor csx = chamfer(x, x_self);
  const Tensor csy = chamfer(y, y_self);
  const Tensor mx = mapping_regularizer(x, y_cross, gx, config.alpha);
  const Tensor my = mapping_regularizer(y, x_cross, gy, config.alpha);

  LossResult r;
  r.total = add(add(mul(add(ccx, ccy), config.lambda_cc), mul(add(csx, csy), config.lambda_sc)),
                mul(add(mx, my), config.lambda_m));
  r.parts.cd_cross_x = ccx.value();
  r.parts.cd_cross_y = ccy.value();
  r.parts.cd_self_x = csx.value();
  r.parts.cd_self_y = csy.value();
  r.parts.map_x = mx.value();
  r.parts.map_y = my.value();
  r.parts.total = r.total.value();
  return r;
}

StageTwoResult equishape_stage2(const Tensor& x, const Tensor& y, const LrfVectors& lrf_x,
                                const LrfVectors& lrf_y, const EquiShapeParams& params) {
  const int k = params.config.net.k;
  StageTwoResult r;
  r.frames_x = gram_schmidt_stable(lrf_x.u, lrf_x.v);
  r.frames_y = gram_schmidt_stable(lrf_y.u, lrf_y.v);
  const KnnGraph gx = knn_graph(tensor_to_cloud(x), k);
  const KnnGraph gy = knn_graph(tensor_to_cloud(y), k);
  r.feat_x = edgeconv_extractor(lrf_transform(r.frames_x, x, gx, params), k, params);
  r.feat_y = edgeconv_extractor(lrf_transform(r.frames_y, y, gy, params), k, params);
  return r;
}

ForwardResult equishape_forward(const Tensor& x, const Tensor& y, const EquiShapeParams& params) {
  ForwardResult r;
  auto [lx, ly] = cross_gvp(x, y, params.net);
  r.lrf_x = lx;
  r.lrf_y = ly;
  StageTwoResult s2 = equishape_stage2(x, y, r.lrf_x, r.lrf_y, params);
  r.frames_x = std::move(s2.frames_x);
  r.frames_y = std::move(s2.frames_y);
  r.feat_x = std::move(s2.feat_x);
  r.feat_y = std::move(s2.feat_y);
  return r;
}

double accuracy(const Correspondence& match, const std::vector<int>& gt, const PointCloud& target,
                double eps) {
  if (eps < 0.0 || eps > 1.0) fail("accuracy: eps must lie in [0,1]");
  if (match.match.size() != gt.size()) fail("accuracy: match and ground truth sizes differ");
  if (gt.empty()) fail("accuracy: empty correspondence");
  const double d = max_diameter(target);
  int hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double err = (target.row(match.match[i]) - target.row(gt[i])).norm();
    if (err < eps * d) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

double avg_error(const Correspondence& match, const std::vector<int>& gt,
                 const PointCloud& target) {
  if (match.match.size() != gt.size()) fail("avg_error: match and ground truth sizes differ");
  if (gt.empty()) fail("avg_error: empty correspondence");
  double acc = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    acc += (target.row(match.match[i]) - target.row(gt[i])).norm();
  return acc / static_cast<double>(gt.size());
}

void save_correspondence(const std::string& path, const Correspondence& match, const Tensor& S) {
  const std::string tmp = path + ".tmp";
  std::ofstream out(tmp, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + tmp);
  char line[96];
  for (std::size_t i = 0; i < match.match.size(); ++i) {
    const int j = match.match[i];
    std::snprintf(line, sizeof(line), "%zu %d %.12g\n", i, j, S.at({static_cast<int>(i), j}));
    out << line;
  }
  out.close();
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

std::vector<Eigen::Vector3d> index_color_ramp(const std::vector<int>& idx, int n) {
  std::vector<Eigen::Vector3d> rgb;
  rgb.reserve(idx.size());
  for (int j : idx) {
    const double h = 6.0 * static_cast<double>(j % std::max(n, 1)) / std::max(n, 1);
    const int sector = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double v = 0.95, s = 0.85;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
      case 0: rgb.emplace_back(v, t, p); break;
      case 1: rgb.emplace_back(q, v, p); break;
      case 2: rgb.emplace_back(p, v, t); break;
      case 3: rgb.emplace_back(p, q, v); break;
      case 4: rgb.emplace_back(t, p, v); break;
      default: rgb.emplace_back(v, p, q); break;
    }
  }
  return rgb;
}

}  // namespace eqlf
