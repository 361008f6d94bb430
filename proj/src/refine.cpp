#include "eqlf/refine.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>

#include "eqlf/train.hpp"

namespace eqlf {

namespace {

void check_config(const RefineConfig& config) {
  if (config.lr < 0.0) throw std::invalid_argument("refine: lr must be non-negative");
  if (config.steps < 0) throw std::invalid_argument("refine: steps must be non-negative");
}

// Mirrors the thresholds of the strict orthonormalization: a frame is
// degenerate when the first vector (or the second after removing its
// projection) has no usable direction left.
bool frames_degenerate(const Tensor& u, const Tensor& du, const Tensor& v, const Tensor& dv) {
  const int n = u.dim(0);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d a, b;
    for (int c = 0; c < 3; ++c) {
      a(c) = u.at({i, c}) + du.at({i, c});
      b(c) = v.at({i, c}) + dv.at({i, c});
    }
    if (a.norm() <= 1e-8) return true;
    const Eigen::Vector3d e1 = a.normalized();
    if ((b - b.dot(e1) * e1).norm() <= 1e-8) return true;
  }
  return false;
}

struct EvalOut {
  LossResult loss;
  Tensor S;
};

EvalOut eval_delta(const EquiShapeParams& params, const Tensor& x, const Tensor& y,
                   const Tensor& ux, const Tensor& vx, const Tensor& uy, const Tensor& vy,
                   const ResidualLrf& d) {
  const LrfVectors lx{add(ux, d.du_x), add(vx, d.dv_x)};
  const LrfVectors ly{add(uy, d.du_y), add(vy, d.dv_y)};
  const StageTwoResult s2 = equishape_stage2(x, y, lx, ly, params);
  EvalOut out;
  out.loss = total_loss(x, y, s2.feat_x, s2.feat_y, params.config);
  out.S = similarity(s2.feat_x, s2.feat_y);
  return out;
}

TraceRow trace_row(int step, const LossBreakdown& parts) {
  TraceRow row;
  row.step = step;
  row.total = parts.total;
  row.cd_cross = parts.cd_cross_x + parts.cd_cross_y;
  row.cd_self = parts.cd_self_x + parts.cd_self_y;
  row.map = parts.map_x + parts.map_y;
  return row;
}

}  // namespace

RefineResult lrf_refine(const EquiShapeParams& params, const Tensor& x, const Tensor& y,
                        const RefineConfig& config) {
  check_config(config);

  // One base forward with no tape active: the predicted frame vectors come
  // out as plain constants and stay fixed for the rest of the optimization.
  auto [lx, ly] = cross_gvp(x, y, params.net);
  const Tensor ux = lx.u, vx = lx.v, uy = ly.u, vy = ly.v;

  RefineResult r;
  ResidualLrf cur{Tensor::zeros({x.dim(0), 3}, true), Tensor::zeros({x.dim(0), 3}, true),
                  Tensor::zeros({y.dim(0), 3}, true), Tensor::zeros({y.dim(0), 3}, true)};
  ResidualLrf best = cur;

  std::vector<std::pair<std::string, Tensor*>> opt_vars = {{"du_x", &cur.du_x},
                                                           {"dv_x", &cur.dv_x},
                                                           {"du_y", &cur.du_y},
                                                           {"dv_y", &cur.dv_y}};
  AdamState state;
  double best_loss = std::numeric_limits<double>::infinity();

  auto note = [&](int step, const EvalOut& ev) {
    if (!r.stabilized_frames &&
        (frames_degenerate(ux, cur.du_x, vx, cur.dv_x) ||
         frames_degenerate(uy, cur.du_y, vy, cur.dv_y))) {
      r.stabilized_frames = true;
      std::cerr << "warning: degenerate frame at refinement step " << step
                << ", stabilized orthonormalization in effect\n";
    }
    r.trace.push_back(trace_row(step, ev.loss.parts));
    if (ev.loss.parts.total < best_loss) {
      best_loss = ev.loss.parts.total;
      r.best_step = step;
      best = ResidualLrf{cur.du_x.detached(), cur.dv_x.detached(), cur.du_y.detached(),
                         cur.dv_y.detached()};
      r.similarity = ev.S.detached();
      r.match = hard_match(ev.S);
    }
  };

  auto tape = std::make_unique<Tape>();
  EvalOut ev = eval_delta(params, x, y, ux, vx, uy, vy, cur);
  note(0, ev);

  for (int s = 1; s <= config.steps; ++s) {
    const GradientMap g = tape->backward(ev.loss.total);
    std::vector<std::vector<double>> grads(opt_vars.size());
    for (std::size_t i = 0; i < opt_vars.size(); ++i)
      if (g.contains(*opt_vars[i].second)) grads[i] = g.at(*opt_vars[i].second).values();
    adam_step(opt_vars, grads, state, config.lr, config.beta1, config.beta2, config.eps);
    tape.reset();  // consumed; drop before activating the next one
    tape = std::make_unique<Tape>();
    ev = eval_delta(params, x, y, ux, vx, uy, vy, cur);
    note(s, ev);
  }
  tape.reset();

  r.delta = best;
  return r;
}

Correspondence coord_refine_baseline(const Tensor& x, const Tensor& y, const Tensor& feat_x,
                                     const Tensor& feat_y, const EquiShapeConfig& model,
                                     const RefineConfig& config) {
  check_config(config);
  const Correspondence base = hard_match(similarity(feat_x, feat_y));
  if (config.steps == 0) return base;

  const int n = x.dim(0);
  const KnnGraph gx = knn_graph(tensor_to_cloud(x), model.net.k);
  const Tensor z0 = gather(y, base.match).detached();  // matched coordinates
  Tensor offsets = Tensor::zeros({n, 3}, true);
  std::vector<std::pair<std::string, Tensor*>> opt_vars = {{"offsets", &offsets}};
  AdamState state;

  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> best_z = z0.values();
  for (int s = 0; s <= config.steps; ++s) {
    Tape tape;
    const Tensor z = add(z0, offsets);
    const Tensor loss = add(mul(chamfer(y, z), model.lambda_cc),
                            mul(mapping_regularizer(x, z, gx, model.alpha), model.lambda_m));
    if (loss.value() < best_loss) {
      best_loss = loss.value();
      best_z = z.values();
    }
    if (s == config.steps) break;
    const GradientMap g = tape.backward(loss);
    std::vector<std::vector<double>> grads(1);
    if (g.contains(offsets)) grads[0] = g.at(offsets).values();
    adam_step(opt_vars, grads, state, config.lr, config.beta1, config.beta2, config.eps);
  }

  // Snap every refined coordinate back to its nearest target point.
  const std::vector<double>& yv = y.values();
  const int m = y.dim(0);
  Correspondence out;
  out.match.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double bound = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff =
            best_z[static_cast<std::size_t>(i) * 3 + c] - yv[static_cast<std::size_t>(j) * 3 + c];
        d2 += diff * diff;
      }
      if (d2 < bound) {
        bound = d2;
        arg = j;
      }
    }
    out.match[static_cast<std::size_t>(i)] = arg;
  }
  return out;
}

void save_loss_trace(const std::string& path, const std::vector<TraceRow>& trace) {
  const std::string tmp = path + ".tmp";
  std::ofstream out(tmp, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + tmp);
  out << "step,total,cd_cross,cd_self,map\n";
  char line[160];
  for (const TraceRow& row : trace) {
    std::snprintf(line, sizeof(line), "%d,%.12g,%.12g,%.12g,%.12g\n", row.step, row.total,
                  row.cd_cross, row.cd_self, row.map);
    out << line;
  }
  out.close();
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

}  // namespace eqlf
