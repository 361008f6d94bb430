#include "eqlf/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace eqlf {

namespace {

// Elementwise error with an absolute floor of 1: relative for large values,
// absolute near zero.
double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

PointCloud apply_rigid(const PointCloud& c, const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  PointCloud out(c.rows(), 3);
  for (int i = 0; i < c.rows(); ++i) out.row(i) = (R * c.row(i).transpose() + t).transpose();
  return out;
}

// Max elementwise rel_err between rows of `got` and R-rotated rows of `ref`.
double rotation_mismatch(const Tensor& got, const Tensor& ref, const Eigen::Matrix3d& R) {
  double worst = 0.0;
  const int n = got.dim(0);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d v(ref.at({i, 0}), ref.at({i, 1}), ref.at({i, 2}));
    const Eigen::Vector3d expect = R * v;
    for (int a = 0; a < 3; ++a) worst = std::max(worst, rel_err(got.at({i, a}), expect(a)));
  }
  return worst;
}

std::pair<double, double> row_margin(const std::vector<double>& s, int row, int m) {
  double best = -2.0, second = -2.0;
  for (int j = 0; j < m; ++j) {
    const double v = s[static_cast<std::size_t>(row) * m + j];
    if (v > best) {
      second = best;
      best = v;
    } else if (v > second) {
      second = v;
    }
  }
  return {best, best - second};
}

}  // namespace

bool all_pass(const std::vector<PropertyResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const PropertyResult& r) { return r.pass; });
}

void print_results(std::ostream& out, const std::vector<PropertyResult>& results) {
  char line[256];
  for (const PropertyResult& r : results) {
    std::snprintf(line, sizeof(line), "%s  %-58s observed %-12.4g bound %.4g\n",
                  r.pass ? "  ok " : " FAIL", r.name.c_str(), r.observed, r.bound);
    out << line;
  }
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  // Uniform over SO(3): subgroup-algorithm quaternion from three uniforms.
  const double u1 = rng.uniform(0, 1), u2 = rng.uniform(0, 1), u3 = rng.uniform(0, 1);
  const double two_pi = 2.0 * M_PI;
  Eigen::Quaterniond q(std::sqrt(u1) * std::cos(two_pi * u3),
                       std::sqrt(1.0 - u1) * std::sin(two_pi * u2),
                       std::sqrt(1.0 - u1) * std::cos(two_pi * u2),
                       std::sqrt(u1) * std::sin(two_pi * u3));
  return q.toRotationMatrix();
}

PointCloud random_cloud(Rng& rng, int n, double lo, double hi) {
  PointCloud c(n, 3);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) c(i, a) = rng.uniform(lo, hi);
  return c;
}

std::vector<PropertyResult> equivariance_suite(int trials, int n, std::uint64_t seed) {
  Rng rng(seed);
  EquiShapeConfig cfg;  // full-size defaults
  EquiShapeParams params;
  double worst_u = 0.0, worst_v = 0.0;
  for (int t = 0; t < trials; ++t) {
    if (t % 20 == 0) {
      cfg.net.seed = seed + 1000u * static_cast<std::uint64_t>(t / 20);
      params = make_equishape(cfg);
    }
    const Tensor x = cloud_to_tensor(random_cloud(rng, n));
    const Tensor y = cloud_to_tensor(random_cloud(rng, n));
    const auto base = cross_gvp(x, y, params.net);

    const Eigen::Matrix3d R1 = random_rotation(rng), R2 = random_rotation(rng);
    const Eigen::Vector3d t1(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Eigen::Vector3d t2(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Tensor xm = cloud_to_tensor(apply_rigid(tensor_to_cloud(x), R1, t1));
    const Tensor ym = cloud_to_tensor(apply_rigid(tensor_to_cloud(y), R2, t2));
    const auto moved = cross_gvp(xm, ym, params.net);

    worst_u = std::max({worst_u, rotation_mismatch(moved.first.u, base.first.u, R1),
                        rotation_mismatch(moved.second.u, base.second.u, R2)});
    worst_v = std::max({worst_v, rotation_mismatch(moved.first.v, base.first.v, R1),
                        rotation_mismatch(moved.second.v, base.second.v, R2)});
  }
  std::vector<PropertyResult> out;
  out.push_back({"first LRF vector commutes with per-shape rigid motions", worst_u, 1e-5,
                 worst_u <= 1e-5});
  out.push_back({"second LRF vector commutes with per-shape rigid motions", worst_v, 1e-5,
                 worst_v <= 1e-5});
  return out;
}

std::vector<PropertyResult> frame_suite(int trials, std::uint64_t seed) {
  Rng rng(seed);
  const int n = 64;
  double worst_rot = 0.0, worst_flip = 0.0, worst_ortho = 0.0, worst_det = 0.0;
  for (int t = 0; t < trials; ++t) {
    // Draw well-conditioned vector pairs: near-parallel inputs are the
    // stabilized-degeneracy contract, not the generic-accuracy one, and the
    // normalization epsilon would dominate the orthonormality measurement.
    std::vector<double> uv(static_cast<std::size_t>(n) * 3), vv(uv.size());
    for (int i = 0; i < n; ++i) {
      Eigen::Vector3d ui, vi;
      do {
        for (int c = 0; c < 3; ++c) ui(c) = rng.uniform(-1, 1);
        for (int c = 0; c < 3; ++c) vi(c) = rng.uniform(-1, 1);
      } while (ui.norm() < 0.3 || vi.norm() < 0.3 ||
               ui.cross(vi).norm() < 0.3 * ui.norm() * vi.norm());
      for (int c = 0; c < 3; ++c) {
        uv[3 * i + c] = ui(c);
        vv[3 * i + c] = vi(c);
      }
    }
    const Tensor u({n, 3}, uv), v({n, 3}, vv);
    const FrameTensors f = gram_schmidt_stable(u, v);

    // Orthonormality and right-handedness of the assembled frames.
    for (int i = 0; i < n; ++i) {
      Eigen::Matrix3d E;
      for (int a = 0; a < 3; ++a) {
        E(a, 0) = f.e1.at({i, a});
        E(a, 1) = f.e2.at({i, a});
        E(a, 2) = f.e3.at({i, a});
      }
      worst_ortho = std::max(
          worst_ortho, (E.transpose() * E - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff());
      worst_det = std::max(worst_det, std::abs(E.determinant() - 1.0));
    }

    // Rotating both input vectors rotates every frame axis.
    const Eigen::Matrix3d R = random_rotation(rng);
    std::vector<double> ur(uv.size()), vr(vv.size());
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector3d a = R * Eigen::Vector3d(uv[3 * i], uv[3 * i + 1], uv[3 * i + 2]);
      const Eigen::Vector3d b = R * Eigen::Vector3d(vv[3 * i], vv[3 * i + 1], vv[3 * i + 2]);
      for (int c = 0; c < 3; ++c) {
        ur[3 * i + c] = a(c);
        vr[3 * i + c] = b(c);
      }
    }
    const FrameTensors fr = gram_schmidt_stable(Tensor({n, 3}, ur), Tensor({n, 3}, vr));
    auto axis_mismatch = [&](const Tensor& got, const Tensor& ref) {
      for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d e(ref.at({i, 0}), ref.at({i, 1}), ref.at({i, 2}));
        const Eigen::Vector3d expect = R * e;
        for (int a = 0; a < 3; ++a)
          worst_rot = std::max(worst_rot, std::abs(got.at({i, a}) - expect(a)));
      }
    };
    axis_mismatch(fr.e1, f.e1);
    axis_mismatch(fr.e2, f.e2);
    axis_mismatch(fr.e3, f.e3);

    // A z-axis coordinate reflection of the inputs flips the sign of the
    // cross-product axis bitwise: only exact negations enter the arithmetic.
    std::vector<double> um(uv), vm(vv);
    for (int i = 0; i < n; ++i) {
      um[3 * i + 2] = -um[3 * i + 2];
      vm[3 * i + 2] = -vm[3 * i + 2];
    }
    const FrameTensors fm = gram_schmidt_stable(Tensor({n, 3}, um), Tensor({n, 3}, vm));
    for (int i = 0; i < n; ++i) {
      // Mirrored third axis must equal -M * e3 with M = diag(1,1,-1).
      worst_flip = std::max(worst_flip, std::abs(fm.e3.at({i, 0}) + f.e3.at({i, 0})));
      worst_flip = std::max(worst_flip, std::abs(fm.e3.at({i, 1}) + f.e3.at({i, 1})));
      worst_flip = std::max(worst_flip, std::abs(fm.e3.at({i, 2}) - f.e3.at({i, 2})));
    }
  }
  std::vector<PropertyResult> out;
  out.push_back({"frame axes commute with rotations of the input vectors", worst_rot, 1e-10,
                 worst_rot <= 1e-10});
  out.push_back(
      {"coordinate reflection flips the third axis bitwise", worst_flip, 0.0, worst_flip == 0.0});
  out.push_back({"frames orthonormal", worst_ortho, 1e-6, worst_ortho <= 1e-6});
  out.push_back({"frame determinant +1", worst_det, 1e-6, worst_det <= 1e-6});
  return out;
}

std::vector<PropertyResult> invariance_suite(int trials, int n, std::uint64_t seed) {
  Rng rng(seed);
  EquiShapeConfig cfg;
  EquiShapeParams params;
  double worst_s = 0.0;
  int confident_mismatch = 0;
  long confident_rows = 0;
  for (int t = 0; t < trials; ++t) {
    if (t % 10 == 0) {
      cfg.net.seed = seed + 777u * static_cast<std::uint64_t>(t / 10);
      params = make_equishape(cfg);
    }
    const PointCloud cx = random_cloud(rng, n), cy = random_cloud(rng, n);
    const Tensor x = cloud_to_tensor(cx), y = cloud_to_tensor(cy);
    const ForwardResult base = equishape_forward(x, y, params);
    const Tensor S = similarity(base.feat_x, base.feat_y);

    const Eigen::Matrix3d R1 = random_rotation(rng), R2 = random_rotation(rng);
    const Eigen::Vector3d t1(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Eigen::Vector3d t2(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    const Tensor xm = cloud_to_tensor(apply_rigid(cx, R1, t1));
    const Tensor ym = cloud_to_tensor(apply_rigid(cy, R2, t2));
    const ForwardResult moved = equishape_forward(xm, ym, params);
    const Tensor Sm = similarity(moved.feat_x, moved.feat_y);

    const std::vector<double>& sv = S.values();
    const std::vector<double>& mv = Sm.values();
    for (std::size_t i = 0; i < sv.size(); ++i)
      worst_s = std::max(worst_s, std::abs(sv[i] - mv[i]));

    const Correspondence a = hard_match(S);
    const Correspondence b = hard_match(Sm);
    for (int i = 0; i < n; ++i) {
      if (row_margin(sv, i, n).second > 1e-4) {
        ++confident_rows;
        if (a.match[static_cast<std::size_t>(i)] != b.match[static_cast<std::size_t>(i)])
          ++confident_mismatch;
      }
    }
  }
  std::vector<PropertyResult> out;
  out.push_back(
      {"similarity matrix invariant to per-shape rigid motions", worst_s, 1e-5, worst_s <= 1e-5});
  PropertyResult match{"confident matches preserved under rigid motions",
                       static_cast<double>(confident_mismatch), 0.0,
                       confident_mismatch == 0 && confident_rows > 0};
  out.push_back(match);
  return out;
}

namespace {

void audit_op(std::vector<PropertyResult>& out, const std::string& name,
              const std::function<Tensor(const std::vector<Tensor>&)>& f,
              const std::vector<Tensor>& inputs, double step = 1e-5) {
  const GradCheckResult r = grad_check(f, inputs, step);
  out.push_back({"gradient of " + name, r.max_rel_err, 1e-4,
                 r.max_rel_err <= 1e-4 && r.checked > 0});
}

// Quadratic reduction: nonzero cotangent everywhere the output is nonzero.
Tensor squash(const Tensor& t) { return sum_all(mul(t, t)); }

}  // namespace

std::vector<PropertyResult> gradient_suite(std::uint64_t seed) {
  std::vector<PropertyResult> out;
  Rng rng(seed);

  const Tensor a = Tensor::uniform({3, 4}, rng, -1, 1, true);
  const Tensor b = Tensor::uniform({3, 4}, rng, -1, 1, true);
  const Tensor pos = Tensor::uniform({3, 4}, rng, 0.8, 1.6, true);
  const Tensor m1 = Tensor::uniform({3, 4}, rng, -1, 1, true);
  const Tensor m2 = Tensor::uniform({4, 2}, rng, -1, 1, true);
  const Tensor rows = Tensor::uniform({4, 3}, rng, 0.3, 1.0, true);
  const Tensor c1 = Tensor::uniform({4, 3}, rng, -1, 1, true);
  const Tensor c2 = Tensor::uniform({4, 3}, rng, -1, 1, true);

  using In = std::vector<Tensor>;
  audit_op(out, "matmul", [](const In& in) { return squash(matmul(in[0], in[1])); }, {m1, m2});
  audit_op(out, "transpose", [](const In& in) { return squash(transpose(in[0])); }, {a});
  audit_op(out, "add", [](const In& in) { return squash(add(in[0], in[1])); }, {a, b});
  audit_op(out, "sub", [](const In& in) { return squash(sub(in[0], in[1])); }, {a, b});
  audit_op(out, "mul", [](const In& in) { return squash(mul(in[0], in[1])); }, {a, b});
  audit_op(out, "div", [](const In& in) { return squash(div(in[0], in[1])); }, {a, pos});
  audit_op(out, "add scalar", [](const In& in) { return squash(add(in[0], 0.7)); }, {a});
  audit_op(out, "sub scalar", [](const In& in) { return squash(sub(in[0], 0.7)); }, {a});
  audit_op(out, "scalar sub", [](const In& in) { return squash(sub(0.7, in[0])); }, {a});
  audit_op(out, "mul scalar", [](const In& in) { return squash(mul(in[0], 1.3)); }, {a});
  audit_op(out, "div scalar", [](const In& in) { return squash(div(in[0], 1.7)); }, {a});
  audit_op(out, "exp", [](const In& in) { return squash(exp(in[0])); }, {a});
  audit_op(out, "sqrt", [](const In& in) { return squash(sqrt(in[0])); }, {pos});
  audit_op(out, "sigmoid", [](const In& in) { return squash(sigmoid(in[0])); }, {a});
  audit_op(out, "leaky_relu", [](const In& in) { return squash(leaky_relu(in[0])); }, {a});
  audit_op(out, "sum over axis", [](const In& in) { return squash(sum(in[0], 1)); }, {a});
  audit_op(out, "mean over axis", [](const In& in) { return squash(mean(in[0], 0)); }, {a});
  audit_op(out, "max over axis", [](const In& in) { return squash(max(in[0], 1)); }, {a});
  audit_op(out, "sum_all", [](const In& in) { return sum_all(in[0]); }, {a});
  audit_op(out, "row_l2_norm", [](const In& in) { return squash(row_l2_norm(in[0])); }, {rows});
  audit_op(out, "softmax", [](const In& in) { return squash(softmax(in[0], 1)); }, {a});
  audit_op(out, "cross3", [](const In& in) { return squash(cross3(in[0], in[1])); }, {c1, c2});
  audit_op(out, "concat", [](const In& in) { return squash(concat({in[0], in[1]}, 1)); }, {a, b});
  audit_op(out, "gather", [](const In& in) { return squash(gather(in[0], {2, 0, 2, 1})); }, {a});
  audit_op(out, "slice", [](const In& in) { return squash(slice(in[0], 1, 1, 3)); }, {a});
  audit_op(out, "reshape", [](const In& in) { return squash(reshape(in[0], {2, 6})); }, {a});

  // End to end: the full objective against central differences through
  // sampled coordinates of every parameter tensor.
  EquiShapeConfig cfg;
  cfg.net.L = 2;
  cfg.net.d = 8;
  cfg.net.nu = 3;
  cfg.net.k = 4;
  cfg.net.seed = seed ^ 0xE2Eu;
  cfg.d_t = 8;
  cfg.k_latent = 3;
  EquiShapeParams params = make_equishape(cfg);
  auto named = named_params(params);

  Rng crng = Rng(seed).split(5);
  const int n = 8;
  const Tensor x = cloud_to_tensor(random_cloud(crng, n));
  const Tensor y = cloud_to_tensor(random_cloud(crng, n));
  auto eval = [&]() {
    const ForwardResult f = equishape_forward(x, y, params);
    return total_loss(x, y, f.feat_x, f.feat_y, cfg).parts.total;
  };

  std::vector<std::vector<double>> analytic(named.size());
  double f0 = 0.0;
  {
    Tape tape;
    const ForwardResult f = equishape_forward(x, y, params);
    const LossResult l = total_loss(x, y, f.feat_x, f.feat_y, cfg);
    f0 = l.parts.total;
    const GradientMap g = tape.backward(l.total);
    for (std::size_t p = 0; p < named.size(); ++p) {
      if (g.contains(*named[p].second))
        analytic[p] = g.at(*named[p].second).values();
      else
        analytic[p].assign(static_cast<std::size_t>(named[p].second->size()), 0.0);
    }
  }

  // The loss has third derivatives large enough that a 1e-5 step is
  // truncation-limited; 1e-6 sits near the bottom of the step/error curve.
  // A ±h interval can still straddle one of the loss's discrete selection
  // boundaries (nearest-point argmins, latent top-k) without tripping the
  // one-sided-slope test, so a coordinate that misses the bound is re-measured
  // at a finer step: a boundary artifact vanishes there, a genuinely wrong
  // analytic gradient fails at both steps.
  double worst = 0.0;
  int checked = 0;
  Rng srng = Rng(seed).split(6);
  for (std::size_t p = 0; p < named.size(); ++p) {
    Tensor* t = named[p].second;
    const std::vector<double> base = t->values();
    std::vector<int> coords;
    if (base.size() <= 4) {
      for (std::size_t j = 0; j < base.size(); ++j) coords.push_back(static_cast<int>(j));
    } else {
      while (coords.size() < 4) {
        const int j = static_cast<int>(srng.uniform(0, static_cast<double>(base.size())));
        if (j < static_cast<int>(base.size()) &&
            std::find(coords.begin(), coords.end(), j) == coords.end())
          coords.push_back(j);
      }
    }
    for (int j : coords) {
      const double a = analytic[p][static_cast<std::size_t>(j)];
      // -1 marks a kink: one-sided slopes disagree, coordinate skipped.
      auto central_err = [&](double h) {
        std::vector<double> v = base;
        v[static_cast<std::size_t>(j)] = base[static_cast<std::size_t>(j)] + h;
        *t = Tensor(t->shape(), v, true);
        const double fp = eval();
        v[static_cast<std::size_t>(j)] = base[static_cast<std::size_t>(j)] - h;
        *t = Tensor(t->shape(), v, true);
        const double fm = eval();
        *t = Tensor(t->shape(), base, true);
        const double sp = (fp - f0) / h, sm = (f0 - fm) / h;
        if (std::abs(sp - sm) > 1e-3 * std::max({1.0, std::abs(sp), std::abs(sm)})) return -1.0;
        return rel_err(a, (fp - fm) / (2 * h));
      };
      double err = central_err(1e-6);
      if (err > 1e-4) err = central_err(3e-7);
      if (err < 0) continue;
      worst = std::max(worst, err);
      ++checked;
    }
  }
  out.push_back({"objective gradient through sampled parameter coordinates", worst, 1e-4,
                 worst <= 1e-4 && checked >= 30});
  return out;
}

}  // namespace eqlf
