#pragma once

#include <string>
#include <vector>

#include "eqlf/matcher.hpp"

namespace eqlf {

// Test-time optimization settings. The default rate follows the reference
// recipe for raw-scale scan data; unit-normalized synthetic clouds respond
// on a useful timescale around 1e-3 (see kSyntheticRefineLr).
struct RefineConfig {
  double lr = 1e-8;
  int steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline constexpr double kSyntheticRefineLr = 1e-3;

// Additive corrections to the predicted frame vectors, one pair per shape.
struct ResidualLrf {
  Tensor du_x, dv_x, du_y, dv_y;
};

// One loss evaluation along the refinement path. The chamfer and mapping
// columns are raw (unweighted) sums over both shapes; total carries the
// loss weights.
struct TraceRow {
  int step = 0;
  double total = 0.0;
  double cd_cross = 0.0;
  double cd_self = 0.0;
  double map = 0.0;
};

struct RefineResult {
  ResidualLrf delta;            // corrections at the best-observed iterate
  Correspondence match;         // hard matches at that iterate
  Tensor similarity;            // similarity matrix at that iterate
  std::vector<TraceRow> trace;  // steps + 1 rows: state before/after each step
  int best_step = 0;
  bool stabilized_frames = false;  // a degenerate frame forced the stabilized
                                   // orthonormalization path
};

// Per-pair descent on the frame corrections through the frozen model: one
// base forward fixes (u, v), then each step re-runs the geometric half of
// the pipeline with (u+du, v+dv) and follows the loss gradient of the
// corrections only. Returns the iterate with the lowest observed loss, so
// the reported loss never exceeds the unrefined one.
RefineResult lrf_refine(const EquiShapeParams& params, const Tensor& x, const Tensor& y,
                        const RefineConfig& config);

// Comparison baseline: moves each matched target coordinate directly by a
// per-point offset against the cross-construction and mapping terms of the
// same loss, then snaps back to the nearest target point. Frames and
// features stay untouched.
Correspondence coord_refine_baseline(const Tensor& x, const Tensor& y, const Tensor& feat_x,
                                     const Tensor& feat_y, const EquiShapeConfig& model,
                                     const RefineConfig& config);

// CSV with header step,total,cd_cross,cd_self,map
void save_loss_trace(const std::string& path, const std::vector<TraceRow>& trace);

}  // namespace eqlf
