#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eqlf/data.hpp"
#include "eqlf/matcher.hpp"

namespace eqlf {

// Optimization schedule and bookkeeping for fitting the matcher to a pair
// dataset. Loss weights and network dimensions travel inside the model
// config; everything here is about the loop around it.
struct TrainConfig {
  int batch_size = 8;
  int epochs = 10;
  double lr = 3e-4;
  std::vector<int> lr_milestones = {6, 9};  // epochs at which lr shrinks
  double lr_factor = 0.1;
  EquiShapeConfig model;
  std::uint64_t seed = 1;
  int threads = 0;        // 0: decide from the environment
  bool verbose = false;   // per-epoch progress on stderr
};

// First-moment/second-moment accumulators, one slot per parameter tensor in
// the order the named parameter list presents them.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

// Bias-corrected Adam update applied in place. `grads` follows the order of
// `params`; an empty slot means zero gradient. A fresh (empty) state is
// initialized on first use. Non-finite gradients abort before any parameter
// moves.
void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct EpochStats {
  int epoch = 0;
  double loss_total = 0.0;
  double loss_cons = 0.0;
  double loss_map = 0.0;
  double val_acc_001 = 0.0;  // NaN when no validation pair carries labels
  double val_acc_005 = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  EquiShapeParams params;
  std::vector<EpochStats> log;
};

// Learning rate in effect during 1-based `epoch`: the base rate scaled by
// `lr_factor` once per milestone already reached.
double lr_at_epoch(const TrainConfig& config, int epoch);

// The fixed 80/20 split used by train(): returns (train indices, validation
// indices) for a dataset of `total` pairs. Decided once by the seed, before
// any epoch shuffling, so callers can evaluate baselines on the same held-out
// pairs.
std::pair<std::vector<int>, std::vector<int>> train_val_split(int total, std::uint64_t seed);

// Full training loop: seeded 80/20 train/validation split, seeded per-epoch
// shuffles, per-batch gradient summation, one Adam step per batch. Pairs in a
// batch are processed on isolated tapes and may run concurrently; the
// reduction order is fixed, so results are reproducible for a given config.
TrainResult train(const std::vector<LoadedPair>& dataset, const TrainConfig& config);

// CSV with header epoch,loss_total,loss_cons,loss_map,val_acc_001,val_acc_005,lr
void save_metrics_csv(const std::string& path, const std::vector<EpochStats>& log);

// Binary model snapshot: "EQLF" magic, format version, config block, named
// tensors as float32 little-endian payloads, optional optimizer state.
// Reloading restores every parameter bit-exactly at float32 precision.
void save_checkpoint(const EquiShapeParams& params, const std::string& path,
                     const AdamState* opt_state = nullptr);
EquiShapeParams load_checkpoint(const std::string& path, AdamState* opt_state = nullptr);

}  // namespace eqlf
