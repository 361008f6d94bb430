#include "eqlf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "eqlf/common.hpp"

namespace eqlf {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Checkpoint payloads are raw little-endian scalars; this code targets
// little-endian hosts (asserted nowhere else in the build).
template <typename T>
void wr(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T rd(std::istream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error(std::string("truncated checkpoint while reading ") + what);
  return v;
}

constexpr std::uint32_t kCheckpointVersion = 1;

void check_train_config(const TrainConfig& config) {
  if (config.batch_size < 1) fail("train config: batch_size must be >= 1");
  if (config.epochs < 0) fail("train config: epochs must be >= 0");
  if (config.lr <= 0.0) fail("train config: lr must be positive");
  if (config.lr_factor <= 0.0) fail("train config: lr_factor must be positive");
  for (std::size_t i = 1; i < config.lr_milestones.size(); ++i)
    if (config.lr_milestones[i] <= config.lr_milestones[i - 1])
      fail("train config: lr_milestones must be strictly increasing");
}

struct PairEval {
  LossBreakdown parts;
  std::vector<std::vector<double>> grads;  // per named parameter; empty = zero
};

}  // namespace

void adam_step(const std::vector<std::pair<std::string, Tensor*>>& params,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  const std::size_t count = params.size();
  if (grads.size() != count) fail("adam_step: parameter and gradient counts differ");
  if (state.m.empty() && state.v.empty()) {
    state.m.resize(count);
    state.v.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      state.m[i].assign(static_cast<std::size_t>(params[i].second->size()), 0.0);
      state.v[i].assign(static_cast<std::size_t>(params[i].second->size()), 0.0);
    }
  }
  if (state.m.size() != count || state.v.size() != count)
    fail("adam_step: optimizer state does not match the parameter list");

  // Validate everything before moving anything, so a bad gradient leaves the
  // model untouched.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t size = static_cast<std::size_t>(params[i].second->size());
    if (state.m[i].size() != size) fail("adam_step: state size mismatch for " + params[i].first);
    if (grads[i].empty()) continue;
    if (grads[i].size() != size)
      fail("adam_step: gradient size mismatch for " + params[i].first);
    for (double g : grads[i])
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient for " + params[i].first +
                                 ", step aborted");
  }

  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < count; ++i) {
    Tensor& p = *params[i].second;
    const std::vector<double>& pv = p.values();
    std::vector<double> nv(pv.size());
    for (std::size_t j = 0; j < pv.size(); ++j) {
      const double g = grads[i].empty() ? 0.0 : grads[i][j];
      state.m[i][j] = beta1 * state.m[i][j] + (1.0 - beta1) * g;
      state.v[i][j] = beta2 * state.v[i][j] + (1.0 - beta2) * g * g;
      nv[j] = pv[j] - lr * (state.m[i][j] / bc1) / (std::sqrt(state.v[i][j] / bc2) + eps);
    }
    p = Tensor(p.shape(), std::move(nv), true);
  }
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  double lr = config.lr;
  for (int milestone : config.lr_milestones)
    if (epoch >= milestone) lr *= config.lr_factor;
  return lr;
}

std::pair<std::vector<int>, std::vector<int>> train_val_split(int total, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = Rng(seed).split(0x5317);
  fisher_yates(order, split_rng);
  const int n_val = static_cast<int>(std::floor(0.2 * total));
  return {std::vector<int>(order.begin() + n_val, order.end()),
          std::vector<int>(order.begin(), order.begin() + n_val)};
}

TrainResult train(const std::vector<LoadedPair>& dataset, const TrainConfig& config) {
  check_train_config(config);
  if (dataset.empty()) fail("train: empty dataset");
  const int n = static_cast<int>(dataset.front().source.rows());
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (dataset[i].source.rows() != n || dataset[i].target.rows() != n)
      fail("train: pair " + std::to_string(i) + " has " +
           std::to_string(dataset[i].source.rows()) + "/" +
           std::to_string(dataset[i].target.rows()) + " points, expected " + std::to_string(n));

  TrainResult out;
  out.params = make_equishape(config.model);
  auto named = named_params(out.params);
  const int threads = resolve_threads(config.threads);

  const auto [train_split, val_idx] = train_val_split(static_cast<int>(dataset.size()),
                                                      config.seed);
  std::vector<int> train_idx = train_split;

  AdamState state;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = lr_at_epoch(config, epoch);
    Rng shuffle_rng = Rng(config.seed).split(0xE60C00 + static_cast<std::uint64_t>(epoch));
    fisher_yates(train_idx, shuffle_rng);

    double sum_total = 0.0, sum_cons = 0.0, sum_map = 0.0;
    for (std::size_t pos = 0; pos < train_idx.size(); pos += config.batch_size) {
      const int members =
          static_cast<int>(std::min<std::size_t>(config.batch_size, train_idx.size() - pos));
      std::vector<PairEval> evals(static_cast<std::size_t>(members));
      parallel_for(members, threads, [&](int b) {
        const LoadedPair& pair = dataset[static_cast<std::size_t>(train_idx[pos + b])];
        Tape tape;
        const Tensor x = cloud_to_tensor(pair.source);
        const Tensor y = cloud_to_tensor(pair.target);
        const ForwardResult f = equishape_forward(x, y, out.params);
        const LossResult loss = total_loss(x, y, f.feat_x, f.feat_y, config.model);
        const GradientMap g = tape.backward(loss.total);
        PairEval& ev = evals[static_cast<std::size_t>(b)];
        ev.parts = loss.parts;
        ev.grads.resize(named.size());
        for (std::size_t p = 0; p < named.size(); ++p)
          if (g.contains(*named[p].second)) ev.grads[p] = g.at(*named[p].second).values();
      });

      // Gradients are summed over the batch in member order; the loss
      // weights are calibrated for sums, not means.
      std::vector<std::vector<double>> grads(named.size());
      for (std::size_t p = 0; p < named.size(); ++p)
        grads[p].assign(static_cast<std::size_t>(named[p].second->size()), 0.0);
      for (int b = 0; b < members; ++b) {
        const PairEval& ev = evals[static_cast<std::size_t>(b)];
        for (std::size_t p = 0; p < named.size(); ++p) {
          if (ev.grads[p].empty()) continue;
          for (std::size_t j = 0; j < grads[p].size(); ++j) grads[p][j] += ev.grads[p][j];
        }
        sum_total += ev.parts.total;
        sum_cons += config.model.lambda_cc * (ev.parts.cd_cross_x + ev.parts.cd_cross_y) +
                    config.model.lambda_sc * (ev.parts.cd_self_x + ev.parts.cd_self_y);
        sum_map += config.model.lambda_m * (ev.parts.map_x + ev.parts.map_y);
      }
      adam_step(named, grads, state, lr);
    }

    // Validation accuracy over the held-out pairs that carry labels.
    std::vector<double> acc1(val_idx.size(), -1.0), acc5(val_idx.size(), -1.0);
    parallel_for(static_cast<int>(val_idx.size()), threads, [&](int v) {
      const LoadedPair& pair = dataset[static_cast<std::size_t>(val_idx[static_cast<std::size_t>(v)])];
      if (pair.gt.empty()) return;
      const Tensor x = cloud_to_tensor(pair.source);
      const Tensor y = cloud_to_tensor(pair.target);
      const ForwardResult f = equishape_forward(x, y, out.params);
      const Correspondence match = hard_match(similarity(f.feat_x, f.feat_y));
      acc1[static_cast<std::size_t>(v)] = accuracy(match, pair.gt, pair.target, 0.01);
      acc5[static_cast<std::size_t>(v)] = accuracy(match, pair.gt, pair.target, 0.05);
    });
    double s1 = 0.0, s5 = 0.0;
    int labeled = 0;
    for (std::size_t v = 0; v < val_idx.size(); ++v)
      if (acc1[v] >= 0.0) {
        s1 += acc1[v];
        s5 += acc5[v];
        ++labeled;
      }

    EpochStats stats;
    stats.epoch = epoch;
    const double denom = static_cast<double>(train_idx.size());
    stats.loss_total = sum_total / denom;
    stats.loss_cons = sum_cons / denom;
    stats.loss_map = sum_map / denom;
    stats.val_acc_001 = labeled ? s1 / labeled : std::numeric_limits<double>::quiet_NaN();
    stats.val_acc_005 = labeled ? s5 / labeled : std::numeric_limits<double>::quiet_NaN();
    stats.lr = lr;
    out.log.push_back(stats);
    if (config.verbose) {
      std::fprintf(stderr, "epoch %d/%d  loss %.6g  val acc(0.05) %.4f  lr %g\n", epoch,
                   config.epochs, stats.loss_total, stats.val_acc_005, lr);
      std::fflush(stderr);
    }
  }
  return out;
}

void save_metrics_csv(const std::string& path, const std::vector<EpochStats>& log) {
  const std::string tmp = path + ".tmp";
  std::ofstream out(tmp, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + tmp);
  out << "epoch,loss_total,loss_cons,loss_map,val_acc_001,val_acc_005,lr\n";
  char line[220];
  for (const EpochStats& row : log) {
    std::snprintf(line, sizeof(line), "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", row.epoch,
                  row.loss_total, row.loss_cons, row.loss_map, row.val_acc_001, row.val_acc_005,
                  row.lr);
    out << line;
  }
  out.close();
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

void save_checkpoint(const EquiShapeParams& params, const std::string& path,
                     const AdamState* opt_state) {
  EquiShapeParams copy = params;  // payload-sharing copy, gives mutable access for naming
  auto named = named_params(copy);
  if (opt_state && !opt_state->m.empty() && opt_state->m.size() != named.size())
    fail("save_checkpoint: optimizer state does not match the parameter list");

  const std::string tmp = path + ".tmp";
  std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + tmp);
  out.write("EQLF", 4);
  wr<std::uint32_t>(out, kCheckpointVersion);

  const EquiShapeConfig& cfg = params.config;
  wr<std::int32_t>(out, cfg.net.L);
  wr<std::int32_t>(out, cfg.net.d);
  wr<std::int32_t>(out, cfg.net.nu);
  wr<std::int32_t>(out, cfg.net.k);
  wr<std::uint64_t>(out, cfg.net.seed);
  wr<std::int32_t>(out, cfg.d_t);
  wr<std::int32_t>(out, cfg.k_latent);
  wr<double>(out, cfg.lambda_cc);
  wr<double>(out, cfg.lambda_sc);
  wr<double>(out, cfg.lambda_m);
  wr<double>(out, cfg.alpha);

  wr<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
  for (auto& [name, t] : named) {
    wr<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    wr<std::uint32_t>(out, static_cast<std::uint32_t>(t->ndim()));
    for (int a = 0; a < t->ndim(); ++a) wr<std::int32_t>(out, t->dim(a));
    for (double v : t->values()) wr<float>(out, static_cast<float>(v));
  }

  const bool with_opt = opt_state && !opt_state->m.empty();
  wr<std::uint8_t>(out, with_opt ? 1 : 0);
  if (with_opt) {
    wr<std::int64_t>(out, opt_state->t);
    for (std::size_t i = 0; i < named.size(); ++i) {
      for (double v : opt_state->m[i]) wr<double>(out, v);
      for (double v : opt_state->v[i]) wr<double>(out, v);
    }
  }
  out.close();
  if (!out) throw std::runtime_error("write failed for " + tmp);
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

EquiShapeParams load_checkpoint(const std::string& path, AdamState* opt_state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "EQLF")
    throw std::runtime_error(path + ": not a model checkpoint (magic mismatch)");
  const auto version = rd<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));

  EquiShapeConfig cfg;
  cfg.net.L = rd<std::int32_t>(in, "config");
  cfg.net.d = rd<std::int32_t>(in, "config");
  cfg.net.nu = rd<std::int32_t>(in, "config");
  cfg.net.k = rd<std::int32_t>(in, "config");
  cfg.net.seed = rd<std::uint64_t>(in, "config");
  cfg.d_t = rd<std::int32_t>(in, "config");
  cfg.k_latent = rd<std::int32_t>(in, "config");
  cfg.lambda_cc = rd<double>(in, "config");
  cfg.lambda_sc = rd<double>(in, "config");
  cfg.lambda_m = rd<double>(in, "config");
  cfg.alpha = rd<double>(in, "config");

  EquiShapeParams params = make_equishape(cfg);
  auto named = named_params(params);
  const auto count = rd<std::uint32_t>(in, "tensor count");
  if (count != named.size())
    throw std::runtime_error(path + ": checkpoint lists " + std::to_string(count) +
                             " tensors, this configuration has " + std::to_string(named.size()));
  for (auto& [name, t] : named) {
    const auto name_len = rd<std::uint32_t>(in, "tensor name");
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    if (!in) throw std::runtime_error("truncated checkpoint while reading tensor name");
    if (stored != name)
      throw std::runtime_error(path + ": tensor '" + stored + "' where '" + name + "' expected");
    const auto ndim = rd<std::uint32_t>(in, "tensor rank");
    if (static_cast<int>(ndim) != t->ndim())
      throw std::runtime_error(path + ": dimension mismatch for tensor '" + name + "'");
    std::int64_t size = 1;
    for (std::uint32_t a = 0; a < ndim; ++a) {
      const auto d = rd<std::int32_t>(in, "tensor dims");
      if (d != t->dim(static_cast<int>(a)))
        throw std::runtime_error(path + ": dimension mismatch for tensor '" + name + "'");
      size *= d;
    }
    std::vector<double> values(static_cast<std::size_t>(size));
    for (auto& v : values) v = static_cast<double>(rd<float>(in, "tensor payload"));
    *t = Tensor(t->shape(), std::move(values), true);
  }

  const auto has_opt = rd<std::uint8_t>(in, "optimizer flag");
  if (opt_state) {
    *opt_state = AdamState{};
    if (has_opt) {
      opt_state->t = rd<std::int64_t>(in, "optimizer step");
      opt_state->m.resize(named.size());
      opt_state->v.resize(named.size());
      for (std::size_t i = 0; i < named.size(); ++i) {
        const std::size_t size = static_cast<std::size_t>(named[i].second->size());
        opt_state->m[i].resize(size);
        opt_state->v[i].resize(size);
        for (auto& v : opt_state->m[i]) v = rd<double>(in, "optimizer moment");
        for (auto& v : opt_state->v[i]) v = rd<double>(in, "optimizer moment");
      }
    }
  }
  return params;
}

}  // namespace eqlf
