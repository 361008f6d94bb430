#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "eqlf/checks.hpp"
#include "eqlf/data.hpp"
#include "eqlf/refine.hpp"
#include "eqlf/train.hpp"

namespace {

using namespace eqlf;

std::vector<int> read_correspondence(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw std::runtime_error("cannot open correspondence file " + path);
  std::vector<int> match;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    long row;
    int tgt;
    if (!(ss >> row >> tgt))
      throw std::runtime_error(path + ": malformed correspondence at line " +
                               std::to_string(line_no));
    match.push_back(tgt);
  }
  return match;
}

void write_colored_xyz(const std::string& path, const PointCloud& cloud,
                       const std::vector<Eigen::Vector3d>& rgb) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out.good()) throw std::runtime_error("cannot write " + tmp);
    char line[160];
    for (int i = 0; i < cloud.rows(); ++i) {
      std::snprintf(line, sizeof(line), "%.6f %.6f %.6f %.6f %.6f %.6f\n", cloud(i, 0),
                    cloud(i, 1), cloud(i, 2), rgb[static_cast<std::size_t>(i)](0),
                    rgb[static_cast<std::size_t>(i)](1), rgb[static_cast<std::size_t>(i)](2));
      out << line;
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " into place");
}

struct GenOpts {
  std::string out;
  int count = 10;
  int points = 128;
  int segments = 5;
  double angle_range = 0.6;
  std::uint64_t seed = 1;
};

int run_gen(const GenOpts& o) {
  ShapeSpec spec;
  spec.n = o.points;
  spec.segment_count = o.segments;
  spec.joint_angle_range = o.angle_range;
  spec.seed = o.seed;
  const std::string manifest = generate_dataset(o.out, spec, o.count, o.seed);
  std::cerr << "wrote " << o.count << " pairs under " << o.out << "\n";
  std::cout << manifest << "\n";
  return 0;
}

struct TrainOpts {
  std::string manifest;
  std::string out = "model.eqlf";
  std::string metrics = "metrics.csv";
  int epochs = 10;
  int batch = 8;
  double lr = 3e-4;
  std::vector<int> milestones = {6, 9};
  double lr_factor = 0.1;
  int k = 27;
  int layers = 3;
  int dim = 64;
  int nu = 16;
  int d_t = 64;
  int k_latent = 10;
  double alpha = 0.01;
  double lambda_cc = 1.0;
  double lambda_sc = 10.0;
  double lambda_m = 1.0;
  std::uint64_t seed = 1;
  int threads = 0;
};

int run_train(const TrainOpts& o) {
  const std::vector<LoadedPair> data = load_manifest(o.manifest);
  TrainConfig cfg;
  cfg.batch_size = o.batch;
  cfg.epochs = o.epochs;
  cfg.lr = o.lr;
  cfg.lr_milestones = o.milestones;
  cfg.lr_factor = o.lr_factor;
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  cfg.verbose = true;
  cfg.model.net.L = o.layers;
  cfg.model.net.d = o.dim;
  cfg.model.net.nu = o.nu;
  cfg.model.net.k = o.k;
  cfg.model.net.seed = o.seed;
  cfg.model.d_t = o.d_t;
  cfg.model.k_latent = o.k_latent;
  cfg.model.alpha = o.alpha;
  cfg.model.lambda_cc = o.lambda_cc;
  cfg.model.lambda_sc = o.lambda_sc;
  cfg.model.lambda_m = o.lambda_m;

  TrainResult r = train(data, cfg);
  save_checkpoint(r.params, o.out);
  save_metrics_csv(o.metrics, r.log);
  std::cerr << "trained on " << data.size() << " pairs for " << o.epochs << " epochs -> "
            << o.out << "\n";

  char line[256];
  std::cout << "epoch,loss_total,loss_cons,loss_map,val_acc_001,val_acc_005,lr\n";
  for (const EpochStats& e : r.log) {
    std::snprintf(line, sizeof(line), "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", e.epoch,
                  e.loss_total, e.loss_cons, e.loss_map, e.val_acc_001, e.val_acc_005, e.lr);
    std::cout << line;
  }
  return 0;
}

struct MatchOpts {
  std::string model, src, tgt;
  std::string out = "corr.txt";
  std::string colored;
};

int run_match(const MatchOpts& o) {
  EquiShapeParams params = load_checkpoint(o.model);
  const LoadedPair pair = load_pair(o.src, o.tgt, "-");
  const Tensor x = cloud_to_tensor(pair.source);
  const Tensor y = cloud_to_tensor(pair.target);
  const ForwardResult f = equishape_forward(x, y, params);
  const Tensor S = similarity(f.feat_x, f.feat_y);
  const Correspondence c = hard_match(S);
  save_correspondence(o.out, c, S);
  if (!o.colored.empty()) {
    // Source points tinted by the index they map to, so regions that match
    // the same part of the target share a hue.
    const auto rgb = index_color_ramp(c.match, static_cast<int>(pair.target.rows()));
    write_colored_xyz(o.colored, pair.source, rgb);
  }
  std::cerr << "matched " << pair.source.rows() << " points -> " << o.out << "\n";
  return 0;
}

struct RefineOpts {
  std::string model, src, tgt;
  std::string out = "corr.txt";
  std::string trace;
  std::string strategy = "lrf";
  int steps = 100;
  double lr = 1e-8;
};

int run_refine(const RefineOpts& o) {
  EquiShapeParams params = load_checkpoint(o.model);
  const LoadedPair pair = load_pair(o.src, o.tgt, "-");
  const Tensor x = cloud_to_tensor(pair.source);
  const Tensor y = cloud_to_tensor(pair.target);
  RefineConfig cfg;
  cfg.steps = o.steps;
  cfg.lr = o.lr;

  if (o.strategy == "coord") {
    const ForwardResult f = equishape_forward(x, y, params);
    const Tensor S = similarity(f.feat_x, f.feat_y);
    const Correspondence c = coord_refine_baseline(x, y, f.feat_x, f.feat_y, params.config, cfg);
    save_correspondence(o.out, c, S);
    if (!o.trace.empty())
      std::cerr << "note: the coordinate strategy records no loss trace\n";
    std::cerr << "coordinate refinement, " << o.steps << " steps -> " << o.out << "\n";
    return 0;
  }

  const RefineResult r = lrf_refine(params, x, y, cfg);
  save_correspondence(o.out, r.match, r.similarity);
  if (!o.trace.empty()) save_loss_trace(o.trace, r.trace);
  std::cerr << "LRF refinement, best step " << r.best_step << " of " << o.steps << ", loss "
            << r.trace[static_cast<std::size_t>(r.best_step)].total << " -> " << o.out << "\n";
  return 0;
}

struct EvalOpts {
  std::string pred, gt, tgt;
  std::vector<double> eps = {0.01, 0.05};
};

int run_eval(const EvalOpts& o) {
  const PointCloud target = load_xyz(o.tgt);
  Correspondence pred;
  pred.match = read_correspondence(o.pred);
  std::ifstream in(o.gt);
  if (!in.good()) throw std::runtime_error("cannot open ground truth " + o.gt);
  std::vector<int> gt;
  int idx;
  while (in >> idx) gt.push_back(idx);

  char line[96];
  std::cout << "eps,acc\n";
  for (double e : o.eps) {
    std::snprintf(line, sizeof(line), "%g,%.12g\n", e, accuracy(pred, gt, target, e));
    std::cout << line;
  }
  std::snprintf(line, sizeof(line), "err,%.12g\n", avg_error(pred, gt, target));
  std::cout << line;
  return 0;
}

struct CheckOpts {
  std::string suite = "all";
  std::uint64_t seed = 1;
};

int run_check(const CheckOpts& o) {
  std::vector<PropertyResult> results;
  auto append = [&](std::vector<PropertyResult> part) {
    results.insert(results.end(), part.begin(), part.end());
  };
  if (o.suite != "gradients") {
    append(equivariance_suite(100, 64, o.seed));
    append(frame_suite(50, o.seed + 1));
    append(invariance_suite(50, 64, o.seed + 2));
  }
  if (o.suite != "equivariance") append(gradient_suite(o.seed + 3));

  print_results(std::cerr, results);
  std::cout << "property,observed,bound,status\n";
  char line[256];
  for (const PropertyResult& r : results) {
    std::snprintf(line, sizeof(line), "%s,%.6g,%.6g,%s\n", r.name.c_str(), r.observed, r.bound,
                  r.pass ? "pass" : "fail");
    std::cout << line;
  }
  return all_pass(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SE(3)-equivariant learned-LRF shape correspondence pipeline"};
  app.require_subcommand(1);

  GenOpts gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic pair dataset");
  cmd_gen->add_option("--out", gen.out, "Output directory")->required();
  cmd_gen->add_option("--count", gen.count, "Number of pairs")->capture_default_str();
  cmd_gen->add_option("--points", gen.points, "Points per cloud")->capture_default_str();
  cmd_gen->add_option("--segments", gen.segments, "Capsule segments per shape")
      ->capture_default_str();
  cmd_gen->add_option("--angle-range", gen.angle_range, "Joint angle range in radians")
      ->capture_default_str();
  cmd_gen->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();

  TrainOpts tr;
  CLI::App* cmd_train = app.add_subcommand("train", "Train a model on a pair manifest");
  cmd_train->add_option("--manifest", tr.manifest, "Dataset manifest path")->required();
  cmd_train->add_option("--out", tr.out, "Checkpoint output path")->capture_default_str();
  cmd_train->add_option("--metrics", tr.metrics, "Metrics CSV output path")
      ->capture_default_str();
  cmd_train->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str();
  cmd_train->add_option("--batch", tr.batch, "Pairs per optimizer step")->capture_default_str();
  cmd_train->add_option("--lr", tr.lr, "Adam learning rate")->capture_default_str();
  cmd_train->add_option("--milestones", tr.milestones, "Epochs at which the rate decays")
      ->delimiter(',')
      ->capture_default_str();
  cmd_train->add_option("--lr-factor", tr.lr_factor, "Decay factor at each milestone")
      ->capture_default_str();
  cmd_train->add_option("--k", tr.k, "Spatial neighbours per point")->capture_default_str();
  cmd_train->add_option("--layers", tr.layers, "Message-passing layers")->capture_default_str();
  cmd_train->add_option("--dim", tr.dim, "Scalar channel width")->capture_default_str();
  cmd_train->add_option("--nu", tr.nu, "Vector channel count")->capture_default_str();
  cmd_train->add_option("--d-t", tr.d_t, "Frame-projection perceptron width")
      ->capture_default_str();
  cmd_train->add_option("--k-latent", tr.k_latent, "Latent neighbours for soft construction")
      ->capture_default_str();
  cmd_train->add_option("--alpha", tr.alpha, "Mapping weight distance scale")
      ->capture_default_str();
  cmd_train->add_option("--lambda-cc", tr.lambda_cc, "Cross-construction loss weight")
      ->capture_default_str();
  cmd_train->add_option("--lambda-sc", tr.lambda_sc, "Self-construction loss weight")
      ->capture_default_str();
  cmd_train->add_option("--lambda-m", tr.lambda_m, "Mapping regularizer weight")
      ->capture_default_str();
  cmd_train->add_option("--seed", tr.seed, "Training seed")->capture_default_str();
  cmd_train->add_option("--threads", tr.threads, "Worker threads, 0 = all cores")
      ->capture_default_str();

  MatchOpts ma;
  CLI::App* cmd_match = app.add_subcommand("match", "Match two clouds with a trained model");
  cmd_match->add_option("--model", ma.model, "Checkpoint path")->required();
  cmd_match->add_option("--src", ma.src, "Source cloud .xyz")->required();
  cmd_match->add_option("--tgt", ma.tgt, "Target cloud .xyz")->required();
  cmd_match->add_option("--out", ma.out, "Correspondence output path")->capture_default_str();
  cmd_match->add_option("--export-colored", ma.colored,
                        "Also write the source cloud as 6-column xyz, colored by match");

  RefineOpts re;
  CLI::App* cmd_refine =
      app.add_subcommand("refine", "Match with per-pair test-time refinement");
  cmd_refine->add_option("--model", re.model, "Checkpoint path")->required();
  cmd_refine->add_option("--src", re.src, "Source cloud .xyz")->required();
  cmd_refine->add_option("--tgt", re.tgt, "Target cloud .xyz")->required();
  cmd_refine->add_option("--steps", re.steps, "Optimization steps")->capture_default_str();
  cmd_refine
      ->add_option("--lr", re.lr,
                   "Refinement step size. The default suits raw scanner-scale "
                   "coordinates; for unit-normalized clouds (e.g. gen-data output) "
                   "1e-3 moves on a useful timescale")
      ->capture_default_str();
  cmd_refine->add_option("--out", re.out, "Correspondence output path")->capture_default_str();
  cmd_refine->add_option("--trace", re.trace, "Loss trace CSV output path");
  cmd_refine->add_option("--strategy", re.strategy, "Refinement target: lrf or coord")
      ->check(CLI::IsMember({"lrf", "coord"}))
      ->capture_default_str();

  EvalOpts ev;
  CLI::App* cmd_eval = app.add_subcommand("eval", "Score a correspondence against ground truth");
  cmd_eval->add_option("--pred", ev.pred, "Predicted correspondence file")->required();
  cmd_eval->add_option("--gt", ev.gt, "Ground-truth index file")->required();
  cmd_eval->add_option("--tgt", ev.tgt, "Target cloud .xyz")->required();
  cmd_eval->add_option("--eps", ev.eps, "Accuracy tolerances as diameter fractions")
      ->delimiter(',')
      ->capture_default_str();

  CheckOpts ch;
  CLI::App* cmd_check = app.add_subcommand("check", "Run the architectural property suites");
  cmd_check->add_option("--suite", ch.suite, "equivariance, gradients or all")
      ->check(CLI::IsMember({"equivariance", "gradients", "all"}))
      ->capture_default_str();
  cmd_check->add_option("--seed", ch.seed, "Suite seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return 2;
  }

  try {
    if (cmd_gen->parsed()) return run_gen(gen);
    if (cmd_train->parsed()) return run_train(tr);
    if (cmd_match->parsed()) return run_match(ma);
    if (cmd_refine->parsed()) return run_refine(re);
    if (cmd_eval->parsed()) return run_eval(ev);
    if (cmd_check->parsed()) return run_check(ch);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
