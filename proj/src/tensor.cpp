#include "eqlf/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace eqlf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

std::int64_t product(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(std::string(op) + ": undefined tensor operand");
}

// Broadcast plan between two shapes, numpy trailing-dimension rules. Strides
// are in elements over the output index space; 0 marks a broadcast dimension.
struct BcPlan {
  std::vector<int> out;
  std::vector<std::int64_t> sa, sb;
  std::int64_t n = 1;
  bool same = false;
};

BcPlan make_plan(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  BcPlan p;
  const int na = static_cast<int>(a.size());
  const int nb = static_cast<int>(b.size());
  const int nd = std::max(na, nb);
  p.out.assign(nd, 1);
  p.sa.assign(nd, 0);
  p.sb.assign(nd, 0);
  for (int d = 0; d < nd; ++d) {
    const int da = d - (nd - na);
    const int db = d - (nd - nb);
    const int ad = da >= 0 ? a[da] : 1;
    const int bd = db >= 0 ? b[db] : 1;
    if (ad != bd && ad != 1 && bd != 1)
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
           " are not broadcast-compatible");
    p.out[d] = std::max(ad, bd);
  }
  std::int64_t sta = 1, stb = 1;
  for (int d = nd - 1; d >= 0; --d) {
    const int da = d - (nd - na);
    const int db = d - (nd - nb);
    const int ad = da >= 0 ? a[da] : 1;
    const int bd = db >= 0 ? b[db] : 1;
    p.sa[d] = (ad == 1 && p.out[d] > 1) ? 0 : sta;
    p.sb[d] = (bd == 1 && p.out[d] > 1) ? 0 : stb;
    sta *= ad;
    stb *= bd;
  }
  p.n = product(p.out);
  p.same = (a == b);
  return p;
}

// Visits every output element with offsets into both operands.
template <class V>
void walk(const BcPlan& p, V&& visit) {
  const int nd = static_cast<int>(p.out.size());
  if (p.same || nd == 0) {
    for (std::int64_t i = 0; i < p.n; ++i) visit(i, i, i);
    return;
  }
  std::vector<int> ctr(nd, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < p.n; ++i) {
    visit(i, oa, ob);
    for (int d = nd - 1; d >= 0; --d) {
      ++ctr[d];
      oa += p.sa[d];
      ob += p.sb[d];
      if (ctr[d] < p.out[d]) break;
      oa -= static_cast<std::int64_t>(p.out[d]) * p.sa[d];
      ob -= static_cast<std::int64_t>(p.out[d]) * p.sb[d];
      ctr[d] = 0;
    }
  }
}

// outer/axis/inner decomposition used by the reductions and softmax.
struct AxisPlan {
  std::int64_t outer = 1, axis = 1, inner = 1;
};

AxisPlan make_axis_plan(const std::vector<int>& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
         shape_str(shape));
  AxisPlan p;
  for (int d = 0; d < axis; ++d) p.outer *= shape[d];
  p.axis = shape[axis];
  for (int d = axis + 1; d < static_cast<int>(shape.size()); ++d) p.inner *= shape[d];
  return p;
}

std::vector<int> drop_axis(const std::vector<int>& shape, int axis) {
  std::vector<int> out;
  out.reserve(shape.size() - 1);
  for (int d = 0; d < static_cast<int>(shape.size()); ++d)
    if (d != axis) out.push_back(shape[d]);
  return out;
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) fail("tensor dimensions must be positive, got " + shape_str(shape));
  if (product(shape) != static_cast<std::int64_t>(values.size()))
    fail("value count " + std::to_string(values.size()) + " does not match shape " +
         shape_str(shape));
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
  shape_ = std::move(shape);
  requires_grad_ = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  std::vector<double> v(static_cast<std::size_t>(product(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::constant(std::vector<int> shape, double value) {
  std::vector<double> v(static_cast<std::size_t>(product(shape)), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  std::vector<double> v(static_cast<std::size_t>(product(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= ndim()) fail("dim axis out of range");
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

const std::vector<double>& Tensor::values() const {
  if (!data_) fail("values() on an undefined tensor");
  return *data_;
}

double Tensor::value() const {
  if (size() != 1) fail("value() requires a single-element tensor, shape is " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim()) fail("at(): index rank mismatch");
  std::int64_t off = 0;
  int d = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape_[static_cast<std::size_t>(d)]) fail("at(): index out of range");
    off = off * shape_[static_cast<std::size_t>(d)] + i;
    ++d;
  }
  return (*data_)[static_cast<std::size_t>(off)];
}

Tensor Tensor::leaf() const {
  Tensor t;
  t.data_ = data_;
  t.shape_ = shape_;
  t.requires_grad_ = true;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.data_ = data_;
  t.shape_ = shape_;
  return t;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tape ---------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

int Tape::node_of(const Tensor& t) {
  if (t.owner_ == this && t.node_ >= 0) return t.node_;
  if (!t.requires_grad_) return -1;
  const void* key = t.data_.get();
  auto it = leaves_.find(key);
  if (it != leaves_.end()) return it->second;
  Node leaf;
  leaf.out_size = t.size();
  nodes_.push_back(std::move(leaf));
  const int id = static_cast<int>(nodes_.size()) - 1;
  leaves_.emplace(key, id);
  leaf_ts_.emplace_back(key, t);
  return id;
}

std::vector<double>* GradSink::buf(int slot) {
  const int id = node_->inputs[static_cast<std::size_t>(slot)];
  if (id < 0) return nullptr;
  auto& g = tape_->grads_[static_cast<std::size_t>(id)];
  if (g.empty()) g.assign(static_cast<std::size_t>(tape_->nodes_[static_cast<std::size_t>(id)].out_size), 0.0);
  return &g;
}

void GradSink::add(int slot, const std::vector<double>& g) {
  if (auto* b = buf(slot)) {
    if (b->size() != g.size()) fail("gradient size mismatch in backward");
    for (std::size_t i = 0; i < g.size(); ++i) (*b)[i] += g[i];
  }
}

GradientMap Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("tape already consumed by backward(); construct a new tape");
  if (loss.size() != 1) fail("backward() requires a scalar loss, shape is " + shape_str(loss.shape()));
  if (loss.owner_ != this || loss.node_ < 0)
    fail("backward(): loss is not a tracked result of this tape");
  consumed_ = true;
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<std::size_t>(loss.node_)] = {1.0};
  for (int i = loss.node_; i >= 0; --i) {
    auto& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.back) continue;  // leaf
    GradSink sink(this, &node);
    node.back(g, sink);
    g.clear();
    g.shrink_to_fit();
    node.back = nullptr;  // release saved activations eagerly
  }
  GradientMap gm;
  for (auto& [key, t] : leaf_ts_) {
    auto it = leaves_.find(key);
    auto& g = grads_[static_cast<std::size_t>(it->second)];
    if (!g.empty()) gm.grads_.emplace(key, Tensor(t.shape(), std::move(g)));
  }
  nodes_.clear();
  grads_.clear();
  leaves_.clear();
  leaf_ts_.clear();
  return gm;
}

bool GradientMap::contains(const Tensor& leaf) const {
  return grads_.count(leaf.payload().get()) > 0;
}

const Tensor& GradientMap::at(const Tensor& leaf) const {
  auto it = grads_.find(leaf.payload().get());
  if (it == grads_.end())
    throw std::out_of_range("no gradient recorded for this tensor (not a reached leaf)");
  return it->second;
}

// Shared entry point for every op: computes nothing itself, just attaches the
// result to the active tape when some input is tracked.
Tensor record_op(const char* name, std::vector<int> shape, std::vector<double> values,
                 std::vector<const Tensor*> inputs,
                 std::function<void(const std::vector<double>&, GradSink&)> back) {
  Tensor out(std::move(shape), std::move(values), false);
  Tape* tp = Tape::active();
  if (!tp) return out;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  bool tracked = false;
  for (const Tensor* t : inputs) {
    const int id = tp->node_of(*t);
    ids.push_back(id);
    tracked = tracked || id >= 0;
  }
  if (!tracked) return out;
  if (tp->consumed_)
    throw std::logic_error(std::string(name) + ": tape already consumed; construct a new tape");
  Tape::Node node;
  node.inputs = std::move(ids);
  node.out_size = out.size();
  node.back = std::move(back);
  tp->nodes_.push_back(std::move(node));
  out.owner_ = tp;
  out.node_ = static_cast<int>(tp->nodes_.size()) - 1;
  out.requires_grad_ = true;
  return out;
}

// ---- linear algebra -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    fail("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m) * n);
  MMap(v.data(), m, n).noalias() = CMap(a.values().data(), m, k) * CMap(b.values().data(), k, n);
  auto pa = a.payload();
  auto pb = b.payload();
  return record_op("matmul", {m, n}, std::move(v), {&a, &b},
                   [pa, pb, m, k, n](const std::vector<double>& go, GradSink& s) {
                     CMap G(go.data(), m, n);
                     if (auto* ga = s.buf(0))
                       MMap(ga->data(), m, k).noalias() += G * CMap(pb->data(), k, n).transpose();
                     if (auto* gb = s.buf(1))
                       MMap(gb->data(), k, n).noalias() += CMap(pa->data(), m, k).transpose() * G;
                   });
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  if (a.ndim() != 2) fail("transpose: expected a 2-D tensor, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m) * n);
  MMap(v.data(), n, m) = CMap(a.values().data(), m, n).transpose();
  return record_op("transpose", {n, m}, std::move(v), {&a},
                   [m, n](const std::vector<double>& go, GradSink& s) {
                     if (auto* ga = s.buf(0))
                       MMap(ga->data(), m, n) += CMap(go.data(), n, m).transpose();
                   });
}

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  BcPlan p = make_plan(a.shape(), b.shape(), "add");
  std::vector<double> v(static_cast<std::size_t>(p.n));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) { v[i] = av[oa] + bv[ob]; });
  return record_op("add", p.out, std::move(v), {&a, &b},
                   [p](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     auto* gb = s.buf(1);
                     walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                       if (ga) (*ga)[oa] += go[i];
                       if (gb) (*gb)[ob] += go[i];
                     });
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  BcPlan p = make_plan(a.shape(), b.shape(), "sub");
  std::vector<double> v(static_cast<std::size_t>(p.n));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) { v[i] = av[oa] - bv[ob]; });
  return record_op("sub", p.out, std::move(v), {&a, &b},
                   [p](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     auto* gb = s.buf(1);
                     walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                       if (ga) (*ga)[oa] += go[i];
                       if (gb) (*gb)[ob] -= go[i];
                     });
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  BcPlan p = make_plan(a.shape(), b.shape(), "mul");
  std::vector<double> v(static_cast<std::size_t>(p.n));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) { v[i] = av[oa] * bv[ob]; });
  auto pa = a.payload();
  auto pb = b.payload();
  return record_op("mul", p.out, std::move(v), {&a, &b},
                   [p, pa, pb](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     auto* gb = s.buf(1);
                     const double* av = pa->data();
                     const double* bv = pb->data();
                     walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                       if (ga) (*ga)[oa] += go[i] * bv[ob];
                       if (gb) (*gb)[ob] += go[i] * av[oa];
                     });
                   });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_defined(a, "div");
  check_defined(b, "div");
  for (double x : b.values())
    if (std::fabs(x) < 1e-12)
      throw std::domain_error("div: divisor magnitude below 1e-12");
  BcPlan p = make_plan(a.shape(), b.shape(), "div");
  std::vector<double> v(static_cast<std::size_t>(p.n));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) { v[i] = av[oa] / bv[ob]; });
  auto pa = a.payload();
  auto pb = b.payload();
  return record_op("div", p.out, std::move(v), {&a, &b},
                   [p, pa, pb](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     auto* gb = s.buf(1);
                     const double* av = pa->data();
                     const double* bv = pb->data();
                     walk(p, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                       const double inv = 1.0 / bv[ob];
                       if (ga) (*ga)[oa] += go[i] * inv;
                       if (gb) (*gb)[ob] -= go[i] * av[oa] * inv * inv;
                     });
                   });
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor sub(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor sub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor div(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }

Tensor exp(const Tensor& a) {
  check_defined(a, "exp");
  std::vector<double> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.values()[i]);
  auto pv = std::make_shared<std::vector<double>>(v);
  return record_op("exp", a.shape(), std::move(v), {&a},
                   [pv](const std::vector<double>& go, GradSink& s) {
                     if (auto* ga = s.buf(0))
                       for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * (*pv)[i];
                   });
}

Tensor sqrt(const Tensor& a) {
  check_defined(a, "sqrt");
  std::vector<double> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.values()[i];
    if (x < 0.0) throw std::domain_error("sqrt: negative operand");
    v[i] = std::sqrt(x);
  }
  auto pv = std::make_shared<std::vector<double>>(v);
  return record_op("sqrt", a.shape(), std::move(v), {&a},
                   [pv](const std::vector<double>& go, GradSink& s) {
                     if (auto* ga = s.buf(0))
                       for (std::size_t i = 0; i < go.size(); ++i)
                         (*ga)[i] += go[i] * 0.5 / std::max((*pv)[i], 1e-12);
                   });
}

Tensor sigmoid(const Tensor& a) {
  check_defined(a, "sigmoid");
  std::vector<double> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.values()[i];
    v[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  auto pv = std::make_shared<std::vector<double>>(v);
  return record_op("sigmoid", a.shape(), std::move(v), {&a},
                   [pv](const std::vector<double>& go, GradSink& s) {
                     if (auto* ga = s.buf(0))
                       for (std::size_t i = 0; i < go.size(); ++i) {
                         const double y = (*pv)[i];
                         (*ga)[i] += go[i] * y * (1.0 - y);
                       }
                   });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  check_defined(a, "leaky_relu");
  std::vector<double> v(a.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.values()[i];
    v[i] = x >= 0.0 ? x : slope * x;
  }
  auto pa = a.payload();
  return record_op("leaky_relu", a.shape(), std::move(v), {&a},
                   [pa, slope](const std::vector<double>& go, GradSink& s) {
                     if (auto* ga = s.buf(0))
                       for (std::size_t i = 0; i < go.size(); ++i)
                         (*ga)[i] += go[i] * ((*pa)[i] >= 0.0 ? 1.0 : slope);
                   });
}

// ---- reductions ---------------------------------------------------------

Tensor reduce(const Tensor& a, int axis, Reduce kind) {
  check_defined(a, "reduce");
  AxisPlan p = make_axis_plan(a.shape(), axis, "reduce");
  std::vector<int> oshape = drop_axis(a.shape(), axis);
  std::vector<double> v(static_cast<std::size_t>(p.outer * p.inner));
  const double* av = a.values().data();
  std::vector<int> argmax;
  if (kind == Reduce::kMax) argmax.assign(v.size(), 0);
  for (std::int64_t o = 0; o < p.outer; ++o)
    for (std::int64_t ii = 0; ii < p.inner; ++ii) {
      const std::int64_t base = o * p.axis * p.inner + ii;
      const std::int64_t oi = o * p.inner + ii;
      if (kind == Reduce::kMax) {
        double best = av[base];
        int arg = 0;
        for (int j = 1; j < p.axis; ++j) {
          const double x = av[base + j * p.inner];
          if (x > best) {  // strict: ties keep the first maximal index
            best = x;
            arg = j;
          }
        }
        v[oi] = best;
        argmax[oi] = arg;
      } else {
        double acc = 0.0;
        for (int j = 0; j < p.axis; ++j) acc += av[base + j * p.inner];
        v[oi] = kind == Reduce::kMean ? acc / static_cast<double>(p.axis) : acc;
      }
    }
  return record_op(
      "reduce", std::move(oshape), std::move(v), {&a},
      [p, kind, argmax = std::move(argmax)](const std::vector<double>& go, GradSink& s) {
        auto* ga = s.buf(0);
        if (!ga) return;
        const double scale = kind == Reduce::kMean ? 1.0 / static_cast<double>(p.axis) : 1.0;
        for (std::int64_t o = 0; o < p.outer; ++o)
          for (std::int64_t ii = 0; ii < p.inner; ++ii) {
            const std::int64_t base = o * p.axis * p.inner + ii;
            const std::int64_t oi = o * p.inner + ii;
            if (kind == Reduce::kMax) {
              (*ga)[base + argmax[oi] * p.inner] += go[oi];
            } else {
              for (int j = 0; j < p.axis; ++j) (*ga)[base + j * p.inner] += go[oi] * scale;
            }
          }
      });
}

Tensor sum(const Tensor& a, int axis) { return reduce(a, axis, Reduce::kSum); }
Tensor mean(const Tensor& a, int axis) { return reduce(a, axis, Reduce::kMean); }
Tensor max(const Tensor& a, int axis) { return reduce(a, axis, Reduce::kMax); }

Tensor sum_all(const Tensor& a) {
  check_defined(a, "sum_all");
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  const std::int64_t n = a.size();
  return record_op("sum_all", {}, {acc}, {&a},
                   [n](const std::vector<double>& go, GradSink& s) {
                     if (auto* ga = s.buf(0))
                       for (std::int64_t i = 0; i < n; ++i) (*ga)[static_cast<std::size_t>(i)] += go[0];
                   });
}

Tensor row_l2_norm(const Tensor& a) {
  check_defined(a, "row_l2_norm");
  if (a.ndim() != 2) fail("row_l2_norm: expected a 2-D tensor, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  std::vector<double> v(static_cast<std::size_t>(r));
  const double* av = a.values().data();
  for (int i = 0; i < r; ++i) {
    double sq = 0.0;
    for (int j = 0; j < c; ++j) {
      const double x = av[static_cast<std::int64_t>(i) * c + j];
      sq += x * x;
    }
    v[static_cast<std::size_t>(i)] = std::sqrt(sq);
  }
  auto pa = a.payload();
  auto pn = std::make_shared<std::vector<double>>(v);
  return record_op("row_l2_norm", {r}, std::move(v), {&a},
                   [pa, pn, r, c](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     if (!ga) return;
                     for (int i = 0; i < r; ++i) {
                       const double inv = go[static_cast<std::size_t>(i)] /
                                          ((*pn)[static_cast<std::size_t>(i)] + 1e-12);
                       for (int j = 0; j < c; ++j) {
                         const std::int64_t k = static_cast<std::int64_t>(i) * c + j;
                         (*ga)[static_cast<std::size_t>(k)] += inv * (*pa)[static_cast<std::size_t>(k)];
                       }
                     }
                   });
}

Tensor softmax(const Tensor& a, int axis) {
  check_defined(a, "softmax");
  AxisPlan p = make_axis_plan(a.shape(), axis, "softmax");
  std::vector<double> v(a.values().size());
  const double* av = a.values().data();
  for (std::int64_t o = 0; o < p.outer; ++o)
    for (std::int64_t ii = 0; ii < p.inner; ++ii) {
      const std::int64_t base = o * p.axis * p.inner + ii;
      double m = av[base];
      for (int j = 1; j < p.axis; ++j) m = std::max(m, av[base + j * p.inner]);
      double z = 0.0;
      for (int j = 0; j < p.axis; ++j) {
        const double e = std::exp(av[base + j * p.inner] - m);
        v[static_cast<std::size_t>(base + j * p.inner)] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int j = 0; j < p.axis; ++j) v[static_cast<std::size_t>(base + j * p.inner)] *= inv;
    }
  auto ps = std::make_shared<std::vector<double>>(v);
  return record_op("softmax", a.shape(), std::move(v), {&a},
                   [p, ps](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     if (!ga) return;
                     for (std::int64_t o = 0; o < p.outer; ++o)
                       for (std::int64_t ii = 0; ii < p.inner; ++ii) {
                         const std::int64_t base = o * p.axis * p.inner + ii;
                         double dot = 0.0;
                         for (int j = 0; j < p.axis; ++j) {
                           const std::int64_t k = base + j * p.inner;
                           dot += go[static_cast<std::size_t>(k)] * (*ps)[static_cast<std::size_t>(k)];
                         }
                         for (int j = 0; j < p.axis; ++j) {
                           const std::int64_t k = base + j * p.inner;
                           (*ga)[static_cast<std::size_t>(k)] +=
                               (*ps)[static_cast<std::size_t>(k)] *
                               (go[static_cast<std::size_t>(k)] - dot);
                         }
                       }
                   });
}

Tensor cross3(const Tensor& a, const Tensor& b) {
  check_defined(a, "cross3");
  check_defined(b, "cross3");
  if (a.ndim() != 2 || a.dim(1) != 3 || a.shape() != b.shape())
    fail("cross3: expected matching [r,3] tensors, got " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  const int r = a.dim(0);
  std::vector<double> v(static_cast<std::size_t>(r) * 3);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (int i = 0; i < r; ++i) {
    const double* x = av + static_cast<std::int64_t>(i) * 3;
    const double* y = bv + static_cast<std::int64_t>(i) * 3;
    double* o = v.data() + static_cast<std::int64_t>(i) * 3;
    o[0] = x[1] * y[2] - x[2] * y[1];
    o[1] = x[2] * y[0] - x[0] * y[2];
    o[2] = x[0] * y[1] - x[1] * y[0];
  }
  auto pa = a.payload();
  auto pb = b.payload();
  return record_op("cross3", a.shape(), std::move(v), {&a, &b},
                   [pa, pb, r](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     auto* gb = s.buf(1);
                     for (int i = 0; i < r; ++i) {
                       const double* x = pa->data() + static_cast<std::int64_t>(i) * 3;
                       const double* y = pb->data() + static_cast<std::int64_t>(i) * 3;
                       const double* g = go.data() + static_cast<std::int64_t>(i) * 3;
                       if (ga) {  // d/da (a x b) applied to g is b x g
                         double* d = ga->data() + static_cast<std::int64_t>(i) * 3;
                         d[0] += y[1] * g[2] - y[2] * g[1];
                         d[1] += y[2] * g[0] - y[0] * g[2];
                         d[2] += y[0] * g[1] - y[1] * g[0];
                       }
                       if (gb) {  // d/db (a x b) applied to g is g x a
                         double* d = gb->data() + static_cast<std::int64_t>(i) * 3;
                         d[0] += g[1] * x[2] - g[2] * x[1];
                         d[1] += g[2] * x[0] - g[0] * x[2];
                         d[2] += g[0] * x[1] - g[1] * x[0];
                       }
                     }
                   });
}

// ---- shape ops ----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail("concat: no tensors given");
  for (const Tensor& t : parts) check_defined(t, "concat");
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) fail("concat: axis out of range");
  std::vector<int> oshape = parts[0].shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].ndim() != nd) fail("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && parts[i].dim(d) != oshape[static_cast<std::size_t>(d)])
        fail("concat: shape mismatch at " + shape_str(parts[i].shape()));
    oshape[static_cast<std::size_t>(axis)] += parts[i].dim(axis);
  }
  AxisPlan p = make_axis_plan(oshape, axis, "concat");
  std::vector<double> v(static_cast<std::size_t>(product(oshape)));
  std::vector<std::int64_t> blocks;  // per-part contiguous block length = dim(axis) * inner
  std::int64_t off = 0;
  const std::int64_t ostride = p.axis * p.inner;
  for (const Tensor& t : parts) {
    const std::int64_t blk = static_cast<std::int64_t>(t.dim(axis)) * p.inner;
    const double* tv = t.values().data();
    for (std::int64_t o = 0; o < p.outer; ++o)
      std::memcpy(v.data() + o * ostride + off, tv + o * blk,
                  static_cast<std::size_t>(blk) * sizeof(double));
    blocks.push_back(blk);
    off += blk;
  }
  std::vector<const Tensor*> ins;
  ins.reserve(parts.size());
  for (const Tensor& t : parts) ins.push_back(&t);
  return record_op("concat", std::move(oshape), std::move(v), std::move(ins),
                   [p, blocks, ostride](const std::vector<double>& go, GradSink& s) {
                     std::int64_t off = 0;
                     for (std::size_t part = 0; part < blocks.size(); ++part) {
                       const std::int64_t blk = blocks[part];
                       if (auto* g = s.buf(static_cast<int>(part)))
                         for (std::int64_t o = 0; o < p.outer; ++o)
                           for (std::int64_t j = 0; j < blk; ++j)
                             (*g)[static_cast<std::size_t>(o * blk + j)] +=
                                 go[static_cast<std::size_t>(o * ostride + off + j)];
                       off += blk;
                     }
                   });
}

Tensor gather(const Tensor& a, const std::vector<int>& rows) {
  check_defined(a, "gather");
  if (a.ndim() < 1) fail("gather: expected rank >= 1");
  const int n0 = a.dim(0);
  const std::int64_t rs = a.size() / n0;  // row size
  for (int r : rows)
    if (r < 0 || r >= n0)
      fail("gather: row index " + std::to_string(r) + " out of range [0," + std::to_string(n0) + ")");
  std::vector<int> oshape = a.shape();
  oshape[0] = static_cast<int>(rows.size());
  std::vector<double> v(static_cast<std::size_t>(rs) * rows.size());
  const double* av = a.values().data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(v.data() + static_cast<std::int64_t>(i) * rs, av + static_cast<std::int64_t>(rows[i]) * rs,
                static_cast<std::size_t>(rs) * sizeof(double));
  return record_op("gather", std::move(oshape), std::move(v), {&a},
                   [rows, rs](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     if (!ga) return;
                     for (std::size_t i = 0; i < rows.size(); ++i) {
                       double* dst = ga->data() + static_cast<std::int64_t>(rows[i]) * rs;
                       const double* src = go.data() + static_cast<std::int64_t>(i) * rs;
                       for (std::int64_t j = 0; j < rs; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor slice(const Tensor& a, int axis, int start, int stop) {
  check_defined(a, "slice");
  AxisPlan p = make_axis_plan(a.shape(), axis, "slice");
  if (start < 0 || stop > a.dim(axis) || start >= stop)
    fail("slice: bad range [" + std::to_string(start) + "," + std::to_string(stop) + ") for axis size " +
         std::to_string(a.dim(axis)));
  std::vector<int> oshape = a.shape();
  oshape[static_cast<std::size_t>(axis)] = stop - start;
  const std::int64_t blk = static_cast<std::int64_t>(stop - start) * p.inner;
  const std::int64_t astride = p.axis * p.inner;
  std::vector<double> v(static_cast<std::size_t>(p.outer * blk));
  const double* av = a.values().data();
  for (std::int64_t o = 0; o < p.outer; ++o)
    std::memcpy(v.data() + o * blk, av + o * astride + start * p.inner,
                static_cast<std::size_t>(blk) * sizeof(double));
  return record_op("slice", std::move(oshape), std::move(v), {&a},
                   [p, blk, astride, start](const std::vector<double>& go, GradSink& s) {
                     auto* ga = s.buf(0);
                     if (!ga) return;
                     for (std::int64_t o = 0; o < p.outer; ++o) {
                       double* dst = ga->data() + o * astride + start * p.inner;
                       const double* src = go.data() + o * blk;
                       for (std::int64_t j = 0; j < blk; ++j) dst[j] += src[j];
                     }
                   });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  check_defined(a, "reshape");
  if (product(shape) != a.size())
    fail("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  std::vector<double> v = a.values();
  return record_op("reshape", std::move(shape), std::move(v), {&a},
                   [](const std::vector<double>& go, GradSink& s) { s.add(0, go); });
}

// ---- gradient checking --------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& inputs, double step) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  GradientMap gm;
  {
    Tape tape;
    for (const Tensor& t : inputs) leaves.push_back(t.leaf());
    Tensor loss = f(leaves);
    if (loss.size() != 1) fail("grad_check: f must return a scalar");
    gm = tape.backward(loss);
  }
  std::vector<Tensor> plain;
  plain.reserve(inputs.size());
  for (const Tensor& t : inputs) plain.push_back(t.detached());
  const double f0 = f(plain).value();

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::vector<double>& base = inputs[i].values();
    const Tensor* analytic = gm.contains(leaves[i]) ? &gm.at(leaves[i]) : nullptr;
    for (std::size_t c = 0; c < base.size(); ++c) {
      std::vector<double> vp = base, vm = base;
      vp[c] += step;
      vm[c] -= step;
      std::vector<Tensor> args = plain;
      args[i] = Tensor(inputs[i].shape(), std::move(vp));
      const double fp = f(args).value();
      args[i] = Tensor(inputs[i].shape(), std::move(vm));
      const double fm = f(args).value();
      const double dp = (fp - f0) / step;
      const double dm = (f0 - fm) / step;
      if (std::fabs(dp - dm) > 1e-3 * std::max({1.0, std::fabs(dp), std::fabs(dm)})) {
        ++res.skipped;  // one-sided slopes disagree: a kink or selection flip
        continue;
      }
      const double central = (fp - fm) / (2.0 * step);
      const double a = analytic ? analytic->values()[c] : 0.0;
      const double err = std::fabs(a - central) / std::max({1.0, std::fabs(a), std::fabs(central)});
      res.max_rel_err = std::max(res.max_rel_err, err);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace eqlf
