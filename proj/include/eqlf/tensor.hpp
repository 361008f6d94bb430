#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "eqlf/common.hpp"

namespace eqlf {

class Tape;

// Dense float64 tensor, row-major, immutable payload. Copies share the
// payload. A tensor created by an op while a Tape is active carries a handle
// into that tape; a tensor with requires_grad set and no handle is a leaf and
// gets registered with the tape on first use.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, double value);
  static Tensor scalar(double value);
  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::int64_t size() const;
  bool requires_grad() const { return requires_grad_; }

  const std::vector<double>& values() const;
  double value() const;  // scalar convenience; requires size() == 1
  double at(std::initializer_list<int> idx) const;

  // Same payload, flagged as a gradient leaf.
  Tensor leaf() const;
  // Same payload, no grad flag, no tape handle.
  Tensor detached() const;

  const std::shared_ptr<const std::vector<double>>& payload() const { return data_; }

 private:
  friend class Tape;
  friend Tensor record_op(const char* name, std::vector<int> shape, std::vector<double> values,
                          std::vector<const Tensor*> inputs,
                          std::function<void(const std::vector<double>&, class GradSink&)> back);
  std::shared_ptr<const std::vector<double>> data_;
  std::vector<int> shape_;
  const Tape* owner_ = nullptr;
  int node_ = -1;
  bool requires_grad_ = false;
};

std::string shape_str(const std::vector<int>& shape);

// Gradients returned by Tape::backward, keyed by leaf payload identity.
class GradientMap {
 public:
  bool contains(const Tensor& leaf) const;
  const Tensor& at(const Tensor& leaf) const;

 private:
  friend class Tape;
  std::unordered_map<const void*, Tensor> grads_;
};

// Reverse-mode tape. Construction makes it the active tape for the current
// thread (one tape per thread; tapes on different threads are independent).
// backward() consumes the tape: op records and saved activations are released
// and no further recording happens through it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Reverse sweep from a scalar loss. Gradients of all leaves reached by the
  // sweep are returned; leaves the loss does not depend on are absent.
  GradientMap backward(const Tensor& loss);

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  friend Tensor record_op(const char* name, std::vector<int> shape, std::vector<double> values,
                          std::vector<const Tensor*> inputs,
                          std::function<void(const std::vector<double>&, class GradSink&)> back);
  friend class GradSink;

  struct Node {
    std::vector<int> inputs;  // node ids; -1 for untracked slots
    std::int64_t out_size = 0;
    std::function<void(const std::vector<double>&, GradSink&)> back;  // empty for leaves
  };

  int node_of(const Tensor& t);  // registers leaves on demand; -1 for constants

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaves_;          // payload ptr -> node id
  std::vector<std::pair<const void*, Tensor>> leaf_ts_;  // payload ptr -> leaf tensor
  std::vector<std::vector<double>> grads_;
  Tape* prev_ = nullptr;
  bool consumed_ = false;
};

// Accumulates gradient contributions into the input slots of one node.
class GradSink {
 public:
  // Buffer for input slot i, or nullptr if that input is not tracked (so the
  // op can skip computing the gradient entirely).
  std::vector<double>* buf(int slot);
  void add(int slot, const std::vector<double>& g);

 private:
  friend class Tape;
  GradSink(Tape* tape, const Tape::Node* node) : tape_(tape), node_(node) {}
  Tape* tape_;
  const Tape::Node* node_;
};

// ---- ops ----------------------------------------------------------------
// All ops validate shapes (std::invalid_argument on mismatch) and record
// themselves on the active tape when any input is tracked.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-D

// Elementwise with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // any |divisor| < 1e-12 is an error
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);

Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);  // negative operands are a domain error
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);

enum class Reduce { kSum, kMean, kMax };
Tensor reduce(const Tensor& a, int axis, Reduce kind);  // removes the axis
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor max(const Tensor& a, int axis);  // ties: gradient to the first maximal index
Tensor sum_all(const Tensor& a);        // scalar

Tensor row_l2_norm(const Tensor& a);  // [r,c] -> [r]; backward stabilized with eps 1e-12
Tensor softmax(const Tensor& a, int axis);
Tensor cross3(const Tensor& a, const Tensor& b);  // [r,3] x [r,3] rowwise

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor gather(const Tensor& a, const std::vector<int>& rows);  // axis 0
Tensor slice(const Tensor& a, int axis, int start, int stop);
Tensor reshape(const Tensor& a, std::vector<int> shape);

// ---- gradient checking --------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates at detected kinks (one-sided slopes disagree)
};

// Central finite differences against the analytic gradient of a scalar-valued
// function, coordinate by coordinate. Coordinates where the two one-sided
// slopes disagree (nondifferentiable points such as max ties or relu kinks)
// are skipped, not failed. Error is |analytic - central| / max(1, |analytic|,
// |central|).
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           const std::vector<Tensor>& inputs, double step = 1e-5);

}  // namespace eqlf
