#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "poseadapt/rng.hpp"

namespace poseadapt::ad {

using Matrix = Eigen::MatrixXd;

// Trainable tensor. Lives outside any tape; gradients are accumulated
// into `grad` by Tape::backward through leaf nodes.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(name_)), value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}

  std::string name;
  Matrix value;
  Matrix grad;

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t idx) : tape_(tape), idx_(idx) {}
  Tape* tape_ = nullptr;
  std::size_t idx_ = 0;
};

// Reverse-mode tape over dense float64 matrices. Nodes are recorded in
// topological order by construction; backward() walks them in reverse.
// Any non-finite forward value aborts with the offending op's name.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Parameter& p);
  Var constant(Matrix v);

  Var matmul(Var a, Var b);
  // Same shapes, or either side 1x1 (trainable scalars like s_t enter here).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  // Row vector [1 x n] added to every row of [m x n].
  Var add_bias(Var a, Var bias);
  Var relu(Var a);
  // Inverted dropout with a seeded mask in train mode; identity in eval mode.
  Var dropout(Var a, double p, Rng& rng, bool train);
  Var exp(Var a);
  Var negate(Var a);
  Var scale(Var a, double c);
  // Elementwise product; either side may be 1x1.
  Var mul(Var a, Var b);
  // Per-row l1 distance -> [m x 1]. Subgradient at zero is 0.
  Var l1_distance(Var a, Var b);
  // Per-sample cross entropy of row-wise softmax -> [m x 1].
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);
  Var concat_rows(Var a, Var b);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  Var mean(Var a);
  Var sum(Var a);
  // Identity forward; backward multiplies the incoming gradient by -lambda.
  Var gradient_reversal(Var a, double lambda);

  // Reverse accumulation from a scalar loss into every reachable leaf's
  // Parameter::grad. Gradients of intermediate nodes are kept on the tape.
  void backward(Var loss);

  const Matrix& value(Var v) const { return nodes_[v.idx_].value; }
  const Matrix& grad(Var v) const { return nodes_[v.idx_].grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    const char* op = "";
    std::function<void(Tape&, const Node&)> backprop;
  };

  Var record(const char* op, Matrix value, bool requires_grad,
             std::function<void(Tape&, const Node&)> backprop);
  Matrix& grad_ref(std::size_t idx);
  const Node& node(Var v) const { return nodes_[v.idx_]; }
  void check_same_tape(Var v) const;

  std::vector<Node> nodes_;
};

// Adam accumulators for one parameter; beta1 = 0.9, beta2 = 0.999,
// eps = 1e-8, bias-corrected.
struct AdamState {
  Matrix m;
  Matrix v;
  std::int64_t step = 0;
};

void adam_update(Matrix& value, const Matrix& grad, AdamState& state, double lr);

// Optimizer over a fixed parameter list. step() consumes Parameter::grad.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr);

  void step();
  void zero_grad();
  const std::vector<Parameter*>& params() const { return params_; }
  double learning_rate() const { return lr_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<AdamState> states_;
  double lr_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_coordinate;
  int checked = 0;
  bool pass(double tol = 1e-5) const { return checked > 0 && max_rel_err < tol; }
};

// Central finite differences (h = 1e-4) against the tape gradients for a
// scalar loss rebuilt from the current parameter values. The numeric side
// uses forward evaluations only, so it is independent of the backward
// implementation it checks. Up to max_coords coordinates are sampled per
// parameter (all of them for small parameters).
GradCheckReport check_gradients(const std::vector<Parameter*>& params,
                                const std::function<Var(Tape&)>& build_loss,
                                std::uint64_t seed, int max_coords = 12, double h = 1e-4);

}  // namespace poseadapt::ad
