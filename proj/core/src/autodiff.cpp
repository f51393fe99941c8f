#include "poseadapt/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace poseadapt::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes [" << a.rows() << "x" << a.cols() << "] and [" << b.rows()
     << "x" << b.cols() << "]";
  throw std::invalid_argument(os.str());
}

void check_finite(const char* op, const Matrix& m) {
  if (!m.allFinite()) {
    throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
  }
}

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

}  // namespace

const Matrix& Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (!is_scalar(v)) {
    throw std::invalid_argument("Var::scalar: tensor is not 1x1");
  }
  return v(0, 0);
}

Var Tape::record(const char* op, Matrix value, bool requires_grad,
                 std::function<void(Tape&, const Node&)> backprop) {
  check_finite(op, value);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = op;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_ref(std::size_t idx) {
  Node& n = nodes_[idx];
  if (n.grad.size() == 0) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Tape::check_same_tape(Var v) const {
  if (v.tape_ != this) {
    throw std::invalid_argument("tensor belongs to a different tape");
  }
}

Var Tape::leaf(Parameter& p) {
  Parameter* pp = &p;
  return record("leaf", p.value, true, [pp](Tape& t, const Node& n) {
    (void)t;
    pp->grad += n.grad;
  });
}

Var Tape::constant(Matrix v) { return record("constant", std::move(v), false, nullptr); }

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  const std::size_t ai = a.idx_, bi = b.idx_;
  return record("matmul", av * bv, rg, [ai, bi](Tape& t, const Node& n) {
    if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad * t.nodes_[bi].value.transpose();
    if (t.nodes_[bi].requires_grad) t.grad_ref(bi) += t.nodes_[ai].value.transpose() * n.grad;
  });
}

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  const std::size_t ai = a.idx_, bi = b.idx_;
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) {
    return record("add", av + bv, rg, [ai, bi](Tape& t, const Node& n) {
      if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad;
      if (t.nodes_[bi].requires_grad) t.grad_ref(bi) += n.grad;
    });
  }
  if (is_scalar(bv)) {
    return record("add", (av.array() + bv(0, 0)).matrix(), rg, [ai, bi](Tape& t, const Node& n) {
      if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad;
      if (t.nodes_[bi].requires_grad) t.grad_ref(bi)(0, 0) += n.grad.sum();
    });
  }
  if (is_scalar(av)) {
    return add(b, a);
  }
  shape_error("add", av, bv);
}

Var Tape::sub(Var a, Var b) { return add(a, negate(b)); }

Var Tape::add_bias(Var a, Var bias) {
  check_same_tape(a);
  check_same_tape(bias);
  const Matrix& av = node(a).value;
  const Matrix& bv = node(bias).value;
  if (bv.rows() != 1 || bv.cols() != av.cols()) shape_error("add_bias", av, bv);
  const std::size_t ai = a.idx_, bi = bias.idx_;
  const bool rg = node(a).requires_grad || node(bias).requires_grad;
  Matrix out = av;
  out.rowwise() += bv.row(0);
  return record("add_bias", std::move(out), rg, [ai, bi](Tape& t, const Node& n) {
    if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad;
    if (t.nodes_[bi].requires_grad) t.grad_ref(bi) += n.grad.colwise().sum();
  });
}

Var Tape::relu(Var a) {
  check_same_tape(a);
  const Matrix& av = node(a).value;
  const std::size_t ai = a.idx_;
  return record("relu", av.cwiseMax(0.0), node(a).requires_grad, [ai](Tape& t, const Node& n) {
    t.grad_ref(ai) += (t.nodes_[ai].value.array() > 0.0).cast<double>().matrix().cwiseProduct(n.grad);
  });
}

Var Tape::dropout(Var a, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("dropout: p must be in [0, 1)");
  }
  if (!train || p == 0.0) return a;
  check_same_tape(a);
  const Matrix& av = node(a).value;
  Matrix mask(av.rows(), av.cols());
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) {
      mask(i, j) = rng.uniform() >= p ? keep_scale : 0.0;
    }
  }
  const std::size_t ai = a.idx_;
  return record("dropout", av.cwiseProduct(mask), node(a).requires_grad,
                [ai, mask](Tape& t, const Node& n) { t.grad_ref(ai) += n.grad.cwiseProduct(mask); });
}

Var Tape::exp(Var a) {
  check_same_tape(a);
  const std::size_t ai = a.idx_;
  Matrix out = node(a).value.array().exp().matrix();
  return record("exp", std::move(out), node(a).requires_grad, [ai](Tape& t, const Node& n) {
    t.grad_ref(ai) += n.grad.cwiseProduct(n.value);
  });
}

Var Tape::negate(Var a) { return scale(a, -1.0); }

Var Tape::scale(Var a, double c) {
  check_same_tape(a);
  const std::size_t ai = a.idx_;
  return record("scale", node(a).value * c, node(a).requires_grad,
                [ai, c](Tape& t, const Node& n) { t.grad_ref(ai) += c * n.grad; });
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  const std::size_t ai = a.idx_, bi = b.idx_;
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  if (av.rows() == bv.rows() && av.cols() == bv.cols()) {
    return record("mul", av.cwiseProduct(bv), rg, [ai, bi](Tape& t, const Node& n) {
      if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad.cwiseProduct(t.nodes_[bi].value);
      if (t.nodes_[bi].requires_grad) t.grad_ref(bi) += n.grad.cwiseProduct(t.nodes_[ai].value);
    });
  }
  if (is_scalar(bv)) {
    return record("mul", av * bv(0, 0), rg, [ai, bi](Tape& t, const Node& n) {
      if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad * t.nodes_[bi].value(0, 0);
      if (t.nodes_[bi].requires_grad) t.grad_ref(bi)(0, 0) += n.grad.cwiseProduct(t.nodes_[ai].value).sum();
    });
  }
  if (is_scalar(av)) {
    return mul(b, a);
  }
  shape_error("mul", av, bv);
}

Var Tape::l1_distance(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error("l1_distance", av, bv);
  const Matrix diff = av - bv;
  Matrix out = diff.cwiseAbs().rowwise().sum();
  // sign with sign(0) = 0, so a perfect prediction is a stable fixed point
  Matrix sgn = (diff.array() > 0.0).cast<double>() - (diff.array() < 0.0).cast<double>();
  const std::size_t ai = a.idx_, bi = b.idx_;
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  return record("l1_distance", std::move(out), rg, [ai, bi, sgn](Tape& t, const Node& n) {
    const Matrix scaled = sgn.array().colwise() * n.grad.col(0).array();
    if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += scaled;
    if (t.nodes_[bi].requires_grad) t.grad_ref(bi) -= scaled;
  });
}

Var Tape::softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  check_same_tape(logits);
  const Matrix& z = node(logits).value;
  if (static_cast<std::size_t>(z.rows()) != labels.size()) {
    std::ostringstream os;
    os << "softmax_cross_entropy: " << z.rows() << " rows vs " << labels.size() << " labels";
    throw std::invalid_argument(os.str());
  }
  Matrix softmax(z.rows(), z.cols());
  Matrix out(z.rows(), 1);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= z.cols()) {
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    }
    const double zmax = z.row(i).maxCoeff();
    const Eigen::ArrayXd shifted = z.row(i).array() - zmax;
    const Eigen::ArrayXd e = shifted.exp();
    const double denom = e.sum();
    softmax.row(i) = (e / denom).matrix().transpose();
    out(i, 0) = std::log(denom) - shifted(label);
  }
  const std::size_t zi = logits.idx_;
  return record("softmax_cross_entropy", std::move(out), node(logits).requires_grad,
                [zi, softmax, labels](Tape& t, const Node& n) {
                  Matrix g = softmax;
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
                    g.row(i) *= n.grad(i, 0);
                  }
                  t.grad_ref(zi) += g;
                });
}

Var Tape::concat_rows(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  if (av.cols() != bv.cols()) shape_error("concat_rows", av, bv);
  Matrix out(av.rows() + bv.rows(), av.cols());
  out.topRows(av.rows()) = av;
  out.bottomRows(bv.rows()) = bv;
  const std::size_t ai = a.idx_, bi = b.idx_;
  const Eigen::Index arows = av.rows(), brows = bv.rows();
  const bool rg = node(a).requires_grad || node(b).requires_grad;
  return record("concat_rows", std::move(out), rg, [ai, bi, arows, brows](Tape& t, const Node& n) {
    if (t.nodes_[ai].requires_grad) t.grad_ref(ai) += n.grad.topRows(arows);
    if (t.nodes_[bi].requires_grad) t.grad_ref(bi) += n.grad.bottomRows(brows);
  });
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  check_same_tape(a);
  const Matrix& av = node(a).value;
  if (start < 0 || count < 1 || start + count > av.cols()) {
    std::ostringstream os;
    os << "slice_cols: [" << start << ", " << start + count << ") out of range for " << av.cols()
       << " columns";
    throw std::invalid_argument(os.str());
  }
  const std::size_t ai = a.idx_;
  return record("slice_cols", av.middleCols(start, count), node(a).requires_grad,
                [ai, start, count](Tape& t, const Node& n) {
                  t.grad_ref(ai).middleCols(start, count) += n.grad;
                });
}

Var Tape::mean(Var a) {
  check_same_tape(a);
  const Matrix& av = node(a).value;
  const double inv = 1.0 / static_cast<double>(av.size());
  Matrix out(1, 1);
  out(0, 0) = av.sum() * inv;
  const std::size_t ai = a.idx_;
  return record("mean", std::move(out), node(a).requires_grad, [ai, inv](Tape& t, const Node& n) {
    t.grad_ref(ai).array() += n.grad(0, 0) * inv;
  });
}

Var Tape::sum(Var a) {
  check_same_tape(a);
  Matrix out(1, 1);
  out(0, 0) = node(a).value.sum();
  const std::size_t ai = a.idx_;
  return record("sum", std::move(out), node(a).requires_grad, [ai](Tape& t, const Node& n) {
    t.grad_ref(ai).array() += n.grad(0, 0);
  });
}

Var Tape::gradient_reversal(Var a, double lambda) {
  if (lambda < 0.0) {
    throw std::invalid_argument("gradient_reversal: lambda must be >= 0");
  }
  check_same_tape(a);
  const std::size_t ai = a.idx_;
  return record("gradient_reversal", node(a).value, node(a).requires_grad,
                [ai, lambda](Tape& t, const Node& n) { t.grad_ref(ai) -= lambda * n.grad; });
}

void Tape::backward(Var loss) {
  check_same_tape(loss);
  const Node& top = node(loss);
  if (!is_scalar(top.value)) {
    throw std::invalid_argument("backward: loss must be a 1x1 tensor");
  }
  grad_ref(loss.idx_)(0, 0) += 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backprop) continue;
    n.backprop(*this, n);
  }
}

void adam_update(Matrix& value, const Matrix& grad, AdamState& state, double lr) {
  if (state.m.size() == 0) {
    state.m = Matrix::Zero(value.rows(), value.cols());
    state.v = Matrix::Zero(value.rows(), value.cols());
  }
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    shape_error("adam_update", value, grad);
  }
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  state.step += 1;
  state.m = kBeta1 * state.m + (1.0 - kBeta1) * grad;
  state.v = kBeta2 * state.v + (1.0 - kBeta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  const Matrix m_hat = state.m / c1;
  const Matrix v_hat = state.v / c2;
  value.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + kEps);
}

Adam::Adam(std::vector<Parameter*> params, double lr) : params_(std::move(params)), lr_(lr) {
  states_.resize(params_.size());
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adam_update(params_[i]->value, params_[i]->grad, states_[i], lr_);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

GradCheckReport check_gradients(const std::vector<Parameter*>& params,
                                const std::function<Var(Tape&)>& build_loss,
                                std::uint64_t seed, int max_coords, double h) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  const auto eval = [&]() {
    Tape tape;
    return build_loss(tape).scalar();
  };

  Rng rng = Rng::stream(seed, {rng_tag::kGradCheck});
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    const Eigen::Index total = p.size();
    std::vector<Eigen::Index> coords;
    if (total <= max_coords) {
      for (Eigen::Index c = 0; c < total; ++c) coords.push_back(c);
    } else {
      for (int c = 0; c < max_coords; ++c) {
        coords.push_back(static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(total))));
      }
    }
    for (Eigen::Index c : coords) {
      double* slot = p.value.data() + c;
      const double saved = *slot;
      *slot = saved + h;
      const double up = eval();
      *slot = saved - h;
      const double down = eval();
      *slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double exact = analytic[pi](c);
      const double denom = std::max({std::abs(numeric), std::abs(exact), 1e-2});
      const double rel = std::abs(numeric - exact) / denom;
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_coordinate =
            p.name + "[" + std::to_string(c) + "] analytic=" + std::to_string(exact) +
            " numeric=" + std::to_string(numeric);
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return report;
}

}  // namespace poseadapt::ad
