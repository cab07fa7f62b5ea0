#include "hierpath/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hierpath/error.hpp"

namespace hierpath {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

CMapMat as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapMat(t.data().data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

MapMat as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw UsageError("Var is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw UsageError("operands live on different tapes");
  return tape_of(a);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

double log_sum_exp(const double* z, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, z[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - m);
  return m + std::log(s);
}

template <typename F, typename D>
Var unary(Var a, F forward, D derivative) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  const std::size_t ia = a.id;
  Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [ia, derivative](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    const Tensor& xv = t.value(ia);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(xv[i], y[i]);
  });
}

}  // namespace

const Tensor& Var::value() const {
  if (tape == nullptr) throw UsageError("Var is not attached to a tape");
  return tape->value(id);
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(const Tensor& param) {
  if (auto it = parameter_nodes_.find(&param); it != parameter_nodes_.end()) {
    return Var{this, it->second};
  }
  Node node;
  node.value = Tensor(param.shape(), param.values());
  node.needs_grad = param.requires_grad();
  node.source = &param;
  nodes_.push_back(std::move(node));
  parameter_nodes_.emplace(&param, nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape != this) throw UsageError("input recorded on a different tape");
    node.needs_grad = node.needs_grad || nodes_[in.id].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

std::span<const double> Tape::grad(Var v) const { return nodes_[v.id].grad; }

void Tape::backward(Var loss) {
  if (loss.tape != this) throw UsageError("loss recorded on a different tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     shape_string(nodes_[loss.id].value.shape()));
  }
  for (auto& node : nodes_) node.grad.clear();
  if (!nodes_[loss.id].needs_grad) return;
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (node.backward && !node.grad.empty()) node.backward(*this, id);
  }
}

std::vector<double> Tape::parameter_grad(const Tensor& param) const {
  auto it = parameter_nodes_.find(&param);
  if (it == parameter_nodes_.end() || nodes_[it->second].grad.empty()) {
    return std::vector<double>(param.size(), 0.0);
  }
  return nodes_[it->second].grad;
}

void Tape::accumulate_into_parameters() const {
  for (const auto& [ptr, id] : parameter_nodes_) {
    const auto& node = nodes_[id];
    if (!node.needs_grad || node.grad.empty()) continue;
    auto& g = const_cast<Tensor*>(ptr)->mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto& gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sum(Var a) {
  Tape& tape = tape_of(a);
  const auto& v = a.value().values();
  Tensor out = Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0));
  const std::size_t ia = a.id;
  Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [ia](Tape& t, std::size_t self) {
    const double g = t.grad_buffer(self)[0];
    for (auto& x : t.grad_buffer(ia)) x += g;
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty()) throw UsageError("weighted_sum of no terms");
  if (terms.size() != weights.size()) {
    throw UsageError("weighted_sum: " + std::to_string(terms.size()) + " terms, " +
                     std::to_string(weights.size()) + " weights");
  }
  Tape& tape = tape_of(terms[0]);
  double total = 0.0;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].size() != 1) throw DimensionError("weighted_sum terms must be scalars");
    total += weights[i] * terms[i].value()[0];
    ids.push_back(terms[i].id);
  }
  std::vector<double> w(weights.begin(), weights.end());
  return tape.record(Tensor::scalar(total), terms,
                     [ids = std::move(ids), w = std::move(w)](Tape& t, std::size_t self) {
                       const double g = t.grad_buffer(self)[0];
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         if (t.needs_grad(ids[i])) t.grad_buffer(ids[i])[0] += w[i] * g;
                       }
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  if (bv.rank() != 1 && bv.rank() != 2) {
    throw DimensionError("matmul: right operand must be rank 1 or 2, got " +
                         shape_string(bv.shape()));
  }
  const std::size_t r = av.shape()[0], k = av.shape()[1];
  const std::size_t c = bv.rank() == 2 ? bv.shape()[1] : 1;
  if (bv.shape()[0] != k) {
    throw DimensionError("matmul: inner extents " + std::to_string(k) + " vs " +
                         std::to_string(bv.shape()[0]));
  }
  Shape out_shape = bv.rank() == 2 ? Shape{r, c} : Shape{r};
  Tensor out(out_shape);
  auto out_map = as_matrix(out.values(), r, c);
  out_map.noalias() = as_matrix(av, r, k) * as_matrix(bv, k, c);
  const std::size_t ia = a.id, ib = b.id;
  Var inputs[] = {a, b};
  return tape.record(std::move(out), inputs, [ia, ib, r, k, c](Tape& t, std::size_t self) {
    auto g = as_matrix(t.grad_buffer(self), r, c);
    if (t.needs_grad(ia)) {
      as_matrix(t.grad_buffer(ia), r, k).noalias() += g * as_matrix(t.value(ib), k, c).transpose();
    }
    if (t.needs_grad(ib)) {
      as_matrix(t.grad_buffer(ib), k, c).noalias() += as_matrix(t.value(ia), r, k).transpose() * g;
    }
  });
}

Var linear(Var w, Var x, const Var* bias) {
  Tape& tape = tape_of(w, x);
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  require_rank(wv, 2, "linear");
  require_rank(xv, 1, "linear");
  const std::size_t r = wv.shape()[0], c = wv.shape()[1];
  if (xv.size() != c) {
    throw DimensionError("linear: weight " + shape_string(wv.shape()) + " vs input " +
                         shape_string(xv.shape()));
  }
  Tensor out(Shape{r});
  MapVec y(out.values().data(), static_cast<Eigen::Index>(r));
  y.noalias() = as_matrix(wv, r, c) * CMapVec(xv.data().data(), static_cast<Eigen::Index>(c));
  std::vector<Var> inputs = {w, x};
  std::size_t ib = 0;
  const bool has_bias = bias != nullptr;
  if (has_bias) {
    if (bias->tape != &tape) throw UsageError("bias recorded on a different tape");
    if (bias->value().shape() != Shape{r}) {
      throw DimensionError("linear: bias " + shape_string(bias->value().shape()) +
                           " for " + std::to_string(r) + " outputs");
    }
    for (std::size_t i = 0; i < r; ++i) out[i] += bias->value()[i];
    inputs.push_back(*bias);
    ib = bias->id;
  }
  const std::size_t iw = w.id, ix = x.id;
  return tape.record(std::move(out), inputs,
                     [iw, ix, ib, has_bias, r, c](Tape& t, std::size_t self) {
                       auto& gbuf = t.grad_buffer(self);
                       MapVec g(gbuf.data(), static_cast<Eigen::Index>(r));
                       if (t.needs_grad(iw)) {
                         const Tensor& xv = t.value(ix);
                         as_matrix(t.grad_buffer(iw), r, c).noalias() +=
                             g * CMapVec(xv.data().data(), static_cast<Eigen::Index>(c))
                                     .transpose();
                       }
                       if (t.needs_grad(ix)) {
                         auto& gx = t.grad_buffer(ix);
                         MapVec(gx.data(), static_cast<Eigen::Index>(c)).noalias() +=
                             as_matrix(t.value(iw), r, c).transpose() * g;
                       }
                       if (has_bias && t.needs_grad(ib)) {
                         auto& gb = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < r; ++i) gb[i] += gbuf[i];
                       }
                     });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat of no tensors");
  Tape& tape = tape_of(parts[0]);
  std::vector<double> out;
  std::vector<std::pair<std::size_t, std::size_t>> pieces;  // (id, length)
  for (const Var& p : parts) {
    require_rank(p.value(), 1, "concat");
    const auto& v = p.value().values();
    out.insert(out.end(), v.begin(), v.end());
    pieces.emplace_back(p.id, v.size());
  }
  return tape.record(Tensor::vector(std::move(out)), parts,
                     [pieces = std::move(pieces)](Tape& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       std::size_t offset = 0;
                       for (const auto& [id, len] : pieces) {
                         if (t.needs_grad(id)) {
                           auto& gi = t.grad_buffer(id);
                           for (std::size_t i = 0; i < len; ++i) gi[i] += g[offset + i];
                         }
                         offset += len;
                       }
                     });
}

Var slice(Var a, std::size_t offset, std::size_t length) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank(av, 1, "slice");
  if (length == 0 || offset + length > av.size()) {
    throw DimensionError("slice [" + std::to_string(offset) + ", " +
                         std::to_string(offset + length) + ") of length " +
                         std::to_string(av.size()));
  }
  std::vector<double> out(av.values().begin() + static_cast<std::ptrdiff_t>(offset),
                          av.values().begin() + static_cast<std::ptrdiff_t>(offset + length));
  const std::size_t ia = a.id;
  Var inputs[] = {a};
  return tape.record(Tensor::vector(std::move(out)), inputs,
                     [ia, offset, length](Tape& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       auto& ga = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < length; ++i) ga[offset + i] += g[i];
                     });
}

Var reshape(Var a, Shape shape) {
  Tape& tape = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [ia](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var vec(Var a) { return reshape(a, Shape{a.size()}); }

// ---------------------------------------------------------------------------
// Softmax family

Var softmax(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() == 0) throw DimensionError("softmax of a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double lse = log_sum_exp(x.data().data() + r * n, n);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = std::exp(x[r * n + i] - lse);
  }
  const std::size_t ia = a.id;
  Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [ia, n, rows](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) ga[r * n + i] += y[r * n + i] * (g[r * n + i] - dot);
    }
  });
}

Var log_softmax(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& x = a.value();
  if (x.rank() == 0) throw DimensionError("log_softmax of a scalar");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double lse = log_sum_exp(x.data().data() + r * n, n);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = x[r * n + i] - lse;
  }
  const std::size_t ia = a.id;
  Var inputs[] = {a};
  return tape.record(std::move(out), inputs, [ia, n, rows](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += g[r * n + i];
      for (std::size_t i = 0; i < n; ++i) {
        ga[r * n + i] += g[r * n + i] - std::exp(y[r * n + i]) * total;
      }
    }
  });
}

Var cross_entropy(Var logits, std::size_t target) {
  const std::size_t n = logits.size();
  if (target >= n) {
    throw UsageError("cross_entropy target " + std::to_string(target) + " out of range " +
                     std::to_string(n));
  }
  std::vector<double> one_hot(n, 0.0);
  one_hot[target] = 1.0;
  return cross_entropy(logits, one_hot);
}

Var cross_entropy(Var logits, std::span<const double> target) {
  Tape& tape = tape_of(logits);
  const Tensor& z = logits.value();
  require_rank(z, 1, "cross_entropy");
  if (target.size() != z.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(z.size()) + " logits, " +
                         std::to_string(target.size()) + " targets");
  }
  const std::size_t n = z.size();
  const double lse = log_sum_exp(z.data().data(), n);
  double loss = 0.0;
  double mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (target[i] != 0.0) loss -= target[i] * (z[i] - lse);
    mass += target[i];
  }
  std::vector<double> tgt(target.begin(), target.end());
  const std::size_t ia = logits.id;
  Var inputs[] = {logits};
  return tape.record(Tensor::scalar(loss), inputs,
                     [ia, n, lse, mass, tgt = std::move(tgt)](Tape& t, std::size_t self) {
                       const double g = t.grad_buffer(self)[0];
                       const Tensor& zv = t.value(ia);
                       auto& ga = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < n; ++i) {
                         ga[i] += g * (mass * std::exp(zv[i] - lse) - tgt[i]);
                       }
                     });
}

Var binary_cross_entropy(Var logits, std::span<const double> target,
                         std::span<const double> mask) {
  Tape& tape = tape_of(logits);
  const Tensor& z = logits.value();
  if (target.size() != z.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(z.size()) + " logits, " +
                         std::to_string(target.size()) + " targets");
  }
  if (!mask.empty() && mask.size() != z.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(z.size()) + " logits, " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::vector<double> m(z.size(), 1.0);
  if (!mask.empty()) m.assign(mask.begin(), mask.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    loss += m[i] * (std::max(z[i], 0.0) - z[i] * target[i] + std::log1p(std::exp(-std::abs(z[i]))));
  }
  std::vector<double> tgt(target.begin(), target.end());
  const std::size_t ia = logits.id;
  Var inputs[] = {logits};
  return tape.record(Tensor::scalar(loss), inputs,
                     [ia, tgt = std::move(tgt), m = std::move(m)](Tape& t, std::size_t self) {
                       const double g = t.grad_buffer(self)[0];
                       const Tensor& zv = t.value(ia);
                       auto& ga = t.grad_buffer(ia);
                       for (std::size_t i = 0; i < tgt.size(); ++i) {
                         const double s = zv[i] >= 0 ? 1.0 / (1.0 + std::exp(-zv[i]))
                                                     : std::exp(zv[i]) / (1.0 + std::exp(zv[i]));
                         ga[i] += g * m[i] * (s - tgt[i]);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Tensor / image ops

Var mode_k_product(Var t, Var u, int k) {
  Tape& tape = tape_of(t, u);
  const Tensor& tv = t.value();
  const Tensor& uv = u.value();
  require_rank(tv, 3, "mode_k_product");
  require_rank(uv, 2, "mode_k_product");
  if (k < 1 || k > 3) throw UsageError("mode_k_product axis must be 1, 2 or 3");
  const auto axis = static_cast<std::size_t>(k - 1);
  const std::size_t n = tv.shape()[axis];
  const std::size_t rows = uv.shape()[0];
  if (uv.shape()[1] != n) {
    throw DimensionError("mode_k_product on axis " + std::to_string(k) + ": tensor extent " +
                         std::to_string(n) + " vs matrix columns " +
                         std::to_string(uv.shape()[1]));
  }
  std::size_t pre = 1, post = 1;
  for (std::size_t i = 0; i < axis; ++i) pre *= tv.shape()[i];
  for (std::size_t i = axis + 1; i < 3; ++i) post *= tv.shape()[i];
  Shape out_shape = tv.shape();
  out_shape[axis] = rows;
  Tensor out(out_shape);
  const auto U = as_matrix(uv, rows, n);
  for (std::size_t p = 0; p < pre; ++p) {
    CMapMat block(tv.data().data() + p * n * post, static_cast<Eigen::Index>(n),
                  static_cast<Eigen::Index>(post));
    MapMat dst(out.values().data() + p * rows * post, static_cast<Eigen::Index>(rows),
               static_cast<Eigen::Index>(post));
    dst.noalias() = U * block;
  }
  const std::size_t it = t.id, iu = u.id;
  Var inputs[] = {t, u};
  return tape.record(
      std::move(out), inputs, [it, iu, pre, post, n, rows](Tape& tp, std::size_t self) {
        auto& g = tp.grad_buffer(self);
        const auto U = as_matrix(tp.value(iu), rows, n);
        const Tensor& tv = tp.value(it);
        const bool gt = tp.needs_grad(it), gu = tp.needs_grad(iu);
        for (std::size_t p = 0; p < pre; ++p) {
          MapMat gblock(g.data() + p * rows * post, static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(post));
          if (gt) {
            MapMat dt(tp.grad_buffer(it).data() + p * n * post, static_cast<Eigen::Index>(n),
                      static_cast<Eigen::Index>(post));
            dt.noalias() += U.transpose() * gblock;
          }
          if (gu) {
            CMapMat block(tv.data().data() + p * n * post, static_cast<Eigen::Index>(n),
                          static_cast<Eigen::Index>(post));
            as_matrix(tp.grad_buffer(iu), rows, n).noalias() += gblock * block.transpose();
          }
        }
      });
}

std::size_t conv_output_extent(std::size_t in, std::size_t filter, std::size_t stride,
                               std::size_t pad) {
  if (stride == 0) throw DimensionError("stride must be positive");
  if (filter == 0) throw DimensionError("filter size must be positive");
  const std::size_t span = in + 2 * pad;
  if (filter > span) {
    throw DimensionError("filter " + std::to_string(filter) + " larger than padded input " +
                         std::to_string(span));
  }
  if ((span - filter) % stride != 0) {
    throw DimensionError("non-integral conv output: (" + std::to_string(in) + " - " +
                         std::to_string(filter) + " + 2*" + std::to_string(pad) + ") / " +
                         std::to_string(stride));
  }
  return (span - filter) / stride + 1;
}

std::size_t pool_output_extent(std::size_t in, std::size_t window, std::size_t stride) {
  if (stride == 0) throw DimensionError("pool stride must be positive");
  if (window == 0) throw DimensionError("pool window must be positive");
  if (window > in) {
    throw DimensionError("pool window " + std::to_string(window) + " larger than input " +
                         std::to_string(in));
  }
  if ((in - window) % stride != 0) {
    throw DimensionError("non-integral pool output: (" + std::to_string(in) + " - " +
                         std::to_string(window) + ") / " + std::to_string(stride));
  }
  return (in - window) / stride + 1;
}

Var conv2d(Var x, Var w, std::size_t stride, std::size_t zero_pad) {
  Tape& tape = tape_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 3, "conv2d input");
  require_rank(wv, 4, "conv2d filters");
  const std::size_t D = xv.shape()[0], W = xv.shape()[1], H = xv.shape()[2];
  const std::size_t K = wv.shape()[0], F = wv.shape()[2];
  if (wv.shape()[1] != D || wv.shape()[3] != F) {
    throw DimensionError("conv2d: filters " + shape_string(wv.shape()) + " for input " +
                         shape_string(xv.shape()));
  }
  const std::size_t Wo = conv_output_extent(W, F, stride, zero_pad);
  const std::size_t Ho = conv_output_extent(H, F, stride, zero_pad);
  const std::size_t patch = D * F * F, cols = Wo * Ho;

  // im2col: rows indexed by (d, i, j), columns by (ow, oh).
  std::vector<double> col(patch * cols, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t i = 0; i < F; ++i) {
      for (std::size_t j = 0; j < F; ++j) {
        double* row = col.data() + ((d * F + i) * F + j) * cols;
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const auto iw = static_cast<std::ptrdiff_t>(ow * stride + i) -
                          static_cast<std::ptrdiff_t>(zero_pad);
          if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* src = xv.data().data() + (d * W + static_cast<std::size_t>(iw)) * H;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * stride + j) -
                            static_cast<std::ptrdiff_t>(zero_pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            row[ow * Ho + oh] = src[ih];
          }
        }
      }
    }
  }
  Tensor out(Shape{K, Wo, Ho});
  as_matrix(out.values(), K, cols).noalias() =
      as_matrix(wv, K, patch) * CMapMat(col.data(), static_cast<Eigen::Index>(patch),
                                        static_cast<Eigen::Index>(cols));
  const std::size_t ix = x.id, iw = w.id;
  Var inputs[] = {x, w};
  return tape.record(
      std::move(out), inputs,
      [ix, iw, D, W, H, K, F, Wo, Ho, stride, zero_pad, patch, cols,
       col = std::move(col)](Tape& t, std::size_t self) {
        auto g = as_matrix(t.grad_buffer(self), K, cols);
        const CMapMat colm(col.data(), static_cast<Eigen::Index>(patch),
                           static_cast<Eigen::Index>(cols));
        if (t.needs_grad(iw)) {
          as_matrix(t.grad_buffer(iw), K, patch).noalias() += g * colm.transpose();
        }
        if (t.needs_grad(ix)) {
          RowMat dcol = as_matrix(t.value(iw), K, patch).transpose() * g;
          auto& gx = t.grad_buffer(ix);
          for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t i = 0; i < F; ++i) {
              for (std::size_t j = 0; j < F; ++j) {
                const double* row = dcol.data() + ((d * F + i) * F + j) * cols;
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                  const auto xw = static_cast<std::ptrdiff_t>(ow * stride + i) -
                                  static_cast<std::ptrdiff_t>(zero_pad);
                  if (xw < 0 || xw >= static_cast<std::ptrdiff_t>(W)) continue;
                  double* dst = gx.data() + (d * W + static_cast<std::size_t>(xw)) * H;
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    const auto xh = static_cast<std::ptrdiff_t>(oh * stride + j) -
                                    static_cast<std::ptrdiff_t>(zero_pad);
                    if (xh < 0 || xh >= static_cast<std::ptrdiff_t>(H)) continue;
                    dst[xh] += row[ow * Ho + oh];
                  }
                }
              }
            }
          }
        }
      });
}

Var add_channel_bias(Var x, Var bias) {
  Tape& tape = tape_of(x, bias);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "add_channel_bias");
  const std::size_t D = xv.shape()[0], plane = xv.shape()[1] * xv.shape()[2];
  if (bias.value().shape() != Shape{D}) {
    throw DimensionError("add_channel_bias: bias " + shape_string(bias.value().shape()) +
                         " for " + std::to_string(D) + " channels");
  }
  Tensor out = xv;
  for (std::size_t d = 0; d < D; ++d) {
    const double b = bias.value()[d];
    for (std::size_t i = 0; i < plane; ++i) out[d * plane + i] += b;
  }
  const std::size_t ix = x.id, ib = bias.id;
  Var inputs[] = {x, bias};
  return tape.record(std::move(out), inputs, [ix, ib, D, plane](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    if (t.needs_grad(ix)) {
      auto& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t d = 0; d < D; ++d) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += g[d * plane + i];
        gb[d] += s;
      }
    }
  });
}

Var pool2d(Var x, std::size_t window, std::size_t stride, PoolKind kind) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "pool2d");
  const std::size_t D = xv.shape()[0], W = xv.shape()[1], H = xv.shape()[2];
  const std::size_t Wo = pool_output_extent(W, window, stride);
  const std::size_t Ho = pool_output_extent(H, window, stride);
  Tensor out(Shape{D, Wo, Ho});
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::max) argmax.resize(out.size());
  const double inv = 1.0 / static_cast<double>(window * window);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t ow = 0; ow < Wo; ++ow) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        const std::size_t o = (d * Wo + ow) * Ho + oh;
        if (kind == PoolKind::max) {
          std::size_t best = (d * W + ow * stride) * H + oh * stride;
          for (std::size_t i = 0; i < window; ++i) {
            for (std::size_t j = 0; j < window; ++j) {
              const std::size_t idx = (d * W + ow * stride + i) * H + oh * stride + j;
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          out[o] = xv[best];
          argmax[o] = best;
        } else {
          double s = 0.0;
          for (std::size_t i = 0; i < window; ++i) {
            for (std::size_t j = 0; j < window; ++j) {
              s += xv[(d * W + ow * stride + i) * H + oh * stride + j];
            }
          }
          out[o] = s * inv;
        }
      }
    }
  }
  const std::size_t ix = x.id;
  Var inputs[] = {x};
  return tape.record(std::move(out), inputs,
                     [ix, kind, D, W, H, Wo, Ho, window, stride, inv,
                      argmax = std::move(argmax)](Tape& t, std::size_t self) {
                       const auto& g = t.grad_buffer(self);
                       auto& gx = t.grad_buffer(ix);
                       if (kind == PoolKind::max) {
                         for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                         return;
                       }
                       for (std::size_t d = 0; d < D; ++d) {
                         for (std::size_t ow = 0; ow < Wo; ++ow) {
                           for (std::size_t oh = 0; oh < Ho; ++oh) {
                             const double go = g[(d * Wo + ow) * Ho + oh] * inv;
                             for (std::size_t i = 0; i < window; ++i) {
                               for (std::size_t j = 0; j < window; ++j) {
                                 gx[(d * W + ow * stride + i) * H + oh * stride + j] += go;
                               }
                             }
                           }
                         }
                       }
                     });
}

Var global_avg_pool(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "global_avg_pool");
  const std::size_t D = xv.shape()[0], plane = xv.shape()[1] * xv.shape()[2];
  const double inv = 1.0 / static_cast<double>(plane);
  Tensor out(Shape{D});
  for (std::size_t d = 0; d < D; ++d) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += xv[d * plane + i];
    out[d] = s * inv;
  }
  const std::size_t ix = x.id;
  Var inputs[] = {x};
  return tape.record(std::move(out), inputs, [ix, D, plane, inv](Tape& t, std::size_t self) {
    const auto& g = t.grad_buffer(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t i = 0; i < plane; ++i) gx[d * plane + i] += g[d] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Finite differences

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double step) {
  if (!(step > 0.0)) throw UsageError("finite difference step must be positive");
  Tensor probe(x.shape(), x.values());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value while differencing coordinate " +
                         std::to_string(i));
    }
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("relative_error: size " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()));
  }
  double diff = 0.0, scale_a = 0.0, scale_n = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale_a = std::max(scale_a, std::abs(analytic[i]));
    scale_n = std::max(scale_n, std::abs(numeric[i]));
  }
  return diff / std::max({scale_a, scale_n, floor});
}

}  // namespace hierpath
