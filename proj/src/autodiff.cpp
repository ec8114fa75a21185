#include "calm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>

#include "calm/error.hpp"

namespace calm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

Tape& common_tape(const char* op, Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) shape_error(op, "operands live on different tapes");
  return *a.tape();
}

std::size_t last_dim(const char* op, const Shape& s) {
  if (s.empty()) shape_error(op, "needs rank >= 1, got a scalar");
  return s.back();
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Copies `in` into `out` with axes (pre, n1, mid, n2, post) reordered to
// (pre, n2, mid, n1, post).
void swap_axes_copy(std::span<const double> in, std::span<double> out, std::size_t pre, std::size_t n1,
                    std::size_t mid, std::size_t n2, std::size_t post) {
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t a = 0; a < n1; ++a)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t b = 0; b < n2; ++b) {
          const double* src = in.data() + ((((p * n1 + a) * mid + m) * n2 + b) * post);
          double* dst = out.data() + ((((p * n2 + b) * mid + m) * n1 + a) * post);
          std::copy(src, src + post, dst);
        }
}

}  // namespace

void zero_grads(std::span<Parameter> params) {
  for (auto& p : params) p.grad.fill(0.0);
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("Var: handle is not bound to a tape");
  return tape_->value(*this);
}

void Tape::check_owner(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("tape: variable does not belong to this tape");
  }
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
  Node n;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (Var in : inputs) {
    check_owner(in);
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  return n.param ? n.param->value : n.value;
}

bool Tape::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id()].requires_grad;
}

Tensor& Tape::grad(Var v) {
  check_owner(v);
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Tensor(value(v).shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (value(loss).size() != 1) {
    throw ContractError("backward: loss must be a single value, got shape " + to_string(value(loss).shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad(loss).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.param) {
      add_into(n.param->grad, n.grad);
    } else if (n.backward) {
      // The callback may touch other nodes' accumulators but never this one.
      const Tensor g = std::move(n.grad);
      n.backward(*this, g, n.value);
    }
    nodes_[i].grad = Tensor();
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = common_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  auto mismatch = [&] { shape_error("matmul", "cannot multiply " + to_string(as) + " by " + to_string(bs)); };
  if (as.size() < 2 || bs.size() < 2) mismatch();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  if (bs[bs.size() - 2] != k) mismatch();
  const std::size_t n = bs.back();

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);

  if (bs.size() == 2) {
    const auto rows = static_cast<Eigen::Index>(av.size() / k);
    Tensor out(out_shape);
    MutMap(out.data().data(), rows, n).noalias() =
        ConstMap(av.data().data(), rows, k) * ConstMap(bv.data().data(), k, n);
    return tape.record(std::move(out), std::array{a, b}, [a, b, rows, k, n](Tape& t, const Tensor& g, const Tensor&) {
      ConstMap gm(g.data().data(), rows, n);
      if (t.requires_grad(a)) {
        MutMap(t.grad(a).data().data(), rows, k).noalias() += gm * ConstMap(t.value(b).data().data(), k, n).transpose();
      }
      if (t.requires_grad(b)) {
        MutMap(t.grad(b).data().data(), k, n).noalias() += ConstMap(t.value(a).data().data(), rows, k).transpose() * gm;
      }
    });
  }

  if (!std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2)) mismatch();
  const std::size_t batch = av.size() / (m * k);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data().data() + i * m * n, m, n).noalias() =
        ConstMap(av.data().data() + i * m * k, m, k) * ConstMap(bv.data().data() + i * k * n, k, n);
  }
  return tape.record(std::move(out), std::array{a, b}, [a, b, batch, m, k, n](Tape& t, const Tensor& g, const Tensor&) {
    const bool need_a = t.requires_grad(a);
    const bool need_b = t.requires_grad(b);
    const double* ap = t.value(a).data().data();
    const double* bp = t.value(b).data().data();
    double* ga = need_a ? t.grad(a).data().data() : nullptr;
    double* gb = need_b ? t.grad(b).data().data() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMap gm(g.data().data() + i * m * n, m, n);
      if (need_a) MutMap(ga + i * m * k, m, k).noalias() += gm * ConstMap(bp + i * k * n, k, n).transpose();
      if (need_b) MutMap(gb + i * k * n, k, n).noalias() += ConstMap(ap + i * m * k, m, k).transpose() * gm;
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = common_tape("add", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    shape_error("add", "cannot broadcast " + to_string(bs) + " onto " + to_string(as));
  }
  const std::size_t inner = bv.size();
  const std::size_t outer = inner ? av.size() / inner : 0;
  Tensor out = av;
  auto o = out.data();
  auto bd = bv.data();
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t j = 0; j < inner; ++j) o[r * inner + j] += bd[j];
  return tape.record(std::move(out), std::array{a, b}, [a, b, outer, inner](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) add_into(t.grad(a), g);
    if (t.requires_grad(b)) {
      auto gb = t.grad(b).data();
      auto gd = g.data();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < inner; ++j) gb[j] += gd[r * inner + j];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = common_tape("mul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    shape_error("mul", "shapes differ: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return tape.record(std::move(out), std::array{a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return a.tape()->record(std::move(out), std::array{a}, [a, factor](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var softmax(Var a) {
  const Tensor& av = a.value();
  const std::size_t cols = last_dim("softmax", av.shape());
  const std::size_t rows = cols ? av.size() / cols : 0;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * cols;
    double* y = out.data().data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (y[j] = std::exp(x[j] - mx));
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
  }
  return a.tape()->record(std::move(out), std::array{a}, [a, rows, cols](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data().data() + r * cols;
      const double* gr = g.data().data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
      double* out = ga.data().data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) out[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = common_tape("layer_norm", x, gain);
  common_tape("layer_norm", x, bias);
  const Tensor& xv = x.value();
  const std::size_t d = last_dim("layer_norm", xv.shape());
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    shape_error("layer_norm", "input " + to_string(xv.shape()) + " needs gain/bias of shape (" +
                                  std::to_string(d) + ",), got " + to_string(gain.shape()) + " and " +
                                  to_string(bias.shape()));
  }
  const std::size_t rows = d ? xv.size() / d : 0;
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  // Normalized input and per-row reciprocal deviation, kept for backward.
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return tape.record(
      std::move(out), std::array{x, gain, bias},
      [x, gain, bias, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Tensor& g,
                                                                                 const Tensor&) {
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
          std::vector<double> dg(d, 0.0), db(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += g[r * d + j] * xhat[r * d + j];
              db[j] += g[r * d + j];
            }
          if (t.requires_grad(gain)) {
            Tensor& gg = t.grad(gain);
            for (std::size_t j = 0; j < d; ++j) gg[j] += dg[j];
          }
          if (t.requires_grad(bias)) {
            Tensor& gb = t.grad(bias);
            for (std::size_t j = 0; j < d; ++j) gb[j] += db[j];
          }
        }
        if (t.requires_grad(x)) {
          const Tensor& gv = t.value(gain);
          Tensor& gx = t.grad(x);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gv[j];
              gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

Var gelu(Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
  return a.tape()->record(std::move(out), std::array{a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

Var tanh(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  return a.tape()->record(std::move(out), std::array{a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var embedding(Var table, std::span<const std::int32_t> ids, const Shape& index_shape) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) shape_error("embedding", "table must be (V, d), got " + to_string(tv.shape()));
  if (shape_size(index_shape) != ids.size()) {
    shape_error("embedding", "index shape " + to_string(index_shape) + " does not hold " +
                                 std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      shape_error("embedding", "id " + std::to_string(ids[i]) + " outside table " + to_string(tv.shape()));
    }
    const double* src = tv.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  return table.tape()->record(std::move(out), std::array{table},
                              [table, d, idx = std::move(idx)](Tape& t, const Tensor& g, const Tensor&) {
                                Tensor& gt = t.grad(table);
                                for (std::size_t i = 0; i < idx.size(); ++i) {
                                  double* dst = gt.data().data() + static_cast<std::size_t>(idx[i]) * d;
                                  const double* src = g.data().data() + i * d;
                                  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                }
                              });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_index) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != targets.size()) {
    shape_error("cross_entropy", "logits " + to_string(lv.shape()) + " do not match " +
                                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = lv.dim(0);
  const std::size_t vocab = lv.dim(1);
  std::vector<double> probs(lv.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      shape_error("cross_entropy", "target " + std::to_string(targets[r]) + " outside logits " + to_string(lv.shape()));
    }
    const double* z = lv.data().data() + r * vocab;
    double* p = probs.data() + r * vocab;
    const double mx = *std::max_element(z, z + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += (p[j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= s;
    total += mx + std::log(s) - z[targets[r]];
    ++count;
  }
  if (count == 0) throw EmptyLossError("cross_entropy: every target is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return logits.tape()->record(
      Tensor::scalar(total * inv), std::array{logits},
      [logits, n, vocab, inv, ignore_index, tgt = std::move(tgt), probs = std::move(probs)](Tape& t, const Tensor& g,
                                                                                          const Tensor&) {
        Tensor& gl = t.grad(logits);
        const double s = g[0] * inv;
        for (std::size_t r = 0; r < n; ++r) {
          if (tgt[r] == ignore_index) continue;
          double* dst = gl.data().data() + r * vocab;
          const double* p = probs.data() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dst[j] += s * p[j];
          dst[tgt[r]] -= s;
        }
      });
}

Var reshape(Var a, Shape shape) {
  const Tensor& av = a.value();
  if (shape_size(shape) != av.size()) {
    shape_error("reshape", "cannot view " + to_string(av.shape()) + " as " + to_string(shape));
  }
  return a.tape()->record(av.reshaped(std::move(shape)), std::array{a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    add_into(t.grad(a), g);
  });
}

Var transpose(Var a, std::size_t axis1, std::size_t axis2) {
  const Tensor& av = a.value();
  const Shape& s = av.shape();
  if (axis1 >= s.size() || axis2 >= s.size()) {
    shape_error("transpose", "axes (" + std::to_string(axis1) + ", " + std::to_string(axis2) + ") invalid for " +
                                 to_string(s));
  }
  const std::size_t lo = std::min(axis1, axis2);
  const std::size_t hi = std::max(axis1, axis2);
  if (lo == hi) {
    return a.tape()->record(Tensor(av), std::array{a},
                            [a](Tape& t, const Tensor& g, const Tensor&) { add_into(t.grad(a), g); });
  }
  const std::size_t pre = shape_size(Shape(s.begin(), s.begin() + lo));
  const std::size_t mid = shape_size(Shape(s.begin() + lo + 1, s.begin() + hi));
  const std::size_t post = shape_size(Shape(s.begin() + hi + 1, s.end()));
  const std::size_t n1 = s[lo];
  const std::size_t n2 = s[hi];
  Shape out_shape = s;
  std::swap(out_shape[lo], out_shape[hi]);
  Tensor out(out_shape);
  swap_axes_copy(av.data(), out.data(), pre, n1, mid, n2, post);
  return a.tape()->record(std::move(out), std::array{a},
                          [a, pre, n1, mid, n2, post](Tape& t, const Tensor& g, const Tensor&) {
                            Tensor back(t.value(a).shape());
                            swap_axes_copy(g.data(), back.data(), pre, n2, mid, n1, post);
                            add_into(t.grad(a), back);
                          });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape()->record(Tensor::scalar(total), std::array{a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    for (double& v : t.grad(a).data()) v += g[0];
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& av = a.value();
  if (av.rank() != 2) shape_error("gather_rows", "input must be a matrix, got " + to_string(av.shape()));
  const std::size_t d = av.dim(1);
  Tensor out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= av.dim(0)) {
      shape_error("gather_rows", "row " + std::to_string(rows[i]) + " outside " + to_string(av.shape()));
    }
    const double* src = av.data().data() + rows[i] * d;
    std::copy(src, src + d, out.data().data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.tape()->record(std::move(out), std::array{a}, [a, d, idx = std::move(idx)](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = ga.data().data() + idx[i] * d;
      const double* src = g.data().data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

}  // namespace calm
