#include "mvdiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mvdiff/error.hpp"

namespace mvdiff::numerics {

// ---------------------------------------------------------------- store

Parameter& ParameterStore::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) throw DomainError("parameter '" + name + "' already exists");
  index_.emplace(name, items_.size());
  Parameter& p = items_.emplace_back();
  p.name = std::move(name);
  p.value = std::move(value);
  p.trainable = trainable;
  p.zero_grad();
  return p;
}

Parameter* ParameterStore::find(std::string_view name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

Parameter& ParameterStore::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw DomainError("unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParameterStore::at(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw DomainError("unknown parameter '" + std::string(name) + "'");
}

std::size_t ParameterStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : items_) p.zero_grad();
}

// ---------------------------------------------------------------- var

const Tensor& Var::value() const { return graph_->val(id_); }
const Tensor& Var::grad() const { return graph_->out_grad(id_); }

// ---------------------------------------------------------------- graph core

Var Graph::push(Tensor value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::check_owner(Var v, const char* op) const {
  if (v.graph_ != this) throw DomainError(std::string(op) + ": variable belongs to another graph");
}

Var Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Graph::parameter(Parameter& p) {
  Var v = push(p.value, p.trainable, nullptr);
  if (p.trainable) nodes_[v.id_].param = &p;
  return v;
}

void Graph::backward(Var loss) {
  check_owner(loss, "backward");
  if (val(loss.id_).size() != 1) {
    throw DomainError("backward: loss must be scalar, got " + val(loss.id_).shape_string());
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_of(loss.id_)[0] = 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      if (n.param->grad.empty()) n.param->zero_grad();
      axpy(1.0, n.grad, n.param->grad);
    }
  }
}

// ---------------------------------------------------------------- elementwise

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var Graph::add(Var a, Var b) {
  check_owner(a, "add");
  check_owner(b, "add");
  require_same(val(a.id_), val(b.id_), "add");
  Tensor out = numerics::add(val(a.id_), val(b.id_));
  return push(std::move(out), needs(a.id_) || needs(b.id_),
              [a = a.id_, b = b.id_](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                if (g.needs(a)) axpy(1.0, go, g.grad_of(a));
                if (g.needs(b)) axpy(1.0, go, g.grad_of(b));
              });
}

Var Graph::sub(Var a, Var b) {
  check_owner(a, "sub");
  check_owner(b, "sub");
  require_same(val(a.id_), val(b.id_), "sub");
  Tensor out = numerics::sub(val(a.id_), val(b.id_));
  return push(std::move(out), needs(a.id_) || needs(b.id_),
              [a = a.id_, b = b.id_](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                if (g.needs(a)) axpy(1.0, go, g.grad_of(a));
                if (g.needs(b)) axpy(-1.0, go, g.grad_of(b));
              });
}

Var Graph::mul(Var a, Var b) {
  check_owner(a, "mul");
  check_owner(b, "mul");
  const Tensor& av = val(a.id_);
  const Tensor& bv = val(b.id_);
  require_same(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return push(std::move(out), needs(a.id_) || needs(b.id_),
              [a = a.id_, b = b.id_](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                if (g.needs(a)) {
                  Tensor& ga = g.grad_of(a);
                  const Tensor& bv = g.val(b);
                  for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
                }
                if (g.needs(b)) {
                  Tensor& gb = g.grad_of(b);
                  const Tensor& av = g.val(a);
                  for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
                }
              });
}

Var Graph::scale(Var a, double s) {
  check_owner(a, "scale");
  return push(numerics::scale(val(a.id_), s), needs(a.id_),
              [a = a.id_, s](Graph& g, std::size_t self) { axpy(s, g.out_grad(self), g.grad_of(a)); });
}

Var Graph::add_row(Var x, Var r) {
  check_owner(x, "add_row");
  check_owner(r, "add_row");
  const Tensor& xv = val(x.id_);
  const Tensor& rv = val(r.id_);
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw ShapeError("add_row: " + xv.shape_string() + " + " + rv.shape_string());
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  return push(std::move(out), needs(x.id_) || needs(r.id_),
              [x = x.id_, r = r.id_](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                if (g.needs(x)) axpy(1.0, go, g.grad_of(x));
                if (g.needs(r)) {
                  Tensor& gr = g.grad_of(r);
                  for (std::size_t i = 0; i < go.rows(); ++i)
                    for (std::size_t j = 0; j < go.cols(); ++j) gr[j] += go(i, j);
                }
              });
}

Var Graph::mul_row(Var x, Var r) {
  check_owner(x, "mul_row");
  check_owner(r, "mul_row");
  const Tensor& xv = val(x.id_);
  const Tensor& rv = val(r.id_);
  if (rv.rows() != 1 || rv.cols() != xv.cols()) {
    throw ShapeError("mul_row: " + xv.shape_string() + " * " + rv.shape_string());
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= rv[j];
  return push(std::move(out), needs(x.id_) || needs(r.id_),
              [x = x.id_, r = r.id_](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                const Tensor& xv = g.val(x);
                const Tensor& rv = g.val(r);
                if (g.needs(x)) {
                  Tensor& gx = g.grad_of(x);
                  for (std::size_t i = 0; i < go.rows(); ++i)
                    for (std::size_t j = 0; j < go.cols(); ++j) gx(i, j) += go(i, j) * rv[j];
                }
                if (g.needs(r)) {
                  Tensor& gr = g.grad_of(r);
                  for (std::size_t i = 0; i < go.rows(); ++i)
                    for (std::size_t j = 0; j < go.cols(); ++j) gr[j] += go(i, j) * xv(i, j);
                }
              });
}

// ---------------------------------------------------------------- linear algebra

Var Graph::matmul(Var a, Var b) {
  check_owner(a, "matmul");
  check_owner(b, "matmul");
  Tensor out = numerics::matmul(val(a.id_), val(b.id_));
  return push(std::move(out), needs(a.id_) || needs(b.id_),
              [a = a.id_, b = b.id_](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                if (g.needs(a)) axpy(1.0, matmul_nt(go, g.val(b)), g.grad_of(a));
                if (g.needs(b)) axpy(1.0, matmul_tn(g.val(a), go), g.grad_of(b));
              });
}

Var Graph::transpose(Var a) {
  check_owner(a, "transpose");
  return push(numerics::transpose(val(a.id_)), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    axpy(1.0, numerics::transpose(g.out_grad(self)), g.grad_of(a));
  });
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  std::vector<Tensor> values;
  std::vector<std::size_t> ids;
  bool rg = false;
  for (auto p : parts) {
    check_owner(p, "concat_cols");
    values.push_back(val(p.id_));
    ids.push_back(p.id_);
    rg = rg || needs(p.id_);
  }
  Tensor out = numerics::concat_cols(values);
  return push(std::move(out), rg, [ids](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t w = g.val(id).cols();
      if (g.needs(id)) {
        Tensor& gi = g.grad_of(id);
        for (std::size_t r = 0; r < go.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) gi(r, c) += go(r, off + c);
      }
      off += w;
    }
  });
}

Var Graph::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = val(parts[0].id_).cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  bool rg = false;
  for (auto p : parts) {
    check_owner(p, "concat_rows");
    if (val(p.id_).cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += val(p.id_).rows();
    ids.push_back(p.id_);
    rg = rg || needs(p.id_);
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (auto id : ids) {
    auto v = val(id).values();
    data.insert(data.end(), v.begin(), v.end());
  }
  return push(Tensor::matrix(rows, cols, std::move(data)), rg, [ids](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t n = g.val(id).size();
      if (g.needs(id)) {
        Tensor& gi = g.grad_of(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += go[off + i];
      }
      off += n;
    }
  });
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t end) {
  check_owner(a, "slice_cols");
  Tensor out = numerics::slice_cols(val(a.id_), begin, end);
  return push(std::move(out), needs(a.id_), [a = a.id_, begin](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    Tensor& ga = g.grad_of(a);
    for (std::size_t r = 0; r < go.rows(); ++r)
      for (std::size_t c = 0; c < go.cols(); ++c) ga(r, begin + c) += go(r, c);
  });
}

Var Graph::reshape(Var a, std::size_t rows, std::size_t cols) {
  check_owner(a, "reshape");
  Tensor out = val(a.id_).reshaped(rows, cols);
  return push(std::move(out), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    Tensor& ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

Var Graph::gather_rows(Var x, std::vector<std::size_t> rows) {
  check_owner(x, "gather_rows");
  const Tensor& xv = val(x.id_);
  if (rows.empty()) throw ShapeError("gather_rows: no rows selected");
  Tensor out = Tensor::zeros(rows.size(), xv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw ShapeError("gather_rows: row index out of range");
    auto src = xv.row_span(rows[i]);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  return push(std::move(out), needs(x.id_), [x = x.id_, rows = std::move(rows)](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_of(x);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < go.cols(); ++c) gx(rows[i], c) += go(i, c);
  });
}

Var Graph::tile_rows(Var x, std::size_t reps) {
  check_owner(x, "tile_rows");
  const Tensor& xv = val(x.id_);
  if (reps == 0) throw ShapeError("tile_rows: zero repetitions");
  std::vector<double> data;
  data.reserve(xv.size() * reps);
  for (std::size_t r = 0; r < reps; ++r) data.insert(data.end(), xv.values().begin(), xv.values().end());
  Tensor out = Tensor::matrix(xv.rows() * reps, xv.cols(), std::move(data));
  return push(std::move(out), needs(x.id_), [x = x.id_](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gx = g.grad_of(x);
    const std::size_t n = gx.size();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i % n] += go[i];
  });
}

Var Graph::embedding_lookup(Var table, std::vector<std::size_t> indices) {
  check_owner(table, "embedding_lookup");
  const Tensor& tv = val(table.id_);
  if (indices.empty()) throw ShapeError("embedding_lookup: no indices");
  Tensor out = Tensor::zeros(indices.size(), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw ValidationError("embedding_lookup: index " + std::to_string(indices[i]) +
                            " out of range for table of " + std::to_string(tv.rows()) + " rows");
    }
    auto src = tv.row_span(indices[i]);
    std::copy(src.begin(), src.end(), out.row_span(i).begin());
  }
  return push(std::move(out), needs(table.id_),
              [t = table.id_, indices = std::move(indices)](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                Tensor& gt = g.grad_of(t);
                for (std::size_t i = 0; i < indices.size(); ++i)
                  for (std::size_t c = 0; c < go.cols(); ++c) gt(indices[i], c) += go(i, c);
              });
}

Var Graph::embedding_bag(Var table, std::vector<std::vector<std::size_t>> bags) {
  check_owner(table, "embedding_bag");
  const Tensor& tv = val(table.id_);
  if (bags.empty()) throw ShapeError("embedding_bag: no bags");
  Tensor out = Tensor::zeros(bags.size(), tv.cols());
  for (std::size_t b = 0; b < bags.size(); ++b) {
    auto orow = out.row_span(b);
    for (auto idx : bags[b]) {
      if (idx >= tv.rows()) {
        throw ValidationError("embedding_bag: index " + std::to_string(idx) +
                              " out of range for table of " + std::to_string(tv.rows()) + " rows");
      }
      auto src = tv.row_span(idx);
      for (std::size_t c = 0; c < orow.size(); ++c) orow[c] += src[c];
    }
  }
  return push(std::move(out), needs(table.id_), [t = table.id_, bags = std::move(bags)](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    Tensor& gt = g.grad_of(t);
    for (std::size_t b = 0; b < bags.size(); ++b)
      for (auto idx : bags[b])
        for (std::size_t c = 0; c < go.cols(); ++c) gt(idx, c) += go(b, c);
  });
}

Var Graph::segment_mean(Var x, std::vector<std::size_t> segment_sizes) {
  check_owner(x, "segment_mean");
  const Tensor& xv = val(x.id_);
  std::size_t total = 0;
  for (auto s : segment_sizes) total += s;
  if (total != xv.rows()) throw ShapeError("segment_mean: segment sizes do not cover " + xv.shape_string());
  if (segment_sizes.empty()) throw ShapeError("segment_mean: no segments");
  Tensor out = Tensor::zeros(segment_sizes.size(), xv.cols());
  std::size_t off = 0;
  for (std::size_t s = 0; s < segment_sizes.size(); ++s) {
    const std::size_t n = segment_sizes[s];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < xv.cols(); ++c) out(s, c) += xv(off + r, c);
    if (n > 0)
      for (std::size_t c = 0; c < xv.cols(); ++c) out(s, c) /= static_cast<double>(n);
    off += n;
  }
  return push(std::move(out), needs(x.id_),
              [x = x.id_, sizes = std::move(segment_sizes)](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                Tensor& gx = g.grad_of(x);
                std::size_t off = 0;
                for (std::size_t s = 0; s < sizes.size(); ++s) {
                  const std::size_t n = sizes[s];
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < go.cols(); ++c)
                      gx(off + r, c) += go(s, c) / static_cast<double>(n);
                  off += n;
                }
              });
}

Var Graph::sum(Var a) {
  check_owner(a, "sum");
  double s = 0.0;
  for (double v : val(a.id_).values()) s += v;
  return push(Tensor::scalar(s), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    const double go = g.out_grad(self)[0];
    for (auto& v : g.grad_of(a).values()) v += go;
  });
}

Var Graph::mean(Var a) {
  check_owner(a, "mean");
  const double n = static_cast<double>(val(a.id_).size());
  return scale(sum(a), 1.0 / n);
}

Var Graph::softmax_rows(Var a) {
  check_owner(a, "softmax_rows");
  Tensor out = numerics::softmax_rows(val(a.id_));
  return push(std::move(out), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& y = g.val(self);
    Tensor& ga = g.grad_of(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double inner = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) inner += go(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (go(r, c) - inner);
    }
  });
}

Var Graph::layer_norm(Var x, double eps) {
  check_owner(x, "layer_norm");
  const Tensor& xv = val(x.id_);
  const std::size_t n = xv.rows(), m = xv.cols();
  Tensor out = Tensor::zeros(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = xv.row_span(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) out(r, c) = (row[c] - mu) * inv_std[r];
  }
  return push(std::move(out), needs(x.id_), [x = x.id_, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& xhat = g.val(self);
    Tensor& gx = g.grad_of(x);
    const std::size_t m = go.cols();
    for (std::size_t r = 0; r < go.rows(); ++r) {
      double mean_go = 0.0, mean_go_xhat = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        mean_go += go(r, c);
        mean_go_xhat += go(r, c) * xhat(r, c);
      }
      mean_go /= static_cast<double>(m);
      mean_go_xhat /= static_cast<double>(m);
      for (std::size_t c = 0; c < m; ++c)
        gx(r, c) += inv_std[r] * (go(r, c) - mean_go - xhat(r, c) * mean_go_xhat);
    }
  });
}

Var Graph::sigmoid(Var a) {
  check_owner(a, "sigmoid");
  Tensor out = val(a.id_);
  for (auto& v : out.values()) v = stable_sigmoid(v);
  return push(std::move(out), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& y = g.val(self);
    Tensor& ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

Var Graph::log(Var a) {
  check_owner(a, "log");
  Tensor out = val(a.id_);
  for (auto& v : out.values()) v = std::log(std::clamp(v, kLogGuard, 1.0 - kLogGuard));
  return push(std::move(out), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& x = g.val(a);
    Tensor& ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (x[i] > kLogGuard && x[i] < 1.0 - kLogGuard) ga[i] += go[i] / x[i];
    }
  });
}

Var Graph::gelu(Var a) {
  check_owner(a, "gelu");
  Tensor out = val(a.id_);
  for (auto& v : out.values()) v = gelu_value(v);
  return push(std::move(out), needs(a.id_), [a = a.id_](Graph& g, std::size_t self) {
    const Tensor& go = g.out_grad(self);
    const Tensor& x = g.val(a);
    Tensor& ga = g.grad_of(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * gelu_grad(x[i]);
  });
}

// ---------------------------------------------------------------- losses

Var Graph::mse(Var prediction, Var target) {
  check_owner(prediction, "mse");
  check_owner(target, "mse");
  const Tensor& p = val(prediction.id_);
  const Tensor& t = val(target.id_);
  require_same(p, t, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
  const double n = static_cast<double>(p.size());
  return push(Tensor::scalar(s / n), needs(prediction.id_) || needs(target.id_),
              [pi = prediction.id_, ti = target.id_, n](Graph& g, std::size_t self) {
                const double go = g.out_grad(self)[0];
                const Tensor& p = g.val(pi);
                const Tensor& t = g.val(ti);
                if (g.needs(pi)) {
                  Tensor& gp = g.grad_of(pi);
                  for (std::size_t i = 0; i < p.size(); ++i) gp[i] += go * 2.0 * (p[i] - t[i]) / n;
                }
                if (g.needs(ti)) {
                  Tensor& gt = g.grad_of(ti);
                  for (std::size_t i = 0; i < p.size(); ++i) gt[i] -= go * 2.0 * (p[i] - t[i]) / n;
                }
              });
}

Var Graph::bce_with_logits(Var logits, Tensor targets) {
  check_owner(logits, "bce_with_logits");
  const Tensor& x = val(logits.id_);
  require_same(x, targets, "bce_with_logits");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    s += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(x.size());
  return push(Tensor::scalar(s / n), needs(logits.id_),
              [li = logits.id_, targets = std::move(targets), n](Graph& g, std::size_t self) {
                const double go = g.out_grad(self)[0];
                const Tensor& x = g.val(li);
                Tensor& gl = g.grad_of(li);
                for (std::size_t i = 0; i < x.size(); ++i)
                  gl[i] += go * (stable_sigmoid(x[i]) - targets[i]) / n;
              });
}

Var Graph::cross_entropy(Var logits, std::vector<std::size_t> labels) {
  check_owner(logits, "cross_entropy");
  const Tensor& x = val(logits.id_);
  if (labels.size() != x.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + x.shape_string());
  }
  Tensor probs = numerics::softmax_rows(x);
  double s = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (labels[r] >= x.cols()) throw ShapeError("cross_entropy: label out of range");
    auto row = x.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double lse = 0.0;
    for (double v : row) lse += std::exp(v - mx);
    s += mx + std::log(lse) - row[labels[r]];
  }
  const double n = static_cast<double>(x.rows());
  return push(Tensor::scalar(s / n), needs(logits.id_),
              [li = logits.id_, labels = std::move(labels), probs = std::move(probs), n](Graph& g, std::size_t self) {
                const double go = g.out_grad(self)[0];
                Tensor& gl = g.grad_of(li);
                for (std::size_t r = 0; r < probs.rows(); ++r)
                  for (std::size_t c = 0; c < probs.cols(); ++c) {
                    const double y = (c == labels[r]) ? 1.0 : 0.0;
                    gl(r, c) += go * (probs(r, c) - y) / n;
                  }
              });
}

// ---------------------------------------------------------------- attention

Var Graph::attention(Var q, Var k, Var v, const AttentionOptions& options) {
  check_owner(q, "attention");
  check_owner(k, "attention");
  check_owner(v, "attention");
  const Tensor& qv = val(q.id_);
  const Tensor& kv = val(k.id_);
  const Tensor& vv = val(v.id_);
  if (!qv.same_shape(kv) || !qv.same_shape(vv)) {
    throw ShapeError("attention: q/k/v shapes " + qv.shape_string() + " " + kv.shape_string() + " " +
                     vv.shape_string());
  }
  const std::size_t heads = options.heads;
  if (heads == 0 || qv.cols() % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(qv.cols()) + " not divisible by heads");
  }
  std::vector<std::size_t> segments = options.segments;
  if (segments.empty()) segments.push_back(qv.rows());
  std::size_t covered = 0;
  for (auto s : segments) covered += s;
  if (covered != qv.rows()) throw ShapeError("attention: segments do not cover " + qv.shape_string());

  const std::size_t dh = qv.cols() / heads;
  const double scale = options.scale > 0.0 ? options.scale : 1.0 / std::sqrt(static_cast<double>(dh));
  const bool causal = options.causal;

  Tensor out = Tensor::zeros(qv.rows(), qv.cols());
  // Attention weights per (segment, head), kept for the backward pass.
  std::vector<Tensor> weights;
  std::size_t off = 0;
  for (auto len : segments) {
    for (std::size_t h = 0; h < heads; ++h) {
      if (len == 0) {
        weights.emplace_back();
        continue;
      }
      Tensor p = Tensor::zeros(len, len);
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t jmax = causal ? i + 1 : len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qv(off + i, c0 + c) * kv(off + j, c0 + c);
          p(i, j) = s * scale;
          mx = std::max(mx, p(i, j));
        }
        double total = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          total += p(i, j);
        }
        for (std::size_t j = 0; j < jmax; ++j) p(i, j) /= total;
        for (std::size_t j = jmax; j < len; ++j) p(i, j) = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          const double w = p(i, j);
          for (std::size_t c = 0; c < dh; ++c) out(off + i, c0 + c) += w * vv(off + j, c0 + c);
        }
      }
      weights.push_back(std::move(p));
    }
    off += len;
  }

  const bool rg = needs(q.id_) || needs(k.id_) || needs(v.id_);
  return push(std::move(out), rg,
              [qi = q.id_, ki = k.id_, vi = v.id_, segments = std::move(segments), weights = std::move(weights),
               heads, dh, scale](Graph& g, std::size_t self) {
                const Tensor& go = g.out_grad(self);
                const Tensor& qv = g.val(qi);
                const Tensor& kv = g.val(ki);
                const Tensor& vv = g.val(vi);
                Tensor* gq = g.needs(qi) ? &g.grad_of(qi) : nullptr;
                Tensor* gk = g.needs(ki) ? &g.grad_of(ki) : nullptr;
                Tensor* gv = g.needs(vi) ? &g.grad_of(vi) : nullptr;
                std::size_t off = 0;
                std::size_t w = 0;
                for (auto len : segments) {
                  for (std::size_t h = 0; h < heads; ++h, ++w) {
                    if (len == 0) continue;
                    const Tensor& p = weights[w];
                    const std::size_t c0 = h * dh;
                    for (std::size_t i = 0; i < len; ++i) {
                      // dP_ij = dO_i . V_j ; dS = P * (dP - <dP, P>)
                      std::vector<double> dp(len, 0.0);
                      double inner = 0.0;
                      for (std::size_t j = 0; j < len; ++j) {
                        if (p(i, j) == 0.0) continue;
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) s += go(off + i, c0 + c) * vv(off + j, c0 + c);
                        dp[j] = s;
                        inner += s * p(i, j);
                      }
                      for (std::size_t j = 0; j < len; ++j) {
                        const double pij = p(i, j);
                        if (pij == 0.0) continue;
                        if (gv) {
                          for (std::size_t c = 0; c < dh; ++c) (*gv)(off + j, c0 + c) += pij * go(off + i, c0 + c);
                        }
                        const double ds = pij * (dp[j] - inner) * scale;
                        if (gq) {
                          for (std::size_t c = 0; c < dh; ++c) (*gq)(off + i, c0 + c) += ds * kv(off + j, c0 + c);
                        }
                        if (gk) {
                          for (std::size_t c = 0; c < dh; ++c) (*gk)(off + j, c0 + c) += ds * qv(off + i, c0 + c);
                        }
                      }
                    }
                  }
                  off += len;
                }
              });
}

// ---------------------------------------------------------------- binder / layers

Var ParamBinder::operator()(std::string_view name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v;
  if (mutable_) {
    v = graph_.parameter(mutable_->at(name));
  } else {
    v = graph_.constant(store_->at(name).value);
  }
  bound_.emplace(std::string(name), v);
  return v;
}

Var linear(ParamBinder& p, Var x, const std::string& prefix) {
  Graph& g = p.graph();
  return g.add_row(g.matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

Var layer_norm_affine(ParamBinder& p, Var x, const std::string& prefix) {
  Graph& g = p.graph();
  return g.add_row(g.mul_row(g.layer_norm(x), p(prefix + ".g")), p(prefix + ".b"));
}

}  // namespace mvdiff::numerics
