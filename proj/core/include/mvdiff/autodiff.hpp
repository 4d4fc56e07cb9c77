#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvdiff/tensor.hpp"

namespace mvdiff::numerics {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad = Tensor(value.shape()); }
};

/// Named parameters in insertion order. References returned by `add` stay
/// valid for the lifetime of the store.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t scalar_count() const noexcept;
  void zero_grad();

  auto begin() noexcept { return items_.begin(); }
  auto end() noexcept { return items_.end(); }
  auto begin() const noexcept { return items_.begin(); }
  auto end() const noexcept { return items_.end(); }

 private:
  std::deque<Parameter> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

class Graph;

/// Handle to a node recorded on a Graph tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  /// Gradient accumulated by the last `Graph::backward`; empty if the node
  /// received none.
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const noexcept { return id_; }
  Graph* graph() const noexcept { return graph_; }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

struct AttentionOptions {
  std::size_t heads = 1;
  /// Row counts of independent sequences; empty means one sequence.
  std::vector<std::size_t> segments;
  bool causal = false;
  /// Logit scale; 0 selects 1/sqrt(head width).
  double scale = 0.0;
};

/// Lower clamp bound for guarded log inputs; upper bound is 1 - kLogGuard.
inline constexpr double kLogGuard = 1e-12;

/// Tape for one forward pass. Nodes are appended in evaluation order, so the
/// reverse sweep visits them in reverse topological order. Not thread-safe;
/// use one Graph per thread.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `p`; backward adds into `p.grad` when `p.trainable`.
  Var parameter(Parameter& p);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  /// x [n,m] + r [1,m] broadcast over rows.
  Var add_row(Var x, Var r);
  /// x [n,m] * r [1,m] broadcast over rows.
  Var mul_row(Var x, Var r);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var concat_cols(std::span<const Var> parts);
  Var concat_rows(std::span<const Var> parts);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var reshape(Var a, std::size_t rows, std::size_t cols);
  Var gather_rows(Var x, std::vector<std::size_t> rows);
  /// [r,c] repeated `reps` times vertically -> [r*reps, c].
  Var tile_rows(Var x, std::size_t reps);
  Var embedding_lookup(Var table, std::vector<std::size_t> indices);
  /// Sum-pooled lookup: row b is the sum of table rows in bags[b]; an empty
  /// bag yields a zero row.
  Var embedding_bag(Var table, std::vector<std::vector<std::size_t>> bags);
  /// Row-average within consecutive segments; an empty segment yields zeros.
  Var segment_mean(Var x, std::vector<std::size_t> segment_sizes);
  Var sum(Var a);
  Var mean(Var a);
  Var softmax_rows(Var a);
  /// Per-row normalization without affine terms.
  Var layer_norm(Var x, double eps = 1e-5);
  Var sigmoid(Var a);
  /// log(clamp(a, kLogGuard, 1 - kLogGuard)).
  Var log(Var a);
  /// tanh-approximated GELU.
  Var gelu(Var a);
  Var mse(Var prediction, Var target);
  /// Mean over all entries of the logistic loss against 0/1 targets.
  Var bce_with_logits(Var logits, Tensor targets);
  /// Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, std::vector<std::size_t> labels);
  /// Scaled dot-product self-attention over row segments, multi-head by
  /// splitting columns evenly.
  Var attention(Var q, Var k, Var v, const AttentionOptions& options);

  /// Reverse sweep from a scalar loss. Gradients are added into the bound
  /// parameters' `grad`, so several graphs can contribute to one step; call
  /// `ParameterStore::zero_grad` between steps.
  void backward(Var loss);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  friend class Var;
  using Backward = std::function<void(Graph&, std::size_t)>;
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward);
  Tensor& grad_of(std::size_t id);
  bool needs(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& val(std::size_t id) const { return nodes_[id].value; }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  void check_owner(Var v, const char* op) const;

  std::vector<Node> nodes_;
};

inline Var operator+(Var a, Var b) { return a.graph()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph()->mul(a, b); }
inline Var operator*(double s, Var a) { return a.graph()->scale(a, s); }

/// Binds parameters of a store onto one graph, creating each leaf once.
/// A binder over a const store records frozen constants (inference mode).
class ParamBinder {
 public:
  ParamBinder(Graph& graph, ParameterStore& store) : graph_(graph), mutable_(&store), store_(&store) {}
  ParamBinder(Graph& graph, const ParameterStore& store) : graph_(graph), store_(&store) {}
  Var operator()(std::string_view name);
  Graph& graph() noexcept { return graph_; }

 private:
  Graph& graph_;
  ParameterStore* mutable_ = nullptr;
  const ParameterStore* store_;
  std::map<std::string, Var, std::less<>> bound_;
};

/// Affine layer: x W + b.
Var linear(ParamBinder& p, Var x, const std::string& prefix);
/// Layer norm followed by learned gain and bias.
Var layer_norm_affine(ParamBinder& p, Var x, const std::string& prefix);

}  // namespace mvdiff::numerics
