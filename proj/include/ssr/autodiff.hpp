#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssr/tensor.hpp"

namespace ssr {

/// Named parameter tensors with stable iteration order (insertion order).
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  std::size_t total_size() const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Tensor> tensors_;
};

using GradStore = std::map<std::string, Tensor>;

enum class Op {
  Constant,
  Param,
  MatMul,
  Add,
  Mul,
  Sigmoid,
  Softmax,
  LeakyRelu,
  SquaredNorm,
  LogSumExp,
  Gather,
  Contract,
  Concat,
  Reshape,
  RowNormalize,
};

using ValueId = std::uint32_t;

/// Binary einsum over rank <= 3 operands, e.g. "nbd,br->nrd". Every label
/// must appear in at least two of the three index groups.
Tensor einsum(const std::string& spec, const Tensor& a, const Tensor& b);

/// Eager tape: every builder computes its value immediately and records the
/// node for reverse-mode accumulation. A recorded forward therefore *is* the
/// plain forward.
class Tape {
 public:
  ValueId constant(Tensor t);
  /// References an external tensor; the caller keeps it alive and unchanged
  /// for the tape's lifetime.
  ValueId constant_view(const Tensor* t);
  /// One node per distinct parameter name; repeated calls return the same id.
  ValueId param(const ParamStore& store, const std::string& name);

  ValueId matmul(ValueId a, ValueId b);
  ValueId add(ValueId a, ValueId b);  // second operand broadcasts (scalar or shape suffix)
  ValueId mul(ValueId a, ValueId b);  // same broadcast rule
  ValueId sigmoid(ValueId a);
  ValueId softmax(ValueId a);     // over the last axis
  ValueId leaky_relu(ValueId a, double slope);
  ValueId squared_norm(ValueId a);  // -> scalar
  ValueId logsumexp(ValueId a);     // reduces the last axis
  ValueId gather(ValueId a, std::vector<std::size_t> rows);
  ValueId contract(ValueId a, ValueId b, const std::string& spec);
  ValueId concat(const std::vector<ValueId>& xs, std::size_t axis);
  ValueId reshape(ValueId a, Shape shape);
  ValueId row_normalize(ValueId a);  // zero rows stay zero

  const Tensor& value(ValueId id) const;
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t op_count(Op op) const;

  /// Reverse pass from a scalar output (seed 1), or from an explicit seed.
  /// Returns gradients for every parameter in the store (zeros if untouched).
  GradStore backward(ValueId output, const ParamStore& params) const;
  GradStore backward(ValueId output, const Tensor& seed, const ParamStore& params) const;

 private:
  struct Node {
    Op op;
    std::vector<ValueId> in;
    Tensor value;
    const Tensor* external = nullptr;
    double scalar = 0.0;
    std::vector<std::size_t> rows;
    std::string spec;  // einsum spec or parameter name
    std::size_t axis = 0;
    Shape prev_shape;  // reshape backward
  };

  const Tensor& val(ValueId id) const;
  ValueId push(Node n);

  // deque keeps node (and value) references stable while the tape grows
  std::deque<Node> nodes_;
  std::map<std::string, ValueId> param_nodes_;
};

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckEntry {
  std::string tensor;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_coord = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> tensors;
  bool pass = false;
};

/// Builds the loss on a fresh tape from the current parameter values; must
/// return a scalar node.
using LossProgram = std::function<ValueId(Tape&, const ParamStore&)>;

/// Central finite differences on a random coordinate subsample, compared
/// against a caller-supplied analytic gradient.
GradCheckReport grad_check_against(const LossProgram& program, ParamStore& params,
                                   const GradStore& analytic, double eps, double tol,
                                   std::size_t coords_per_tensor, std::uint64_t seed);

/// Computes the analytic gradient via backward and verifies it.
GradCheckReport grad_check(const LossProgram& program, ParamStore& params, double eps = 1e-4,
                           double tol = 1e-4, std::size_t coords_per_tensor = 200,
                           std::uint64_t seed = 42);

}  // namespace ssr
