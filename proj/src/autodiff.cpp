#include "ssr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include <Eigen/Dense>

#include "ssr/error.hpp"
#include "ssr/rng.hpp"

namespace ssr {

namespace {

using RMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using DynStride = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;
using CMap = Eigen::Map<const RMatrix>;
using MMap = Eigen::Map<RMatrix>;
using CMapS = Eigen::Map<const RMatrix, 0, DynStride>;
using MMapS = Eigen::Map<RMatrix, 0, DynStride>;

CMap cmap(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MMap mmap(Tensor& t, std::size_t rows, std::size_t cols) {
  return MMap(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct EinsumParts {
  std::string a, b, c;
};

EinsumParts parse_spec(const std::string& spec) {
  auto comma = spec.find(',');
  auto arrow = spec.find("->");
  if (comma == std::string::npos || arrow == std::string::npos || comma > arrow)
    throw DataError("einsum: malformed spec '" + spec + "'");
  EinsumParts p;
  p.a = spec.substr(0, comma);
  p.b = spec.substr(comma + 1, arrow - comma - 1);
  p.c = spec.substr(arrow + 2);
  auto check = [&](const std::string& s) {
    for (char ch : s)
      if (ch < 'a' || ch > 'z') throw DataError("einsum: bad label in '" + spec + "'");
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size(); ++j)
        if (s[i] == s[j]) throw DataError("einsum: repeated label within operand in '" + spec + "'");
  };
  check(p.a);
  check(p.b);
  check(p.c);
  for (char ch : p.c)
    if (p.a.find(ch) == std::string::npos && p.b.find(ch) == std::string::npos)
      throw DataError("einsum: output label not present in inputs: '" + spec + "'");
  auto groups = [&](char ch) {
    return int(p.a.find(ch) != std::string::npos) + int(p.b.find(ch) != std::string::npos) +
           int(p.c.find(ch) != std::string::npos);
  };
  for (char ch : p.a)
    if (groups(ch) < 2) throw DataError("einsum: dangling label in '" + spec + "'");
  for (char ch : p.b)
    if (groups(ch) < 2) throw DataError("einsum: dangling label in '" + spec + "'");
  return p;
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

std::size_t label_stride(const std::string& labels, const Shape& shape, char ch) {
  auto pos = labels.find(ch);
  if (pos == std::string::npos) return 0;
  return row_major_strides(shape)[pos];
}

// Generic einsum: loop nest over output labels then contracted labels.
Tensor einsum_generic(const EinsumParts& p, const Tensor& a, const Tensor& b,
                      const std::map<char, std::size_t>& extent, const Shape& out_shape) {
  Tensor out(out_shape);
  std::string loop_labels = p.c;
  for (char ch : p.a)
    if (p.c.find(ch) == std::string::npos) loop_labels += ch;
  for (char ch : p.b)
    if (p.c.find(ch) == std::string::npos && loop_labels.find(ch) == std::string::npos)
      loop_labels += ch;

  const std::size_t depth = loop_labels.size();
  std::vector<std::size_t> ext(depth), sa(depth), sb(depth), sc(depth);
  for (std::size_t i = 0; i < depth; ++i) {
    char ch = loop_labels[i];
    ext[i] = extent.at(ch);
    sa[i] = label_stride(p.a, a.shape, ch);
    sb[i] = label_stride(p.b, b.shape, ch);
    sc[i] = label_stride(p.c, out_shape, ch);
  }

  std::vector<std::size_t> idx(depth, 0);
  std::size_t oa = 0, ob = 0, oc = 0;
  for (;;) {
    out.data[oc] += a.data[oa] * b.data[ob];
    std::size_t level = depth;
    while (level-- > 0) {
      ++idx[level];
      oa += sa[level];
      ob += sb[level];
      oc += sc[level];
      if (idx[level] < ext[level]) break;
      oa -= sa[level] * ext[level];
      ob -= sb[level] * ext[level];
      oc -= sc[level] * ext[level];
      idx[level] = 0;
      if (level == 0) return out;
    }
    if (depth == 0) {  // pure scalar product
      return out;
    }
  }
}

// Fast path: B rank 2, contract the last axis of A against one axis of B,
// output = A's leading labels + B's free label, in that order.
bool try_flat_last(const EinsumParts& p, const Tensor& a, const Tensor& b, Tensor& out) {
  if (b.rank() != 2 || a.rank() < 2) return false;
  char k = p.a.back();
  if (p.c.find(k) != std::string::npos) return false;
  auto kb = p.b.find(k);
  if (kb == std::string::npos) return false;
  char g = p.b[1 - kb];
  std::string front = p.a.substr(0, p.a.size() - 1);
  if (p.c != front + g) return false;
  const std::size_t rows = a.size() / a.shape.back();
  const std::size_t kd = a.shape.back();
  const std::size_t gd = b.shape[1 - kb];
  auto am = cmap(a, rows, kd);
  auto bm = cmap(b, b.shape[0], b.shape[1]);
  mmap(out, rows, gd).noalias() = (kb == 0) ? (am * bm).eval() : (am * bm.transpose()).eval();
  return true;
}

// Fast path: A and B share an identical contracted prefix; one free label each.
bool try_flat_prefix(const EinsumParts& p, const Tensor& a, const Tensor& b, Tensor& out) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) return false;
  std::size_t plen = a.rank() - 1;
  if (p.a.substr(0, plen) != p.b.substr(0, plen)) return false;
  for (std::size_t i = 0; i < plen; ++i)
    if (p.c.find(p.a[i]) != std::string::npos) return false;
  char x = p.a.back(), y = p.b.back();
  if (x == y) return false;
  std::size_t shared = 1;
  for (std::size_t i = 0; i < plen; ++i) shared *= a.shape[i];
  auto am = cmap(a, shared, a.shape.back());
  auto bm = cmap(b, shared, b.shape.back());
  if (p.c == std::string{x, y}) {
    mmap(out, a.shape.back(), b.shape.back()).noalias() = am.transpose() * bm;
    return true;
  }
  if (p.c == std::string{y, x}) {
    mmap(out, b.shape.back(), a.shape.back()).noalias() = bm.transpose() * am;
    return true;
  }
  return false;
}

// Fast path: one loop label shared by A and C (optionally B); the remaining
// labels form a single GEMM per loop slice.
bool try_batched(const EinsumParts& p, const Tensor& a, const Tensor& b,
                 const std::map<char, std::size_t>& extent, Tensor& out) {
  if (a.rank() > 3 || b.rank() > 3 || p.c.size() > 3) return false;
  for (char loop : p.a) {
    if (p.c.find(loop) == std::string::npos) continue;
    std::string ra, rb, rc;
    for (char ch : p.a)
      if (ch != loop) ra += ch;
    for (char ch : p.b)
      if (ch != loop) rb += ch;
    for (char ch : p.c)
      if (ch != loop) rc += ch;
    if (ra.size() > 2 || rb.size() > 2 || rc.size() > 2) continue;
    // contracted label: in ra and rb, not in rc
    std::string contracted;
    for (char ch : ra)
      if (rb.find(ch) != std::string::npos && rc.find(ch) == std::string::npos) contracted += ch;
    if (contracted.size() > 1) continue;
    char k = contracted.empty() ? 0 : contracted[0];
    std::string fa, fb;
    for (char ch : ra)
      if (ch != k) fa += ch;
    for (char ch : rb)
      if (ch != k) fb += ch;
    if (fa.size() > 1 || fb.size() > 1) continue;
    // remaining free labels must all surface in rc, shared only via loop/contract
    std::string expect1 = fa + fb, expect2 = fb + fa;
    if (rc != expect1 && rc != expect2) continue;
    bool swapped = rc == expect2 && expect1 != expect2;

    const std::size_t el = extent.at(loop);
    const std::size_t ek = k ? extent.at(k) : 1;
    const std::size_t efa = fa.empty() ? 1 : extent.at(fa[0]);
    const std::size_t efb = fb.empty() ? 1 : extent.at(fb[0]);

    auto stride_of = [&](const std::string& labels, const Shape& shape, char ch) {
      return ch ? label_stride(labels, shape, ch) : 0;
    };
    const std::size_t a_l = label_stride(p.a, a.shape, loop);
    const std::size_t a_f = stride_of(p.a, a.shape, fa.empty() ? 0 : fa[0]);
    const std::size_t a_k = stride_of(p.a, a.shape, k);
    const std::size_t b_l = label_stride(p.b, b.shape, loop);
    const std::size_t b_f = stride_of(p.b, b.shape, fb.empty() ? 0 : fb[0]);
    const std::size_t b_k = stride_of(p.b, b.shape, k);
    const std::size_t c_l = label_stride(p.c, out.shape, loop);
    const std::size_t c_fa = stride_of(p.c, out.shape, fa.empty() ? 0 : fa[0]);
    const std::size_t c_fb = stride_of(p.c, out.shape, fb.empty() ? 0 : fb[0]);

    auto idx = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    for (std::size_t l = 0; l < el; ++l) {
      CMapS am(a.data.data() + l * a_l, idx(efa), idx(ek),
               DynStride(idx(a_f ? a_f : 1), idx(a_k ? a_k : 1)));
      CMapS bm(b.data.data() + l * b_l, idx(ek), idx(efb),
               DynStride(idx(b_k ? b_k : 1), idx(b_f ? b_f : 1)));
      if (!swapped) {
        MMapS cm(out.data.data() + l * c_l, idx(efa), idx(efb),
                 DynStride(idx(c_fa ? c_fa : 1), idx(c_fb ? c_fb : 1)));
        cm.noalias() = am * bm;
      } else {
        MMapS cm(out.data.data() + l * c_l, idx(efb), idx(efa),
                 DynStride(idx(c_fb ? c_fb : 1), idx(c_fa ? c_fa : 1)));
        cm.noalias() = (am * bm).transpose();
      }
    }
    return true;
  }
  return false;
}

}  // namespace

Tensor einsum(const std::string& spec, const Tensor& a, const Tensor& b) {
  EinsumParts p = parse_spec(spec);
  // empty label groups denote scalars, carried as shape {1}
  auto rank_ok = [](const std::string& labels, const Tensor& t) {
    return labels.size() == t.rank() || (labels.empty() && t.size() == 1);
  };
  if (!rank_ok(p.a, a) || !rank_ok(p.b, b))
    throw DataError("einsum: spec '" + spec + "' does not match operand ranks " + a.shape_str() +
                    " " + b.shape_str());
  std::map<char, std::size_t> extent;
  for (std::size_t i = 0; i < p.a.size(); ++i) extent[p.a[i]] = a.shape[i];
  for (std::size_t i = 0; i < p.b.size(); ++i) {
    auto it = extent.find(p.b[i]);
    if (it != extent.end() && it->second != b.shape[i])
      throw DataError("einsum: extent mismatch for label '" + std::string(1, p.b[i]) + "' in '" +
                      spec + "'");
    extent[p.b[i]] = b.shape[i];
  }
  Shape out_shape;
  for (char ch : p.c) out_shape.push_back(extent.at(ch));
  if (out_shape.empty()) out_shape = {1};

  Tensor out(out_shape);
  if (p.c.empty()) {
    // scalar output: generic handles it
    EinsumParts q = p;
    Tensor g = einsum_generic(q, a, b, extent, {1});
    return g;
  }
  if (try_flat_last(p, a, b, out)) return out;
  if (try_flat_prefix(p, a, b, out)) return out;
  if (try_batched(p, a, b, extent, out)) return out;
  return einsum_generic(p, a, b, extent, out_shape);
}

// ---------------------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (tensors_.count(name)) throw DataError("param store: duplicate parameter '" + name + "'");
  order_.push_back(name);
  return tensors_.emplace(name, std::move(t)).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("param store: unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError("param store: unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& name : order_) n += tensors_.at(name).size();
  return n;
}

// ---------------------------------------------------------------------------

const Tensor& Tape::val(ValueId id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.value;
}

const Tensor& Tape::value(ValueId id) const { return val(id); }

ValueId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

std::size_t Tape::op_count(Op op) const {
  std::size_t c = 0;
  for (const auto& n : nodes_)
    if (n.op == op) ++c;
  return c;
}

ValueId Tape::constant(Tensor t) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(t);
  return push(std::move(n));
}

ValueId Tape::constant_view(const Tensor* t) {
  Node n;
  n.op = Op::Constant;
  n.external = t;
  return push(std::move(n));
}

ValueId Tape::param(const ParamStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return it->second;
  Node n;
  n.op = Op::Param;
  n.external = &store.get(name);
  n.spec = name;
  ValueId id = push(std::move(n));
  param_nodes_.emplace(name, id);
  return id;
}

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
    throw DataError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
  Node n;
  n.op = Op::MatMul;
  n.in = {a, b};
  n.value = Tensor({A.shape[0], B.shape[1]});
  mmap(n.value, A.shape[0], B.shape[1]).noalias() =
      cmap(A, A.shape[0], A.shape[1]) * cmap(B, B.shape[0], B.shape[1]);
  return push(std::move(n));
}

namespace {

// Broadcast rule for add/mul: same shape, scalar, or trailing-suffix shape.
bool broadcast_ok(const Shape& big, const Shape& small) {
  if (big == small) return true;
  if (small.size() == 1 && small[0] == 1) return true;
  if (small.size() >= big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - small.size());
}

// Sums a big-shaped gradient down to the broadcast operand's shape.
Tensor reduce_to(const Tensor& grad, const Shape& small) {
  if (grad.shape == small) return grad;
  Tensor out(small);
  if (small.size() == 1 && small[0] == 1) {
    double acc = 0.0;
    for (double v : grad.data) acc += v;
    out.data[0] = acc;
    return out;
  }
  const std::size_t inner = Tensor::count(small);
  const std::size_t lead = grad.size() / inner;
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t i = 0; i < inner; ++i) out.data[i] += grad.data[l * inner + i];
  return out;
}

}  // namespace

ValueId Tape::add(ValueId a, ValueId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!broadcast_ok(A.shape, B.shape))
    throw DataError("add: shape mismatch " + A.shape_str() + " + " + B.shape_str());
  Node n;
  n.op = Op::Add;
  n.in = {a, b};
  n.value = A;
  const std::size_t bs = B.size();
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value.data[i] += B.data[i % bs];
  return push(std::move(n));
}

ValueId Tape::mul(ValueId a, ValueId b) {
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!broadcast_ok(A.shape, B.shape))
    throw DataError("mul: shape mismatch " + A.shape_str() + " * " + B.shape_str());
  Node n;
  n.op = Op::Mul;
  n.in = {a, b};
  n.value = A;
  const std::size_t bs = B.size();
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value.data[i] *= B.data[i % bs];
  return push(std::move(n));
}

ValueId Tape::sigmoid(ValueId a) {
  const Tensor& A = val(a);
  Node n;
  n.op = Op::Sigmoid;
  n.in = {a};
  n.value = A;
  for (double& v : n.value.data) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                              : std::exp(v) / (1.0 + std::exp(v));
  return push(std::move(n));
}

ValueId Tape::softmax(ValueId a) {
  const Tensor& A = val(a);
  if (A.rank() < 1) throw DataError("softmax: rank must be >= 1");
  Node n;
  n.op = Op::Softmax;
  n.in = {a};
  n.value = A;
  const std::size_t last = A.shape.back();
  const std::size_t rows = A.size() / last;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = n.value.data.data() + r * last;
    double mx = row[0];
    for (std::size_t i = 1; i < last; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < last; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    for (std::size_t i = 0; i < last; ++i) row[i] /= sum;
  }
  return push(std::move(n));
}

ValueId Tape::leaky_relu(ValueId a, double slope) {
  const Tensor& A = val(a);
  Node n;
  n.op = Op::LeakyRelu;
  n.in = {a};
  n.scalar = slope;
  n.value = A;
  for (double& v : n.value.data)
    if (v < 0.0) v *= slope;
  return push(std::move(n));
}

ValueId Tape::squared_norm(ValueId a) {
  const Tensor& A = val(a);
  double acc = 0.0;
  for (double v : A.data) acc += v * v;
  Node n;
  n.op = Op::SquaredNorm;
  n.in = {a};
  n.value = Tensor::scalar(acc);
  return push(std::move(n));
}

ValueId Tape::logsumexp(ValueId a) {
  const Tensor& A = val(a);
  if (A.rank() < 1) throw DataError("logsumexp: rank must be >= 1");
  const std::size_t last = A.shape.back();
  const std::size_t rows = A.size() / last;
  Shape out_shape(A.shape.begin(), A.shape.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Node n;
  n.op = Op::LogSumExp;
  n.in = {a};
  n.value = Tensor(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = A.data.data() + r * last;
    double mx = row[0];
    for (std::size_t i = 1; i < last; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < last; ++i) sum += std::exp(row[i] - mx);
    n.value.data[r] = mx + std::log(sum);
  }
  return push(std::move(n));
}

ValueId Tape::gather(ValueId a, std::vector<std::size_t> rows) {
  const Tensor& A = val(a);
  if (A.rank() < 1) throw DataError("gather: rank must be >= 1");
  const std::size_t width = A.size() / A.shape[0];
  for (std::size_t r : rows)
    if (r >= A.shape[0]) throw DataError("gather: row " + std::to_string(r) + " out of range");
  Shape out_shape = A.shape;
  out_shape[0] = rows.size();
  Node n;
  n.op = Op::Gather;
  n.in = {a};
  n.rows = std::move(rows);
  n.value = Tensor(out_shape);
  for (std::size_t i = 0; i < n.rows.size(); ++i)
    std::memcpy(n.value.data.data() + i * width, A.data.data() + n.rows[i] * width,
                width * sizeof(double));
  return push(std::move(n));
}

ValueId Tape::contract(ValueId a, ValueId b, const std::string& spec) {
  Node n;
  n.op = Op::Contract;
  n.in = {a, b};
  n.spec = spec;
  n.value = einsum(spec, val(a), val(b));
  return push(std::move(n));
}

ValueId Tape::concat(const std::vector<ValueId>& xs, std::size_t axis) {
  if (xs.empty()) throw DataError("concat: no inputs");
  const Tensor& first = val(xs[0]);
  if (axis >= first.rank()) throw DataError("concat: axis out of range");
  Shape out_shape = first.shape;
  std::size_t total_axis = 0;
  for (ValueId x : xs) {
    const Tensor& t = val(x);
    if (t.rank() != first.rank()) throw DataError("concat: rank mismatch");
    for (std::size_t i = 0; i < t.rank(); ++i)
      if (i != axis && t.shape[i] != first.shape[i])
        throw DataError("concat: shape mismatch off-axis");
    total_axis += t.shape[axis];
  }
  out_shape[axis] = total_axis;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  Node n;
  n.op = Op::Concat;
  n.in = xs;
  n.axis = axis;
  n.value = Tensor(out_shape);
  std::size_t offset = 0;
  for (ValueId x : xs) {
    const Tensor& t = val(x);
    const std::size_t block = t.shape[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(n.value.data.data() + o * total_axis * inner + offset * inner,
                  t.data.data() + o * block, block * sizeof(double));
    offset += t.shape[axis];
  }
  return push(std::move(n));
}

ValueId Tape::reshape(ValueId a, Shape shape) {
  const Tensor& A = val(a);
  if (Tensor::count(shape) != A.size())
    throw DataError("reshape: element count mismatch");
  Node n;
  n.op = Op::Reshape;
  n.in = {a};
  n.prev_shape = A.shape;
  n.value = Tensor(shape, A.data);
  return push(std::move(n));
}

ValueId Tape::row_normalize(ValueId a) {
  const Tensor& A = val(a);
  if (A.rank() != 2) throw DataError("row_normalize: expects a matrix");
  Node n;
  n.op = Op::RowNormalize;
  n.in = {a};
  n.value = A;
  const std::size_t d = A.shape[1];
  for (std::size_t r = 0; r < A.shape[0]; ++r) {
    double* row = n.value.data.data() + r * d;
    double nrm = 0.0;
    for (std::size_t i = 0; i < d; ++i) nrm += row[i] * row[i];
    nrm = std::sqrt(nrm);
    if (nrm > 1e-12)
      for (std::size_t i = 0; i < d; ++i) row[i] /= nrm;
    else
      for (std::size_t i = 0; i < d; ++i) row[i] = 0.0;
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------------------

GradStore Tape::backward(ValueId output, const ParamStore& params) const {
  const Tensor& out = val(output);
  if (out.size() != 1)
    throw DataError("backward: default seed requires a scalar output, got " + out.shape_str());
  return backward(output, Tensor::scalar(1.0), params);
}

GradStore Tape::backward(ValueId output, const Tensor& seed, const ParamStore& params) const {
  if (seed.shape != val(output).shape)
    throw DataError("backward: seed shape " + seed.shape_str() + " != output shape " +
                    val(output).shape_str());

  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> touched(nodes_.size(), false);
  grads[output] = seed;
  touched[output] = true;

  auto accum = [&](ValueId id, const Tensor& delta) {
    if (!touched[id]) {
      grads[id] = delta;
      touched[id] = true;
    } else {
      for (std::size_t i = 0; i < delta.size(); ++i) grads[id].data[i] += delta.data[i];
    }
  };

  for (std::size_t raw = output + 1; raw-- > 0;) {
    const ValueId id = static_cast<ValueId>(raw);
    if (!touched[id]) continue;
    const Node& n = nodes_[id];
    const Tensor& g = grads[id];
    switch (n.op) {
      case Op::Constant:
      case Op::Param:
        break;
      case Op::MatMul: {
        const Tensor& A = val(n.in[0]);
        const Tensor& B = val(n.in[1]);
        Tensor da({A.shape[0], A.shape[1]});
        Tensor db({B.shape[0], B.shape[1]});
        auto gm = cmap(g, A.shape[0], B.shape[1]);
        mmap(da, A.shape[0], A.shape[1]).noalias() = gm * cmap(B, B.shape[0], B.shape[1]).transpose();
        mmap(db, B.shape[0], B.shape[1]).noalias() = cmap(A, A.shape[0], A.shape[1]).transpose() * gm;
        accum(n.in[0], da);
        accum(n.in[1], db);
        break;
      }
      case Op::Add: {
        accum(n.in[0], g);
        accum(n.in[1], reduce_to(g, val(n.in[1]).shape));
        break;
      }
      case Op::Mul: {
        const Tensor& A = val(n.in[0]);
        const Tensor& B = val(n.in[1]);
        Tensor da(A.shape);
        const std::size_t bs = B.size();
        for (std::size_t i = 0; i < da.size(); ++i) da.data[i] = g.data[i] * B.data[i % bs];
        Tensor gb(A.shape);
        for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] = g.data[i] * A.data[i];
        accum(n.in[0], da);
        accum(n.in[1], reduce_to(gb, B.shape));
        break;
      }
      case Op::Sigmoid: {
        Tensor da(n.value.shape);
        for (std::size_t i = 0; i < da.size(); ++i) {
          double y = n.value.data[i];
          da.data[i] = g.data[i] * y * (1.0 - y);
        }
        accum(n.in[0], da);
        break;
      }
      case Op::Softmax: {
        const std::size_t last = n.value.shape.back();
        const std::size_t rows = n.value.size() / last;
        Tensor da(n.value.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = n.value.data.data() + r * last;
          const double* gr = g.data.data() + r * last;
          double dot = 0.0;
          for (std::size_t i = 0; i < last; ++i) dot += gr[i] * y[i];
          double* dst = da.data.data() + r * last;
          for (std::size_t i = 0; i < last; ++i) dst[i] = y[i] * (gr[i] - dot);
        }
        accum(n.in[0], da);
        break;
      }
      case Op::LeakyRelu: {
        const Tensor& A = val(n.in[0]);
        Tensor da(A.shape);
        for (std::size_t i = 0; i < da.size(); ++i)
          da.data[i] = g.data[i] * (A.data[i] >= 0.0 ? 1.0 : n.scalar);
        accum(n.in[0], da);
        break;
      }
      case Op::SquaredNorm: {
        const Tensor& A = val(n.in[0]);
        Tensor da(A.shape);
        const double s = 2.0 * g.data[0];
        for (std::size_t i = 0; i < da.size(); ++i) da.data[i] = s * A.data[i];
        accum(n.in[0], da);
        break;
      }
      case Op::LogSumExp: {
        const Tensor& A = val(n.in[0]);
        const std::size_t last = A.shape.back();
        const std::size_t rows = A.size() / last;
        Tensor da(A.shape);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = A.data.data() + r * last;
          double* dst = da.data.data() + r * last;
          const double y = n.value.data[r];
          const double gr = g.data[r];
          for (std::size_t i = 0; i < last; ++i) dst[i] = gr * std::exp(row[i] - y);
        }
        accum(n.in[0], da);
        break;
      }
      case Op::Gather: {
        const Tensor& A = val(n.in[0]);
        const std::size_t width = A.size() / A.shape[0];
        Tensor da(A.shape);
        for (std::size_t i = 0; i < n.rows.size(); ++i)
          for (std::size_t j = 0; j < width; ++j)
            da.data[n.rows[i] * width + j] += g.data[i * width + j];
        accum(n.in[0], da);
        break;
      }
      case Op::Contract: {
        EinsumParts p = parse_spec(n.spec);
        const Tensor& A = val(n.in[0]);
        const Tensor& B = val(n.in[1]);
        // gradient through C = einsum(a,b->c): dA = einsum(c,b->a)(dC, B)
        Tensor gc = g;
        if (p.c.empty()) gc = Tensor({1}, {g.data[0]});
        accum(n.in[0], einsum(p.c + "," + p.b + "->" + p.a, gc, B));
        accum(n.in[1], einsum(p.a + "," + p.c + "->" + p.b, A, gc));
        break;
      }
      case Op::Concat: {
        const std::size_t axis = n.axis;
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= n.value.shape[i];
        for (std::size_t i = axis + 1; i < n.value.shape.size(); ++i) inner *= n.value.shape[i];
        const std::size_t total_axis = n.value.shape[axis];
        std::size_t offset = 0;
        for (ValueId x : n.in) {
          const Tensor& t = val(x);
          Tensor dx(t.shape);
          const std::size_t block = t.shape[axis] * inner;
          for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(dx.data.data() + o * block,
                        g.data.data() + o * total_axis * inner + offset * inner,
                        block * sizeof(double));
          offset += t.shape[axis];
          accum(x, dx);
        }
        break;
      }
      case Op::Reshape: {
        Tensor da(n.prev_shape, g.data);
        accum(n.in[0], da);
        break;
      }
      case Op::RowNormalize: {
        const Tensor& A = val(n.in[0]);
        const std::size_t d = A.shape[1];
        Tensor da(A.shape);
        for (std::size_t r = 0; r < A.shape[0]; ++r) {
          const double* x = A.data.data() + r * d;
          const double* y = n.value.data.data() + r * d;
          const double* gr = g.data.data() + r * d;
          double nrm = 0.0;
          for (std::size_t i = 0; i < d; ++i) nrm += x[i] * x[i];
          nrm = std::sqrt(nrm);
          double* dst = da.data.data() + r * d;
          if (nrm > 1e-12) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += gr[i] * y[i];
            for (std::size_t i = 0; i < d; ++i) dst[i] = (gr[i] - dot * y[i]) / nrm;
          }
        }
        accum(n.in[0], da);
        break;
      }
    }
  }

  GradStore out;
  for (const auto& name : params.names()) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end() && touched[it->second])
      out.emplace(name, std::move(grads[it->second]));
    else
      out.emplace(name, Tensor(params.get(name).shape));
  }
  return out;
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check_against(const LossProgram& program, ParamStore& params,
                                   const GradStore& analytic, double eps, double tol,
                                   std::size_t coords_per_tensor, std::uint64_t seed) {
  auto eval_loss = [&]() {
    Tape tape;
    ValueId id = program(tape, params);
    const Tensor& v = tape.value(id);
    if (v.size() != 1) throw DataError("grad_check: loss program must return a scalar");
    return v.data[0];
  };

  GradCheckReport report;
  report.pass = true;
  Rng rng(derive_seed(seed, 0xfd));

  for (const auto& name : params.names()) {
    Tensor& t = params.get(name);
    const Tensor& ga = analytic.at(name);
    std::vector<std::size_t> coords;
    if (t.size() <= coords_per_tensor) {
      coords.resize(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) coords[i] = i;
    } else {
      std::set<std::size_t> pick;
      while (pick.size() < coords_per_tensor) pick.insert(uniform_index(rng, t.size()));
      coords.assign(pick.begin(), pick.end());
    }

    GradCheckEntry entry;
    entry.tensor = name;
    entry.checked = coords.size();
    for (std::size_t c : coords) {
      const double orig = t.data[c];
      t.data[c] = orig + eps;
      double lp = eval_loss();
      t.data[c] = orig - eps;
      double lm = eval_loss();
      t.data[c] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericError("grad_check: non-finite loss probing '" + name + "' coordinate " +
                           std::to_string(c));
      const double fd = (lp - lm) / (2.0 * eps);
      const double ref = ga.data[c];
      const double rel = std::abs(ref - fd) / std::max(1e-8, std::abs(ref) + std::abs(fd));
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_coord = c;
      }
    }
    entry.pass = entry.max_rel_err <= tol;
    report.pass = report.pass && entry.pass;
    report.tensors.push_back(entry);
  }
  return report;
}

GradCheckReport grad_check(const LossProgram& program, ParamStore& params, double eps, double tol,
                           std::size_t coords_per_tensor, std::uint64_t seed) {
  Tape tape;
  ValueId loss = program(tape, params);
  GradStore analytic = tape.backward(loss, params);
  return grad_check_against(program, params, analytic, eps, tol, coords_per_tensor, seed);
}

}  // namespace ssr
