#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "semitts/rng.hpp"

namespace semitts {

// Dense row-major float64 tensor. `node_id` links the tensor to the graph
// node that produced it (-1 for values outside any recording).
struct Tensor {
  std::vector<std::size_t> shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  int node_id = -1;

  Tensor() : data(std::make_shared<std::vector<double>>()) {}

  Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)),
        data(std::make_shared<std::vector<double>>(count(shape), fill)) {}

  Tensor(std::vector<std::size_t> s, std::vector<double> values)
      : shape(std::move(s)),
        data(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data->size() != count(shape))
      throw std::runtime_error("tensor: shape does not match value count");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor({r, c}); }

  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

  std::size_t numel() const { return data->size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t i, std::size_t j) { return (*data)[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return (*data)[i * cols() + j]; }
  double& operator[](std::size_t i) { return (*data)[i]; }
  double operator[](std::size_t i) const { return (*data)[i]; }

  double item() const {
    if (numel() != 1) throw std::runtime_error("tensor: item() on non-scalar");
    return (*data)[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor detached_copy() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<double>>(*data);
    return t;
  }

  bool all_finite() const {
    for (double v : *data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline Tensor uniform_init(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : *t.data) v = rng.uniform(-k, k);
  return t;
}

// Named parameters plus the set of names excluded from optimizer updates.
struct ParameterSet {
  std::map<std::string, Tensor> values;
  std::set<std::string> freeze_mask;

  Tensor& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
  }
  bool frozen(const std::string& name) const { return freeze_mask.count(name) > 0; }

  void add(const std::string& name, Tensor t) {
    if (values.count(name)) throw std::runtime_error("duplicate parameter: " + name);
    t.requires_grad = true;
    values.emplace(name, std::move(t));
  }
};

namespace detail {

enum class Op {
  kLeaf,
  kConst,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddRow,
  kAddCol,
  kMulCol,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kAbs,
  kSoftplus,
  kSoftmaxRows,
  kConcatRows,
  kConcatCols,
  kSlice,
  kSum,
  kMean,
  kGatherRows,
  kReshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddRow: return "add_row";
    case Op::kAddCol: return "add_col";
    case Op::kMulCol: return "mul_col";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kAbs: return "abs";
    case Op::kSoftplus: return "softplus";
    case Op::kSoftmaxRows: return "softmax";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSlice: return "slice";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kGatherRows: return "gather_rows";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

struct Node {
  Op op;
  int a = -1;
  int b = -1;
  bool needs_grad = false;
  double c0 = 0.0;                // scalar payload (scale factor)
  Tensor value;
  std::vector<double> grad;       // allocated lazily during backward
  std::vector<int> ins;           // n-ary inputs (concat)
  std::vector<std::size_t> meta;  // slice bounds / gather ids
  std::string name;               // parameter name for kLeaf
};

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  double z = std::exp(x);
  return z / (1.0 + z);
}

inline double stable_softplus(double x) {
  if (x > 35.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace detail

// Recording graph for one reverse-mode pass. Single writer: one graph per
// training step, cleared by backward(). Not safe for concurrent mutation.
class Graph {
 public:
  using Op = detail::Op;
  using Node = detail::Node;

  Graph() { nodes_.reserve(1024); }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    leaf_ids_.clear();
  }

  // Registers a named parameter leaf; repeated use within one recording
  // returns the same node so gradients accumulate.
  Tensor param(const std::string& name, const Tensor& stored) {
    auto it = leaf_ids_.find(name);
    if (it != leaf_ids_.end()) return nodes_[it->second].value;
    Node n;
    n.op = Op::kLeaf;
    n.needs_grad = stored.requires_grad;
    n.value = stored;
    n.name = name;
    n.value.requires_grad = stored.requires_grad;
    int id = push(std::move(n));
    leaf_ids_.emplace(name, id);
    return nodes_[id].value;
  }

  // Non-trainable input (targets, masks, grids).
  Tensor constant(Tensor t) {
    Node n;
    n.op = Op::kConst;
    n.needs_grad = false;
    n.value = std::move(t);
    n.value.requires_grad = false;
    int id = push(std::move(n));
    return nodes_[id].value;
  }

  Tensor matmul(const Tensor& a, const Tensor& b) {
    require2d(a, "matmul");
    require2d(b, "matmul");
    if (a.cols() != b.rows()) throw std::runtime_error("matmul: inner dimensions disagree");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    const double* pa = a.data->data();
    const double* pb = b.data->data();
    double* po = out.data->data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = pa + i * k;
      double* orow = po + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        if (av == 0.0) continue;
        const double* brow = pb + kk * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
    return record(Op::kMatmul, std::move(out), a, b);
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    Tensor out = ew(a, b, [](double x, double y) { return x + y; });
    return record(Op::kAdd, std::move(out), a, b);
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    Tensor out = ew(a, b, [](double x, double y) { return x - y; });
    return record(Op::kSub, std::move(out), a, b);
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same(a, b, "mul");
    Tensor out = ew(a, b, [](double x, double y) { return x * y; });
    return record(Op::kMul, std::move(out), a, b);
  }

  Tensor scale(const Tensor& a, double c) {
    Tensor out = map(a, [c](double x) { return c * x; });
    Tensor r = record(Op::kScale, std::move(out), a);
    nodes_.back().c0 = c;
    return r;
  }

  // a: (T x F), row: (1 x F), broadcast over rows
  Tensor add_row(const Tensor& a, const Tensor& row) {
    require2d(a, "add_row");
    if (row.rows() != 1 || row.cols() != a.cols())
      throw std::runtime_error("add_row: row vector shape mismatch");
    Tensor out({a.rows(), a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j)
        out.at(i, j) = a.at(i, j) + row.at(0, j);
    return record(Op::kAddRow, std::move(out), a, row);
  }

  // a: (K x T), col: (K x 1), broadcast over columns
  Tensor add_col(const Tensor& a, const Tensor& col) {
    require2d(a, "add_col");
    if (col.cols() != 1 || col.rows() != a.rows())
      throw std::runtime_error("add_col: column vector shape mismatch");
    Tensor out({a.rows(), a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j)
        out.at(i, j) = a.at(i, j) + col.at(i, 0);
    return record(Op::kAddCol, std::move(out), a, col);
  }

  Tensor mul_col(const Tensor& a, const Tensor& col) {
    require2d(a, "mul_col");
    if (col.cols() != 1 || col.rows() != a.rows())
      throw std::runtime_error("mul_col: column vector shape mismatch");
    Tensor out({a.rows(), a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j)
        out.at(i, j) = a.at(i, j) * col.at(i, 0);
    return record(Op::kMulCol, std::move(out), a, col);
  }

  Tensor tanh(const Tensor& a) {
    return record(Op::kTanh, map(a, [](double x) { return std::tanh(x); }), a);
  }

  Tensor sigmoid(const Tensor& a) {
    return record(Op::kSigmoid, map(a, detail::stable_sigmoid), a);
  }

  Tensor exp(const Tensor& a) {
    return record(Op::kExp, map(a, [](double x) { return std::exp(x); }), a);
  }

  Tensor log(const Tensor& a) {
    return record(Op::kLog, map(a, [](double x) { return std::log(x); }), a);
  }

  Tensor abs(const Tensor& a) {
    return record(Op::kAbs, map(a, [](double x) { return std::abs(x); }), a);
  }

  Tensor softplus(const Tensor& a) {
    return record(Op::kSoftplus, map(a, detail::stable_softplus), a);
  }

  Tensor softmax_rows(const Tensor& a) {
    require2d(a, "softmax");
    Tensor out({a.rows(), a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < a.cols(); ++j) mx = std::max(mx, a.at(i, j));
      double denom = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) {
        double e = std::exp(a.at(i, j) - mx);
        out.at(i, j) = e;
        denom += e;
      }
      for (std::size_t j = 0; j < a.cols(); ++j) out.at(i, j) /= denom;
    }
    return record(Op::kSoftmaxRows, std::move(out), a);
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: no inputs");
    std::size_t cols = parts[0].cols(), rows = 0;
    for (const auto& p : parts) {
      if (p.cols() != cols) throw std::runtime_error("concat_rows: column mismatch");
      rows += p.rows();
    }
    Tensor out({rows, cols});
    std::size_t r0 = 0;
    for (const auto& p : parts) {
      std::copy(p.data->begin(), p.data->end(), out.data->begin() + r0 * cols);
      r0 += p.rows();
    }
    return record_nary(Op::kConcatRows, std::move(out), parts);
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: no inputs");
    std::size_t rows = parts[0].rows(), cols = 0;
    for (const auto& p : parts) {
      if (p.rows() != rows) throw std::runtime_error("concat_cols: row mismatch");
      cols += p.cols();
    }
    Tensor out({rows, cols});
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, c0 + j) = p.at(i, j);
      c0 += p.cols();
    }
    return record_nary(Op::kConcatCols, std::move(out), parts);
  }

  // half-open row/column ranges
  Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    require2d(a, "slice");
    if (r1 > a.rows() || c1 > a.cols() || r0 > r1 || c0 > c1)
      throw std::runtime_error("slice: bounds out of range");
    Tensor out({r1 - r0, c1 - c0});
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = c0; j < c1; ++j) out.at(i - r0, j - c0) = a.at(i, j);
    Tensor r = record(Op::kSlice, std::move(out), a);
    nodes_.back().meta = {r0, r1, c0, c1};
    return r;
  }

  Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    return slice(a, r0, r1, 0, a.cols());
  }

  Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    return slice(a, 0, a.rows(), c0, c1);
  }

  Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : *a.data) s += v;
    return record(Op::kSum, Tensor::scalar(s), a);
  }

  Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw std::runtime_error("mean: empty tensor");
    double s = 0.0;
    for (double v : *a.data) s += v;
    return record(Op::kMean, Tensor::scalar(s / static_cast<double>(a.numel())), a);
  }

  // row gather, used for embedding lookup
  Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& ids) {
    require2d(a, "gather_rows");
    Tensor out({ids.size(), a.cols()});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= a.rows()) throw std::runtime_error("gather_rows: index out of range");
      for (std::size_t j = 0; j < a.cols(); ++j) out.at(i, j) = a.at(ids[i], j);
    }
    Tensor r = record(Op::kGatherRows, std::move(out), a);
    nodes_.back().meta = ids;
    return r;
  }

  Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (Tensor::count(shape) != a.numel()) throw std::runtime_error("reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.data = std::make_shared<std::vector<double>>(*a.data);
    return record(Op::kReshape, std::move(out), a);
  }

  // Runs reverse-mode accumulation from a scalar loss, returning gradients
  // for every registered parameter leaf (zeros if off the path). The
  // recording is cleared afterwards.
  std::map<std::string, Tensor> backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::runtime_error("backward: loss must be a scalar");
    if (loss.node_id < 0 || static_cast<std::size_t>(loss.node_id) >= nodes_.size())
      throw std::runtime_error("backward: loss was not produced by this graph");

    nodes_[loss.node_id].grad.assign(1, 1.0);
    for (int id = loss.node_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      for (double g : n.grad)
        if (!std::isfinite(g))
          throw std::runtime_error(std::string("backward: non-finite gradient at ") +
                                   detail::op_name(n.op));
      propagate(n);
    }

    std::map<std::string, Tensor> grads;
    for (const auto& [name, id] : leaf_ids_) {
      const Node& n = nodes_[id];
      if (!n.value.requires_grad) continue;
      Tensor g;
      g.shape = n.value.shape;
      if (n.grad.empty())
        g.data = std::make_shared<std::vector<double>>(n.value.numel(), 0.0);
      else
        g.data = std::make_shared<std::vector<double>>(n.grad);
      grads.emplace(name, std::move(g));
    }
    clear();
    return grads;
  }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, int> leaf_ids_;

  static void require2d(const Tensor& t, const char* op) {
    if (t.shape.size() != 2) throw std::runtime_error(std::string(op) + ": tensor must be 2-d");
  }

  static void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw std::runtime_error(std::string(op) + ": shape mismatch");
  }

  template <typename F>
  static Tensor ew(const Tensor& a, const Tensor& b, F f) {
    Tensor out;
    out.shape = a.shape;
    out.data = std::make_shared<std::vector<double>>(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = f((*a.data)[i], (*b.data)[i]);
    return out;
  }

  template <typename F>
  static Tensor map(const Tensor& a, F f) {
    Tensor out;
    out.shape = a.shape;
    out.data = std::make_shared<std::vector<double>>(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out.data)[i] = f((*a.data)[i]);
    return out;
  }

  int push(Node n) {
    int id = static_cast<int>(nodes_.size());
    n.value.node_id = id;
    nodes_.push_back(std::move(n));
    return id;
  }

  int input_id(const Tensor& t) {
    if (t.node_id >= 0 && static_cast<std::size_t>(t.node_id) < nodes_.size() &&
        nodes_[t.node_id].value.data == t.data)
      return t.node_id;
    // value entering the graph without prior registration: treat as constant
    Node n;
    n.op = Op::kConst;
    n.needs_grad = false;
    n.value = t;
    n.value.requires_grad = false;
    return push(std::move(n));
  }

  Tensor record(Op op, Tensor out, const Tensor& a) {
    int ia = input_id(a);
    Node n;
    n.op = op;
    n.a = ia;
    n.needs_grad = nodes_[ia].needs_grad;
    n.value = std::move(out);
    n.value.requires_grad = n.needs_grad;
    int id = push(std::move(n));
    check_finite(id);
    return nodes_[id].value;
  }

  Tensor record(Op op, Tensor out, const Tensor& a, const Tensor& b) {
    int ia = input_id(a);
    int ib = input_id(b);
    Node n;
    n.op = op;
    n.a = ia;
    n.b = ib;
    n.needs_grad = nodes_[ia].needs_grad || nodes_[ib].needs_grad;
    n.value = std::move(out);
    n.value.requires_grad = n.needs_grad;
    int id = push(std::move(n));
    check_finite(id);
    return nodes_[id].value;
  }

  Tensor record_nary(Op op, Tensor out, const std::vector<Tensor>& parts) {
    Node n;
    n.op = op;
    n.ins.reserve(parts.size());
    bool ng = false;
    for (const auto& p : parts) {
      int id = input_id(p);
      n.ins.push_back(id);
      ng = ng || nodes_[id].needs_grad;
    }
    n.needs_grad = ng;
    n.value = std::move(out);
    n.value.requires_grad = ng;
    int id = push(std::move(n));
    check_finite(id);
    return nodes_[id].value;
  }

  void check_finite(int id) {
    const Node& n = nodes_[id];
    for (double v : *n.value.data)
      if (!std::isfinite(v))
        throw std::runtime_error(std::string("non-finite value produced by ") +
                                 detail::op_name(n.op));
  }

  std::vector<double>& grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
  }

  void propagate(Node& n) {
    const std::vector<double>& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kMatmul: {
        const Tensor& a = nodes_[n.a].value;
        const Tensor& b = nodes_[n.b].value;
        const std::size_t m = a.rows(), k = a.cols(), nn = b.cols();
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          // dA = dC * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              double s = 0.0;
              const double* grow = g.data() + i * nn;
              const double* brow = b.data->data() + kk * nn;
              for (std::size_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
              ga[i * k + kk] += s;
            }
        }
        if (nodes_[n.b].needs_grad) {
          auto& gb = grad_buf(n.b);
          // dB = A^T * dC
          for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a.data->data() + i * k;
            const double* grow = g.data() + i * nn;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double av = arow[kk];
              if (av == 0.0) continue;
              double* brow = gb.data() + kk * nn;
              for (std::size_t j = 0; j < nn; ++j) brow[j] += av * grow[j];
            }
          }
        }
        break;
      }
      case Op::kAdd: {
        accumulate(n.a, g, 1.0);
        accumulate(n.b, g, 1.0);
        break;
      }
      case Op::kSub: {
        accumulate(n.a, g, 1.0);
        accumulate(n.b, g, -1.0);
        break;
      }
      case Op::kMul: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& bv = *nodes_[n.b].value.data;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (nodes_[n.b].needs_grad) {
          auto& gb = grad_buf(n.b);
          const auto& av = *nodes_[n.a].value.data;
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::kScale:
        accumulate(n.a, g, n.c0);
        break;
      case Op::kAddRow: {
        accumulate(n.a, g, 1.0);
        if (nodes_[n.b].needs_grad) {
          auto& gb = grad_buf(n.b);
          const std::size_t rows = n.value.rows(), cols = n.value.cols();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
        }
        break;
      }
      case Op::kAddCol: {
        accumulate(n.a, g, 1.0);
        if (nodes_[n.b].needs_grad) {
          auto& gb = grad_buf(n.b);
          const std::size_t rows = n.value.rows(), cols = n.value.cols();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) gb[i] += g[i * cols + j];
        }
        break;
      }
      case Op::kMulCol: {
        const Tensor& a = nodes_[n.a].value;
        const Tensor& c = nodes_[n.b].value;
        const std::size_t rows = a.rows(), cols = a.cols();
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[i * cols + j] * c.at(i, 0);
        }
        if (nodes_[n.b].needs_grad) {
          auto& gc = grad_buf(n.b);
          for (std::size_t i = 0; i < rows; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += g[i * cols + j] * a.at(i, j);
            gc[i] += s;
          }
        }
        break;
      }
      case Op::kTanh: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& y = *n.value.data;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
        }
        break;
      }
      case Op::kSigmoid: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& y = *n.value.data;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        }
        break;
      }
      case Op::kExp: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& y = *n.value.data;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        break;
      }
      case Op::kLog: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& x = *nodes_[n.a].value.data;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
        }
        break;
      }
      case Op::kAbs: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& x = *nodes_[n.a].value.data;
          for (std::size_t i = 0; i < g.size(); ++i) {
            double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
            ga[i] += g[i] * s;
          }
        }
        break;
      }
      case Op::kSoftplus: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const auto& x = *nodes_[n.a].value.data;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::stable_sigmoid(x[i]);
        }
        break;
      }
      case Op::kSoftmaxRows: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const Tensor& y = n.value;
          const std::size_t rows = y.rows(), cols = y.cols();
          for (std::size_t i = 0; i < rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * y.at(i, j);
            for (std::size_t j = 0; j < cols; ++j)
              ga[i * cols + j] += y.at(i, j) * (g[i * cols + j] - dot);
          }
        }
        break;
      }
      case Op::kConcatRows: {
        const std::size_t cols = n.value.cols();
        std::size_t r0 = 0;
        for (int id : n.ins) {
          const std::size_t r = nodes_[id].value.rows();
          if (nodes_[id].needs_grad) {
            auto& gi = grad_buf(id);
            for (std::size_t i = 0; i < r * cols; ++i) gi[i] += g[r0 * cols + i];
          }
          r0 += r;
        }
        break;
      }
      case Op::kConcatCols: {
        const std::size_t rows = n.value.rows(), cols = n.value.cols();
        std::size_t c0 = 0;
        for (int id : n.ins) {
          const std::size_t c = nodes_[id].value.cols();
          if (nodes_[id].needs_grad) {
            auto& gi = grad_buf(id);
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += g[i * cols + c0 + j];
          }
          c0 += c;
        }
        break;
      }
      case Op::kSlice: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const std::size_t acols = nodes_[n.a].value.cols();
          const std::size_t r0 = n.meta[0], r1 = n.meta[1], c0 = n.meta[2], c1 = n.meta[3];
          for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = c0; j < c1; ++j)
              ga[i * acols + j] += g[(i - r0) * (c1 - c0) + (j - c0)];
        }
        break;
      }
      case Op::kSum: {
        accumulate_fill(n.a, g[0]);
        break;
      }
      case Op::kMean: {
        accumulate_fill(n.a, g[0] / static_cast<double>(nodes_[n.a].value.numel()));
        break;
      }
      case Op::kGatherRows: {
        if (nodes_[n.a].needs_grad) {
          auto& ga = grad_buf(n.a);
          const std::size_t cols = n.value.cols();
          for (std::size_t i = 0; i < n.meta.size(); ++i)
            for (std::size_t j = 0; j < cols; ++j) ga[n.meta[i] * cols + j] += g[i * cols + j];
        }
        break;
      }
      case Op::kReshape: {
        accumulate(n.a, g, 1.0);
        break;
      }
    }
  }

  void accumulate(int id, const std::vector<double>& g, double factor) {
    if (!nodes_[id].needs_grad) return;
    auto& gi = grad_buf(id);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += factor * g[i];
  }

  void accumulate_fill(int id, double v) {
    if (!nodes_[id].needs_grad) return;
    auto& gi = grad_buf(id);
    for (auto& x : gi) x += v;
  }
};

}  // namespace semitts
