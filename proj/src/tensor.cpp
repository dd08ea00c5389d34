#include "ost/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace ost {

namespace detail {

struct Node {
  Shape shape;
  ArrayX values;
  ArrayX grad;  // empty until a gradient touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;  // reads own grad, adds into inputs

  Index numel() const { return values.size(); }
};

}  // namespace detail

using detail::Node;

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (Index e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
  }
}

std::shared_ptr<Node> make_leaf(Shape shape, ArrayX values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("data size " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

Tensor wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

// Builds an op result. Inputs and the backward closure are recorded only when
// grad mode is on and some input needs a gradient.
Tensor make_op(Shape shape, ArrayX values, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  check_shape(n->shape = std::move(shape));
  n->values = std::move(values);
  if (shape_numel(n->shape) != n->values.size()) {
    throw std::logic_error("op produced " + std::to_string(n->values.size()) +
                           " values for shape " + shape_str(n->shape));
  }
  bool track = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) n->inputs.push_back(std::move(t.node_));
    n->backward_fn = std::move(backward_fn);
  }
  return wrap(std::move(n));
}

// Adds g into n's gradient, allocating a zero buffer on first touch.
void accum(Node& n, const ArrayX& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = ArrayX::Zero(n.numel());
  n.grad += g;
}

ArrayX& grad_buffer(Node& n) {
  if (n.grad.size() == 0) n.grad = ArrayX::Zero(n.numel());
  return n.grad;
}

const Node& need(const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("operation on an empty tensor handle");
  return *t.node_;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const Index ea = i < r - ra ? 1 : a[i - (r - ra)];
    const Index eb = i < r - rb ? 1 : b[i - (r - rb)];
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument("shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " do not broadcast");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides of `shape` when read through `out_shape`; broadcast
// dimensions get stride 0 so a flat output index maps onto the input.
std::vector<Index> broadcast_strides(const Shape& shape, const Shape& out_shape) {
  const size_t r = out_shape.size(), ra = shape.size();
  std::vector<Index> natural(ra);
  Index s = 1;
  for (size_t i = ra; i-- > 0;) {
    natural[i] = s;
    s *= shape[i];
  }
  std::vector<Index> strides(r, 0);
  for (size_t i = 0; i < ra; ++i) {
    const size_t o = i + (r - ra);
    strides[o] = (shape[i] == 1 && out_shape[o] != 1) ? 0 : natural[i];
  }
  return strides;
}

// Calls fn(out_flat, a_flat, b_flat) over every output position.
template <typename Fn>
void for_each_broadcast(const Shape& out_shape, const std::vector<Index>& sa,
                        const std::vector<Index>& sb, Fn&& fn) {
  const size_t r = out_shape.size();
  const Index n = shape_numel(out_shape);
  std::vector<Index> coord(r, 0);
  Index ia = 0, ib = 0;
  for (Index flat = 0; flat < n; ++flat) {
    fn(flat, ia, ib);
    for (size_t d = r; d-- > 0;) {
      ++coord[d];
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < out_shape[d]) break;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
      coord[d] = 0;
    }
  }
}

template <typename FwdFn, typename BwdFn>
Tensor binary_op(const Tensor& a, const Tensor& b, FwdFn&& fwd, BwdFn&& bwd) {
  const Node& na = need(a);
  const Node& nb = need(b);
  if (na.shape == nb.shape) {
    ArrayX out(na.numel());
    for (Index i = 0; i < na.numel(); ++i) out[i] = fwd(na.values[i], nb.values[i]);
    Tensor av = a, bv = b;
    return make_op(na.shape, std::move(out), {a, b}, [av, bv, bwd](Node& self) {
      Node& pa = *av.node_;
      Node& pb = *bv.node_;
      for (Index i = 0; i < self.numel(); ++i) {
        double da, db;
        bwd(pa.values[i], pb.values[i], self.values[i], self.grad[i], da, db);
        if (pa.requires_grad) grad_buffer(pa)[i] += da;
        if (pb.requires_grad) grad_buffer(pb)[i] += db;
      }
    });
  }
  Shape out_shape = broadcast_shape(na.shape, nb.shape);
  auto sa = broadcast_strides(na.shape, out_shape);
  auto sb = broadcast_strides(nb.shape, out_shape);
  ArrayX out(shape_numel(out_shape));
  for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
    out[o] = fwd(na.values[ia], nb.values[ib]);
  });
  Tensor av = a, bv = b;
  return make_op(out_shape, std::move(out), {a, b},
                 [av, bv, out_shape, sa, sb, bwd](Node& self) {
                   Node& pa = *av.node_;
                   Node& pb = *bv.node_;
                   if (pa.requires_grad) grad_buffer(pa);
                   if (pb.requires_grad) grad_buffer(pb);
                   for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
                     double da, db;
                     bwd(pa.values[ia], pb.values[ib], self.values[o], self.grad[o], da, db);
                     if (pa.requires_grad) pa.grad[ia] += da;
                     if (pb.requires_grad) pb.grad[ib] += db;
                   });
                 });
}

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const Tensor& x, FwdFn&& fwd, BwdFn&& bwd) {
  const Node& nx = need(x);
  ArrayX out(nx.numel());
  for (Index i = 0; i < nx.numel(); ++i) out[i] = fwd(nx.values[i]);
  Tensor xv = x;
  return make_op(nx.shape, std::move(out), {x}, [xv, bwd](Node& self) {
    Node& px = *xv.node_;
    ArrayX& g = grad_buffer(px);
    for (Index i = 0; i < self.numel(); ++i) g[i] += bwd(px.values[i], self.values[i]) * self.grad[i];
  });
}

struct AxisSpans {
  Index outer, len, inner;
};

AxisSpans axis_spans(const Shape& shape, Index axis) {
  if (axis < 0 || axis >= static_cast<Index>(shape.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(shape));
  }
  AxisSpans s{1, shape[axis], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  ArrayX v = Eigen::Map<const ArrayX>(data.data(), static_cast<Index>(data.size()));
  return wrap(make_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::from_array(Shape shape, ArrayX values, bool requires_grad) {
  return wrap(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from_matrix(const MatrixX& m, bool requires_grad) {
  ArrayX v = Eigen::Map<const ArrayX>(m.data(), m.size());
  return wrap(make_leaf({m.rows(), m.cols()}, std::move(v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  ArrayX a(1);
  a[0] = v;
  return wrap(make_leaf({}, std::move(a), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Index n = shape_numel(shape);
  return wrap(make_leaf(std::move(shape), ArrayX::Zero(n), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Index n = shape_numel(shape);
  return wrap(make_leaf(std::move(shape), ArrayX::Constant(n, v), requires_grad));
}

const Shape& Tensor::shape() const { return need(*this).shape; }
Index Tensor::rank() const { return static_cast<Index>(need(*this).shape.size()); }
Index Tensor::numel() const { return need(*this).numel(); }

Index Tensor::extent(Index axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<Index>(s.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(s));
  }
  return s[axis];
}

bool Tensor::requires_grad() const { return need(*this).requires_grad; }

const ArrayX& Tensor::values() const { return need(*this).values; }

double Tensor::value_at(Index flat) const {
  const Node& n = need(*this);
  if (flat < 0 || flat >= n.numel()) throw std::invalid_argument("flat index out of range");
  return n.values[flat];
}

ArrayX& Tensor::leaf_values() {
  if (!node_) throw std::invalid_argument("operation on an empty tensor handle");
  Node& n = *node_;
  if (!n.inputs.empty()) throw std::logic_error("leaf_values on a graph-produced tensor");
  return n.values;
}

Eigen::Map<const MatrixX> Tensor::matrix(Index rows, Index cols) const {
  const Node& n = need(*this);
  if (rows * cols != n.numel()) {
    throw std::invalid_argument("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " does not cover " + std::to_string(n.numel()) + " elements");
  }
  return Eigen::Map<const MatrixX>(n.values.data(), rows, cols);
}

Eigen::Map<const MatrixX> Tensor::matrix() const {
  const Node& n = need(*this);
  if (n.shape.size() > 2) {
    throw std::invalid_argument("natural matrix view requires rank <= 2, got " +
                                shape_str(n.shape));
  }
  Index rows = n.shape.empty() ? 1 : n.shape[0];
  Index cols = n.shape.size() == 2 ? n.shape[1] : 1;
  if (n.shape.empty()) cols = 1;
  return Eigen::Map<const MatrixX>(n.values.data(), rows, cols);
}

bool Tensor::has_grad() const { return need(*this).grad.size() != 0; }

const ArrayX& Tensor::grad() const {
  const Node& n = need(*this);
  if (n.grad.size() == 0) throw std::logic_error("tensor has no gradient; run backward first");
  return n.grad;
}

void Tensor::zero_grad() { need(*this); node_->grad.resize(0); }

void Tensor::accumulate_grad(const ArrayX& g) {
  if (!node_) throw std::invalid_argument("operation on an empty tensor handle");
  Node& n = *node_;
  if (g.size() != n.numel()) {
    throw std::invalid_argument("gradient size " + std::to_string(g.size()) +
                                " does not match tensor with " + std::to_string(n.numel()) +
                                " elements");
  }
  accum(n, g);
}

// ---------------------------------------------------------------------------
// Backward

void backward(const Tensor& loss) {
  const Node& root = need(loss);
  if (root.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw std::invalid_argument("backward on a tensor that does not require grad");
  }

  // Iterative post-order DFS; topo holds inputs before consumers.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  grad_buffer(*loss.node_)[0] += 1.0;
  for (size_t i = topo.size(); i-- > 0;) {
    Node* n = topo[i];
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary_op(x, [p](double v) { return std::pow(v, p); },
                  [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor abs(const Tensor& x) {
  return unary_op(x, [](double v) { return std::abs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp bounds out of order");
  return unary_op(x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
                  [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor concat(const std::vector<Tensor>& xs, Index axis) {
  if (xs.empty()) throw std::invalid_argument("concat of zero tensors");
  const Shape& first = need(xs[0]).shape;
  AxisSpans spans = axis_spans(first, axis);
  Index total = 0;
  for (const Tensor& t : xs) {
    const Shape& s = need(t).shape;
    if (s.size() != first.size()) {
      throw std::invalid_argument("concat rank mismatch: " + shape_str(first) + " vs " +
                                  shape_str(s));
    }
    for (size_t d = 0; d < s.size(); ++d) {
      if (static_cast<Index>(d) != axis && s[d] != first[d]) {
        throw std::invalid_argument("concat extent mismatch on axis " + std::to_string(d) + ": " +
                                    shape_str(first) + " vs " + shape_str(s));
      }
    }
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  ArrayX out(shape_numel(out_shape));
  const Index inner = spans.inner;
  Index offset = 0;  // running start along the concat axis
  for (const Tensor& t : xs) {
    const Node& n = need(t);
    const Index len = n.shape[axis];
    for (Index o = 0; o < spans.outer; ++o) {
      const Index src = o * len * inner;
      const Index dst = (o * total + offset) * inner;
      out.segment(dst, len * inner) = n.values.segment(src, len * inner);
    }
    offset += len;
  }
  std::vector<Tensor> inputs = xs;
  std::vector<Index> lens;
  lens.reserve(xs.size());
  for (const Tensor& t : xs) lens.push_back(t.shape()[axis]);
  AxisSpans sp = spans;
  return make_op(out_shape, std::move(out), std::move(inputs), [xs, lens, sp, total](Node& self) {
    Index offset = 0;
    for (size_t k = 0; k < xs.size(); ++k) {
      Node& p = *xs[k].node_;
      const Index len = lens[k];
      if (p.requires_grad) {
        ArrayX& g = grad_buffer(p);
        for (Index o = 0; o < sp.outer; ++o) {
          const Index src = (o * total + offset) * sp.inner;
          const Index dst = o * len * sp.inner;
          g.segment(dst, len * sp.inner) += self.grad.segment(src, len * sp.inner);
        }
      }
      offset += len;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  const Node& nx = need(x);
  check_shape(shape);
  if (shape_numel(shape) != nx.numel()) {
    throw std::invalid_argument("reshape " + shape_str(nx.shape) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  Tensor xv = x;
  return make_op(std::move(shape), nx.values, {x},
                 [xv](Node& self) { accum(*xv.node_, self.grad); });
}

Tensor transpose(const Tensor& x, Index axis_a, Index axis_b) {
  const Node& nx = need(x);
  const Index r = static_cast<Index>(nx.shape.size());
  if (axis_a < 0 || axis_a >= r || axis_b < 0 || axis_b >= r) {
    throw std::invalid_argument("transpose axes out of range for shape " + shape_str(nx.shape));
  }
  if (axis_a == axis_b) {
    Tensor xv = x;
    return make_op(nx.shape, nx.values, {x}, [xv](Node& self) { accum(*xv.node_, self.grad); });
  }
  Shape out_shape = nx.shape;
  std::swap(out_shape[axis_a], out_shape[axis_b]);

  std::vector<Index> in_strides(r, 1), out_to_in(r);
  for (Index i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * nx.shape[i + 1];
  for (Index i = 0; i < r; ++i) out_to_in[i] = in_strides[i];
  std::swap(out_to_in[axis_a], out_to_in[axis_b]);

  const Index n = nx.numel();
  ArrayX out(n);
  std::vector<Index> perm_map(n);
  std::vector<Index> coord(r, 0);
  Index src = 0;
  for (Index flat = 0; flat < n; ++flat) {
    out[flat] = nx.values[src];
    perm_map[flat] = src;
    for (Index d = r; d-- > 0;) {
      ++coord[d];
      src += out_to_in[d];
      if (coord[d] < out_shape[d]) break;
      src -= out_to_in[d] * out_shape[d];
      coord[d] = 0;
    }
  }
  Tensor xv = x;
  return make_op(out_shape, std::move(out), {x}, [xv, perm_map](Node& self) {
    Node& p = *xv.node_;
    ArrayX& g = grad_buffer(p);
    for (Index i = 0; i < self.numel(); ++i) g[perm_map[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Node& na = need(a);
  const Node& nb = need(b);
  const Shape& sa = na.shape;
  const Shape& sb = nb.shape;
  if (sa.size() < 2 || sb.size() < 2) {
    throw std::invalid_argument("matmul requires rank >= 2, got " + shape_str(sa) + " and " +
                                shape_str(sb));
  }
  if (sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw std::invalid_argument("matmul batch dims differ: " + shape_str(sa) + " vs " +
                                shape_str(sb));
  }
  const Index m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const Index k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2) {
    throw std::invalid_argument("matmul inner dims differ: " + shape_str(sa) + " vs " +
                                shape_str(sb));
  }
  Index batch = 1;
  for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  ArrayX out(batch * m * n);
  for (Index bi = 0; bi < batch; ++bi) {
    Eigen::Map<const MatrixX> A(na.values.data() + bi * m * k, m, k);
    Eigen::Map<const MatrixX> B(nb.values.data() + bi * k * n, k, n);
    Eigen::Map<MatrixX> C(out.data() + bi * m * n, m, n);
    C.noalias() = A * B;
  }
  Tensor av = a, bv = b;
  return make_op(out_shape, std::move(out), {a, b}, [av, bv, batch, m, k, n](Node& self) {
    Node& pa = *av.node_;
    Node& pb = *bv.node_;
    for (Index bi = 0; bi < batch; ++bi) {
      Eigen::Map<const MatrixX> A(pa.values.data() + bi * m * k, m, k);
      Eigen::Map<const MatrixX> B(pb.values.data() + bi * k * n, k, n);
      Eigen::Map<const MatrixX> G(self.grad.data() + bi * m * n, m, n);
      if (pa.requires_grad) {
        Eigen::Map<MatrixX> GA(grad_buffer(pa).data() + bi * m * k, m, k);
        GA.noalias() += G * B.transpose();
      }
      if (pb.requires_grad) {
        Eigen::Map<MatrixX> GB(grad_buffer(pb).data() + bi * k * n, k, n);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Node& nx = need(x);
  const Node& nw = need(weight);
  if (nw.shape.size() != 2) {
    throw std::invalid_argument("linear weight must be rank 2, got " + shape_str(nw.shape));
  }
  if (nx.shape.empty() || nx.shape.back() != nw.shape[0]) {
    throw std::invalid_argument("linear input " + shape_str(nx.shape) +
                                " incompatible with weight " + shape_str(nw.shape));
  }
  const Index d_in = nw.shape[0], d_out = nw.shape[1];
  const Index rows = nx.numel() / d_in;
  if (bias.defined()) {
    const Node& nb = need(bias);
    if (nb.shape != Shape{d_out}) {
      throw std::invalid_argument("linear bias must have shape [" + std::to_string(d_out) +
                                  "], got " + shape_str(nb.shape));
    }
  }

  ArrayX out(rows * d_out);
  {
    Eigen::Map<const MatrixX> X(nx.values.data(), rows, d_in);
    Eigen::Map<const MatrixX> W(nw.values.data(), d_in, d_out);
    Eigen::Map<MatrixX> Y(out.data(), rows, d_out);
    Y.noalias() = X * W;
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVectorXd> B(bias.values().data(), d_out);
      Y.rowwise() += B;
    }
  }
  Shape out_shape = nx.shape;
  out_shape.back() = d_out;
  std::vector<Tensor> inputs = bias.defined() ? std::vector<Tensor>{x, weight, bias}
                                              : std::vector<Tensor>{x, weight};
  Tensor xv = x, wv = weight, bv = bias;
  return make_op(out_shape, std::move(out), std::move(inputs),
                 [xv, wv, bv, rows, d_in, d_out](Node& self) {
                   Node& px = *xv.node_;
                   Node& pw = *wv.node_;
                   Eigen::Map<const MatrixX> X(px.values.data(), rows, d_in);
                   Eigen::Map<const MatrixX> W(pw.values.data(), d_in, d_out);
                   Eigen::Map<const MatrixX> G(self.grad.data(), rows, d_out);
                   if (px.requires_grad) {
                     Eigen::Map<MatrixX> GX(grad_buffer(px).data(), rows, d_in);
                     GX.noalias() += G * W.transpose();
                   }
                   if (pw.requires_grad) {
                     Eigen::Map<MatrixX> GW(grad_buffer(pw).data(), d_in, d_out);
                     GW.noalias() += X.transpose() * G;
                   }
                   if (bv.defined() && bv.node_->requires_grad) {
                     Eigen::Map<Eigen::RowVectorXd> GB(grad_buffer(*bv.node_).data(), d_out);
                     GB += G.colwise().sum();
                   }
                 });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, Index stride, Index padding) {
  const Node& ni = need(input);
  const Node& nk = need(kernel);
  if (ni.shape.size() != 3) {
    throw std::invalid_argument("conv2d input must be [c, h, w], got " + shape_str(ni.shape));
  }
  if (nk.shape.size() != 4) {
    throw std::invalid_argument("conv2d kernel must be [c_out, c_in, kh, kw], got " +
                                shape_str(nk.shape));
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride >= 1, padding >= 0");
  const Index ci = ni.shape[0], h = ni.shape[1], w = ni.shape[2];
  const Index co = nk.shape[0], kh = nk.shape[2], kw = nk.shape[3];
  if (nk.shape[1] != ci) {
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(ni.shape) +
                                ", kernel " + shape_str(nk.shape));
  }
  const Index ho = (h + 2 * padding - kh) / stride + 1;
  const Index wo = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw std::invalid_argument("conv2d kernel exceeds padded input");
  }

  // im2col: cols(ci * kh * kw, ho * wo), zero rows where the window leaves
  // the input.
  MatrixX cols = MatrixX::Zero(ci * kh * kw, ho * wo);
  for (Index oy = 0; oy < ho; ++oy) {
    for (Index ox = 0; ox < wo; ++ox) {
      const Index col = oy * wo + ox;
      for (Index c = 0; c < ci; ++c) {
        for (Index ky = 0; ky < kh; ++ky) {
          const Index iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= h) continue;
          for (Index kx = 0; kx < kw; ++kx) {
            const Index ix = ox * stride + kx - padding;
            if (ix < 0 || ix >= w) continue;
            cols((c * kh + ky) * kw + kx, col) = ni.values[(c * h + iy) * w + ix];
          }
        }
      }
    }
  }
  ArrayX out(co * ho * wo);
  {
    Eigen::Map<const MatrixX> K(nk.values.data(), co, ci * kh * kw);
    Eigen::Map<MatrixX> O(out.data(), co, ho * wo);
    O.noalias() = K * cols;
  }
  Tensor iv = input, kv = kernel;
  return make_op({co, ho, wo}, std::move(out), {input, kernel},
                 [iv, kv, cols, stride, padding, ci, h, w, co, kh, kw, ho, wo](Node& self) {
                   Node& pi = *iv.node_;
                   Node& pk = *kv.node_;
                   Eigen::Map<const MatrixX> G(self.grad.data(), co, ho * wo);
                   if (pk.requires_grad) {
                     Eigen::Map<MatrixX> GK(grad_buffer(pk).data(), co, ci * kh * kw);
                     GK.noalias() += G * cols.transpose();
                   }
                   if (pi.requires_grad) {
                     Eigen::Map<const MatrixX> K(pk.values.data(), co, ci * kh * kw);
                     MatrixX gcols = K.transpose() * G;
                     ArrayX& gi = grad_buffer(pi);
                     for (Index oy = 0; oy < ho; ++oy) {
                       for (Index ox = 0; ox < wo; ++ox) {
                         const Index col = oy * wo + ox;
                         for (Index c = 0; c < ci; ++c) {
                           for (Index ky = 0; ky < kh; ++ky) {
                             const Index iy = oy * stride + ky - padding;
                             if (iy < 0 || iy >= h) continue;
                             for (Index kx = 0; kx < kw; ++kx) {
                               const Index ix = ox * stride + kx - padding;
                               if (ix < 0 || ix >= w) continue;
                               gi[(c * h + iy) * w + ix] += gcols((c * kh + ky) * kw + kx, col);
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Softmax

Tensor softmax(const Tensor& x, Index axis) {
  const Node& nx = need(x);
  AxisSpans sp = axis_spans(nx.shape, axis);
  ArrayX out(nx.numel());
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.len * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < sp.len; ++i) mx = std::max(mx, nx.values[base + i * sp.inner]);
      double sum = 0.0;
      for (Index i = 0; i < sp.len; ++i) {
        const double e = std::exp(nx.values[base + i * sp.inner] - mx);
        out[base + i * sp.inner] = e;
        sum += e;
      }
      for (Index i = 0; i < sp.len; ++i) out[base + i * sp.inner] /= sum;
    }
  }
  Tensor xv = x;
  return make_op(nx.shape, std::move(out), {x}, [xv, sp](Node& self) {
    Node& p = *xv.node_;
    ArrayX& g = grad_buffer(p);
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index in = 0; in < sp.inner; ++in) {
        const Index base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (Index i = 0; i < sp.len; ++i) {
          const Index at = base + i * sp.inner;
          dot += self.grad[at] * self.values[at];
        }
        for (Index i = 0; i < sp.len; ++i) {
          const Index at = base + i * sp.inner;
          g[at] += self.values[at] * (self.grad[at] - dot);
        }
      }
    }
  });
}

Tensor softmax_masked(const Tensor& x, Index axis, const std::vector<std::uint8_t>& keep) {
  const Node& nx = need(x);
  if (static_cast<Index>(keep.size()) != nx.numel()) {
    throw std::invalid_argument("softmax mask size does not match tensor");
  }
  AxisSpans sp = axis_spans(nx.shape, axis);
  ArrayX out = ArrayX::Zero(nx.numel());
  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.len * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index i = 0; i < sp.len; ++i) {
        const Index at = base + i * sp.inner;
        if (keep[at]) mx = std::max(mx, nx.values[at]);
      }
      if (!std::isfinite(mx)) continue;  // no kept entries on this line
      double sum = 0.0;
      for (Index i = 0; i < sp.len; ++i) {
        const Index at = base + i * sp.inner;
        if (!keep[at]) continue;
        const double e = std::exp(nx.values[at] - mx);
        out[at] = e;
        sum += e;
      }
      for (Index i = 0; i < sp.len; ++i) {
        const Index at = base + i * sp.inner;
        if (keep[at]) out[at] /= sum;
      }
    }
  }
  Tensor xv = x;
  return make_op(nx.shape, std::move(out), {x}, [xv, sp, keep](Node& self) {
    Node& p = *xv.node_;
    ArrayX& g = grad_buffer(p);
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index in = 0; in < sp.inner; ++in) {
        const Index base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (Index i = 0; i < sp.len; ++i) {
          const Index at = base + i * sp.inner;
          if (keep[at]) dot += self.grad[at] * self.values[at];
        }
        for (Index i = 0; i < sp.len; ++i) {
          const Index at = base + i * sp.inner;
          if (keep[at]) g[at] += self.values[at] * (self.grad[at] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce(const Tensor& x, Index axis, Reduce kind) {
  const Node& nx = need(x);
  AxisSpans sp = axis_spans(nx.shape, axis);
  Shape out_shape;
  for (size_t i = 0; i < nx.shape.size(); ++i) {
    if (static_cast<Index>(i) != axis) out_shape.push_back(nx.shape[i]);
  }
  const Index n_out = sp.outer * sp.inner;
  ArrayX out(n_out);
  std::vector<Index> arg;  // flat input index of the chosen max
  if (kind == Reduce::Max) arg.resize(n_out);

  for (Index o = 0; o < sp.outer; ++o) {
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.len * sp.inner + in;
      const Index dst = o * sp.inner + in;
      if (kind == Reduce::Max) {
        double best = nx.values[base];
        Index best_at = base;
        for (Index i = 1; i < sp.len; ++i) {
          const Index at = base + i * sp.inner;
          if (nx.values[at] > best) {
            best = nx.values[at];
            best_at = at;
          }
        }
        out[dst] = best;
        arg[dst] = best_at;
      } else {
        double s = 0.0;
        for (Index i = 0; i < sp.len; ++i) s += nx.values[base + i * sp.inner];
        out[dst] = kind == Reduce::Mean ? s / static_cast<double>(sp.len) : s;
      }
    }
  }
  Tensor xv = x;
  return make_op(out_shape, std::move(out), {x}, [xv, sp, kind, arg](Node& self) {
    Node& p = *xv.node_;
    ArrayX& g = grad_buffer(p);
    for (Index o = 0; o < sp.outer; ++o) {
      for (Index in = 0; in < sp.inner; ++in) {
        const Index base = o * sp.len * sp.inner + in;
        const Index dst = o * sp.inner + in;
        switch (kind) {
          case Reduce::Max:
            g[arg[dst]] += self.grad[dst];
            break;
          case Reduce::Sum:
            for (Index i = 0; i < sp.len; ++i) g[base + i * sp.inner] += self.grad[dst];
            break;
          case Reduce::Mean: {
            const double gv = self.grad[dst] / static_cast<double>(sp.len);
            for (Index i = 0; i < sp.len; ++i) g[base + i * sp.inner] += gv;
            break;
          }
        }
      }
    }
  });
}

Tensor sum_all(const Tensor& x) {
  const Node& nx = need(x);
  ArrayX out(1);
  out[0] = nx.values.sum();
  Tensor xv = x;
  return make_op({}, std::move(out), {x},
                 [xv](Node& self) { grad_buffer(*xv.node_) += self.grad[0]; });
}

Tensor mean_all(const Tensor& x) {
  const Node& nx = need(x);
  const double inv = 1.0 / static_cast<double>(nx.numel());
  ArrayX out(1);
  out[0] = nx.values.sum() * inv;
  Tensor xv = x;
  return make_op({}, std::move(out), {x},
                 [xv, inv](Node& self) { grad_buffer(*xv.node_) += self.grad[0] * inv; });
}

// ---------------------------------------------------------------------------
// Gather / scatter

Tensor gather_rows(const Tensor& x, const std::vector<Index>& rows) {
  const Node& nx = need(x);
  if (nx.shape.size() != 2) {
    throw std::invalid_argument("gather_rows expects rank 2, got " + shape_str(nx.shape));
  }
  const Index n = nx.shape[0], d = nx.shape[1];
  const Index m = static_cast<Index>(rows.size());
  ArrayX out(m * d);
  for (Index i = 0; i < m; ++i) {
    if (rows[i] < 0 || rows[i] >= n) throw std::invalid_argument("gather_rows index out of range");
    out.segment(i * d, d) = nx.values.segment(rows[i] * d, d);
  }
  Tensor xv = x;
  return make_op({m, d}, std::move(out), {x}, [xv, rows, d](Node& self) {
    ArrayX& g = grad_buffer(*xv.node_);
    for (Index i = 0; i < static_cast<Index>(rows.size()); ++i) {
      g.segment(rows[i] * d, d) += self.grad.segment(i * d, d);
    }
  });
}

Tensor gather_elements(const Tensor& x, const std::vector<Index>& flat) {
  const Node& nx = need(x);
  const Index m = static_cast<Index>(flat.size());
  ArrayX out(m);
  for (Index i = 0; i < m; ++i) {
    if (flat[i] < 0 || flat[i] >= nx.numel()) {
      throw std::invalid_argument("gather_elements index out of range");
    }
    out[i] = nx.values[flat[i]];
  }
  Tensor xv = x;
  return make_op({m}, std::move(out), {x}, [xv, flat](Node& self) {
    ArrayX& g = grad_buffer(*xv.node_);
    for (Index i = 0; i < static_cast<Index>(flat.size()); ++i) g[flat[i]] += self.grad[i];
  });
}

Tensor weighted_gather_rows(const Tensor& feats, const std::vector<std::array<Index, 3>>& idx,
                            const std::vector<std::array<double, 3>>& w) {
  const Node& nf = need(feats);
  if (nf.shape.size() != 2) {
    throw std::invalid_argument("weighted_gather_rows expects rank 2, got " + shape_str(nf.shape));
  }
  if (idx.size() != w.size()) throw std::invalid_argument("index/weight count mismatch");
  const Index n = nf.shape[0], d = nf.shape[1];
  const Index m = static_cast<Index>(idx.size());
  ArrayX out = ArrayX::Zero(m * d);
  for (Index i = 0; i < m; ++i) {
    for (int j = 0; j < 3; ++j) {
      const Index r = idx[i][j];
      if (r < 0 || r >= n) throw std::invalid_argument("weighted_gather_rows index out of range");
      out.segment(i * d, d) += w[i][j] * nf.values.segment(r * d, d);
    }
  }
  Tensor fv = feats;
  return make_op({m, d}, std::move(out), {feats}, [fv, idx, w, d](Node& self) {
    ArrayX& g = grad_buffer(*fv.node_);
    for (Index i = 0; i < static_cast<Index>(idx.size()); ++i) {
      for (int j = 0; j < 3; ++j) {
        g.segment(idx[i][j] * d, d) += w[i][j] * self.grad.segment(i * d, d);
      }
    }
  });
}

Tensor scatter_max_rows(const Tensor& feats, const std::vector<Index>& cell_of_row,
                        Index n_cells) {
  const Node& nf = need(feats);
  if (nf.shape.size() != 2) {
    throw std::invalid_argument("scatter_max_rows expects rank 2, got " + shape_str(nf.shape));
  }
  const Index n = nf.shape[0], d = nf.shape[1];
  if (static_cast<Index>(cell_of_row.size()) != n) {
    throw std::invalid_argument("cell assignment count does not match row count");
  }
  ArrayX out = ArrayX::Zero(n_cells * d);
  std::vector<Index> arg(n_cells * d, -1);  // source row per output element
  for (Index i = 0; i < n; ++i) {
    const Index c = cell_of_row[i];
    if (c < 0) continue;
    if (c >= n_cells) throw std::invalid_argument("cell id out of range");
    for (Index j = 0; j < d; ++j) {
      const Index at = c * d + j;
      const double v = nf.values[i * d + j];
      if (arg[at] < 0 || v > out[at]) {
        out[at] = v;
        arg[at] = i;
      }
    }
  }
  Tensor fv = feats;
  return make_op({n_cells, d}, std::move(out), {feats}, [fv, arg, d](Node& self) {
    ArrayX& g = grad_buffer(*fv.node_);
    for (Index at = 0; at < self.numel(); ++at) {
      if (arg[at] >= 0) g[arg[at] * d + at % d] += self.grad[at];
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps, double tol) {
  Tensor probe = Tensor::from_array(x.shape(), x.values(), true);
  Tensor y = f(probe);
  if (y.numel() != 1) {
    throw std::invalid_argument("grad_check function must produce a scalar, got shape " +
                                shape_str(y.shape()));
  }
  backward(y);
  ArrayX analytic = probe.grad();

  GradCheckReport report;
  report.name = name;
  ArrayX base = x.values();
  for (Index i = 0; i < x.numel(); ++i) {
    double plus, minus;
    {
      NoGradGuard ng;
      ArrayX bumped = base;
      bumped[i] = base[i] + eps;
      plus = f(Tensor::from_array(x.shape(), bumped)).value_at();
      bumped[i] = base[i] - eps;
      minus = f(Tensor::from_array(x.shape(), bumped)).value_at();
    }
    const double numeric = (plus - minus) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = i;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

// ---------------------------------------------------------------------------
// Optimizers

namespace {
void check_param(const Tensor& p) {
  if (!p.defined()) throw std::invalid_argument("optimizer given an empty tensor");
  if (!p.requires_grad()) throw std::invalid_argument("optimizer given a tensor without grad");
}
}  // namespace

Sgd::Sgd(std::vector<Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {
  for (const Tensor& p : params_) check_param(p);
}

void Sgd::step() {
  for (Tensor& p : params_) {
    if (!p.has_grad()) throw std::logic_error("sgd step with a missing gradient");
    p.node_->values -= lr_ * p.node_->grad;
  }
  zero_grad();
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    check_param(p);
    m_.push_back(ArrayX::Zero(p.numel()));
    v_.push_back(ArrayX::Zero(p.numel()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) throw std::logic_error("adam step with a missing gradient");
    const ArrayX& g = p.node_->grad;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.square();
    p.node_->values -= lr_ * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

std::vector<double> Adam::state() const {
  std::vector<double> out;
  out.push_back(static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    out.insert(out.end(), m_[i].data(), m_[i].data() + m_[i].size());
    out.insert(out.end(), v_[i].data(), v_[i].data() + v_[i].size());
  }
  return out;
}

void Adam::restore(const std::vector<double>& state) {
  size_t expect = 1;
  for (const Tensor& p : params_) expect += 2 * static_cast<size_t>(p.numel());
  if (state.size() != expect) {
    throw std::invalid_argument("optimizer state has " + std::to_string(state.size()) +
                                " values, expected " + std::to_string(expect));
  }
  t_ = static_cast<std::int64_t>(state[0]);
  size_t at = 1;
  for (size_t i = 0; i < params_.size(); ++i) {
    const Index n = params_[i].numel();
    m_[i] = Eigen::Map<const ArrayX>(state.data() + at, n);
    at += n;
    v_[i] = Eigen::Map<const ArrayX>(state.data() + at, n);
    at += n;
  }
}

}  // namespace ost
