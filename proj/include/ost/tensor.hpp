#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ost {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using ArrayX = Eigen::ArrayXd;
// Row-major throughout: flat index of (i, j) in an [R, C] tensor is i * C + j.
using MatrixX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Reverse-mode autodiff handle. Copies share the underlying node, so a copied
// Tensor sees the same values and gradient. Rank 0 (shape {}) holds a scalar.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor from_array(Shape shape, ArrayX values, bool requires_grad = false);
  static Tensor from_matrix(const MatrixX& m, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  Index rank() const;
  Index numel() const;
  Index extent(Index axis) const;

  bool requires_grad() const;

  const ArrayX& values() const;
  double value_at(Index flat = 0) const;
  // Leaf-only mutation (parameters, buffers). Throws on graph-produced tensors.
  ArrayX& leaf_values();

  // Views the flat storage as a [rows, cols] row-major matrix.
  Eigen::Map<const MatrixX> matrix(Index rows, Index cols) const;
  // Rank <= 2 tensors viewed with their natural dimensions.
  Eigen::Map<const MatrixX> matrix() const;

  bool has_grad() const;
  const ArrayX& grad() const;
  void zero_grad();
  // Adds an externally computed gradient (e.g. summed worker replicas).
  void accumulate_grad(const ArrayX& g);

  // Stable identity of the underlying node, for bookkeeping in containers.
  const void* id() const { return node_.get(); }

  std::shared_ptr<detail::Node> node_;
};

// Runs reverse-mode accumulation from a scalar (numel == 1) loss. Gradients
// add into every reachable tensor with requires_grad; existing gradients are
// accumulated into, not overwritten.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise binary ops with NumPy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
Tensor abs(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor concat(const std::vector<Tensor>& xs, Index axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, Index axis_a, Index axis_b);

// [m, k] x [k, n], or batched with equal leading dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., d_in] -> [..., d_out] with weight [d_in, d_out]; bias optional
// (pass a default-constructed Tensor to skip it).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// input [c_in, h, w], kernel [c_out, c_in, kh, kw], zero padding,
// output spatial extent floor((h + 2 * padding - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, Index stride, Index padding);

Tensor softmax(const Tensor& x, Index axis);
// Softmax over kept entries only; dropped entries (keep == 0) are excluded
// from the max/denominator and produce exactly 0. keep is flat row-major
// over x's shape. A line with no kept entry is all zeros.
Tensor softmax_masked(const Tensor& x, Index axis, const std::vector<std::uint8_t>& keep);

enum class Reduce { Sum, Mean, Max };
// Reduces one axis away. Max routes the gradient to the first maximal element.
Tensor reduce(const Tensor& x, Index axis, Reduce kind);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// x [n, d] gathered by row index; repeats allowed, backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<Index>& rows);
// Flat-index gather producing a rank-1 tensor.
Tensor gather_elements(const Tensor& x, const std::vector<Index>& flat);

// feats [n, d] -> [m, d]: out(i) = sum_j w(i, j) * feats(idx(i, j)).
Tensor weighted_gather_rows(const Tensor& feats,
                            const std::vector<std::array<Index, 3>>& idx,
                            const std::vector<std::array<double, 3>>& w);

// feats [n, d] scattered into [n_cells, d] by per-row cell id (-1 drops the
// row); occupied cells take the elementwise max, empty cells stay zero with
// no gradient. Backward routes each output element to the first row
// attaining the max.
Tensor scatter_max_rows(const Tensor& feats, const std::vector<Index>& cell_of_row,
                        Index n_cells);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_coordinate = -1;
  bool passed = false;
};

// Central-difference check of d f(x) / dx against the recorded graph.
// f must be deterministic and produce a scalar. Relative error uses
// |a - b| / max(|a|, |b|, 1e-8).
GradCheckReport grad_check(const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps = 1e-5, double tol = 1e-4);

class Sgd {
 public:
  explicit Sgd(std::vector<Tensor> params, double lr);
  void step();
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
};

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  void step();
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }

  // Flat optimizer state for exact training resume: t, then m and v per
  // parameter in construction order.
  std::vector<double> state() const;
  void restore(const std::vector<double>& state);

 private:
  std::vector<Tensor> params_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<ArrayX> m_, v_;
};

}  // namespace ost
