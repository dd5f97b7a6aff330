#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vitsig {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

// Value and gradient buffers shared by every handle of the same tensor.
struct Storage {
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass touches it
};

/// Dense row-major tensor of doubles. Copies are shallow (shared storage);
/// use clone() for an independent buffer. Ops attach a Node recording
/// parents and a backward rule whenever some operand requires gradients.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros_like(const Tensor& t);

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return storage_ ? storage_->value.size() : 0; }

  double* data() { return storage_->value.data(); }
  const double* data() const { return storage_->value.data(); }
  std::vector<double>& values() { return storage_->value; }
  const std::vector<double>& values() const { return storage_->value; }

  /// Single element of a one-element tensor.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

  Tensor clone() const;     // deep copy, no graph
  Tensor detached() const;  // shared data, no graph

  /// Reverse-mode sweep from a one-element tensor. Gradients from earlier
  /// sweeps over the same graph are reset first, so repeated calls are
  /// reproducible.
  void backward();

  bool has_grad() const;
  /// Copy of the accumulated gradient; zeros when backward never reached
  /// this tensor.
  Tensor grad() const;
  void zero_grad();

  bool all_finite() const;

  const std::shared_ptr<Storage>& storage() const { return storage_; }
  const std::shared_ptr<Node>& node() const { return node_; }
  void set_node(std::shared_ptr<Node> n) { node_ = std::move(n); }

 private:
  Shape shape_;
  std::shared_ptr<Storage> storage_;
  std::shared_ptr<Node> node_;
  bool requires_grad_ = false;
};

struct Node {
  std::vector<Tensor> parents;
  std::shared_ptr<Storage> out;
  std::size_t out_numel = 0;
  std::function<void()> backward;
  const char* op = "";
};

// ---- forward ops (autodiff-aware) --------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// mat[R,C] + vec[C] broadcast over rows.
Tensor add_rowwise(const Tensor& mat, const Tensor& vec);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// Row-wise layer norm over the last dimension; eps sits inside the square
/// root, so constant rows normalize to zero before the affine part.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);
/// tanh-approximate GELU:
///   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
/// with the exact derivative of that expression in the backward rule.
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);
Tensor clamp_min(const Tensor& a, double m);
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor slice_cols(const Tensor& a, int col0, int ncols);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
/// One element by flat index, as a [1] tensor.
Tensor pick(const Tensor& a, std::size_t flat_index);
/// out[i] = a[indices[i]]; backward scatter-adds. Fixed index maps such as
/// patch extraction build on this.
Tensor gather(const Tensor& a, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> indices);

/// -log softmax(logits)[label]; logits is a [K] or [1,K] tensor.
Tensor cross_entropy(const Tensor& logits, int label);

/// d(loss)/d(input) with input's shape; zeros when input is unreachable.
Tensor grad_input(Tensor& loss, const Tensor& input);

}  // namespace vitsig
