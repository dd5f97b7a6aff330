#include "vitsig/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vitsig {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check_shape(const Shape& shape) {
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in " + shape_str(shape));
  }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void rank_error(const char* op, const Shape& a) {
  throw std::invalid_argument(std::string(op) + ": unsupported shape " + shape_str(a));
}

// Rows/cols when an op works over the last dimension.
std::pair<std::size_t, std::size_t> rows_cols(const Shape& shape, const char* op) {
  if (shape.empty()) rank_error(op, shape);
  std::size_t cols = static_cast<std::size_t>(shape.back());
  std::size_t rows = shape_numel(shape) / cols;
  return {rows, cols};
}

std::vector<double>& grad_of(const std::shared_ptr<Storage>& s) { return s->grad; }

// C[M,N] += A[M,K] * B[K,N]
void mm_nn(double* c, const double* a, const double* b, int m_, int k_, int n_) {
  for (int m = 0; m < m_; ++m) {
    const double* ar = a + static_cast<std::size_t>(m) * k_;
    double* cr = c + static_cast<std::size_t>(m) * n_;
    for (int k = 0; k < k_; ++k) {
      const double av = ar[k];
      const double* br = b + static_cast<std::size_t>(k) * n_;
      for (int n = 0; n < n_; ++n) cr[n] += av * br[n];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(double* c, const double* a, const double* b, int m_, int k_, int n_) {
  for (int m = 0; m < m_; ++m) {
    const double* ar = a + static_cast<std::size_t>(m) * k_;
    double* cr = c + static_cast<std::size_t>(m) * n_;
    for (int n = 0; n < n_; ++n) {
      const double* br = b + static_cast<std::size_t>(n) * k_;
      double acc = 0.0;
      for (int k = 0; k < k_; ++k) acc += ar[k] * br[k];
      cr[n] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void mm_tn(double* c, const double* a, const double* b, int m_, int k_, int n_) {
  for (int m = 0; m < m_; ++m) {
    const double* ar = a + static_cast<std::size_t>(m) * k_;
    const double* br = b + static_cast<std::size_t>(m) * n_;
    for (int k = 0; k < k_; ++k) {
      const double av = ar[k];
      double* cr = c + static_cast<std::size_t>(k) * n_;
      for (int n = 0; n < n_; ++n) cr[n] += av * br[n];
    }
  }
}

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

// Builds the output tensor and, if any parent requires grad, attaches the
// node whose backward rule `bw` accumulates into parent grad buffers.
Tensor make_op(const char* op, Shape shape, std::vector<double> values,
               std::vector<Tensor> parents, std::function<void()> bw) {
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  Tensor out(std::move(shape), std::move(values), rg);
  if (rg) {
    auto node = std::make_shared<Node>();
    node->parents = std::move(parents);
    node->out = out.storage();
    node->out_numel = out.size();
    node->backward = std::move(bw);
    node->op = op;
    out.set_node(std::move(node));
  }
  return out;
}

}  // namespace

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  check_shape(shape_);
  storage_ = std::make_shared<Storage>();
  storage_->value.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  check_shape(shape_);
  if (values.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape_));
  }
  storage_ = std::make_shared<Storage>();
  storage_->value = std::move(values);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0, false); }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor has shape " + shape_str(shape_));
  return storage_->value[0];
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->value = storage_->value;
  t.requires_grad_ = requires_grad_;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.storage_ = storage_;
  t.requires_grad_ = false;
  return t;
}

bool Tensor::has_grad() const { return storage_ && !storage_->grad.empty(); }

Tensor Tensor::grad() const {
  Tensor g(shape_, 0.0, false);
  if (has_grad()) g.storage_->value = storage_->grad;
  return g;
}

void Tensor::zero_grad() {
  if (storage_) storage_->grad.clear();
}

bool Tensor::all_finite() const {
  for (double v : storage_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::backward() {
  if (!defined() || size() != 1) {
    throw std::invalid_argument("backward: loss must be a one-element tensor, got " +
                                (defined() ? shape_str(shape_) : std::string("undefined")));
  }
  if (!node_) {
    storage_->grad.assign(1, 1.0);
    return;
  }

  // Post-order DFS so parents precede children; reversed later for the sweep.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].node().get();
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  // Reset grads everywhere the sweep can reach so repeated calls agree.
  for (Node* n : topo) {
    n->out->grad.assign(n->out_numel, 0.0);
    for (const Tensor& p : n->parents) {
      if (p.requires_grad() && !p.node()) p.storage()->grad.assign(p.size(), 0.0);
    }
  }
  storage_->grad[0] = 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto sa = a.storage(), sb = b.storage();
  bool ga = wants_grad(a), gb = wants_grad(b);
  auto out = make_op("add", a.shape(), std::move(v), {a, b}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, sb, so, ga, gb]() {
      const auto& g = grad_of(so);
      if (ga) {
        auto& d = grad_of(sa);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (gb) {
        auto& d = grad_of(sb);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto sa = a.storage(), sb = b.storage();
  bool ga = wants_grad(a), gb = wants_grad(b);
  auto out = make_op("sub", a.shape(), std::move(v), {a, b}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, sb, so, ga, gb]() {
      const auto& g = grad_of(so);
      if (ga) {
        auto& d = grad_of(sa);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (gb) {
        auto& d = grad_of(sb);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto sa = a.storage(), sb = b.storage();
  bool ga = wants_grad(a), gb = wants_grad(b);
  auto out = make_op("mul", a.shape(), std::move(v), {a, b}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, sb, so, ga, gb]() {
      const auto& g = grad_of(so);
      if (ga) {
        auto& d = grad_of(sa);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * sb->value[i];
      }
      if (gb) {
        auto& d = grad_of(sb);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * sa->value[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  auto sa = a.storage();
  auto out = make_op("scale", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, s]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    };
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + s;
  auto sa = a.storage();
  auto out = make_op("add_scalar", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    };
  }
  return out;
}

Tensor add_rowwise(const Tensor& mat, const Tensor& vec) {
  if (mat.rank() != 2 || vec.rank() != 1 || mat.dim(1) != vec.dim(0)) {
    shape_error("add_rowwise", mat.shape(), vec.shape());
  }
  const std::size_t rows = static_cast<std::size_t>(mat.dim(0));
  const std::size_t cols = static_cast<std::size_t>(mat.dim(1));
  std::vector<double> v(mat.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = mat.data()[r * cols + c] + vec.data()[c];
  }
  auto sm = mat.storage(), sv = vec.storage();
  bool gm = wants_grad(mat), gv = wants_grad(vec);
  auto out = make_op("add_rowwise", mat.shape(), std::move(v), {mat, vec}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sm, sv, so, gm, gv, rows, cols]() {
      const auto& g = grad_of(so);
      if (gm) {
        auto& d = grad_of(sm);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (gv) {
        auto& d = grad_of(sv);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
        }
      }
    };
  }
  return out;
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const int m_ = a.dim(0), k_ = a.dim(1), n_ = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m_) * n_, 0.0);
  mm_nn(v.data(), a.data(), b.data(), m_, k_, n_);
  auto sa = a.storage(), sb = b.storage();
  bool ga = wants_grad(a), gb = wants_grad(b);
  auto out = make_op("matmul", Shape{m_, n_}, std::move(v), {a, b}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, sb, so, ga, gb, m_, k_, n_]() {
      const auto& g = grad_of(so);
      if (ga) mm_nt(grad_of(sa).data(), g.data(), sb->value.data(), m_, n_, k_);
      if (gb) mm_tn(grad_of(sb).data(), sa->value.data(), g.data(), m_, k_, n_);
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) rank_error("transpose", a.shape());
  const std::size_t r = static_cast<std::size_t>(a.dim(0));
  const std::size_t c = static_cast<std::size_t>(a.dim(1));
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = a.data()[i * c + j];
  }
  auto sa = a.storage();
  auto out = make_op("transpose", Shape{a.dim(1), a.dim(0)}, std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, r, c]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
      }
    };
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  std::vector<double> v(a.values());
  auto sa = a.storage();
  auto out = make_op("reshape", std::move(shape), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    };
  }
  return out;
}

// ---- nonlinearities --------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  auto [rows, cols] = rows_cols(a.shape(), "softmax_rows");
  std::vector<double> v(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double* y = v.data() + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
  }
  auto sa = a.storage();
  auto out = make_op("softmax_rows", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    std::size_t rr = rows, cc = cols;
    out.node()->backward = [sa, so, rr, cc]() {
      const auto& g = grad_of(so);
      const auto& p = so->value;
      auto& d = grad_of(sa);
      for (std::size_t r = 0; r < rr; ++r) {
        const double* gr = g.data() + r * cc;
        const double* pr = p.data() + r * cc;
        double dot = 0.0;
        for (std::size_t c = 0; c < cc; ++c) dot += gr[c] * pr[c];
        double* dr = d.data() + r * cc;
        for (std::size_t c = 0; c < cc; ++c) dr[c] += pr[c] * (gr[c] - dot);
      }
    };
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& a) {
  auto [rows, cols] = rows_cols(a.shape(), "log_softmax_rows");
  std::vector<double> v(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * cols;
    double* y = v.data() + r * cols;
    double mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(x[c] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  auto sa = a.storage();
  auto out = make_op("log_softmax_rows", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    std::size_t rr = rows, cc = cols;
    out.node()->backward = [sa, so, rr, cc]() {
      const auto& g = grad_of(so);
      const auto& ls = so->value;
      auto& d = grad_of(sa);
      for (std::size_t r = 0; r < rr; ++r) {
        const double* gr = g.data() + r * cc;
        const double* lr = ls.data() + r * cc;
        double gsum = 0.0;
        for (std::size_t c = 0; c < cc; ++c) gsum += gr[c];
        double* dr = d.data() + r * cc;
        for (std::size_t c = 0; c < cc; ++c) dr[c] += gr[c] - std::exp(lr[c]) * gsum;
      }
    };
  }
  return out;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  auto [rows, cols] = rows_cols(x.shape(), "layer_norm_rows");
  if (gamma.rank() != 1 || static_cast<std::size_t>(gamma.dim(0)) != cols) {
    shape_error("layer_norm_rows", x.shape(), gamma.shape());
  }
  if (beta.rank() != 1 || static_cast<std::size_t>(beta.dim(0)) != cols) {
    shape_error("layer_norm_rows", x.shape(), beta.shape());
  }
  std::vector<double> v(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double dlt = xr[c] - mean;
      var += dlt * dlt;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mean) * inv;
      (*xhat)[r * cols + c] = h;
      v[r * cols + c] = h * gamma.data()[c] + beta.data()[c];
    }
  }
  auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage();
  bool wx = wants_grad(x), wg = wants_grad(gamma), wb = wants_grad(beta);
  auto out = make_op("layer_norm_rows", x.shape(), std::move(v), {x, gamma, beta}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    std::size_t rr = rows, cc = cols;
    out.node()->backward = [sx, sg, sb, so, wx, wg, wb, xhat, inv_std, rr, cc]() {
      const auto& g = grad_of(so);
      for (std::size_t r = 0; r < rr; ++r) {
        const double* gr = g.data() + r * cc;
        const double* hr = xhat->data() + r * cc;
        if (wg) {
          auto& dg = grad_of(sg);
          for (std::size_t c = 0; c < cc; ++c) dg[c] += gr[c] * hr[c];
        }
        if (wb) {
          auto& db = grad_of(sb);
          for (std::size_t c = 0; c < cc; ++c) db[c] += gr[c];
        }
        if (wx) {
          auto& dx = grad_of(sx);
          const double inv = (*inv_std)[r];
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t c = 0; c < cc; ++c) {
            const double dh = gr[c] * sg->value[c];
            sum_dh += dh;
            sum_dh_h += dh * hr[c];
          }
          const double n = static_cast<double>(cc);
          for (std::size_t c = 0; c < cc; ++c) {
            const double dh = gr[c] * sg->value[c];
            dx[r * cc + c] += inv * (dh - sum_dh / n - hr[c] * sum_dh_h / n);
          }
        }
      }
    };
  }
  return out;
}

namespace {
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.data()[i];
    const double t = std::tanh(kGeluK * (x + kGeluA * x * x * x));
    v[i] = 0.5 * x * (1.0 + t);
  }
  auto sa = a.storage();
  auto out = make_op("gelu", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = sa->value[i];
        const double t = std::tanh(kGeluK * (x + kGeluA * x * x * x));
        const double du = kGeluK * (1.0 + 3.0 * kGeluA * x * x);
        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      }
    };
  }
  return out;
}

Tensor tanh(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a.data()[i]);
  auto sa = a.storage();
  auto out = make_op("tanh", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so]() {
      const auto& g = grad_of(so);
      const auto& t = so->value;
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - t[i] * t[i]);
    };
  }
  return out;
}

Tensor log(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.data()[i];
    if (x <= 0.0) throw std::invalid_argument("log: nonpositive element " + std::to_string(x));
    v[i] = std::log(x);
  }
  auto sa = a.storage();
  auto out = make_op("log", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / sa->value[i];
    };
  }
  return out;
}

Tensor clip(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clip: lo > hi");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a.data()[i], lo, hi);
  auto sa = a.storage();
  auto out = make_op("clip", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, lo, hi]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = sa->value[i];
        if (x >= lo && x <= hi) d[i] += g[i];
      }
    };
  }
  return out;
}

Tensor clamp_min(const Tensor& a, double m) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(a.data()[i], m);
  auto sa = a.storage();
  auto out = make_op("clamp_min", a.shape(), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, m]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (sa->value[i] >= m) d[i] += g[i];
      }
    };
  }
  return out;
}

// ---- reductions and indexing ------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  auto sa = a.storage();
  auto out = make_op("sum_all", Shape{1}, std::vector<double>{s}, {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so]() {
      const double g = grad_of(so)[0];
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
    };
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  const double n = static_cast<double>(a.size());
  auto sa = a.storage();
  auto out = make_op("mean_all", Shape{1}, std::vector<double>{s / n}, {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, n]() {
      const double g = grad_of(so)[0] / n;
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
    };
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int col0, int ncols) {
  if (a.rank() != 2) rank_error("slice_cols", a.shape());
  if (col0 < 0 || ncols <= 0 || col0 + ncols > a.dim(1)) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(col0) + "," +
                                std::to_string(col0 + ncols) + ") out of " + shape_str(a.shape()));
  }
  const std::size_t rows = static_cast<std::size_t>(a.dim(0));
  const std::size_t cols = static_cast<std::size_t>(a.dim(1));
  const std::size_t w = static_cast<std::size_t>(ncols);
  const std::size_t c0 = static_cast<std::size_t>(col0);
  std::vector<double> v(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; ++c) v[r * w + c] = a.data()[r * cols + c0 + c];
  }
  auto sa = a.storage();
  auto out = make_op("slice_cols", Shape{a.dim(0), ncols}, std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, rows, cols, w, c0]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) d[r * cols + c0 + c] += g[r * w + c];
      }
    };
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int rows = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) shape_error("concat_cols", parts[0].shape(), p.shape());
    total += p.dim(1);
  }
  const std::size_t rr = static_cast<std::size_t>(rows);
  const std::size_t tc = static_cast<std::size_t>(total);
  std::vector<double> v(rr * tc);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = static_cast<std::size_t>(p.dim(1));
    for (std::size_t r = 0; r < rr; ++r) {
      for (std::size_t c = 0; c < pc; ++c) v[r * tc + off + c] = p.data()[r * pc + c];
    }
    off += pc;
  }
  std::vector<std::shared_ptr<Storage>> stores;
  std::vector<std::size_t> widths;
  std::vector<char> grads;
  for (const Tensor& p : parts) {
    stores.push_back(p.storage());
    widths.push_back(static_cast<std::size_t>(p.dim(1)));
    grads.push_back(wants_grad(p) ? 1 : 0);
  }
  auto out = make_op("concat_cols", Shape{rows, total}, std::move(v), parts, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [stores, widths, grads, so, rr, tc]() {
      const auto& g = grad_of(so);
      std::size_t off2 = 0;
      for (std::size_t k = 0; k < stores.size(); ++k) {
        if (grads[k]) {
          auto& d = grad_of(stores[k]);
          for (std::size_t r = 0; r < rr; ++r) {
            for (std::size_t c = 0; c < widths[k]; ++c) d[r * widths[k] + c] += g[r * tc + off2 + c];
          }
        }
        off2 += widths[k];
      }
    };
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int cols = parts[0].dim(parts[0].rank() - 1);
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) shape_error("concat_rows", parts[0].shape(), p.shape());
    total += p.dim(0);
  }
  const std::size_t cc = static_cast<std::size_t>(cols);
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(total) * cc);
  for (const Tensor& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<Storage>> stores;
  std::vector<std::size_t> sizes;
  std::vector<char> grads;
  for (const Tensor& p : parts) {
    stores.push_back(p.storage());
    sizes.push_back(p.size());
    grads.push_back(wants_grad(p) ? 1 : 0);
  }
  auto out = make_op("concat_rows", Shape{total, cols}, std::move(v), parts, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [stores, sizes, grads, so]() {
      const auto& g = grad_of(so);
      std::size_t off = 0;
      for (std::size_t k = 0; k < stores.size(); ++k) {
        if (grads[k]) {
          auto& d = grad_of(stores[k]);
          for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
        }
        off += sizes[k];
      }
    };
  }
  return out;
}

Tensor pick(const Tensor& a, std::size_t flat_index) {
  if (flat_index >= a.size()) {
    throw std::invalid_argument("pick: index " + std::to_string(flat_index) + " out of " +
                                std::to_string(a.size()));
  }
  auto sa = a.storage();
  auto out = make_op("pick", Shape{1}, std::vector<double>{a.data()[flat_index]}, {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, flat_index]() { grad_of(sa)[flat_index] += grad_of(so)[0]; };
  }
  return out;
}

Tensor gather(const Tensor& a, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> indices) {
  check_shape(out_shape);
  if (!indices || shape_numel(out_shape) != indices->size()) {
    throw std::invalid_argument("gather: index map does not cover shape " + shape_str(out_shape));
  }
  std::vector<double> v(indices->size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t src = (*indices)[i];
    if (src >= a.size()) throw std::invalid_argument("gather: index " + std::to_string(src) + " out of range");
    v[i] = a.data()[src];
  }
  auto sa = a.storage();
  auto out = make_op("gather", std::move(out_shape), std::move(v), {a}, nullptr);
  if (out.node()) {
    auto so = out.storage();
    out.node()->backward = [sa, so, indices]() {
      const auto& g = grad_of(so);
      auto& d = grad_of(sa);
      for (std::size_t i = 0; i < g.size(); ++i) d[(*indices)[i]] += g[i];
    };
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, int label) {
  std::size_t k = logits.size();
  if (logits.rank() == 2 && logits.dim(0) != 1) rank_error("cross_entropy", logits.shape());
  if (label < 0 || static_cast<std::size_t>(label) >= k) {
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) + " out of " +
                                std::to_string(k));
  }
  Tensor ls = log_softmax_rows(logits);
  return scale(pick(ls, static_cast<std::size_t>(label)), -1.0);
}

Tensor grad_input(Tensor& loss, const Tensor& input) {
  loss.backward();
  return input.grad();
}

}  // namespace vitsig
