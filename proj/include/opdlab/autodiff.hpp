#pragma once

// Define-by-run reverse-mode differentiation over dense f64 tensors.
//
// A Tape records every primitive applied to tensors that require gradients.
// Tape::backward replays the recorded rules in reverse order. Tensors are
// shared handles: copying a Tensor aliases the same storage.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace opdlab::ad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                       std::to_string(numel(shape)) + " elements but data has " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return node_->shape.back(); }

  // Handle semantics: constness of the handle does not extend to the shared buffers.
  std::vector<double>& data() const { return node_->data; }
  std::vector<double>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Plain row-major kernels, shared by the tape primitives and the inference path.
namespace kernel {

// out[m x n] += a[m x k] * b[k x n]
inline void matmul_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                       std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
inline void matmul_acc_bt(const double* g, const double* b, double* out, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* orow = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      orow[p] += s;
    }
  }
}

// out[k x n] += a[m x k]^T * g[m x n]
inline void matmul_acc_at(const double* a, const double* g, double* out, std::size_t m,
                          std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

inline void log_softmax_row(const double* x, double* out, std::size_t n) {
  double mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
  const double lse = mx + std::log(s);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - lse;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Normalizes one row; writes the normalized (pre-affine) values to xhat and returns 1/std.
inline double layer_norm_row(const double* x, const double* gamma, const double* beta, double* out,
                             double* xhat, std::size_t n, double eps) {
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) {
    xhat[j] = (x[j] - mean) * rstd;
    out[j] = xhat[j] * gamma[j] + beta[j];
  }
  return rstd;
}

}  // namespace kernel

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return rules_.size(); }

  void reset() {
    rules_.clear();
    consumed_ = false;
  }

  void backward(const Tensor& loss) {
    if (consumed_) throw std::logic_error("backward: tape already consumed; call reset() first");
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;
    auto& node = *loss.node();
    node.ensure_grad();
    node.grad[0] += 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

  // ---- elementwise -------------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) {
    same_shape("add", a, b);
    auto out = make(a.shape(), {a, b});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
    record({a, b}, out, [a, b, out]() mutable {
      const auto& g = out.grad();
      accumulate(a, g, 1.0);
      accumulate(b, g, 1.0);
    });
    return out;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    same_shape("sub", a, b);
    auto out = make(a.shape(), {a, b});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
    record({a, b}, out, [a, b, out]() mutable {
      const auto& g = out.grad();
      accumulate(a, g, 1.0);
      accumulate(b, g, -1.0);
    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    same_shape("mul", a, b);
    auto out = make(a.shape(), {a, b});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
    record({a, b}, out, [a, b, out]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
    return out;
  }

  Tensor scale(const Tensor& a, double s) {
    auto out = make(a.shape(), {a});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * s;
    record({a}, out, [a, out, s]() mutable { accumulate(a, out.grad(), s); });
    return out;
  }

  // x[m x n] + row[n], the row broadcast over every row of x.
  Tensor add_row(const Tensor& x, const Tensor& row) {
    if (row.size() != x.cols()) {
      throw ShapeError("add_row: row of shape " + to_string(row.shape()) +
                       " does not broadcast over " + to_string(x.shape()));
    }
    auto out = make(x.shape(), {x, row});
    const std::size_t n = x.cols(), m = x.size() / n;
    auto& o = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] + row[j];
    record({x, row}, out, [x, row, out, m, n]() mutable {
      const auto& g = out.grad();
      accumulate(x, g, 1.0);
      if (row.requires_grad()) {
        auto& gr = row.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
      }
    });
    return out;
  }

  Tensor exp(const Tensor& a) {
    auto out = make(a.shape(), {a});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(a[i]);
    record({a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out[i];
    });
    return out;
  }

  Tensor log(const Tensor& a) {
    auto out = make(a.shape(), {a});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(a[i]);
    record({a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[i];
    });
    return out;
  }

  Tensor relu(const Tensor& a) {
    auto out = make(a.shape(), {a});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
    record({a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] > 0.0) ga[i] += g[i];
    });
    return out;
  }

  // tanh-approximation GELU
  Tensor gelu(const Tensor& a) {
    auto out = make(a.shape(), {a});
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = kernel::gelu(a[i]);
    record({a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      const auto& g = out.grad();
      auto& ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * kernel::gelu_grad(a[i]);
    });
    return out;
  }

  // ---- linear algebra ----------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
      throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                       to_string(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    auto out = make({m, n}, {a, b});
    kernel::matmul_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) kernel::matmul_acc_bt(g.data(), b.data().data(), a.grad().data(), m, k, n);
      if (b.requires_grad()) kernel::matmul_acc_at(a.data().data(), g.data(), b.grad().data(), m, k, n);
    });
    return out;
  }

  // Row gather: out[t] = table[ids[t]].
  Tensor embedding(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + to_string(table.shape()));
    const std::size_t rows = table.shape()[0], d = table.shape()[1];
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= rows) {
        throw std::out_of_range("embedding: index " + std::to_string(id) + " outside table of " +
                                std::to_string(rows) + " rows");
      }
    }
    std::vector<int> idx(ids.begin(), ids.end());
    auto out = make({idx.size(), d}, {table});
    auto& o = out.data();
    for (std::size_t t = 0; t < idx.size(); ++t)
      std::copy_n(table.data().begin() + idx[t] * d, d, o.begin() + t * d);
    record({table}, out, [table, out, idx, d]() mutable {
      if (!table.requires_grad()) return;
      const auto& g = out.grad();
      auto& gt = table.grad();
      for (std::size_t t = 0; t < idx.size(); ++t)
        for (std::size_t j = 0; j < d; ++j) gt[idx[t] * d + j] += g[t * d + j];
    });
    return out;
  }

  // Rows [start, start + count) of a 2-D tensor.
  Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    if (x.rank() != 2 || start + count > x.shape()[0]) {
      throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                       ") out of range for " + to_string(x.shape()));
    }
    const std::size_t d = x.shape()[1];
    auto out = make({count, d}, {x});
    std::copy_n(x.data().begin() + start * d, count * d, out.data().begin());
    record({x}, out, [x, out, start, d]() mutable {
      if (!x.requires_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[start * d + i] += g[i];
    });
    return out;
  }

  // ---- normalization -----------------------------------------------------

  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t n = x.cols();
    if (gamma.size() != n || beta.size() != n) {
      throw ShapeError("layer_norm: affine parameters " + to_string(gamma.shape()) + "/" +
                       to_string(beta.shape()) + " do not match last axis of " + to_string(x.shape()));
    }
    const std::size_t m = x.size() / n;
    auto out = make(x.shape(), {x, gamma, beta});
    std::vector<double> xhat(x.size()), rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
      rstd[i] = kernel::layer_norm_row(x.data().data() + i * n, gamma.data().data(), beta.data().data(),
                                       out.data().data() + i * n, xhat.data() + i * n, n, eps);
    }
    record({x, gamma, beta}, out,
           [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), m, n]() mutable {
             const auto& g = out.grad();
             if (gamma.requires_grad() || beta.requires_grad()) {
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < n; ++j) {
                   if (gamma.requires_grad()) gamma.grad()[j] += g[i * n + j] * xhat[i * n + j];
                   if (beta.requires_grad()) beta.grad()[j] += g[i * n + j];
                 }
             }
             if (!x.requires_grad()) return;
             auto& gx = x.grad();
             const auto& gm = gamma.data();
             for (std::size_t i = 0; i < m; ++i) {
               double sum_d = 0.0, sum_dx = 0.0;
               for (std::size_t j = 0; j < n; ++j) {
                 const double d = g[i * n + j] * gm[j];
                 sum_d += d;
                 sum_dx += d * xhat[i * n + j];
               }
               const double inv_n = 1.0 / static_cast<double>(n);
               for (std::size_t j = 0; j < n; ++j) {
                 const double d = g[i * n + j] * gm[j];
                 gx[i * n + j] += rstd[i] * (d - inv_n * sum_d - xhat[i * n + j] * inv_n * sum_dx);
               }
             }
           });
    return out;
  }

  Tensor log_softmax(const Tensor& x) {
    const std::size_t n = x.cols(), m = x.size() / n;
    auto out = make(x.shape(), {x});
    for (std::size_t i = 0; i < m; ++i)
      kernel::log_softmax_row(x.data().data() + i * n, out.data().data() + i * n, n);
    record({x}, out, [x, out, m, n]() mutable {
      if (!x.requires_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp(out[i * n + j]) * gs;
      }
    });
    return out;
  }

  // Causal multi-head self-attention over a fused projection qkv[T x 3d]
  // laid out as [q | k | v]. Returns the concatenated head outputs [T x d].
  Tensor causal_attention(const Tensor& qkv, std::size_t heads) {
    if (qkv.rank() != 2 || qkv.cols() % 3 != 0 || (qkv.cols() / 3) % heads != 0) {
      throw ShapeError("causal_attention: qkv of shape " + to_string(qkv.shape()) +
                       " cannot be split into " + std::to_string(heads) + " heads");
    }
    const std::size_t T = qkv.shape()[0], d = qkv.cols() / 3, hd = d / heads, stride = 3 * d;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    auto out = make({T, d}, {qkv});
    // probs[h][i][j] for j <= i, stored densely as [heads x T x T]
    std::vector<double> probs(heads * T * T, 0.0);
    const auto& in = qkv.data();
    auto& o = out.data();
    std::vector<double> row(T);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += in[i * stride + qo + e] * in[j * stride + ko + e];
          row[j] = s * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* p = probs.data() + (h * T + i) * T;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = row[j] / z;
          for (std::size_t e = 0; e < hd; ++e) o[i * d + qo + e] += p[j] * in[j * stride + vo + e];
        }
      }
    }
    record({qkv}, out, [qkv, out, probs = std::move(probs), T, d, hd, heads, stride, inv_sqrt]() mutable {
      if (!qkv.requires_grad()) return;
      const auto& g = out.grad();
      const auto& in = qkv.data();
      auto& gi = qkv.grad();
      std::vector<double> dp(T);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        for (std::size_t i = 0; i < T; ++i) {
          const double* p = probs.data() + (h * T + i) * T;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < hd; ++e) {
              s += g[i * d + qo + e] * in[j * stride + vo + e];
              gi[j * stride + vo + e] += p[j] * g[i * d + qo + e];
            }
            dp[j] = s;
            dot += p[j] * s;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
            if (ds == 0.0) continue;
            for (std::size_t e = 0; e < hd; ++e) {
              gi[i * stride + qo + e] += ds * in[j * stride + ko + e];
              gi[j * stride + ko + e] += ds * in[i * stride + qo + e];
            }
          }
        }
      }
    });
    return out;
  }

  // ---- gathers and reductions --------------------------------------------

  // out[t] = x[t, ids[t]] for a 2-D x.
  Tensor gather(const Tensor& x, std::span<const int> ids) {
    if (x.rank() != 2 || ids.size() != x.shape()[0]) {
      throw ShapeError("gather: " + std::to_string(ids.size()) + " indices for rows of " + to_string(x.shape()));
    }
    const std::size_t n = x.shape()[1];
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= n) {
        throw std::out_of_range("gather: index " + std::to_string(id) + " outside row of width " +
                                std::to_string(n));
      }
    }
    std::vector<int> idx(ids.begin(), ids.end());
    auto out = make({idx.size()}, {x});
    for (std::size_t t = 0; t < idx.size(); ++t) out.data()[t] = x[t * n + idx[t]];
    record({x}, out, [x, out, idx, n]() mutable {
      if (!x.requires_grad()) return;
      const auto& g = out.grad();
      auto& gx = x.grad();
      for (std::size_t t = 0; t < idx.size(); ++t) gx[t * n + idx[t]] += g[t];
    });
    return out;
  }

  // Σ_i w_i x_i. The weights are constants (a mask when they are 0/1).
  Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
    if (weights.size() != x.size()) {
      throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor of shape " +
                       to_string(x.shape()));
    }
    std::vector<double> w(weights.begin(), weights.end());
    auto out = make({1}, {x});
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
    out.data()[0] = s;
    record({x}, out, [x, out, w = std::move(w)]() mutable {
      if (!x.requires_grad()) return;
      const double g = out.grad()[0];
      auto& gx = x.grad();
      for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
    });
    return out;
  }

  Tensor sum(const Tensor& x) {
    std::vector<double> ones(x.size(), 1.0);
    return weighted_sum(x, ones);
  }

  Tensor masked_sum(const Tensor& x, std::span<const double> mask) { return weighted_sum(x, mask); }

  Tensor masked_mean(const Tensor& x, std::span<const double> mask) {
    double count = 0.0;
    for (double m : mask) count += m;
    if (count <= 0.0) throw std::invalid_argument("masked_mean: mask selects no elements");
    std::vector<double> w(mask.begin(), mask.end());
    for (auto& v : w) v /= count;
    return weighted_sum(x, w);
  }

  Tensor mean(const Tensor& x) {
    std::vector<double> w(x.size(), 1.0 / static_cast<double>(x.size()));
    return weighted_sum(x, w);
  }

  // Sum of a list of scalars.
  Tensor add_scalars(std::span<const Tensor> xs) {
    std::vector<Tensor> ins(xs.begin(), xs.end());
    auto out = make({1}, ins);
    double s = 0.0;
    for (const auto& x : xs) s += x.item();
    out.data()[0] = s;
    record(ins, out, [ins, out]() mutable {
      const double g = out.grad()[0];
      for (auto& x : ins)
        if (x.requires_grad()) x.grad()[0] += g;
    });
    return out;
  }

 private:
  static void same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
      throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
    }
  }

  static Tensor make(Shape shape, std::initializer_list<Tensor> inputs) {
    return make(std::move(shape), std::vector<Tensor>(inputs));
  }

  static Tensor make(Shape shape, const std::vector<Tensor>& inputs) {
    bool rg = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    return Tensor::zeros(std::move(shape), rg);
  }

  static void accumulate(const Tensor& t, const std::vector<double>& g, double s) {
    if (!t.requires_grad()) return;
    auto& gt = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gt[i] += s * g[i];
  }

  template <class Rule>
  void record(const std::vector<Tensor>& inputs, Tensor& out, Rule&& rule) {
    if (!out.requires_grad()) return;
    if (consumed_) throw std::logic_error("tape: recording after backward; call reset() first");
    for (const auto& in : inputs)
      if (in.requires_grad()) in.node()->ensure_grad();
    out.node()->ensure_grad();
    rules_.emplace_back(std::forward<Rule>(rule));
  }
  template <class Rule>
  void record(std::initializer_list<Tensor> inputs, Tensor& out, Rule&& rule) {
    record(std::vector<Tensor>(inputs), out, std::forward<Rule>(rule));
  }

  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

}  // namespace opdlab::ad
