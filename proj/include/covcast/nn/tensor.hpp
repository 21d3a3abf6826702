#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Every tensor is stored as a row-major matrix: rows = shape[0] and
// cols = product of the remaining dimensions (a rank-1 tensor is a single
// row). Operations record their inputs and a backward closure when gradient
// recording is enabled and at least one input requires a gradient.

#include "covcast/core.hpp"

#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <unordered_set>
#include <vector>

namespace covcast::nn {

using Buffer = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Buffer value, Shape shape, bool requires_grad = false) {
    if (shape.empty()) shape = {value.rows(), value.cols()};
    const Index rows = shape.size() == 1 ? 1 : shape[0];
    if (shape_numel(shape) != value.size()) {
      throw ConfigError("tensor data length " + std::to_string(value.size()) +
                        " does not match shape " + shape_str(shape));
    }
    value.resize(rows, shape_numel(shape) / std::max<Index>(rows, 1));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor matrix(const Buffer& value, bool requires_grad = false) {
    return from(value, {value.rows(), value.cols()}, requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index rows = shape.size() == 1 ? 1 : shape[0];
    Buffer b = Buffer::Zero(rows, shape_numel(shape) / std::max<Index>(rows, 1));
    return from(std::move(b), std::move(shape), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    Buffer b(1, 1);
    b(0, 0) = v;
    return from(std::move(b), {1, 1}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index numel() const { return node_->value.size(); }

  const Buffer& value() const { return node_->value; }
  Buffer& mutable_value() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ConfigError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Buffer& grad() const { return node_->grad; }
  Buffer grad_or_zero() const {
    return has_grad() ? node_->grad : Buffer::Zero(rows(), cols());
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline void accumulate(Node& n, const Buffer& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

/// Builds an op output; records the graph only when needed.
inline Tensor make_result(Buffer value, Shape shape, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  bool needs = false;
  if (grad_enabled_flag()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    out->requires_grad = true;
    for (auto& t : inputs) out->parents.push_back(t.node());
    out->backward = std::move(backward);
  }
  return Tensor(std::move(out));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

}  // namespace detail

/// Reverse sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires one; the recorded graph is released, so a
/// second call on the same loss is an error.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ConfigError("backward: loss must be a scalar tensor");
  }
  Node* root = loss.node().get();
  if (root->consumed) throw ConfigError("backward: graph already consumed; run forward again");
  if (!root->requires_grad) throw ConfigError("backward: loss is detached from any parameter");

  // Iterative post-order DFS gives parents before children.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Buffer::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() > 0) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad.resize(0, 0);
      n->consumed = true;
    }
  }
  root->consumed = true;
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + ")");
  }
  Buffer v = a.value() * b.value();
  return detail::make_result(std::move(v), {a.rows(), b.cols()}, {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, self.grad * pb.value.transpose());
    if (pb.requires_grad) detail::accumulate(pb, pa.value.transpose() * self.grad);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer v = a.value() + b.value();
  return detail::make_result(std::move(v), a.shape(), {a, b}, [](Node& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer v = a.value() - b.value();
  return detail::make_result(std::move(v), a.shape(), {a, b}, [](Node& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], -self.grad);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer v = a.value().cwiseProduct(b.value());
  return detail::make_result(std::move(v), a.shape(), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate(pa, self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) detail::accumulate(pb, self.grad.cwiseProduct(pa.value));
  });
}

/// a + 1 * bias with bias of shape 1 x cols.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ConfigError("add_bias: bias must be 1 x " + std::to_string(a.cols()));
  }
  Buffer v = a.value().rowwise() + bias.value().row(0);
  return detail::make_result(std::move(v), a.shape(), {a, bias}, [](Node& self) {
    detail::accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) detail::accumulate(*self.parents[1], self.grad.colwise().sum());
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Buffer v = a.value() * c;
  return detail::make_result(std::move(v), a.shape(), {a},
                             [c](Node& self) { detail::accumulate(*self.parents[0], self.grad * c); });
}

inline Tensor sigmoid(const Tensor& a) {
  Buffer v = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return detail::make_result(v, a.shape(), {a}, [](Node& self) {
    const auto& y = self.value.array();
    detail::accumulate(*self.parents[0], (self.grad.array() * y * (1.0 - y)).matrix());
  });
}

inline Tensor tanh(const Tensor& a) {
  Buffer v = a.value().array().tanh().matrix();
  return detail::make_result(v, a.shape(), {a}, [](Node& self) {
    const auto& y = self.value.array();
    detail::accumulate(*self.parents[0], (self.grad.array() * (1.0 - y * y)).matrix());
  });
}

/// Same data, new shape.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const Index rows = shape.size() == 1 ? 1 : shape[0];
  Buffer v = a.value().reshaped<Eigen::RowMajor>(rows, a.numel() / std::max<Index>(rows, 1));
  const Index in_rows = a.rows(), in_cols = a.cols();
  return detail::make_result(std::move(v), std::move(shape), {a}, [in_rows, in_cols](Node& self) {
    detail::accumulate(*self.parents[0], self.grad.reshaped<Eigen::RowMajor>(in_rows, in_cols));
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ConfigError("concat_cols: row counts differ");
    total += p.cols();
  }
  Buffer v(rows, total);
  std::vector<Index> widths;
  Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    widths.push_back(p.cols());
    off += p.cols();
  }
  return detail::make_result(std::move(v), {rows, total}, parts, [widths](Node& self) {
    Index o = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (self.parents[i]->requires_grad) {
        detail::accumulate(*self.parents[i], self.grad.middleCols(o, widths[i]));
      }
      o += widths[i];
    }
  });
}

inline Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ConfigError("slice_cols: out of range");
  Buffer v = a.value().middleCols(start, count);
  const Index rows = a.rows(), cols = a.cols();
  return detail::make_result(std::move(v), {rows, count}, {a}, [=](Node& self) {
    Buffer g = Buffer::Zero(rows, cols);
    g.middleCols(start, count) = self.grad;
    detail::accumulate(*self.parents[0], g);
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ConfigError("concat_rows: column counts differ");
    total += p.rows();
  }
  Buffer v(total, cols);
  std::vector<Index> heights;
  Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    heights.push_back(p.rows());
    off += p.rows();
  }
  return detail::make_result(std::move(v), {total, cols}, parts, [heights](Node& self) {
    Index o = 0;
    for (std::size_t i = 0; i < heights.size(); ++i) {
      if (self.parents[i]->requires_grad) {
        detail::accumulate(*self.parents[i], self.grad.middleRows(o, heights[i]));
      }
      o += heights[i];
    }
  });
}

/// out(:, k) = a(:, perm[k]).
inline Tensor permute_cols(const Tensor& a, const std::vector<Index>& perm) {
  if (static_cast<Index>(perm.size()) != a.cols()) throw ConfigError("permute_cols: bad permutation");
  Buffer v(a.rows(), a.cols());
  for (Index k = 0; k < a.cols(); ++k) v.col(k) = a.value().col(perm[static_cast<std::size_t>(k)]);
  return detail::make_result(std::move(v), a.shape(), {a}, [perm](Node& self) {
    Buffer g = Buffer::Zero(self.grad.rows(), self.grad.cols());
    for (Index k = 0; k < g.cols(); ++k) g.col(perm[static_cast<std::size_t>(k)]) += self.grad.col(k);
    detail::accumulate(*self.parents[0], g);
  });
}

inline Tensor sum(const Tensor& a) {
  Buffer v(1, 1);
  v(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return detail::make_result(std::move(v), {1, 1}, {a}, [r, c](Node& self) {
    detail::accumulate(*self.parents[0], Buffer::Constant(r, c, self.grad(0, 0)));
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Euclidean norm of each row, shape rows x 1. The gradient at a zero row is 0.
inline Tensor row_norm(const Tensor& a) {
  Buffer v = a.value().rowwise().norm();
  return detail::make_result(v, {a.rows(), 1}, {a}, [](Node& self) {
    const Buffer& x = self.parents[0]->value;
    Buffer g(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
      const double n = self.value(r, 0);
      g.row(r) = n > 0.0 ? Eigen::RowVectorXd(x.row(r) * (self.grad(r, 0) / n))
                         : Eigen::RowVectorXd::Zero(x.cols());
    }
    detail::accumulate(*self.parents[0], g);
  });
}

/// Mean over time of a time-major stack: rows t * batch + b -> batch x D.
inline Tensor mean_over_steps(const Tensor& stacked, Index steps, Index batch) {
  if (stacked.rows() != steps * batch) throw ConfigError("mean_over_steps: row count mismatch");
  Buffer v = Buffer::Zero(batch, stacked.cols());
  for (Index t = 0; t < steps; ++t) v += stacked.value().middleRows(t * batch, batch);
  v /= static_cast<double>(steps);
  return detail::make_result(std::move(v), {batch, stacked.cols()}, {stacked},
                             [steps, batch](Node& self) {
                               Buffer g(steps * batch, self.grad.cols());
                               const Buffer share = self.grad / static_cast<double>(steps);
                               for (Index t = 0; t < steps; ++t) g.middleRows(t * batch, batch) = share;
                               detail::accumulate(*self.parents[0], g);
                             });
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: zero with probability p, survivors scaled by 1/(1-p).
/// Identity when not training or p = 0.
inline Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Buffer mask(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : 0.0;
  Buffer v = x.value().cwiseProduct(mask);
  return detail::make_result(std::move(v), x.shape(), {x}, [mask = std::move(mask)](Node& self) {
    detail::accumulate(*self.parents[0], self.grad.cwiseProduct(mask));
  });
}

// ---------------------------------------------------------------------------
// 3-D convolution

/// Single-channel 3-D convolution with zero "same" padding and stride one.
/// input: {B, 1, D0, D1, D2}; kernel: {1, 1, ks, ks, ks} (ks odd); bias: scalar.
inline Tensor conv3d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const auto& is = input.shape();
  const auto& ks_shape = kernel.shape();
  if (is.size() != 5 || is[1] != 1) throw ConfigError("conv3d_same: input must be {B,1,D0,D1,D2}");
  if (ks_shape.size() != 5 || ks_shape[2] != ks_shape[3] || ks_shape[3] != ks_shape[4]) {
    throw ConfigError("conv3d_same: kernel must be {1,1,ks,ks,ks}");
  }
  const Index ks = ks_shape[2];
  if (ks % 2 == 0) throw ConfigError("conv3d_same: kernel size must be odd");
  if (bias.numel() != 1) throw ConfigError("conv3d_same: bias must be a scalar");
  const Index batch = is[0], d0 = is[2], d1 = is[3], d2 = is[4];
  const Index half = ks / 2;

  const Buffer& x = input.value();
  const double* w = kernel.value().data();
  const double b = bias.value()(0, 0);
  Buffer out(batch, d0 * d1 * d2);

  auto at = [=](Index t, Index i, Index j) { return (t * d1 + i) * d2 + j; };
  for (Index n = 0; n < batch; ++n) {
    const double* xn = x.row(n).data();
    double* on = out.row(n).data();
    for (Index t = 0; t < d0; ++t)
      for (Index i = 0; i < d1; ++i)
        for (Index j = 0; j < d2; ++j) {
          double acc = b;
          for (Index u = 0; u < ks; ++u) {
            const Index tt = t + u - half;
            if (tt < 0 || tt >= d0) continue;
            for (Index v = 0; v < ks; ++v) {
              const Index ii = i + v - half;
              if (ii < 0 || ii >= d1) continue;
              for (Index q = 0; q < ks; ++q) {
                const Index jj = j + q - half;
                if (jj < 0 || jj >= d2) continue;
                acc += w[(u * ks + v) * ks + q] * xn[at(tt, ii, jj)];
              }
            }
          }
          on[at(t, i, j)] = acc;
        }
  }

  return detail::make_result(std::move(out), is, {input, kernel, bias}, [=](Node& self) {
    Node& pin = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pb = *self.parents[2];
    const Buffer& g = self.grad;
    Buffer gx = pin.requires_grad ? Buffer::Zero(pin.value.rows(), pin.value.cols()) : Buffer();
    Buffer gw = Buffer::Zero(1, ks * ks * ks);
    const double* wk = pk.value.data();
    for (Index n = 0; n < batch; ++n) {
      const double* xn = pin.value.row(n).data();
      const double* gn = g.row(n).data();
      for (Index t = 0; t < d0; ++t)
        for (Index i = 0; i < d1; ++i)
          for (Index j = 0; j < d2; ++j) {
            const double go = gn[at(t, i, j)];
            if (go == 0.0) continue;
            for (Index u = 0; u < ks; ++u) {
              const Index tt = t + u - half;
              if (tt < 0 || tt >= d0) continue;
              for (Index v = 0; v < ks; ++v) {
                const Index ii = i + v - half;
                if (ii < 0 || ii >= d1) continue;
                for (Index q = 0; q < ks; ++q) {
                  const Index jj = j + q - half;
                  if (jj < 0 || jj >= d2) continue;
                  const Index widx = (u * ks + v) * ks + q;
                  gw(0, widx) += go * xn[at(tt, ii, jj)];
                  if (pin.requires_grad) gx(n, at(tt, ii, jj)) += go * wk[widx];
                }
              }
            }
          }
    }
    if (pin.requires_grad) detail::accumulate(pin, gx);
    if (pk.requires_grad) detail::accumulate(pk, gw);
    if (pb.requires_grad) detail::accumulate(pb, Buffer::Constant(1, 1, g.sum()));
  });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention

/// Row-stochastic softmax of each row.
inline Buffer softmax_rows(const Buffer& s) {
  Buffer p(s.rows(), s.cols());
  for (Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    p.row(r) = (s.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

/// softmax(Q_h K_h^T / sqrt(d_k)) V_h per sample and head on a time-major
/// stack (row t * batch + b); heads take contiguous feature slices of width
/// d_k = D / heads. Output has the stacked shape of Q.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index steps, Index batch,
                        Index heads) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const Index dim = q.cols();
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention: head count " + std::to_string(heads) + " must divide width " +
                      std::to_string(dim));
  }
  if (q.rows() != steps * batch) throw ConfigError("attention: row count mismatch");
  const Index dk = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  auto gather = [=](const Buffer& src, Index b, Index h) {
    Buffer m(steps, dk);
    for (Index t = 0; t < steps; ++t) m.row(t) = src.block(t * batch + b, h * dk, 1, dk);
    return m;
  };

  auto probs = std::make_shared<std::vector<Buffer>>(static_cast<std::size_t>(batch * heads));
  Buffer out(steps * batch, dim);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const Buffer qh = gather(q.value(), b, h);
      const Buffer kh = gather(k.value(), b, h);
      const Buffer vh = gather(v.value(), b, h);
      Buffer p = softmax_rows((qh * kh.transpose()) * inv_sqrt);
      const Buffer o = p * vh;
      for (Index t = 0; t < steps; ++t) out.block(t * batch + b, h * dk, 1, dk) = o.row(t);
      (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }

  return detail::make_result(std::move(out), q.shape(), {q, k, v}, [=](Node& self) {
    Node& pq = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pv = *self.parents[2];
    Buffer gq = Buffer::Zero(steps * batch, dim);
    Buffer gk = Buffer::Zero(steps * batch, dim);
    Buffer gv = Buffer::Zero(steps * batch, dim);
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads; ++h) {
        const Buffer& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
        const Buffer qh = gather(pq.value, b, h);
        const Buffer kh = gather(pk.value, b, h);
        const Buffer vh = gather(pv.value, b, h);
        const Buffer go = gather(self.grad, b, h);
        const Buffer dv = p.transpose() * go;
        const Buffer dp = go * vh.transpose();
        const Eigen::VectorXd rowdot = (dp.cwiseProduct(p)).rowwise().sum();
        const Buffer ds = p.cwiseProduct(dp.colwise() - rowdot) * inv_sqrt;
        const Buffer dq = ds * kh;
        const Buffer dkm = ds.transpose() * qh;
        for (Index t = 0; t < steps; ++t) {
          gq.block(t * batch + b, h * dk, 1, dk) += dq.row(t);
          gk.block(t * batch + b, h * dk, 1, dk) += dkm.row(t);
          gv.block(t * batch + b, h * dk, 1, dk) += dv.row(t);
        }
      }
    }
    detail::accumulate(pq, gq);
    detail::accumulate(pk, gk);
    detail::accumulate(pv, gv);
  });
}

}  // namespace covcast::nn
