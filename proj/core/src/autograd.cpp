#include "vkn/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "vkn/errors.hpp"

namespace vkn {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

}  // namespace detail

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

MatMap as_mat(Tensor& t, int rows, int cols) { return MatMap(t.data(), rows, cols); }
ConstMatMap as_mat(const Tensor& t, int rows, int cols) { return ConstMatMap(t.data(), rows, cols); }

Node* raw(const Var& v) {
  if (!v.defined()) throw Error("operation on an undefined Var");
  return v.node();
}

// Builds the result node; records parents and the backward closure only when
// gradients are enabled and at least one parent participates.
Var make_result(Tensor value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(fn);
    }
  }
  return Var(std::move(node));
}

void require_rank2(const Tensor& t, const char* what) { require_rank(t, 2, what); }

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const { return raw(*this)->value; }
Tensor& Var::value_mut() { return raw(*this)->value; }
bool Var::requires_grad() const { return raw(*this)->requires_grad; }
bool Var::has_grad() const { return raw(*this)->grad.size() == raw(*this)->value.size(); }

Tensor Var::grad() const {
  Node* n = raw(*this);
  if (n->grad.size() == n->value.size()) return n->grad;
  return Tensor(n->value.shape(), 0.0);
}

void Var::zero_grad() {
  Node* n = raw(*this);
  if (n->grad.size() == n->value.size()) n->grad.fill(0.0);
}

void Var::backward() const {
  Node* root = raw(*this);
  if (root->value.size() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(root->value.shape()));
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
  // Intermediate gradients are only meaningful during the sweep.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace ag {

Var constant(Tensor t) { return Var(std::move(t), false); }

namespace {

template <class Fwd, class Bwd>
Var elementwise_unary(const Var& a, Fwd fwd, Bwd bwd) {
  Node* an = raw(a);
  Tensor out(an->value.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(an->value[i]);
  return make_result(std::move(out), {a.node_ptr()}, [an, bwd](Node& self) {
    if (!an->requires_grad) return;
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bwd(an->value[i], self.value[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Node* an = raw(a);
  Node* bn = raw(b);
  require_same_shape(an->value.shape(), bn->value.shape(), "add");
  Tensor out = an->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bn->value[i];
  return make_result(std::move(out), {a.node_ptr(), b.node_ptr()}, [an, bn](Node& self) {
    for (Node* p : {an, bn}) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  Node* an = raw(a);
  Node* bn = raw(b);
  require_same_shape(an->value.shape(), bn->value.shape(), "sub");
  Tensor out = an->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bn->value[i];
  return make_result(std::move(out), {a.node_ptr(), b.node_ptr()}, [an, bn](Node& self) {
    if (an->requires_grad) {
      Tensor& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Node* an = raw(a);
  Node* bn = raw(b);
  require_same_shape(an->value.shape(), bn->value.shape(), "mul");
  Tensor out = an->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bn->value[i];
  return make_result(std::move(out), {a.node_ptr(), b.node_ptr()}, [an, bn](Node& self) {
    if (an->requires_grad) {
      Tensor& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  Node* an = raw(a);
  Node* bn = raw(b);
  require_same_shape(an->value.shape(), bn->value.shape(), "div");
  Tensor out = an->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bn->value[i];
  return make_result(std::move(out), {a.node_ptr(), b.node_ptr()}, [an, bn](Node& self) {
    if (an->requires_grad) {
      Tensor& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bn->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return elementwise_unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return elementwise_unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var add_row(const Var& x, const Var& bias) {
  Node* xn = raw(x);
  Node* bn = raw(bias);
  require_rank2(xn->value, "add_row");
  const int rows = xn->value.dim(0);
  const int cols = xn->value.dim(1);
  if (bn->value.size() != static_cast<std::size_t>(cols)) {
    throw DimensionError("add_row: bias " + shape_str(bn->value.shape()) + " for " + shape_str(xn->value.shape()));
  }
  Tensor out = xn->value;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) += bn->value[c];
  return make_result(std::move(out), {x.node_ptr(), bias.node_ptr()}, [xn, bn, rows, cols](Node& self) {
    if (xn->requires_grad) {
      Tensor& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      Tensor& g = bn->grad_buffer();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) g[c] += self.grad.at(r, c);
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  Node* an = raw(a);
  Node* bn = raw(b);
  require_rank2(an->value, "matmul lhs");
  require_rank2(bn->value, "matmul rhs");
  const int n = an->value.dim(0), k = an->value.dim(1), m = bn->value.dim(1);
  if (bn->value.dim(0) != k) {
    throw DimensionError("matmul: " + shape_str(an->value.shape()) + " x " + shape_str(bn->value.shape()));
  }
  Tensor out({n, m});
  as_mat(out, n, m).noalias() = as_mat(an->value, n, k) * as_mat(bn->value, k, m);
  return make_result(std::move(out), {a.node_ptr(), b.node_ptr()}, [an, bn, n, k, m](Node& self) {
    auto go = as_mat(self.grad, n, m);
    if (an->requires_grad) as_mat(an->grad_buffer(), n, k).noalias() += go * as_mat(bn->value, k, m).transpose();
    if (bn->requires_grad) as_mat(bn->grad_buffer(), k, m).noalias() += as_mat(an->value, n, k).transpose() * go;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Node* an = raw(a);
  Node* bn = raw(b);
  require_rank2(an->value, "matmul_nt lhs");
  require_rank2(bn->value, "matmul_nt rhs");
  const int n = an->value.dim(0), k = an->value.dim(1), m = bn->value.dim(0);
  if (bn->value.dim(1) != k) {
    throw DimensionError("matmul_nt: " + shape_str(an->value.shape()) + " x " + shape_str(bn->value.shape()) + "^T");
  }
  Tensor out({n, m});
  as_mat(out, n, m).noalias() = as_mat(an->value, n, k) * as_mat(bn->value, m, k).transpose();
  return make_result(std::move(out), {a.node_ptr(), b.node_ptr()}, [an, bn, n, k, m](Node& self) {
    auto go = as_mat(self.grad, n, m);
    if (an->requires_grad) as_mat(an->grad_buffer(), n, k).noalias() += go * as_mat(bn->value, m, k);
    if (bn->requires_grad) as_mat(bn->grad_buffer(), m, k).noalias() += go.transpose() * as_mat(an->value, n, k);
  });
}

Var transpose(const Var& a) {
  Node* an = raw(a);
  require_rank2(an->value, "transpose");
  const int n = an->value.dim(0), m = an->value.dim(1);
  Tensor out({m, n});
  as_mat(out, m, n) = as_mat(an->value, n, m).transpose();
  return make_result(std::move(out), {a.node_ptr()}, [an, n, m](Node& self) {
    if (an->requires_grad) as_mat(an->grad_buffer(), n, m) += as_mat(self.grad, m, n).transpose();
  });
}

Var relu(const Var& a) {
  return elementwise_unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return elementwise_unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return elementwise_unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return elementwise_unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  return elementwise_unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var pow_scalar(const Var& a, double p) {
  return elementwise_unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return x == 0.0 ? (p == 1.0 ? 1.0 : 0.0) : p * std::pow(x, p - 1.0); });
}

Var softmax_rows(const Var& x, std::span<const char> column_mask) {
  Node* xn = raw(x);
  require_rank2(xn->value, "softmax_rows");
  const int rows = xn->value.dim(0), cols = xn->value.dim(1);
  if (!column_mask.empty() && column_mask.size() != static_cast<std::size_t>(cols)) {
    throw DimensionError("softmax_rows: mask length " + std::to_string(column_mask.size()) + " for " +
                         std::to_string(cols) + " columns");
  }
  std::vector<char> mask(column_mask.begin(), column_mask.end());
  auto keep = [&mask](int c) { return mask.empty() || mask[c]; };
  Tensor out({rows, cols}, 0.0);
  for (int r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c)
      if (keep(c)) mx = std::max(mx, xn->value.at(r, c));
    if (!std::isfinite(mx)) continue;
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      if (!keep(c)) continue;
      out.at(r, c) = std::exp(xn->value.at(r, c) - mx);
      s += out.at(r, c);
    }
    for (int c = 0; c < cols; ++c) out.at(r, c) /= s;
  }
  return make_result(std::move(out), {x.node_ptr()}, [xn, rows, cols](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->grad_buffer();
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (int c = 0; c < cols; ++c) g.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
    }
  });
}

Var sum(const Var& a) {
  Node* an = raw(a);
  double s = 0.0;
  for (double v : an->value.values()) s += v;
  return make_result(Tensor::scalar(s), {a.node_ptr()}, [an](Node& self) {
    if (!an->requires_grad) return;
    Tensor& g = an->grad_buffer();
    const double go = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

Var mean(const Var& a) {
  const std::size_t n = raw(a)->value.size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(const Var& x) {
  Node* xn = raw(x);
  require_rank2(xn->value, "sum_rows");
  const int rows = xn->value.dim(0), cols = xn->value.dim(1);
  Tensor out({rows}, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[r] += xn->value.at(r, c);
  return make_result(std::move(out), {x.node_ptr()}, [xn, rows, cols](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->grad_buffer();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) g.at(r, c) += self.grad[r];
  });
}

Var logsumexp(const Var& a) {
  Node* an = raw(a);
  if (an->value.size() == 0) throw DimensionError("logsumexp of an empty tensor");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : an->value.values()) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : an->value.values()) s += std::exp(v - mx);
  const double out = mx + std::log(s);
  return make_result(Tensor::scalar(out), {a.node_ptr()}, [an](Node& self) {
    if (!an->requires_grad) return;
    Tensor& g = an->grad_buffer();
    const double lse = self.value[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * std::exp(an->value[i] - lse);
  });
}

Var reshape(const Var& a, Shape shape) {
  Node* an = raw(a);
  Tensor out = an->value.reshaped(std::move(shape));
  return make_result(std::move(out), {a.node_ptr()}, [an](Node& self) {
    if (!an->requires_grad) return;
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var gather_rows(const Var& x, std::span<const int> rows) {
  Node* xn = raw(x);
  require_rank2(xn->value, "gather_rows");
  const int n = xn->value.dim(0), cols = xn->value.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  for (int r : idx) {
    if (r < 0 || r >= n) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of " + std::to_string(n));
  }
  Tensor out({static_cast<int>(idx.size()), cols});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int c = 0; c < cols; ++c) out.at(static_cast<int>(i), c) = xn->value.at(idx[i], c);
  return make_result(std::move(out), {x.node_ptr()}, [xn, idx, cols](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < cols; ++c) g.at(idx[i], c) += self.grad.at(static_cast<int>(i), c);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const int cols = raw(parts[0])->value.dim(1);
  int rows = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<Node*> nodes;
  for (const Var& p : parts) {
    Node* pn = raw(p);
    require_rank2(pn->value, "concat_rows");
    if (pn->value.dim(1) != cols) throw DimensionError("concat_rows: column mismatch");
    rows += pn->value.dim(0);
    parents.push_back(p.node_ptr());
    nodes.push_back(pn);
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (Node* pn : nodes) {
    std::copy(pn->value.values().begin(), pn->value.values().end(), out.data() + off);
    off += pn->value.size();
  }
  return make_result(std::move(out), std::move(parents), [nodes](Node& self) {
    std::size_t o = 0;
    for (Node* pn : nodes) {
      if (pn->requires_grad) {
        Tensor& g = pn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[o + i];
      }
      o += pn->value.size();
    }
  });
}

Var slice_cols(const Var& x, int start, int len) {
  Node* xn = raw(x);
  require_rank2(xn->value, "slice_cols");
  const int rows = xn->value.dim(0), cols = xn->value.dim(1);
  if (start < 0 || len < 0 || start + len > cols) throw DimensionError("slice_cols out of range");
  Tensor out({rows, len});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c) out.at(r, c) = xn->value.at(r, start + c);
  return make_result(std::move(out), {x.node_ptr()}, [xn, rows, start, len](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->grad_buffer();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c) g.at(r, start + c) += self.grad.at(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const int rows = raw(parts[0])->value.dim(0);
  int cols = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<Node*> nodes;
  for (const Var& p : parts) {
    Node* pn = raw(p);
    require_rank2(pn->value, "concat_cols");
    if (pn->value.dim(0) != rows) throw DimensionError("concat_cols: row mismatch");
    cols += pn->value.dim(1);
    parents.push_back(p.node_ptr());
    nodes.push_back(pn);
  }
  Tensor out({rows, cols});
  int off = 0;
  for (Node* pn : nodes) {
    const int w = pn->value.dim(1);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) out.at(r, off + c) = pn->value.at(r, c);
    off += w;
  }
  return make_result(std::move(out), std::move(parents), [nodes, rows](Node& self) {
    int o = 0;
    for (Node* pn : nodes) {
      const int w = pn->value.dim(1);
      if (pn->requires_grad) {
        Tensor& g = pn->grad_buffer();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < w; ++c) g.at(r, c) += self.grad.at(r, o + c);
      }
      o += w;
    }
  });
}

Var gather(const Var& a, std::span<const std::size_t> flat_index) {
  Node* an = raw(a);
  std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= an->value.size()) throw DimensionError("gather: index out of range");
    out[i] = an->value[idx[i]];
  }
  return make_result(std::move(out), {a.node_ptr()}, [an, idx](Node& self) {
    if (!an->requires_grad) return;
    Tensor& g = an->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Var concat(std::span<const Var> parts) {
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<Node*> nodes;
  std::size_t total = 0;
  for (const Var& p : parts) {
    Node* pn = raw(p);
    total += pn->value.size();
    parents.push_back(p.node_ptr());
    nodes.push_back(pn);
  }
  Tensor out({static_cast<int>(total)});
  std::size_t off = 0;
  for (Node* pn : nodes) {
    std::copy(pn->value.values().begin(), pn->value.values().end(), out.data() + off);
    off += pn->value.size();
  }
  return make_result(std::move(out), std::move(parents), [nodes](Node& self) {
    std::size_t o = 0;
    for (Node* pn : nodes) {
      if (pn->requires_grad) {
        Tensor& g = pn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[o + i];
      }
      o += pn->value.size();
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Node* xn = raw(x);
  Node* gn = raw(gamma);
  Node* bn = raw(beta);
  require_rank2(xn->value, "layer_norm_rows");
  const int rows = xn->value.dim(0), cols = xn->value.dim(1);
  if (gn->value.size() != static_cast<std::size_t>(cols) || bn->value.size() != static_cast<std::size_t>(cols)) {
    throw DimensionError("layer_norm_rows: affine size mismatch");
  }
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(rows);
  Tensor out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += xn->value.at(r, c);
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double d = xn->value.at(r, c) - mu;
      var += d * d;
    }
    var /= cols;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) {
      xhat.at(r, c) = (xn->value.at(r, c) - mu) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gn->value[c] + bn->value[c];
    }
  }
  return make_result(std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                     [xn, gn, bn, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       if (gn->requires_grad) {
                         Tensor& g = gn->grad_buffer();
                         for (int r = 0; r < rows; ++r)
                           for (int c = 0; c < cols; ++c) g[c] += self.grad.at(r, c) * xhat.at(r, c);
                       }
                       if (bn->requires_grad) {
                         Tensor& g = bn->grad_buffer();
                         for (int r = 0; r < rows; ++r)
                           for (int c = 0; c < cols; ++c) g[c] += self.grad.at(r, c);
                       }
                       if (!xn->requires_grad) return;
                       Tensor& g = xn->grad_buffer();
                       std::vector<double> dxhat(cols);
                       for (int r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (int c = 0; c < cols; ++c) {
                           dxhat[c] = self.grad.at(r, c) * gn->value[c];
                           s1 += dxhat[c];
                           s2 += dxhat[c] * xhat.at(r, c);
                         }
                         for (int c = 0; c < cols; ++c) {
                           g.at(r, c) += inv_std[r] / cols * (cols * dxhat[c] - s1 - xhat.at(r, c) * s2);
                         }
                       }
                     });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  Node* ln = raw(logits);
  require_same_shape(ln->value.shape(), targets.shape(), "bce_with_logits");
  Tensor out(ln->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = ln->value[i];
    out[i] = std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return make_result(std::move(out), {logits.node_ptr()}, [ln, targets](Node& self) {
    if (!ln->requires_grad) return;
    Tensor& g = ln->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = ln->value[i];
      const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += self.grad[i] * (s - targets[i]);
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  Node* xn = raw(x);
  Node* wn = raw(w);
  Node* bn = raw(b);
  require_rank(xn->value, 3, "conv2d input");
  require_rank(wn->value, 4, "conv2d weight");
  const int cin = xn->value.dim(0), h = xn->value.dim(1), wd = xn->value.dim(2);
  const int cout = wn->value.dim(0), k = wn->value.dim(2);
  if (wn->value.dim(1) != cin || wn->value.dim(3) != k) {
    throw DimensionError("conv2d: weight " + shape_str(wn->value.shape()) + " for input " +
                         shape_str(xn->value.shape()));
  }
  if (bn->value.size() != static_cast<std::size_t>(cout)) throw DimensionError("conv2d: bias size mismatch");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho < 1 || wo < 1) throw DimensionError("conv2d: empty output for input " + shape_str(xn->value.shape()));
  const int kk = cin * k * k;
  const int hw = ho * wo;

  Tensor col({kk, hw}, 0.0);
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (c * k + ky) * k + kx;
        double* dst = col.data() + static_cast<std::size_t>(row) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= wd) continue;
            dst[oy * wo + ox] = xn->value.at(c, iy, ix);
          }
        }
      }
  Tensor out({cout, ho, wo});
  auto om = as_mat(out, cout, hw);
  om.noalias() = as_mat(wn->value, cout, kk) * as_mat(col, kk, hw);
  for (int o = 0; o < cout; ++o) om.row(o).array() += bn->value[o];

  return make_result(std::move(out), {x.node_ptr(), w.node_ptr(), b.node_ptr()},
                     [xn, wn, bn, col = std::move(col), cin, h, wd, cout, k, ho, wo, kk, hw, stride, pad](Node& self) {
                       auto go = as_mat(self.grad, cout, hw);
                       if (wn->requires_grad) {
                         as_mat(wn->grad_buffer(), cout, kk).noalias() += go * as_mat(col, kk, hw).transpose();
                       }
                       if (bn->requires_grad) {
                         Tensor& g = bn->grad_buffer();
                         for (int o = 0; o < cout; ++o) g[o] += go.row(o).sum();
                       }
                       if (!xn->requires_grad) return;
                       Tensor dcol({kk, hw});
                       as_mat(dcol, kk, hw).noalias() = as_mat(wn->value, cout, kk).transpose() * go;
                       Tensor& g = xn->grad_buffer();
                       for (int c = 0; c < cin; ++c)
                         for (int ky = 0; ky < k; ++ky)
                           for (int kx = 0; kx < k; ++kx) {
                             const int row = (c * k + ky) * k + kx;
                             const double* src = dcol.data() + static_cast<std::size_t>(row) * hw;
                             for (int oy = 0; oy < ho; ++oy) {
                               const int iy = oy * stride - pad + ky;
                               if (iy < 0 || iy >= h) continue;
                               for (int ox = 0; ox < wo; ++ox) {
                                 const int ix = ox * stride - pad + kx;
                                 if (ix < 0 || ix >= wd) continue;
                                 g.at(c, iy, ix) += src[oy * wo + ox];
                               }
                             }
                           }
                     });
}

Var upsample_nearest(const Var& x, int factor) {
  Node* xn = raw(x);
  require_rank(xn->value, 3, "upsample_nearest");
  const int c = xn->value.dim(0), h = xn->value.dim(1), w = xn->value.dim(2);
  Tensor out({c, h * factor, w * factor});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h * factor; ++y)
      for (int xx = 0; xx < w * factor; ++xx) out.at(ch, y, xx) = xn->value.at(ch, y / factor, xx / factor);
  return make_result(std::move(out), {x.node_ptr()}, [xn, c, h, w, factor](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h * factor; ++y)
        for (int xx = 0; xx < w * factor; ++xx) g.at(ch, y / factor, xx / factor) += self.grad.at(ch, y, xx);
  });
}

namespace {

struct Tap {
  int i0, i1;
  double w0, w1;
};

std::vector<Tap> bilinear_taps(int in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - i0;
    taps[o] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace

Var upsample_bilinear(const Var& x, int factor) {
  Node* xn = raw(x);
  require_rank(xn->value, 3, "upsample_bilinear");
  if (factor < 1) throw DimensionError("upsample_bilinear: factor must be >= 1");
  const int c = xn->value.dim(0), h = xn->value.dim(1), w = xn->value.dim(2);
  const int oh = h * factor, ow = w * factor;
  auto ty = bilinear_taps(h, factor);
  auto tx = bilinear_taps(w, factor);
  Tensor out({c, oh, ow});
  // Separable: first along x into tmp[c, h, ow], then along y.
  Tensor tmp({c, h, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const Tap& t = tx[xx];
        tmp.at(ch, y, xx) = t.w0 * xn->value.at(ch, y, t.i0) + t.w1 * xn->value.at(ch, y, t.i1);
      }
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y) {
      const Tap& t = ty[y];
      for (int xx = 0; xx < ow; ++xx) out.at(ch, y, xx) = t.w0 * tmp.at(ch, t.i0, xx) + t.w1 * tmp.at(ch, t.i1, xx);
    }
  return make_result(std::move(out), {x.node_ptr()}, [xn, c, h, w, oh, ow, ty, tx](Node& self) {
    if (!xn->requires_grad) return;
    Tensor dtmp({c, h, ow}, 0.0);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y) {
        const Tap& t = ty[y];
        for (int xx = 0; xx < ow; ++xx) {
          const double go = self.grad.at(ch, y, xx);
          dtmp.at(ch, t.i0, xx) += t.w0 * go;
          dtmp.at(ch, t.i1, xx) += t.w1 * go;
        }
      }
    Tensor& g = xn->grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const Tap& t = tx[xx];
          const double go = dtmp.at(ch, y, xx);
          g.at(ch, y, t.i0) += t.w0 * go;
          g.at(ch, y, t.i1) += t.w1 * go;
        }
  });
}

}  // namespace ag

}  // namespace vkn
