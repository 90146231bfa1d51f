#pragma once

// Tape-free reverse-mode differentiation over Tensor values.
//
// Every op returns a Var whose node remembers its parents and a closure that
// pushes the output gradient back into them. `Var::backward()` on a scalar
// walks the graph in reverse topological order. Leaves created with
// requires_grad=true (parameters) accumulate gradients across calls until
// zero_grad().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "vkn/tensor.hpp"

namespace vkn {

namespace detail {
struct Node;
}

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const;
  /// Direct write access; used by optimizers and checkpoint loading only.
  Tensor& value_mut();
  bool requires_grad() const;
  bool has_grad() const;
  /// Accumulated gradient, or zeros of the value's shape when none exists.
  Tensor grad() const;
  void zero_grad();

  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }

  /// Reverse sweep from this (scalar) Var.
  void backward() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace ag {

Var constant(Tensor t);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// x[N, C] + bias[C] broadcast over rows.
Var add_row(const Var& x, const Var& bias);

/// [N, K] x [K, M] -> [N, M]
Var matmul(const Var& a, const Var& b);
/// [N, K] x [M, K]^T -> [N, M]
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
/// a^p elementwise for a >= 0.
Var pow_scalar(const Var& a, double p);

/// Row-wise softmax of a rank-2 tensor. Columns with `column_mask[j] == false`
/// receive zero probability; an entirely masked row yields zeros.
Var softmax_rows(const Var& x, std::span<const char> column_mask = {});

Var sum(const Var& a);
Var mean(const Var& a);
/// [N, C] -> [N]
Var sum_rows(const Var& x);
/// log(sum(exp(a))) over every element, stabilised by the maximum.
Var logsumexp(const Var& a);

Var reshape(const Var& a, Shape shape);
Var gather_rows(const Var& x, std::span<const int> rows);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& x, int start, int len);
Var concat_cols(std::span<const Var> parts);
/// Picks flat elements into a rank-1 result.
Var gather(const Var& a, std::span<const std::size_t> flat_index);
/// Concatenates flattened inputs into a rank-1 result.
Var concat(std::span<const Var> parts);

/// Per-row layer normalisation of x[N, C] with affine gamma[C], beta[C].
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Elementwise binary cross-entropy on logits against constant targets.
Var bce_with_logits(const Var& logits, const Tensor& targets);

/// x[Cin, H, W] * w[Cout, Cin, k, k] + b[Cout], square kernel, zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
/// Nearest-neighbour upsampling of x[C, H, W] by an integer factor.
Var upsample_nearest(const Var& x, int factor);
/// Bilinear upsampling of x[C, H, W] by an integer factor (half-pixel centres).
Var upsample_bilinear(const Var& x, int factor);

}  // namespace ag

}  // namespace vkn
