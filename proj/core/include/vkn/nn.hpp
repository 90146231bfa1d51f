#pragma once

// Parameter storage and the small set of layers the model is built from.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vkn/autograd.hpp"

namespace vkn {

/// Seeded generator used for weight initialisation and sampling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi);
  double normal(double mean, double stddev);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Ordered collection of named trainable tensors.
class ParamStore {
 public:
  Var create(const std::string& name, Tensor init);
  const std::vector<std::pair<std::string, Var>>& entries() const noexcept { return entries_; }
  std::vector<std::pair<std::string, Var>>& entries() noexcept { return entries_; }
  /// Null when absent.
  const Var* find(const std::string& name) const;
  void zero_grad();
  std::size_t num_scalars() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

/// Name prefix + initialisation source handed down while building modules.
class Scope {
 public:
  Scope(ParamStore& store, Rng& rng, std::string prefix = {}) : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}
  Scope sub(const std::string& name) const;
  Var param(const std::string& name, Tensor init) const;
  Rng& rng() const { return *rng_; }
  const std::string& prefix() const { return prefix_; }

 private:
  ParamStore* store_;
  Rng* rng_;
  std::string prefix_;
};

Tensor xavier_uniform(Rng& rng, Shape shape, int fan_in, int fan_out);
Tensor kaiming_normal(Rng& rng, Shape shape, int fan_in);

/// y = x W + b with W stored [in, out].
struct Linear {
  Var weight;
  Var bias;

  static Linear make(const Scope& scope, int in, int out);
  Var operator()(const Var& x) const;
  int in() const { return weight.dim(0); }
  int out() const { return weight.dim(1); }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm make(const Scope& scope, int dim);
  Var operator()(const Var& x) const;
};

struct Conv2d {
  Var weight;  // [out, in, k, k]
  Var bias;
  int stride = 1;
  int pad = 0;

  static Conv2d make(const Scope& scope, int in, int out, int kernel, int stride);
  Var operator()(const Var& x) const;
};

/// Multi-head attention of `queries` [Nq, C] over `keys_values` [Nk, C].
/// Heads split the channel dimension evenly. Keys with mask entry 0 are
/// excluded from every softmax.
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  static MultiHeadAttention make(const Scope& scope, int channels, int heads);
  Var operator()(const Var& queries, const Var& keys_values, std::span<const char> key_mask = {}) const;
};

/// Two-layer ReLU MLP without residual.
struct Mlp {
  Linear fc1, fc2;

  static Mlp make(const Scope& scope, int in, int hidden, int out);
  Var operator()(const Var& x) const;
};

/// Pre-norm transformer block:
///   h = q + MHA(LN(q), LN(kv));  out = h + FFN(LN(h)).
/// With zeroed output projections the block is the identity map.
struct AttentionBlock {
  LayerNorm norm_q, norm_kv, norm_ffn;
  MultiHeadAttention attn;
  Mlp ffn;

  static AttentionBlock make(const Scope& scope, int channels, int heads, int hidden);
  Var operator()(const Var& queries, const Var& keys_values, std::span<const char> key_mask = {}) const;
  Var self(const Var& x, std::span<const char> key_mask = {}) const { return (*this)(x, x, key_mask); }
};

}  // namespace vkn
