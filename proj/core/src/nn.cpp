#include "vkn/nn.hpp"

#include <cmath>

#include "vkn/errors.hpp"

namespace vkn {

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

double Rng::normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(engine_); }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error("Rng::below(0)");
  return engine_() % n;
}

Var ParamStore::create(const std::string& name, Tensor init) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Var v(std::move(init), true);
  entries_.emplace_back(name, v);
  return v;
}

const Var* ParamStore::find(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return &v;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& [n, v] : entries_) v.zero_grad();
}

std::size_t ParamStore::num_scalars() const {
  std::size_t total = 0;
  for (const auto& [n, v] : entries_) total += v.value().size();
  return total;
}

Scope Scope::sub(const std::string& name) const {
  return Scope(*store_, *rng_, prefix_.empty() ? name : prefix_ + "." + name);
}

Var Scope::param(const std::string& name, Tensor init) const {
  return store_->create(prefix_.empty() ? name : prefix_ + "." + name, std::move(init));
}

Tensor xavier_uniform(Rng& rng, Shape shape, int fan_in, int fan_out) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-a, a);
  return t;
}

Tensor kaiming_normal(Rng& rng, Shape shape, int fan_in) {
  Tensor t(std::move(shape));
  const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.normal(0.0, s);
  return t;
}

Linear Linear::make(const Scope& scope, int in, int out) {
  Linear l;
  l.weight = scope.param("weight", xavier_uniform(scope.rng(), {in, out}, in, out));
  l.bias = scope.param("bias", Tensor({out}, 0.0));
  return l;
}

Var Linear::operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

LayerNorm LayerNorm::make(const Scope& scope, int dim) {
  return {scope.param("gamma", Tensor({dim}, 1.0)), scope.param("beta", Tensor({dim}, 0.0))};
}

Var LayerNorm::operator()(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }

Conv2d Conv2d::make(const Scope& scope, int in, int out, int kernel, int stride) {
  Conv2d c;
  c.weight = scope.param("weight", kaiming_normal(scope.rng(), {out, in, kernel, kernel}, in * kernel * kernel));
  c.bias = scope.param("bias", Tensor({out}, 0.0));
  c.stride = stride;
  c.pad = kernel / 2;
  return c;
}

Var Conv2d::operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }

MultiHeadAttention MultiHeadAttention::make(const Scope& scope, int channels, int heads) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(channels) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  MultiHeadAttention m;
  m.q = Linear::make(scope.sub("q"), channels, channels);
  m.k = Linear::make(scope.sub("k"), channels, channels);
  m.v = Linear::make(scope.sub("v"), channels, channels);
  m.o = Linear::make(scope.sub("o"), channels, channels);
  m.heads = heads;
  return m;
}

Var MultiHeadAttention::operator()(const Var& queries, const Var& keys_values, std::span<const char> key_mask) const {
  const int channels = q.in();
  if (queries.dim(1) != channels || keys_values.dim(1) != channels) {
    throw DimensionError("attention: channel mismatch " + shape_str(queries.shape()) + " / " +
                         shape_str(keys_values.shape()));
  }
  const Var qp = q(queries);
  const Var kp = k(keys_values);
  const Var vp = v(keys_values);
  const int dh = channels / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    const Var qh = ag::slice_cols(qp, h * dh, dh);
    const Var kh = ag::slice_cols(kp, h * dh, dh);
    const Var vh = ag::slice_cols(vp, h * dh, dh);
    const Var attn = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt), key_mask);
    outs.push_back(ag::matmul(attn, vh));
  }
  const Var merged = heads == 1 ? outs.front() : ag::concat_cols(outs);
  return o(merged);
}

Mlp Mlp::make(const Scope& scope, int in, int hidden, int out) {
  return {Linear::make(scope.sub("fc1"), in, hidden), Linear::make(scope.sub("fc2"), hidden, out)};
}

Var Mlp::operator()(const Var& x) const { return fc2(ag::relu(fc1(x))); }

AttentionBlock AttentionBlock::make(const Scope& scope, int channels, int heads, int hidden) {
  AttentionBlock b;
  b.norm_q = LayerNorm::make(scope.sub("norm_q"), channels);
  b.norm_kv = LayerNorm::make(scope.sub("norm_kv"), channels);
  b.norm_ffn = LayerNorm::make(scope.sub("norm_ffn"), channels);
  b.attn = MultiHeadAttention::make(scope.sub("attn"), channels, heads);
  b.ffn = Mlp::make(scope.sub("ffn"), channels, hidden, channels);
  return b;
}

Var AttentionBlock::operator()(const Var& queries, const Var& keys_values, std::span<const char> key_mask) const {
  const Var h = ag::add(queries, attn(norm_q(queries), norm_kv(keys_values), key_mask));
  return ag::add(h, ffn(norm_ffn(h)));
}

}  // namespace vkn
