#include "vkn/video_heads.hpp"

#include "vkn/errors.hpp"

namespace vkn {

EmbeddingHead EmbeddingHead::make(const Scope& scope, int channels, int dim) {
  return {Linear::make(scope.sub("fc1"), channels, dim), Linear::make(scope.sub("fc2"), dim, dim),
          Linear::make(scope.sub("out"), dim, dim)};
}

Var EmbeddingHead::operator()(const Var& kernels) const {
  return out(ag::relu(fc2(ag::relu(fc1(kernels)))));
}

KernelEmbeddings EmbeddingHead::operator()(const KernelSet& kernels, int frame) const {
  return {(*this)(kernels.kernels), frame};
}

KernelLinker KernelLinker::make(const Scope& scope, int channels, int heads, int hidden) {
  return {AttentionBlock::make(scope, channels, heads, hidden)};
}

Var KernelLinker::operator()(const Var& key, const Var& ref) const {
  if (key.dim(1) != ref.dim(1)) {
    throw DimensionError("link_kernels: channel mismatch " + shape_str(key.shape()) + " vs " + shape_str(ref.shape()));
  }
  return block(key, ref);
}

LinkedKernels KernelLinker::operator()(const KernelSet& key, const KernelSet& ref) const {
  if (key.size() != ref.size()) {
    throw DimensionError("link_kernels: kernel count mismatch " + std::to_string(key.size()) + " vs " +
                         std::to_string(ref.size()));
  }
  return {{(*this)(key.kernels, ref.kernels), key.roles}};
}

KernelFuser KernelFuser::make(const Scope& scope, int channels, int heads, int hidden, bool use_update) {
  KernelFuser f;
  f.feat_norm = LayerNorm::make(scope.sub("feat_norm"), channels);
  f.update = AdaptiveKernelUpdate::make(scope.sub("update"), channels);
  f.update_norm = LayerNorm::make(scope.sub("update_norm"), channels);
  f.block = AttentionBlock::make(scope.sub("attn"), channels, heads, hidden);
  f.use_update = use_update;
  return f;
}

KernelSet KernelFuser::operator()(const KernelSet& prev_kernels, const FeatureMap& cur_feat,
                                  const Var& cur_prev_mask_logits, const KernelSet& cur_kernels,
                                  bool mask_prev_attention) const {
  if (prev_kernels.kernels.shape() != cur_kernels.kernels.shape()) {
    throw DimensionError("fuse_kernels: previous " + shape_str(prev_kernels.kernels.shape()) + " vs current " +
                         shape_str(cur_kernels.kernels.shape()));
  }
  Var prev = prev_kernels.kernels;
  if (use_update) {
    const Var f = feat_norm(assemble_group_features(cur_kernels, cur_feat, cur_prev_mask_logits));
    prev = update_norm(update(prev_kernels, f).kernels);
  }
  const int n = cur_kernels.size();
  const std::array<Var, 2> parts{prev, cur_kernels.kernels};
  const Var joint = ag::concat_rows(parts);
  std::vector<char> mask;
  if (mask_prev_attention) {
    mask.assign(static_cast<std::size_t>(2 * n), 1);
    for (int i = 0; i < n; ++i) mask[i] = 0;
  }
  const Var fused = block.self(joint, mask);
  std::vector<int> cur_rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) cur_rows[i] = n + i;
  return {ag::gather_rows(fused, cur_rows), cur_kernels.roles};
}

ClipFuser ClipFuser::make(const Scope& scope, int channels, int heads, int hidden) {
  ClipFuser c;
  for (std::size_t i = 0; i < c.layers.size(); ++i)
    c.layers[i] = AttentionBlock::make(scope.sub("layer" + std::to_string(i)), channels, heads, hidden);
  return c;
}

ClipFusion ClipFuser::operator()(std::span<const KernelSet> per_frame_kernels) const {
  if (per_frame_kernels.empty()) throw DimensionError("fuse_clip_kernels: empty clip");
  const int n = per_frame_kernels.front().size();
  std::vector<Var> parts;
  for (const auto& ks : per_frame_kernels) {
    if (ks.size() != n || ks.channels() != per_frame_kernels.front().channels()) {
      throw DimensionError("fuse_clip_kernels: ragged kernel sets across frames");
    }
    parts.push_back(ks.kernels);
  }
  Var tokens = ag::concat_rows(parts);
  for (const auto& layer : layers) tokens = layer.self(tokens);

  ClipFusion out;
  const int t = static_cast<int>(per_frame_kernels.size());
  Var total;
  for (int f = 0; f < t; ++f) {
    std::vector<int> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) rows[i] = f * n + i;
    Var frame = ag::gather_rows(tokens, rows);
    total = total.defined() ? ag::add(total, frame) : frame;
    out.per_frame.push_back({frame, per_frame_kernels[f].roles});
  }
  out.clip_kernels = {ag::scale(total, 1.0 / t), per_frame_kernels.front().roles};
  return out;
}

}  // namespace vkn
