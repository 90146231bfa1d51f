#pragma once

// Video extensions over kernels: association embeddings, cross-frame kernel
// linking, cross-frame kernel fusion and the clip-level fusion stack.

#include <array>
#include <span>
#include <vector>

#include "vkn/core_model.hpp"

namespace vkn {

struct KernelEmbeddings {
  Var embeddings;  // [N, D]
  int source_frame = 0;
};

struct LinkedKernels {
  KernelSet kernels;
};

/// Shared per-kernel MLP with two hidden ReLU layers of width D.
struct EmbeddingHead {
  Linear fc1, fc2, out;

  static EmbeddingHead make(const Scope& scope, int channels, int dim);
  KernelEmbeddings operator()(const KernelSet& kernels, int frame = 0) const;
  Var operator()(const Var& kernels) const;
};

/// K_l = FFN(MHSA(K_key, K_ref, K_ref) + K_key).
struct KernelLinker {
  AttentionBlock block;

  static KernelLinker make(const Scope& scope, int channels, int heads, int hidden);
  LinkedKernels operator()(const KernelSet& key, const KernelSet& ref) const;
  Var operator()(const Var& key, const Var& ref) const;
};

/// Update previous-frame kernels with current-frame group features, then
/// self-attend over [updated_prev ; current] and keep the current rows.
struct KernelFuser {
  LayerNorm feat_norm;
  AdaptiveKernelUpdate update;
  LayerNorm update_norm;
  AttentionBlock block;
  bool use_update = true;

  static KernelFuser make(const Scope& scope, int channels, int heads, int hidden, bool use_update);
  /// `mask_prev_attention` removes previous-frame rows from the attention keys.
  KernelSet operator()(const KernelSet& prev_kernels, const FeatureMap& cur_feat, const Var& cur_prev_mask_logits,
                       const KernelSet& cur_kernels, bool mask_prev_attention = false) const;
};

struct ClipFusion {
  KernelSet clip_kernels;             // mean over frames of the refined kernels
  std::vector<KernelSet> per_frame;   // refined kernels per frame
};

/// Three stacked (unshared) temporal attention layers over all T*N kernel tokens.
struct ClipFuser {
  std::array<AttentionBlock, 3> layers;

  static ClipFuser make(const Scope& scope, int channels, int heads, int hidden);
  ClipFusion operator()(std::span<const KernelSet> per_frame_kernels) const;
};

}  // namespace vkn
