#pragma once

// Image-level dynamic-kernel segmenter.
//
// A tiny strided conv backbone feeds a two-level pyramid neck that yields one
// stride-4 feature map with 2-D sinusoidal positional encoding. A set of
// learned kernels (thing kernels first, then one kernel per stuff class)
// produces initial masks by inner product; S decoder stages then refine the
// kernels: assemble per-kernel features under the previous masks, gate them
// into the kernels, let kernels attend to each other, and predict new masks
// and thing classes.

#include <array>
#include <cstdint>
#include <vector>

#include "vkn/autograd.hpp"
#include "vkn/nn.hpp"

namespace vkn {

struct ModelConfig {
  int num_thing_kernels = 8;
  int num_stuff_classes = 3;
  int num_thing_classes = 2;
  int channels = 32;
  int embed_dim = 32;
  int stages = 3;
  int heads = 4;
  int ffn_hidden = 64;
  std::array<int, 4> backbone_widths{16, 32, 48, 48};

  int num_kernels() const { return num_thing_kernels + num_stuff_classes; }
  /// Total stride of the neck output relative to the input image.
  static constexpr int kStride = 4;
  void validate() const;
};

struct FeatureMap {
  Var values;  // [C, H, W]
  int stride = ModelConfig::kStride;
  bool has_pos_enc = false;

  int channels() const { return values.dim(0); }
  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
};

struct KernelRole {
  bool is_thing = true;
  int stuff_class = -1;  // stuff class index when !is_thing

  bool operator==(const KernelRole&) const = default;
};

struct KernelSet {
  Var kernels;  // [N, C]
  std::vector<KernelRole> roles;

  int size() const { return kernels.dim(0); }
  int channels() const { return kernels.dim(1); }
  int num_things() const;
};

/// Default role layout: `things` thing kernels followed by one kernel per stuff class.
std::vector<KernelRole> default_roles(int things, int stuff);

struct StageOutput {
  KernelSet kernels;   // post-update
  Var mask_logits;     // [N, H, W] at feature resolution
  Var class_logits;    // [N_thing, num_thing_classes]
};

/// Input to a decoder stage: kernels and the masks they produced last.
struct DecodeState {
  KernelSet kernels;
  Var mask_logits;  // [N, H, W]
};

/// Per-kernel features: f_i = sum_xy sigmoid(m_i(x,y)) * feat(:, x, y).
Var assemble_group_features(const KernelSet& kernels, const FeatureMap& feat, const Var& prev_mask_logits);

/// mask_i(x, y) = <k_i, feat(:, x, y)>, returned as [N, H, W].
Var predict_masks(const KernelSet& kernels, const FeatureMap& feat);

/// Fixed 2-D sinusoidal encoding [C, H, W]; first half encodes y, second x.
Tensor sinusoidal_position_encoding(int channels, int height, int width);

/// Gated update  k' = g_f * phi1(f) + g_k * phi2(k),  [g_f, g_k] = sigmoid(L(f + psi(k))).
/// Strictly row-local.
struct AdaptiveKernelUpdate {
  Linear psi, gate_f, gate_k, phi_f, phi_k;

  static AdaptiveKernelUpdate make(const Scope& scope, int channels);
  KernelSet operator()(const KernelSet& kernels, const Var& group_feats) const;
};

/// Kernel-to-kernel self-attention followed by a feed-forward block.
struct KernelInteraction {
  AttentionBlock block;

  static KernelInteraction make(const Scope& scope, int channels, int heads, int hidden);
  KernelSet operator()(const KernelSet& kernels) const;
};

struct DecoderStage {
  LayerNorm feat_norm;
  AdaptiveKernelUpdate update;
  LayerNorm update_norm;
  KernelInteraction interaction;
  Linear mask_proj;
  Linear cls;

  static DecoderStage make(const Scope& scope, const ModelConfig& cfg);
  StageOutput operator()(const DecodeState& in, const FeatureMap& feat, int num_things) const;
};

class KernelSegmenter {
 public:
  KernelSegmenter(const ModelConfig& cfg, const Scope& scope);

  const ModelConfig& config() const { return cfg_; }

  /// Backbone + neck + positional encoding. Image is [3, H, W] with H, W
  /// divisible by the backbone's total stride of 8.
  FeatureMap features(const Tensor& image) const;
  /// Static kernels and the masks they predict on `feat`.
  DecodeState initial_state(const FeatureMap& feat) const;
  StageOutput run_stage(int stage, const DecodeState& in, const FeatureMap& feat) const;
  /// All S stages on one image.
  std::vector<StageOutput> forward_image(const Tensor& image) const;

  const DecoderStage& stage(int s) const { return stages_.at(static_cast<std::size_t>(s)); }

 private:
  ModelConfig cfg_;
  std::array<Conv2d, 4> backbone_;
  Conv2d lateral_fine_, lateral_coarse_, smooth_;
  Var static_kernels_;
  std::vector<DecoderStage> stages_;
};

/// Maps raw 8-bit RGB (interleaved H x W x 3) to a normalised [3, H, W] tensor.
Tensor image_to_tensor(const std::vector<std::uint8_t>& rgb, int height, int width);

}  // namespace vkn
