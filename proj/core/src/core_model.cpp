#include "vkn/core_model.hpp"

#include <cmath>

#include "vkn/errors.hpp"

namespace vkn {

void ModelConfig::validate() const {
  if (num_thing_kernels < 1) throw ConfigError("model.num_thing_kernels must be >= 1");
  if (num_stuff_classes < 0) throw ConfigError("model.num_stuff_classes must be >= 0");
  if (num_thing_classes < 1) throw ConfigError("model.num_thing_classes must be >= 1");
  if (channels < 2 || channels % 4 != 0) throw ConfigError("model.channels must be a positive multiple of 4");
  if (heads < 1 || channels % heads != 0) throw ConfigError("model.heads must divide model.channels");
  if (stages < 1) throw ConfigError("model.stages must be >= 1");
  if (embed_dim < 1) throw ConfigError("model.embed_dim must be >= 1");
  if (ffn_hidden < 1) throw ConfigError("model.ffn_hidden must be >= 1");
  for (int w : backbone_widths)
    if (w < 1) throw ConfigError("model.backbone_widths entries must be >= 1");
}

int KernelSet::num_things() const {
  int n = 0;
  for (const auto& r : roles) n += r.is_thing ? 1 : 0;
  return n;
}

std::vector<KernelRole> default_roles(int things, int stuff) {
  std::vector<KernelRole> roles(static_cast<std::size_t>(things), KernelRole{true, -1});
  for (int s = 0; s < stuff; ++s) roles.push_back({false, s});
  return roles;
}

Var assemble_group_features(const KernelSet& kernels, const FeatureMap& feat, const Var& prev_mask_logits) {
  const int n = kernels.size();
  const int c = feat.channels(), h = feat.height(), w = feat.width();
  if (kernels.channels() != c) {
    throw DimensionError("assemble_group_features: kernels " + shape_str(kernels.kernels.shape()) + " vs features " +
                         shape_str(feat.values.shape()));
  }
  if (prev_mask_logits.shape() != Shape{n, h, w}) {
    throw DimensionError("assemble_group_features: masks " + shape_str(prev_mask_logits.shape()) + " expected " +
                         shape_str({n, h, w}));
  }
  if (!prev_mask_logits.value().all_finite()) throw NonFiniteError("assemble_group_features: non-finite mask logits");
  const Var gates = ag::sigmoid(ag::reshape(prev_mask_logits, {n, h * w}));
  const Var f = ag::reshape(feat.values, {c, h * w});
  return ag::matmul_nt(gates, f);
}

Var predict_masks(const KernelSet& kernels, const FeatureMap& feat) {
  const int c = feat.channels(), h = feat.height(), w = feat.width();
  if (kernels.channels() != c) {
    throw DimensionError("predict_masks: kernel channels " + std::to_string(kernels.channels()) +
                         " vs feature channels " + std::to_string(c));
  }
  const Var logits = ag::matmul(kernels.kernels, ag::reshape(feat.values, {c, h * w}));
  return ag::reshape(logits, {kernels.size(), h, w});
}

Tensor sinusoidal_position_encoding(int channels, int height, int width) {
  Tensor pe({channels, height, width});
  const int half = channels / 2;
  const double two_pi = 2.0 * M_PI;
  for (int c = 0; c < channels; ++c) {
    const bool along_y = c < half;
    const int local = along_y ? c : c - half;
    const double freq = std::pow(10000.0, 2.0 * (local / 2) / static_cast<double>(half));
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double pos = along_y ? (y + 1.0) / height * two_pi : (x + 1.0) / width * two_pi;
        const double a = pos / freq;
        pe.at(c, y, x) = (local % 2 == 0) ? std::sin(a) : std::cos(a);
      }
    }
  }
  return pe;
}

AdaptiveKernelUpdate AdaptiveKernelUpdate::make(const Scope& scope, int channels) {
  return {Linear::make(scope.sub("psi"), channels, channels), Linear::make(scope.sub("gate_f"), channels, channels),
          Linear::make(scope.sub("gate_k"), channels, channels), Linear::make(scope.sub("phi_f"), channels, channels),
          Linear::make(scope.sub("phi_k"), channels, channels)};
}

KernelSet AdaptiveKernelUpdate::operator()(const KernelSet& kernels, const Var& group_feats) const {
  if (group_feats.shape() != kernels.kernels.shape()) {
    throw DimensionError("adaptive_kernel_update: kernels " + shape_str(kernels.kernels.shape()) + " vs features " +
                         shape_str(group_feats.shape()));
  }
  if (!kernels.kernels.value().all_finite() || !group_feats.value().all_finite()) {
    throw NonFiniteError("adaptive_kernel_update: non-finite input");
  }
  const Var mixed = ag::add(group_feats, psi(kernels.kernels));
  const Var gf = ag::sigmoid(gate_f(mixed));
  const Var gk = ag::sigmoid(gate_k(mixed));
  const Var out = ag::add(ag::mul(gf, phi_f(group_feats)), ag::mul(gk, phi_k(kernels.kernels)));
  return {out, kernels.roles};
}

KernelInteraction KernelInteraction::make(const Scope& scope, int channels, int heads, int hidden) {
  return {AttentionBlock::make(scope, channels, heads, hidden)};
}

KernelSet KernelInteraction::operator()(const KernelSet& kernels) const {
  return {block.self(kernels.kernels), kernels.roles};
}

DecoderStage DecoderStage::make(const Scope& scope, const ModelConfig& cfg) {
  DecoderStage s;
  s.feat_norm = LayerNorm::make(scope.sub("feat_norm"), cfg.channels);
  s.update = AdaptiveKernelUpdate::make(scope.sub("update"), cfg.channels);
  s.update_norm = LayerNorm::make(scope.sub("update_norm"), cfg.channels);
  s.interaction = KernelInteraction::make(scope.sub("interaction"), cfg.channels, cfg.heads, cfg.ffn_hidden);
  s.mask_proj = Linear::make(scope.sub("mask_proj"), cfg.channels, cfg.channels);
  s.cls = Linear::make(scope.sub("cls"), cfg.channels, cfg.num_thing_classes);
  return s;
}

StageOutput DecoderStage::operator()(const DecodeState& in, const FeatureMap& feat, int num_things) const {
  const Var f = feat_norm(assemble_group_features(in.kernels, feat, in.mask_logits));
  KernelSet updated = update(in.kernels, f);
  updated.kernels = update_norm(updated.kernels);
  KernelSet refined = interaction(updated);

  StageOutput out;
  out.mask_logits = predict_masks({mask_proj(refined.kernels), refined.roles}, feat);
  std::vector<int> thing_rows;
  for (int i = 0; i < static_cast<int>(refined.roles.size()); ++i)
    if (refined.roles[i].is_thing) thing_rows.push_back(i);
  if (static_cast<int>(thing_rows.size()) != num_things) throw DimensionError("decoder stage: unexpected thing count");
  out.class_logits = cls(ag::gather_rows(refined.kernels, thing_rows));
  out.kernels = std::move(refined);
  return out;
}

KernelSegmenter::KernelSegmenter(const ModelConfig& cfg, const Scope& scope) : cfg_(cfg) {
  cfg_.validate();
  const auto& wd = cfg_.backbone_widths;
  const Scope bb = scope.sub("backbone");
  backbone_[0] = Conv2d::make(bb.sub("block1"), 3, wd[0], 3, 2);
  backbone_[1] = Conv2d::make(bb.sub("block2"), wd[0], wd[1], 3, 2);
  backbone_[2] = Conv2d::make(bb.sub("block3"), wd[1], wd[2], 3, 2);
  backbone_[3] = Conv2d::make(bb.sub("block4"), wd[2], wd[3], 3, 1);
  const Scope neck = scope.sub("neck");
  lateral_fine_ = Conv2d::make(neck.sub("lateral_fine"), wd[1], cfg_.channels, 1, 1);
  lateral_coarse_ = Conv2d::make(neck.sub("lateral_coarse"), wd[3], cfg_.channels, 1, 1);
  smooth_ = Conv2d::make(neck.sub("smooth"), cfg_.channels, cfg_.channels, 3, 1);
  static_kernels_ = scope.param("static_kernels", xavier_uniform(scope.rng(), {cfg_.num_kernels(), cfg_.channels},
                                                                  cfg_.channels, cfg_.num_kernels()));
  for (int s = 0; s < cfg_.stages; ++s) stages_.push_back(DecoderStage::make(scope.sub("stage" + std::to_string(s)), cfg_));
}

FeatureMap KernelSegmenter::features(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("forward_image: expected [3, H, W] image, got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0 || image.dim(1) < 8 || image.dim(2) < 8) {
    throw DimensionError("forward_image: image size " + shape_str(image.shape()) +
                         " must be a positive multiple of the backbone stride 8");
  }
  const Var x = ag::constant(image);
  const Var c1 = ag::relu(backbone_[0](x));
  const Var c2 = ag::relu(backbone_[1](c1));
  const Var c3 = ag::relu(backbone_[2](c2));
  const Var c4 = ag::relu(backbone_[3](c3));
  const Var merged = ag::add(lateral_fine_(c2), ag::upsample_nearest(lateral_coarse_(c4), 2));
  const Var out = smooth_(ag::relu(merged));
  const Tensor pe = sinusoidal_position_encoding(cfg_.channels, out.dim(1), out.dim(2));
  return {ag::add(out, ag::constant(pe)), ModelConfig::kStride, true};
}

DecodeState KernelSegmenter::initial_state(const FeatureMap& feat) const {
  KernelSet ks{static_kernels_, default_roles(cfg_.num_thing_kernels, cfg_.num_stuff_classes)};
  Var masks = predict_masks(ks, feat);
  return {std::move(ks), std::move(masks)};
}

StageOutput KernelSegmenter::run_stage(int stage, const DecodeState& in, const FeatureMap& feat) const {
  return stages_.at(static_cast<std::size_t>(stage))(in, feat, cfg_.num_thing_kernels);
}

std::vector<StageOutput> KernelSegmenter::forward_image(const Tensor& image) const {
  const FeatureMap feat = features(image);
  DecodeState state = initial_state(feat);
  std::vector<StageOutput> outs;
  outs.reserve(stages_.size());
  for (int s = 0; s < cfg_.stages; ++s) {
    outs.push_back(run_stage(s, state, feat));
    state = {outs.back().kernels, outs.back().mask_logits};
  }
  return outs;
}

Tensor image_to_tensor(const std::vector<std::uint8_t>& rgb, int height, int width) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
    throw DimensionError("image_to_tensor: buffer size does not match " + std::to_string(height) + "x" +
                         std::to_string(width) + "x3");
  }
  Tensor t({3, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] / 255.0;
        t.at(c, y, x) = (v - 0.5) / 0.25;
      }
  return t;
}

}  // namespace vkn
