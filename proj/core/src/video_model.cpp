#include "vkn/video_model.hpp"

#include "vkn/errors.hpp"

namespace vkn {

void VideoFlags::validate(int stages) const {
  const int s = resolved_link_stage(stages);
  if (s < 0 || s >= stages) throw ConfigError("link_stage " + std::to_string(link_stage) + " outside [0, stages)");
  if (link && !kae) throw ConfigError("kernel linking requires association embeddings (kae)");
}

VideoKNet::VideoKNet(const ModelConfig& cfg, const VideoFlags& flags, std::uint64_t seed)
    : rng_(seed), flags_(flags), segmenter_(cfg, Scope(store_, rng_, "segmenter")) {
  flags_.validate(cfg.stages);
  const Scope root(store_, rng_);
  embedding_ = EmbeddingHead::make(root.sub("embed"), cfg.channels, cfg.embed_dim);
  linker_ = KernelLinker::make(root.sub("link"), cfg.channels, cfg.heads, cfg.ffn_hidden);
  fuser_ = KernelFuser::make(root.sub("fuse"), cfg.channels, cfg.heads, cfg.ffn_hidden, flags_.fuse_update);
  clip_ = ClipFuser::make(root.sub("clip"), cfg.channels, cfg.heads, cfg.ffn_hidden);
}

FrameForward VideoKNet::forward_frame(const Tensor& image, const KernelSet* prev_last_input) const {
  FrameForward out;
  out.feat = segmenter_.features(image);
  DecodeState state = segmenter_.initial_state(out.feat);
  const int stages = config().stages;
  for (int s = 0; s < stages; ++s) {
    if (s == stages - 1) {
      out.last_input = state;
      if (flags_.fuse && prev_last_input != nullptr) {
        state.kernels = fuser_(*prev_last_input, out.feat, state.mask_logits, state.kernels);
      }
    }
    out.stages.push_back(segmenter_.run_stage(s, state, out.feat));
    state = {out.stages.back().kernels, out.stages.back().mask_logits};
  }
  return out;
}

Var VideoKNet::embed(const Var& key, const Var& ref, bool skip_link) const {
  if (!flags_.kae) return key;
  if (!flags_.link || skip_link) return embedding_(key);
  return embedding_(linker_(key, ref));
}

VideoKNet::ClipOutput VideoKNet::forward_clip(std::span<const Tensor> images) const {
  if (images.empty()) throw DimensionError("decode_clip: empty clip");
  std::vector<FrameForward> frames;
  std::vector<KernelSet> finals;
  for (const Tensor& img : images) {
    if (img.shape() != images.front().shape()) throw DimensionError("decode_clip: ragged frames in clip");
    frames.push_back(forward_frame(img, nullptr));
    finals.push_back(frames.back().stages.back().kernels);
  }
  const ClipFusion fused = clip_(finals);
  const DecoderStage& last = segmenter_.stage(config().stages - 1);
  const int things = config().num_thing_kernels;
  std::vector<int> thing_rows(static_cast<std::size_t>(things));
  for (int i = 0; i < things; ++i) thing_rows[i] = i;
  const Var class_logits = last.cls(ag::gather_rows(fused.clip_kernels.kernels, thing_rows));

  ClipOutput out;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    StageOutput so;
    so.kernels = fused.per_frame[t];
    so.mask_logits = predict_masks({last.mask_proj(so.kernels.kernels), so.kernels.roles}, frames[t].feat);
    so.class_logits = class_logits;
    out.per_frame.push_back(std::move(so));
  }
  out.frames = std::move(frames);
  return out;
}

}  // namespace vkn
