#pragma once

// The full video model: image segmenter plus association, linking, fusion and
// clip heads, switched by feature flags. Shared weights across frames.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "vkn/core_model.hpp"
#include "vkn/video_heads.hpp"

namespace vkn {

struct VideoFlags {
  bool kae = true;          // association embeddings + contrastive loss
  bool link = true;         // cross-frame kernel linking before embedding
  bool fuse = true;         // fuse previous-frame kernels at the last stage
  bool fuse_update = true;  // adaptive update inside fusion
  bool clip_mode = false;   // clip-level fusion decoder instead of online tracking
  int link_stage = -1;      // stage whose kernels are linked/embedded; -1 = last
  bool embed_pre_link = false;  // inference: embed kernels before linking

  void validate(int stages) const;
  int resolved_link_stage(int stages) const { return link_stage < 0 ? stages + link_stage : link_stage; }
};

struct FrameForward {
  FeatureMap feat;
  std::vector<StageOutput> stages;
  DecodeState last_input;  // what entered the last stage, before fusion
};

class VideoKNet {
 public:
  VideoKNet(const ModelConfig& cfg, const VideoFlags& flags, std::uint64_t seed);
  VideoKNet(const VideoKNet&) = delete;
  VideoKNet& operator=(const VideoKNet&) = delete;

  const ModelConfig& config() const { return segmenter_.config(); }
  const VideoFlags& flags() const { return flags_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const KernelSegmenter& segmenter() const { return segmenter_; }

  /// Runs every stage on one frame. When `prev_last_input` is given and fusion
  /// is enabled, the kernels entering the last stage are first fused with it.
  FrameForward forward_frame(const Tensor& image, const KernelSet* prev_last_input) const;

  /// Association embeddings for kernel rows `key` given reference rows `ref`.
  /// Links first when linking is enabled. Without KAE the kernels themselves
  /// are returned. `skip_link` embeds the raw key rows even when linking is on.
  Var embed(const Var& key, const Var& ref, bool skip_link = false) const;

  /// Clip decoder: refines final kernels jointly over the clip, then predicts
  /// per-frame masks and shared classes (from the mean clip kernel).
  struct ClipOutput {
    std::vector<StageOutput> per_frame;  // class_logits identical across frames
    std::vector<FrameForward> frames;    // the plain per-frame passes
  };
  ClipOutput forward_clip(std::span<const Tensor> images) const;

  int link_stage() const { return flags_.resolved_link_stage(config().stages); }

 private:
  ParamStore store_;
  Rng rng_;
  VideoFlags flags_;
  KernelSegmenter segmenter_;
  EmbeddingHead embedding_;
  KernelLinker linker_;
  KernelFuser fuser_;
  ClipFuser clip_;
};

}  // namespace vkn
