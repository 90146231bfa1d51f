#pragma once

// Online inference: panoptic stitching, bi-softmax association against a
// persistent track store, and the clip-mode decoder.

#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "vkn/panoptic.hpp"
#include "vkn/video_model.hpp"

namespace vkn {

struct StitchConfig {
  double score_thresh = 0.3;
  double overlap_keep = 0.5;
};

struct StitchResult {
  PanopticFrame frame;          // instance ids are 1 + position in `preserved`
  std::vector<int> preserved;   // surviving thing kernel indices, painting order
  std::vector<double> scores;   // per preserved kernel
  std::vector<int> classes;     // semantic id per preserved kernel
  std::vector<int> areas;       // painted pixels per preserved kernel
};

/// Paints binarised (logit > 0) full-resolution masks in descending
/// confidence. Things score by max class probability; stuff by mean in-mask
/// probability. Unclaimed pixels take the stuff class with the largest logit.
StitchResult panoptic_stitch(const Tensor& full_mask_logits, const Tensor& class_logits,
                             std::span<const KernelRole> roles, int height, int width, const ClassTable& classes,
                             const StitchConfig& cfg = {});
StitchResult panoptic_stitch(const StageOutput& out, int height, int width, const ClassTable& classes,
                             const StitchConfig& cfg = {});

/// 0.5 * (row softmax + column softmax) of emb_cur . emb_prev^T.
Tensor bi_softmax_scores(const Tensor& emb_cur, const Tensor& emb_prev);

struct Track {
  Tensor embedding;  // [D]
  int class_id = 0;
  int last_seen = 0;
  bool active = true;
};

class TrackStore {
 public:
  /// Allocates a fresh id; ids start at 1 and are never reused.
  int create(Tensor embedding, int class_id, int frame);
  /// Tracks seen within `ttl` frames of `frame`, ascending id. Older tracks are deactivated.
  std::vector<int> candidates(int frame, int ttl);
  const Track& track(int id) const { return tracks_.at(id); }
  Track& track(int id) { return tracks_.at(id); }
  const std::map<int, Track>& tracks() const { return tracks_; }
  int next_id() const { return next_id_; }

 private:
  std::map<int, Track> tracks_;
  int next_id_ = 1;
};

struct AssociationConfig {
  double match_thresh = 0.2;
  double momentum = 0.5;  // EMA weight kept on the stored embedding
  int ttl = 2;
};

/// Greedy descending-score matching of current instances (rows) to candidate
/// tracks (columns). Pairs under the threshold or with a class mismatch are
/// skipped; leftover instances open new tracks. Matched tracks take an EMA of
/// the embedding. Returns the track id per current instance.
std::vector<int> associate(const Tensor& scores, std::span<const int> candidate_ids, std::span<const int> cur_classes,
                           const Tensor& cur_embeddings, TrackStore& store, int frame,
                           const AssociationConfig& cfg = {});

struct TrackerConfig {
  StitchConfig stitch;
  AssociationConfig assoc;
};

struct TrackLogEntry {
  int frame = 0;
  int track_id = 0;
  int class_id = 0;
  double score = 0.0;
  int mask_area = 0;
};

void write_track_log(std::ostream& os, std::span<const TrackLogEntry> entries);

struct FrameResult {
  PanopticFrame frame;
  std::vector<TrackLogEntry> log;
};

/// Frame-by-frame online decoding with a persistent track store.
class OnlineTracker {
 public:
  OnlineTracker(const VideoKNet& model, ClassTable classes, TrackerConfig cfg = {});

  /// Processes the next frame ([3, H, W] normalised image).
  FrameResult step(const Tensor& image);
  const TrackStore& store() const { return store_; }
  int frames_seen() const { return frame_; }

 private:
  const VideoKNet& model_;
  ClassTable classes_;
  TrackerConfig cfg_;
  TrackStore store_;
  int frame_ = 0;
  std::optional<KernelSet> prev_last_input_;
  Tensor prev_link_kernels_;  // preserved kernels of the previous frame (link stage)
};

std::vector<FrameResult> step_video(const VideoKNet& model, std::span<const Tensor> images,
                                    const ClassTable& classes, const TrackerConfig& cfg = {});

/// Clip decoding: instance id = thing kernel index + 1 across the whole clip.
std::vector<FrameResult> decode_clip(const VideoKNet& model, std::span<const Tensor> images,
                                     const ClassTable& classes, const StitchConfig& cfg = {});

}  // namespace vkn
