#pragma once

// Target assignment and the training loss stack.

#include <map>
#include <span>
#include <utility>
#include <vector>

#include "vkn/core_model.hpp"
#include "vkn/panoptic.hpp"
#include "vkn/video_heads.hpp"

namespace vkn {

/// Exact minimum-cost assignment of every row of `cost` [R, C] (R <= C) to a
/// distinct column. Returns the column chosen for each row.
std::vector<int> solve_assignment(const Tensor& cost);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (kernel index, gt segment index)
  Tensor cost_matrix;                      // [N_thing, G]
  std::vector<int> unmatched_kernels;
  double total_cost = 0.0;

  /// gt index matched to `kernel`, or -1.
  int gt_for_kernel(int kernel) const;
};

/// One-to-one matching of thing kernels (rows) to GT segments (columns).
/// Throws ConfigError when there are more GT segments than kernels.
MatchResult match_from_costs(const Tensor& cost);

/// GT thing segment at image resolution.
struct ThingTarget {
  int track_id = 0;
  int class_index = 0;  // thing class index (semantic id - num_stuff)
  Tensor mask;          // [H*W] in {0, 1}
};

/// Dense supervision derived from a PanopticFrame.
struct FrameTargets {
  int height = 0;
  int width = 0;
  std::vector<ThingTarget> things;
  std::vector<Tensor> stuff_masks;  // one [H*W] mask per stuff class
  Tensor valid;                     // [H*W], 0 on ignore pixels

  int thing_for_track(int track_id) const;
};

FrameTargets make_targets(const PanopticFrame& frame, const ClassTable& classes);

struct MatchWeights {
  double cls = 2.0;
  double ce = 1.0;
  double dice = 4.0;
};

/// Mask logits of a stage upsampled to image resolution, [N, H*W].
Var full_resolution_masks(const StageOutput& out, int image_height, int image_width);

/// Hungarian assignment of thing kernels to GT thing segments using
///   w_cls * (-p(class)) + w_ce * CE(mask, gt) + w_dice * dice(mask, gt).
MatchResult hungarian_match(const StageOutput& pred, const FrameTargets& gt, const MatchWeights& w);
/// Same, reusing already-upsampled logits [N, H*W].
MatchResult hungarian_match(const StageOutput& pred, const Tensor& full_mask_logits, const FrameTargets& gt,
                            const MatchWeights& w);

double mask_iou(std::span<const double> pred_binary, std::span<const double> gt, std::span<const double> valid);

struct TrackPairConfig {
  double pos_iou = 0.7;   // strictly above -> valid sample
  double neg_iou = 0.3;   // strictly below -> negative to that object
  bool dense = false;     // ablation: sample every thing kernel by IoU alone
};

struct TrackPairLabels {
  std::vector<std::pair<int, int>> positives;  // (key row, ref row)
  std::vector<std::pair<int, int>> negatives;
  int V = 0;  // valid key samples
  int K = 0;  // valid ref samples
  std::vector<int> key_samples;  // kernel indices in the key frame
  std::vector<int> ref_samples;
  std::map<int, int> key_track;  // kernel index -> GT track id
  std::map<int, int> ref_track;

  /// Re-expresses pair indices as row positions in `key_rows` / `ref_rows`.
  TrackPairLabels remapped(std::span<const int> key_rows, std::span<const int> ref_rows) const;
};

/// Labels (key kernel, ref kernel) pairs from binarised predicted masks
/// [N, H*W] and the two frames' Hungarian matches.
TrackPairLabels assign_track_pairs(const Tensor& pred_masks_key, const Tensor& pred_masks_ref,
                                   const FrameTargets& gt_key, const FrameTargets& gt_ref,
                                   const MatchResult& match_key, const MatchResult& match_ref,
                                   const TrackPairConfig& cfg = {});

struct TrackLoss {
  Var loss;
  bool no_positives = false;
};

/// Contrastive association loss: for every training sample v and each of its
/// positives k+, -log(exp(v.k+) / (exp(v.k+) + sum_k- exp(v.k-))), averaged
/// over the V samples. Pair indices address rows of the embedding matrices.
TrackLoss track_contrastive_loss(const KernelEmbeddings& emb_key, const KernelEmbeddings& emb_ref,
                                 const TrackPairLabels& labels);

struct AuxLoss {
  Var loss;
  int zero_norm_pairs = 0;
};

/// Mean over labelled pairs of (cos(v, k) - c)^2, c = 1 for positives.
AuxLoss track_aux_loss(const KernelEmbeddings& emb_key, const KernelEmbeddings& emb_ref,
                       const TrackPairLabels& labels);

/// Sigmoid focal loss (gamma 2, alpha 0.25) over [N_thing, K] logits.
/// gt_classes[i] is the thing class of kernel i or -1 for background.
/// Normalised by max(1, number of foreground kernels).
Var focal_loss(const Var& class_logits, std::span<const int> gt_classes, double gamma = 2.0, double alpha = 0.25);
/// Mean per-pixel binary cross-entropy over [P, H*W], averaged over rows.
Var ce_mask_loss(const Var& mask_logits, const Tensor& gt_masks, const Tensor& valid);
/// 1 - (2 sum(s g) + eps) / (sum(s^2) + sum(g^2) + eps) with s = sigmoid(m), averaged over rows.
Var dice_loss(const Var& mask_logits, const Tensor& gt_masks, const Tensor& valid, double eps = 1.0);

struct LossWeights {
  double cls = 2.0;
  double ce = 1.0;
  double dice = 4.0;
  double track = 0.25;
  double aux = 1.0;

  MatchWeights matching() const { return {cls, ce, dice}; }
};

struct SegmentationTerms {
  Var cls;
  Var ce;
  Var dice;
  std::vector<MatchResult> matches;  // one per stage
  std::vector<Var> full_masks;       // upsampled logits per stage
};

/// Matches and supervises every stage of one frame; stage weights are equal.
SegmentationTerms segmentation_losses(std::span<const StageOutput> stages, const FrameTargets& gt,
                                      const LossWeights& w, double dice_eps = 1.0);

/// Aligns the thing targets of several frames by track id: every frame gets
/// the union of tracks in the same order, with empty masks where absent.
std::vector<FrameTargets> make_tube_targets(std::span<const FrameTargets> frames);

/// Clip supervision: one Hungarian assignment per clip on summed per-frame
/// costs, focal loss on the shared class logits, mask losses on every frame.
SegmentationTerms clip_segmentation_losses(std::span<const StageOutput> per_frame,
                                           std::span<const FrameTargets> tube_targets, const LossWeights& w,
                                           double dice_eps = 1.0);

struct LossBundle {
  Var l_cls, l_ce, l_dice, l_track, l_aux;
  Var total;
  LossWeights weights;
  bool no_positives = true;

  double value(const Var& v) const { return v.value()[0]; }
};

/// total = sum of lambda * L. Undefined terms count as zero.
LossBundle combine_losses(const Var& cls, const Var& ce, const Var& dice, const Var& track, const Var& aux,
                          const LossWeights& w);

/// Segmentation losses on every stage of the key frame and (when given) the
/// reference frame, plus the association terms on final-stage embeddings.
LossBundle total_loss(std::span<const StageOutput> key_stages, std::span<const StageOutput> ref_stages,
                      const FrameTargets& gt_key, const FrameTargets& gt_ref, const KernelEmbeddings* emb_key,
                      const KernelEmbeddings* emb_ref, const TrackPairLabels* labels, const LossWeights& w,
                      double dice_eps = 1.0);

}  // namespace vkn
