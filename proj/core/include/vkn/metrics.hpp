#pragma once

// Video panoptic metrics: PQ, VPQ over temporal windows, STQ (AQ x SQ),
// mIoU and mVC. GT void pixels are dropped from every count.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vkn/panoptic.hpp"

namespace vkn {

struct PqStats {
  double iou_sum = 0.0;
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;

  double pq() const;
  PqStats& operator+=(const PqStats& o);
};

struct PqResult {
  double pq = 0.0;
  double pq_thing = 0.0;
  double pq_stuff = 0.0;
  int num_classes = 0;  // classes with at least one TP, FP or FN
  int num_thing_classes = 0;
  int num_stuff_classes = 0;
  std::map<int, PqStats> per_class;  // semantic id -> stats
};

/// PQ from per-class stats: mean over classes that occur.
PqResult finalize_pq(const std::map<int, PqStats>& per_class, const ClassTable& classes);

/// Segments of a span of frames are tubes: a thing id (class, instance) or a
/// stuff class pooled over every frame of the span. Matched iff IoU > 0.5.
std::map<int, PqStats> pq_stats(std::span<const PanopticFrame> pred, std::span<const PanopticFrame> gt,
                                const ClassTable& classes);

PqResult compute_pq(const PanopticFrame& pred, const PanopticFrame& gt, const ClassTable& classes);

struct VpqValue {
  double vpq = 0.0;
  double vpq_thing = 0.0;
  double vpq_stuff = 0.0;
};

inline const std::vector<int> kCityscapesWindows{0, 5, 10, 15};
inline const std::vector<int> kKittiWindows{1, 2, 3, 4};

struct VpqResult {
  std::map<int, VpqValue> per_window;
  VpqValue mean;  // over the window list
};

/// For window k, PQ over (k+1)-frame spans averaged over spans. A window
/// longer than the video collapses to one span covering all frames.
VpqResult compute_vpq(const VideoAnnotation& pred, const VideoAnnotation& gt, std::span<const int> windows);

struct StqResult {
  double stq = 0.0;
  double aq = 0.0;
  double sq = 0.0;
};

StqResult compute_stq(const VideoAnnotation& pred, const VideoAnnotation& gt);
double compute_miou(const VideoAnnotation& pred, const VideoAnnotation& gt);
/// Videos shorter than c contribute nothing to mVC_c (a warning is recorded).
std::map<int, double> compute_mvc(const VideoAnnotation& pred, const VideoAnnotation& gt,
                                  std::span<const int> clip_lengths = std::vector<int>{8, 16});

struct MetricConfig {
  std::vector<int> windows = kCityscapesWindows;
  std::vector<int> mvc_clips{8, 16};
};

struct MetricReport {
  double stq = 0.0, aq = 0.0, sq = 0.0;
  std::map<int, VpqValue> vpq_per_window;
  VpqValue vpq;
  double miou = 0.0;
  std::map<int, double> mvc_per_c;
  std::string config_hash;

  // Accumulators.
  std::map<int, PqStats> pq_per_class;      // frame-level PQ stats
  std::map<int, long long> sem_intersection;  // per semantic class, pooled
  std::map<int, long long> sem_union;
  double aq_sum = 0.0;  // sum over GT tracks of per-track association terms
  long long gt_tracks = 0;
  long long pred_tracks = 0;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);

/// Per-video accumulation; merge sums accumulators in call order.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(ClassTable classes, MetricConfig cfg = {});

  void add_video(const VideoAnnotation& pred, const VideoAnnotation& gt);
  void merge(const MetricAccumulator& other);
  MetricReport report() const;

 private:
  struct SpanSums {
    double pq = 0.0, thing = 0.0, stuff = 0.0;
    long long n = 0, n_thing = 0, n_stuff = 0;
  };
  struct MvcSums {
    double sum = 0.0;
    long long videos = 0;
  };

  ClassTable classes_;
  MetricConfig cfg_;
  std::map<int, SpanSums> spans_;
  std::map<int, PqStats> frame_pq_;
  std::map<int, long long> inter_, union_;
  double aq_sum_ = 0.0;
  long long gt_tracks_ = 0;
  long long pred_tracks_ = 0;
  std::map<int, MvcSums> mvc_;
  std::vector<std::string> warnings_;
};

}  // namespace vkn
