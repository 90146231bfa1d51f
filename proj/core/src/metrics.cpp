#include "vkn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_map>

#include "vkn/errors.hpp"

namespace vkn {

namespace {

using SegKey = std::int64_t;

SegKey seg_key(int sem, int inst) { return (static_cast<std::int64_t>(sem) << 32) | static_cast<std::uint32_t>(inst); }
int key_class(SegKey k) { return static_cast<int>(k >> 32); }

struct PairHash {
  std::size_t operator()(const std::pair<SegKey, SegKey>& p) const noexcept {
    return std::hash<SegKey>()(p.first * 1000003 ^ p.second);
  }
};

void check_pair(const PanopticFrame& pred, const PanopticFrame& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.size() != gt.size()) {
    throw DimensionError("metric: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
}

void check_video(const VideoAnnotation& pred, const VideoAnnotation& gt) {
  if (pred.num_frames() != gt.num_frames()) {
    throw DimensionError("metric: prediction has " + std::to_string(pred.num_frames()) + " frames, ground truth " +
                         std::to_string(gt.num_frames()));
  }
  for (int t = 0; t < gt.num_frames(); ++t) check_pair(pred.frames[t], gt.frames[t]);
}

// Pred pixels with a label outside the table (other than ignore) are rejected.
bool pred_label(int sem, const ClassTable& classes) {
  if (sem == classes.ignore_label()) return false;
  if (!classes.is_valid(sem)) throw DataError("metric: predicted semantic id " + std::to_string(sem) + " unknown");
  return true;
}

}  // namespace

double PqStats::pq() const {
  const double den = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
  return den > 0.0 ? iou_sum / den : 0.0;
}

PqStats& PqStats::operator+=(const PqStats& o) {
  iou_sum += o.iou_sum;
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

PqResult finalize_pq(const std::map<int, PqStats>& per_class, const ClassTable& classes) {
  PqResult r;
  r.per_class = per_class;
  double all = 0.0, thing = 0.0, stuff = 0.0;
  for (const auto& [c, s] : per_class) {
    if (s.tp + s.fp + s.fn == 0) continue;
    const double v = s.pq();
    all += v;
    ++r.num_classes;
    if (classes.is_thing(c)) {
      thing += v;
      ++r.num_thing_classes;
    } else {
      stuff += v;
      ++r.num_stuff_classes;
    }
  }
  if (r.num_classes > 0) r.pq = all / r.num_classes;
  if (r.num_thing_classes > 0) r.pq_thing = thing / r.num_thing_classes;
  if (r.num_stuff_classes > 0) r.pq_stuff = stuff / r.num_stuff_classes;
  return r;
}

std::map<int, PqStats> pq_stats(std::span<const PanopticFrame> pred, std::span<const PanopticFrame> gt,
                                const ClassTable& classes) {
  if (pred.size() != gt.size()) throw DimensionError("pq_stats: frame count mismatch");
  std::unordered_map<SegKey, long long> gt_area, pred_area;
  std::unordered_map<std::pair<SegKey, SegKey>, long long, PairHash> inter;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    check_pair(pred[t], gt[t]);
    const PanopticFrame& g = gt[t];
    const PanopticFrame& p = pred[t];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const int gs = g.semantic_ids[i];
      if (gs == classes.ignore_label()) continue;
      if (!classes.is_valid(gs)) throw DataError("pq_stats: ground-truth semantic id " + std::to_string(gs) + " unknown");
      const SegKey gk = seg_key(gs, classes.is_thing(gs) ? g.instance_ids[i] : 0);
      ++gt_area[gk];
      const int ps = p.semantic_ids[i];
      if (!pred_label(ps, classes)) continue;
      const SegKey pk = seg_key(ps, classes.is_thing(ps) ? p.instance_ids[i] : 0);
      ++pred_area[pk];
      ++inter[{pk, gk}];
    }
  }

  std::map<int, PqStats> stats;
  std::unordered_map<SegKey, char> pred_matched, gt_matched;
  for (const auto& [pg, n] : inter) {
    const auto& [pk, gk] = pg;
    if (key_class(pk) != key_class(gk)) continue;
    const double uni = static_cast<double>(pred_area[pk] + gt_area[gk] - n);
    const double iou = static_cast<double>(n) / uni;
    if (iou <= 0.5) continue;
    PqStats& s = stats[key_class(gk)];
    s.iou_sum += iou;
    ++s.tp;
    pred_matched[pk] = 1;
    gt_matched[gk] = 1;
  }
  for (const auto& [gk, a] : gt_area)
    if (!gt_matched.count(gk)) ++stats[key_class(gk)].fn;
  for (const auto& [pk, a] : pred_area)
    if (!pred_matched.count(pk)) ++stats[key_class(pk)].fp;
  return stats;
}

PqResult compute_pq(const PanopticFrame& pred, const PanopticFrame& gt, const ClassTable& classes) {
  return finalize_pq(pq_stats(std::span(&pred, 1), std::span(&gt, 1), classes), classes);
}

VpqResult compute_vpq(const VideoAnnotation& pred, const VideoAnnotation& gt, std::span<const int> windows) {
  MetricConfig cfg;
  cfg.windows.assign(windows.begin(), windows.end());
  cfg.mvc_clips.clear();
  MetricAccumulator acc(gt.classes, cfg);
  acc.add_video(pred, gt);
  const MetricReport r = acc.report();
  return {r.vpq_per_window, r.vpq};
}

StqResult compute_stq(const VideoAnnotation& pred, const VideoAnnotation& gt) {
  MetricConfig cfg;
  cfg.windows.clear();
  cfg.mvc_clips.clear();
  MetricAccumulator acc(gt.classes, cfg);
  acc.add_video(pred, gt);
  const MetricReport r = acc.report();
  return {r.stq, r.aq, r.sq};
}

double compute_miou(const VideoAnnotation& pred, const VideoAnnotation& gt) { return compute_stq(pred, gt).sq; }

std::map<int, double> compute_mvc(const VideoAnnotation& pred, const VideoAnnotation& gt,
                                  std::span<const int> clip_lengths) {
  MetricConfig cfg;
  cfg.windows.clear();
  cfg.mvc_clips.assign(clip_lengths.begin(), clip_lengths.end());
  MetricAccumulator acc(gt.classes, cfg);
  acc.add_video(pred, gt);
  return acc.report().mvc_per_c;
}

MetricAccumulator::MetricAccumulator(ClassTable classes, MetricConfig cfg)
    : classes_(std::move(classes)), cfg_(std::move(cfg)) {
  for (int k : cfg_.windows)
    if (k < 0) throw ConfigError("VPQ window must be >= 0, got " + std::to_string(k));
  for (int c : cfg_.mvc_clips)
    if (c < 1) throw ConfigError("mVC clip length must be >= 1, got " + std::to_string(c));
}

void MetricAccumulator::add_video(const VideoAnnotation& pred, const VideoAnnotation& gt) {
  check_video(pred, gt);
  const int frames = gt.num_frames();
  if (frames == 0) return;
  const std::span<const PanopticFrame> pf(pred.frames);
  const std::span<const PanopticFrame> gf(gt.frames);

  for (int t = 0; t < frames; ++t)
    for (const auto& [c, s] : pq_stats(pf.subspan(t, 1), gf.subspan(t, 1), classes_)) frame_pq_[c] += s;

  for (int k : cfg_.windows) {
    const int len = std::min(k + 1, frames);
    SpanSums& sums = spans_[k];
    for (int s = 0; s + len <= frames; ++s) {
      const PqResult r = finalize_pq(pq_stats(pf.subspan(s, len), gf.subspan(s, len), classes_), classes_);
      if (r.num_classes == 0) continue;
      sums.pq += r.pq;
      ++sums.n;
      if (r.num_thing_classes > 0) {
        sums.thing += r.pq_thing;
        ++sums.n_thing;
      }
      if (r.num_stuff_classes > 0) {
        sums.stuff += r.pq_stuff;
        ++sums.n_stuff;
      }
    }
  }

  // Semantic IoU and association terms pooled over the whole video.
  std::unordered_map<SegKey, long long> gt_size, pred_size;
  std::unordered_map<std::pair<SegKey, SegKey>, long long, PairHash> overlap;
  for (int t = 0; t < frames; ++t) {
    const PanopticFrame& g = gt.frames[t];
    const PanopticFrame& p = pred.frames[t];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const int gs = g.semantic_ids[i];
      if (gs == classes_.ignore_label()) continue;
      if (!classes_.is_valid(gs)) throw DataError("metric: ground-truth semantic id " + std::to_string(gs) + " unknown");
      const int ps = p.semantic_ids[i];
      const bool pvalid = pred_label(ps, classes_);
      ++union_[gs];
      if (ps == gs) {
        ++inter_[gs];
      } else if (pvalid) {
        ++union_[ps];
      }
      const bool has_gid = classes_.is_thing(gs);
      const bool has_pid = pvalid && classes_.is_thing(ps) && p.instance_ids[i] > 0;
      const SegKey gid = seg_key(gs, g.instance_ids[i]);
      const SegKey pid = seg_key(ps, p.instance_ids[i]);
      if (has_gid) ++gt_size[gid];
      if (has_pid) ++pred_size[pid];
      if (has_gid && has_pid) ++overlap[{pid, gid}];
    }
  }
  std::unordered_map<SegKey, double> per_track;
  for (const auto& [pg, n] : overlap) {
    const auto& [pid, gid] = pg;
    const double tpa = static_cast<double>(n);
    const double iou = tpa / static_cast<double>(pred_size[pid] + gt_size[gid] - n);
    per_track[gid] += tpa * iou;
  }
  // Sum in sorted id order so the result is independent of hash layout.
  std::map<SegKey, long long> ordered(gt_size.begin(), gt_size.end());
  for (const auto& [gid, size] : ordered) aq_sum_ += per_track[gid] / static_cast<double>(size);
  gt_tracks_ += static_cast<long long>(gt_size.size());
  pred_tracks_ += static_cast<long long>(pred_size.size());

  for (int c : cfg_.mvc_clips) {
    if (frames < c) {
      warnings_.push_back("mVC_" + std::to_string(c) + ": video with " + std::to_string(frames) +
                          " frames skipped");
      continue;
    }
    double sum = 0.0;
    int clips = 0;
    const std::size_t pixels = gt.frames[0].size();
    for (int s = 0; s + c <= frames; ++s) {
      long long common = 0, consistent = 0;
      for (std::size_t i = 0; i < pixels; ++i) {
        const int g0 = gt.frames[s].semantic_ids[i];
        if (g0 == classes_.ignore_label()) continue;
        bool same_gt = true, same_pred = true;
        for (int t = s + 1; t < s + c; ++t) {
          same_gt = same_gt && gt.frames[t].semantic_ids[i] == g0;
          same_pred = same_pred && pred.frames[t].semantic_ids[i] == pred.frames[s].semantic_ids[i];
        }
        if (!same_gt) continue;
        ++common;
        if (same_pred && pred.frames[s].semantic_ids[i] == g0) ++consistent;
      }
      if (common == 0) continue;
      sum += static_cast<double>(consistent) / static_cast<double>(common);
      ++clips;
    }
    if (clips == 0) continue;
    mvc_[c].sum += sum / clips;
    ++mvc_[c].videos;
  }
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
  if (!(other.classes_ == classes_)) throw DataError("MetricAccumulator::merge: class tables differ");
  for (const auto& [k, s] : other.spans_) {
    SpanSums& d = spans_[k];
    d.pq += s.pq;
    d.thing += s.thing;
    d.stuff += s.stuff;
    d.n += s.n;
    d.n_thing += s.n_thing;
    d.n_stuff += s.n_stuff;
  }
  for (const auto& [c, s] : other.frame_pq_) frame_pq_[c] += s;
  for (const auto& [c, v] : other.inter_) inter_[c] += v;
  for (const auto& [c, v] : other.union_) union_[c] += v;
  aq_sum_ += other.aq_sum_;
  gt_tracks_ += other.gt_tracks_;
  pred_tracks_ += other.pred_tracks_;
  for (const auto& [c, m] : other.mvc_) {
    mvc_[c].sum += m.sum;
    mvc_[c].videos += m.videos;
  }
  warnings_.insert(warnings_.end(), other.warnings_.begin(), other.warnings_.end());
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.pq_per_class = frame_pq_;
  r.sem_intersection = inter_;
  r.sem_union = union_;
  r.aq_sum = aq_sum_;
  r.gt_tracks = gt_tracks_;
  r.pred_tracks = pred_tracks_;
  r.warnings = warnings_;

  double iou = 0.0;
  int n = 0;
  for (const auto& [c, u] : union_) {
    if (u == 0) continue;
    const auto it = inter_.find(c);
    iou += static_cast<double>(it == inter_.end() ? 0 : it->second) / static_cast<double>(u);
    ++n;
  }
  r.sq = n > 0 ? iou / n : 1.0;
  r.miou = r.sq;
  if (gt_tracks_ > 0) {
    r.aq = aq_sum_ / static_cast<double>(gt_tracks_);
  } else {
    r.aq = pred_tracks_ == 0 ? 1.0 : 0.0;
  }
  r.stq = std::sqrt(r.aq * r.sq);

  for (int k : cfg_.windows) {
    VpqValue v;
    const auto it = spans_.find(k);
    if (it != spans_.end()) {
      const SpanSums& s = it->second;
      if (s.n > 0) v.vpq = s.pq / static_cast<double>(s.n);
      if (s.n_thing > 0) v.vpq_thing = s.thing / static_cast<double>(s.n_thing);
      if (s.n_stuff > 0) v.vpq_stuff = s.stuff / static_cast<double>(s.n_stuff);
    }
    r.vpq_per_window[k] = v;
  }
  if (!r.vpq_per_window.empty()) {
    for (const auto& [k, v] : r.vpq_per_window) {
      r.vpq.vpq += v.vpq;
      r.vpq.vpq_thing += v.vpq_thing;
      r.vpq.vpq_stuff += v.vpq_stuff;
    }
    const double w = static_cast<double>(r.vpq_per_window.size());
    r.vpq.vpq /= w;
    r.vpq.vpq_thing /= w;
    r.vpq.vpq_stuff /= w;
  }
  for (const auto& [c, m] : mvc_)
    if (m.videos > 0) r.mvc_per_c[c] = m.sum / static_cast<double>(m.videos);
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  using nlohmann::json;
  json vpq = json::object();
  for (const auto& [k, v] : r.vpq_per_window)
    vpq[std::to_string(k)] = {{"vpq", v.vpq}, {"vpq_thing", v.vpq_thing}, {"vpq_stuff", v.vpq_stuff}};
  json mvc = json::object();
  for (const auto& [c, v] : r.mvc_per_c) mvc[std::to_string(c)] = v;
  json pq = json::object();
  for (const auto& [c, s] : r.pq_per_class)
    pq[std::to_string(c)] = {{"iou_sum", s.iou_sum}, {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}};
  json inter = json::object(), uni = json::object();
  for (const auto& [c, v] : r.sem_intersection) inter[std::to_string(c)] = v;
  for (const auto& [c, v] : r.sem_union) uni[std::to_string(c)] = v;
  return {{"stq", r.stq},
          {"aq", r.aq},
          {"sq", r.sq},
          {"vpq_per_window", vpq},
          {"vpq", {{"vpq", r.vpq.vpq}, {"vpq_thing", r.vpq.vpq_thing}, {"vpq_stuff", r.vpq.vpq_stuff}}},
          {"miou", r.miou},
          {"mvc_per_c", mvc},
          {"config_hash", r.config_hash},
          {"accumulators",
           {{"pq_per_class", pq},
            {"sem_intersection", inter},
            {"sem_union", uni},
            {"aq_sum", r.aq_sum},
            {"gt_tracks", r.gt_tracks},
            {"pred_tracks", r.pred_tracks}}},
          {"warnings", r.warnings}};
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    r.stq = j.at("stq").get<double>();
    r.aq = j.at("aq").get<double>();
    r.sq = j.at("sq").get<double>();
    for (const auto& [k, v] : j.at("vpq_per_window").items())
      r.vpq_per_window[std::stoi(k)] = {v.at("vpq").get<double>(), v.at("vpq_thing").get<double>(),
                                        v.at("vpq_stuff").get<double>()};
    const auto& vpq = j.at("vpq");
    r.vpq = {vpq.at("vpq").get<double>(), vpq.at("vpq_thing").get<double>(), vpq.at("vpq_stuff").get<double>()};
    r.miou = j.at("miou").get<double>();
    for (const auto& [k, v] : j.at("mvc_per_c").items()) r.mvc_per_c[std::stoi(k)] = v.get<double>();
    r.config_hash = j.value("config_hash", "");
    const auto& acc = j.at("accumulators");
    for (const auto& [k, v] : acc.at("pq_per_class").items())
      r.pq_per_class[std::stoi(k)] = {v.at("iou_sum").get<double>(), v.at("tp").get<long long>(),
                                      v.at("fp").get<long long>(), v.at("fn").get<long long>()};
    for (const auto& [k, v] : acc.at("sem_intersection").items()) r.sem_intersection[std::stoi(k)] = v.get<long long>();
    for (const auto& [k, v] : acc.at("sem_union").items()) r.sem_union[std::stoi(k)] = v.get<long long>();
    r.aq_sum = acc.at("aq_sum").get<double>();
    r.gt_tracks = acc.at("gt_tracks").get<long long>();
    r.pred_tracks = acc.at("pred_tracks").get<long long>();
    r.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("metric report: ") + e.what());
  }
  return r;
}

}  // namespace vkn
