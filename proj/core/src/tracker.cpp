#include "vkn/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include <nlohmann/json.hpp>

#include "vkn/errors.hpp"
#include "vkn/losses.hpp"

namespace vkn {

namespace {

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Candidate {
  int kernel;
  double score;
  bool thing;
  int semantic;
};

}  // namespace

StitchResult panoptic_stitch(const Tensor& full_mask_logits, const Tensor& class_logits,
                             std::span<const KernelRole> roles, int height, int width, const ClassTable& classes,
                             const StitchConfig& cfg) {
  const int n = static_cast<int>(roles.size());
  const int pixels = height * width;
  if (full_mask_logits.rank() != 2 || full_mask_logits.dim(0) != n || full_mask_logits.dim(1) != pixels) {
    throw DimensionError("panoptic_stitch: mask logits " + shape_str(full_mask_logits.shape()) + " for " +
                         std::to_string(n) + " kernels at " + std::to_string(height) + "x" + std::to_string(width));
  }
  auto logit = [&](int k, int p) { return full_mask_logits.at(k, p); };

  std::vector<Candidate> cands;
  std::vector<int> stuff_rows;
  int thing_row = 0;
  for (int k = 0; k < n; ++k) {
    if (roles[k].is_thing) {
      const int t = thing_row++;
      if (t >= class_logits.dim(0)) throw DimensionError("panoptic_stitch: fewer class rows than thing kernels");
      int best = 0;
      for (int c = 1; c < class_logits.dim(1); ++c)
        if (class_logits.at(t, c) > class_logits.at(t, best)) best = c;
      const double score = sigmoid_value(class_logits.at(t, best));
      if (score < cfg.score_thresh) continue;
      cands.push_back({k, score, true, classes.thing_semantic(best)});
    } else {
      stuff_rows.push_back(k);
      double sum = 0.0;
      int count = 0;
      for (int p = 0; p < pixels; ++p) {
        if (logit(k, p) > 0.0) {
          sum += sigmoid_value(logit(k, p));
          ++count;
        }
      }
      if (count > 0) cands.push_back({k, sum / count, false, roles[k].stuff_class});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

  StitchResult r;
  r.frame = PanopticFrame(height, width, 0);
  std::vector<char> claimed(static_cast<std::size_t>(pixels), 0);
  for (const Candidate& c : cands) {
    int area = 0, free_px = 0;
    for (int p = 0; p < pixels; ++p) {
      if (logit(c.kernel, p) > 0.0) {
        ++area;
        free_px += claimed[p] ? 0 : 1;
      }
    }
    if (area == 0 || free_px == 0) continue;
    int instance = 0;
    if (c.thing) {
      if (static_cast<double>(free_px) / area < cfg.overlap_keep) continue;
      r.preserved.push_back(c.kernel);
      r.scores.push_back(c.score);
      r.classes.push_back(c.semantic);
      r.areas.push_back(free_px);
      instance = static_cast<int>(r.preserved.size());
    }
    for (int p = 0; p < pixels; ++p) {
      if (claimed[p] || logit(c.kernel, p) <= 0.0) continue;
      claimed[p] = 1;
      r.frame.semantic_ids[p] = c.semantic;
      r.frame.instance_ids[p] = instance;
    }
  }
  for (int p = 0; p < pixels; ++p) {
    if (claimed[p]) continue;
    int best = -1;
    for (int k : stuff_rows)
      if (best < 0 || logit(k, p) > logit(best, p)) best = k;
    r.frame.semantic_ids[p] = best < 0 ? classes.ignore_label() : roles[best].stuff_class;
  }
  return r;
}

StitchResult panoptic_stitch(const StageOutput& out, int height, int width, const ClassTable& classes,
                             const StitchConfig& cfg) {
  NoGradGuard guard;
  const Var full = full_resolution_masks(out, height, width);
  return panoptic_stitch(full.value(), out.class_logits.value(), out.kernels.roles, height, width, classes, cfg);
}

Tensor bi_softmax_scores(const Tensor& emb_cur, const Tensor& emb_prev) {
  require_rank(emb_cur, 2, "bi_softmax_scores");
  require_rank(emb_prev, 2, "bi_softmax_scores");
  const int m = emb_cur.dim(0);
  const int p = emb_prev.dim(0);
  const int d = emb_cur.dim(1);
  if (m < 1 || p < 1 || emb_prev.dim(1) != d) {
    throw DimensionError("bi_softmax_scores: " + shape_str(emb_cur.shape()) + " vs " + shape_str(emb_prev.shape()));
  }
  Tensor sim({m, p}, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < p; ++j)
      for (int c = 0; c < d; ++c) sim.at(i, j) += emb_cur.at(i, c) * emb_prev.at(j, c);

  Tensor out({m, p}, 0.0);
  for (int i = 0; i < m; ++i) {
    double mx = sim.at(i, 0);
    for (int j = 1; j < p; ++j) mx = std::max(mx, sim.at(i, j));
    double z = 0.0;
    for (int j = 0; j < p; ++j) z += std::exp(sim.at(i, j) - mx);
    for (int j = 0; j < p; ++j) out.at(i, j) += 0.5 * std::exp(sim.at(i, j) - mx) / z;
  }
  for (int j = 0; j < p; ++j) {
    double mx = sim.at(0, j);
    for (int i = 1; i < m; ++i) mx = std::max(mx, sim.at(i, j));
    double z = 0.0;
    for (int i = 0; i < m; ++i) z += std::exp(sim.at(i, j) - mx);
    for (int i = 0; i < m; ++i) out.at(i, j) += 0.5 * std::exp(sim.at(i, j) - mx) / z;
  }
  return out;
}

int TrackStore::create(Tensor embedding, int class_id, int frame) {
  const int id = next_id_++;
  tracks_.emplace(id, Track{std::move(embedding), class_id, frame, true});
  return id;
}

std::vector<int> TrackStore::candidates(int frame, int ttl) {
  std::vector<int> ids;
  for (auto& [id, t] : tracks_) {
    if (!t.active) continue;
    if (frame - t.last_seen > ttl) {
      t.active = false;
      continue;
    }
    ids.push_back(id);
  }
  return ids;
}

std::vector<int> associate(const Tensor& scores, std::span<const int> candidate_ids, std::span<const int> cur_classes,
                           const Tensor& cur_embeddings, TrackStore& store, int frame, const AssociationConfig& cfg) {
  const int m = static_cast<int>(cur_classes.size());
  const int p = static_cast<int>(candidate_ids.size());
  if (p > 0 && (scores.rank() != 2 || scores.dim(0) != m || scores.dim(1) != p)) {
    throw DimensionError("associate: score matrix " + shape_str(scores.shape()) + " for " + std::to_string(m) +
                         " instances and " + std::to_string(p) + " tracks");
  }
  if (m > 0 && cur_embeddings.dim(0) != m) throw DimensionError("associate: embedding rows mismatch");
  const int d = m > 0 ? cur_embeddings.dim(1) : 0;
  auto row = [&](int i) {
    Tensor e({d});
    for (int c = 0; c < d; ++c) e[c] = cur_embeddings.at(i, c);
    return e;
  };

  std::vector<std::tuple<double, int, int>> pairs;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < p; ++j) {
      if (scores.at(i, j) < cfg.match_thresh) continue;
      if (store.track(candidate_ids[j]).class_id != cur_classes[i]) continue;
      pairs.emplace_back(scores.at(i, j), i, j);
    }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });

  std::vector<int> assigned(static_cast<std::size_t>(m), 0);
  std::vector<char> track_used(static_cast<std::size_t>(p), 0);
  for (const auto& [s, i, j] : pairs) {
    if (assigned[i] != 0 || track_used[j]) continue;
    assigned[i] = candidate_ids[j];
    track_used[j] = 1;
    Track& t = store.track(candidate_ids[j]);
    const Tensor e = row(i);
    for (int c = 0; c < d; ++c) t.embedding[c] = cfg.momentum * t.embedding[c] + (1.0 - cfg.momentum) * e[c];
    t.last_seen = frame;
    t.active = true;
  }
  for (int i = 0; i < m; ++i)
    if (assigned[i] == 0) assigned[i] = store.create(row(i), cur_classes[i], frame);
  return assigned;
}

void write_track_log(std::ostream& os, std::span<const TrackLogEntry> entries) {
  for (const auto& e : entries) {
    nlohmann::json j = {{"frame", e.frame},
                        {"track_id", e.track_id},
                        {"class_id", e.class_id},
                        {"score", e.score},
                        {"mask_area", e.mask_area}};
    os << j.dump() << '\n';
  }
}

OnlineTracker::OnlineTracker(const VideoKNet& model, ClassTable classes, TrackerConfig cfg)
    : model_(model), classes_(std::move(classes)), cfg_(cfg) {}

FrameResult OnlineTracker::step(const Tensor& image) {
  NoGradGuard guard;
  const FrameForward fwd = model_.forward_frame(image, prev_last_input_ ? &*prev_last_input_ : nullptr);
  const int h = image.dim(1);
  const int w = image.dim(2);
  StitchResult st = panoptic_stitch(fwd.stages.back(), h, w, classes_, cfg_.stitch);

  const Var& link_kernels = fwd.stages.at(static_cast<std::size_t>(model_.link_stage())).kernels.kernels;
  const Var cur = ag::gather_rows(link_kernels, st.preserved);
  const int m = static_cast<int>(st.preserved.size());

  std::vector<int> ids;
  if (m > 0) {
    const bool have_prev = prev_link_kernels_.rank() == 2 && prev_link_kernels_.dim(0) > 0;
    // The first frame (or one following an empty frame) links with itself.
    const Var ref = have_prev ? ag::constant(prev_link_kernels_) : cur;
    const Tensor emb = model_.embed(cur, ref, model_.flags().embed_pre_link).value();
    const std::vector<int> cand = store_.candidates(frame_, cfg_.assoc.ttl);
    Tensor scores;
    if (!cand.empty()) {
      Tensor prev({static_cast<int>(cand.size()), emb.dim(1)});
      for (std::size_t j = 0; j < cand.size(); ++j) {
        const Tensor& e = store_.track(cand[j]).embedding;
        for (int c = 0; c < emb.dim(1); ++c) prev.at(static_cast<int>(j), c) = e[c];
      }
      scores = bi_softmax_scores(emb, prev);
    }
    ids = associate(scores, cand, st.classes, emb, store_, frame_, cfg_.assoc);
  } else {
    store_.candidates(frame_, cfg_.assoc.ttl);
  }

  FrameResult out;
  out.frame = std::move(st.frame);
  out.frame.frame_index = frame_;
  for (auto& v : out.frame.instance_ids)
    if (v > 0) v = ids[static_cast<std::size_t>(v - 1)];
  for (int i = 0; i < m; ++i) out.log.push_back({frame_, ids[i], st.classes[i], st.scores[i], st.areas[i]});

  prev_last_input_ = KernelSet{ag::constant(fwd.last_input.kernels.kernels.value()), fwd.last_input.kernels.roles};
  prev_link_kernels_ = cur.value();
  ++frame_;
  return out;
}

std::vector<FrameResult> step_video(const VideoKNet& model, std::span<const Tensor> images, const ClassTable& classes,
                                    const TrackerConfig& cfg) {
  OnlineTracker tracker(model, classes, cfg);
  std::vector<FrameResult> out;
  for (const Tensor& img : images) out.push_back(tracker.step(img));
  return out;
}

std::vector<FrameResult> decode_clip(const VideoKNet& model, std::span<const Tensor> images,
                                     const ClassTable& classes, const StitchConfig& cfg) {
  NoGradGuard guard;
  const VideoKNet::ClipOutput clip = model.forward_clip(images);
  std::vector<FrameResult> out;
  for (std::size_t t = 0; t < images.size(); ++t) {
    StitchResult st = panoptic_stitch(clip.per_frame[t], images[t].dim(1), images[t].dim(2), classes, cfg);
    FrameResult fr;
    fr.frame = std::move(st.frame);
    fr.frame.frame_index = static_cast<int>(t);
    for (auto& v : fr.frame.instance_ids)
      if (v > 0) v = st.preserved[static_cast<std::size_t>(v - 1)] + 1;
    for (std::size_t i = 0; i < st.preserved.size(); ++i) {
      fr.log.push_back({static_cast<int>(t), st.preserved[i] + 1, st.classes[i], st.scores[i], st.areas[i]});
    }
    out.push_back(std::move(fr));
  }
  return out;
}

}  // namespace vkn
