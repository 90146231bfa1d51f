#include "vkn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "vkn/errors.hpp"

namespace vkn {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var zero() { return ag::constant(Tensor::scalar(0.0)); }

Var or_zero(const Var& v) { return v.defined() ? v : zero(); }

Var accumulate(const Var& total, const Var& term) { return total.defined() ? ag::add(total, term) : term; }

}  // namespace

std::vector<int> solve_assignment(const Tensor& cost) {
  require_rank(cost, 2, "solve_assignment");
  const int n = cost.dim(0);
  const int m = cost.dim(1);
  if (n > m) throw ConfigError("solve_assignment: more rows than columns");
  if (!cost.all_finite()) throw DimensionError("solve_assignment: non-finite cost");
  if (n == 0) return {};
  // Shortest augmenting path with row/column potentials (1-based internally).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) assignment[p[j] - 1] = j - 1;
  return assignment;
}

int MatchResult::gt_for_kernel(int kernel) const {
  for (const auto& [k, g] : pairs)
    if (k == kernel) return g;
  return -1;
}

MatchResult match_from_costs(const Tensor& cost) {
  require_rank(cost, 2, "match_from_costs");
  const int kernels = cost.dim(0);
  const int gts = cost.dim(1);
  if (gts > kernels) {
    throw ConfigError("hungarian_match: " + std::to_string(gts) + " GT segments exceed " + std::to_string(kernels) +
                      " thing kernels");
  }
  MatchResult r;
  r.cost_matrix = cost;
  Tensor transposed({gts, kernels});
  for (int i = 0; i < kernels; ++i)
    for (int j = 0; j < gts; ++j) transposed.at(j, i) = cost.at(i, j);
  const std::vector<int> col = solve_assignment(transposed);
  std::vector<char> used(static_cast<std::size_t>(kernels), 0);
  for (int j = 0; j < gts; ++j) {
    r.pairs.emplace_back(col[j], j);
    used[col[j]] = 1;
    r.total_cost += cost.at(col[j], j);
  }
  std::sort(r.pairs.begin(), r.pairs.end());
  for (int i = 0; i < kernels; ++i)
    if (!used[i]) r.unmatched_kernels.push_back(i);
  return r;
}

int FrameTargets::thing_for_track(int track_id) const {
  for (std::size_t i = 0; i < things.size(); ++i)
    if (things[i].track_id == track_id) return static_cast<int>(i);
  return -1;
}

FrameTargets make_targets(const PanopticFrame& frame, const ClassTable& classes) {
  FrameTargets t;
  t.height = frame.height;
  t.width = frame.width;
  const std::size_t n = frame.size();
  t.valid = Tensor({static_cast<int>(n)}, 0.0);
  t.stuff_masks.assign(static_cast<std::size_t>(classes.num_stuff()), Tensor({static_cast<int>(n)}, 0.0));
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < n; ++i) {
    const int sem = frame.semantic_ids[i];
    const int ins = frame.instance_ids[i];
    if (sem == classes.ignore_label()) continue;
    if (!classes.is_valid(sem)) throw DataError("make_targets: unknown semantic id " + std::to_string(sem));
    t.valid[i] = 1.0;
    if (!classes.is_thing(sem)) {
      t.stuff_masks[sem][i] = 1.0;
      continue;
    }
    if (ins <= 0) throw DataError("make_targets: thing pixel without a track id");
    auto it = slot.find(ins);
    if (it == slot.end()) it = slot.emplace(ins, 0).first;
  }
  for (auto& [id, s] : slot) {
    s = t.things.size();
    t.things.push_back({id, -1, Tensor({static_cast<int>(n)}, 0.0)});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int ins = frame.instance_ids[i];
    if (ins <= 0 || frame.semantic_ids[i] == classes.ignore_label()) continue;
    ThingTarget& th = t.things[slot.at(ins)];
    th.mask[i] = 1.0;
    th.class_index = classes.thing_index(frame.semantic_ids[i]);
  }
  return t;
}

Var full_resolution_masks(const StageOutput& out, int image_height, int image_width) {
  const int n = out.mask_logits.dim(0);
  const int h = out.mask_logits.dim(1);
  const int w = out.mask_logits.dim(2);
  if (image_height % h != 0 || image_width % w != 0 || image_height / h != image_width / w) {
    throw DimensionError("mask logits " + shape_str(out.mask_logits.shape()) + " do not tile image " +
                         std::to_string(image_height) + "x" + std::to_string(image_width));
  }
  const Var up = ag::upsample_bilinear(out.mask_logits, image_height / h);
  return ag::reshape(up, {n, image_height * image_width});
}

MatchResult hungarian_match(const StageOutput& pred, const FrameTargets& gt, const MatchWeights& w) {
  NoGradGuard guard;
  const Var full = full_resolution_masks(pred, gt.height, gt.width);
  return hungarian_match(pred, full.value(), gt, w);
}

MatchResult hungarian_match(const StageOutput& pred, const Tensor& full_mask_logits, const FrameTargets& gt,
                            const MatchWeights& w) {
  const int things = pred.class_logits.dim(0);
  const int gts = static_cast<int>(gt.things.size());
  const int pixels = gt.height * gt.width;
  if (full_mask_logits.dim(1) != pixels) throw DimensionError("hungarian_match: mask resolution mismatch");
  for (int i = 0; i < things; ++i)
    if (!pred.kernels.roles.at(i).is_thing) throw DimensionError("hungarian_match: thing kernels must come first");
  if (gts > things) {
    throw ConfigError("hungarian_match: " + std::to_string(gts) + " GT things exceed " + std::to_string(things) +
                      " thing kernels");
  }
  double valid_count = 0.0;
  for (double v : gt.valid.values()) valid_count += v;
  valid_count = std::max(valid_count, 1.0);

  Tensor cost({things, gts}, 0.0);
  std::vector<double> sig(static_cast<std::size_t>(pixels));
  for (int i = 0; i < things; ++i) {
    const double* x = full_mask_logits.data() + static_cast<std::size_t>(i) * pixels;
    double sp_sum = 0.0;
    double sig_sq = 0.0;
    for (int p = 0; p < pixels; ++p) {
      if (gt.valid[p] == 0.0) {
        sig[p] = 0.0;
        continue;
      }
      sp_sum += softplus(x[p]);
      sig[p] = sigmoid_value(x[p]);
      sig_sq += sig[p] * sig[p];
    }
    for (int j = 0; j < gts; ++j) {
      const Tensor& g = gt.things[j].mask;
      double x_in = 0.0, sg = 0.0, g_sq = 0.0;
      for (int p = 0; p < pixels; ++p) {
        if (g[p] == 0.0 || gt.valid[p] == 0.0) continue;
        x_in += x[p];
        sg += sig[p];
        g_sq += 1.0;
      }
      // BCE summed over valid pixels = sum softplus(x) - sum_{gt} x.
      const double ce = (sp_sum - x_in) / valid_count;
      const double dice = 1.0 - (2.0 * sg + 1.0) / (sig_sq + g_sq + 1.0);
      const double prob = sigmoid_value(pred.class_logits.value().at(i, gt.things[j].class_index));
      cost.at(i, j) = -w.cls * prob + w.ce * ce + w.dice * dice;
    }
  }
  return match_from_costs(cost);
}

double mask_iou(std::span<const double> pred_binary, std::span<const double> gt, std::span<const double> valid) {
  double inter = 0.0, uni = 0.0;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (!valid.empty() && valid[p] == 0.0) continue;
    const bool a = pred_binary[p] > 0.5;
    const bool b = gt[p] > 0.5;
    inter += (a && b) ? 1.0 : 0.0;
    uni += (a || b) ? 1.0 : 0.0;
  }
  return uni > 0.0 ? inter / uni : 0.0;
}

TrackPairLabels TrackPairLabels::remapped(std::span<const int> key_rows, std::span<const int> ref_rows) const {
  auto pos = [](std::span<const int> rows, int kernel) {
    auto it = std::find(rows.begin(), rows.end(), kernel);
    if (it == rows.end()) throw DimensionError("TrackPairLabels::remapped: kernel missing from row list");
    return static_cast<int>(it - rows.begin());
  };
  TrackPairLabels out = *this;
  for (auto& [k, r] : out.positives) {
    k = pos(key_rows, k);
    r = pos(ref_rows, r);
  }
  for (auto& [k, r] : out.negatives) {
    k = pos(key_rows, k);
    r = pos(ref_rows, r);
  }
  out.key_track.clear();
  out.ref_track.clear();
  for (auto& k : out.key_samples) {
    const int row = pos(key_rows, k);
    out.key_track[row] = key_track.at(k);
    k = row;
  }
  for (auto& r : out.ref_samples) {
    const int row = pos(ref_rows, r);
    out.ref_track[row] = ref_track.at(r);
    r = row;
  }
  return out;
}

namespace {

// Valid samples of one frame: kernel -> GT track id.
std::map<int, int> valid_samples(const Tensor& pred_masks, const FrameTargets& gt, const MatchResult& match,
                                 const TrackPairConfig& cfg) {
  const int pixels = gt.height * gt.width;
  if (pred_masks.rank() != 2 || pred_masks.dim(1) != pixels) {
    throw DimensionError("assign_track_pairs: predicted masks " + shape_str(pred_masks.shape()) +
                         " vs image pixels " + std::to_string(pixels));
  }
  auto row = [&](int k) { return std::span<const double>(pred_masks.data() + static_cast<std::size_t>(k) * pixels, pixels); };
  std::map<int, int> out;
  if (cfg.dense) {
    const int things = match.cost_matrix.rank() == 2 ? match.cost_matrix.dim(0) : 0;
    for (int k = 0; k < things; ++k) {
      double best = -1.0;
      int best_track = -1;
      for (const auto& th : gt.things) {
        const double iou = mask_iou(row(k), th.mask.values(), gt.valid.values());
        if (iou > best) {
          best = iou;
          best_track = th.track_id;
        }
      }
      if (best > cfg.pos_iou) out[k] = best_track;
    }
    return out;
  }
  for (const auto& [k, g] : match.pairs) {
    const ThingTarget& th = gt.things.at(static_cast<std::size_t>(g));
    if (mask_iou(row(k), th.mask.values(), gt.valid.values()) > cfg.pos_iou) out[k] = th.track_id;
  }
  return out;
}

}  // namespace

TrackPairLabels assign_track_pairs(const Tensor& pred_masks_key, const Tensor& pred_masks_ref,
                                   const FrameTargets& gt_key, const FrameTargets& gt_ref,
                                   const MatchResult& match_key, const MatchResult& match_ref,
                                   const TrackPairConfig& cfg) {
  for (const auto* gt : {&gt_key, &gt_ref})
    for (const auto& th : gt->things)
      if (th.track_id <= 0) throw DataError("assign_track_pairs: GT segment without a track id");

  TrackPairLabels labels;
  labels.key_track = valid_samples(pred_masks_key, gt_key, match_key, cfg);
  labels.ref_track = valid_samples(pred_masks_ref, gt_ref, match_ref, cfg);
  for (const auto& [k, t] : labels.key_track) labels.key_samples.push_back(k);
  for (const auto& [k, t] : labels.ref_track) labels.ref_samples.push_back(k);
  labels.V = static_cast<int>(labels.key_samples.size());
  labels.K = static_cast<int>(labels.ref_samples.size());

  const int pixels = gt_ref.height * gt_ref.width;
  for (const auto& [kv, track_v] : labels.key_track) {
    const int obj_in_ref = gt_ref.thing_for_track(track_v);
    for (const auto& [kr, track_r] : labels.ref_track) {
      if (track_r == track_v) {
        labels.positives.emplace_back(kv, kr);
        continue;
      }
      double iou = 0.0;
      if (obj_in_ref >= 0) {
        iou = mask_iou({pred_masks_ref.data() + static_cast<std::size_t>(kr) * pixels, static_cast<std::size_t>(pixels)},
                       gt_ref.things[obj_in_ref].mask.values(), gt_ref.valid.values());
      }
      if (iou < cfg.neg_iou) labels.negatives.emplace_back(kv, kr);
    }
  }
  return labels;
}

TrackLoss track_contrastive_loss(const KernelEmbeddings& emb_key, const KernelEmbeddings& emb_ref,
                                 const TrackPairLabels& labels) {
  if (labels.positives.empty()) return {zero(), true};
  if (emb_key.embeddings.dim(1) != emb_ref.embeddings.dim(1)) {
    throw DimensionError("track_contrastive_loss: embedding width mismatch");
  }
  const Var sim = ag::matmul_nt(emb_key.embeddings, emb_ref.embeddings);
  const std::size_t cols = static_cast<std::size_t>(sim.dim(1));
  std::map<int, std::vector<int>> negatives;
  for (const auto& [k, r] : labels.negatives) negatives[k].push_back(r);
  Var total;
  for (const auto& [k, r] : labels.positives) {
    std::vector<std::size_t> idx{static_cast<std::size_t>(k) * cols + r};
    for (int neg : negatives[k]) idx.push_back(static_cast<std::size_t>(k) * cols + neg);
    const Var logits = ag::gather(sim, idx);
    const Var pos = ag::gather(sim, std::span<const std::size_t>(idx.data(), 1));
    total = accumulate(total, ag::sub(ag::logsumexp(logits), ag::reshape(pos, {1})));
  }
  const int samples = std::max(labels.V, 1);
  return {ag::scale(total, 1.0 / samples), false};
}

AuxLoss track_aux_loss(const KernelEmbeddings& emb_key, const KernelEmbeddings& emb_ref, const TrackPairLabels& labels) {
  const std::size_t total_pairs = labels.positives.size() + labels.negatives.size();
  if (total_pairs == 0) return {zero(), 0};
  const Var& a = emb_key.embeddings;
  const Var& b = emb_ref.embeddings;
  if (a.dim(1) != b.dim(1)) throw DimensionError("track_aux_loss: embedding width mismatch");
  const int d = a.dim(1);
  auto norm_of = [d](const Tensor& t, int row) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += t.at(row, c) * t.at(row, c);
    return std::sqrt(s);
  };

  AuxLoss out;
  std::vector<std::size_t> sim_idx, key_idx, ref_idx;
  std::vector<double> targets;
  double constant_part = 0.0;
  auto add_pair = [&](int k, int r, double c) {
    if (norm_of(a.value(), k) == 0.0 || norm_of(b.value(), r) == 0.0) {
      ++out.zero_norm_pairs;
      constant_part += c * c;  // cosine defined as 0
      return;
    }
    sim_idx.push_back(static_cast<std::size_t>(k) * b.dim(0) + r);
    key_idx.push_back(static_cast<std::size_t>(k));
    ref_idx.push_back(static_cast<std::size_t>(r));
    targets.push_back(c);
  };
  for (const auto& [k, r] : labels.positives) add_pair(k, r, 1.0);
  for (const auto& [k, r] : labels.negatives) add_pair(k, r, 0.0);

  Var sum_sq = ag::constant(Tensor::scalar(constant_part));
  if (!sim_idx.empty()) {
    const Var sim = ag::matmul_nt(a, b);
    // one sqrt of the product of squared norms: parallel rows give cosine exactly 1 more often
    const Var na2 = ag::sum_rows(ag::mul(a, a));
    const Var nb2 = ag::sum_rows(ag::mul(b, b));
    const Var cos =
        ag::div(ag::gather(sim, sim_idx), ag::sqrt(ag::mul(ag::gather(na2, key_idx), ag::gather(nb2, ref_idx))));
    const int n = static_cast<int>(targets.size());
    const Var diff = ag::sub(cos, ag::constant(Tensor({n}, targets)));
    sum_sq = ag::add(sum_sq, ag::sum(ag::mul(diff, diff)));
  }
  out.loss = ag::scale(sum_sq, 1.0 / static_cast<double>(total_pairs));
  return out;
}

Var focal_loss(const Var& class_logits, std::span<const int> gt_classes, double gamma, double alpha) {
  require_rank(class_logits.value(), 2, "focal_loss");
  const int n = class_logits.dim(0);
  const int k = class_logits.dim(1);
  if (static_cast<int>(gt_classes.size()) != n) throw DimensionError("focal_loss: label count mismatch");
  if (n == 0) return zero();
  Tensor t({n, k}, 0.0);
  int positives = 0;
  for (int i = 0; i < n; ++i) {
    if (gt_classes[i] < 0) continue;
    if (gt_classes[i] >= k) throw DimensionError("focal_loss: class index out of range");
    t.at(i, gt_classes[i]) = 1.0;
    ++positives;
  }
  Tensor one_minus_2t({n, k}), alpha_t({n, k});
  for (std::size_t i = 0; i < t.size(); ++i) {
    one_minus_2t[i] = 1.0 - 2.0 * t[i];
    alpha_t[i] = alpha * t[i] + (1.0 - alpha) * (1.0 - t[i]);
  }
  const Var p = ag::sigmoid(class_logits);
  // 1 - p_t = p + t - 2 t p
  const Var miss = ag::add(ag::mul(p, ag::constant(one_minus_2t)), ag::constant(t));
  const Var mod = gamma == 2.0 ? ag::mul(miss, miss) : ag::pow_scalar(miss, gamma);
  const Var per = ag::mul(ag::mul(ag::constant(alpha_t), mod), ag::bce_with_logits(class_logits, t));
  return ag::scale(ag::sum(per), 1.0 / std::max(1, positives));
}

Var ce_mask_loss(const Var& mask_logits, const Tensor& gt_masks, const Tensor& valid) {
  require_same_shape(mask_logits.shape(), gt_masks.shape(), "ce_mask_loss");
  const int rows = mask_logits.dim(0);
  if (rows == 0) return zero();
  const int pixels = mask_logits.dim(1);
  Tensor weight({rows, pixels}, 1.0);
  double count = pixels;
  if (!valid.empty()) {
    count = 0.0;
    for (int p = 0; p < pixels; ++p) count += valid[p];
    for (int r = 0; r < rows; ++r)
      for (int p = 0; p < pixels; ++p) weight.at(r, p) = valid[p];
  }
  const Var per = ag::mul(ag::bce_with_logits(mask_logits, gt_masks), ag::constant(weight));
  return ag::scale(ag::sum(per), 1.0 / (std::max(count, 1.0) * rows));
}

Var dice_loss(const Var& mask_logits, const Tensor& gt_masks, const Tensor& valid, double eps) {
  require_same_shape(mask_logits.shape(), gt_masks.shape(), "dice_loss");
  const int rows = mask_logits.dim(0);
  if (rows == 0) return zero();
  const int pixels = mask_logits.dim(1);
  Tensor g = gt_masks;
  Tensor weight({rows, pixels}, 1.0);
  if (!valid.empty()) {
    for (int r = 0; r < rows; ++r)
      for (int p = 0; p < pixels; ++p) {
        weight.at(r, p) = valid[p];
        g.at(r, p) *= valid[p];
      }
  }
  Tensor g_sq({rows}, 0.0);
  for (int r = 0; r < rows; ++r)
    for (int p = 0; p < pixels; ++p) g_sq[r] += g.at(r, p) * g.at(r, p);
  const Var s = ag::mul(ag::sigmoid(mask_logits), ag::constant(weight));
  const Var inter = ag::sum_rows(ag::mul(s, ag::constant(g)));
  const Var s_sq = ag::sum_rows(ag::mul(s, s));
  const Var num = ag::add_scalar(ag::scale(inter, 2.0), eps);
  const Var den = ag::add_scalar(ag::add(s_sq, ag::constant(g_sq)), eps);
  const Var per = ag::sub(ag::constant(Tensor({rows}, 1.0)), ag::div(num, den));
  return ag::mean(per);
}

SegmentationTerms segmentation_losses(std::span<const StageOutput> stages, const FrameTargets& gt,
                                      const LossWeights& w, double dice_eps) {
  SegmentationTerms terms;
  for (const StageOutput& stage : stages) {
    const Var full = full_resolution_masks(stage, gt.height, gt.width);
    MatchResult match = hungarian_match(stage, full.value(), gt, w.matching());
    const int things = stage.class_logits.dim(0);
    const int pixels = gt.height * gt.width;

    std::vector<int> rows;
    std::vector<double> targets;
    std::vector<int> gt_classes(static_cast<std::size_t>(things), -1);
    for (const auto& [k, g] : match.pairs) {
      rows.push_back(k);
      const Tensor& m = gt.things[g].mask;
      targets.insert(targets.end(), m.values().begin(), m.values().end());
      gt_classes[k] = gt.things[g].class_index;
    }
    const auto& roles = stage.kernels.roles;
    for (int i = 0; i < static_cast<int>(roles.size()); ++i) {
      if (roles[i].is_thing) continue;
      rows.push_back(i);
      const Tensor& m = gt.stuff_masks.at(static_cast<std::size_t>(roles[i].stuff_class));
      targets.insert(targets.end(), m.values().begin(), m.values().end());
    }
    const int sel_rows = static_cast<int>(rows.size());
    Var ce = zero(), dice = zero();
    if (sel_rows > 0) {
      const Var sel = ag::gather_rows(full, rows);
      const Tensor gt_masks({sel_rows, pixels}, std::move(targets));
      ce = ce_mask_loss(sel, gt_masks, gt.valid);
      dice = dice_loss(sel, gt_masks, gt.valid, dice_eps);
    }
    terms.cls = accumulate(terms.cls, focal_loss(stage.class_logits, gt_classes));
    terms.ce = accumulate(terms.ce, ce);
    terms.dice = accumulate(terms.dice, dice);
    terms.matches.push_back(std::move(match));
    terms.full_masks.push_back(full);
  }
  return terms;
}

std::vector<FrameTargets> make_tube_targets(std::span<const FrameTargets> frames) {
  std::map<int, int> track_class;
  for (const auto& f : frames)
    for (const auto& th : f.things) {
      auto [it, inserted] = track_class.emplace(th.track_id, th.class_index);
      if (!inserted && it->second != th.class_index) {
        throw DataError("make_tube_targets: track " + std::to_string(th.track_id) + " changes class");
      }
    }
  std::vector<FrameTargets> out;
  for (const auto& f : frames) {
    FrameTargets t = f;
    t.things.clear();
    const int pixels = f.height * f.width;
    for (const auto& [id, cls] : track_class) {
      const int j = f.thing_for_track(id);
      t.things.push_back({id, cls, j >= 0 ? f.things[j].mask : Tensor({pixels}, 0.0)});
    }
    out.push_back(std::move(t));
  }
  return out;
}

SegmentationTerms clip_segmentation_losses(std::span<const StageOutput> per_frame,
                                           std::span<const FrameTargets> tube_targets, const LossWeights& w,
                                           double dice_eps) {
  if (per_frame.size() != tube_targets.size() || per_frame.empty()) {
    throw DimensionError("clip_segmentation_losses: frame count mismatch");
  }
  const int things = per_frame.front().class_logits.dim(0);
  const int tracks = static_cast<int>(tube_targets.front().things.size());
  SegmentationTerms terms;
  Tensor cost({things, tracks}, 0.0);
  for (std::size_t t = 0; t < per_frame.size(); ++t) {
    if (static_cast<int>(tube_targets[t].things.size()) != tracks) {
      throw DimensionError("clip_segmentation_losses: tube targets not aligned");
    }
    const Var full = full_resolution_masks(per_frame[t], tube_targets[t].height, tube_targets[t].width);
    const MatchResult m = hungarian_match(per_frame[t], full.value(), tube_targets[t], w.matching());
    for (std::size_t i = 0; i < cost.size(); ++i) cost[i] += m.cost_matrix[i];
    terms.full_masks.push_back(full);
  }
  MatchResult match = match_from_costs(cost);
  std::vector<int> gt_classes(static_cast<std::size_t>(things), -1);
  for (const auto& [k, g] : match.pairs) gt_classes[k] = tube_targets.front().things[g].class_index;
  terms.cls = focal_loss(per_frame.front().class_logits, gt_classes);

  for (std::size_t t = 0; t < per_frame.size(); ++t) {
    const FrameTargets& gt = tube_targets[t];
    const int pixels = gt.height * gt.width;
    std::vector<int> rows;
    std::vector<double> targets;
    for (const auto& [k, g] : match.pairs) {
      rows.push_back(k);
      const auto v = gt.things[g].mask.values();
      targets.insert(targets.end(), v.begin(), v.end());
    }
    const auto& roles = per_frame[t].kernels.roles;
    for (int i = 0; i < static_cast<int>(roles.size()); ++i) {
      if (roles[i].is_thing) continue;
      rows.push_back(i);
      const auto v = gt.stuff_masks.at(static_cast<std::size_t>(roles[i].stuff_class)).values();
      targets.insert(targets.end(), v.begin(), v.end());
    }
    const Var sel = ag::gather_rows(terms.full_masks[t], rows);
    const Tensor gt_masks({static_cast<int>(rows.size()), pixels}, std::move(targets));
    terms.ce = accumulate(terms.ce, ce_mask_loss(sel, gt_masks, gt.valid));
    terms.dice = accumulate(terms.dice, dice_loss(sel, gt_masks, gt.valid, dice_eps));
    terms.matches.push_back(match);
  }
  return terms;
}

LossBundle combine_losses(const Var& cls, const Var& ce, const Var& dice, const Var& track, const Var& aux,
                          const LossWeights& w) {
  LossBundle b;
  b.l_cls = or_zero(cls);
  b.l_ce = or_zero(ce);
  b.l_dice = or_zero(dice);
  b.l_track = or_zero(track);
  b.l_aux = or_zero(aux);
  b.weights = w;
  b.total = ag::add(ag::add(ag::add(ag::add(ag::scale(b.l_cls, w.cls), ag::scale(b.l_ce, w.ce)),
                                    ag::scale(b.l_dice, w.dice)),
                            ag::scale(b.l_track, w.track)),
                    ag::scale(b.l_aux, w.aux));
  return b;
}

LossBundle total_loss(std::span<const StageOutput> key_stages, std::span<const StageOutput> ref_stages,
                      const FrameTargets& gt_key, const FrameTargets& gt_ref, const KernelEmbeddings* emb_key,
                      const KernelEmbeddings* emb_ref, const TrackPairLabels* labels, const LossWeights& w,
                      double dice_eps) {
  SegmentationTerms seg = segmentation_losses(key_stages, gt_key, w, dice_eps);
  Var cls = seg.cls, ce = seg.ce, dice = seg.dice;
  if (!ref_stages.empty()) {
    SegmentationTerms ref = segmentation_losses(ref_stages, gt_ref, w, dice_eps);
    cls = ag::add(cls, ref.cls);
    ce = ag::add(ce, ref.ce);
    dice = ag::add(dice, ref.dice);
  }
  Var track, aux;
  bool no_pos = true;
  if (emb_key && emb_ref && labels) {
    TrackLoss t = track_contrastive_loss(*emb_key, *emb_ref, *labels);
    track = t.loss;
    no_pos = t.no_positives;
    aux = track_aux_loss(*emb_key, *emb_ref, *labels).loss;
  }
  LossBundle b = combine_losses(cls, ce, dice, track, aux, w);
  b.no_positives = no_pos;
  return b;
}

}  // namespace vkn
