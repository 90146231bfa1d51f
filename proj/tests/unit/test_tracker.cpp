#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gradchecks.hpp"
#include "testing.hpp"
#include "vkn/errors.hpp"
#include "vkn/tracker.hpp"

namespace vkn::testing {
namespace {

const ClassTable kClasses = ClassTable::synthetic();

// ---------------------------------------------------------------- stitching

// Independent painter: pixel sets, candidates visited by descending score.
PanopticFrame reference_stitch(const std::vector<std::set<int>>& thing_masks, const std::vector<double>& scores,
                               const std::vector<int>& semantic, int stuff_fill, int pixels, double keep) {
  std::vector<int> order(thing_masks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::set<int> claimed;
  PanopticFrame f(1, pixels, stuff_fill);
  int next = 1;
  for (int k : order) {
    std::set<int> free;
    std::set_difference(thing_masks[k].begin(), thing_masks[k].end(), claimed.begin(), claimed.end(),
                        std::inserter(free, free.begin()));
    if (thing_masks[k].empty() || free.empty()) continue;
    if (static_cast<double>(free.size()) / static_cast<double>(thing_masks[k].size()) < keep) continue;
    for (int p : free) {
      f.semantic_ids[p] = semantic[k];
      f.instance_ids[p] = next;
      claimed.insert(p);
    }
    ++next;
  }
  return f;
}

TEST(Stitch, MatchesReferencePainterOnRandomMasks) {
  Rng rng(17);
  constexpr int kPixels = 64;
  for (int trial = 0; trial < 100; ++trial) {
    // three things and one stuff kernel (class 1) that covers nothing
    const auto roles = [] {
      auto r = default_roles(3, 0);
      r.push_back({false, 1});
      return r;
    }();
    Tensor logits({4, kPixels}, -1.0);
    std::vector<std::set<int>> masks(3);
    for (int k = 0; k < 3; ++k) {
      const int x0 = static_cast<int>(rng.below(6)), y0 = static_cast<int>(rng.below(6));
      const int w = 2 + static_cast<int>(rng.below(4)), h = 2 + static_cast<int>(rng.below(4));
      for (int y = y0; y < std::min(8, y0 + h); ++y)
        for (int x = x0; x < std::min(8, x0 + w); ++x) {
          logits.at(k, y * 8 + x) = 1.0;
          masks[k].insert(y * 8 + x);
        }
    }
    Tensor cls({3, 2});
    std::vector<double> scores(3);
    std::vector<int> semantic(3);
    for (int k = 0; k < 3; ++k) {
      cls.at(k, 0) = rng.uniform(-0.5, 3.0);
      cls.at(k, 1) = rng.uniform(-0.5, 3.0);
      const int best = cls.at(k, 1) > cls.at(k, 0) ? 1 : 0;
      scores[k] = 1.0 / (1.0 + std::exp(-cls.at(k, best)));
      semantic[k] = 3 + best;
    }
    const StitchResult r = panoptic_stitch(logits, cls, roles, 8, 8, kClasses);
    const PanopticFrame ref = reference_stitch(masks, scores, semantic, 1, kPixels, 0.5);
    EXPECT_EQ(r.frame.semantic_ids, ref.semantic_ids) << "trial " << trial;
    EXPECT_EQ(r.frame.instance_ids, ref.instance_ids) << "trial " << trial;
    EXPECT_TRUE(validate_frame(r.frame, kClasses).empty());
  }
}

TEST(Stitch, IdenticalMasksKeepOnlyTheHigherScore) {
  Tensor logits({2, 16}, -1.0);
  for (int p = 0; p < 8; ++p) logits.at(0, p) = logits.at(1, p) = 2.0;
  const Tensor cls({2, 2}, std::vector<double>{0.5, -3.0, 2.0, -3.0});
  const StitchResult r = panoptic_stitch(logits, cls, default_roles(2, 0), 4, 4, kClasses);
  EXPECT_EQ(r.preserved, std::vector<int>{1});
  for (int p = 0; p < 8; ++p) EXPECT_EQ(r.frame.instance_ids[p], 1);
}

TEST(Stitch, DisjointMasksDoNotDependOnScoreOrder) {
  Tensor logits({2, 16}, -1.0);
  for (int p = 0; p < 4; ++p) logits.at(0, p) = 1.0;
  for (int p = 8; p < 12; ++p) logits.at(1, p) = 1.0;
  const Tensor a({2, 2}, std::vector<double>{1.0, -3.0, 2.0, -3.0});
  const Tensor b({2, 2}, std::vector<double>{2.0, -3.0, 1.0, -3.0});
  const StitchResult ra = panoptic_stitch(logits, a, default_roles(2, 0), 4, 4, kClasses);
  const StitchResult rb = panoptic_stitch(logits, b, default_roles(2, 0), 4, 4, kClasses);
  EXPECT_EQ(ra.frame.semantic_ids, rb.frame.semantic_ids);
  for (int p = 0; p < 16; ++p) EXPECT_EQ(ra.frame.instance_ids[p] > 0, rb.frame.instance_ids[p] > 0);
}

TEST(Stitch, ModelOutputIsAValidFrame) {
  ModelConfig cfg;
  cfg.num_thing_kernels = 4;
  cfg.channels = 8;
  cfg.embed_dim = 6;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  cfg.backbone_widths = {4, 8, 8, 8};
  const VideoKNet model(cfg, VideoFlags{}, 5);
  Rng rng(6);
  const FrameForward f = model.forward_frame(random_tensor(rng, {3, 16, 16}), nullptr);
  const StitchResult r = panoptic_stitch(f.stages.back(), 16, 16, kClasses);
  EXPECT_TRUE(validate_frame(r.frame, kClasses).empty());
  std::set<int> ids(r.frame.instance_ids.begin(), r.frame.instance_ids.end());
  ids.erase(0);
  EXPECT_EQ(ids.size(), r.preserved.size());
}

TEST(Stitch, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(panoptic_stitch(Tensor({2, 15}), Tensor({2, 2}), default_roles(2, 0), 4, 4, kClasses), DimensionError);
}

// ---------------------------------------------------------------- bi-softmax

TEST(BiSoftmax, SingleEntryIsOne) {
  EXPECT_DOUBLE_EQ(bi_softmax_scores(Tensor({1, 3}, 0.7), Tensor({1, 3}, -0.2)).at(0, 0), 1.0);
}

TEST(BiSoftmax, ScaledOrthonormalRowsGiveNearIdentity) {
  Tensor e({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) e.at(i, i) = std::sqrt(10.0);
  const Tensor s = bi_softmax_scores(e, e);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(s.at(i, j), i == j ? 1.0 : 0.0, 1e-4);
}

TEST(BiSoftmax, HandFixture) {
  const Tensor cur({2, 1}, std::vector<double>{1.0, -1.0});
  const Tensor prev({3, 1}, std::vector<double>{1.0, 0.0, 2.0});
  const Tensor s = bi_softmax_scores(cur, prev);
  // similarity [[1, 0, 2], [-1, 0, -2]]
  const double sim[2][3] = {{1, 0, 2}, {-1, 0, -2}};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      double row = 0.0, col = 0.0;
      for (int k = 0; k < 3; ++k) row += std::exp(sim[i][k]);
      for (int k = 0; k < 2; ++k) col += std::exp(sim[k][j]);
      const double expected = 0.5 * std::exp(sim[i][j]) / row + 0.5 * std::exp(sim[i][j]) / col;
      EXPECT_NEAR(s.at(i, j), expected, 1e-9);
    }
  EXPECT_NEAR(s.at(0, 1), 0.5 * 1.0 / (std::exp(1.0) + 1.0 + std::exp(2.0)) + 0.25, 1e-9);
}

TEST(BiSoftmax, RowAndColumnSumsAreBounded) {
  Rng rng(4);
  const Tensor s = bi_softmax_scores(random_tensor(rng, {4, 5}), random_tensor(rng, {5, 5}));
  double total = 0.0;
  for (double v : s.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    total += v;
  }
  // half of every row sums to 1 (4 rows), half of every column sums to 1 (5 columns)
  EXPECT_NEAR(total, 0.5 * 4 + 0.5 * 5, 1e-12);
}

TEST(BiSoftmax, WidthMismatchIsDimensionError) {
  EXPECT_THROW(bi_softmax_scores(Tensor({1, 2}), Tensor({1, 3})), DimensionError);
}

// ---------------------------------------------------------------- association

Tensor embeddings(std::vector<std::vector<double>> rows) {
  Tensor t({static_cast<int>(rows.size()), static_cast<int>(rows.front().size())});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) t.at(static_cast<int>(i), static_cast<int>(c)) = rows[i][c];
  return t;
}

TEST(Associate, EmptyStoreOpensTracksInOrder) {
  TrackStore store;
  const std::vector<int> classes{3, 4, 3};
  const auto ids = associate(Tensor(), {}, classes, embeddings({{1, 0}, {0, 1}, {1, 1}}), store, 0);
  EXPECT_EQ(ids, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(store.next_id(), 4);
}

TEST(Associate, IdentityScoresKeepIds) {
  TrackStore store;
  store.create(Tensor({2}, std::vector<double>{1, 0}), 3, 0);
  store.create(Tensor({2}, std::vector<double>{0, 1}), 4, 0);
  const std::vector<int> cand = store.candidates(1, 2);
  const Tensor scores({2, 2}, std::vector<double>{0.1, 0.9, 0.8, 0.05});
  const std::vector<int> classes{4, 3};
  AssociationConfig cfg;
  cfg.match_thresh = 0.5;
  const auto ids = associate(scores, cand, classes, embeddings({{0, 2}, {2, 0}}), store, 1, cfg);
  EXPECT_EQ(ids, (std::vector<int>{2, 1}));
  // EMA with momentum 0.5
  EXPECT_DOUBLE_EQ(store.track(2).embedding[1], 1.5);
  EXPECT_DOUBLE_EQ(store.track(1).embedding[0], 1.5);
  EXPECT_EQ(store.track(1).last_seen, 1);
}

TEST(Associate, ClassMismatchOrLowScoreOpensNewTrack) {
  TrackStore store;
  store.create(Tensor({1}, 1.0), 3, 0);
  const std::vector<int> cand = store.candidates(1, 2);
  const std::vector<int> person{4};
  EXPECT_EQ(associate(Tensor({1, 1}, 0.99), cand, person, Tensor({1, 1}, 1.0), store, 1), std::vector<int>{2});
  const std::vector<int> car{3};
  EXPECT_EQ(associate(Tensor({1, 1}, 0.1), cand, car, Tensor({1, 1}, 1.0), store, 1), std::vector<int>{3});
}

TEST(Associate, IdsAreNeverReused) {
  TrackStore store;
  std::set<int> seen;
  for (int frame = 0; frame < 20; ++frame) {
    store.candidates(frame, 0);
    const int id = store.create(Tensor({1}, 0.0), 3, frame);
    EXPECT_TRUE(seen.insert(id).second);
  }
}

// One object visible in frames 0 and 2, absent in frame 1.
std::vector<int> occlusion_ids(int ttl) {
  AssociationConfig cfg;
  cfg.ttl = ttl;
  TrackStore store;
  const Tensor e({1, 2}, std::vector<double>{1.0, 0.0});
  const std::vector<int> cls{3};
  std::vector<int> ids;
  ids.push_back(associate(Tensor(), store.candidates(0, ttl), cls, e, store, 0, cfg)[0]);
  store.candidates(1, ttl);
  const std::vector<int> cand = store.candidates(2, ttl);
  Tensor scores;
  if (!cand.empty()) scores = bi_softmax_scores(e, store.track(cand[0]).embedding.reshaped({1, 2}));
  ids.push_back(associate(scores, cand, cls, e, store, 2, cfg)[0]);
  return ids;
}

TEST(Associate, OcclusionWithinTtlKeepsTheId) {
  const auto ids = occlusion_ids(2);
  EXPECT_EQ(ids[0], ids[1]);
}

TEST(Associate, ZeroTtlStartsANewTrack) {
  const auto ids = occlusion_ids(0);
  EXPECT_NE(ids[0], ids[1]);
}

TEST(Associate, ScoreShapeMismatchIsDimensionError) {
  TrackStore store;
  store.create(Tensor({1}, 1.0), 3, 0);
  const std::vector<int> cand{1};
  const std::vector<int> cls{3, 3};
  EXPECT_THROW(associate(Tensor({1, 1}, 0.5), cand, cls, Tensor({2, 1}, 1.0), store, 1), DimensionError);
}

// ---------------------------------------------------------------- full tracker

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.num_thing_kernels = 4;
  cfg.channels = 8;
  cfg.embed_dim = 6;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  cfg.backbone_widths = {4, 8, 8, 8};
  return cfg;
}

std::vector<Tensor> random_clip(std::uint64_t seed, int frames) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (int t = 0; t < frames; ++t) out.push_back(random_tensor(rng, {3, 16, 16}));
  return out;
}

TEST(OnlineTracker, OutputsDependOnlyOnPastFrames) {
  const VideoKNet model(tiny_model(), VideoFlags{}, 21);
  const auto frames = random_clip(22, 5);
  const auto full = step_video(model, frames, kClasses);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const auto prefix = step_video(model, std::span<const Tensor>(frames.data(), t), kClasses);
    for (std::size_t i = 0; i < t; ++i) {
      EXPECT_EQ(prefix[i].frame, full[i].frame) << "prefix " << t << " frame " << i;
      ASSERT_EQ(prefix[i].log.size(), full[i].log.size());
      for (std::size_t j = 0; j < full[i].log.size(); ++j) EXPECT_EQ(prefix[i].log[j].score, full[i].log[j].score);
    }
  }
}

TEST(OnlineTracker, FirstFrameIdsAreConsecutive) {
  const VideoKNet model(tiny_model(), VideoFlags{}, 23);
  const auto frames = random_clip(24, 1);
  const auto out = step_video(model, frames, kClasses);
  ASSERT_EQ(out.size(), 1u);
  std::vector<int> ids;
  for (const auto& e : out[0].log) ids.push_back(e.track_id);
  for (std::size_t i = 0; i < ids.size(); ++i) EXPECT_EQ(ids[i], static_cast<int>(i) + 1);
  EXPECT_TRUE(validate_frame(out[0].frame, kClasses).empty());
}

TEST(OnlineTracker, StaticSceneHasNoIdSwitches) {
  TrackerConfig cfg;
  cfg.stitch.score_thresh = 0.0;  // untrained scores sit near 0.5; keep every candidate
  int with_things = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    VideoKNet model(tiny_model(), VideoFlags{}, seed);
    randomize_params(model.params(), seed, 0.8);
    const auto one = random_clip(seed + 100, 1);
    const std::vector<Tensor> frames(5, one[0]);
    const auto out = step_video(model, frames, kClasses, cfg);
    VideoAnnotation pred;
    for (const auto& fr : out) pred.frames.push_back(fr.frame);
    with_things += out.back().log.empty() ? 0 : 1;
    EXPECT_EQ(stationary_id_switches(pred), 0) << seed;
  }
  EXPECT_GE(with_things, 3);  // not vacuous
}

TEST(StationaryIdSwitches, CountsRelabelledSegments) {
  VideoAnnotation v;
  v.frames = {boxes_frame(8, 8, 0, {{3, 1, 0, 0, 4, 4}, {4, 2, 4, 4, 4, 4}}),
              boxes_frame(8, 8, 0, {{3, 1, 0, 0, 4, 4}, {4, 7, 4, 4, 4, 4}}),
              boxes_frame(8, 8, 0, {{3, 1, 1, 0, 4, 4}, {4, 7, 4, 4, 4, 4}})};
  EXPECT_EQ(stationary_id_switches(v), 1);
  // a shift below the IoU bar is a new segment, not a switch
  v.frames.push_back(boxes_frame(8, 8, 0, {{3, 9, 5, 0, 3, 3}}));
  EXPECT_EQ(stationary_id_switches(v), 1);
}

TEST(ClipDecoder, IdsAreKernelIndexPlusOne) {
  VideoFlags flags;
  flags.clip_mode = true;
  const VideoKNet model(tiny_model(), flags, 27);
  const auto frames = random_clip(28, 3);
  const auto out = decode_clip(model, frames, kClasses);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& fr : out) {
    EXPECT_TRUE(validate_frame(fr.frame, kClasses).empty());
    for (const auto& e : fr.log) {
      EXPECT_GE(e.track_id, 1);
      EXPECT_LE(e.track_id, tiny_model().num_thing_kernels);
    }
    for (int v : fr.frame.instance_ids) EXPECT_LE(v, tiny_model().num_thing_kernels);
  }
}

TEST(TrackLog, OneJsonObjectPerLine) {
  const std::vector<TrackLogEntry> entries{{0, 1, 3, 0.75, 12}, {1, 2, 4, 0.5, 3}};
  std::ostringstream os;
  write_track_log(os, entries);
  std::istringstream is(os.str());
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("frame").get<int>(), entries[n].frame);
    EXPECT_EQ(j.at("track_id").get<int>(), entries[n].track_id);
    EXPECT_EQ(j.at("class_id").get<int>(), entries[n].class_id);
    EXPECT_EQ(j.at("score").get<double>(), entries[n].score);
    EXPECT_EQ(j.at("mask_area").get<int>(), entries[n].mask_area);
    ++n;
  }
  EXPECT_EQ(n, 2);
}

}  // namespace
}  // namespace vkn::testing
