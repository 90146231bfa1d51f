#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "testing.hpp"
#include "vkn/errors.hpp"
#include "vkn/harness.hpp"

namespace vkn::testing {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("vkn_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_run() {
  RunConfig c;
  c.model.num_thing_kernels = 4;
  c.model.channels = 8;
  c.model.embed_dim = 6;
  c.model.heads = 2;
  c.model.ffn_hidden = 16;
  c.model.stages = 2;
  c.model.backbone_widths = {4, 8, 8, 8};
  c.optim.lr = 1e-3;
  c.optim.steps = 3;
  c.optim.batch_pairs = 1;
  c.metrics.windows = {0, 1};
  c.metrics.mvc_clips = {2};
  return c;
}

Dataset tiny_data() {
  std::vector<SceneSpec> specs;
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    SceneSpec s;
    s.seed = seed;
    s.num_frames = 3;
    s.height = 32;
    s.width = 32;
    s.num_things = 2;
    s.min_size = 6;
    s.max_size = 10;
    specs.push_back(s);
  }
  return make_dataset(specs);
}

// ---------------------------------------------------------------- config

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(RunConfig::from_json({{"nonsense", 1}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"optim", {{"learning_rate", 0.1}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"optim", 3}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"optim", {{"lr", "fast"}}}}), ConfigError);
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_THROW(RunConfig::from_json({{"optim", {{"lr", -1.0}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"flags", {{"kae", false}, {"link", true}}}}), ConfigError);
}

TEST(Config, JsonRoundTripAndStableHash) {
  const RunConfig a = tiny_run();
  const RunConfig b = RunConfig::from_json(a.to_json());
  EXPECT_EQ(b.to_json(), a.to_json());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  RunConfig c = a;
  c.merge({{"optim", {{"lr", 5e-4}}}});
  EXPECT_DOUBLE_EQ(c.optim.lr, 5e-4);
  EXPECT_NE(c.hash(), a.hash());
}

TEST(Config, Fnv1aReferenceVectors) {
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(fnv1a_hex("foobar"), "85944171f73967e8");
}

TEST(Config, LoadFromFile) {
  const fs::path dir = scratch("config");
  std::ofstream(dir / "run.json") << R"({"optim": {"steps": 7}, "seed": 4})";
  const RunConfig c = load_config(dir / "run.json");
  EXPECT_EQ(c.optim.steps, 7);
  EXPECT_EQ(c.seed, 4u);
  std::ofstream(dir / "bad.json") << "{";
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Presets, UnknownNamesAreConfigErrors) {
  EXPECT_THROW(dataset_preset("nope"), ConfigError);
  EXPECT_THROW(run_preset("nope"), ConfigError);
  EXPECT_THROW(ablation_preset("nope"), ConfigError);
  for (const std::string name : {"kae", "fuse_update", "link_stage", "joint", "sampling"}) {
    const AblationPreset p = ablation_preset(name);
    EXPECT_GE(p.variants.size(), 2u) << name;
    for (const auto& v : p.variants) {
      RunConfig c = run_preset(p.base_run);
      EXPECT_NO_THROW(c.merge(v.overrides)) << name << "/" << v.name;
    }
  }
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripsAtFloatPrecision) {
  const fs::path dir = scratch("ckpt");
  const RunConfig cfg = tiny_run();
  const auto model = build_model(cfg);
  save_checkpoint(dir / "m.ckpt", *model, cfg, ClassTable::synthetic());
  const Checkpoint ck = read_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(ck.config_hash(), cfg.hash());
  EXPECT_EQ(ck.config().to_json(), cfg.to_json());
  EXPECT_EQ(ck.classes(), ClassTable::synthetic());

  RunConfig other = cfg;
  other.seed = 99;
  const auto loaded = build_model(other);
  load_params(*loaded, ck);
  const auto& src = model->params().entries();
  const auto& dst = loaded->params().entries();
  ASSERT_EQ(src.size(), dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    EXPECT_EQ(src[i].first, dst[i].first);
    const Tensor a = src[i].second.value();
    const Tensor b = dst[i].second.value();
    for (std::size_t k = 0; k < a.size(); ++k)
      ASSERT_EQ(static_cast<double>(static_cast<float>(a[k])), b[k]) << src[i].first;
  }
}

TEST(Checkpoint, ShapeMismatchIsConfigError) {
  const fs::path dir = scratch("ckpt_mismatch");
  const RunConfig cfg = tiny_run();
  save_checkpoint(dir / "m.ckpt", *build_model(cfg), cfg, ClassTable::synthetic());
  RunConfig wider = cfg;
  wider.model.channels = 12;
  wider.model.ffn_hidden = 12;
  const auto model = build_model(wider);
  EXPECT_THROW(load_params(*model, read_checkpoint(dir / "m.ckpt")), ConfigError);
}

TEST(Checkpoint, CorruptFilesAreReported) {
  const fs::path dir = scratch("ckpt_corrupt");
  const RunConfig cfg = tiny_run();
  save_checkpoint(dir / "m.ckpt", *build_model(cfg), cfg, ClassTable::synthetic());
  std::ifstream is(dir / "m.ckpt", std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  std::vector<char> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  std::ofstream(dir / "t.ckpt", std::ios::binary).write(truncated.data(), static_cast<std::streamsize>(truncated.size()));
  try {
    read_checkpoint(dir / "t.ckpt");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("t.ckpt"), std::string::npos) << e.what();
  }

  std::vector<char> versioned = bytes;
  versioned[4] = static_cast<char>(kCheckpointVersion + 1);
  std::ofstream(dir / "v.ckpt", std::ios::binary).write(versioned.data(), static_cast<std::streamsize>(versioned.size()));
  EXPECT_THROW(read_checkpoint(dir / "v.ckpt"), VersionError);
}

// ---------------------------------------------------------------- training

TEST(Train, ZeroStepsLeavesTheInitialisation) {
  RunConfig cfg = tiny_run();
  cfg.optim.steps = 0;
  const auto a = build_model(cfg);
  const auto b = build_model(cfg);
  const TrainResult r = train(*a, tiny_data(), cfg);
  EXPECT_TRUE(r.log.empty());
  for (std::size_t i = 0; i < a->params().entries().size(); ++i)
    EXPECT_EQ(values_of(a->params().entries()[i].second.value()), values_of(b->params().entries()[i].second.value()));
}

TEST(Train, IsDeterministic) {
  const RunConfig cfg = tiny_run();
  const Dataset data = tiny_data();
  const auto a = build_model(cfg);
  const auto b = build_model(cfg);
  const TrainResult ra = train(*a, data, cfg);
  const TrainResult rb = train(*b, data, cfg);
  ASSERT_EQ(ra.log.size(), 3u);
  for (std::size_t s = 0; s < ra.log.size(); ++s) EXPECT_EQ(ra.log[s].total, rb.log[s].total);
  for (std::size_t i = 0; i < a->params().entries().size(); ++i)
    EXPECT_EQ(values_of(a->params().entries()[i].second.value()), values_of(b->params().entries()[i].second.value()));
  EXPECT_GT(ra.first_total, 0.0);
  EXPECT_TRUE(std::isfinite(ra.final_total));
}

TEST(Train, LogsOneJsonLinePerStep) {
  RunConfig cfg = tiny_run();
  cfg.log_every = 1;
  std::ostringstream log;
  TrainOptions opts;
  opts.log = &log;
  const auto model = build_model(cfg);
  train(*model, tiny_data(), cfg, opts);
  std::istringstream is(log.str());
  std::string line;
  int steps = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.contains("step")) ++steps;
  }
  EXPECT_EQ(steps, 3);
}

TEST(Train, ClassTableMismatchIsDataError) {
  RunConfig cfg = tiny_run();
  cfg.model.num_thing_classes = 3;
  const auto model = build_model(cfg);
  EXPECT_THROW(train(*model, tiny_data(), cfg), DataError);
  EXPECT_THROW(evaluate(*model, tiny_data(), cfg), DataError);
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluate, GroundTruthThroughTheMetricPathScoresOne) {
  const Dataset data = tiny_data();
  MetricConfig mc;
  mc.windows = {0, 1, 2};
  mc.mvc_clips = {2};
  MetricAccumulator acc(data.classes, mc);
  for (const auto& v : data.videos) {
    std::vector<FrameResult> frames;
    for (const auto& f : v.gt.frames) frames.push_back({f, {}});
    acc.add_video(to_annotation(frames, data.classes), v.gt);
  }
  const MetricReport r = acc.report();
  EXPECT_DOUBLE_EQ(r.stq, 1.0);
  EXPECT_DOUBLE_EQ(r.aq, 1.0);
  EXPECT_DOUBLE_EQ(r.sq, 1.0);
  EXPECT_DOUBLE_EQ(r.vpq.vpq, 1.0);
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
  EXPECT_DOUBLE_EQ(r.mvc_per_c.at(2), 1.0);
}

TEST(Evaluate, ProducesOnePredictionPerFrame) {
  const RunConfig cfg = tiny_run();
  const Dataset data = tiny_data();
  const auto model = build_model(cfg);
  const EvalOutput out = evaluate(*model, data, cfg);
  ASSERT_EQ(out.predictions.size(), data.videos.size());
  for (std::size_t i = 0; i < data.videos.size(); ++i)
    EXPECT_EQ(out.predictions[i].size(), data.videos[i].gt.frames.size());
  EXPECT_NEAR(out.report.stq, std::sqrt(out.report.aq * out.report.sq), 1e-12);
}

// ---------------------------------------------------------------- rendering

TEST(Render, TrackColoursAreDistinctAndStable) {
  std::set<std::array<std::uint8_t, 3>> seen;
  for (int id = 1; id <= 32; ++id) seen.insert(track_color(id));
  EXPECT_EQ(seen.size(), 32u);
  EXPECT_EQ(track_color(7), track_color(7));
}

TEST(Render, StaticVideoGivesIdenticalOverlays) {
  SceneSpec s;
  s.num_frames = 3;
  s.height = 32;
  s.width = 32;
  s.min_size = 6;
  s.max_size = 10;
  s.motion_magnitude = 0.0;
  const SyntheticVideo v = generate_video(s);
  const auto first = render_overlay(v.frames[0], v.gt.frames[0], v.gt.classes);
  for (std::size_t t = 1; t < v.frames.size(); ++t)
    EXPECT_EQ(render_overlay(v.frames[t], v.gt.frames[t], v.gt.classes), first);

  // on a flat image two tracks of one class get two overlay colours
  const PanopticFrame two = boxes_frame(4, 4, 0, {{3, 1, 0, 0, 2, 4}, {3, 2, 2, 0, 2, 4}});
  const auto flat = render_overlay(std::vector<std::uint8_t>(48, 128), two, v.gt.classes);
  std::set<std::array<std::uint8_t, 3>> colours;
  for (int p = 0; p < 16; ++p) colours.insert({flat[p * 3], flat[p * 3 + 1], flat[p * 3 + 2]});
  EXPECT_EQ(colours.size(), 2u);
  EXPECT_THROW(render_overlay(std::vector<std::uint8_t>(5), v.gt.frames[0], v.gt.classes), DimensionError);
}

TEST(Render, OverlayFilesCarryTheConfigHash) {
  const fs::path dir = scratch("overlay");
  const Dataset data = tiny_data();
  const auto& v = data.videos.front();
  std::vector<FrameResult> pred;
  for (const auto& f : v.gt.frames) pred.push_back({f, {}});
  write_overlays(v, pred, data.classes, dir, "0123456789abcdef");
  std::ifstream is(dir / "frame_0000.ppm");
  std::string magic, comment;
  std::getline(is, magic);
  std::getline(is, comment);
  EXPECT_EQ(magic, "P6");
  EXPECT_NE(comment.find("0123456789abcdef"), std::string::npos);
}

}  // namespace
}  // namespace vkn::testing
