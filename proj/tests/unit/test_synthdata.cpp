#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "testing.hpp"
#include "vkn/errors.hpp"
#include "vkn/harness.hpp"
#include "vkn/synthdata.hpp"

namespace vkn::testing {
namespace {

namespace fs = std::filesystem;

const ClassTable kClasses = ClassTable::synthetic();

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("vkn_synth_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SceneSpec small_spec(std::uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  s.num_frames = 4;
  s.height = 32;
  s.width = 32;
  s.num_things = 2;
  s.min_size = 6;
  s.max_size = 10;
  return s;
}

void expect_same_video(const SyntheticVideo& a, const SyntheticVideo& b) {
  EXPECT_EQ(a.height, b.height);
  EXPECT_EQ(a.width, b.width);
  EXPECT_EQ(a.frames, b.frames);
  ASSERT_EQ(a.gt.frames.size(), b.gt.frames.size());
  for (std::size_t t = 0; t < a.gt.frames.size(); ++t) EXPECT_EQ(a.gt.frames[t], b.gt.frames[t]) << t;
}

TEST(Generate, SameSpecIsBitIdentical) {
  const SceneSpec s = small_spec(11);
  expect_same_video(generate_video(s), generate_video(s));
  const SyntheticVideo other = generate_video(small_spec(12));
  EXPECT_NE(generate_video(s).frames, other.frames);
}

TEST(Generate, NoMotionGivesIdenticalMasks) {
  SceneSpec s = small_spec(5);
  s.motion_magnitude = 0.0;
  s.num_frames = 6;
  const SyntheticVideo v = generate_video(s);
  for (const auto& f : v.gt.frames) {
    EXPECT_EQ(f.semantic_ids, v.gt.frames[0].semantic_ids);
    EXPECT_EQ(f.instance_ids, v.gt.frames[0].instance_ids);
  }
}

TEST(Generate, GroundTruthIsValidAndIdsArePermanent) {
  for (const std::string preset : {"overfit", "fast_motion", "occlusion", "static", "crossing"}) {
    for (const SceneSpec& spec : dataset_preset(preset)) {
      const SyntheticVideo v = generate_video(spec);
      std::map<int, int> id_class;
      for (const auto& f : v.gt.frames) {
        EXPECT_TRUE(validate_frame(f, kClasses).empty()) << preset;
        for (std::size_t i = 0; i < f.size(); ++i) {
          EXPECT_NE(f.semantic_ids[i], kClasses.ignore_label());
          const int id = f.instance_ids[i];
          if (id == 0) continue;
          EXPECT_LE(id, std::max(spec.num_things, static_cast<int>(spec.scripted.size())));
          const auto [it, inserted] = id_class.emplace(id, f.semantic_ids[i]);
          EXPECT_EQ(it->second, f.semantic_ids[i]) << preset << " id " << id;
        }
      }
    }
  }
}

TEST(Generate, OverDenseSpecFailsAfterRetries) {
  SceneSpec s = small_spec(1);
  s.num_things = 12;
  s.min_size = 12;
  s.max_size = 14;
  s.max_retries = 5;
  EXPECT_THROW(generate_video(s), DataError);
}

TEST(Generate, InvalidSpecIsConfigError) {
  SceneSpec s = small_spec(1);
  s.max_size = 100;
  EXPECT_THROW(generate_video(s), ConfigError);
  EXPECT_THROW(SceneSpec::from_json({{"seed", 1}, {"colour", 3}}), ConfigError);
}

TEST(Generate, CrossingOcclusionFramesMatchGeometry) {
  const SceneSpec spec = dataset_preset("crossing").front();
  ASSERT_EQ(spec.scripted.size(), 2u);
  const ScriptedThing& a = spec.scripted[0];
  const ScriptedThing& b = spec.scripted[1];
  int expected = 0;
  for (int t = 0; t < spec.num_frames; ++t) {
    // constant velocity; both stay inside the canvas over the clip
    const int ax = a.x + a.vx * t / 256, bx = b.x + b.vx * t / 256;
    const int ay = a.y + a.vy * t / 256, by = b.y + b.vy * t / 256;
    ASSERT_GE(std::min(ax, bx), 0);
    ASSERT_LE(std::max(ax + a.w, bx + b.w), spec.width);
    const int ox = std::min(ax + a.w, bx + b.w) - std::max(ax, bx);
    const int oy = std::min(ay + a.h, by + b.h) - std::max(ay, by);
    if (ox > 0 && oy > 0) ++expected;
  }
  EXPECT_GT(expected, 0);

  const SyntheticVideo v = generate_video(spec);
  int observed = 0;
  for (const auto& f : v.gt.frames) {
    std::map<int, int> area;
    for (int id : f.instance_ids)
      if (id > 0) ++area[id];
    const bool occluded = area[1] < a.w * a.h || area[2] < b.w * b.h;
    observed += occluded ? 1 : 0;
  }
  EXPECT_EQ(observed, expected);
}

TEST(Dataset, RoundTripsTwentySpecs) {
  const fs::path dir = scratch("roundtrip");
  std::vector<SceneSpec> specs;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneSpec s = small_spec(seed);
    s.num_frames = 1 + static_cast<int>(seed % 4);
    s.occlusion = seed % 3 == 0;
    s.entry_exit = seed % 2 == 0;
    specs.push_back(s);
  }
  const Dataset written = write_dataset(specs, dir);
  const Dataset read = read_dataset(dir);
  EXPECT_EQ(read.classes, written.classes);
  ASSERT_EQ(read.videos.size(), written.videos.size());
  for (std::size_t i = 0; i < read.videos.size(); ++i) {
    EXPECT_EQ(read.videos[i].name, written.videos[i].name);
    expect_same_video(read.videos[i], written.videos[i]);
  }
}

TEST(Dataset, SpecJsonRoundTrip) {
  SceneSpec s = small_spec(77);
  s.scripted = {{4, 1, 2, 5, 6, 128, -64}};
  s.stuff_layout = 2;
  const SceneSpec back = SceneSpec::from_json(s.to_json());
  EXPECT_EQ(back.to_json(), s.to_json());
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TEST(Dataset, TruncatedFileIsDataErrorNamingThePath) {
  const fs::path dir = scratch("truncated");
  write_dataset({small_spec(3)}, dir);
  const fs::path pan = dir / "video_0000" / "frame_0001.pan";
  auto bytes = slurp(pan);
  bytes.resize(bytes.size() / 2);
  spit(pan, bytes);
  try {
    read_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const VersionError&) {
    FAIL() << "truncation reported as a version error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(pan.string()), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
}

TEST(Dataset, TruncatedImageAndMetaAreDataErrors) {
  const fs::path dir = scratch("truncated_img");
  write_dataset({small_spec(4)}, dir);
  const fs::path img = dir / "video_0000" / "frame_0000.img";
  auto bytes = slurp(img);
  bytes.resize(10);
  spit(img, bytes);
  EXPECT_THROW(read_dataset(dir), DataError);

  const fs::path meta = dir / "meta.json";
  auto m = slurp(meta);
  m.resize(m.size() / 3);
  spit(meta, m);
  EXPECT_THROW(read_dataset(dir), DataError);
}

TEST(Dataset, VersionMismatchIsVersionError) {
  const fs::path dir = scratch("version");
  write_dataset({small_spec(5)}, dir);
  const fs::path pan = dir / "video_0000" / "frame_0000.pan";
  auto bytes = slurp(pan);
  bytes.at(4) = static_cast<std::uint8_t>(kDatasetVersion + 1);
  spit(pan, bytes);
  EXPECT_THROW(read_pan_file(pan), VersionError);
  EXPECT_THROW(read_dataset(dir), VersionError);

  const fs::path dir2 = scratch("version_meta");
  write_dataset({small_spec(5)}, dir2);
  nlohmann::json meta = nlohmann::json::parse(slurp(dir2 / "meta.json"));
  meta["version"] = kDatasetVersion + 1;
  std::ofstream(dir2 / "meta.json") << meta.dump();
  EXPECT_THROW(read_dataset(dir2), VersionError);
}

TEST(ReferenceSampling, ClipsAtTheStart) {
  Rng rng(1);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) {
    const ReferenceSample r = sample_reference_frame(10, 0, 2, rng);
    EXPECT_FALSE(r.degenerate);
    seen.insert(r.index);
  }
  EXPECT_EQ(seen, (std::set<int>{1, 2}));
}

TEST(ReferenceSampling, UsesAllOffsetsMidVideo) {
  Rng rng(2);
  std::map<int, int> counts;
  for (int i = 0; i < 4000; ++i) ++counts[sample_reference_frame(10, 5, 2, rng).index];
  EXPECT_EQ(counts.size(), 4u);
  for (int r : {3, 4, 6, 7}) EXPECT_NEAR(counts[r] / 4000.0, 0.25, 0.04) << r;
}

TEST(ReferenceSampling, LengthOneIsDegenerate) {
  Rng rng(3);
  const ReferenceSample r = sample_reference_frame(1, 0, 2, rng);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.index, 0);
}

TEST(ReferenceSampling, SeededAndValidated) {
  Rng a(9), b(9);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_reference_frame(8, 3, 2, a).index, sample_reference_frame(8, 3, 2, b).index);
  EXPECT_THROW(sample_reference_frame(0, 0, 2, a), DataError);
  EXPECT_THROW(sample_reference_frame(4, 4, 2, a), DimensionError);
}

}  // namespace
}  // namespace vkn::testing
