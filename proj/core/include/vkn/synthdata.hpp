#pragma once

// Deterministic synthetic video panoptic data: moving textured rectangles
// (cars) and ellipses (people) over one of three stuff layouts. All geometry
// is integer (positions in 1/256 px), so masks are exact and identical on
// every platform.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vkn/nn.hpp"
#include "vkn/panoptic.hpp"

namespace vkn {

/// Fully specified object; used by fixtures that need exact trajectories.
struct ScriptedThing {
  int class_id = 3;
  int x = 0, y = 0;  // top-left at frame 0, pixels
  int w = 8, h = 8;
  int vx = 0, vy = 0;  // 1/256 px per frame
};

enum class StuffLayout { kHorizon = 0, kStripes = 1, kRadial = 2 };

struct SceneSpec {
  std::uint64_t seed = 0;
  int num_frames = 8;
  int height = 64;
  int width = 64;
  int num_things = 2;
  int min_size = 12;
  int max_size = 20;
  /// Max speed in pixels per frame along each axis.
  double motion_magnitude = 2.0;
  bool occlusion = false;
  bool entry_exit = false;
  /// -1 picks a layout from the seed.
  int stuff_layout = -1;
  int max_retries = 200;
  std::vector<ScriptedThing> scripted;  // when non-empty, replaces random objects

  void validate() const;
  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

struct SyntheticVideo {
  std::string name;
  int height = 0;
  int width = 0;
  std::vector<std::vector<std::uint8_t>> frames;  // interleaved RGB per frame
  VideoAnnotation gt;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

/// Renders one video. Throws DataError when non-overlapping placement fails
/// within the retry budget.
SyntheticVideo generate_video(const SceneSpec& spec, const ClassTable& classes = ClassTable::synthetic());

struct Dataset {
  ClassTable classes;
  std::vector<SyntheticVideo> videos;
};

void write_videos(const std::vector<SyntheticVideo>& videos, const ClassTable& classes,
                  const std::filesystem::path& out_dir);
Dataset write_dataset(const std::vector<SceneSpec>& specs, const std::filesystem::path& out_dir);
Dataset read_dataset(const std::filesystem::path& dir);

// Single-file codecs, exposed for tests.
void write_image_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, int height, int width);
std::vector<std::uint8_t> read_image_file(const std::filesystem::path& path, int& height, int& width);
void write_pan_file(const std::filesystem::path& path, const PanopticFrame& frame);
PanopticFrame read_pan_file(const std::filesystem::path& path);

struct ReferenceSample {
  int index = 0;
  bool degenerate = false;  // length-1 video: the key frame is its own reference
};

/// Uniform over offsets in [-window, window] \ {0} that stay inside the video.
ReferenceSample sample_reference_frame(int length, int key_index, int window, Rng& rng);

}  // namespace vkn
