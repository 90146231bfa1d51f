#pragma once

// Shared panoptic label containers used by the data generator, tracker and
// metrics.

#include <cstdint>
#include <string>
#include <vector>

namespace vkn {

struct ClassInfo {
  int id = 0;
  std::string name;
  bool is_thing = false;
};

/// Semantic class table. Stuff classes come first (ids 0..S-1) followed by
/// thing classes, so a thing's model-side index is `id - num_stuff()`.
class ClassTable {
 public:
  ClassTable() = default;
  ClassTable(std::vector<ClassInfo> classes, int ignore_label = 255);

  static ClassTable synthetic();

  const std::vector<ClassInfo>& classes() const noexcept { return classes_; }
  int ignore_label() const noexcept { return ignore_label_; }
  int num_classes() const noexcept { return static_cast<int>(classes_.size()); }
  int num_stuff() const noexcept { return num_stuff_; }
  int num_things() const noexcept { return num_classes() - num_stuff_; }
  bool is_thing(int semantic_id) const;
  bool is_valid(int semantic_id) const { return semantic_id >= 0 && semantic_id < num_classes(); }
  int thing_index(int semantic_id) const { return semantic_id - num_stuff_; }
  int thing_semantic(int thing_index) const { return thing_index + num_stuff_; }

  bool operator==(const ClassTable& other) const;

 private:
  std::vector<ClassInfo> classes_;
  int ignore_label_ = 255;
  int num_stuff_ = 0;
};

/// One frame of panoptic labels. Instance id 0 means "no instance".
struct PanopticFrame {
  int height = 0;
  int width = 0;
  int frame_index = 0;
  std::vector<std::int32_t> semantic_ids;
  std::vector<std::int32_t> instance_ids;

  PanopticFrame() = default;
  PanopticFrame(int h, int w, int semantic_fill = 0);

  std::size_t size() const noexcept { return semantic_ids.size(); }
  std::int32_t& semantic(int y, int x) { return semantic_ids[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t semantic(int y, int x) const { return semantic_ids[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t& instance(int y, int x) { return instance_ids[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t instance(int y, int x) const { return instance_ids[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const PanopticFrame& other) const = default;
};

/// Returns an empty string when `frame` satisfies the panoptic invariants,
/// otherwise a description of the first violation: every pixel carries one
/// semantic id (valid or ignore), instance ids appear only on thing pixels,
/// and each instance id maps to a single semantic class.
std::string validate_frame(const PanopticFrame& frame, const ClassTable& classes);

struct VideoAnnotation {
  std::vector<PanopticFrame> frames;
  ClassTable classes;

  int num_frames() const noexcept { return static_cast<int>(frames.size()); }
};

}  // namespace vkn
