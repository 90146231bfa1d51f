#include "vkn/panoptic.hpp"

#include <map>

#include "vkn/errors.hpp"

namespace vkn {

ClassTable::ClassTable(std::vector<ClassInfo> classes, int ignore_label)
    : classes_(std::move(classes)), ignore_label_(ignore_label) {
  bool seen_thing = false;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].id != static_cast<int>(i)) throw ConfigError("class ids must be dense and ordered from 0");
    if (classes_[i].is_thing) {
      seen_thing = true;
    } else {
      if (seen_thing) throw ConfigError("stuff classes must precede thing classes");
      ++num_stuff_;
    }
  }
  if (ignore_label_ >= 0 && ignore_label_ < num_classes()) throw ConfigError("ignore label collides with a class id");
}

ClassTable ClassTable::synthetic() {
  return ClassTable({{0, "sky", false}, {1, "road", false}, {2, "vegetation", false}, {3, "car", true},
                     {4, "person", true}});
}

bool ClassTable::is_thing(int semantic_id) const { return is_valid(semantic_id) && classes_[semantic_id].is_thing; }

bool ClassTable::operator==(const ClassTable& other) const {
  if (ignore_label_ != other.ignore_label_ || classes_.size() != other.classes_.size()) return false;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].id != other.classes_[i].id || classes_[i].name != other.classes_[i].name ||
        classes_[i].is_thing != other.classes_[i].is_thing)
      return false;
  }
  return true;
}

PanopticFrame::PanopticFrame(int h, int w, int semantic_fill)
    : height(h),
      width(w),
      semantic_ids(static_cast<std::size_t>(h) * w, semantic_fill),
      instance_ids(static_cast<std::size_t>(h) * w, 0) {}

std::string validate_frame(const PanopticFrame& frame, const ClassTable& classes) {
  const std::size_t n = static_cast<std::size_t>(frame.height) * frame.width;
  if (frame.semantic_ids.size() != n || frame.instance_ids.size() != n) return "label buffers do not match H x W";
  std::map<std::int32_t, std::int32_t> instance_class;
  for (std::size_t i = 0; i < n; ++i) {
    const int sem = frame.semantic_ids[i];
    const int ins = frame.instance_ids[i];
    if (sem != classes.ignore_label() && !classes.is_valid(sem)) {
      return "pixel " + std::to_string(i) + " has unknown semantic id " + std::to_string(sem);
    }
    if (ins < 0) return "pixel " + std::to_string(i) + " has negative instance id";
    if (ins == 0) continue;
    if (!classes.is_thing(sem)) {
      return "instance id " + std::to_string(ins) + " on non-thing pixel " + std::to_string(i);
    }
    auto [it, inserted] = instance_class.emplace(ins, sem);
    if (!inserted && it->second != sem) {
      return "instance id " + std::to_string(ins) + " spans classes " + std::to_string(it->second) + " and " +
             std::to_string(sem);
    }
  }
  return {};
}

}  // namespace vkn
