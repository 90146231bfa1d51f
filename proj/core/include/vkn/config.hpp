#pragma once

// Run configuration: a nested JSON document. Missing keys take defaults,
// unknown keys are rejected, and the canonical dump is hashed so artifacts
// can be tied to the configuration that produced them.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "vkn/core_model.hpp"
#include "vkn/losses.hpp"
#include "vkn/metrics.hpp"
#include "vkn/tracker.hpp"
#include "vkn/video_model.hpp"

namespace vkn {

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global norm; 0 disables
  int steps = 300;
  int batch_pairs = 2;     // (key, ref) pairs per step
  int ref_window = 2;
  int num_refs = 1;        // reference frames per key
};

struct LossConfig {
  LossWeights weights;
  double dice_eps = 1.0;
  TrackPairConfig pairs;
  bool joint_seg = true;  // supervise the reference frame's segmentation too
};

struct DataConfig {
  std::string train_dir;
  std::string eval_dir;
};

struct RunConfig {
  ModelConfig model;
  VideoFlags flags;
  LossConfig loss;
  TrackerConfig tracker;
  OptimConfig optim;
  MetricConfig metrics;
  DataConfig data;
  std::uint64_t seed = 0;
  bool deterministic = true;
  int log_every = 10;

  void validate() const;
  nlohmann::json to_json() const;
  /// Applies `j` over the defaults. Unknown keys throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  /// Applies `j` on top of this configuration.
  void merge(const nlohmann::json& j);
  /// 16 hex digits of FNV-1a over the canonical JSON dump.
  std::string hash() const;
};

RunConfig load_config(const std::filesystem::path& path);
std::string fnv1a_hex(const std::string& bytes);

}  // namespace vkn
