#pragma once

// Training, evaluation, checkpoints, rendering and experiment presets.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vkn/config.hpp"
#include "vkn/metrics.hpp"
#include "vkn/synthdata.hpp"
#include "vkn/tracker.hpp"
#include "vkn/video_model.hpp"

namespace vkn {

std::unique_ptr<VideoKNet> build_model(const RunConfig& cfg);

// Checkpoint: "VKNC", u32 version, u32 header length, JSON header
// {config, config_hash, classes}, u32 entry count, then per entry
// u32 name length, name, u32 rank, u32 dims[rank], float32 LE values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> params;

  RunConfig config() const;
  std::string config_hash() const { return header.value("config_hash", ""); }
  ClassTable classes() const;
};

void save_checkpoint(const std::filesystem::path& path, const VideoKNet& model, const RunConfig& cfg,
                     const ClassTable& classes);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint values into `model`; names and shapes must match exactly.
void load_params(VideoKNet& model, const Checkpoint& ckpt);

nlohmann::json class_table_to_json(const ClassTable& classes);
ClassTable class_table_from_json(const nlohmann::json& j);

/// Decoupled weight decay Adam with optional global-norm clipping.
class AdamW {
 public:
  AdamW(ParamStore& params, const OptimConfig& cfg);
  /// Applies one update from the accumulated gradients; returns the pre-clip norm.
  double step();

 private:
  ParamStore& params_;
  OptimConfig cfg_;
  std::vector<Tensor> m_, v_;
  long long t_ = 0;
};

struct StepLog {
  int step = 0;
  double total = 0.0, cls = 0.0, ce = 0.0, dice = 0.0, track = 0.0, aux = 0.0;
  double grad_norm = 0.0;
  int pairs_without_positives = 0;
};

struct TrainResult {
  std::vector<StepLog> log;
  double wall_seconds = 0.0;
  double first_total = 0.0;  // step 1
  double final_total = 0.0;  // mean over the last min(10, steps) steps
  nlohmann::json manifest;
};

struct TrainOptions {
  std::ostream* log = nullptr;                 // per-step JSON lines
  std::filesystem::path divergence_dump_dir;   // empty: no dump
};

/// Trains in place on the dataset. Throws DivergenceError on a non-finite loss.
TrainResult train(VideoKNet& model, const Dataset& data, const RunConfig& cfg, const TrainOptions& opts = {});

/// Loss of one (key, ref) pair with gradients recorded.
LossBundle pair_loss(const VideoKNet& model, const Tensor& key_image, const Tensor& ref_image,
                     const FrameTargets& key_gt, const FrameTargets& ref_gt, const RunConfig& cfg);

struct EvalOutput {
  MetricReport report;
  std::vector<std::vector<FrameResult>> predictions;  // per video
};

/// Online tracking (or clip decoding) over every video, then all metrics.
EvalOutput evaluate(const VideoKNet& model, const Dataset& data, const RunConfig& cfg);

std::vector<Tensor> video_tensors(const SyntheticVideo& v);
VideoAnnotation to_annotation(const std::vector<FrameResult>& frames, const ClassTable& classes);

std::array<std::uint8_t, 3> track_color(int track_id);
/// Blends id colours over the frame; stuff takes a fixed per-class colour.
std::vector<std::uint8_t> render_overlay(const std::vector<std::uint8_t>& rgb, const PanopticFrame& pred,
                                         const ClassTable& classes);
/// Writes frame_TTTT.ppm overlays; the config hash goes into a PPM comment.
void write_overlays(const SyntheticVideo& video, const std::vector<FrameResult>& pred, const ClassTable& classes,
                    const std::filesystem::path& out_dir, const std::string& config_hash);

// Presets.

/// Named dataset presets: overfit, fast_motion, occlusion, static, crossing.
/// `split` offsets the seeds so train and held-out sets differ.
std::vector<SceneSpec> dataset_preset(const std::string& name, int split = 0);
Dataset make_dataset(const std::vector<SceneSpec>& specs);
/// Named run presets: default, overfit, ablation.
RunConfig run_preset(const std::string& name);

struct AblationVariant {
  std::string name;
  nlohmann::json overrides;
};

struct AblationPreset {
  std::string name;
  std::string train_data;
  std::string eval_data;
  std::string base_run;
  std::vector<AblationVariant> variants;
};

/// kae (baseline / +KAE / +KL), fuse_update, link_stage, joint, sampling.
AblationPreset ablation_preset(const std::string& name);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  MetricReport report;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int steps = -1;  // overrides optim.steps when >= 0
  nlohmann::json extra_overrides;
  std::function<void(const AblationRow&)> on_row;
};

std::vector<AblationRow> run_ablation(const AblationPreset& preset, const AblationOptions& opts = {});
/// Markdown table of mean and spread per variant.
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace vkn
