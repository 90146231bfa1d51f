#include "vkn/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "vkn/errors.hpp"

namespace vkn {

namespace fs = std::filesystem;
using nlohmann::json;

std::unique_ptr<VideoKNet> build_model(const RunConfig& cfg) {
  cfg.validate();
  return std::make_unique<VideoKNet>(cfg.model, cfg.flags, cfg.seed);
}

json class_table_to_json(const ClassTable& classes) {
  json list = json::array();
  for (const auto& c : classes.classes()) list.push_back({{"id", c.id}, {"name", c.name}, {"thing", c.is_thing}});
  return {{"classes", list}, {"ignore_label", classes.ignore_label()}};
}

ClassTable class_table_from_json(const json& j) {
  std::vector<ClassInfo> infos;
  for (const auto& c : j.at("classes"))
    infos.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(), c.at("thing").get<bool>()});
  return ClassTable(std::move(infos), j.at("ignore_label").get<int>());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const fs::path& path;
  const std::string& buf;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError(path.string() + " at offset " + std::to_string(pos) + ": " + msg);
  }
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size()) fail(std::string("truncated while reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

RunConfig Checkpoint::config() const {
  try {
    return RunConfig::from_json(header.at("config"));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
}

ClassTable Checkpoint::classes() const {
  try {
    return class_table_from_json(header.at("classes"));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const fs::path& path, const VideoKNet& model, const RunConfig& cfg, const ClassTable& classes) {
  const json header = {{"config", cfg.to_json()}, {"config_hash", cfg.hash()}, {"classes", class_table_to_json(classes)}};
  const std::string text = header.dump();
  std::string out = "VKNC";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  const auto& entries = model.params().entries();
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, var] : entries) {
    const Tensor& t = var.value();
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(out, bits);
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw DataError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  const std::string buf{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  ByteReader r{path, buf};
  if (r.bytes(4, "magic") != "VKNC") {
    r.pos = 0;
    r.fail("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  const std::uint32_t hlen = r.u32("header length");
  try {
    ck.header = json::parse(r.bytes(hlen, "header"));
  } catch (const json::parse_error& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  const std::uint32_t count = r.u32("entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t nlen = r.u32("name length");
    std::string name = r.bytes(nlen, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32("dimension");
      if (dim == 0 || dim > (1u << 24)) r.fail("implausible dimension");
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    r.need(numel * 4, "values");
    Tensor t(shape);
    for (std::size_t i = 0; i < numel; ++i) {
      const std::uint32_t bits = r.u32("value");
      float f;
      std::memcpy(&f, &bits, sizeof f);
      t[i] = static_cast<double>(f);
    }
    ck.params.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != buf.size()) r.fail("trailing bytes");
  return ck;
}

void load_params(VideoKNet& model, const Checkpoint& ckpt) {
  auto& entries = model.params().entries();
  if (entries.size() != ckpt.params.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                      std::to_string(entries.size()));
  }
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.params) by_name[name] = &t;
  for (auto& [name, var] : entries) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint lacks parameter '" + name + "'");
    if (it->second->shape() != var.value().shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_str(it->second->shape()) + " in checkpoint, " +
                        shape_str(var.value().shape()) + " in model");
    }
    var.value_mut() = *it->second;
  }
}

// ---------------------------------------------------------------------------
// Optimiser

AdamW::AdamW(ParamStore& params, const OptimConfig& cfg) : params_(params), cfg_(cfg) {
  for (const auto& [name, var] : params_.entries()) {
    m_.emplace_back(var.value().shape(), 0.0);
    v_.emplace_back(var.value().shape(), 0.0);
  }
}

double AdamW::step() {
  auto& entries = params_.entries();
  std::vector<Tensor> grads;
  double sq = 0.0;
  for (const auto& [name, var] : entries) {
    grads.push_back(var.grad());
    for (double g : grads.back().values()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const double scale = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].second.value_mut();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k] * scale;
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= cfg_.lr * (cfg_.weight_decay * p[k] + mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<int> sorted_union(const std::vector<std::pair<int, int>>& pairs, const std::vector<int>& extra) {
  std::set<int> rows(extra.begin(), extra.end());
  for (const auto& [k, g] : pairs) rows.insert(k);
  return {rows.begin(), rows.end()};
}

Tensor binarize(const Tensor& logits) {
  Tensor b(logits.shape());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = logits[i] > 0.0 ? 1.0 : 0.0;
  return b;
}

LossBundle clip_pair_loss(const VideoKNet& model, const Tensor& key_image, const Tensor& ref_image,
                          const FrameTargets& key_gt, const FrameTargets& ref_gt, const RunConfig& cfg) {
  const std::array<Tensor, 2> images{key_image, ref_image};
  const std::array<FrameTargets, 2> targets{key_gt, ref_gt};
  const VideoKNet::ClipOutput clip = model.forward_clip(images);
  const LossWeights& w = cfg.loss.weights;
  SegmentationTerms frame_terms = segmentation_losses(clip.frames[0].stages, key_gt, w, cfg.loss.dice_eps);
  Var cls = frame_terms.cls, ce = frame_terms.ce, dice = frame_terms.dice;
  if (cfg.loss.joint_seg) {
    SegmentationTerms r = segmentation_losses(clip.frames[1].stages, ref_gt, w, cfg.loss.dice_eps);
    cls = ag::add(cls, r.cls);
    ce = ag::add(ce, r.ce);
    dice = ag::add(dice, r.dice);
  }
  const std::vector<FrameTargets> tubes = make_tube_targets(targets);
  SegmentationTerms c = clip_segmentation_losses(clip.per_frame, tubes, w, cfg.loss.dice_eps);
  return combine_losses(ag::add(cls, c.cls), ag::add(ce, c.ce), ag::add(dice, c.dice), Var(), Var(), w);
}

}  // namespace

LossBundle pair_loss(const VideoKNet& model, const Tensor& key_image, const Tensor& ref_image,
                     const FrameTargets& key_gt, const FrameTargets& ref_gt, const RunConfig& cfg) {
  if (cfg.flags.clip_mode) return clip_pair_loss(model, key_image, ref_image, key_gt, ref_gt, cfg);

  const LossWeights& w = cfg.loss.weights;
  const FrameForward ref = model.forward_frame(ref_image, nullptr);
  const FrameForward key = model.forward_frame(key_image, cfg.flags.fuse ? &ref.last_input.kernels : nullptr);

  const SegmentationTerms seg_key = segmentation_losses(key.stages, key_gt, w, cfg.loss.dice_eps);
  Var cls = seg_key.cls, ce = seg_key.ce, dice = seg_key.dice;
  const int ls = model.link_stage();
  MatchResult ref_match;
  Tensor ref_masks;
  if (cfg.loss.joint_seg) {
    const SegmentationTerms seg_ref = segmentation_losses(ref.stages, ref_gt, w, cfg.loss.dice_eps);
    cls = ag::add(cls, seg_ref.cls);
    ce = ag::add(ce, seg_ref.ce);
    dice = ag::add(dice, seg_ref.dice);
    ref_match = seg_ref.matches[ls];
    ref_masks = seg_ref.full_masks[ls].value();
  } else {
    NoGradGuard guard;
    ref_masks = full_resolution_masks(ref.stages[ls], ref_gt.height, ref_gt.width).value();
    ref_match = hungarian_match(ref.stages[ls], ref_masks, ref_gt, w.matching());
  }

  Var track, aux;
  bool no_pos = true;
  if (cfg.flags.kae) {
    const MatchResult& key_match = seg_key.matches[ls];
    const TrackPairLabels labels =
        assign_track_pairs(binarize(seg_key.full_masks[ls].value()), binarize(ref_masks), key_gt, ref_gt, key_match,
                           ref_match, cfg.loss.pairs);
    if (!labels.positives.empty()) {
      const std::vector<int> key_rows = sorted_union(key_match.pairs, labels.key_samples);
      const std::vector<int> ref_rows = sorted_union(ref_match.pairs, labels.ref_samples);
      const Var kk = ag::gather_rows(key.stages[ls].kernels.kernels, key_rows);
      const Var kr = ag::gather_rows(ref.stages[ls].kernels.kernels, ref_rows);
      const KernelEmbeddings ek{model.embed(kk, kr), 0};
      const KernelEmbeddings er{model.embed(kr, kk), 1};
      const TrackPairLabels rl = labels.remapped(key_rows, ref_rows);
      const TrackLoss tl = track_contrastive_loss(ek, er, rl);
      track = tl.loss;
      no_pos = tl.no_positives;
      aux = track_aux_loss(ek, er, rl).loss;
    }
  }
  LossBundle b = combine_losses(cls, ce, dice, track, aux, w);
  b.no_positives = no_pos;
  return b;
}

namespace {

struct FrameCache {
  std::vector<std::vector<Tensor>> images;
  std::vector<std::vector<FrameTargets>> targets;
};

FrameCache build_cache(const Dataset& data) {
  FrameCache c;
  for (const auto& v : data.videos) {
    c.images.push_back(video_tensors(v));
    std::vector<FrameTargets> t;
    for (const auto& f : v.gt.frames) t.push_back(make_targets(f, data.classes));
    c.targets.push_back(std::move(t));
  }
  return c;
}

void check_classes(const ModelConfig& m, const ClassTable& classes) {
  if (classes.num_stuff() != m.num_stuff_classes || classes.num_things() != m.num_thing_classes) {
    throw DataError("class table mismatch: dataset has " + std::to_string(classes.num_stuff()) + " stuff / " +
                    std::to_string(classes.num_things()) + " thing classes, model expects " +
                    std::to_string(m.num_stuff_classes) + " / " + std::to_string(m.num_thing_classes));
  }
}

json step_json(const StepLog& s) {
  return {{"step", s.step}, {"total", s.total}, {"cls", s.cls},     {"ce", s.ce},
          {"dice", s.dice}, {"track", s.track}, {"aux", s.aux},     {"grad_norm", s.grad_norm},
          {"pairs_without_positives", s.pairs_without_positives}};
}

}  // namespace

TrainResult train(VideoKNet& model, const Dataset& data, const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  check_classes(cfg.model, data.classes);
  if (data.videos.empty() && cfg.optim.steps > 0) throw DataError("train: empty dataset");
  const auto start = std::chrono::steady_clock::now();
  const FrameCache cache = build_cache(data);
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 17);
  AdamW opt(model.params(), cfg.optim);
  TrainResult result;
  const int per_step = cfg.optim.batch_pairs * cfg.optim.num_refs;

  for (int step = 1; step <= cfg.optim.steps; ++step) {
    model.params().zero_grad();
    StepLog s;
    s.step = step;
    for (int b = 0; b < cfg.optim.batch_pairs; ++b) {
      const std::size_t v = rng.below(cache.images.size());
      const int len = static_cast<int>(cache.images[v].size());
      const int key = static_cast<int>(rng.below(static_cast<std::uint64_t>(len)));
      for (int r = 0; r < cfg.optim.num_refs; ++r) {
        const int ref = sample_reference_frame(len, key, cfg.optim.ref_window, rng).index;
        const auto diverge = [&](const std::string& why, double total) {
          s.total = total;
          if (!opts.divergence_dump_dir.empty()) {
            fs::create_directories(opts.divergence_dump_dir);
            std::ofstream os(opts.divergence_dump_dir / "divergence.json");
            os << json{{"step", step}, {"video", v}, {"key", key}, {"ref", ref}, {"reason", why}, {"config", cfg.to_json()}}
                      .dump(2)
               << '\n';
            save_checkpoint(opts.divergence_dump_dir / "diverged.ckpt", model, cfg, data.classes);
          }
          throw DivergenceError(why + " at step " + std::to_string(step));
        };
        LossBundle lb;
        try {
          lb = pair_loss(model, cache.images[v][key], cache.images[v][ref], cache.targets[v][key], cache.targets[v][ref],
                         cfg);
        } catch (const NonFiniteError& e) {
          diverge(std::string("non-finite activations (") + e.what() + ")", std::numeric_limits<double>::quiet_NaN());
        }
        const double total = lb.value(lb.total);
        if (!std::isfinite(total)) diverge("non-finite loss", total);
        ag::scale(lb.total, 1.0 / per_step).backward();
        s.total += total / per_step;
        s.cls += lb.value(lb.l_cls) / per_step;
        s.ce += lb.value(lb.l_ce) / per_step;
        s.dice += lb.value(lb.l_dice) / per_step;
        s.track += lb.value(lb.l_track) / per_step;
        s.aux += lb.value(lb.l_aux) / per_step;
        s.pairs_without_positives += lb.no_positives ? 1 : 0;
      }
    }
    s.grad_norm = opt.step();
    if (!std::isfinite(s.grad_norm)) throw DivergenceError("non-finite gradient at step " + std::to_string(step));
    for (const auto& [name, p] : model.params().entries())
      if (!p.value().all_finite()) throw DivergenceError("parameter '" + name + "' non-finite after step " + std::to_string(step));
    if (opts.log && (step % cfg.log_every == 0 || step == 1 || step == cfg.optim.steps))
      *opts.log << step_json(s).dump() << '\n';
    result.log.push_back(s);
  }
  model.params().zero_grad();

  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!result.log.empty()) {
    result.first_total = result.log.front().total;
    const std::size_t tail = std::min<std::size_t>(10, result.log.size());
    for (std::size_t i = result.log.size() - tail; i < result.log.size(); ++i) result.final_total += result.log[i].total;
    result.final_total /= static_cast<double>(tail);
  }
  result.manifest = {{"config", cfg.to_json()},
                     {"config_hash", cfg.hash()},
                     {"seed", cfg.seed},
                     {"steps", cfg.optim.steps},
                     {"schedule", "constant"},
                     {"first_total", result.first_total},
                     {"final_total", result.final_total},
                     {"final_losses", result.log.empty() ? json::object() : step_json(result.log.back())},
                     {"wall_seconds", result.wall_seconds}};
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation and rendering

std::vector<Tensor> video_tensors(const SyntheticVideo& v) {
  std::vector<Tensor> out;
  for (const auto& f : v.frames) out.push_back(image_to_tensor(f, v.height, v.width));
  return out;
}

VideoAnnotation to_annotation(const std::vector<FrameResult>& frames, const ClassTable& classes) {
  VideoAnnotation a;
  a.classes = classes;
  for (const auto& f : frames) a.frames.push_back(f.frame);
  return a;
}

EvalOutput evaluate(const VideoKNet& model, const Dataset& data, const RunConfig& cfg) {
  check_classes(model.config(), data.classes);
  MetricAccumulator acc(data.classes, cfg.metrics);
  EvalOutput out;
  for (const auto& v : data.videos) {
    const std::vector<Tensor> images = video_tensors(v);
    std::vector<FrameResult> pred = model.flags().clip_mode ? decode_clip(model, images, data.classes, cfg.tracker.stitch)
                                                            : step_video(model, images, data.classes, cfg.tracker);
    acc.add_video(to_annotation(pred, data.classes), v.gt);
    out.predictions.push_back(std::move(pred));
  }
  out.report = acc.report();
  out.report.config_hash = cfg.hash();
  return out;
}

std::array<std::uint8_t, 3> track_color(int track_id) {
  std::uint64_t z = static_cast<std::uint64_t>(track_id) * 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  // Keep every channel reasonably bright so ids stand out from the stuff palette.
  return {static_cast<std::uint8_t>(64 + (z & 0xbf)), static_cast<std::uint8_t>(64 + ((z >> 8) & 0xbf)),
          static_cast<std::uint8_t>(64 + ((z >> 16) & 0xbf))};
}

std::vector<std::uint8_t> render_overlay(const std::vector<std::uint8_t>& rgb, const PanopticFrame& pred,
                                         const ClassTable& classes) {
  if (rgb.size() != pred.size() * 3) throw DimensionError("render_overlay: image and map sizes differ");
  std::vector<std::uint8_t> out(rgb.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int sem = pred.semantic_ids[i];
    std::array<std::uint8_t, 3> c{0, 0, 0};
    if (pred.instance_ids[i] > 0) {
      c = track_color(pred.instance_ids[i]);
    } else if (classes.is_valid(sem)) {
      const auto g = static_cast<std::uint8_t>(40 + 60 * (sem % 3));
      c = {g, static_cast<std::uint8_t>(g / 2), static_cast<std::uint8_t>(255 - g)};
    }
    for (int k = 0; k < 3; ++k) out[i * 3 + k] = static_cast<std::uint8_t>((rgb[i * 3 + k] + 2 * c[k]) / 3);
  }
  return out;
}

void write_overlays(const SyntheticVideo& video, const std::vector<FrameResult>& pred, const ClassTable& classes,
                    const fs::path& out_dir, const std::string& config_hash) {
  fs::create_directories(out_dir);
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const auto img = render_overlay(video.frames.at(t), pred[t].frame, classes);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.ppm", t);
    std::ofstream os(out_dir / name, std::ios::binary);
    if (!os) throw DataError("cannot write " + (out_dir / name).string());
    os << "P6\n# vkn config " << config_hash << "\n" << video.width << ' ' << video.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  }
}

// ---------------------------------------------------------------------------
// Presets

std::vector<SceneSpec> dataset_preset(const std::string& name, int split) {
  std::vector<SceneSpec> specs;
  auto base = [&](std::uint64_t seed_base, int count) {
    for (int i = 0; i < count; ++i) {
      SceneSpec s;
      s.seed = seed_base + static_cast<std::uint64_t>(split) * 1000 + static_cast<std::uint64_t>(i);
      specs.push_back(s);
    }
  };
  if (name == "overfit") {
    base(100, 8);
    for (auto& s : specs) {
      s.num_things = 2;
      s.motion_magnitude = 1.5;
    }
  } else if (name == "fast_motion") {
    base(200, 8);
    for (auto& s : specs) {
      s.num_things = 3;
      s.min_size = 10;
      s.max_size = 16;
      s.motion_magnitude = 6.0;
      s.entry_exit = true;
    }
  } else if (name == "occlusion") {
    base(300, 8);
    for (auto& s : specs) {
      s.num_things = 3;
      s.motion_magnitude = 2.5;
      s.occlusion = true;
    }
  } else if (name == "static") {
    base(400, 4);
    for (auto& s : specs) {
      s.num_frames = 5;
      s.num_things = 3;
      s.min_size = 10;
      s.max_size = 14;
      s.motion_magnitude = 0.0;
    }
  } else if (name == "crossing") {
    SceneSpec s;
    s.seed = 500 + static_cast<std::uint64_t>(split);
    s.num_frames = 12;
    s.occlusion = true;
    s.stuff_layout = 0;
    s.scripted = {{3, 8, 24, 14, 14, 3 * 256, 0}, {3, 42, 26, 14, 14, -3 * 256, 0}};
    specs.push_back(s);
  } else {
    throw ConfigError("unknown dataset preset '" + name + "' (overfit, fast_motion, occlusion, static, crossing)");
  }
  return specs;
}

Dataset make_dataset(const std::vector<SceneSpec>& specs) {
  Dataset ds;
  ds.classes = ClassTable::synthetic();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    SyntheticVideo v = generate_video(specs[i], ds.classes);
    char name[32];
    std::snprintf(name, sizeof name, "video_%04zu", i);
    v.name = name;
    ds.videos.push_back(std::move(v));
  }
  return ds;
}

RunConfig run_preset(const std::string& name) {
  RunConfig c;
  if (name == "default") return c;
  if (name == "overfit") {
    c.optim.lr = 2e-3;
    c.optim.steps = 300;
    c.optim.batch_pairs = 2;
    c.optim.grad_clip = 5.0;
    return c;
  }
  if (name == "ablation") {
    c.optim.lr = 2e-3;
    c.optim.steps = 250;
    c.optim.batch_pairs = 2;
    c.optim.grad_clip = 5.0;
    return c;
  }
  throw ConfigError("unknown run preset '" + name + "' (default, overfit, ablation)");
}

AblationPreset ablation_preset(const std::string& name) {
  AblationPreset p;
  p.name = name;
  p.base_run = "ablation";
  if (name == "kae") {
    p.train_data = p.eval_data = "fast_motion";
    p.variants = {{"baseline", {{"flags", {{"kae", false}, {"link", false}, {"fuse", false}}}}},
                  {"kae", {{"flags", {{"kae", true}, {"link", false}, {"fuse", false}}}}},
                  {"kae_link", {{"flags", {{"kae", true}, {"link", true}, {"fuse", false}}}}}};
  } else if (name == "fuse_update") {
    p.train_data = p.eval_data = "occlusion";
    p.variants = {{"fuse_with_update", {{"flags", {{"fuse", true}, {"fuse_update", true}}}}},
                  {"fuse_without_update", {{"flags", {{"fuse", true}, {"fuse_update", false}}}}}};
  } else if (name == "link_stage") {
    p.train_data = p.eval_data = "fast_motion";
    for (int s = 0; s < 3; ++s)
      p.variants.push_back({"link_stage_" + std::to_string(s), {{"flags", {{"link_stage", s}}}}});
  } else if (name == "joint") {
    p.train_data = p.eval_data = "fast_motion";
    p.variants = {{"joint", {{"loss", {{"joint_seg", true}}}}}, {"key_only", {{"loss", {{"joint_seg", false}}}}}};
  } else if (name == "sampling") {
    p.train_data = p.eval_data = "fast_motion";
    p.variants = {{"gt_matched", {{"loss", {{"dense_sampling", false}}}}},
                  {"dense", {{"loss", {{"dense_sampling", true}}}}}};
  } else {
    throw ConfigError("unknown ablation preset '" + name + "' (kae, fuse_update, link_stage, joint, sampling)");
  }
  return p;
}

std::vector<AblationRow> run_ablation(const AblationPreset& preset, const AblationOptions& opts) {
  const Dataset train_set = make_dataset(dataset_preset(preset.train_data, 0));
  const Dataset eval_set = make_dataset(dataset_preset(preset.eval_data, 1));
  std::vector<AblationRow> rows;
  for (const auto& variant : preset.variants) {
    for (std::uint64_t seed : opts.seeds) {
      RunConfig cfg = run_preset(preset.base_run);
      cfg.merge(variant.overrides);
      if (!opts.extra_overrides.is_null()) cfg.merge(opts.extra_overrides);
      cfg.seed = seed;
      if (opts.steps >= 0) cfg.optim.steps = opts.steps;
      cfg.validate();
      auto model = build_model(cfg);
      const TrainResult tr = train(*model, train_set, cfg);
      AblationRow row;
      row.variant = variant.name;
      row.seed = seed;
      row.report = evaluate(*model, eval_set, cfg).report;
      row.final_loss = tr.final_total;
      row.wall_seconds = tr.wall_seconds;
      if (opts.on_row) opts.on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  auto cell = [](const std::vector<const AblationRow*>& g, auto get) {
    double mean = 0.0;
    for (const auto* r : g) mean += get(*r);
    mean /= static_cast<double>(g.size());
    double var = 0.0;
    for (const auto* r : g) var += (get(*r) - mean) * (get(*r) - mean);
    const double sd = g.size() > 1 ? std::sqrt(var / static_cast<double>(g.size() - 1)) : 0.0;
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << mean << " ± " << sd;
    return os.str();
  };
  std::ostringstream os;
  os << "| variant | runs | STQ | AQ | SQ | VPQ | mIoU | final loss |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& name : order) {
    const auto& g = groups[name];
    os << "| " << name << " | " << g.size() << " | " << cell(g, [](const AblationRow& r) { return r.report.stq; })
       << " | " << cell(g, [](const AblationRow& r) { return r.report.aq; }) << " | "
       << cell(g, [](const AblationRow& r) { return r.report.sq; }) << " | "
       << cell(g, [](const AblationRow& r) { return r.report.vpq.vpq; }) << " | "
       << cell(g, [](const AblationRow& r) { return r.report.miou; }) << " | "
       << cell(g, [](const AblationRow& r) { return r.final_loss; }) << " |\n";
  }
  return os.str();
}

}  // namespace vkn
