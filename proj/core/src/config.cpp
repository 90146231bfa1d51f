#include "vkn/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

#include "vkn/errors.hpp"

namespace vkn {

namespace {

using nlohmann::json;

// Single list of every configurable field; section "" means top level.
template <class F>
void visit_fields(RunConfig& c, F&& f) {
  f("model", "num_thing_kernels", c.model.num_thing_kernels);
  f("model", "num_stuff_classes", c.model.num_stuff_classes);
  f("model", "num_thing_classes", c.model.num_thing_classes);
  f("model", "channels", c.model.channels);
  f("model", "embed_dim", c.model.embed_dim);
  f("model", "stages", c.model.stages);
  f("model", "heads", c.model.heads);
  f("model", "ffn_hidden", c.model.ffn_hidden);
  f("model", "backbone_widths", c.model.backbone_widths);

  f("flags", "kae", c.flags.kae);
  f("flags", "link", c.flags.link);
  f("flags", "fuse", c.flags.fuse);
  f("flags", "fuse_update", c.flags.fuse_update);
  f("flags", "clip_mode", c.flags.clip_mode);
  f("flags", "link_stage", c.flags.link_stage);
  f("flags", "embed_pre_link", c.flags.embed_pre_link);

  f("loss", "cls", c.loss.weights.cls);
  f("loss", "ce", c.loss.weights.ce);
  f("loss", "dice", c.loss.weights.dice);
  f("loss", "track", c.loss.weights.track);
  f("loss", "aux", c.loss.weights.aux);
  f("loss", "dice_eps", c.loss.dice_eps);
  f("loss", "pos_iou", c.loss.pairs.pos_iou);
  f("loss", "neg_iou", c.loss.pairs.neg_iou);
  f("loss", "dense_sampling", c.loss.pairs.dense);
  f("loss", "joint_seg", c.loss.joint_seg);

  f("tracker", "score_thresh", c.tracker.stitch.score_thresh);
  f("tracker", "overlap_keep", c.tracker.stitch.overlap_keep);
  f("tracker", "match_thresh", c.tracker.assoc.match_thresh);
  f("tracker", "momentum", c.tracker.assoc.momentum);
  f("tracker", "ttl", c.tracker.assoc.ttl);

  f("optim", "lr", c.optim.lr);
  f("optim", "weight_decay", c.optim.weight_decay);
  f("optim", "beta1", c.optim.beta1);
  f("optim", "beta2", c.optim.beta2);
  f("optim", "eps", c.optim.eps);
  f("optim", "grad_clip", c.optim.grad_clip);
  f("optim", "steps", c.optim.steps);
  f("optim", "batch_pairs", c.optim.batch_pairs);
  f("optim", "ref_window", c.optim.ref_window);
  f("optim", "num_refs", c.optim.num_refs);

  f("metrics", "windows", c.metrics.windows);
  f("metrics", "mvc_clips", c.metrics.mvc_clips);

  f("data", "train_dir", c.data.train_dir);
  f("data", "eval_dir", c.data.eval_dir);

  f("", "seed", c.seed);
  f("", "deterministic", c.deterministic);
  f("", "log_every", c.log_every);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  flags.validate(model.stages);
  if (optim.lr <= 0.0) throw ConfigError("optim.lr must be positive");
  if (optim.weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
  if (optim.beta1 < 0.0 || optim.beta1 >= 1.0 || optim.beta2 < 0.0 || optim.beta2 >= 1.0)
    throw ConfigError("optim.beta1/beta2 must lie in [0, 1)");
  if (optim.steps < 0) throw ConfigError("optim.steps must be >= 0");
  if (optim.batch_pairs < 1) throw ConfigError("optim.batch_pairs must be >= 1");
  if (optim.ref_window < 1) throw ConfigError("optim.ref_window must be >= 1");
  if (optim.num_refs < 1) throw ConfigError("optim.num_refs must be >= 1");
  if (optim.grad_clip < 0.0) throw ConfigError("optim.grad_clip must be >= 0");
  if (loss.dice_eps < 0.0) throw ConfigError("loss.dice_eps must be >= 0");
  if (loss.pairs.neg_iou > loss.pairs.pos_iou) throw ConfigError("loss.neg_iou must not exceed loss.pos_iou");
  if (tracker.assoc.ttl < 0) throw ConfigError("tracker.ttl must be >= 0");
  if (tracker.assoc.momentum < 0.0 || tracker.assoc.momentum > 1.0) throw ConfigError("tracker.momentum must be in [0, 1]");
  for (int k : metrics.windows)
    if (k < 0) throw ConfigError("metrics.windows entries must be >= 0");
  for (int c : metrics.mvc_clips)
    if (c < 1) throw ConfigError("metrics.mvc_clips entries must be >= 1");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
}

json RunConfig::to_json() const {
  json j = json::object();
  RunConfig copy = *this;
  visit_fields(copy, [&](const std::string& section, const std::string& key, auto& field) {
    if (section.empty()) {
      j[key] = field;
    } else {
      j[section][key] = field;
    }
  });
  return j;
}

void RunConfig::merge(const json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  std::map<std::string, std::function<void(const json&)>> setters;
  std::map<std::string, bool> sections;
  visit_fields(*this, [&](const std::string& section, const std::string& key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    sections[section] = true;
    setters[section.empty() ? key : section + "." + key] = [&field](const json& v) { field = v.get<T>(); };
  });
  auto apply = [&](const std::string& path, const json& v) {
    const auto it = setters.find(path);
    if (it == setters.end()) throw ConfigError("unknown configuration key '" + path + "'");
    try {
      it->second(v);
    } catch (const json::exception& e) {
      throw ConfigError("configuration key '" + path + "': " + e.what());
    }
  };
  for (const auto& [key, value] : j.items()) {
    if (sections.count(key) && !key.empty()) {
      if (!value.is_object()) throw ConfigError("configuration section '" + key + "' must be an object");
      for (const auto& [sub, v] : value.items()) apply(key + "." + sub, v);
    } else {
      apply(key, value);
    }
  }
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.merge(j);
  c.validate();
  return c;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const { return fnv1a_hex(to_json().dump()); }

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open configuration " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace vkn
