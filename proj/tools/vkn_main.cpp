// vkn: command-line front end (gen-data, train, evaluate, track, render, ablate).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vkn/config.hpp"
#include "vkn/errors.hpp"
#include "vkn/harness.hpp"
#include "vkn/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

// Relative output paths land under $VKN_OUTPUT_ROOT when it is set.
fs::path output_path(const std::string& p) {
  const fs::path path(p);
  const char* root = std::getenv("VKN_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || path.is_absolute()) return path;
  return fs::path(root) / path;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw vkn::DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

struct ConfigArgs {
  std::string config_file;
  std::string preset = "default";
  std::vector<std::string> sets;
  int steps = -1;
  double lr = -1.0;
  long long seed = -1;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON run configuration");
    app->add_option("--preset", preset, "run preset: default, overfit, ablation")->capture_default_str();
    app->add_option("--set", sets, "override, e.g. --set optim.lr=0.001 (value parsed as JSON)");
    app->add_option("--steps", steps, "override optim.steps");
    app->add_option("--lr", lr, "override optim.lr");
    app->add_option("--seed", seed, "override seed");
  }

  vkn::RunConfig resolve() const {
    vkn::RunConfig cfg = vkn::run_preset(preset);
    if (!config_file.empty()) {
      std::ifstream is(config_file);
      if (!is) throw vkn::ConfigError("cannot open configuration " + config_file);
      try {
        cfg.merge(json::parse(is));
      } catch (const json::parse_error& e) {
        throw vkn::ConfigError(config_file + ": " + e.what());
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw vkn::ConfigError("--set expects key=value, got '" + s + "'");
      const std::string key = s.substr(0, eq);
      json value;
      try {
        value = json::parse(s.substr(eq + 1));
      } catch (const json::parse_error&) {
        value = s.substr(eq + 1);
      }
      json patch = value;
      std::string path = key;
      for (auto dot = path.rfind('.'); dot != std::string::npos; dot = path.rfind('.')) {
        patch = json{{path.substr(dot + 1), patch}};
        path = path.substr(0, dot);
      }
      cfg.merge(json{{path, patch}});
    }
    if (steps >= 0) cfg.optim.steps = steps;
    if (lr > 0.0) cfg.optim.lr = lr;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.validate();
    return cfg;
  }
};

struct Loaded {
  vkn::RunConfig cfg;
  std::unique_ptr<vkn::VideoKNet> model;
};

// Loads a checkpoint; a --config that disagrees with the embedded hash is refused unless forced.
Loaded load_model(const std::string& ckpt_path, const std::string& config_file, bool force) {
  const vkn::Checkpoint ck = vkn::read_checkpoint(ckpt_path);
  Loaded l;
  l.cfg = ck.config();
  if (!config_file.empty()) {
    const vkn::RunConfig given = vkn::load_config(config_file);
    if (given.hash() != ck.config_hash()) {
      if (!force) {
        throw vkn::ConfigError("config hash " + given.hash() + " does not match checkpoint " + ck.config_hash() +
                               " (use --force to override)");
      }
      std::cerr << "warning: config hash mismatch ignored (--force)\n";
      l.cfg = given;
    }
  }
  l.model = vkn::build_model(l.cfg);
  vkn::load_params(*l.model, ck);
  return l;
}

int cmd_gen_data(const std::string& preset, int split, const std::string& spec_file, const std::string& out) {
  std::vector<vkn::SceneSpec> specs;
  if (!spec_file.empty()) {
    std::ifstream is(spec_file);
    if (!is) throw vkn::ConfigError("cannot open " + spec_file);
    const json j = json::parse(is);
    for (const auto& s : j.is_array() ? j : json::array({j})) specs.push_back(vkn::SceneSpec::from_json(s));
  } else {
    specs = vkn::dataset_preset(preset, split);
  }
  const fs::path dir = output_path(out);
  const vkn::Dataset ds = vkn::write_dataset(specs, dir);
  json spec_list = json::array();
  for (const auto& s : specs) spec_list.push_back(s.to_json());
  write_json(dir / "specs.json", spec_list);
  std::cout << "wrote " << ds.videos.size() << " videos to " << dir.string() << '\n';
  return 0;
}

int cmd_train(const ConfigArgs& args, const std::string& data, const std::string& out) {
  vkn::RunConfig cfg = args.resolve();
  if (!data.empty()) cfg.data.train_dir = data;
  if (cfg.data.train_dir.empty()) throw vkn::ConfigError("no training data: pass --data or set data.train_dir");
  const vkn::Dataset ds = vkn::read_dataset(cfg.data.train_dir);
  const fs::path dir = output_path(out);
  fs::create_directories(dir);
  write_json(dir / "config.json", cfg.to_json());
  auto model = vkn::build_model(cfg);
  std::ofstream log(dir / "train_log.jsonl");
  vkn::TrainOptions opts;
  opts.log = &log;
  opts.divergence_dump_dir = dir / "divergence";
  const vkn::TrainResult r = vkn::train(*model, ds, cfg, opts);
  vkn::save_checkpoint(dir / "model.ckpt", *model, cfg, ds.classes);
  write_json(dir / "manifest.json", r.manifest);
  std::cout << "steps " << cfg.optim.steps << "  loss " << r.first_total << " -> " << r.final_total << "  ("
            << r.wall_seconds << " s)  config " << cfg.hash() << '\n';
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data, const std::string& config_file, bool force,
                 const std::string& out) {
  Loaded l = load_model(ckpt, config_file, force);
  const vkn::Dataset ds = vkn::read_dataset(data.empty() ? l.cfg.data.eval_dir : data);
  const vkn::EvalOutput ev = vkn::evaluate(*l.model, ds, l.cfg);
  const json j = vkn::to_json(ev.report);
  if (!out.empty()) write_json(output_path(out), j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_track(const std::string& ckpt, const std::string& data, const std::string& config_file, bool force,
              const std::string& out) {
  Loaded l = load_model(ckpt, config_file, force);
  const vkn::Dataset ds = vkn::read_dataset(data);
  const vkn::EvalOutput ev = vkn::evaluate(*l.model, ds, l.cfg);
  const fs::path dir = output_path(out);
  for (std::size_t v = 0; v < ds.videos.size(); ++v) {
    const fs::path vdir = dir / ds.videos[v].name;
    fs::create_directories(vdir);
    std::ofstream log(vdir / "tracks.jsonl");
    for (std::size_t t = 0; t < ev.predictions[v].size(); ++t) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%04zu.pan", t);
      vkn::write_pan_file(vdir / name, ev.predictions[v][t].frame);
      vkn::write_track_log(log, ev.predictions[v][t].log);
    }
  }
  write_json(dir / "report.json", vkn::to_json(ev.report));
  std::cout << "tracked " << ds.videos.size() << " videos into " << dir.string() << '\n';
  return 0;
}

int cmd_render(const std::string& ckpt, const std::string& data, const std::string& video, const std::string& out) {
  Loaded l = load_model(ckpt, "", false);
  vkn::Dataset ds = vkn::read_dataset(data);
  if (!video.empty()) {
    std::erase_if(ds.videos, [&](const vkn::SyntheticVideo& v) { return v.name != video; });
    if (ds.videos.empty()) throw vkn::DataError("no video named '" + video + "' in " + data);
  }
  const vkn::EvalOutput ev = vkn::evaluate(*l.model, ds, l.cfg);
  const fs::path dir = output_path(out);
  for (std::size_t v = 0; v < ds.videos.size(); ++v)
    vkn::write_overlays(ds.videos[v], ev.predictions[v], ds.classes, dir / ds.videos[v].name, l.cfg.hash());
  std::cout << "rendered " << ds.videos.size() << " videos into " << dir.string() << '\n';
  return 0;
}

int cmd_ablate(const std::string& preset, const std::vector<std::uint64_t>& seeds, int steps, const std::string& out) {
  const vkn::AblationPreset p = vkn::ablation_preset(preset);
  vkn::AblationOptions opts;
  if (!seeds.empty()) opts.seeds = seeds;
  opts.steps = steps;
  json rows = json::array();
  opts.on_row = [&](const vkn::AblationRow& r) {
    std::cerr << r.variant << " seed " << r.seed << ": STQ " << r.report.stq << " AQ " << r.report.aq << " SQ "
              << r.report.sq << " (" << r.wall_seconds << " s)\n";
    rows.push_back({{"variant", r.variant}, {"seed", r.seed}, {"report", vkn::to_json(r.report)}});
  };
  const auto result = vkn::run_ablation(p, opts);
  const std::string table = vkn::ablation_table(result);
  std::cout << table;
  if (!out.empty()) {
    const fs::path dir = output_path(out);
    fs::create_directories(dir);
    std::ofstream(dir / (preset + ".md")) << table;
    write_json(dir / (preset + ".json"), rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vkn: video kernel network training, tracking and evaluation"};
  app.require_subcommand(1);

  std::string preset = "overfit", spec_file, out, data, ckpt, config_file, video;
  int split = 0;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen->add_option("--preset", preset, "overfit, fast_motion, occlusion, static, crossing")->capture_default_str();
  gen->add_option("--split", split, "seed offset; 0 = train, 1 = held out")->capture_default_str();
  gen->add_option("--spec", spec_file, "JSON scene spec or list of specs (overrides --preset)");
  gen->add_option("--out", out, "output directory")->required();

  ConfigArgs train_args;
  auto* tr = app.add_subcommand("train", "train a model");
  train_args.attach(tr);
  tr->add_option("--data", data, "training dataset directory");
  tr->add_option("--out", out, "run directory")->required();

  auto* ev = app.add_subcommand("evaluate", "compute metrics for a checkpoint");
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("--data", data, "dataset directory");
  ev->add_option("--config", config_file, "expected configuration (hash-checked)");
  ev->add_flag("--force", force, "accept a configuration whose hash differs from the checkpoint");
  ev->add_option("--out", out, "report JSON path");

  auto* tk = app.add_subcommand("track", "write predicted id maps and track logs");
  tk->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  tk->add_option("--data", data, "dataset directory")->required();
  tk->add_option("--config", config_file, "expected configuration (hash-checked)");
  tk->add_flag("--force", force, "accept a configuration whose hash differs from the checkpoint");
  tk->add_option("--out", out, "output directory")->required();

  auto* rd = app.add_subcommand("render", "write colour overlays per track id");
  rd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  rd->add_option("--data", data, "dataset directory")->required();
  rd->add_option("--video", video, "only this video");
  rd->add_option("--out", out, "output directory")->required();

  std::string ablation = "kae";
  std::vector<std::uint64_t> seeds;
  int steps = -1;
  auto* ab = app.add_subcommand("ablate", "run an ablation preset and print a comparison table");
  ab->add_option("--preset", ablation, "kae, fuse_update, link_stage, joint, sampling")->capture_default_str();
  ab->add_option("--seeds", seeds, "seeds (default 0..4)")->delimiter(',');
  ab->add_option("--steps", steps, "training steps per run");
  ab->add_option("--out", out, "directory for the table and per-run reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_gen_data(preset, split, spec_file, out);
    if (*tr) return cmd_train(train_args, data, out);
    if (*ev) return cmd_evaluate(ckpt, data, config_file, force, out);
    if (*tk) return cmd_track(ckpt, data, config_file, force, out);
    if (*rd) return cmd_render(ckpt, data, video, out);
    if (*ab) return cmd_ablate(ablation, seeds, steps, out);
  } catch (const vkn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const vkn::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const vkn::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
