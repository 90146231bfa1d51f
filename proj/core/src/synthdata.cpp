#include "vkn/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "vkn/errors.hpp"

namespace vkn {

namespace fs = std::filesystem;

namespace {

constexpr int kFix = 256;  // fixed-point scale for positions and velocities

struct Object {
  int class_id;
  int w, h;
  int x, y;    // 1/256 px
  int vx, vy;  // 1/256 px per frame
  std::array<int, 3> tint;
};

std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

int rand_between(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
int pos_mod(int a, int m) { return ((a % m) + m) % m; }

// Reflect a coordinate into [0, hi]; flips the velocity on each bounce.
void bounce(int& p, int& v, int hi) {
  if (hi <= 0) {
    p = 0;
    v = 0;
    return;
  }
  for (int guard = 0; guard < 8 && (p < 0 || p > hi); ++guard) {
    if (p < 0) {
      p = -p;
      v = -v;
    } else {
      p = 2 * hi - p;
      v = -v;
    }
  }
  p = std::clamp(p, 0, hi);
}

struct Box {
  int x0, y0, x1, y1;  // pixel bounds, exclusive end
};

// Positions of every object for every frame, as top-left pixels.
std::vector<std::vector<Box>> trajectories(std::vector<Object> objs, const SceneSpec& spec) {
  std::vector<std::vector<Box>> out(static_cast<std::size_t>(spec.num_frames));
  for (int t = 0; t < spec.num_frames; ++t) {
    for (Object& o : objs) {
      int x = o.x;
      if (spec.entry_exit) x = pos_mod(o.x + o.w * kFix, (spec.width + o.w) * kFix) - o.w * kFix;
      const int px = floor_div(x, kFix);
      const int py = floor_div(o.y, kFix);
      out[t].push_back({px, py, px + o.w, py + o.h});
      o.x += o.vx;
      o.y += o.vy;
      if (!spec.entry_exit) bounce(o.x, o.vx, (spec.width - o.w) * kFix);
      bounce(o.y, o.vy, (spec.height - o.h) * kFix);
    }
  }
  return out;
}

bool overlaps(const Box& a, const Box& b) { return a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1; }

bool any_overlap(const std::vector<std::vector<Box>>& traj) {
  for (const auto& frame : traj)
    for (std::size_t i = 0; i < frame.size(); ++i)
      for (std::size_t j = i + 1; j < frame.size(); ++j)
        if (overlaps(frame[i], frame[j])) return true;
  return false;
}

bool inside_shape(int class_id, const Box& b, int px, int py) {
  if (px < b.x0 || px >= b.x1 || py < b.y0 || py >= b.y1) return false;
  if (class_id != 4) return true;
  // Ellipse inscribed in the box, evaluated on doubled coordinates.
  const long long w = b.x1 - b.x0, h = b.y1 - b.y0;
  const long long dx = 2LL * px - (2LL * b.x0 + w - 1);
  const long long dy = 2LL * py - (2LL * b.y0 + h - 1);
  return dx * dx * h * h + dy * dy * w * w <= w * w * h * h;
}

struct Layout {
  StuffLayout kind;
  int a = 0, b = 0, c = 0, d = 0;
};

Layout make_layout(const SceneSpec& spec, Rng& rng) {
  Layout l;
  const int kind = spec.stuff_layout >= 0 ? spec.stuff_layout : static_cast<int>(rng.below(3));
  l.kind = static_cast<StuffLayout>(kind);
  switch (l.kind) {
    case StuffLayout::kHorizon:
      l.a = spec.height * rand_between(rng, 3, 5) / 10;
      l.b = l.a + spec.height * rand_between(rng, 1, 2) / 10;
      break;
    case StuffLayout::kStripes:
      l.a = std::max(4, spec.width / rand_between(rng, 3, 6));
      l.b = static_cast<int>(rng.below(3));
      break;
    case StuffLayout::kRadial: {
      l.a = spec.width / 2 + rand_between(rng, -spec.width / 8, spec.width / 8);
      l.b = spec.height / 2 + rand_between(rng, -spec.height / 8, spec.height / 8);
      const int m = std::min(spec.height, spec.width);
      l.c = m * rand_between(rng, 2, 3) / 10;
      l.d = l.c + m * rand_between(rng, 2, 3) / 10;
      break;
    }
  }
  return l;
}

int stuff_at(const Layout& l, int x, int y) {
  switch (l.kind) {
    case StuffLayout::kHorizon:
      return y < l.a ? 0 : (y < l.b ? 2 : 1);
    case StuffLayout::kStripes:
      return (x / l.a + l.b) % 3;
    case StuffLayout::kRadial: {
      const long long dx = x - l.a, dy = y - l.b;
      const long long d2 = dx * dx + dy * dy;
      if (d2 < static_cast<long long>(l.c) * l.c) return 2;
      return d2 < static_cast<long long>(l.d) * l.d ? 1 : 0;
    }
  }
  return 0;
}

constexpr std::array<std::array<int, 3>, 5> kBaseColor{{
    {110, 160, 230},  // sky
    {100, 100, 100},  // road
    {50, 140, 60},    // vegetation
    {210, 50, 40},    // car
    {230, 200, 60},   // person
}};

std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u16(std::vector<std::uint8_t>& buf, std::uint16_t v) {
  buf.push_back(static_cast<std::uint8_t>(v & 0xff));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

class Reader {
 public:
  Reader(const fs::path& path, const std::vector<std::uint8_t>& buf) : path_(path), buf_(buf) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  void magic(const char (&m)[5]) {
    need(4, "magic");
    if (!std::equal(m, m + 4, buf_.begin() + static_cast<std::ptrdiff_t>(pos_))) fail("bad magic, expected " + std::string(m, 4));
    pos_ += 4;
  }
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > buf_.size()) fail(std::string("truncated while reading ") + what);
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) { pos_ += n; }
  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError(path_.string() + " at offset " + std::to_string(pos_) + ": " + msg);
  }
  void version() {
    const std::size_t at = pos_;
    const std::uint32_t v = u32("version");
    if (v != kDatasetVersion) {
      throw VersionError(path_.string() + " at offset " + std::to_string(at) + ": format version " + std::to_string(v) +
                         ", expected " + std::to_string(kDatasetVersion));
    }
  }
  void done() const {
    if (pos_ != buf_.size()) fail("trailing bytes");
  }

 private:
  const fs::path& path_;
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

std::string index_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d", prefix, i);
  return buf;
}

}  // namespace

void SceneSpec::validate() const {
  if (num_frames < 1) throw ConfigError("scene: num_frames must be >= 1");
  if (height < 8 || width < 8) throw ConfigError("scene: canvas must be at least 8x8");
  if (num_things < 0) throw ConfigError("scene: num_things must be >= 0");
  if (min_size < 2 || max_size < min_size) throw ConfigError("scene: invalid size range");
  if (max_size > std::min(height, width)) throw ConfigError("scene: max_size exceeds canvas");
  if (motion_magnitude < 0.0) throw ConfigError("scene: motion_magnitude must be >= 0");
  if (stuff_layout < -1 || stuff_layout > 2) throw ConfigError("scene: stuff_layout must be -1, 0, 1 or 2");
  if (max_retries < 1) throw ConfigError("scene: max_retries must be >= 1");
  for (const auto& s : scripted) {
    if (s.class_id != 3 && s.class_id != 4) throw ConfigError("scene: scripted object class must be 3 or 4");
    if (s.w < 1 || s.h < 1) throw ConfigError("scene: scripted object size must be positive");
  }
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& s : scripted)
    objs.push_back({{"class_id", s.class_id}, {"x", s.x}, {"y", s.y}, {"w", s.w}, {"h", s.h}, {"vx", s.vx}, {"vy", s.vy}});
  return {{"seed", seed},
          {"num_frames", num_frames},
          {"height", height},
          {"width", width},
          {"num_things", num_things},
          {"min_size", min_size},
          {"max_size", max_size},
          {"motion_magnitude", motion_magnitude},
          {"occlusion", occlusion},
          {"entry_exit", entry_exit},
          {"stuff_layout", stuff_layout},
          {"max_retries", max_retries},
          {"scripted", objs}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  for (const auto& [k, v] : j.items()) {
    if (k == "seed") s.seed = v.get<std::uint64_t>();
    else if (k == "num_frames") s.num_frames = v.get<int>();
    else if (k == "height") s.height = v.get<int>();
    else if (k == "width") s.width = v.get<int>();
    else if (k == "num_things") s.num_things = v.get<int>();
    else if (k == "min_size") s.min_size = v.get<int>();
    else if (k == "max_size") s.max_size = v.get<int>();
    else if (k == "motion_magnitude") s.motion_magnitude = v.get<double>();
    else if (k == "occlusion") s.occlusion = v.get<bool>();
    else if (k == "entry_exit") s.entry_exit = v.get<bool>();
    else if (k == "stuff_layout") s.stuff_layout = v.get<int>();
    else if (k == "max_retries") s.max_retries = v.get<int>();
    else if (k == "scripted") {
      for (const auto& o : v)
        s.scripted.push_back({o.at("class_id").get<int>(), o.at("x").get<int>(), o.at("y").get<int>(),
                              o.at("w").get<int>(), o.at("h").get<int>(), o.value("vx", 0), o.value("vy", 0)});
    } else {
      throw ConfigError("scene: unknown key '" + k + "'");
    }
  }
  return s;
}

SyntheticVideo generate_video(const SceneSpec& spec, const ClassTable& classes) {
  spec.validate();
  if (!(classes == ClassTable::synthetic())) throw ConfigError("generate_video: only the synthetic class table is supported");
  Rng rng(spec.seed);
  const Layout layout = make_layout(spec, rng);
  const std::uint64_t texture_seed = mix(spec.seed ^ 0x5eedULL);

  std::vector<Object> objs;
  std::vector<std::vector<Box>> traj;
  if (!spec.scripted.empty()) {
    for (const auto& s : spec.scripted)
      objs.push_back({s.class_id, s.w, s.h, s.x * kFix, s.y * kFix, s.vx, s.vy, {0, 0, 0}});
    traj = trajectories(objs, spec);
    if (!spec.occlusion && any_overlap(traj)) throw DataError("scripted scene overlaps but occlusion is disabled");
  } else {
    const int vmax = static_cast<int>(std::lround(spec.motion_magnitude * kFix));
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt >= spec.max_retries) {
        throw DataError("could not place " + std::to_string(spec.num_things) + " objects without overlap after " +
                        std::to_string(spec.max_retries) + " attempts");
      }
      objs.clear();
      for (int i = 0; i < spec.num_things; ++i) {
        Object o{};
        o.class_id = 3 + static_cast<int>(rng.below(2));
        o.w = rand_between(rng, spec.min_size, spec.max_size);
        o.h = rand_between(rng, spec.min_size, spec.max_size);
        o.x = rand_between(rng, 0, spec.width - o.w) * kFix;
        o.y = rand_between(rng, 0, spec.height - o.h) * kFix;
        o.vx = rand_between(rng, -vmax, vmax);
        o.vy = rand_between(rng, -vmax, vmax);
        for (int& c : o.tint) c = rand_between(rng, -20, 20);
        objs.push_back(o);
      }
      traj = trajectories(objs, spec);
      if (spec.occlusion || !any_overlap(traj)) break;
    }
  }

  SyntheticVideo v;
  v.height = spec.height;
  v.width = spec.width;
  v.gt.classes = classes;
  for (int t = 0; t < spec.num_frames; ++t) {
    PanopticFrame f(spec.height, spec.width, 0);
    f.frame_index = t;
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(spec.height) * spec.width * 3);
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        int sem = stuff_at(layout, x, y);
        int inst = 0;
        std::array<int, 3> color = kBaseColor[sem];
        const int noise = static_cast<int>(mix(texture_seed ^ (static_cast<std::uint64_t>(y) << 20) ^ x) % 21) - 10;
        for (int& c : color) c += noise;
        // Later objects are drawn on top.
        for (std::size_t i = objs.size(); i-- > 0;) {
          const Box& b = traj[t][i];
          if (!inside_shape(objs[i].class_id, b, x, y)) continue;
          sem = objs[i].class_id;
          inst = static_cast<int>(i) + 1;
          const int checker = (((x - b.x0) / 4 + (y - b.y0) / 4) % 2) ? 20 : -20;
          for (int c = 0; c < 3; ++c) color[c] = kBaseColor[sem][c] + objs[i].tint[c] + checker;
          break;
        }
        f.semantic(y, x) = sem;
        f.instance(y, x) = inst;
        const std::size_t at = (static_cast<std::size_t>(y) * spec.width + x) * 3;
        for (int c = 0; c < 3; ++c) rgb[at + c] = clamp8(color[c]);
      }
    }
    v.gt.frames.push_back(std::move(f));
    v.frames.push_back(std::move(rgb));
  }
  return v;
}

void write_image_file(const fs::path& path, const std::vector<std::uint8_t>& rgb, int height, int width) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw DimensionError("write_image_file: size mismatch");
  std::vector<std::uint8_t> buf{'V', 'K', 'N', 'I'};
  put_u32(buf, kDatasetVersion);
  put_u32(buf, static_cast<std::uint32_t>(width));
  put_u32(buf, static_cast<std::uint32_t>(height));
  put_u32(buf, 3);
  buf.insert(buf.end(), rgb.begin(), rgb.end());
  write_bytes(path, buf);
}

std::vector<std::uint8_t> read_image_file(const fs::path& path, int& height, int& width) {
  const auto buf = read_bytes(path);
  Reader r(path, buf);
  r.magic("VKNI");
  r.version();
  width = static_cast<int>(r.u32("width"));
  height = static_cast<int>(r.u32("height"));
  const std::uint32_t ch = r.u32("channels");
  if (ch != 3) r.fail("expected 3 channels, got " + std::to_string(ch));
  if (width < 1 || height < 1 || width > 65535 || height > 65535) r.fail("implausible image size");
  const std::size_t n = static_cast<std::size_t>(width) * height * 3;
  r.need(n, "pixel data");
  std::vector<std::uint8_t> rgb(buf.begin() + static_cast<std::ptrdiff_t>(r.pos()),
                                buf.begin() + static_cast<std::ptrdiff_t>(r.pos() + n));
  r.skip(n);
  r.done();
  return rgb;
}

void write_pan_file(const fs::path& path, const PanopticFrame& frame) {
  std::vector<std::uint8_t> buf{'V', 'K', 'N', 'P'};
  put_u32(buf, kDatasetVersion);
  put_u32(buf, static_cast<std::uint32_t>(frame.width));
  put_u32(buf, static_cast<std::uint32_t>(frame.height));
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const int s = frame.semantic_ids[i];
    const int id = frame.instance_ids[i];
    if (s < 0 || s > 65535 || id < 0 || id > 65535) throw DataError(path.string() + ": id outside 16-bit range");
    put_u16(buf, static_cast<std::uint16_t>(s));
    put_u16(buf, static_cast<std::uint16_t>(id));
  }
  write_bytes(path, buf);
}

PanopticFrame read_pan_file(const fs::path& path) {
  const auto buf = read_bytes(path);
  Reader r(path, buf);
  r.magic("VKNP");
  r.version();
  const int width = static_cast<int>(r.u32("width"));
  const int height = static_cast<int>(r.u32("height"));
  if (width < 1 || height < 1 || width > 65535 || height > 65535) r.fail("implausible map size");
  PanopticFrame f(height, width, 0);
  r.need(f.size() * 4, "id map");
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.semantic_ids[i] = r.u16("semantic id");
    f.instance_ids[i] = r.u16("instance id");
  }
  r.done();
  return f;
}

void write_videos(const std::vector<SyntheticVideo>& videos, const ClassTable& classes, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  nlohmann::json meta;
  meta["version"] = kDatasetVersion;
  meta["ignore_label"] = classes.ignore_label();
  for (const auto& c : classes.classes()) meta["classes"].push_back({{"id", c.id}, {"name", c.name}, {"thing", c.is_thing}});
  meta["videos"] = nlohmann::json::array();
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const SyntheticVideo& v = videos[i];
    const std::string name = v.name.empty() ? index_name("video", static_cast<int>(i)) : v.name;
    const fs::path dir = out_dir / name;
    fs::create_directories(dir);
    for (std::size_t t = 0; t < v.frames.size(); ++t) {
      const std::string stem = index_name("frame", static_cast<int>(t));
      write_image_file(dir / (stem + ".img"), v.frames[t], v.height, v.width);
      write_pan_file(dir / (stem + ".pan"), v.gt.frames.at(t));
    }
    meta["videos"].push_back({{"name", name}, {"frames", v.frames.size()}, {"height", v.height}, {"width", v.width}});
  }
  std::ofstream os(out_dir / "meta.json");
  if (!os) throw DataError("cannot write " + (out_dir / "meta.json").string());
  os << meta.dump(2) << '\n';
}

Dataset write_dataset(const std::vector<SceneSpec>& specs, const fs::path& out_dir) {
  Dataset ds;
  ds.classes = ClassTable::synthetic();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    SyntheticVideo v = generate_video(specs[i], ds.classes);
    v.name = index_name("video", static_cast<int>(i));
    ds.videos.push_back(std::move(v));
  }
  write_videos(ds.videos, ds.classes, out_dir);
  return ds;
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  const auto bytes = read_bytes(meta_path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(meta_path.string() + " at offset " + std::to_string(e.byte) + ": " + e.what());
  }
  Dataset ds;
  try {
    const auto version = meta.at("version").get<std::uint32_t>();
    if (version != kDatasetVersion) {
      throw VersionError(meta_path.string() + ": dataset version " + std::to_string(version) + ", expected " +
                         std::to_string(kDatasetVersion));
    }
    std::vector<ClassInfo> infos;
    for (const auto& c : meta.at("classes"))
      infos.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(), c.at("thing").get<bool>()});
    ds.classes = ClassTable(std::move(infos), meta.at("ignore_label").get<int>());
    for (const auto& jv : meta.at("videos")) {
      SyntheticVideo v;
      v.name = jv.at("name").get<std::string>();
      v.height = jv.at("height").get<int>();
      v.width = jv.at("width").get<int>();
      const int frames = jv.at("frames").get<int>();
      v.gt.classes = ds.classes;
      for (int t = 0; t < frames; ++t) {
        const std::string stem = index_name("frame", t);
        const fs::path img = dir / v.name / (stem + ".img");
        int h = 0, w = 0;
        v.frames.push_back(read_image_file(img, h, w));
        if (h != v.height || w != v.width) throw DataError(img.string() + ": size differs from meta.json");
        PanopticFrame f = read_pan_file(dir / v.name / (stem + ".pan"));
        if (f.height != v.height || f.width != v.width) throw DataError(v.name + "/" + stem + ".pan: size differs");
        f.frame_index = t;
        const std::string problem = validate_frame(f, ds.classes);
        if (!problem.empty()) throw DataError(v.name + "/" + stem + ".pan: " + problem);
        v.gt.frames.push_back(std::move(f));
      }
      ds.videos.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  return ds;
}

ReferenceSample sample_reference_frame(int length, int key_index, int window, Rng& rng) {
  if (length < 1) throw DataError("sample_reference_frame: empty video");
  if (key_index < 0 || key_index >= length) throw DimensionError("sample_reference_frame: key index out of range");
  if (window < 1) throw ConfigError("sample_reference_frame: window must be >= 1");
  if (length == 1) return {key_index, true};
  std::vector<int> options;
  for (int d = -window; d <= window; ++d) {
    const int r = key_index + d;
    if (d != 0 && r >= 0 && r < length) options.push_back(r);
  }
  return {options[rng.below(options.size())], false};
}

}  // namespace vkn
