#include "ctdg/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "byte_io.hpp"
#include "ctdg/checkpoint.hpp"
#include "ctdg/rng.hpp"

namespace ctdg {

VideoClip::VideoClip(int64_t frames_, int64_t height_, int64_t width_)
    : frames(frames_), height(height_), width(width_) {
  if (frames < 0 || height <= 0 || width <= 0) throw ShapeError("clip extents must be positive");
  images.assign(static_cast<size_t>(frames * height * width), 0.0f);
  flows.assign(static_cast<size_t>(frames * height * width * 3), 0.0f);
  labels.assign(static_cast<size_t>(frames), 0);
}

Tensor VideoClip::image_tensor(int64_t t) const {
  Tensor out({height, width, 1});
  const float* src = image(t);
  for (int64_t i = 0; i < pixels(); ++i) out[i] = src[i];
  return out;
}

int64_t VideoDataset::frame_count() const {
  int64_t n = 0;
  for (const auto& c : clips) n += c.frames;
  return n;
}

// ---------------------------------------------------------------- presets

SceneConfig SceneConfig::preset(const std::string& name, const std::string& split) {
  if (split != "train" && split != "test") throw ConfigError("unknown split '" + split + "' (expected train or test)");
  SceneConfig c;
  if (name == "moving-squares") {
    if (split == "test") {
      c.clips = 6;
      c.speed_anomaly_fraction = 0.5;
      c.new_object_fraction = 0.5;
    }
    return c;
  }
  if (name == "static") {
    c.static_scene = true;
    c.clips = split == "train" ? 4 : 2;
    c.frames_per_clip = 20;
    c.anomaly_start_min = 8;
    c.anomaly_start_max = 12;
    if (split == "test") c.new_object_fraction = 1.0;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected moving-squares or static)");
}

KeyValue SceneConfig::to_keyvalue() const {
  KeyValue kv;
  kv.set("resolution", resolution);
  kv.set("clips", clips);
  kv.set("frames_per_clip", frames_per_clip);
  kv.set("shapes_per_clip", shapes_per_clip);
  kv.set("min_size", min_size);
  kv.set("max_size", max_size);
  kv.set("normal_speed", normal_speed);
  kv.set("background", background);
  kv.set("speed_anomaly_fraction", speed_anomaly_fraction);
  kv.set("new_object_fraction", new_object_fraction);
  kv.set("reversal_fraction", reversal_fraction);
  kv.set("anomaly_speed", anomaly_speed);
  kv.set("anomaly_start_min", anomaly_start_min);
  kv.set("anomaly_start_max", anomaly_start_max);
  kv.set("novel_radius", novel_radius);
  kv.set("reversal_label_frames", reversal_label_frames);
  kv.set("static_scene", static_scene);
  kv.set("flow", std::string(flow == FlowSource::analytic ? "analytic" : "block"));
  if (!shapes.empty()) {
    std::string text;
    for (const ShapeSpec& sh : shapes) {
      if (!text.empty()) text += ';';
      text += std::to_string(sh.x) + ' ' + std::to_string(sh.y) + ' ' + std::to_string(sh.size) + ' ' +
              std::to_string(sh.vx) + ' ' + std::to_string(sh.vy) + ' ' + std::to_string(sh.intensity);
    }
    kv.set("shapes", text);
  }
  return kv;
}

SceneConfig SceneConfig::from_keyvalue(const KeyValue& kv) {
  SceneConfig c;
  c.resolution = kv.get_int("resolution", c.resolution);
  c.clips = kv.get_int("clips", c.clips);
  c.frames_per_clip = kv.get_int("frames_per_clip", c.frames_per_clip);
  c.shapes_per_clip = kv.get_int("shapes_per_clip", c.shapes_per_clip);
  c.min_size = kv.get_double("min_size", c.min_size);
  c.max_size = kv.get_double("max_size", c.max_size);
  c.normal_speed = kv.get_int("normal_speed", c.normal_speed);
  c.background = kv.get_double("background", c.background);
  c.speed_anomaly_fraction = kv.get_double("speed_anomaly_fraction", c.speed_anomaly_fraction);
  c.new_object_fraction = kv.get_double("new_object_fraction", c.new_object_fraction);
  c.reversal_fraction = kv.get_double("reversal_fraction", c.reversal_fraction);
  c.anomaly_speed = kv.get_int("anomaly_speed", c.anomaly_speed);
  c.anomaly_start_min = kv.get_int("anomaly_start_min", c.anomaly_start_min);
  c.anomaly_start_max = kv.get_int("anomaly_start_max", c.anomaly_start_max);
  c.novel_radius = kv.get_double("novel_radius", c.novel_radius);
  c.reversal_label_frames = kv.get_int("reversal_label_frames", c.reversal_label_frames);
  c.static_scene = kv.get_bool("static_scene", c.static_scene);
  const std::string flow = kv.get("flow", "analytic");
  if (flow == "analytic") {
    c.flow = FlowSource::analytic;
  } else if (flow == "block") {
    c.flow = FlowSource::block_matching;
  } else {
    throw ConfigError("unknown flow source '" + flow + "' (expected analytic or block)");
  }
  std::istringstream shapes(kv.get("shapes", ""));
  std::string item;
  while (std::getline(shapes, item, ';')) {
    std::istringstream in(item);
    ShapeSpec sh;
    if (!(in >> sh.x >> sh.y >> sh.size >> sh.vx >> sh.vy >> sh.intensity))
      throw ConfigError("malformed shape entry '" + item + "' (expected x y size vx vy intensity)");
    c.shapes.push_back(sh);
  }
  return c;
}

// -------------------------------------------------------------- rendering

namespace {

enum class Kind { square, disc };

struct Mover {
  Kind kind = Kind::square;
  double cx = 0.0, cy = 0.0;  // centre
  double size = 10.0;         // side length, or radius for discs
  double intensity = 1.0;
  double phase_x = 0.0, phase_y = 0.0;
  int64_t vx = 0, vy = 0;
  int64_t appear = 0;
  int64_t event_frame = -1;
  int64_t event_vx = 0, event_vy = 0;

  std::pair<int64_t, int64_t> velocity(int64_t t) const {
    if (event_frame >= 0 && t >= event_frame) return {event_vx, event_vy};
    return {vx, vy};
  }

  double extent() const { return kind == Kind::square ? size / 2.0 : size; }

  bool contains(double dx, double dy) const {
    if (kind == Kind::square) return std::abs(dx) <= size / 2.0 && std::abs(dy) <= size / 2.0;
    return dx * dx + dy * dy <= size * size;
  }

  double texture(double dx, double dy) const {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    if (kind == Kind::square) {
      return intensity * (0.7 + 0.3 * std::sin(two_pi * (dx + phase_x) / 11.0) * std::sin(two_pi * (dy + phase_y) / 13.0));
    }
    return intensity * (0.6 + 0.4 * std::sin(two_pi * (dx + dy + phase_x) / 6.0));
  }
};

double wrap_delta(double d, double extent) { return d - extent * std::round(d / extent); }

double wrap_position(double p, double extent) {
  p = std::fmod(p, extent);
  return p < 0 ? p + extent : p;
}

Mover random_square(const SceneConfig& c, Rng& rng) {
  Mover m;
  m.kind = Kind::square;
  m.cx = rng.uniform(0.0, static_cast<double>(c.resolution));
  m.cy = rng.uniform(0.0, static_cast<double>(c.resolution));
  m.size = rng.uniform(c.min_size, c.max_size);
  m.intensity = rng.uniform(0.5, 1.0);
  m.phase_x = rng.uniform(0.0, 11.0);
  m.phase_y = rng.uniform(0.0, 13.0);
  if (!c.static_scene) {
    const int64_t s = c.normal_speed;
    do {
      m.vx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(2 * s + 1))) - s;
      m.vy = static_cast<int64_t>(rng.below(static_cast<uint64_t>(2 * s + 1))) - s;
    } while (s > 0 && m.vx == 0 && m.vy == 0);
  }
  return m;
}

int64_t sign(int64_t v) { return (v > 0) - (v < 0); }

enum class Event { none, speed, new_object, reversal };

Event clip_event(const SceneConfig& c, int64_t clip) {
  const double u = (static_cast<double>(clip) + 0.5) / static_cast<double>(c.clips);
  if (u < c.speed_anomaly_fraction) return Event::speed;
  if (u < c.speed_anomaly_fraction + c.new_object_fraction) return Event::new_object;
  if (u < c.speed_anomaly_fraction + c.new_object_fraction + c.reversal_fraction) return Event::reversal;
  return Event::none;
}

void validate(const SceneConfig& c) {
  if (c.resolution <= 0 || c.clips <= 0 || c.frames_per_clip <= 0 || c.shapes_per_clip <= 0)
    throw ConfigError("scene extents and counts must be positive");
  if (c.min_size <= 0 || c.max_size < c.min_size) throw ConfigError("scene shape sizes must satisfy 0 < min <= max");
  if (c.normal_speed < 0 || c.anomaly_speed <= c.normal_speed)
    throw ConfigError("anomaly_speed must exceed normal_speed");
  const bool anomalies = c.speed_anomaly_fraction + c.new_object_fraction + c.reversal_fraction > 0.0;
  if (anomalies && (c.anomaly_start_min < 1 || c.anomaly_start_max < c.anomaly_start_min ||
                    c.anomaly_start_max >= c.frames_per_clip))
    throw ConfigError("anomaly start range must lie inside the clip");
  if (c.speed_anomaly_fraction < 0 || c.new_object_fraction < 0 || c.reversal_fraction < 0 ||
      c.speed_anomaly_fraction + c.new_object_fraction + c.reversal_fraction > 1.0 + 1e-12)
    throw ConfigError("anomaly fractions must be nonnegative and sum to at most 1");
}

VideoClip render_clip(const SceneConfig& c, int64_t clip_index, Rng rng) {
  const int64_t n = c.frames_per_clip, res = c.resolution;
  const double extent = static_cast<double>(res);
  std::vector<Mover> movers;
  for (const ShapeSpec& sh : c.shapes) {
    Mover m;
    m.cx = sh.x;
    m.cy = sh.y;
    m.size = sh.size;
    m.vx = sh.vx;
    m.vy = sh.vy;
    m.intensity = sh.intensity;
    m.phase_x = rng.uniform(0.0, 11.0);
    m.phase_y = rng.uniform(0.0, 13.0);
    movers.push_back(m);
  }
  for (int64_t i = 0; c.shapes.empty() && i < c.shapes_per_clip; ++i) movers.push_back(random_square(c, rng));

  const Event event = clip_event(c, clip_index);
  int64_t start = -1, label_end = n;
  if (event != Event::none) {
    start = c.anomaly_start_min +
            static_cast<int64_t>(rng.below(static_cast<uint64_t>(c.anomaly_start_max - c.anomaly_start_min + 1)));
  }
  if (event == Event::speed || event == Event::reversal) {
    Mover& m = movers[rng.below(movers.size())];
    if (m.vx == 0 && m.vy == 0) m.vx = 1;  // static scenes still need a direction
    m.event_frame = start;
    if (event == Event::speed) {
      m.event_vx = sign(m.vx) * c.anomaly_speed;
      m.event_vy = sign(m.vy) * c.anomaly_speed;
    } else {
      m.event_vx = -m.vx;
      m.event_vy = -m.vy;
      label_end = std::min(n, start + c.reversal_label_frames);
    }
  } else if (event == Event::new_object) {
    Mover m = random_square(c, rng);
    m.kind = Kind::disc;
    m.size = c.novel_radius;
    m.intensity = rng.uniform(0.8, 1.0);
    m.appear = start;
    movers.push_back(m);
  }

  VideoClip clip(n, res, res);
  for (int64_t t = start; t >= 0 && t < label_end; ++t) clip.labels[t] = 1;

  constexpr int kSub = 4;
  for (int64_t t = 0; t < n; ++t) {
    if (t > 0) {
      for (Mover& m : movers) {
        if (t <= m.appear) continue;
        auto [vx, vy] = m.velocity(t);
        m.cx = wrap_position(m.cx + static_cast<double>(vx), extent);
        m.cy = wrap_position(m.cy + static_cast<double>(vy), extent);
      }
    }
    float* img = clip.image(t);
    float* flow = clip.flow(t);
    for (int64_t y = 0; y < res; ++y) {
      for (int64_t x = 0; x < res; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double value = c.background;
        const Mover* owner = nullptr;
        for (const Mover& m : movers) {
          if (t < m.appear) continue;
          const double dx = wrap_delta(px - m.cx, extent), dy = wrap_delta(py - m.cy, extent);
          const double reach = m.extent() + 1.0;
          if (std::abs(dx) > reach || std::abs(dy) > reach) continue;
          int covered = 0;
          for (int sy = 0; sy < kSub; ++sy)
            for (int sx = 0; sx < kSub; ++sx) {
              const double ox = (sx + 0.5) / kSub - 0.5, oy = (sy + 0.5) / kSub - 0.5;
              covered += m.contains(dx + ox, dy + oy);
            }
          if (covered == 0) continue;
          const double alpha = static_cast<double>(covered) / (kSub * kSub);
          value = (1.0 - alpha) * value + alpha * m.texture(dx, dy);
          if (m.contains(dx, dy)) owner = &m;
        }
        const int64_t p = y * res + x;
        img[p] = static_cast<float>(value);
        if (owner && t > 0) {
          auto [vx, vy] = owner->velocity(t);
          flow[p * 3] = static_cast<float>(vx);
          flow[p * 3 + 1] = static_cast<float>(vy);
          flow[p * 3 + 2] = static_cast<float>(std::sqrt(static_cast<double>(vx * vx + vy * vy)));
        }
      }
    }
  }
  return clip;
}

}  // namespace

VideoDataset synth_generate(const SceneConfig& config, uint64_t seed) {
  validate(config);
  VideoDataset ds;
  const Rng root = Rng(seed).substream("synth");
  for (int64_t i = 0; i < config.clips; ++i) {
    ds.clips.push_back(render_clip(config, i, root.substream("clip" + std::to_string(i))));
  }
  if (config.flow == FlowSource::block_matching) recompute_flows(ds);
  return ds;
}

// ------------------------------------------------------------------- flow

Tensor estimate_flow(const Tensor& prev, const Tensor& cur, int64_t block, int64_t radius) {
  if (prev.shape() != cur.shape()) {
    throw ShapeError("estimate_flow: frames differ in shape, " + shape_str(prev.shape()) + " vs " +
                     shape_str(cur.shape()));
  }
  if ((cur.rank() != 2 && cur.rank() != 3) || (cur.rank() == 3 && cur.dim(2) != 1))
    throw ShapeError("estimate_flow: expected [h, w] or [h, w, 1] frames, got " + shape_str(cur.shape()));
  if (block <= 0 || radius < 0) throw ConfigError("estimate_flow: block must be positive and radius nonnegative");
  const int64_t h = cur.dim(0), w = cur.dim(1);
  Tensor out({h, w, 3});
  for (int64_t by = 0; by < h; by += block) {
    for (int64_t bx = 0; bx < w; bx += block) {
      const int64_t ey = std::min(h, by + block), ex = std::min(w, bx + block);
      double best = std::numeric_limits<double>::infinity();
      int64_t bu = 0, bv = 0;
      for (int64_t v = -radius; v <= radius; ++v) {
        if (by - v < 0 || ey - v > h) continue;
        for (int64_t u = -radius; u <= radius; ++u) {
          if (bx - u < 0 || ex - u > w) continue;
          double sad = 0.0;
          for (int64_t y = by; y < ey; ++y)
            for (int64_t x = bx; x < ex; ++x) sad += std::abs(cur[y * w + x] - prev[(y - v) * w + (x - u)]);
          const int64_t mag = u * u + v * v, best_mag = bu * bu + bv * bv;
          const bool better = sad < best || (sad == best && (mag < best_mag || (mag == best_mag && std::pair(u, v) <
                                                                                                    std::pair(bu, bv))));
          if (better) {
            best = sad;
            bu = u;
            bv = v;
          }
        }
      }
      const double m = std::sqrt(static_cast<double>(bu * bu + bv * bv));
      for (int64_t y = by; y < ey; ++y)
        for (int64_t x = bx; x < ex; ++x) {
          out[(y * w + x) * 3] = static_cast<double>(bu);
          out[(y * w + x) * 3 + 1] = static_cast<double>(bv);
          out[(y * w + x) * 3 + 2] = m;
        }
    }
  }
  return out;
}

void recompute_flows(VideoDataset& dataset, int64_t block, int64_t radius) {
  for (VideoClip& clip : dataset.clips) {
    std::fill(clip.flows.begin(), clip.flows.end(), 0.0f);
    for (int64_t t = 1; t < clip.frames; ++t) {
      const Tensor f = estimate_flow(clip.image_tensor(t - 1), clip.image_tensor(t), block, radius);
      float* dst = clip.flow(t);
      for (int64_t i = 0; i < f.numel(); ++i) dst[i] = static_cast<float>(f[i]);
    }
  }
}

// ---------------------------------------------------------------- windows

std::vector<WindowRef> assemble_windows(const VideoDataset& dataset, std::vector<std::string>* warnings) {
  std::vector<WindowRef> out;
  for (size_t c = 0; c < dataset.clips.size(); ++c) {
    const int64_t n = dataset.clips[c].frames;
    if (n < kClipLength + 1) {
      if (warnings) {
        warnings->push_back("clip " + std::to_string(c) + " has " + std::to_string(n) + " frames; at least " +
                            std::to_string(kClipLength + 1) + " are needed for one window");
      }
      continue;
    }
    for (int64_t t = kClipLength; t < n; ++t) out.push_back({static_cast<int64_t>(c), t});
  }
  return out;
}

namespace {

void write_frame(const VideoClip& clip, int64_t t, ImageRange range, double* dst) {
  const float* img = clip.image(t);
  const float* flow = clip.flow(t);
  for (int64_t p = 0; p < clip.pixels(); ++p) {
    const double v = img[p];
    dst[p * 4] = range == ImageRange::unit ? v : 2.0 * v - 1.0;
    dst[p * 4 + 1] = flow[p * 3];
    dst[p * 4 + 2] = flow[p * 3 + 1];
    dst[p * 4 + 3] = flow[p * 3 + 2];
  }
}

const VideoClip& window_clip(const VideoDataset& dataset, const WindowRef& w) {
  if (w.clip < 0 || w.clip >= static_cast<int64_t>(dataset.clips.size())) throw ValidationError("window clip out of range");
  const VideoClip& clip = dataset.clips[static_cast<size_t>(w.clip)];
  if (w.target < kClipLength || w.target >= clip.frames) throw ValidationError("window target out of range");
  return clip;
}

}  // namespace

InputClip make_input(const VideoDataset& dataset, const WindowRef& window, ImageRange range) {
  const VideoClip& clip = window_clip(dataset, window);
  InputClip out;
  out.input = Tensor({kClipLength, clip.height, clip.width, 4});
  out.target = Tensor({clip.height, clip.width, 4});
  const int64_t frame = clip.pixels() * 4;
  for (int64_t i = 0; i < kClipLength; ++i)
    write_frame(clip, window.target - kClipLength + i, range, out.input.data().data() + i * frame);
  write_frame(clip, window.target, range, out.target.data().data());
  out.label = clip.labels[static_cast<size_t>(window.target)];
  return out;
}

void make_batch(const VideoDataset& dataset, const std::vector<WindowRef>& windows, ImageRange range, Tensor& inputs,
                Tensor& targets) {
  if (windows.empty()) throw ValidationError("batch must hold at least one window");
  const VideoClip& first = window_clip(dataset, windows[0]);
  const int64_t n = static_cast<int64_t>(windows.size()), h = first.height, w = first.width;
  inputs = Tensor({n, kClipLength, h, w, 4});
  targets = Tensor({n, h, w, 4});
  const int64_t frame = h * w * 4;
  for (int64_t b = 0; b < n; ++b) {
    const VideoClip& clip = window_clip(dataset, windows[static_cast<size_t>(b)]);
    if (clip.height != h || clip.width != w) throw ShapeError("batch windows differ in frame size");
    const int64_t target = windows[static_cast<size_t>(b)].target;
    for (int64_t i = 0; i < kClipLength; ++i)
      write_frame(clip, target - kClipLength + i, range, inputs.data().data() + (b * kClipLength + i) * frame);
    write_frame(clip, target, range, targets.data().data() + b * frame);
  }
}

// --------------------------------------------------------------------- io

namespace {
constexpr char kDatasetMagic[4] = {'C', 'T', 'D', 'S'};
}

std::string encode_dataset(const VideoDataset& dataset) {
  std::string out(kDatasetMagic, 4);
  detail::put<uint32_t>(out, kDatasetVersion);
  detail::put<uint32_t>(out, static_cast<uint32_t>(dataset.clips.size()));
  for (const VideoClip& c : dataset.clips) {
    detail::put<uint32_t>(out, static_cast<uint32_t>(c.frames));
    detail::put<uint32_t>(out, static_cast<uint32_t>(c.height));
    detail::put<uint32_t>(out, static_cast<uint32_t>(c.width));
    detail::put_array(out, c.images.data(), c.images.size());
    detail::put_array(out, c.flows.data(), c.flows.size());
    detail::put_array(out, c.labels.data(), c.labels.size());
  }
  return out;
}

VideoDataset decode_dataset(const std::string& bytes) {
  detail::ByteReader r(bytes, "dataset");
  if (r.take(4, "magic") != std::string(kDatasetMagic, 4)) throw FormatError("not a CTDS dataset (bad magic)");
  const auto version = r.get<uint32_t>("version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version) + " (expected " +
                      std::to_string(kDatasetVersion) + ")");
  }
  const auto count = r.get<uint32_t>("clip count");
  VideoDataset ds;
  for (uint32_t i = 0; i < count; ++i) {
    const auto frames = r.get<uint32_t>("frame count");
    const auto h = r.get<uint32_t>("height");
    const auto w = r.get<uint32_t>("width");
    if (h == 0 || w == 0) throw FormatError("clip " + std::to_string(i) + " has an empty frame size");
    // Guard the allocation against corrupt headers before sizing buffers.
    const uint64_t need = uint64_t{frames} * h * w * 16 + frames;
    if (need > bytes.size() - r.pos()) r.take(bytes.size() - r.pos() + 1, "clip payload");
    VideoClip c(frames, h, w);
    r.get_array(c.images.data(), c.images.size(), "images");
    r.get_array(c.flows.data(), c.flows.size(), "flows");
    r.get_array(c.labels.data(), c.labels.size(), "labels");
    ds.clips.push_back(std::move(c));
  }
  if (!r.done()) throw FormatError("trailing bytes after dataset at offset " + std::to_string(r.pos()));
  return ds;
}

void save_dataset(const std::filesystem::path& path, const VideoDataset& dataset) {
  write_file_bytes(path, encode_dataset(dataset));
}

VideoDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file_bytes(path)); }

ImageRange parse_image_range(const std::string& s) {
  if (s == "unit" || s == "0,1") return ImageRange::unit;
  if (s == "symmetric" || s == "-1,1") return ImageRange::symmetric;
  throw ConfigError("unknown image range '" + s + "' (expected unit or symmetric)");
}

std::string to_string(ImageRange r) { return r == ImageRange::unit ? "unit" : "symmetric"; }

}  // namespace ctdg
