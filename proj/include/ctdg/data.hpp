#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctdg/clip.hpp"
#include "ctdg/keyvalue.hpp"
#include "ctdg/tensor.hpp"

namespace ctdg {

/// One contiguous video. Images are grayscale in [0, 1]; flows hold
/// (horizontal, vertical, magnitude) per pixel; flow of frame t describes the
/// motion from t-1 to t and the first frame has zero flow.
struct VideoClip {
  int64_t frames = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> images;  // [frames, h, w]
  std::vector<float> flows;   // [frames, h, w, 3]
  std::vector<uint8_t> labels;

  VideoClip() = default;
  VideoClip(int64_t frames, int64_t height, int64_t width);

  int64_t pixels() const { return height * width; }
  float* image(int64_t t) { return images.data() + t * pixels(); }
  const float* image(int64_t t) const { return images.data() + t * pixels(); }
  float* flow(int64_t t) { return flows.data() + t * pixels() * 3; }
  const float* flow(int64_t t) const { return flows.data() + t * pixels() * 3; }

  /// [h, w, 1] copy of frame t.
  Tensor image_tensor(int64_t t) const;

  friend bool operator==(const VideoClip&, const VideoClip&) = default;
};

struct VideoDataset {
  std::vector<VideoClip> clips;

  int64_t frame_count() const;
  friend bool operator==(const VideoDataset&, const VideoDataset&) = default;
};

enum class FlowSource { analytic, block_matching };

/// Explicit square: centre, side length, integer velocity and brightness.
struct ShapeSpec {
  double x = 0.0;
  double y = 0.0;
  double size = 10.0;
  int64_t vx = 0;
  int64_t vy = 0;
  double intensity = 1.0;
};

/// Synthetic scene description. Normal shapes are textured squares moving at
/// integer velocities with components in [-normal_speed, normal_speed].
/// The anomaly fractions split the clips, in order, into speed-up, new-object
/// and reversal clips; each anomalous clip holds one event starting inside
/// [anomaly_start_min, anomaly_start_max].
struct SceneConfig {
  int64_t resolution = 64;
  int64_t clips = 20;
  int64_t frames_per_clip = 100;
  int64_t shapes_per_clip = 3;
  double min_size = 9.0;
  double max_size = 14.0;
  int64_t normal_speed = 1;
  double background = 0.1;
  double speed_anomaly_fraction = 0.0;
  double new_object_fraction = 0.0;
  double reversal_fraction = 0.0;
  int64_t anomaly_speed = 4;
  int64_t anomaly_start_min = 30;
  int64_t anomaly_start_max = 60;
  double novel_radius = 8.0;
  // Frames labelled anomalous after a reversal.
  int64_t reversal_label_frames = 10;
  // Static scenes use zero velocity for every shape.
  bool static_scene = false;
  FlowSource flow = FlowSource::analytic;
  // When set, every clip starts from these squares instead of random ones.
  std::vector<ShapeSpec> shapes;

  /// Named preset: "moving-squares" (split "train" or "test") or "static".
  static SceneConfig preset(const std::string& name, const std::string& split);
  KeyValue to_keyvalue() const;
  static SceneConfig from_keyvalue(const KeyValue& kv);
};

VideoDataset synth_generate(const SceneConfig& config, uint64_t seed);

/// Exhaustive block matching: for each block of `cur`, the integer
/// displacement (u, v) within +-radius minimizing the sum of absolute
/// differences against `prev` shifted by it. Candidates reaching outside the
/// frame are skipped. Ties go to the smallest magnitude, then the smallest
/// (u, v) lexicographically. Inputs [h, w] or [h, w, 1]; output [h, w, 3].
Tensor estimate_flow(const Tensor& prev, const Tensor& cur, int64_t block = 8, int64_t radius = 4);

/// Replaces every clip's flows with block-matching estimates.
void recompute_flows(VideoDataset& dataset, int64_t block = 8, int64_t radius = 4);

/// A window of kClipLength input frames followed by its target frame.
struct WindowRef {
  int64_t clip = 0;
  int64_t target = 0;  // frame index of the target inside the clip
};

/// Every window that fits inside a clip, in clip/frame order. Clips too short
/// to hold one window add a message to `warnings` when given.
std::vector<WindowRef> assemble_windows(const VideoDataset& dataset, std::vector<std::string>* warnings = nullptr);

enum class ImageRange { unit, symmetric };

struct InputClip {
  Tensor input;   // [T, h, w, 4]
  Tensor target;  // [h, w, 4]
  uint8_t label = 0;
};

/// Channel 0 is the image (mapped to [-1, 1] for the symmetric range),
/// channels 1-3 the flow.
InputClip make_input(const VideoDataset& dataset, const WindowRef& window, ImageRange range = ImageRange::unit);

/// Stacks windows into batch tensors: inputs [n, T, h, w, 4], targets [n, h, w, 4].
void make_batch(const VideoDataset& dataset, const std::vector<WindowRef>& windows, ImageRange range, Tensor& inputs,
                Tensor& targets);

inline constexpr uint32_t kDatasetVersion = 1;

// "CTDS" container: magic, u32 version, u32 clip count, then per clip u32
// frame count, height and width, f32 images, f32 flows and u8 labels, all
// little-endian.
std::string encode_dataset(const VideoDataset& dataset);
VideoDataset decode_dataset(const std::string& bytes);
void save_dataset(const std::filesystem::path& path, const VideoDataset& dataset);
VideoDataset load_dataset(const std::filesystem::path& path);

ImageRange parse_image_range(const std::string& s);
std::string to_string(ImageRange r);

}  // namespace ctdg
