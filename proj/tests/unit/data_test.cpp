#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ctdg/checkpoint.hpp"
#include "ctdg/data.hpp"

using namespace ctdg;

namespace {

SceneConfig single_square(double x, double y, double size, int64_t vx, int64_t vy, int64_t frames = 8) {
  SceneConfig c;
  c.clips = 1;
  c.frames_per_clip = frames;
  c.anomaly_start_min = 1;
  c.anomaly_start_max = frames - 1;
  c.shapes = {{x, y, size, vx, vy, 0.9}};
  return c;
}

VideoClip clip_of(int64_t frames) {
  VideoClip c(frames, 16, 16);
  for (int64_t t = 0; t < frames; ++t) c.labels[t] = t % 3 == 0;
  for (size_t i = 0; i < c.images.size(); ++i) c.images[i] = static_cast<float>(i % 17) / 17.0f;
  return c;
}

}  // namespace

TEST(Synth, StaticSceneHasNoMotionOrAnomaly) {
  VideoDataset ds = synth_generate(SceneConfig::preset("static", "train"), 3);
  for (const auto& clip : ds.clips) {
    for (float f : clip.flows) EXPECT_EQ(f, 0.0f);
    for (uint8_t l : clip.labels) EXPECT_EQ(l, 0);
  }
}

TEST(Synth, SameSeedSameBytes) {
  SceneConfig c = SceneConfig::preset("moving-squares", "test");
  c.frames_per_clip = 70;
  EXPECT_EQ(encode_dataset(synth_generate(c, 11)), encode_dataset(synth_generate(c, 11)));
  EXPECT_NE(encode_dataset(synth_generate(c, 11)), encode_dataset(synth_generate(c, 12)));
}

TEST(Synth, SquareMovingRightHasAnalyticFlow) {
  VideoDataset ds = synth_generate(single_square(20.0, 30.0, 12.0, 2, 0), 1);
  const VideoClip& clip = ds.clips[0];
  for (int64_t t = 1; t < clip.frames; ++t) {
    // square centre at x = 20 + 2t; the pixel at the centre is interior
    const int64_t x = 20 + 2 * t, y = 30;
    const float* f = clip.flow(t) + (y * clip.width + x) * 3;
    EXPECT_EQ(f[0], 2.0f);
    EXPECT_EQ(f[1], 0.0f);
    EXPECT_EQ(f[2], 2.0f);
    const float* bg = clip.flow(t) + (2 * clip.width + 2) * 3;
    EXPECT_EQ(bg[2], 0.0f);
  }
  for (int64_t i = 0; i < clip.pixels() * 3; ++i) EXPECT_EQ(clip.flow(0)[i], 0.0f);
}

TEST(Synth, ImagesInUnitRangeAndAntialiased) {
  VideoDataset ds = synth_generate(single_square(20.3, 30.6, 11.0, 1, 1), 2);
  bool partial = false;
  for (float v : ds.clips[0].images) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  // An edge pixel blends background and shape.
  const VideoClip& clip = ds.clips[0];
  for (int64_t x = 0; x < clip.width; ++x) {
    const float v = clip.image(0)[30 * clip.width + x];
    const float left = x > 0 ? clip.image(0)[30 * clip.width + x - 1] : v;
    if (left == 0.1f && v != 0.1f && v < 0.5f) partial = true;
  }
  EXPECT_TRUE(partial);
}

TEST(Synth, WrapsToroidally) {
  VideoDataset ds = synth_generate(single_square(62.0, 32.0, 8.0, 1, 0, 4), 1);
  const VideoClip& clip = ds.clips[0];
  // Square spans x in [58, 66) at t=0, so columns 0 and 1 are covered on the far side.
  EXPECT_NE(clip.image(0)[32 * clip.width + 0], 0.1f);
  EXPECT_EQ(clip.flow(1)[(32 * clip.width + 1) * 3], 1.0f);
}

TEST(Synth, MagnitudeChannelIsNorm) {
  SceneConfig c = SceneConfig::preset("moving-squares", "test");
  c.clips = 2;
  c.frames_per_clip = 70;
  VideoDataset ds = synth_generate(c, 5);
  for (const auto& clip : ds.clips)
    for (int64_t i = 0; i < clip.frames * clip.pixels(); ++i) {
      const double u = clip.flows[i * 3], v = clip.flows[i * 3 + 1];
      EXPECT_NEAR(clip.flows[i * 3 + 2], std::sqrt(u * u + v * v), 1e-6);
    }
}

TEST(Synth, TestPresetLabels) {
  SceneConfig train = SceneConfig::preset("moving-squares", "train");
  SceneConfig test = SceneConfig::preset("moving-squares", "test");
  EXPECT_EQ(train.clips * train.frames_per_clip, 2000);
  EXPECT_EQ(test.clips * test.frames_per_clip, 600);
  VideoDataset ds = synth_generate(test, 4);
  for (size_t c = 0; c < ds.clips.size(); ++c) {
    const auto& labels = ds.clips[c].labels;
    int64_t first = -1, count = 0;
    for (size_t t = 0; t < labels.size(); ++t) {
      if (labels[t] && first < 0) first = static_cast<int64_t>(t);
      count += labels[t];
    }
    // Each event starts inside the configured range and stays visible to the end.
    ASSERT_GE(first, test.anomaly_start_min) << "clip " << c;
    EXPECT_LE(first, test.anomaly_start_max);
    EXPECT_EQ(count, static_cast<int64_t>(labels.size()) - first);
    const VideoClip& clip = ds.clips[c];
    double max_mag_before = 0.0, max_mag_after = 0.0;
    for (int64_t t = 1; t < clip.frames; ++t)
      for (int64_t p = 0; p < clip.pixels(); ++p) {
        const double m = clip.flow(t)[p * 3 + 2];
        (t < first ? max_mag_before : max_mag_after) = std::max(t < first ? max_mag_before : max_mag_after, m);
      }
    EXPECT_LE(max_mag_before, std::sqrt(2.0) + 1e-6);
    if (c < 3) EXPECT_GE(max_mag_after, 4.0);  // speed-up clips
  }
  VideoDataset normal = synth_generate(SceneConfig::preset("moving-squares", "train"), 4);
  for (const auto& clip : normal.clips)
    for (uint8_t l : clip.labels) EXPECT_EQ(l, 0);
}

TEST(Synth, RejectsBadConfig) {
  SceneConfig c;
  c.anomaly_speed = 1;
  EXPECT_THROW(synth_generate(c, 1), ConfigError);
  EXPECT_THROW(SceneConfig::preset("nope", "train"), ConfigError);
  EXPECT_THROW(SceneConfig::preset("moving-squares", "val"), ConfigError);
}

TEST(Synth, ConfigKeyValueRoundTrip) {
  SceneConfig c = SceneConfig::preset("moving-squares", "test");
  c.shapes = {{1.5, 2.5, 10.0, 1, -1, 0.75}};
  c.flow = FlowSource::block_matching;
  SceneConfig back = SceneConfig::from_keyvalue(KeyValue::parse(c.to_keyvalue().serialize()));
  EXPECT_EQ(back.to_keyvalue().serialize(), c.to_keyvalue().serialize());
  EXPECT_EQ(back.shapes.size(), 1u);
  EXPECT_EQ(back.shapes[0].vy, -1);
}

TEST(Flow, IdenticalFramesGiveZeroFlow) {
  VideoDataset ds = synth_generate(single_square(20.3, 30.6, 11.0, 1, 1), 2);
  Tensor f = estimate_flow(ds.clips[0].image_tensor(3), ds.clips[0].image_tensor(3));
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Flow, ConstructedShiftIsRecovered) {
  const int64_t h = 32, w = 32;
  Tensor prev({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      prev[y * w + x] = 0.5 + 0.3 * std::sin(x * 0.9 + y * 0.3) * std::cos(y * 0.7 - x * 0.2);
  Tensor cur({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) cur[y * w + x] = prev[y * w + std::max<int64_t>(0, x - 3)];
  Tensor f = estimate_flow(prev, cur);
  for (int64_t y = 8; y < 24; ++y)
    for (int64_t x = 8; x < 24; ++x) {
      EXPECT_EQ(f[(y * w + x) * 3], 3.0);
      EXPECT_EQ(f[(y * w + x) * 3 + 1], 0.0);
      EXPECT_EQ(f[(y * w + x) * 3 + 2], 3.0);
    }
}

TEST(Flow, TieBreakPrefersSmallMagnitudeThenLexicographic) {
  const int64_t n = 24;
  Tensor flat({n, n}, 0.4);
  Tensor f = estimate_flow(flat, flat);
  EXPECT_EQ(f[(12 * n + 12) * 3 + 2], 0.0);
  // Alternating columns: shifts u = -1 and u = +1 both match exactly, u = 0 does not.
  Tensor prev({n, n}), cur({n, n});
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x) {
      prev[y * n + x] = x % 2;
      cur[y * n + x] = 1 - x % 2;
    }
  Tensor g = estimate_flow(prev, cur);
  EXPECT_EQ(g[(12 * n + 12) * 3], -1.0);
  EXPECT_EQ(g[(12 * n + 12) * 3 + 1], 0.0);
}

TEST(Flow, MismatchedFramesRejected) {
  EXPECT_THROW(estimate_flow(Tensor({8, 8}), Tensor({8, 9})), ShapeError);
}

TEST(Flow, AgreesWithAnalyticFlowOnInteriors) {
  SceneConfig c;
  c.clips = 1;
  c.frames_per_clip = 10;
  c.anomaly_start_min = 1;
  c.anomaly_start_max = 9;
  c.shapes = {{18.2, 18.7, 26.0, 2, -1, 0.9}, {46.4, 46.1, 22.0, -3, 1, 0.7}};
  VideoDataset ds = synth_generate(c, 8);
  const VideoClip& clip = ds.clips[0];
  int64_t interior = 0, agree = 0;
  for (int64_t t = 1; t < clip.frames; ++t) {
    Tensor est = estimate_flow(clip.image_tensor(t - 1), clip.image_tensor(t));
    const float* ana = clip.flow(t);
    for (int64_t by = 0; by < clip.height; by += 8)
      for (int64_t bx = 0; bx < clip.width; bx += 8) {
        // Interior block: every pixel owned by the same moving shape.
        const float u0 = ana[(by * clip.width + bx) * 3], v0 = ana[(by * clip.width + bx) * 3 + 1];
        bool inside = u0 != 0.0f || v0 != 0.0f;
        for (int64_t y = by; inside && y < by + 8; ++y)
          for (int64_t x = bx; x < bx + 8; ++x)
            inside = inside && ana[(y * clip.width + x) * 3] == u0 && ana[(y * clip.width + x) * 3 + 1] == v0;
        if (!inside) continue;
        // Pixels one step from the shape edge still blend with the background.
        const int64_t sy = by - static_cast<int64_t>(v0), sx = bx - static_cast<int64_t>(u0);
        if (sy < 0 || sx < 0 || sy + 8 > clip.height || sx + 8 > clip.width) continue;
        for (int64_t y = by; y < by + 8; ++y)
          for (int64_t x = bx; x < bx + 8; ++x) {
            ++interior;
            agree += est[(y * clip.width + x) * 3] == u0 && est[(y * clip.width + x) * 3 + 1] == v0;
          }
      }
  }
  ASSERT_GT(interior, 500);
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(interior), 0.95);
}

TEST(Flow, DependsOnlyOnAdjacentFrames) {
  VideoDataset ds = synth_generate(single_square(20.3, 30.6, 11.0, 1, 1, 12), 2);
  recompute_flows(ds);
  VideoDataset mutated = ds;
  float* img = mutated.clips[0].image(7);
  for (int64_t i = 0; i < mutated.clips[0].pixels(); ++i) img[i] = 1.0f - img[i];
  recompute_flows(mutated);
  for (int64_t t = 0; t < 12; ++t) {
    const bool touched = t == 7 || t == 8;
    const auto* a = ds.clips[0].flow(t);
    const auto* b = mutated.clips[0].flow(t);
    bool same = std::equal(a, a + ds.clips[0].pixels() * 3, b);
    if (!touched) EXPECT_TRUE(same) << "frame " << t;
  }
  // The window predicting frame 7 sees frames 2..6 only.
  InputClip w0 = make_input(ds, {0, 7});
  InputClip w1 = make_input(mutated, {0, 7});
  EXPECT_EQ(w0.input, w1.input);
  EXPECT_NE(w0.target, w1.target);
}

TEST(Windows, CountsAndWarnings) {
  VideoDataset ds;
  ds.clips = {clip_of(10), clip_of(6), clip_of(5)};
  std::vector<std::string> warnings;
  auto windows = assemble_windows(ds, &warnings);
  ASSERT_EQ(windows.size(), 6u);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_EQ(windows[0].clip, 0);
  EXPECT_EQ(windows[0].target, 5);
  EXPECT_EQ(windows[5].clip, 1);
  EXPECT_EQ(windows[5].target, 5);
}

TEST(Windows, LabelAndChannelLayout) {
  VideoDataset ds;
  ds.clips = {clip_of(10)};
  ds.clips[0].flows[(6 * 256 + 3) * 3 + 2] = 2.5f;
  for (const WindowRef& w : assemble_windows(ds)) {
    InputClip in = make_input(ds, w);
    EXPECT_EQ(in.label, ds.clips[0].labels[w.target]);
    EXPECT_EQ(in.input.shape(), (Shape{5, 16, 16, 4}));
    EXPECT_EQ(in.target.shape(), (Shape{16, 16, 4}));
    EXPECT_EQ(in.input[((4 * 256) + 9) * 4], ds.clips[0].image(w.target - 1)[9]);
  }
  InputClip in = make_input(ds, {0, 6});
  EXPECT_EQ(in.target[3 * 4 + 3], 2.5);
  InputClip sym = make_input(ds, {0, 6}, ImageRange::symmetric);
  EXPECT_DOUBLE_EQ(sym.target[4], 2.0 * in.target[4] - 1.0);

  Tensor inputs, targets;
  make_batch(ds, {{0, 5}, {0, 9}}, ImageRange::unit, inputs, targets);
  EXPECT_EQ(inputs.shape(), (Shape{2, 5, 16, 16, 4}));
  InputClip last = make_input(ds, {0, 9});
  for (int64_t i = 0; i < last.target.numel(); ++i) ASSERT_EQ(targets[last.target.numel() + i], last.target[i]);
}

TEST(DatasetIo, RoundTripIsBitwise) {
  SceneConfig c = SceneConfig::preset("moving-squares", "test");
  c.clips = 2;
  c.frames_per_clip = 70;
  VideoDataset ds = synth_generate(c, 3);
  const auto path = std::filesystem::temp_directory_path() / "ctdg_data_test.ctds";
  save_dataset(path, ds);
  VideoDataset back = load_dataset(path);
  EXPECT_TRUE(back == ds);
  EXPECT_EQ(encode_dataset(back), read_file_bytes(path));
  std::filesystem::remove(path);
}

TEST(DatasetIo, TruncationAndVersionErrors) {
  VideoDataset ds;
  ds.clips = {clip_of(7)};
  std::string bytes = encode_dataset(ds);
  try {
    decode_dataset(bytes.substr(0, bytes.size() - 3));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
  bytes[4] = 9;
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported dataset version"), std::string::npos);
  }
}
