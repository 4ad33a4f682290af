#include "ctdg/generator.hpp"

#include <cmath>

namespace ctdg {

std::vector<double> positional_encoding(int64_t p, int64_t dims) {
  if (dims <= 0 || dims % 2 != 0) throw ConfigError("positional encoding dimension must be even and positive");
  std::vector<double> pe(static_cast<size_t>(dims));
  for (int64_t i = 0; i < dims / 2; ++i) {
    const double denom = std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dims));
    const double angle = static_cast<double>(p) / denom;
    pe[static_cast<size_t>(2 * i)] = std::sin(angle);
    pe[static_cast<size_t>(2 * i + 1)] = std::cos(angle);
  }
  return pe;
}

Var attention_weights(const Var& feat, const Var& beta) {
  return ops::softmax(ops::scale_rows(ops::query_memory_cosine(feat), beta), -1);
}

// ----------------------------------------------------------------- config

GeneratorConfig GeneratorConfig::paper() { return GeneratorConfig{}; }

GeneratorConfig GeneratorConfig::desk() {
  GeneratorConfig c;
  c.encoder_channels = {8, 8, 16, 32, 32};
  c.heads = 4;
  c.head_channels = 8;
  c.decoder_channels = {32, 32, 16, 8};
  c.final_channels = 8;
  return c;
}

GeneratorConfig GeneratorConfig::tiny() {
  GeneratorConfig c;
  c.encoder_channels = {2, 3, 3, 4, 4};
  c.heads = 2;
  c.head_channels = 2;
  c.decoder_channels = {4, 3, 3, 2};
  c.final_channels = 2;
  c.temperature_hidden = 3;
  return c;
}

void GeneratorConfig::validate() const {
  for (int64_t c : encoder_channels)
    if (c <= 0) throw ConfigError("encoder channels must be positive");
  for (int64_t c : decoder_channels)
    if (c <= 0) throw ConfigError("decoder channels must be positive");
  if (heads <= 0 || head_channels <= 0) throw ConfigError("heads and head channels must be positive");
  if (final_channels <= 0 || temperature_hidden <= 0) throw ConfigError("layer widths must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
}

void GeneratorConfig::write(KeyValue& kv) const {
  kv.set("generator.encoder_channels", join_ints({encoder_channels.begin(), encoder_channels.end()}));
  kv.set("generator.heads", heads);
  kv.set("generator.head_channels", head_channels);
  kv.set("generator.decoder_channels", join_ints({decoder_channels.begin(), decoder_channels.end()}));
  kv.set("generator.final_channels", final_channels);
  kv.set("generator.temperature_hidden", temperature_hidden);
  kv.set("generator.dropout", dropout);
  kv.set("generator.skip_level1", skip_level1);
  kv.set("generator.unet_skip_only", unet_skip_only);
}

GeneratorConfig GeneratorConfig::read(const KeyValue& kv) {
  GeneratorConfig c;
  auto copy_ints = [&](const std::string& key, auto& dst) {
    const auto v = kv.get_ints(key, {dst.begin(), dst.end()});
    if (v.size() != dst.size()) {
      throw ConfigError("'" + key + "' needs " + std::to_string(dst.size()) + " entries, got " +
                        std::to_string(v.size()));
    }
    std::copy(v.begin(), v.end(), dst.begin());
  };
  copy_ints("generator.encoder_channels", c.encoder_channels);
  copy_ints("generator.decoder_channels", c.decoder_channels);
  c.heads = kv.get_int("generator.heads", c.heads);
  c.head_channels = kv.get_int("generator.head_channels", c.head_channels);
  c.final_channels = kv.get_int("generator.final_channels", c.final_channels);
  c.temperature_hidden = kv.get_int("generator.temperature_hidden", c.temperature_hidden);
  c.dropout = kv.get_double("generator.dropout", c.dropout);
  c.skip_level1 = kv.get_bool("generator.skip_level1", c.skip_level1);
  c.unet_skip_only = kv.get_bool("generator.unet_skip_only", c.unet_skip_only);
  c.validate();
  return c;
}

std::array<int64_t, 4> gate_dilations(int64_t level) {
  switch (level) {
    case 2: return {1, 2, 4, 1};
    case 3: return {1, 2, 2, 1};
    case 4: return {1, 1, 2, 1};
    case 5: return {1, 1, 1, 1};
    default: throw ConfigError("no attention at encoder level " + std::to_string(level));
  }
}

// ------------------------------------------------------------ construction

Generator::Generator(ParameterStore& store, const GeneratorConfig& config, Rng init_rng, std::string prefix)
    : config_(config), prefix_(std::move(prefix)) {
  config_.validate();
  const auto& ch = config_.encoder_channels;
  const int64_t C = config_.attention_channels();
  const std::string enc = prefix_ + ".encoder.block";

  for (int64_t l = 1; l <= kEncoderLevels; ++l) {
    EncoderBlock b;
    const std::string name = enc + std::to_string(l);
    const int64_t in = l == 1 ? 4 : ch[l - 2], out = ch[l - 1];
    b.conv1 = Conv2dLayer(store, name + ".conv1", 3, in, out, {.stride = l == 1 ? 1 : 2}, init_rng);
    b.bn = BatchNormLayer(store, name + ".bn", out);
    if (l > 1) b.conv2 = Conv2dLayer(store, name + ".conv2", 3, out, out, {}, init_rng);
    b.dropout = l >= 4;
    encoder_.push_back(b);
  }

  for (int64_t l = 2; l <= kEncoderLevels; ++l) {
    AttentionModule m;
    m.level = l;
    const std::string name = prefix_ + ".attention.level" + std::to_string(l);
    if (config_.unet_skip_only) {
      m.skip_project = Conv2dLayer(store, name + ".skip_project", 1, kClipLength * ch[l - 1], C, {}, init_rng);
    } else {
      m.project = Conv2dLayer(store, name + ".project", 1, ch[l - 1], C, {}, init_rng);
      const int64_t qdim = config_.head_channels + kPositionalDims;
      m.temperature_hidden = DenseLayer(store, name + ".temperature.hidden", qdim, config_.temperature_hidden, init_rng);
      m.temperature_out = DenseLayer(store, name + ".temperature.out", config_.temperature_hidden, 1, init_rng);
      // softplus(log(e - 1)) = 1, so every head starts at beta = 1.
      m.temperature_out.weight->value.mutable_value().fill(0.0);
      m.temperature_out.bias->value.mutable_value().fill(std::log(std::exp(1.0) - 1.0));
      const auto dil = gate_dilations(l);
      for (int i = 0; i < 5; ++i) {
        const int64_t in = i == 0 ? 2 * C : C;
        const int64_t d = i < 4 ? dil[static_cast<size_t>(i)] : 1;
        m.gate_conv[static_cast<size_t>(i)] =
            Conv2dLayer(store, name + ".gate.conv" + std::to_string(i + 1), 3, in, C, {.dilation = d}, init_rng);
        if (i < 3) m.gate_bn[static_cast<size_t>(i)] = BatchNormLayer(store, name + ".gate.bn" + std::to_string(i + 1), C);
      }
    }
    attention_.push_back(m);
  }

  const auto& dec = config_.decoder_channels;
  for (int64_t j = 0; j < 4; ++j) {
    DecoderStage s;
    const std::string name = prefix_ + ".decoder.stage" + std::to_string(j + 1);
    const int64_t in = j == 0 ? C : dec[j - 1];
    s.up = ConvTranspose2dLayer(store, name + ".up", 3, in, dec[j], init_rng);
    // Stages 1-3 merge attention levels 4, 3, 2; stage 4 optionally level 1.
    int64_t skip = 0;
    if (j < 3) skip = C;
    if (j == 3 && config_.skip_level1) skip = ch[0];
    if (skip > 0) {
      s.has_merge = true;
      s.merge = Conv2dLayer(store, name + ".merge", 3, dec[j] + skip, dec[j], {}, init_rng);
    }
    decoder_.push_back(s);
  }
  final_conv_ = Conv2dLayer(store, prefix_ + ".decoder.final", 3, dec[3], config_.final_channels, {}, init_rng);
  out_conv_ = Conv2dLayer(store, prefix_ + ".decoder.out", 1, config_.final_channels, 4, {}, init_rng);
}

// ----------------------------------------------------------------- forward

std::vector<Var> Generator::encode(const Var& frames, const ForwardMode& mode, Rng* dropout_rng) const {
  if (frames.value().rank() != 4 || frames.dim(3) != 4)
    throw ShapeError("encoder expects [N, h, w, 4] frames, got " + shape_str(frames.shape()));
  const int64_t h = frames.dim(1), w = frames.dim(2);
  if (h % 16 != 0 || w % 16 != 0)
    throw ConfigError("frame extents must be multiples of 16, got " + std::to_string(h) + "x" + std::to_string(w));
  if (mode.training && config_.dropout > 0.0 && !dropout_rng)
    throw ConfigError("training-mode forward needs a dropout generator");
  std::vector<Var> levels;
  Var x = frames;
  for (const EncoderBlock& b : encoder_) {
    x = b.bn.forward(ops::selu(b.conv1.forward(x)), mode.batch_norm());
    if (b.conv2.weight) {
      if (b.dropout && config_.dropout > 0.0 && mode.training) x = ops::dropout(x, config_.dropout, true, *dropout_rng);
      x = ops::selu(b.conv2.forward(x));
    }
    levels.push_back(x);
  }
  return levels;
}

namespace {

// [n, T, ...] -> time step t as [n, ...]
Var time_step(const Var& x, int64_t t) {
  Shape s = x.shape();
  Var one = ops::slice(x, 1, t, t + 1);
  s.erase(s.begin() + 1);
  return ops::reshape(one, s);
}

}  // namespace

Var Generator::attend(const AttentionModule& m, const Var& level_map, int64_t n, const ForwardMode& mode,
                      AttentionLevel* record) const {
  const int64_t T = kClipLength, h = level_map.dim(1), w = level_map.dim(2);
  const int64_t K = config_.heads, ch = config_.head_channels, C = config_.attention_channels();
  const Var per_clip = ops::reshape(level_map, {n, T, h, w, level_map.dim(3)});

  if (config_.unet_skip_only) {
    std::vector<Var> frames;
    for (int64_t t = 0; t < T; ++t) frames.push_back(time_step(per_clip, t));
    return m.skip_project.forward(ops::concat(frames, -1));
  }

  // Shared 1x1 projection to K heads of ch channels.
  const Var projected = ops::reshape(m.project.forward(level_map), {n, T, h, w, C});
  const Var pooled = ops::reshape(ops::global_average_pool(projected), {n, T, K, ch});
  Tensor pe({n, T, K, kPositionalDims});
  for (int64_t t = 0; t < T; ++t) {
    const auto enc = positional_encoding(T - 1 - t);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t k = 0; k < K; ++k)
        std::copy(enc.begin(), enc.end(), pe.data().begin() + ((b * T + t) * K + k) * kPositionalDims);
  }
  const Var feat = ops::concat({pooled, Var(std::move(pe))}, -1);  // [n, T, K, ch + 8]

  const Var query = ops::reshape(time_step(feat, T - 1), {n * K, ch + kPositionalDims});
  const Var hidden = ops::selu(m.temperature_hidden.forward(query));
  const Var beta = ops::reshape(ops::softplus(m.temperature_out.forward(hidden)), {n, K});

  const Var weights = attention_weights(feat, beta);
  const Var attended = ops::attend_memories(projected, weights);  // H^MH
  const Var current = time_step(projected, T - 1);                // F^MH

  const auto bn = mode.batch_norm();
  Var g = ops::concat({current, attended}, -1);
  for (size_t i = 0; i < 3; ++i) g = ops::selu(m.gate_bn[i].forward(m.gate_conv[i].forward(g), bn));
  g = m.gate_conv[4].forward(m.gate_conv[3].forward(g));
  g = ops::sigmoid(g);

  if (record) {
    record->level = m.level;
    record->weights = weights.value();
    record->beta = beta.value();
    record->gate = g.value();
  }
  return ops::gate_blend(g, current, attended);
}

GeneratorOutput Generator::forward(const Var& clip, const ForwardMode& mode, Rng* dropout_rng) const {
  if (clip.value().rank() != 5 || clip.dim(1) != kClipLength || clip.dim(4) != 4) {
    throw ShapeError("generator expects [n, " + std::to_string(kClipLength) + ", h, w, 4] clips, got " +
                     shape_str(clip.shape()));
  }
  const int64_t n = clip.dim(0), h = clip.dim(2), w = clip.dim(3);
  const std::vector<Var> levels = encode(ops::reshape(clip, {n * kClipLength, h, w, 4}), mode, dropout_rng);

  GeneratorOutput out;
  std::vector<Var> integrated;  // levels 2..5
  for (const AttentionModule& m : attention_) {
    AttentionLevel record;
    integrated.push_back(attend(m, levels[static_cast<size_t>(m.level - 1)], n, mode,
                                config_.unet_skip_only ? nullptr : &record));
    if (!config_.unet_skip_only) out.trace.push_back(std::move(record));
  }

  Var x = integrated[3];
  for (size_t j = 0; j < decoder_.size(); ++j) {
    const DecoderStage& s = decoder_[j];
    x = ops::selu(s.up.forward(x));
    if (!s.has_merge) continue;
    Var skip;
    if (j < 3) {
      skip = integrated[2 - j];
    } else {
      const Var l1 = levels[0];
      skip = time_step(ops::reshape(l1, {n, kClipLength, h, w, l1.dim(3)}), kClipLength - 1);
    }
    x = ops::selu(s.merge.forward(ops::concat({x, skip}, -1)));
  }
  x = ops::selu(final_conv_.forward(x));
  out.prediction = out_conv_.forward(x);
  return out;
}

}  // namespace ctdg
