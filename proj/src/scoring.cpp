#include "ctdg/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ctdg/checkpoint.hpp"

namespace ctdg {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
T parse_field(const std::string& s, int64_t line, const char* what) {
  T v{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw ValidationError("score CSV line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  return v;
}

}  // namespace

double prediction_error(const Tensor& prediction, const Tensor& truth) {
  if (prediction.shape() != truth.shape())
    throw ShapeError("prediction " + shape_str(prediction.shape()) + " does not match " + shape_str(truth.shape()));
  double s = 0.0;
  for (int64_t i = 0; i < truth.numel(); ++i) {
    const double d = prediction[i] - truth[i];
    s += d * d;
  }
  return s / static_cast<double>(truth.numel());
}

double log_error(double e_mse) { return std::log10(e_mse + kErrorFloor); }

double psnr(const Tensor& prediction, const Tensor& truth) {
  const double e = prediction_error(prediction, truth);
  const double peak = *std::max_element(prediction.data().begin(), prediction.data().end());
  if (!(peak > 0.0)) throw NumericError("psnr undefined for a prediction without positive values");
  return 10.0 * std::log10(peak / (e + kErrorFloor));
}

std::vector<double> regularity(const std::vector<double>& e_t, std::vector<std::string>* warnings) {
  if (e_t.empty()) return {};
  const auto [lo, hi] = std::minmax_element(e_t.begin(), e_t.end());
  const double mn = *lo, mx = *hi;
  std::vector<double> r(e_t.size(), 1.0);
  if (!(mx > mn)) {
    if (warnings) warnings->push_back("constant error series; regularity set to 1");
    return r;
  }
  for (size_t i = 0; i < e_t.size(); ++i) r[i] = 1.0 - (e_t[i] - mn) / (mx - mn);
  return r;
}

double rank_auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  if (scores.size() != labels.size()) throw ValidationError("auc: scores and labels differ in length");
  const size_t n = scores.size();
  double positives = 0.0;
  for (uint8_t l : labels) positives += l != 0;
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0.0 || negatives == 0.0)
    throw ValidationError("AUC is undefined: labels contain a single class");
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("auc: NaN score");
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    // Ranks i+1..j+1 share their mean.
    const double midrank = 0.5 * static_cast<double>(i + j + 2);
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum += midrank;
    i = j + 1;
  }
  const double u = rank_sum - positives * (positives + 1.0) / 2.0;
  return u / (positives * negatives);
}

double regularity_auc(const std::vector<double>& r, const std::vector<uint8_t>& labels) {
  std::vector<double> neg(r.size());
  std::transform(r.begin(), r.end(), neg.begin(), [](double v) { return -v; });
  return rank_auc(neg, labels);
}

Normalization parse_normalization(const std::string& s) {
  if (s == "per-clip") return Normalization::per_clip;
  if (s == "global") return Normalization::global;
  throw ConfigError("unknown normalization '" + s + "' (per-clip or global)");
}

std::string to_string(Normalization n) { return n == Normalization::per_clip ? "per-clip" : "global"; }

ScoreSource parse_score_source(const std::string& s) {
  if (s == "error") return ScoreSource::error;
  if (s == "psnr") return ScoreSource::psnr;
  throw ConfigError("unknown score source '" + s + "' (error or psnr)");
}

std::string to_string(ScoreSource s) { return s == ScoreSource::error ? "error" : "psnr"; }

void normalize_scores(ScoreSeries& series, Normalization mode, ScoreSource source, std::vector<std::string>* warnings) {
  auto apply = [&](size_t begin, size_t end, const std::string& scope) {
    std::vector<double> x;
    // Regularity falls with e_t and rises with PSNR.
    for (size_t i = begin; i < end; ++i)
      x.push_back(source == ScoreSource::error ? series.rows[i].e_t : -series.rows[i].psnr);
    std::vector<std::string> local;
    const std::vector<double> r = regularity(x, &local);
    for (size_t i = begin; i < end; ++i) series.rows[i].regularity = r[i - begin];
    if (warnings)
      for (const std::string& w : local) warnings->push_back(scope + ": " + w);
  };
  if (mode == Normalization::global) {
    apply(0, series.rows.size(), "test set");
    return;
  }
  for (size_t i = 0; i < series.rows.size();) {
    size_t j = i;
    while (j < series.rows.size() && series.rows[j].clip == series.rows[i].clip) ++j;
    apply(i, j, "clip " + std::to_string(series.rows[i].clip));
    i = j;
  }
}

ScoreSeries score_dataset(const Generator& generator, const VideoDataset& dataset, const ScoreOptions& options,
                          std::vector<std::string>* warnings) {
  if (options.batch_size < 1) throw ConfigError("score batch size must be >= 1");
  const std::vector<WindowRef> windows = assemble_windows(dataset, warnings);
  if (windows.empty()) throw ValidationError("dataset has no clip long enough to score");
  ScoreSeries series;
  NoGradGuard guard;
  Tensor inputs, targets;
  for (size_t start = 0; start < windows.size(); start += options.batch_size) {
    const size_t end = std::min(windows.size(), start + static_cast<size_t>(options.batch_size));
    const std::vector<WindowRef> part(windows.begin() + start, windows.begin() + end);
    make_batch(dataset, part, options.range, inputs, targets);
    const Tensor pred = generator.forward(Var(inputs), {}).prediction.value();
    const int64_t frame = pred.numel() / pred.dim(0);
    const Shape fs{pred.dim(1), pred.dim(2), pred.dim(3)};
    for (size_t b = 0; b < part.size(); ++b) {
      Tensor p(fs), t(fs);
      std::copy_n(pred.data().begin() + b * frame, frame, p.data().begin());
      std::copy_n(targets.data().begin() + b * frame, frame, t.data().begin());
      ScoreRow row;
      row.clip = part[b].clip;
      row.frame = part[b].target;
      row.e_mse = prediction_error(p, t);
      if (!std::isfinite(row.e_mse))
        throw NumericError("non-finite prediction error at clip " + std::to_string(row.clip) + " frame " +
                           std::to_string(row.frame));
      row.e_t = log_error(row.e_mse);
      row.label = dataset.clips[row.clip].labels[row.frame];
      if (options.source == ScoreSource::psnr) row.psnr = psnr(p, t);
      series.rows.push_back(row);
    }
  }
  normalize_scores(series, options.normalization, options.source, warnings);
  return series;
}

std::string scores_to_csv(const ScoreSeries& series) {
  std::ostringstream os;
  os << kScoreCsvHeader << '\n';
  for (const ScoreRow& r : series.rows)
    os << r.clip << ',' << r.frame << ',' << fmt(r.e_mse) << ',' << fmt(r.e_t) << ',' << fmt(r.regularity) << ','
       << static_cast<int>(r.label) << '\n';
  return os.str();
}

void write_scores(const std::filesystem::path& path, const ScoreSeries& series) {
  write_file_bytes(path, scores_to_csv(series));
}

ScoreSeries scores_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kScoreCsvHeader)
    throw ValidationError(std::string("score CSV must start with the header ") + kScoreCsvHeader);
  ScoreSeries series;
  int64_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw ValidationError("score CSV line " + std::to_string(n) + ": expected 6 fields");
    ScoreRow r;
    r.clip = parse_field<int64_t>(f[0], n, "clip");
    r.frame = parse_field<int64_t>(f[1], n, "frame");
    r.e_mse = parse_field<double>(f[2], n, "e_mse");
    r.e_t = parse_field<double>(f[3], n, "e_t");
    r.regularity = parse_field<double>(f[4], n, "regularity");
    const int label = parse_field<int>(f[5], n, "label");
    if (label != 0 && label != 1) throw ValidationError("score CSV line " + std::to_string(n) + ": label must be 0 or 1");
    r.label = static_cast<uint8_t>(label);
    series.rows.push_back(r);
  }
  return series;
}

ScoreSeries read_scores(const std::filesystem::path& path) { return scores_from_csv(read_file_bytes(path)); }

std::string EvalSummary::report() const {
  std::ostringstream os;
  char auc_text[32];
  std::snprintf(auc_text, sizeof(auc_text), "%.4f", auc);
  os << "Frame-level AUC " << auc_text << " over " << frames << " frames (" << anomalous << " anomalous)\n";
  os << "auc=" << fmt(auc) << '\n' << "frames=" << frames << '\n' << "anomalous=" << anomalous << '\n';
  return os.str();
}

EvalSummary evaluate(const ScoreSeries& series) {
  std::vector<double> r;
  std::vector<uint8_t> labels;
  for (const ScoreRow& row : series.rows) {
    r.push_back(row.regularity);
    labels.push_back(row.label);
  }
  EvalSummary s;
  s.frames = static_cast<int64_t>(r.size());
  s.anomalous = std::count(labels.begin(), labels.end(), 1);
  s.auc = regularity_auc(r, labels);
  return s;
}

PerturbReport perturb_experiment(const Generator& generator, const VideoDataset& dataset, ImageRange range,
                                 const PerturbConfig& config) {
  if (generator.config().unet_skip_only) throw ConfigError("perturb needs an attention generator");
  if (config.windows < 1) throw ConfigError("perturb needs at least one window");
  std::vector<WindowRef> pool = assemble_windows(dataset);
  if (pool.empty()) throw ValidationError("dataset has no clip long enough to perturb");
  const Rng root(config.seed);
  Rng pick = root.substream("perturb.windows");
  Rng noise = root.substream("perturb.noise");
  for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[pick.below(i)]);
  const size_t count = std::min(pool.size(), static_cast<size_t>(config.windows));

  const int64_t memories = kClipLength - 1;
  const int64_t K = generator.config().heads;
  PerturbReport report;
  report.perturbed_by_head.assign(kEncoderLevels - 1, std::vector<double>(K, 0.0));
  report.unperturbed_by_head = report.perturbed_by_head;
  NoGradGuard guard;
  int64_t lower = 0;
  for (size_t w = 0; w < count; ++w) {
    PerturbWindow pw;
    pw.clip = pool[w].clip;
    pw.target = pool[w].target;
    pw.noise_slot = static_cast<int64_t>(pick.below(memories));
    pw.flow_slot = static_cast<int64_t>(pick.below(memories - 1));
    if (pw.flow_slot >= pw.noise_slot) ++pw.flow_slot;
    InputClip in = make_input(dataset, pool[w], range);
    const int64_t frame = in.input.numel() / kClipLength;
    const int64_t pixels = frame / kFrameChannels;
    double* x = in.input.data().data();
    for (int64_t p = 0; p < pixels; ++p) {
      const double z = noise.normal(0.0, config.noise_sigma);
      if (config.control) continue;
      x[pw.noise_slot * frame + p * kFrameChannels] += z;
      for (int64_t c = 1; c < kFrameChannels; ++c) x[pw.flow_slot * frame + p * kFrameChannels + c] *= config.flow_scale;
    }
    Shape s = in.input.shape();
    s.insert(s.begin(), 1);
    const GeneratorOutput out = generator.forward(Var(Tensor(s, std::vector<double>(in.input.data().begin(),
                                                                                    in.input.data().end()))),
                                                  {});
    double pert = 0.0, other = 0.0;
    for (size_t l = 0; l < out.trace.size(); ++l) {
      const Tensor& a = out.trace[l].weights;  // [1, K, memories]
      for (int64_t k = 0; k < K; ++k) {
        double row = 0.0, hp = 0.0, ho = 0.0;
        for (int64_t t = 0; t < memories; ++t) {
          const double v = a[k * memories + (memories - 1 - t)];
          row += v;
          (t == pw.noise_slot || t == pw.flow_slot ? hp : ho) += v;
        }
        report.max_row_sum_error = std::max(report.max_row_sum_error, std::abs(row - 1.0));
        report.perturbed_by_head[l][k] += hp / 2.0;
        report.unperturbed_by_head[l][k] += ho / static_cast<double>(memories - 2);
        pert += hp / 2.0;
        other += ho / static_cast<double>(memories - 2);
      }
    }
    const double cells = static_cast<double>(out.trace.size() * K);
    pw.perturbed_weight = pert / cells;
    pw.unperturbed_weight = other / cells;
    lower += pw.perturbed_weight < pw.unperturbed_weight;
    report.windows.push_back(pw);
  }
  for (auto* table : {&report.perturbed_by_head, &report.unperturbed_by_head})
    for (auto& level : *table)
      for (double& v : level) v /= static_cast<double>(count);
  report.fraction_lower = static_cast<double>(lower) / static_cast<double>(count);
  return report;
}

std::string PerturbReport::report() const {
  std::ostringstream os;
  double p = 0.0, u = 0.0;
  for (const PerturbWindow& w : windows) {
    p += w.perturbed_weight;
    u += w.unperturbed_weight;
  }
  const double n = static_cast<double>(windows.size());
  os << "Attention on perturbed memories over " << windows.size() << " windows\n";
  for (size_t l = 0; l < perturbed_by_head.size(); ++l) {
    os << "  level " << l + 2 << ':';
    for (size_t k = 0; k < perturbed_by_head[l].size(); ++k) {
      char cell[48];
      std::snprintf(cell, sizeof(cell), " h%zu %.4f/%.4f", k, perturbed_by_head[l][k], unperturbed_by_head[l][k]);
      os << cell;
    }
    os << '\n';
  }
  os << "windows=" << windows.size() << '\n'
     << "mean_perturbed_weight=" << fmt(p / n) << '\n'
     << "mean_unperturbed_weight=" << fmt(u / n) << '\n'
     << "fraction_lower=" << fmt(fraction_lower) << '\n'
     << "max_row_sum_error=" << fmt(max_row_sum_error) << '\n';
  return os.str();
}

std::string PerturbReport::windows_csv() const {
  std::ostringstream os;
  os << "clip,target,noise_slot,flow_slot,perturbed_weight,unperturbed_weight\n";
  for (const PerturbWindow& w : windows)
    os << w.clip << ',' << w.target << ',' << w.noise_slot << ',' << w.flow_slot << ',' << fmt(w.perturbed_weight)
       << ',' << fmt(w.unperturbed_weight) << '\n';
  return os.str();
}

}  // namespace ctdg
