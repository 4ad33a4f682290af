#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctdg/data.hpp"
#include "ctdg/generator.hpp"

namespace ctdg {

inline constexpr double kErrorFloor = 1e-12;

/// Mean squared error over all elements.
double prediction_error(const Tensor& prediction, const Tensor& truth);
/// log10(e_mse + 1e-12).
double log_error(double e_mse);
/// 10 log10(max(prediction) / (e_mse + 1e-12)).
double psnr(const Tensor& prediction, const Tensor& truth);

/// 1 - (x - min) / (max - min); a constant series maps to ones and adds a
/// warning when `warnings` is given.
std::vector<double> regularity(const std::vector<double>& e_t, std::vector<std::string>* warnings = nullptr);

/// Mann-Whitney AUC with midranks; higher scores indicate the positive
/// (label 1) class. Throws ValidationError for single-class labels.
double rank_auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels);
/// Frame-level AUC where low regularity indicates an anomaly.
double regularity_auc(const std::vector<double>& regularity, const std::vector<uint8_t>& labels);

enum class Normalization { per_clip, global };
enum class ScoreSource { error, psnr };

Normalization parse_normalization(const std::string& s);
std::string to_string(Normalization n);
ScoreSource parse_score_source(const std::string& s);
std::string to_string(ScoreSource s);

struct ScoreRow {
  int64_t clip = 0;
  int64_t frame = 0;
  double e_mse = 0.0;
  double e_t = 0.0;
  double regularity = 1.0;
  uint8_t label = 0;
  double psnr = 0.0;  // not written to CSV
};

struct ScoreSeries {
  std::vector<ScoreRow> rows;
};

/// Fills `regularity` from e_t (or from PSNR, where higher is more regular).
void normalize_scores(ScoreSeries& series, Normalization mode, ScoreSource source = ScoreSource::error,
                      std::vector<std::string>* warnings = nullptr);

struct ScoreOptions {
  ImageRange range = ImageRange::unit;
  Normalization normalization = Normalization::per_clip;
  ScoreSource source = ScoreSource::error;
  int64_t batch_size = 8;
};

/// Predicts every frame that has a full input window (all but the first
/// five of each clip) and scores it.
ScoreSeries score_dataset(const Generator& generator, const VideoDataset& dataset, const ScoreOptions& options,
                          std::vector<std::string>* warnings = nullptr);

inline constexpr const char* kScoreCsvHeader = "clip,frame,e_mse,e_t,regularity,label";
void write_scores(const std::filesystem::path& path, const ScoreSeries& series);
std::string scores_to_csv(const ScoreSeries& series);
ScoreSeries read_scores(const std::filesystem::path& path);
ScoreSeries scores_from_csv(const std::string& text);

struct EvalSummary {
  int64_t frames = 0;
  int64_t anomalous = 0;
  double auc = 0.0;
  /// Human-readable line followed by key=value lines.
  std::string report() const;
};

EvalSummary evaluate(const ScoreSeries& series);

struct PerturbConfig {
  int64_t windows = 100;
  double noise_sigma = 0.1;
  double flow_scale = 0.9;
  // Record the slots but leave the frames untouched.
  bool control = false;
  uint64_t seed = 7;
};

struct PerturbWindow {
  int64_t clip = 0;
  int64_t target = 0;
  int64_t noise_slot = 0;  // input time step, 0..3
  int64_t flow_slot = 0;
  double perturbed_weight = 0.0;    // mean over levels, heads and both slots
  double unperturbed_weight = 0.0;  // mean over the other memory slots
};

struct PerturbReport {
  std::vector<PerturbWindow> windows;
  // [level][head] mean weight on perturbed and unperturbed slots.
  std::vector<std::vector<double>> perturbed_by_head;
  std::vector<std::vector<double>> unperturbed_by_head;
  double fraction_lower = 0.0;
  double max_row_sum_error = 0.0;

  std::string report() const;
  std::string windows_csv() const;
};

/// Perturbs two distinct memory frames per sampled window (Gaussian noise on
/// one image, scaled flow on another) and records the attention they draw.
PerturbReport perturb_experiment(const Generator& generator, const VideoDataset& dataset, ImageRange range,
                                 const PerturbConfig& config);

}  // namespace ctdg
