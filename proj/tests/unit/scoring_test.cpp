#include <gtest/gtest.h>

#include <cmath>

#include "ctdg/scoring.hpp"

using namespace ctdg;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
double pairwise_auc(const std::vector<double>& s, const std::vector<uint8_t>& y) {
  double wins = 0.0, pairs = 0.0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return wins / pairs;
}

VideoDataset small_test_set() {
  SceneConfig sc = SceneConfig::preset("moving-squares", "test");
  sc.resolution = 32;
  sc.clips = 2;
  sc.frames_per_clip = 14;
  sc.anomaly_start_min = 7;
  sc.anomaly_start_max = 9;
  sc.min_size = 5;
  sc.max_size = 8;
  sc.novel_radius = 4;
  return synth_generate(sc, 9);
}

}  // namespace

TEST(PredictionError, Anchors) {
  Rng rng(1);
  Tensor a = random_tensor({8, 8, 4}, rng);
  EXPECT_EQ(prediction_error(a, a), 0.0);
  Tensor b = a;
  for (double& v : b.data()) v += 1.0;
  EXPECT_NEAR(prediction_error(b, a), 1.0, 1e-15);
  Tensor c = random_tensor({8, 8, 4}, rng);
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += (c[i] - a[i]) * (c[i] - a[i]);
  EXPECT_EQ(prediction_error(c, a), s / 256.0);
  EXPECT_THROW(prediction_error(c, Tensor({8, 8, 3})), ShapeError);
}

TEST(Regularity, AffineEndpointsAndFloor) {
  const auto r = regularity({1.0, 2.0, 3.0});
  EXPECT_EQ(r, (std::vector<double>{1.0, 0.5, 0.0}));
  EXPECT_NEAR(log_error(0.0), -12.0, 1e-12);
  EXPECT_TRUE(std::isfinite(log_error(0.0)));
  EXPECT_NEAR(log_error(0.01), -2.0, 1e-9);
}

TEST(Regularity, ConstantSeriesWarns) {
  std::vector<std::string> warnings;
  EXPECT_EQ(regularity({-3.0, -3.0, -3.0}, &warnings), (std::vector<double>(3, 1.0)));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("constant"), std::string::npos);
}

TEST(Regularity, OrderReversalAndRange) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> e(30);
    for (double& v : e) v = rng.uniform(-5.0, 0.0);
    const auto r = regularity(e);
    for (size_t i = 0; i < e.size(); ++i) {
      EXPECT_GE(r[i], 0.0);
      EXPECT_LE(r[i], 1.0);
      for (size_t j = 0; j < e.size(); ++j)
        if (e[i] < e[j]) EXPECT_GT(r[i], r[j]);
    }
  }
}

TEST(Psnr, LogarithmIdentities) {
  Rng rng(3);
  Tensor truth = random_tensor({8, 8, 4}, rng, 0.0, 1.0);
  Tensor p1 = truth, p2 = truth;
  // Offsets of 0.1 and 0.1*sqrt(2) on one element: the MSE doubles, the peak is unchanged.
  const int64_t k = std::min_element(truth.data().begin(), truth.data().end()) - truth.data().begin();
  p1[k] = truth[k] - 0.1;
  p2[k] = truth[k] - 0.1 * std::sqrt(2.0);
  EXPECT_NEAR(psnr(p1, truth) - psnr(p2, truth), 10.0 * std::log10(2.0), 1e-6);  // the 1e-12 floor shifts it slightly
  EXPECT_NEAR(10.0 * std::log10(2.0), 3.0103, 1e-4);
  EXPECT_TRUE(std::isfinite(psnr(truth, truth)));
  EXPECT_GT(psnr(truth, truth), 100.0);
  EXPECT_EQ(psnr(p1, truth), psnr(p1, truth));
  EXPECT_THROW(psnr(Tensor({2, 2, 1}, -1.0), Tensor({2, 2, 1}, 0.0)), NumericError);
}

TEST(Auc, Anchors) {
  EXPECT_EQ(rank_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_EQ(rank_auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}), 0.0);
  EXPECT_EQ(rank_auc({0.5, 0.5}, {0, 1}), 0.5);
  // Low regularity marks anomalies.
  EXPECT_EQ(regularity_auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}), 1.0);
  EXPECT_THROW(rank_auc({0.1, 0.2}, {1, 1}), ValidationError);
  EXPECT_THROW(rank_auc({0.1, 0.2}, {0, 0}), ValidationError);
  EXPECT_THROW(rank_auc({0.1}, {0, 1}), ValidationError);
}

TEST(Auc, MatchesPairwiseOracleWithTies) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<uint8_t> y(n);
    const uint64_t levels = 1 + rng.below(30);  // few levels force ties
    for (size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels));
      y[i] = rng.uniform() < 0.3;
    }
    y[0] = 1;
    y[1] = 0;
    const double a = rank_auc(s, y);
    EXPECT_EQ(a, pairwise_auc(s, y));
    std::vector<double> e(n), aff(n);
    for (size_t i = 0; i < n; ++i) {
      e[i] = std::exp(s[i]);
      aff[i] = 3.0 * s[i] + 2.0;
    }
    EXPECT_EQ(rank_auc(e, y), a);
    EXPECT_EQ(rank_auc(aff, y), a);
  }
}

TEST(Auc, NegationComplementsWithoutTies) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(60), neg(60);
    std::vector<uint8_t> y(60);
    for (size_t i = 0; i < 60; ++i) {
      s[i] = rng.uniform();
      neg[i] = -s[i];
      y[i] = i % 3 == 0;
    }
    EXPECT_NEAR(rank_auc(neg, y), 1.0 - rank_auc(s, y), 1e-15);
  }
}

TEST(Scores, CsvRoundTripAndValidation) {
  ScoreSeries s;
  s.rows.push_back({0, 5, 0.0123, std::log10(0.0123), 0.75, 0});
  s.rows.push_back({1, 7, 1.0 / 3.0, std::log10(1.0 / 3.0), 0.0, 1});
  const std::string csv = scores_to_csv(s);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "clip,frame,e_mse,e_t,regularity,label");
  EXPECT_EQ(scores_to_csv(scores_from_csv(csv)), csv);
  ScoreSeries back = scores_from_csv(csv);
  EXPECT_EQ(back.rows[1].e_mse, 1.0 / 3.0);
  EXPECT_THROW(scores_from_csv("clip,frame\n"), ValidationError);
  EXPECT_THROW(scores_from_csv(std::string(kScoreCsvHeader) + "\n0,5,x,1,1,0\n"), ValidationError);
  EXPECT_THROW(scores_from_csv(std::string(kScoreCsvHeader) + "\n0,5,1,1,1,2\n"), ValidationError);
}

TEST(Scores, NormalizationModes) {
  ScoreSeries s;
  const double e_t[] = {-3, -2, -1, -6, -5, -4};
  for (int i = 0; i < 6; ++i) s.rows.push_back({i / 3, 5 + i % 3, 0.0, e_t[i], 0.0, 0});
  normalize_scores(s, Normalization::per_clip);
  for (int c = 0; c < 2; ++c) {
    EXPECT_EQ(s.rows[c * 3].regularity, 1.0);
    EXPECT_EQ(s.rows[c * 3 + 1].regularity, 0.5);
    EXPECT_EQ(s.rows[c * 3 + 2].regularity, 0.0);
  }
  normalize_scores(s, Normalization::global);
  EXPECT_EQ(s.rows[3].regularity, 1.0);
  EXPECT_EQ(s.rows[2].regularity, 0.0);
  EXPECT_EQ(s.rows[0].regularity, 0.4);
  EXPECT_EQ(parse_normalization("global"), Normalization::global);
  EXPECT_THROW(parse_normalization("clipwise"), ConfigError);
}

TEST(Scores, EvaluateReport) {
  ScoreSeries s;
  for (int i = 0; i < 10; ++i) s.rows.push_back({0, 5 + i, 0.0, 0.0, i < 4 ? 0.1 * i : 0.5 + 0.05 * i, i < 4});
  EvalSummary e = evaluate(s);
  EXPECT_EQ(e.auc, 1.0);
  EXPECT_EQ(e.frames, 10);
  EXPECT_EQ(e.anomalous, 4);
  const std::string text = e.report();
  EXPECT_NE(text.find("auc=1\n"), std::string::npos);
  EXPECT_NE(text.find("frames=10\n"), std::string::npos);
}

TEST(ScoreDataset, OneRowPerScoredFrame) {
  VideoDataset ds = small_test_set();
  ds.clips[1].frames = 9;
  ds.clips[1].images.resize(9 * 32 * 32);
  ds.clips[1].flows.resize(9 * 32 * 32 * 3);
  ds.clips[1].labels.resize(9);
  ParameterStore store;
  Generator gen(store, GeneratorConfig::tiny(), Rng(1));
  std::vector<std::string> warnings;
  ScoreSeries s = score_dataset(gen, ds, {.batch_size = 3}, &warnings);
  ASSERT_EQ(s.rows.size(), static_cast<size_t>((14 - 5) + (9 - 5)));
  EXPECT_EQ(s.rows[0].clip, 0);
  EXPECT_EQ(s.rows[0].frame, 5);
  EXPECT_EQ(s.rows.back().frame, 8);
  for (const ScoreRow& r : s.rows) {
    EXPECT_EQ(r.e_t, log_error(r.e_mse));
    EXPECT_EQ(r.label, ds.clips[r.clip].labels[r.frame]);
    EXPECT_GE(r.regularity, 0.0);
    EXPECT_LE(r.regularity, 1.0);
  }
  // Batch size does not change the scores.
  EXPECT_EQ(scores_to_csv(score_dataset(gen, ds, {.batch_size = 1})), scores_to_csv(s));
  ScoreSeries p = score_dataset(gen, ds, {.source = ScoreSource::psnr});
  EXPECT_EQ(p.rows.size(), s.rows.size());
}

TEST(Perturb, ReportsBalancedBookkeeping) {
  VideoDataset ds = small_test_set();
  ParameterStore store;
  Generator gen(store, GeneratorConfig::tiny(), Rng(2));
  PerturbConfig cfg;
  cfg.windows = 12;
  PerturbReport r = perturb_experiment(gen, ds, ImageRange::unit, cfg);
  ASSERT_EQ(r.windows.size(), 12u);
  EXPECT_LT(r.max_row_sum_error, 1e-6);
  for (const PerturbWindow& w : r.windows) {
    EXPECT_NE(w.noise_slot, w.flow_slot);
    EXPECT_GE(w.noise_slot, 0);
    EXPECT_LT(w.flow_slot, 4);
    // Two perturbed and two untouched slots share the unit mass.
    EXPECT_NEAR(2.0 * w.perturbed_weight + 2.0 * w.unperturbed_weight, 1.0, 1e-9);
  }
  EXPECT_EQ(r.perturbed_by_head.size(), 4u);
  EXPECT_NE(r.report().find("fraction_lower="), std::string::npos);
  // The control run sees the same windows and slots.
  cfg.control = true;
  PerturbReport c = perturb_experiment(gen, ds, ImageRange::unit, cfg);
  for (size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(c.windows[i].target, r.windows[i].target);
    EXPECT_EQ(c.windows[i].noise_slot, r.windows[i].noise_slot);
  }
  GeneratorConfig skip = GeneratorConfig::tiny();
  skip.unet_skip_only = true;
  ParameterStore s2;
  Generator g2(s2, skip, Rng(3));
  EXPECT_THROW(perturb_experiment(g2, ds, ImageRange::unit, cfg), ConfigError);
}
