// Acceptance checks, one line per criterion. Heavy criteria drive the CLI.
#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctdg/checkpoint.hpp"
#include "ctdg/critics.hpp"
#include "ctdg/data.hpp"
#include "ctdg/generator.hpp"
#include "ctdg/gradcheck.hpp"
#include "ctdg/ops.hpp"
#include "ctdg/scoring.hpp"

using namespace ctdg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_dir;
int g_failed = 0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, const char* f = "%.6g") {
  char b[64];
  std::snprintf(b, sizeof(b), f, v);
  return b;
}

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++g_failed;
  std::printf("criterion %2d %-28s %s  %s\n", id, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Runs the CLI, capturing stdout+stderr into <log>.
int cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string("\"") + CTDG_CLI_PATH + "\" " + args + " > \"" + (g_dir / log).string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// key=value lines from a captured log.
std::map<std::string, std::string> keyvalues(const std::string& log) {
  std::map<std::string, std::string> kv;
  std::istringstream in(slurp(g_dir / log));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && line.find(' ') == std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

Tensor normal_tensor(const Shape& s, Rng& rng) {
  Tensor t(s, 0.0);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

Outcome gradients() {
  const auto t0 = Clock::now();
  std::string worst;
  double worst_err = 0.0;
  bool ok = true;
  for (const GradCheckResult& r : run_operation_gradchecks(5, 11, 1e-4)) {
    ok = ok && r.passed() && r.instances >= 5;
    if (r.max_relative_error >= worst_err) {
      worst_err = r.max_relative_error;
      worst = r.name;
    }
  }
  const GradCheckResult g = run_generator_gradcheck(200, 11, 1e-3);
  ok = ok && g.passed() && g.entries_checked >= 200;
  const double t = seconds_since(t0);
  ok = ok && t < 300.0;
  return {ok, "ops max_rel=" + num(worst_err, "%.2e") + " (" + worst + ") generator max_rel=" +
                  num(g.max_relative_error, "%.2e") + " on " + std::to_string(g.entries_checked) + " params, " +
                  num(t, "%.1f") + "s"};
}

Outcome attention() {
  const auto t0 = Clock::now();
  Rng rng(21);
  double sum_err = 0.0, scale_err = 0.0, hull_violation = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const int64_t n = 1 + rng.below(2), T = 2 + rng.below(5), k = 1 + rng.below(4), d = 2 + rng.below(10);
    Tensor feat = normal_tensor({n, T, k, d}, rng);
    Tensor beta({n, k}, 0.0);
    for (double& b : beta.data()) b = rng.uniform(0.05, 8.0);
    const Tensor w = attention_weights(Var(feat), Var(beta)).value();
    for (int64_t row = 0; row < n * k; ++row) {
      double s = 0.0;
      for (int64_t i = 0; i < T - 1; ++i) s += w[row * (T - 1) + i];
      sum_err = std::max(sum_err, std::abs(s - 1.0));
    }
    Tensor scaled = feat;
    for (int64_t v = 0; v < n * T * k; ++v) {
      const double c = std::exp(rng.uniform(-4.0, 4.0));
      for (int64_t j = 0; j < d; ++j) scaled[v * d + j] *= c;
    }
    const Tensor w2 = attention_weights(Var(scaled), Var(beta)).value();
    for (int64_t i = 0; i < w.numel(); ++i) scale_err = std::max(scale_err, std::abs(w2[i] - w[i]));

    // Memory maps with k head groups of c channels each.
    const int64_t h = 1 + rng.below(3), wd = 1 + rng.below(3), c = 1 + rng.below(3);
    const Tensor values = normal_tensor({n, T, h, wd, k * c}, rng);
    const Tensor att = ops::attend_memories(Var(values), Var(w)).value();
    const int64_t plane = h * wd * k * c;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t p = 0; p < plane; ++p) {
        double lo = INFINITY, hi = -INFINITY;
        for (int64_t t = 0; t < T - 1; ++t) {
          const double v = values[(b * T + t) * plane + p];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        const double a = att[b * plane + p];
        hull_violation = std::max({hull_violation, lo - a, a - hi});
      }
  }
  const double t = seconds_since(t0);
  const bool ok = sum_err <= 1e-6 && scale_err <= 1e-9 && hull_violation <= 1e-12 && t < 60.0;
  return {ok, "sum_err=" + num(sum_err, "%.2e") + " rescale_err=" + num(scale_err, "%.2e") +
                  " hull_violation=" + num(std::max(hull_violation, 0.0), "%.2e") + " " + num(t, "%.2f") + "s"};
}

Outcome positional() {
  double worst = 0.0;
  for (int64_t p = 0; p <= 4; ++p) {
    const std::vector<double> pe = positional_encoding(p);
    if (pe.size() != 8) return {false, "wrong dimension"};
    for (int i = 0; i < 4; ++i) {
      const long double angle = static_cast<long double>(p) / std::pow(10000.0L, 2.0L * i / 8.0L);
      worst = std::max(worst, static_cast<double>(std::fabs(pe[2 * i] - std::sin(angle))));
      worst = std::max(worst, static_cast<double>(std::fabs(pe[2 * i + 1] - std::cos(angle))));
    }
  }
  const std::vector<double> pe0 = positional_encoding(0);
  const bool exact0 = pe0 == std::vector<double>{0, 1, 0, 1, 0, 1, 0, 1};
  return {worst <= 1e-12 && exact0, "max_err=" + num(worst, "%.2e") + " PE0 exact=" + (exact0 ? "yes" : "no")};
}

Outcome penalty_identities() {
  std::string got;
  bool ok = true;
  const double expected[3] = {10.0, 0.0, 10.0};
  for (int norm = 0; norm <= 2; ++norm) {
    // Linear critic D(x) = a . x with |a| = norm; its input gradient is a.
    Tensor a({1, 2, 2, 4}, 0.0);
    a[0] = norm;
    Var x(Tensor({1, 2, 2, 4}, 0.3), true);
    backward(ops::sum(ops::mul(x, Var(a))));
    const double p = penalty_from_gradient(Var(x.grad()), 10.0).value().item();
    ok = ok && p == expected[norm];
    got += (norm ? "," : "") + num(p, "%.17g");
  }
  Rng rng(41);
  double violation = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const Tensor real = normal_tensor({3, 4, 4, 4}, rng), fake = normal_tensor({3, 4, 4, 4}, rng);
    const Tensor m = interpolate(real, fake, {rng.uniform(), rng.uniform(), rng.uniform()});
    for (int64_t i = 0; i < m.numel(); ++i)
      violation = std::max({violation, std::min(real[i], fake[i]) - m[i], m[i] - std::max(real[i], fake[i])});
  }
  ok = ok && violation <= 0.0;
  return {ok, "penalties={" + got + "} segment_violation=" + num(std::max(violation, 0.0), "%.2e")};
}

Outcome spectral() {
  Rng rng(51);
  double worst = 0.0;
  for (int m = 0; m < 20; ++m) {
    const int64_t rows = 1 + rng.below(8), cols = 1 + rng.below(12);
    const Tensor w = normal_tensor({rows, cols}, rng);
    Tensor u = normal_tensor({cols}, rng), v = normal_tensor({rows}, rng);
    const double sigma = ops::spectral_sigma(w, {&u, &v}, 50);
    Eigen::MatrixXd dense(rows, cols);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) dense(r, c) = w[r * cols + c];
    const double oracle = Eigen::JacobiSVD<Eigen::MatrixXd>(dense).singularValues()(0);
    worst = std::max(worst, std::abs(sigma - oracle));
  }
  return {worst <= 1e-4, "max |sigma - svd| over 20 matrices = " + num(worst, "%.2e")};
}

Outcome auc_oracle() {
  Rng rng(61);
  int mismatches = 0, monotone_breaks = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int64_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<uint8_t> y(n);
    const int64_t levels = 1 + rng.below(12);  // few levels, many ties
    for (int64_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / 8.0;
      y[i] = static_cast<uint8_t>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    int64_t pos = 0, neg = 0;
    double twice = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      if (!y[i]) continue;
      ++pos;
      for (int64_t j = 0; j < n; ++j)
        if (!y[j]) twice += s[i] > s[j] ? 2.0 : s[i] == s[j] ? 1.0 : 0.0;
    }
    for (uint8_t l : y) neg += !l;
    const double oracle = twice / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    const double auc = rank_auc(s, y);
    if (auc != oracle) ++mismatches;
    std::vector<double> t(n);
    for (int64_t i = 0; i < n; ++i) t[i] = s[i] * s[i] * s[i] + 2.0 * s[i] - 7.0;
    if (rank_auc(t, y) != auc) ++monotone_breaks;
  }
  return {mismatches == 0 && monotone_breaks == 0,
          "mismatches=" + std::to_string(mismatches) + "/100 monotone_breaks=" + std::to_string(monotone_breaks)};
}

// Shared by criteria 7 and 8.
struct EndToEnd {
  bool trained = false;
  fs::path train_data, test_data, model;
};
EndToEnd g_run;

constexpr int kEpochs = 2;

Outcome end_to_end() {
  const auto t0 = Clock::now();
  g_run.train_data = g_dir / "e2e_train.ctds";
  g_run.test_data = g_dir / "e2e_test.ctds";
  g_run.model = g_dir / "e2e_model.ckpt";
  const fs::path scores = g_dir / "e2e_scores.csv";
  if (cli("synth --preset moving-squares --split train --seed 7 --out " + q(g_run.train_data), "e2e_synth_train.log") ||
      cli("synth --preset moving-squares --split test --seed 7 --out " + q(g_run.test_data), "e2e_synth_test.log"))
    return {false, "synth failed"};
  const VideoDataset train = load_dataset(g_run.train_data), test = load_dataset(g_run.test_data);
  if (cli("train --data " + q(g_run.train_data) + " --out " + q(g_run.model) + " --loss-log " +
              q(g_dir / "e2e_losses.csv") + " --epochs " + std::to_string(kEpochs) +
              " --batch 5 --lr 0.0002 --seed 7",
          "e2e_train.log"))
    return {false, "train failed, see e2e_train.log"};
  g_run.trained = true;
  const auto tr = keyvalues("e2e_train.log");
  const double l1_0 = std::stod(tr.at("initial_l1")), l1_n = std::stod(tr.at("final_l1"));
  if (cli("score --data " + q(g_run.test_data) + " --model " + q(g_run.model) + " --out " + q(scores), "e2e_score.log") ||
      cli("eval --scores " + q(scores), "e2e_eval.log"))
    return {false, "score/eval failed"};
  const double auc = std::stod(keyvalues("e2e_eval.log").at("auc"));
  const double t = seconds_since(t0);
  const bool ok = auc >= 0.85 && l1_n < 0.5 * l1_0 && t < 1800.0;
  return {ok, "frames train/test=" + std::to_string(train.frame_count()) + "/" + std::to_string(test.frame_count()) +
                  " epochs=" + std::to_string(kEpochs) + " auc=" + num(auc, "%.4f") + " l1 " + num(l1_0, "%.4f") +
                  "->" + num(l1_n, "%.4f") + " (" + num(l1_n / l1_0, "%.3f") + ") " + num(t, "%.0f") + "s"};
}

Outcome perturbation() {
  if (!g_run.trained) return {false, "needs the criterion 7 model"};
  if (cli("perturb --data " + q(g_run.test_data) + " --model " + q(g_run.model) + " --windows 100 --seed 7" +
              " --windows-csv " + q(g_dir / "perturb_windows.csv"),
          "perturb.log"))
    return {false, "perturb failed"};
  const auto kv = keyvalues("perturb.log");
  const double frac = std::stod(kv.at("fraction_lower"));
  const int windows = std::stoi(kv.at("windows"));
  return {frac >= 0.8 && windows >= 100, "fraction_lower=" + num(frac, "%.3f") + " over " + std::to_string(windows) +
                                             " windows (perturbed " + kv.at("mean_perturbed_weight") +
                                             " vs unperturbed " + kv.at("mean_unperturbed_weight") + ")"};
}

Outcome determinism() {
  const fs::path data = g_dir / "det.ctds", test = g_dir / "det_test.ctds";
  if (cli("synth --preset moving-squares --split train --seed 3 --resolution 32 --clips 2 --frames 24 --out " + q(data),
          "det_synth.log") ||
      cli("synth --preset moving-squares --split test --seed 3 --resolution 32 --clips 2 --frames 70 --out " + q(test),
          "det_synth_test.log"))
    return {false, "synth failed"};
  for (const char* run : {"a", "b"}) {
    const std::string r = run;
    if (cli("train --data " + q(data) + " --model tiny --max-steps 12 --batch 2 --seed 5 --out " +
                q(g_dir / ("det_" + r + ".ckpt")) + " --loss-log " + q(g_dir / ("det_" + r + ".csv")),
            "det_train_" + r + ".log") ||
        cli("score --data " + q(test) + " --model " + q(g_dir / ("det_" + r + ".ckpt")) + " --out " +
                q(g_dir / ("det_scores_" + r + ".csv")),
            "det_score_" + r + ".log"))
      return {false, "run " + r + " failed"};
  }
  auto same = [](const std::string& a, const std::string& b) {
    const std::string x = slurp(g_dir / a);
    return !x.empty() && x == slurp(g_dir / b);
  };
  const bool ckpt = same("det_a.ckpt", "det_b.ckpt") && same("det_a.ckpt.cfg", "det_b.ckpt.cfg");
  const bool csv = same("det_scores_a.csv", "det_scores_b.csv") && same("det_a.csv", "det_b.csv");

  // Round trips.
  const VideoDataset ds = load_dataset(test);
  save_dataset(g_dir / "det_test_copy.ctds", ds);
  const bool ctds = load_dataset(g_dir / "det_test_copy.ctds") == ds && same("det_test.ctds", "det_test_copy.ctds");
  const auto entries = read_checkpoint(g_dir / "det_a.ckpt");
  write_checkpoint(g_dir / "det_copy.ckpt", entries);
  const bool ck_rt = read_checkpoint(g_dir / "det_copy.ckpt") == entries && same("det_a.ckpt", "det_copy.ckpt");
  auto yn = [](bool b) { return b ? "yes" : "no"; };
  return {ckpt && csv && ctds && ck_rt, std::string("identical checkpoints=") + yn(ckpt) + " scores/losses=" + yn(csv) +
                                            " ctds round trip=" + yn(ctds) + " checkpoint round trip=" + yn(ck_rt)};
}

Outcome ablations() {
  fs::path data = g_run.train_data;
  if (data.empty() || !fs::exists(data)) {
    data = g_dir / "abl.ctds";
    if (cli("synth --preset moving-squares --split train --seed 7 --out " + q(data), "abl_synth.log"))
      return {false, "synth failed"};
  }
  std::string detail;
  bool ok = true;
  for (const std::string flag : {"--no-image-critic", "--no-video-critic", "--unet-skip-only"}) {
    const std::string tag = flag.substr(2);
    const fs::path csv = g_dir / ("abl_" + tag + ".csv");
    const int rc = cli("train --data " + q(data) + " --max-steps 100 --seed 7 " + flag + " --out " +
                           q(g_dir / ("abl_" + tag + ".ckpt")) + " --loss-log " + q(csv),
                       "abl_" + tag + ".log");
    int rows = 0;
    bool finite = rc == 0;
    std::istringstream in(slurp(csv));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      ++rows;
      std::istringstream fields(line);
      for (std::string f; std::getline(fields, f, ',');)
        if (!f.empty() && !std::isfinite(std::stod(f))) finite = false;
    }
    const bool run_ok = finite && rows == 100;
    ok = ok && run_ok;
    detail += tag + "=" + (run_ok ? "ok" : "bad") + "(" + std::to_string(rows) + " steps) ";
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  g_dir = fs::temp_directory_path() / "ctdg_acceptance";
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--workdir") g_dir = argv[i + 1];
  fs::create_directories(g_dir);
  std::printf("workdir %s\n", g_dir.c_str());

  report(1, "gradient suite", gradients);
  report(2, "attention invariants", attention);
  report(3, "positional encoding oracle", positional);
  report(4, "gradient penalty identities", penalty_identities);
  report(5, "spectral norm vs svd", spectral);
  report(6, "auc pairwise oracle", auc_oracle);
  report(7, "end-to-end synthetic run", end_to_end);
  report(8, "perturbation direction", perturbation);
  report(9, "determinism and round trips", determinism);
  report(10, "ablation smoke runs", ablations);

  std::printf("%d of 10 criteria passed\n", 10 - g_failed);
  return g_failed ? 1 : 0;
}
