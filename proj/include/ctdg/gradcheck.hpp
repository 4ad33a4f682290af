#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ctdg/autograd.hpp"
#include "ctdg/rng.hpp"

namespace ctdg {

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

using ScalarFunction = std::function<Var(const std::vector<Var>&)>;

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  int64_t entries_checked = 0;
};

/// Compares reverse-mode gradients of `f` against central differences with
/// step `step` for every input (or `max_entries` randomly chosen entries per
/// input when positive).
FiniteDifferenceReport check_gradients(const ScalarFunction& f, const std::vector<Tensor>& inputs, double step = 1e-5,
                                       int64_t max_entries = -1, Rng* rng = nullptr);

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0.0;
  int64_t entries_checked = 0;
  int instances = 0;
  double tolerance = 0.0;
  bool passed() const { return max_relative_error < tolerance; }
};

/// Finite-difference suite over every differentiable tensor operation.
std::vector<GradCheckResult> run_operation_gradchecks(int instances, uint64_t seed, double tolerance = 1e-4);

/// Samples `parameter_count` scalar parameters of a tiny generator (16x16
/// frames) and checks the gradient of a random projection of its output.
GradCheckResult run_generator_gradcheck(int parameter_count, uint64_t seed, double tolerance = 1e-3);

}  // namespace ctdg
