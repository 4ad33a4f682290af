#include "ctdg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ctdg/generator.hpp"
#include "ctdg/ops.hpp"

namespace ctdg {

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

FiniteDifferenceReport check_gradients(const ScalarFunction& f, const std::vector<Tensor>& inputs, double step,
                                       int64_t max_entries, Rng* rng) {
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.emplace_back(t, true);
  Var loss = f(vars);
  backward(loss);

  FiniteDifferenceReport report;
  for (size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad().empty() ? Tensor(inputs[k].shape(), 0.0) : vars[k].grad();
    std::vector<int64_t> idx;
    if (max_entries > 0 && max_entries < inputs[k].numel()) {
      if (!rng) throw ConfigError("check_gradients: sampling entries requires an rng");
      for (int64_t j = 0; j < max_entries; ++j) idx.push_back(static_cast<int64_t>(rng->below(inputs[k].numel())));
    } else {
      for (int64_t j = 0; j < inputs[k].numel(); ++j) idx.push_back(j);
    }
    for (int64_t j : idx) {
      auto eval = [&](double delta) {
        std::vector<Var> probe;
        for (size_t m = 0; m < inputs.size(); ++m) {
          Tensor t = inputs[m];
          if (m == k) t[j] += delta;
          probe.emplace_back(std::move(t), false);
        }
        NoGradGuard guard;
        return f(probe).value().item();
      };
      const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
      report.max_relative_error = std::max(report.max_relative_error, relative_error(analytic[j], numeric));
      ++report.entries_checked;
    }
  }
  return report;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Tensor bounded away from zero, for kinked activations.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  for (int64_t i = 0; i < t.numel(); ++i)
    if (rng.uniform() < 0.5) t[i] = -t[i];
  return t;
}

// Wraps an op into a scalar loss sum(r * op(inputs)) with a fixed random r.
ScalarFunction projected(std::function<Var(const std::vector<Var>&)> op, Rng& rng) {
  auto r = std::make_shared<Tensor>();
  auto seed = rng.below(UINT32_MAX);
  return [op = std::move(op), r, seed](const std::vector<Var>& in) {
    Var out = op(in);
    if (r->empty() || r->shape() != out.shape()) {
      Rng local(seed);
      *r = random_tensor(out.shape(), local);
    }
    return ops::sum(ops::mul(out, Var(*r)));
  };
}

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> make_inputs;
  std::function<Var(const std::vector<Var>&)> op;
};

std::vector<OpCase> operation_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"add", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
                   [](const auto& v) { return ops::add(v[0], v[1]); }});
  cases.push_back({"mul", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
                   [](const auto& v) { return ops::mul(v[0], v[1]); }});
  cases.push_back({"add_bias", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r), random_tensor({4}, r)}; },
                   [](const auto& v) { return ops::add_bias(v[0], v[1]); }});
  cases.push_back({"conv2d", [](Rng& r) { return std::vector{random_tensor({2, 5, 5, 2}, r), random_tensor({3, 3, 2, 3}, r)}; },
                   [](const auto& v) { return ops::conv2d(v[0], v[1]); }});
  cases.push_back({"conv2d_stride2", [](Rng& r) { return std::vector{random_tensor({2, 6, 6, 2}, r), random_tensor({3, 3, 2, 3}, r)}; },
                   [](const auto& v) { return ops::conv2d(v[0], v[1], {.stride = 2}); }});
  cases.push_back({"conv2d_dilated", [](Rng& r) { return std::vector{random_tensor({1, 7, 7, 2}, r), random_tensor({3, 3, 2, 2}, r)}; },
                   [](const auto& v) { return ops::conv2d(v[0], v[1], {.dilation = 2}); }});
  cases.push_back({"conv2d_transpose", [](Rng& r) { return std::vector{random_tensor({2, 3, 3, 3}, r), random_tensor({3, 3, 2, 3}, r)}; },
                   [](const auto& v) { return ops::conv2d_transpose(v[0], v[1], 2); }});
  cases.push_back({"conv3d", [](Rng& r) { return std::vector{random_tensor({1, 4, 6, 6, 2}, r), random_tensor({2, 4, 4, 2, 3}, r)}; },
                   [](const auto& v) { return ops::conv3d(v[0], v[1], 2, 1, 1); }});
  cases.push_back({"conv_adjoint", [](Rng& r) { return std::vector{random_tensor({1, 3, 3, 2}, r), random_tensor({4, 4, 3, 2}, r)}; },
                   [](const auto& v) {
                     ConvGeometry g;
                     g.batch = 1;
                     g.in = {1, 6, 6};
                     g.in_channels = 3;
                     g.out_channels = 2;
                     g.kernel = {1, 4, 4};
                     g.stride = {1, 2, 2};
                     g.pad_before = g.pad_after = {0, 1, 1};
                     g.resolve_output();
                     return ops::conv_general_adjoint(v[0], v[1], g, {1, 6, 6, 3});
                   }});
  cases.push_back({"selu", [](Rng& r) { return std::vector{away_from_zero({3, 5}, r)}; },
                   [](const auto& v) { return ops::selu(v[0]); }});
  cases.push_back({"sigmoid", [](Rng& r) { return std::vector{random_tensor({3, 5}, r, -3, 3)}; },
                   [](const auto& v) { return ops::sigmoid(v[0]); }});
  cases.push_back({"leaky_relu", [](Rng& r) { return std::vector{away_from_zero({3, 5}, r)}; },
                   [](const auto& v) { return ops::leaky_relu(v[0], 0.2); }});
  cases.push_back({"softplus", [](Rng& r) { return std::vector{random_tensor({3, 5}, r, -3, 3)}; },
                   [](const auto& v) { return ops::softplus(v[0]); }});
  cases.push_back({"abs", [](Rng& r) { return std::vector{away_from_zero({3, 5}, r)}; },
                   [](const auto& v) { return ops::abs(v[0]); }});
  cases.push_back({"square", [](Rng& r) { return std::vector{random_tensor({3, 5}, r)}; },
                   [](const auto& v) { return ops::square(v[0]); }});
  cases.push_back({"softmax", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r, -2, 2)}; },
                   [](const auto& v) { return ops::softmax(v[0], 1); }});
  cases.push_back({"matmul", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; },
                   [](const auto& v) { return ops::matmul(v[0], v[1]); }});
  cases.push_back({"global_average_pool", [](Rng& r) { return std::vector{random_tensor({2, 3, 4, 3}, r)}; },
                   [](const auto& v) { return ops::global_average_pool(v[0]); }});
  cases.push_back({"batch_norm_train",
                   [](Rng& r) { return std::vector{random_tensor({3, 2, 2, 3}, r), random_tensor({3}, r, 0.5, 1.5), random_tensor({3}, r)}; },
                   [](const auto& v) {
                     static thread_local Tensor rm({3}, 0.0), rv({3}, 1.0);
                     return ops::batch_norm(v[0], v[1], v[2], {&rm, &rv}, {.training = true, .update_stats = false});
                   }});
  cases.push_back({"batch_norm_infer",
                   [](Rng& r) { return std::vector{random_tensor({3, 2, 2, 3}, r), random_tensor({3}, r, 0.5, 1.5), random_tensor({3}, r)}; },
                   [](const auto& v) {
                     static thread_local Tensor rm = Tensor::from({0.1, -0.2, 0.3}), rv = Tensor::from({0.5, 1.5, 2.0});
                     return ops::batch_norm(v[0], v[1], v[2], {&rm, &rv}, {.training = false});
                   }});
  cases.push_back({"dropout", [](Rng& r) { return std::vector{random_tensor({4, 5}, r)}; },
                   [](const auto& v) {
                     Rng mask_rng(99);
                     return ops::dropout(v[0], 0.25, true, mask_rng);
                   }});
  cases.push_back({"mean_axis", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r)}; },
                   [](const auto& v) { return ops::mean_axis(v[0], 1); }});
  cases.push_back({"repeat_axis", [](Rng& r) { return std::vector{random_tensor({2, 3}, r)}; },
                   [](const auto& v) { return ops::repeat_axis(v[0], 1, 3); }});
  cases.push_back({"row_norms", [](Rng& r) { return std::vector{random_tensor({3, 2, 2}, r)}; },
                   [](const auto& v) { return ops::row_norms(v[0]); }});
  cases.push_back({"concat_slice", [](Rng& r) { return std::vector{random_tensor({2, 3, 2}, r), random_tensor({2, 3, 3}, r)}; },
                   [](const auto& v) { return ops::slice(ops::concat({v[0], v[1]}, 2), 2, 1, 4); }});
  cases.push_back({"query_memory_cosine", [](Rng& r) { return std::vector{random_tensor({2, 5, 2, 4}, r)}; },
                   [](const auto& v) { return ops::query_memory_cosine(v[0]); }});
  cases.push_back({"scale_rows", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r), random_tensor({2, 3}, r)}; },
                   [](const auto& v) { return ops::scale_rows(v[0], v[1]); }});
  cases.push_back({"attend_memories",
                   [](Rng& r) { return std::vector{random_tensor({2, 5, 2, 2, 4}, r), random_tensor({2, 2, 4}, r)}; },
                   [](const auto& v) { return ops::attend_memories(v[0], v[1]); }});
  cases.push_back({"gate_blend",
                   [](Rng& r) { return std::vector{random_tensor({2, 3}, r, 0, 1), random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
                   [](const auto& v) { return ops::gate_blend(v[0], v[1], v[2]); }});
  cases.push_back({"spectral_normalize", [](Rng& r) { return std::vector{random_tensor({2, 2, 3, 4}, r)}; },
                   [](const auto& v) {
                     // Converged state: sigma's dependence on u, v is then second order.
                     Tensor u({4}, 0.5), w({12}, 1.0 / std::sqrt(12.0));
                     return ops::spectral_normalize(v[0], {&u, &w}, 200, false);
                   }});
  return cases;
}

}  // namespace

std::vector<GradCheckResult> run_operation_gradchecks(int instances, uint64_t seed, double tolerance) {
  std::vector<GradCheckResult> results;
  Rng root(seed);
  for (const OpCase& c : operation_cases()) {
    GradCheckResult res;
    res.name = c.name;
    res.instances = instances;
    res.tolerance = tolerance;
    Rng rng = root.substream(c.name);
    for (int i = 0; i < instances; ++i) {
      const auto inputs = c.make_inputs(rng);
      const auto rep = check_gradients(projected(c.op, rng), inputs);
      res.max_relative_error = std::max(res.max_relative_error, rep.max_relative_error);
      res.entries_checked += rep.entries_checked;
    }
    results.push_back(res);
  }
  return results;
}

GradCheckResult run_generator_gradcheck(int parameter_count, uint64_t seed, double tolerance) {
  Rng root(seed);
  GeneratorConfig config = GeneratorConfig::tiny();
  config.dropout = 0.0;
  ParameterStore store;
  Generator gen(store, config, root.substream("weights"));
  // Move every parameter off its special initial value so no gradient is
  // structurally zero.
  Rng jitter = root.substream("jitter");
  for (Parameter* p : store.parameters()) {
    Tensor& v = p->value.mutable_value();
    for (int64_t i = 0; i < v.numel(); ++i) v[i] += jitter.uniform(-0.1, 0.1);
  }
  Rng data = root.substream("data");
  const Tensor clip = random_tensor({1, kClipLength, 16, 16, 4}, data);
  const Tensor r = random_tensor({1, 16, 16, 4}, data, -0.05, 0.05);
  const ForwardMode mode{.training = true, .update_stats = false};
  auto loss = [&] { return ops::sum(ops::mul(gen.forward(Var(clip), mode).prediction, Var(r))); };

  backward(loss());
  std::vector<Parameter*> params = store.parameters();
  std::vector<int64_t> offsets;
  int64_t total = 0;
  for (Parameter* p : params) {
    offsets.push_back(total);
    total += p->value.value().numel();
  }

  GradCheckResult res;
  res.name = "generator";
  res.instances = 1;
  res.tolerance = tolerance;
  Rng pick = root.substream("pick");
  const double step = 1e-5;
  for (int s = 0; s < parameter_count; ++s) {
    const int64_t flat = static_cast<int64_t>(pick.below(static_cast<uint64_t>(total)));
    const size_t k = static_cast<size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const int64_t j = flat - offsets[k];
    Parameter* p = params[k];
    const double analytic = p->value.grad().empty() ? 0.0 : p->value.grad()[j];
    double& entry = p->value.mutable_value()[j];
    const double original = entry;
    NoGradGuard guard;
    entry = original + step;
    const double up = loss().value().item();
    entry = original - step;
    const double down = loss().value().item();
    entry = original;
    res.max_relative_error = std::max(res.max_relative_error, relative_error(analytic, (up - down) / (2.0 * step)));
    ++res.entries_checked;
  }
  return res;
}

}  // namespace ctdg
