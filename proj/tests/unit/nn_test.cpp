#include <gtest/gtest.h>

#include <cmath>

#include "ctdg/keyvalue.hpp"
#include "ctdg/nn.hpp"

using namespace ctdg;

TEST(ParameterStore, NamesAreUnique) {
  ParameterStore store;
  store.add("encoder.block1.conv1.weight", Tensor({2}, 0.0));
  EXPECT_THROW(store.add("encoder.block1.conv1.weight", Tensor({2}, 0.0)), ConfigError);
  EXPECT_THROW(store.add_buffer("encoder.block1.conv1.weight", Tensor({2}, 0.0)), ConfigError);
  EXPECT_THROW(store.add("", Tensor({1}, 0.0)), ConfigError);
}

TEST(ParameterStore, MomentsStartAtZero) {
  ParameterStore store;
  Parameter& p = store.add("w", Tensor({3}, 2.0));
  EXPECT_EQ(p.adam_m, Tensor({3}, 0.0));
  EXPECT_EQ(p.adam_v, Tensor({3}, 0.0));
  EXPECT_EQ(p.step_count, 0);
  EXPECT_TRUE(p.value.requires_grad());
}

TEST(ParameterStore, PrefixQueries) {
  ParameterStore store;
  store.add("a.x", Tensor({2, 2}, 0.0));
  store.add("a.y", Tensor({3}, 0.0));
  store.add("b.x", Tensor({5}, 0.0));
  store.add_buffer("a.stat", Tensor({4}, 0.0));
  EXPECT_EQ(store.parameters("a.").size(), 2u);
  EXPECT_EQ(store.parameter_count("a."), 7);
  EXPECT_EQ(store.parameter_count(), 12);
  EXPECT_EQ(store.buffers("a.").size(), 1u);
  EXPECT_TRUE(store.contains("a.stat"));
  EXPECT_THROW(store.param("missing"), ConfigError);
}

TEST(Layers, ConvInitStatistics) {
  ParameterStore store;
  Rng rng(3);
  Conv2dLayer conv(store, "c", 3, 16, 32, {}, rng);
  const Tensor& w = conv.weight->value.value();
  double s2 = 0.0;
  for (double v : w.data()) s2 += v * v;
  const double var = s2 / static_cast<double>(w.numel());
  EXPECT_NEAR(var, 1.0 / (3 * 3 * 16), 0.15 / (3 * 3 * 16));
  EXPECT_EQ(conv.bias->value.value(), Tensor({32}, 0.0));
}

TEST(Layers, BatchNormInit) {
  ParameterStore store;
  BatchNormLayer bn(store, "bn", 4);
  EXPECT_EQ(bn.gamma->value.value(), Tensor({4}, 1.0));
  EXPECT_EQ(bn.shift->value.value(), Tensor({4}, 0.0));
  EXPECT_EQ(*bn.running_var, Tensor({4}, 1.0));
}

TEST(Layers, DenseForwardShape) {
  ParameterStore store;
  Rng rng(4);
  DenseLayer d(store, "d", 5, 3, rng);
  Var y = d.forward(Var(Tensor({2, 5}, 1.0)));
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
}

TEST(Rng, SubstreamsAreIndependentAndStable) {
  Rng root(42);
  Rng a = root.substream("weights"), b = root.substream("weights"), c = root.substream("shuffle");
  const double x = a.uniform();
  EXPECT_EQ(x, b.uniform());
  EXPECT_NE(x, c.uniform());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(a.below(7), 7u);
  }
}

TEST(Rng, NormalMoments) {
  Rng rng(5);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal(1.0, 2.0);
    s += v;
    s2 += v * v;
  }
  const double m = s / n;
  EXPECT_NEAR(m, 1.0, 0.05);
  EXPECT_NEAR(s2 / n - m * m, 4.0, 0.15);
}

TEST(KeyValue, RoundTripAndErrors) {
  KeyValue kv;
  kv.set("resolution", int64_t{64});
  kv.set("lr", 0.0002);
  kv.set("flag", true);
  kv.set("channels", join_ints({8, 16, 32}));
  KeyValue back = KeyValue::parse(kv.serialize());
  EXPECT_EQ(back.get_int("resolution", 0), 64);
  EXPECT_EQ(back.get_double("lr", 0.0), 0.0002);
  EXPECT_TRUE(back.get_bool("flag", false));
  EXPECT_EQ(back.get_ints("channels", {}), (std::vector<int64_t>{8, 16, 32}));
  back.set("channels", std::string("8,x"));
  EXPECT_THROW(back.get_ints("channels", {}), ConfigError);
  EXPECT_THROW(KeyValue::parse("no equals sign"), ConfigError);
  EXPECT_EQ(KeyValue::parse("# comment\n a = b \n").get("a", ""), "b");
}
