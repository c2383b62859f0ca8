#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "stagegen/grad_check.hpp"
#include "stagegen/models.hpp"

using namespace stagegen;

namespace {

ModelSpec small_spec(int side = 32) {
  ModelSpec s;
  s.image_side = side;
  s.latent_dim = 16;
  s.base_feature_maps_g = 8;
  s.base_feature_maps_d = 8;
  s.resnet_blocks = 2;
  return s;
}

Tensor<float> random_images(std::int64_t n, int c, int side, std::uint64_t seed) {
  Tensor<float> t({n, c, side, side});
  Rng rng(seed);
  fill_uniform(t.data(), rng, -1.0, 1.0);
  return t;
}

// Batch slice k of an N×... tensor as a flat vector.
template <class T>
std::vector<T> sample(const Tensor<T>& t, std::int64_t k) {
  const auto per = t.numel() / t.dim(0);
  return {t.values().begin() + k * per, t.values().begin() + (k + 1) * per};
}

}  // namespace

TEST(ModelSpec, Validation) {
  EXPECT_NO_THROW(small_spec().validate());
  auto s = small_spec();
  s.image_side = 48;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.image_side = 16;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.disc_reduction_factor = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.resnet_blocks = 0;
  EXPECT_THROW(Stage2Generator<float>{s}, ConfigError);
  EXPECT_EQ(ModelSpec{}.feature_maps_g(), 32);  // side 64 -> F = 32
}

TEST(ModelSpec, JsonRoundTripAndUnknownKeys) {
  auto s = small_spec();
  s.dropout_enabled = true;
  nlohmann::json j = s;
  EXPECT_EQ(j.get<ModelSpec>(), s);
  j["colour"] = 3;
  EXPECT_THROW(j.get<ModelSpec>(), ConfigError);
}

TEST(Stage1Generator, ShapesAcrossSides) {
  for (int side : {32, 64, 128}) {
    auto s = small_spec(side);
    s.base_feature_maps_g = 4;
    auto m = init_params(s, 1);
    Rng rng(2);
    auto out = m.g1.forward(sample_latent(3, s.latent_dim, rng), Mode::Train);
    EXPECT_EQ(out.shape(), (Shape{3, 1, side, side})) << side;
  }
  ModelSpec defaults;
  auto m = init_params(defaults, 0);
  Rng rng(0);
  EXPECT_EQ(m.g1.forward(sample_latent(1, 100, rng), Mode::Eval).shape(), (Shape{1, 1, 64, 64}));
  EXPECT_EQ(m.g1.param("proj.weight").shape(), (Shape{100, 8 * 32, 4, 4}));
}

TEST(Stage1Generator, TanhRangeAndLatentCheck) {
  auto s = small_spec();
  auto m = init_params(s, 3);
  Rng rng(4);
  auto z = sample_latent(4, s.latent_dim, rng);
  for (float v : m.g1.forward(z, Mode::Train).values()) EXPECT_TRUE(v > -1.f && v < 1.f);
  // Huge weights drive the pre-activation far into saturation; the output stays interior.
  for (auto& v : m.g1.param("out.weight").values()) v *= 1e4f;
  for (float v : m.g1.forward(z, Mode::Train).values()) EXPECT_TRUE(v > -1.f && v < 1.f);
  EXPECT_THROW(m.g1.forward(sample_latent(4, s.latent_dim + 1, rng), Mode::Train), ShapeError);
}

TEST(Stage1Generator, Deterministic) {
  auto s = small_spec();
  auto a = init_params(s, 9), b = init_params(s, 9);
  Rng r1(5), r2(5);
  EXPECT_EQ(a.g1.forward(sample_latent(2, s.latent_dim, r1), Mode::Train).values(),
            b.g1.forward(sample_latent(2, s.latent_dim, r2), Mode::Train).values());
}

TEST(Stage1Discriminator, ShapeAndExtremeInputs) {
  auto s = small_spec();
  auto m = init_params(s, 1);
  EXPECT_EQ(m.d1.forward(random_images(5, 1, 32, 1), Mode::Train).shape(), (Shape{5, 1}));
  for (float v : {-1.f, 1.f}) {
    auto out = m.d1.forward(Tensor<float>::full({2, 1, 32, 32}, v), Mode::Eval);
    EXPECT_TRUE(out.all_finite());
  }
  EXPECT_THROW(m.d1.forward(random_images(1, 2, 32, 1), Mode::Train), ShapeError);
}

TEST(Stage1Discriminator, ReductionFactorShrinksParameters) {
  auto s = small_spec(64);
  s.base_feature_maps_d = 32;
  s.disc_reduction_factor = 1;
  const auto full = Stage1Discriminator<float>(s).param_count();
  s.disc_reduction_factor = 4;
  const auto reduced = Stage1Discriminator<float>(s).param_count();
  // Independent count: conv widths F/r·2^b, BN (gamma, beta) after every block but the first, 4×4 kernels.
  auto count = [](std::int64_t f, std::int64_t r) {
    std::int64_t in = 1, total = 0;
    for (int b = 0; b < 4; ++b) {
      const std::int64_t out = (f << b) / r;
      total += out * in * 16 + (b > 0 ? 2 * out : 0);
      in = out;
    }
    return total + in * 16;
  };
  EXPECT_EQ(full, count(32, 1));
  EXPECT_EQ(reduced, count(32, 4));
  EXPECT_LT(static_cast<double>(reduced) / full, 1.0 / 8);
}

TEST(Stage2Generator, ShapePreservedAndSideChecked) {
  for (int side : {32, 64}) {
    auto s = small_spec(side);
    auto m = init_params(s, 2);
    Rng rng(0);
    auto out = m.g2.forward(random_images(2, 1, side, 3), Mode::Train, rng);
    EXPECT_EQ(out.shape(), (Shape{2, 1, side, side}));
    for (float v : out.values()) EXPECT_TRUE(v > -1.f && v < 1.f);
  }
  auto m = init_params(small_spec(), 2);
  Rng rng(0);
  EXPECT_THROW(m.g2.forward(random_images(1, 1, 64, 3), Mode::Train, rng), ShapeError);
}

TEST(Stage2Generator, DropoutSemantics) {
  auto s = small_spec();
  s.dropout_enabled = true;
  auto m = init_params(s, 4);
  auto x = random_images(1, 1, 32, 5);
  Rng a(1), b(2);
  EXPECT_EQ(m.g2.forward(x, Mode::Eval, a).values(), m.g2.forward(x, Mode::Eval, b).values());
  Rng c(1), d(2);
  EXPECT_NE(m.g2.forward(x, Mode::Train, c).values(), m.g2.forward(x, Mode::Train, d).values());
  s.dropout_enabled = false;
  auto plain = init_params(s, 4);
  Rng e(1), f(2);
  EXPECT_EQ(plain.g2.forward(x, Mode::Train, e).values(), plain.g2.forward(x, Mode::Train, f).values());
}

TEST(Stage2Generator, ZeroedSecondConvMakesBlocksIdentity) {
  auto s = small_spec();
  auto m = init_params(s, 6);
  for (int b = 0; b < s.resnet_blocks; ++b) {
    auto& w = m.g2.param("res" + std::to_string(b) + ".conv1.weight");
    std::fill(w.values().begin(), w.values().end(), 0.f);
  }
  auto x = random_images(2, 1, 32, 7);
  Rng r1(0), r2(0);
  auto full = m.g2.forward(x, Mode::Train, r1);
  auto trunk = m.g2.forward(x, Mode::Train, r2, std::nullopt, true);
  EXPECT_EQ(full.values(), trunk.values());
  // With the original weights the residual branches do contribute.
  auto fresh = init_params(s, 6);
  Rng r3(0), r4(0);
  EXPECT_NE(fresh.g2.forward(x, Mode::Train, r3).values(), fresh.g2.forward(x, Mode::Train, r4, std::nullopt, true).values());
}

TEST(Stage2Generator, LatentInjection) {
  auto s = small_spec();
  s.stage2_latent_enabled = true;
  auto m = init_params(s, 8);
  for (auto& v : m.g2.param("z2.bias").values()) v = 0.1f;
  auto x = random_images(1, 1, 32, 9);
  Rng rng(3), drop(0);
  auto z_a = sample_latent(1, s.latent_dim, rng), z_b = sample_latent(1, s.latent_dim, rng);
  EXPECT_NE(m.g2.forward(x, Mode::Eval, drop, z_a).values(), m.g2.forward(x, Mode::Eval, drop, z_b).values());
  EXPECT_THROW(m.g2.forward(x, Mode::Eval, drop), ConfigError);
  auto plain = init_params(small_spec(), 8);
  EXPECT_THROW(plain.g2.forward(x, Mode::Eval, drop, z_a), ConfigError);
}

TEST(Stage2Discriminator, ShapeBatchPermutationAndChannelOrder) {
  auto s = small_spec();
  auto m = init_params(s, 10);
  auto e = random_images(3, 1, 32, 11), g = random_images(3, 1, 32, 12);
  auto logits = m.d2.forward(e, g, Mode::Eval);
  EXPECT_EQ(logits.shape(), (Shape{3, 1}));

  const std::vector<int> perm{2, 0, 1};
  const auto plane = 32 * 32;
  Tensor<float> pe({3, 1, 32, 32}), pg({3, 1, 32, 32});
  for (int k = 0; k < 3; ++k) {
    auto se = sample(e, perm[k]), sg = sample(g, perm[k]);
    std::copy(se.begin(), se.end(), pe.values().begin() + k * plane);
    std::copy(sg.begin(), sg.end(), pg.values().begin() + k * plane);
  }
  auto plog = m.d2.forward(pe, pg, Mode::Eval);
  for (int k = 0; k < 3; ++k) EXPECT_FLOAT_EQ(plog[k], logits[perm[k]]);

  auto swapped = m.d2.forward(g, e, Mode::Eval);
  double diff = 0;
  for (int k = 0; k < 3; ++k) diff += std::abs(swapped[k] - logits[k]);
  EXPECT_GT(diff, 1e-6);
}

TEST(InitParams, SameSeedSameParams) {
  auto s = small_spec();
  auto a = init_params(s, 5), b = init_params(s, 5), c = init_params(s, 6);
  for (std::size_t i = 0; i < a.g2.params().size(); ++i) EXPECT_EQ(a.g2.params()[i].values(), b.g2.params()[i].values());
  EXPECT_NE(a.g2.param("stem.weight").values(), c.g2.param("stem.weight").values());
}

TEST(InitParams, WeightStatistics) {
  auto s = small_spec();
  auto m = init_params(s, 13);
  const auto& w = m.g2.param("res0.conv0.weight").values();  // 32·32·9 = 9216 values
  ASSERT_GE(w.size(), 9000u);
  const double n = static_cast<double>(w.size());
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / n;
  double var = 0;
  for (float v : w) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (n - 1));
  EXPECT_LT(std::abs(mean), 3 * 0.02 / std::sqrt(n));
  EXPECT_NEAR(sd, 0.02, 0.002);
  for (float v : m.g2.param("res0.conv0.in.beta").values()) EXPECT_EQ(v, 0.f);
  for (float v : m.g2.param("out.bias").values()) EXPECT_EQ(v, 0.f);
  const auto& gamma = m.d1.param("down1.bn.gamma").values();
  for (float v : gamma) EXPECT_NEAR(v, 1.0, 0.1);
}

TEST(InitParams, NetworksShareNoBuffers) {
  auto m = init_params(small_spec(), 1);
  std::set<const void*> seen;
  std::size_t total = 0;
  auto collect = [&](const auto& net) {
    for (const auto& [name, t] : net.state()) {
      seen.insert(t.values().data());
      ++total;
    }
  };
  collect(m.g1);
  collect(m.d1);
  collect(m.g2);
  collect(m.d2);
  EXPECT_EQ(seen.size(), total);
}

TEST(Module, CopyValuesAcrossPrecision) {
  auto s = small_spec();
  auto m = init_params(s, 3);
  Stage2Generator<double> g(s);
  g.copy_values_from(m.g2);
  auto x = random_images(1, 1, 32, 4);
  Rng r1(0), r2(0);
  auto yf = m.g2.forward(x, Mode::Eval, r1);
  auto yd = g.forward(x.cast<double>(), Mode::Eval, r2);
  for (std::int64_t i = 0; i < yf.numel(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-4);
}

TEST(Stage2Generator, EndToEndGradientCheck) {
  ModelSpec s = small_spec();
  s.resnet_blocks = 6;  // full-depth trunk, F = 8, side 32
  auto init = init_params(s, 21);
  Stage2Generator<double> g(s);
  g.copy_values_from(init.g2);
  auto edges = random_images(1, 1, 32, 22).cast<double>();
  auto target = random_images(1, 1, 32, 23).cast<double>();
  std::vector<Tensor<double>> inputs{edges, g.param("stem.weight"), g.param("down1.in.gamma"), g.param("res2.conv0.weight"),
                                     g.param("res5.conv1.in.beta"), g.param("up0.weight"), g.param("out.bias")};
  GradCheckOptions opt;
  opt.max_coords_per_input = 24;
  opt.seed = 3;
  Rng drop(0);
  auto report = grad_check_report(
      [&](std::vector<Tensor<double>>& in) { return l1_loss(g.forward(in[0], Mode::Train, drop), target); }, inputs, opt);
  RecordProperty("max_relative_error", std::to_string(report.max_relative_error));
  EXPECT_GT(report.coords_checked, 100u);
  EXPECT_LE(report.max_relative_error, 1e-3);
}

TEST(Stage1Pair, GradientsReachEveryParameter) {
  auto s = small_spec();
  auto m = init_params(s, 30);
  Rng rng(1);
  auto logits = m.d1.forward(m.g1.forward(sample_latent(4, s.latent_dim, rng), Mode::Train), Mode::Train);
  bce_with_logits(logits, 1.f).backward();
  for (std::size_t i = 0; i < m.g1.params().size(); ++i) {
    const auto& p = m.g1.params()[i];
    ASSERT_TRUE(p.has_grad()) << m.g1.param_names()[i];
    double norm = 0;
    for (float v : p.grad()) norm += std::abs(v);
    EXPECT_GT(norm, 0) << m.g1.param_names()[i];
  }
}

TEST(Module, CopiesAreDeep) {
  auto m = init_params(small_spec(), 2);
  auto copy = m.d1;
  copy.param("out.weight")[0] += 1.f;
  copy.running_stats().begin()->second.mean[0] = 5.f;
  EXPECT_NE(copy.param("out.weight")[0], m.d1.param("out.weight")[0]);
  EXPECT_EQ(m.d1.running_stats().begin()->second.mean[0], 0.f);
  EXPECT_TRUE(copy.param("out.weight").requires_grad());
}
