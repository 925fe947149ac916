#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>
#include <cstdio>

#include "gradcheck.hpp"
#include "tomoforge/models.hpp"

namespace {

using namespace tomoforge;
using tomoforge::testing::gradcheck;
using tomoforge::testing::random_tensor;
using V = Var<double>;
using Vs = std::vector<V>;

ModelDescriptor desk(ModelKind kind, int n = 64) {
  ModelDescriptor d;
  d.kind = kind;
  d.image_size = d.n_angles = d.n_detectors = n;
  d.pixel_spacing = 2.0 / n;
  d.init_seed = 17;
  return d;
}

/// Finite differences on a few entries of every trainable parameter; returns
/// the norm-wise relative error over all sampled entries.
template <class LossFn>
double param_gradcheck(ParamStore<double>& store, LossFn loss, int per_param = 2, double h = 1e-5) {
  store.zero_grad();
  {
    Tape<double> t;
    V l = loss(t);
    t.backward(l);
  }
  RandomStream rng(5);
  double d2 = 0, a2 = 0, n2 = 0;
  for (Parameter<double>* p : store.trainable()) {
    for (int k = 0; k < per_param; ++k) {
      const auto i = static_cast<std::size_t>(rng.uniform() * p->value.numel());
      const double orig = p->value[i];
      p->value[i] = orig + h;
      Tape<double> tp;
      const double fp = loss(tp).value()[0];
      p->value[i] = orig - h;
      Tape<double> tm;
      const double fm = loss(tm).value()[0];
      p->value[i] = orig;
      const double num = (fp - fm) / (2 * h), ana = p->grad[i];
      d2 += (num - ana) * (num - ana);
      a2 += ana * ana;
      n2 += num * num;
    }
  }
  return std::sqrt(d2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
}

TEST(Presets, TableRoundTrip) {
  const std::vector<std::pair<std::vector<int>, std::vector<int>>> expected{
      {{1, 1, 2}, {2, 1}},
      {{1, 1, 1, 2}, {2, 2, 2}},
      {{1, 1, 1, 2, 2}, {2, 2, 2, 2}},
      {{1, 1, 1, 2, 2}, {2, 2, 2, 2}},
      {{2, 1, 1, 1, 1, 2}, {2, 2, 2, 2, 2}},
      {{2, 2, 2, 2, 2, 3}, {3, 3, 3, 3, 4}},
      {{3, 3, 3, 3, 3, 5}, {4, 4, 4, 4, 4}},
      {{5, 5, 5, 5, 5, 9}, {6, 6, 6, 6, 6}},
  };
  const std::vector<std::string> names{"XXS", "XS", "S", "S-64", "M", "L", "XL", "XXL"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto p = UNetPreset::named(names[i]);
    EXPECT_EQ(p.down, expected[i].first) << names[i];
    EXPECT_EQ(p.up, expected[i].second) << names[i];
    EXPECT_FALSE(p.desk);
  }
  EXPECT_EQ(UNetPreset::named("S").base_channels, 32);
  EXPECT_EQ(UNetPreset::named("S-64").base_channels, 64);
  EXPECT_EQ(UNetPreset::named("XXS").base_channels, 32);
  EXPECT_EQ(UNetPreset::named("M").base_channels, 64);
  EXPECT_TRUE(UNetPreset::named("T16").desk);
  EXPECT_THROW(UNetPreset::named("Q"), ConfigError);
  for (const auto& n : UNetPreset::names()) EXPECT_NO_THROW(UNetPreset::named(n).validate());
}

TEST(Presets, ChannelsDoubleEveryTwoStrides) {
  const auto specs = block_specs(UNetPreset::named("S"));
  ASSERT_EQ(specs.size(), 9u);
  const std::vector<int> ch{32, 32, 64, 64, 128, 64, 64, 32, 32};
  const std::vector<int> div{1, 2, 4, 8, 16, 8, 4, 2, 1};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    EXPECT_EQ(specs[i].channels, ch[i]) << i;
    EXPECT_EQ(specs[i].resolution_divisor, div[i]) << i;
    EXPECT_EQ(specs[i].attention, i >= 5);
  }
  // XXS down path at 256: resolutions 256, 128, 64 with [1, 1, 2] blocks.
  const auto xxs = block_specs(UNetPreset::named("XXS"));
  EXPECT_EQ(256 / xxs[2].resolution_divisor, 64);
  EXPECT_EQ(xxs[2].residual_blocks, 2);
}

TEST(Presets, RejectsResolutionUnderflow) {
  EXPECT_THROW(UNetPreset::named("XXL").check_input(16, 16), ShapeError);
  EXPECT_NO_THROW(UNetPreset::named("XXL").check_input(256, 256));
  EXPECT_NO_THROW(UNetPreset::named("T32").check_input(64, 64));
  auto d = desk(ModelKind::end2end, 16);
  d.g2 = "M";
  EXPECT_THROW(ReconNet<double>{d}, ShapeError);
}

TEST(Positional, ShapeRangeAndCentre) {
  const auto& f = positional_features<double>(64);
  ASSERT_EQ(f.shape(), (Shape{4, 64, 64}));
  for (double v : f.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  // Pixel (32, 32) sits half a pixel from the centre on both axes.
  EXPECT_NEAR(f[2 * 4096 + 32 * 64 + 32], std::sqrt(0.5) / 32, 1e-12);
  EXPECT_NEAR(f[0 * 4096 + 0 * 64 + 63], 0.5 - 0.5 / 64, 1e-12);  // x at the right edge
  EXPECT_NEAR(f[1 * 4096 + 0 * 64 + 0], 0.5 - 0.5 / 64, 1e-12);   // y at the top
  EXPECT_EQ(&positional_features<double>(64), &f);                // cached
}

TEST(ChannelAttention, ZeroWeightsHalveTheInput) {
  ParamStore<double> store;
  RandomStream rng(1);
  LayerFactory<double> f{store, rng};
  auto att = f.attention("a", 16);
  store.find("a.w1")->value.fill(0);
  store.find("a.w2")->value.fill(0);
  Tape<double> t;
  const auto x = random_tensor<double>({2, 16, 5, 5}, 3);
  V y = att(t.constant(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], x[i] / 2);
}

TEST(ChannelAttention, GatesInOpenUnitIntervalAndGradcheck) {
  ParamStore<double> store;
  RandomStream rng(2);
  LayerFactory<double> f{store, rng};
  auto att = f.attention("a", 16);
  Tape<double> t;
  V g = att.gates(t.constant(random_tensor<double>({3, 16, 4, 4}, 4, -3, 3)));
  for (double v : g.value().values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  auto r = gradcheck([&](Tape<double>&, const Vs& v) { return att(v[0]); },
                     {random_tensor<double>({2, 16, 3, 3}, 5)});
  EXPECT_LT(r.max_rel_error, 1e-6);
  const auto proj = random_tensor<double>({2, 16, 3, 3}, 8);
  const auto x = random_tensor<double>({2, 16, 3, 3}, 9);
  const double e = param_gradcheck(store, [&](Tape<double>& tp) {
    return sum(mul(att(tp.constant(x)), tp.constant(proj)));
  }, 4);
  EXPECT_LT(e, 1e-6);
}

TEST(UNet, DeskPresetsBuildAndKeepShape) {
  for (const char* name : {"T16", "T32"}) {
    ParamStore<float> store;
    RandomStream rng(3);
    UNet<float> net(UNetPreset::named(name), 1, 3, LayerFactory<float>{store, rng}, "u.");
    Tape<float> t;
    Var<float> y = net.forward(t.constant(Tensor<float>(Shape{1, 1, 64, 64}, 0.5f)));
    EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64})) << name;
    EXPECT_GT(store.trainable_count(), 1000u);
  }
}

TEST(UNet, GradcheckSmall) {
  ParamStore<double> store;
  RandomStream rng(4);
  UNet<double> net(UNetPreset::named("T16"), 2, 1, LayerFactory<double>{store, rng}, "u.");
  auto r = gradcheck([&](Tape<double>&, const Vs& v) { return net.forward(v[0]); },
                     {random_tensor<double>({1, 2, 8, 8}, 6)});
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.min_grad_norm, 0.0);
}

TEST(End2End, OutputMaskedAndShaped) {
  auto d = desk(ModelKind::end2end, 32);
  ReconNet<float> net(d);
  Tape<float> t;
  Var<float> y = net.forward(t.constant(random_tensor<float>({2, 1, 32, 32}, 7, 0, 1)));
  ASSERT_EQ(y.shape(), (Shape{2, 1, 32, 32}));
  const auto g = net.geometry();
  for (std::size_t b = 0; b < 2; ++b)
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j)
        if (!g.inside_circle(i, j)) EXPECT_EQ(y.value()[b * 1024 + i * 32 + j], 0.0f);
}

TEST(End2End, T16GradcheckAtN32) {
  // h = 1e-6: with ~10^4 PReLU units a 1e-5 step crosses a few kinks.
  auto d = desk(ModelKind::end2end, 32);
  d.g1 = d.g2 = "T16";
  ReconNet<double> net(d);
  auto r = gradcheck([&](Tape<double>&, const Vs& v) { return net.forward(v[0]); },
                     {random_tensor<double>({1, 1, 32, 32}, 8, 0, 1)}, 1234, 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.min_grad_norm, 0.0);
  const auto x = random_tensor<double>({1, 1, 32, 32}, 10, 0, 1);
  const auto proj = random_tensor<double>({1, 1, 32, 32}, 11);
  const double e = param_gradcheck(net.store(), [&](Tape<double>& t) {
    return sum(mul(net.forward(t.constant(x)), t.constant(proj)));
  }, 1, 1e-6);
  EXPECT_LT(e, 1e-4);
  std::printf("end-to-end gradcheck: input %.3g, parameters %.3g\n", r.max_rel_error, e);
}

TEST(End2End, ForwardIsDeterministic) {
  auto d = desk(ModelKind::end2end, 32);
  ReconNet<float> a(d), b(d);
  const auto x = random_tensor<float>({1, 1, 32, 32}, 12, 0, 1);
  Tape<float> ta, tb;
  EXPECT_EQ(a.forward(ta.constant(x)).value(), b.forward(tb.constant(x)).value());
}

TEST(Generator, LatentGradientIsNonzero) {
  EXPECT_EQ(ReconNet<float>(desk(ModelKind::generator, 64)).latent_shape(2), (Shape{2, 8, 4, 4}));
  // Same 4x latent upscaling at N=32 keeps the check quick.
  auto d = desk(ModelKind::generator, 32);
  d.latent = {8, 2, 2};
  ReconNet<double> g(d);
  const auto r = random_tensor<double>({1, 1, 32, 32}, 13, 0, 1);
  auto res = gradcheck([&](Tape<double>& t, const Vs& v) { return g.forward(t.constant(r), v[0]); },
                       {random_tensor<double>({1, 8, 2, 2}, 14)}, 1234, 1e-6);
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_GT(res.min_grad_norm, 0.0);
}

TEST(Generator, ZeroLatentIgnoresTheGatePath) {
  auto d = desk(ModelKind::generator, 64);
  ReconNet<float> g(d);
  const auto r = random_tensor<float>({1, 1, 64, 64}, 15, 0, 1);
  const Tensor<float> z(g.latent_shape(1));
  Tape<float> t1;
  const Tensor<float> y1 = g.forward(t1.constant(r), t1.constant(z)).value();
  for (float v : y1.values()) ASSERT_TRUE(std::isfinite(v));
  // The last 8 filters of the latent block's entry conv only feed exp-gates,
  // which multiply a zero latent.
  Parameter<float>* w = g.store().find("g2.up0.entry.w");
  ASSERT_NE(w, nullptr);
  const std::size_t per = w->value.numel() / w->value.dim(0);
  for (std::size_t o = w->value.dim(0) - 8; o < w->value.dim(0); ++o)
    for (std::size_t i = 0; i < per; ++i) w->value[o * per + i] += 0.3f;
  Tape<float> t2;
  EXPECT_EQ(g.forward(t2.constant(r), t2.constant(z)).value(), y1);
}

TEST(Generator, RejectsIncompatibleLatent) {
  auto d = desk(ModelKind::generator, 64);
  d.latent.height = d.latent.width = 5;
  EXPECT_THROW(ReconNet<float>{d}, ConfigError);
  d.latent = {32, 4, 4};  // as many channels as the block
  EXPECT_THROW(ReconNet<float>{d}, ConfigError);
  auto ok = desk(ModelKind::generator, 64);
  ReconNet<float> g(ok);
  Tape<float> t;
  EXPECT_THROW(g.forward(t.constant(Tensor<float>(Shape{1, 1, 64, 64}))), ShapeError);
  EXPECT_THROW(g.forward(t.constant(Tensor<float>(Shape{1, 1, 64, 64})), t.constant(Tensor<float>(Shape{1, 8, 3, 3}))),
               ShapeError);
}

double dense_sigma_max(const Tensor<double>& w) {
  const Eigen::Index rows = static_cast<Eigen::Index>(w.dim(0)), cols = static_cast<Eigen::Index>(w.numel() / w.dim(0));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.data(), rows, cols);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

TEST(Discriminator, ScalarOutputAndNormalizedLayers) {
  auto d = desk(ModelKind::discriminator, 64);
  Discriminator<double> disc(d);
  Tape<double> t;
  V out = disc.forward(t.constant(random_tensor<double>({3, 1, 64, 64}, 16, 0, 1)));
  EXPECT_EQ(out.shape(), (Shape{3, 1}));
  const auto ws = disc.weights();
  const auto sn = disc.spectral_states();
  ASSERT_EQ(ws.size(), 6u);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const double s = dense_sigma_max(*ws[i]) / spectral_sigma(*ws[i], sn[i]);
    EXPECT_GE(s, 0.95) << i;
    EXPECT_LE(s, 1.05) << i;
  }
}

TEST(Discriminator, EmpiricalLipschitzBound) {
  Discriminator<double> disc(desk(ModelKind::discriminator, 64));
  double worst = 0;
  for (std::uint32_t k = 0; k < 100; ++k) {
    const auto a = random_tensor<double>({1, 1, 64, 64}, 100 + k, 0, 1);
    auto b = a;
    const auto delta = random_tensor<double>({1, 1, 64, 64}, 300 + k, -0.1, 0.1);
    double dn = 0;
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] += delta[i], dn += delta[i] * delta[i];
    Tape<double> t;
    const double da = disc.forward(t.constant(a), false).value()[0];
    const double db = disc.forward(t.constant(b), false).value()[0];
    worst = std::max(worst, std::abs(da - db) / std::sqrt(dn));
  }
  EXPECT_LE(worst, 2.0);
}

TEST(Discriminator, Gradcheck) {
  auto d = desk(ModelKind::discriminator, 32);
  d.disc_channels = 4;
  Discriminator<double> disc(d);
  auto r = gradcheck([&](Tape<double>&, const Vs& v) { return disc.forward(v[0], false); },
                     {random_tensor<double>({2, 1, 32, 32}, 17)});
  EXPECT_LT(r.max_rel_error, 1e-4);
  const auto x = random_tensor<double>({2, 1, 32, 32}, 18);
  const double e = param_gradcheck(disc.store(), [&](Tape<double>& t) {
    return sum(disc.forward(t.constant(x), false));
  }, 2);
  EXPECT_LT(e, 1e-4);
}

TEST(Posterior, HeadsStartAtNaiveEstimateAndUnitSigma) {
  NoiseParams p;
  p.s = std::log(500.0);
  std::vector<std::int32_t> r{0, 1, 10, 100, 65535, 400};
  for (auto kind : {ModelKind::posterior_mu, ModelKind::posterior_sigma, ModelKind::posterior_joint}) {
    auto d = desk(kind);
    PosteriorNet<double> net(d);
    Tape<double> t;
    auto out = net.forward(t.constant(posterior_features<double>(r, 1, 2, 3, p)));
    EXPECT_EQ(out.mu.valid(), kind != ModelKind::posterior_sigma);
    EXPECT_EQ(out.sigma.valid(), kind != ModelKind::posterior_mu);
    if (out.mu.valid()) {
      EXPECT_EQ(out.mu.shape(), (Shape{1, 1, 2, 3}));
      for (std::size_t i = 0; i < r.size(); ++i)
        EXPECT_NEAR(out.mu.value()[i], p.s - std::log(std::max(r[i], 0) == 0 ? 0.5 : r[i]), 1e-12);
    }
    if (out.sigma.valid())
      for (double s : out.sigma.value().values()) EXPECT_DOUBLE_EQ(s, 1.0 + kSigmaFloor);
  }
}

TEST(Posterior, SigmaAboveFloorAndGradcheck) {
  auto d = desk(ModelKind::posterior_joint);
  d.posterior_channels = 8;
  PosteriorNet<double> net(d);
  // Push the sigma head far negative: exp underflows, the floor remains.
  net.store().find("p.sigma.b")->value[0] = -800;
  NoiseParams p;
  std::vector<std::int32_t> r(2 * 6 * 6);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<std::int32_t>(i * 37 % 2000);
  const auto x = posterior_features<double>(r, 2, 6, 6, p);
  {
    Tape<double> t;
    for (double s : net.forward(t.constant(x)).sigma.value().values()) EXPECT_GE(s, kSigmaFloor);
  }
  net.store().find("p.sigma.b")->value[0] = 0;
  for (auto* prm : net.store().trainable())
    for (double& v : prm->value.values()) v += 0.05 * std::sin(static_cast<double>(&v - prm->value.data()));
  const auto proj = random_tensor<double>({2, 1, 6, 6}, 19);
  const double e = param_gradcheck(net.store(), [&](Tape<double>& t) {
    auto o = net.forward(t.constant(x));
    return add(sum(mul(o.mu, t.constant(proj))), sum(o.sigma));
  }, 3);
  EXPECT_LT(e, 1e-5);
}

TEST(Descriptor, IniRoundTripAndStrictKeys) {
  auto d = desk(ModelKind::generator, 64);
  d.pixel_spacing = 1.0 / 3.0;
  d.embedding = ReadingEmbedding::linear;
  d.init_seed = 123456789012345ULL;
  const auto back = ModelDescriptor::from_ini(d.to_ini());
  EXPECT_EQ(back, d);
  EXPECT_THROW(ModelDescriptor::from_ini("[model]\nkind=end2end\nwidth=3\n"), ConfigError);
  EXPECT_THROW(ModelDescriptor::from_ini("[model]\nkind=blob\n"), ConfigError);
  EXPECT_THROW(ModelDescriptor::from_ini("[model]\nimage_size=abc\n"), ConfigError);
}

TEST(ParamStore, ExportImportReproducesForward) {
  auto d = desk(ModelKind::end2end, 32);
  ReconNet<float> a(d);
  auto d2 = d;
  d2.init_seed = 99;
  ReconNet<float> b(d2);
  const auto x = random_tensor<float>({1, 1, 32, 32}, 20, 0, 1);
  Tape<float> t1, t2;
  const auto ya = a.forward(t1.constant(x)).value();
  EXPECT_NE(b.forward(t2.constant(x)).value(), ya);
  b.store().import_tensors(a.store().export_tensors());
  Tape<float> t3;
  EXPECT_EQ(b.forward(t3.constant(x)).value(), ya);
  auto entries = a.store().export_tensors();
  entries.pop_back();
  EXPECT_THROW(b.store().import_tensors(entries), IoError);
}

TEST(Embedding, LinearAndLog) {
  std::vector<std::int32_t> r{0, 255, 15};
  auto lin = embed_readings<double>(r, 1, 1, 3, 8, ReadingEmbedding::linear);
  EXPECT_DOUBLE_EQ(lin[1], 1.0);
  EXPECT_DOUBLE_EQ(lin[2], 15.0 / 255.0);
  auto lg = embed_readings<double>(r, 1, 1, 3, 8, ReadingEmbedding::log);
  EXPECT_DOUBLE_EQ(lg[0], 0.0);
  EXPECT_DOUBLE_EQ(lg[1], 1.0);
  EXPECT_DOUBLE_EQ(lg[2], 0.5);
}

}  // namespace
