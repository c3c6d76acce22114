#include <gtest/gtest.h>

#include <random>

#include "kdci/decoder.hpp"

using namespace kdci;

namespace {

Image random_image(int c, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Image img(c, h, w);
  for (double& v : img.values()) v = n(rng);
  return img;
}

DecoderConfig tiny_config() {
  DecoderConfig c;
  c.in_channels = 2;
  c.depth = 2;
  c.base_filters = 2;
  c.seed = 7;
  return c;
}

}  // namespace

TEST(Decoder, ZeroInputGivesFiniteOutputOfInputShape) {
  DecoderConfig c;
  c.in_channels = 2;
  DecoderNet net(c, 64, 64);
  std::vector<Image> in{Image(2, 64, 64)};
  const auto r = net.decode(in);
  ASSERT_EQ(r.reconstruction.size(), 1u);
  EXPECT_EQ(r.reconstruction[0].shape_string(), Image(2, 64, 64).shape_string());
  EXPECT_TRUE(r.reconstruction[0].all_finite());
}

TEST(Decoder, ForwardIsBitDeterministic) {
  DecoderNet net(tiny_config(), 8, 8);
  std::mt19937_64 rng(1);
  std::vector<Image> in{random_image(2, 8, 8, rng)};
  EXPECT_EQ(net.decode(in).reconstruction[0].values(), net.decode(in).reconstruction[0].values());
}

TEST(Decoder, SameSeedGivesIdenticalBottlenecks) {
  DecoderNet a(tiny_config(), 8, 8), b(tiny_config(), 8, 8);
  std::mt19937_64 rng(2);
  std::vector<Image> in{random_image(2, 8, 8, rng)};
  EXPECT_EQ(a.decode(in).bottleneck[0].values(), b.decode(in).bottleneck[0].values());
  const auto shape = a.bottleneck_shape();
  EXPECT_EQ(shape[0], 8);
  EXPECT_EQ(shape[1], 2);
}

TEST(Decoder, IndivisibleDimsRejectedAtConstruction) {
  DecoderConfig c = tiny_config();
  EXPECT_THROW(DecoderNet(c, 10, 8), ConfigError);
  c.depth = 0;
  EXPECT_THROW(DecoderNet(c, 8, 8), ConfigError);
}

TEST(Decoder, ParamL2) {
  DecoderNet net(tiny_config(), 8, 8);
  std::fill(net.parameters().begin(), net.parameters().end(), 0.0);
  EXPECT_EQ(param_l2(net), 0.0);
  net.parameters()[0] = 1.0;
  net.parameters()[1] = -2.0;
  EXPECT_DOUBLE_EQ(param_l2(net), 5.0);

  DecoderNet fresh(tiny_config(), 8, 8);
  double acc = 0.0;
  for (std::size_t i = 0; i < fresh.num_parameters(); ++i) acc += fresh.parameters()[i] * fresh.parameters()[i];
  EXPECT_NEAR(param_l2(fresh), acc, 1e-12 * acc);
}

// L = ||decode(x) - t||^2 + <bottleneck, v>; analytic vs central differences.
TEST(Decoder, GradientMatchesFiniteDifferences) {
  DecoderConfig c = tiny_config();
  c.input_scale = 0.7;
  DecoderNet net(c, 8, 8);
  ASSERT_LE(net.num_parameters(), 5000u);
  std::mt19937_64 rng(3);
  std::vector<Image> x{random_image(2, 8, 8, rng), random_image(2, 8, 8, rng)};
  std::vector<Image> t{random_image(2, 8, 8, rng), random_image(2, 8, 8, rng)};
  const auto bs = net.bottleneck_shape();
  std::vector<Image> v{random_image(bs[0], bs[1], bs[2], rng), random_image(bs[0], bs[1], bs[2], rng)};

  auto loss = [&](const DecoderNet& n, const std::vector<Image>& in) {
    const auto r = n.decode(in);
    double l = 0.0;
    for (int b = 0; b < 2; ++b) {
      l += (r.reconstruction[b] - t[b]).squared_norm();
      l += dot(r.bottleneck[b].values(), v[b].values());
    }
    return l;
  };

  DecoderTape tape;
  const auto r = net.decode(x, tape);
  std::vector<Image> d_rec;
  for (int b = 0; b < 2; ++b) d_rec.push_back((r.reconstruction[b] - t[b]) * 2.0);
  std::vector<double> grad(net.num_parameters(), 0.0);
  const auto d_in = net.backward(tape, d_rec, v, grad);

  std::uniform_int_distribution<std::size_t> pick(0, net.num_parameters() - 1);
  const double h = 1e-5;
  for (int k = 0; k < 50; ++k) {
    const std::size_t i = pick(rng);
    DecoderNet p = net, m = net;
    p.parameters()[i] += h;
    m.parameters()[i] -= h;
    const double fd = (loss(p, x) - loss(m, x)) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "parameter " << i;
  }
  for (int k = 0; k < 10; ++k) {
    const int b = k % 2;
    const std::size_t i = pick(rng) % x[b].size();
    auto xp = x, xm = x;
    xp[b].values()[i] += h;
    xm[b].values()[i] -= h;
    const double fd = (loss(net, xp) - loss(net, xm)) / (2 * h);
    EXPECT_NEAR(d_in[b].values()[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "input " << i;
  }
}

TEST(Decoder, CheckpointRoundTrip) {
  DecoderNet net(tiny_config(), 8, 8);
  const DecoderNet back = decoder_from_json(nlohmann::json::parse(decoder_to_json(net).dump()));
  EXPECT_EQ(parameter_checksum(net.parameters()), parameter_checksum(back.parameters()));
  nlohmann::json bad = decoder_to_json(net);
  bad["format_version"] = 99;
  EXPECT_THROW(decoder_from_json(bad), IoError);
}
