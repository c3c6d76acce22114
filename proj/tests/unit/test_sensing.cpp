#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "kdci/sensing.hpp"

using namespace kdci;

namespace {

SceneTensor random_scene(const SensingOperator& op, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  SceneTensor x{op.modality(), Image(op.scene_channels(), op.scene_height(), op.scene_width())};
  for (double& v : x.data.values()) v = n(rng);
  return x;
}

Measurement random_measurement(const SensingOperator& op, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Measurement y;
  y.modality = op.modality();
  y.is_complex = op.modality() == Modality::mri;
  y.values.resize(op.measurement_length());
  for (double& v : y.values) v = n(rng);
  return y;
}

double scene_dot(const SceneTensor& a, const SceneTensor& b) { return dot(a.data.values(), b.data.values()); }

// Random operator generator for the property tests.
SensingOperator random_operator(Modality m, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> small(2, 6);
  const std::uint64_t seed = rng();
  switch (m) {
    case Modality::mri: {
      const int n = 1 << std::uniform_int_distribution<int>(2, 4)(rng);
      return make_mri_operator(n, n, 3.0, seed, 1.0);
    }
    case Modality::spc: {
      const int h = small(rng), w = small(rng);
      return make_spc_operator(h, w, small(rng), BinarizeMode::sign, seed, 1.0);
    }
    case Modality::cassi:
      return make_cassi_operator(small(rng), small(rng), std::uniform_int_distribution<int>(1, 4)(rng),
                                 std::uniform_int_distribution<int>(1, 2)(rng), BinarizeMode::heaviside, seed, 1.0);
  }
  return {};
}

}  // namespace

TEST(Binarize, HeavisideAndSignMapZeroToOne) {
  Image w(1, 1, 3);
  w.values() = {-0.5, 0.0, 2.0};
  EXPECT_EQ(binarize(w, BinarizeMode::heaviside).values(), (std::vector<double>{0.0, 1.0, 1.0}));
  EXPECT_EQ(binarize(w, BinarizeMode::sign).values(), (std::vector<double>{-1.0, 1.0, 1.0}));
  EXPECT_EQ(binarize(w, BinarizeMode::real).values(), w.values());
}

TEST(Binarize, SteIsIdentity) {
  Image w(1, 2, 2), g(1, 2, 2);
  w.values() = {-3.0, 0.0, 1e-9, 5.0};
  g.values() = {0.1, -0.2, 0.3, -0.4};
  EXPECT_EQ(ste_backward(w, g).values(), g.values());
}

TEST(Binarize, UnknownModeNameRejected) { EXPECT_THROW(parse_binarize_mode("ternary"), ConfigError); }

class AdjointProperty : public ::testing::TestWithParam<Modality> {};

TEST_P(AdjointProperty, InnerProductsAgree) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const SensingOperator op = random_operator(GetParam(), rng);
    const SceneTensor x = random_scene(op, rng);
    const Measurement y = random_measurement(op, rng);
    const double lhs = dot(op.forward(x).values, y.values);
    const double rhs = scene_dot(x, op.adjoint(y));
    EXPECT_NEAR(lhs, rhs, 1e-9 * (1.0 + std::abs(lhs)));
  }
}

TEST_P(AdjointProperty, ForwardIsLinear) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const SensingOperator op = random_operator(GetParam(), rng);
    const SceneTensor a = random_scene(op, rng), b = random_scene(op, rng);
    SceneTensor c{op.modality(), a.data * 2.0 + b.data * -0.5};
    const auto ya = op.forward(a).values, yb = op.forward(b).values, yc = op.forward(c).values;
    for (std::size_t i = 0; i < yc.size(); ++i) EXPECT_NEAR(yc[i], 2.0 * ya[i] - 0.5 * yb[i], 1e-10);
  }
}

TEST_P(AdjointProperty, BackprojectionIsAdjointOfForward) {
  std::mt19937_64 rng(13);
  const SensingOperator op = random_operator(GetParam(), rng);
  const SceneTensor x = random_scene(op, rng);
  const auto direct = op.backproject(x).data.values();
  const auto composed = op.adjoint(op.forward(x)).data.values();
  ASSERT_EQ(direct.size(), composed.size());
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(direct[i], composed[i], 1e-10);
}

// <g, A^T A x> is checked against central differences in Phi. Real mode keeps
// Phi = W so the perturbation moves the operator continuously.
TEST_P(AdjointProperty, BackprojectGradMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  SensingOperator op = random_operator(GetParam(), rng);
  EncoderParams p = op.params();
  if (p.modality != Modality::mri) {
    p.mode = BinarizeMode::real;
    op = p.modality == Modality::spc ? SensingOperator::spc(p, op.scene_height(), op.scene_width())
                                      : SensingOperator::cassi(p, op.bands());
  }
  const SceneTensor x = random_scene(op, rng);
  const SceneTensor g = random_scene(op, rng);
  const Image grad = op.backproject_grad(x, g.data);
  const double h = 1e-6;
  std::uniform_int_distribution<std::size_t> pick(0, p.weights.size() - 1);
  for (int t = 0; t < 10; ++t) {
    const std::size_t k = pick(rng);
    double fd;
    if (p.modality == Modality::mri) {
      // The mask enters A^T A x linearly, so toggling one entry is an exact difference.
      Image on = op.params().weights, off = op.params().weights;
      on.values()[k] = 1.0;
      off.values()[k] = -1.0;
      SensingOperator a = op, b = op;
      a.set_weights(on);
      b.set_weights(off);
      fd = scene_dot(g, a.backproject(x)) - scene_dot(g, b.backproject(x));
    } else {
      Image plus = op.params().weights, minus = op.params().weights;
      plus.values()[k] += h;
      minus.values()[k] -= h;
      SensingOperator a = op, b = op;
      a.set_weights(plus);
      b.set_weights(minus);
      fd = (scene_dot(g, a.backproject(x)) - scene_dot(g, b.backproject(x))) / (2.0 * h);
    }
    EXPECT_NEAR(grad.values()[k], fd, 1e-5 * (1.0 + std::abs(fd))) << "entry " << k;
  }
}

INSTANTIATE_TEST_SUITE_P(AllModalities, AdjointProperty,
                         ::testing::Values(Modality::mri, Modality::spc, Modality::cassi),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(MriOperator, MatchesDirectDft) {
  const int n = 4;
  SensingOperator op = make_mri_operator(n, n, 2.0, 5, 1.0);
  std::mt19937_64 rng(3);
  const SceneTensor x = random_scene(op, rng);
  const auto y = op.forward(x).values;
  const auto& mask = op.phi().values();
  for (int ky = 0; ky < n; ++ky)
    for (int kx = 0; kx < n; ++kx) {
      std::complex<double> acc = 0.0;
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
          const double ang = -2.0 * std::numbers::pi * (ky * r + kx * c) / n;
          acc += std::complex<double>(x.data.at(0, r, c), x.data.at(1, r, c)) * std::polar(1.0, ang);
        }
      acc *= mask[ky * n + kx] / n;
      const std::size_t i = static_cast<std::size_t>(ky) * n + kx;
      EXPECT_NEAR(y[2 * i], acc.real(), 1e-12);
      EXPECT_NEAR(y[2 * i + 1], acc.imag(), 1e-12);
    }
}

TEST(MriOperator, FullMaskBackprojectionIsIdentity) {
  SensingOperator op = make_mri_operator(8, 8, 1.0, 1, 1.0);
  Image w(1, 8, 8, 1.0);
  op.set_weights(w);
  std::mt19937_64 rng(4);
  const SceneTensor x = random_scene(op, rng);
  const auto bp = op.backproject(x).data.values();
  for (std::size_t i = 0; i < bp.size(); ++i) EXPECT_NEAR(bp[i], x.data.values()[i], 1e-12);
  EXPECT_EQ(op.acquired_samples(), 64u);
}

TEST(MriOperator, RejectsNonHeavisideMode) {
  EncoderParams p{Modality::mri, BinarizeMode::sign, Image(1, 4, 4)};
  EXPECT_THROW(SensingOperator::mri(p), ConfigError);
}

TEST(MriOperator, VariableDensityAveragesInverseAcceleration) {
  const auto p = mri_sampling_density(32, 32, 4.0, 0.12);
  double mean = 0.0;
  for (double v : p) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    mean += v;
  }
  EXPECT_NEAR(mean / p.size(), 0.25, 1e-9);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
}

TEST(SpcOperator, ForwardIsMatrixVectorProduct) {
  SensingOperator op = make_spc_operator(2, 3, 2, BinarizeMode::sign, 9, 1.0);
  SceneTensor x{Modality::spc, Image(1, 2, 3)};
  x.data.values() = {1, 2, 3, 4, 5, 6};
  const auto& phi = op.phi().values();
  const auto y = op.forward(x).values;
  for (int i = 0; i < 2; ++i) {
    double acc = 0.0;
    for (int j = 0; j < 6; ++j) acc += phi[i * 6 + j] * (j + 1);
    EXPECT_DOUBLE_EQ(y[i], acc);
  }
}

TEST(SpcOperator, RowsForRatio) {
  EXPECT_EQ(spc_rows_for_ratio(0.1, 1024), 102);
  EXPECT_EQ(spc_rows_for_ratio(1e-6, 16), 1);
}

TEST(CassiOperator, SingleBandSingleSnapshotIsMasking) {
  SensingOperator op = make_cassi_operator(3, 3, 1, 1, BinarizeMode::heaviside, 2, 1.0);
  std::mt19937_64 rng(5);
  const SceneTensor x = random_scene(op, rng);
  const auto y = op.forward(x).values;
  ASSERT_EQ(y.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y[i], op.phi().values()[i] * x.data.values()[i]);
}

TEST(CassiOperator, DetectorWidthGrowsWithBands) {
  SensingOperator op = make_cassi_operator(4, 5, 3, 2, BinarizeMode::heaviside, 2, 1.0);
  EXPECT_EQ(op.measurement_length(), 2u * 4 * (5 + 3 - 1));
}

TEST(CassiOperator, WrongSceneShapeRejected) {
  SensingOperator op = make_cassi_operator(4, 4, 3, 1, BinarizeMode::heaviside, 2, 1.0);
  SceneTensor x{Modality::cassi, Image(2, 4, 4)};
  EXPECT_THROW(op.forward(x), ShapeError);
}

TEST(AfRegularizer, OracleValues) {
  EncoderParams p{Modality::mri, BinarizeMode::heaviside, Image(1, 4, 4, -1.0)};
  for (int i = 0; i < 4; ++i) p.weights.values()[i] = 1.0;
  EXPECT_NEAR(af_regularizer(p, 4.0, 1.0).value, 0.0, 1e-15);
  for (int i = 0; i < 8; ++i) p.weights.values()[i] = 1.0;
  EXPECT_NEAR(af_regularizer(p, 4.0, 1.0).value, 0.00390625, 1e-15);
  EXPECT_NEAR(af_regularizer(p, 4.0, 1e15).value, 1e15 * 0.00390625, 1e3);
}

TEST(AfRegularizer, GradientMatchesFiniteDifferenceInPhi) {
  // The regularizer depends on Phi through sum(Phi)/n, so the derivative with
  // respect to any entry is the scalar 4 tau (t - 1/AF)^3 / n.
  EncoderParams p{Modality::mri, BinarizeMode::heaviside, Image(1, 4, 4, -1.0)};
  for (int i = 0; i < 7; ++i) p.weights.values()[i] = 1.0;
  const auto r = af_regularizer(p, 4.0, 2.0);
  const double n = 16.0, t = 7.0 / n, h = 1e-6;
  auto value_at = [&](double tt) { return 2.0 * std::pow(tt - 0.25, 4); };
  const double fd = (value_at(t + h / n) - value_at(t - h / n)) / (2.0 * h);
  for (double g : r.grad.values()) EXPECT_NEAR(g, fd, 1e-4);
}

TEST(Awgn, InfiniteSnrIsIdentity) {
  SensingOperator op = make_spc_operator(4, 4, 5, BinarizeMode::sign, 1, 1.0);
  std::mt19937_64 rng(6);
  const Measurement y = op.forward(random_scene(op, rng));
  EXPECT_EQ(add_awgn(y, kNoiseDisabled, 1).values, y.values);
}

TEST(Awgn, EmpiricalSnrNearTarget) {
  Measurement y;
  y.values.assign(20000, 0.0);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : y.values) v = n(rng);
  const Measurement z = add_awgn(y, 20.0, 42);
  double sig = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    sig += y.values[i] * y.values[i];
    noise += (z.values[i] - y.values[i]) * (z.values[i] - y.values[i]);
  }
  EXPECT_NEAR(10.0 * std::log10(sig / noise), 20.0, 0.2);
  EXPECT_EQ(add_awgn(y, 20.0, 42).values, z.values);
}

TEST(Awgn, ZeroSignalRejected) {
  Measurement y;
  y.values.assign(8, 0.0);
  EXPECT_THROW(add_awgn(y, 30.0, 1), NumericError);
}

TEST(Awgn, UnacquiredMriEntriesStayZero) {
  SensingOperator op = make_mri_operator(8, 8, 4.0, 3, 1.0);
  std::mt19937_64 rng(8);
  const Measurement y = op.forward(random_scene(op, rng));
  const Measurement z = add_awgn(y, 10.0, 5);
  for (std::size_t i = 0; i < z.values.size(); ++i)
    if (!y.support[i]) EXPECT_EQ(z.values[i], 0.0);
}
