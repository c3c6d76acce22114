#include "kdci/sensing.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace kdci {

std::string_view to_string(BinarizeMode m) {
  switch (m) {
    case BinarizeMode::real: return "real";
    case BinarizeMode::heaviside: return "heaviside";
    case BinarizeMode::sign: return "sign";
  }
  return "?";
}

BinarizeMode parse_binarize_mode(std::string_view s) {
  if (s == "real") return BinarizeMode::real;
  if (s == "heaviside") return BinarizeMode::heaviside;
  if (s == "sign") return BinarizeMode::sign;
  throw ConfigError("unknown binarization mode '" + std::string(s) + "'");
}

void SceneTensor::validate() const {
  if (!data.all_finite()) throw NumericError("scene tensor has non-finite entries");
  if (kind == Modality::mri && data.channels() != 2)
    throw ShapeError("MRI scene must have 2 channels, got " + data.shape_string());
  if (kind == Modality::spc && data.channels() != 1)
    throw ShapeError("SPC scene must have 1 channel, got " + data.shape_string());
  if (kind == Modality::cassi && data.channels() < 1) throw ShapeError("CASSI scene needs at least one band");
}

Image binarize(const Image& w, BinarizeMode mode) {
  Image out = w;
  switch (mode) {
    case BinarizeMode::real: break;
    case BinarizeMode::heaviside:
      for (double& v : out.values()) v = v >= 0.0 ? 1.0 : 0.0;
      break;
    case BinarizeMode::sign:
      for (double& v : out.values()) v = v >= 0.0 ? 1.0 : -1.0;
      break;
  }
  return out;
}

Image ste_backward(const Image& w, const Image& grad_phi) {
  if (!w.same_shape(grad_phi))
    throw ShapeError("STE gradient shape " + grad_phi.shape_string() + " vs weights " + w.shape_string());
  return grad_phi;
}

std::size_t Measurement::acquired_count() const {
  if (support.empty()) return values.size();
  std::size_t n = 0;
  for (auto s : support) n += s != 0;
  return n;
}

// ---------------------------------------------------------------------------

SensingOperator SensingOperator::mri(EncoderParams params) {
  if (params.modality != Modality::mri) throw ConfigError("mri operator needs MRI params");
  if (params.mode != BinarizeMode::heaviside) throw ConfigError("MRI masks use heaviside binarization");
  if (params.weights.channels() != 1) throw ShapeError("MRI mask must be a single (N, M) grid");
  SensingOperator op;
  op.height_ = params.weights.height();
  op.width_ = params.weights.width();
  op.params_ = std::move(params);
  op.phi_ = binarize(op.params_.weights, op.params_.mode);
  return op;
}

SensingOperator SensingOperator::spc(EncoderParams params, int height, int width) {
  if (params.modality != Modality::spc) throw ConfigError("spc operator needs SPC params");
  if (params.weights.channels() != 1) throw ShapeError("SPC weights must be (1, m, n)");
  if (params.weights.width() != height * width)
    throw ShapeError("SPC row length " + std::to_string(params.weights.width()) + " != n = " +
                     std::to_string(height * width));
  SensingOperator op;
  op.height_ = height;
  op.width_ = width;
  op.params_ = std::move(params);
  op.phi_ = binarize(op.params_.weights, op.params_.mode);
  return op;
}

SensingOperator SensingOperator::cassi(EncoderParams params, int bands) {
  if (params.modality != Modality::cassi) throw ConfigError("cassi operator needs CASSI params");
  if (bands < 1) throw ConfigError("CASSI needs at least one band");
  if (params.weights.channels() < 1) throw ShapeError("CASSI needs at least one snapshot");
  SensingOperator op;
  op.height_ = params.weights.height();
  op.width_ = params.weights.width();
  op.bands_ = bands;
  op.params_ = std::move(params);
  op.phi_ = binarize(op.params_.weights, op.params_.mode);
  return op;
}

void SensingOperator::set_weights(Image w) {
  if (!w.same_shape(params_.weights))
    throw ShapeError("set_weights: " + w.shape_string() + " vs " + params_.weights.shape_string());
  params_.weights = std::move(w);
  phi_ = binarize(params_.weights, params_.mode);
}

int SensingOperator::scene_channels() const {
  switch (modality()) {
    case Modality::mri: return 2;
    case Modality::spc: return 1;
    case Modality::cassi: return bands_;
  }
  return 0;
}

int SensingOperator::snapshots() const {
  switch (modality()) {
    case Modality::mri: return 1;
    case Modality::spc: return params_.weights.height();
    case Modality::cassi: return params_.weights.channels();
  }
  return 0;
}

std::size_t SensingOperator::measurement_length() const {
  switch (modality()) {
    case Modality::mri: return 2 * static_cast<std::size_t>(height_) * width_;
    case Modality::spc: return static_cast<std::size_t>(params_.weights.height());
    case Modality::cassi:
      return static_cast<std::size_t>(snapshots()) * height_ * (width_ + bands_ - 1);
  }
  return 0;
}

std::size_t SensingOperator::acquired_samples() const {
  if (modality() == Modality::mri) {
    std::size_t n = 0;
    for (double v : phi_.values()) n += v != 0.0;
    return n;
  }
  return measurement_length();
}

void SensingOperator::check_scene(const SceneTensor& x) const {
  if (x.kind != modality())
    throw ShapeError("scene modality " + std::string(to_string(x.kind)) + " vs operator " +
                     std::string(to_string(modality())));
  const Image& d = x.data;
  if (d.channels() != scene_channels() || d.height() != height_ || d.width() != width_)
    throw ShapeError("scene shape " + d.shape_string() + " does not match operator grid (" +
                     std::to_string(scene_channels()) + ", " + std::to_string(height_) + ", " +
                     std::to_string(width_) + ")");
}

namespace {

ComplexGrid to_grid(const Image& img) {
  ComplexGrid g(img.height(), img.width());
  auto re = img.plane(0);
  auto im = img.plane(1);
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = {re[i], im[i]};
  return g;
}

Image from_grid(const ComplexGrid& g) {
  Image img(2, g.height, g.width);
  auto re = img.plane(0);
  auto im = img.plane(1);
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    re[i] = g.values[i].real();
    im[i] = g.values[i].imag();
  }
  return img;
}

// Detector of snapshot s: D[r, c + l] += Phi_s[r, c] * cube_l[r, c].
void cassi_shear(const Image& phi, int s, const Image& cube, int bands, double* detector) {
  const int n = phi.height(), m = phi.width(), det_w = m + bands - 1;
  for (int l = 0; l < bands; ++l)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < m; ++c) detector[r * det_w + c + l] += phi.at(s, r, c) * cube.at(l, r, c);
}

// Adjoint of cassi_shear, accumulated into cube.
void cassi_unshear(const Image& phi, int s, const double* detector, int bands, Image& cube) {
  const int n = phi.height(), m = phi.width(), det_w = m + bands - 1;
  for (int l = 0; l < bands; ++l)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < m; ++c) cube.at(l, r, c) += phi.at(s, r, c) * detector[r * det_w + c + l];
}

}  // namespace

Measurement SensingOperator::forward(const SceneTensor& x) const {
  check_scene(x);
  Measurement y;
  y.modality = modality();
  switch (modality()) {
    case Modality::mri: {
      ComplexGrid k = to_grid(x.data);
      fft2(k, false);
      y.is_complex = true;
      y.values.resize(2 * k.values.size());
      y.support.resize(2 * k.values.size());
      const auto& mask = phi_.values();
      for (std::size_t i = 0; i < k.values.size(); ++i) {
        const cplx v = mask[i] * k.values[i];
        y.values[2 * i] = v.real();
        y.values[2 * i + 1] = v.imag();
        y.support[2 * i] = y.support[2 * i + 1] = mask[i] != 0.0;
      }
      break;
    }
    case Modality::spc: {
      const int rows = phi_.height(), n = phi_.width();
      y.values.assign(rows, 0.0);
      const double* xv = x.data.data();
      for (int i = 0; i < rows; ++i) {
        const double* row = phi_.data() + static_cast<std::size_t>(i) * n;
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += row[j] * xv[j];
        y.values[i] = acc;
      }
      break;
    }
    case Modality::cassi: {
      const std::size_t per_shot = static_cast<std::size_t>(height_) * (width_ + bands_ - 1);
      y.values.assign(measurement_length(), 0.0);
      for (int s = 0; s < snapshots(); ++s) cassi_shear(phi_, s, x.data, bands_, y.values.data() + s * per_shot);
      break;
    }
  }
  return y;
}

SceneTensor SensingOperator::adjoint(const Measurement& y) const {
  if (y.values.size() != measurement_length())
    throw ShapeError("measurement length " + std::to_string(y.values.size()) + " != " +
                     std::to_string(measurement_length()));
  SceneTensor z{modality(), Image(scene_channels(), height_, width_)};
  switch (modality()) {
    case Modality::mri: {
      ComplexGrid k(height_, width_);
      const auto& mask = phi_.values();
      for (std::size_t i = 0; i < k.values.size(); ++i)
        k.values[i] = mask[i] * cplx(y.values[2 * i], y.values[2 * i + 1]);
      fft2(k, true);
      z.data = from_grid(k);
      break;
    }
    case Modality::spc: {
      const int rows = phi_.height(), n = phi_.width();
      double* zv = z.data.data();
      for (int i = 0; i < rows; ++i) {
        const double* row = phi_.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) zv[j] += row[j] * y.values[i];
      }
      break;
    }
    case Modality::cassi: {
      const std::size_t per_shot = static_cast<std::size_t>(height_) * (width_ + bands_ - 1);
      for (int s = 0; s < snapshots(); ++s) cassi_unshear(phi_, s, y.values.data() + s * per_shot, bands_, z.data);
      break;
    }
  }
  return z;
}

SceneTensor SensingOperator::backproject(const SceneTensor& x) const {
  if (modality() == Modality::mri) {
    // Phi parameterizes Phi^T Phi of the row-selection operator directly, so the
    // backprojection is linear in the mask: F^H (Phi . F x).
    check_scene(x);
    ComplexGrid k = to_grid(x.data);
    fft2(k, false);
    const auto& mask = phi_.values();
    for (std::size_t i = 0; i < k.values.size(); ++i) k.values[i] *= mask[i];
    fft2(k, true);
    return {Modality::mri, from_grid(k)};
  }
  return adjoint(forward(x));
}

Image SensingOperator::backproject_grad(const SceneTensor& x, const Image& grad_z) const {
  check_scene(x);
  if (!grad_z.same_shape(x.data)) throw ShapeError("backprojection gradient shape mismatch");
  Image grad(phi_.channels(), phi_.height(), phi_.width());
  switch (modality()) {
    case Modality::mri: {
      // dL/dPhi_k = Re(conj((F g)_k) (F x)_k)
      ComplexGrid kx = to_grid(x.data);
      ComplexGrid kg = to_grid(grad_z);
      fft2(kx, false);
      fft2(kg, false);
      auto& gv = grad.values();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = (std::conj(kg.values[i]) * kx.values[i]).real();
      break;
    }
    case Modality::spc: {
      // z = A^T (A x): dL/dA = (A x) g^T + (A g) x^T
      const int rows = phi_.height(), n = phi_.width();
      const double* xv = x.data.data();
      const double* gv = grad_z.data();
      for (int i = 0; i < rows; ++i) {
        const double* row = phi_.data() + static_cast<std::size_t>(i) * n;
        double ax = 0.0, ag = 0.0;
        for (int j = 0; j < n; ++j) {
          ax += row[j] * xv[j];
          ag += row[j] * gv[j];
        }
        double* out = grad.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) out[j] = ax * gv[j] + ag * xv[j];
      }
      break;
    }
    case Modality::cassi: {
      // z = sum_s Phi_s . P^T P (Phi_s . x):
      //   dL/dPhi_s[r,c] = sum_l D_s[r,c+l] g_l[r,c] + x_l[r,c] E_s[r,c+l]
      // with D_s = P(Phi_s . x) and E_s = P(Phi_s . g).
      const int det_w = width_ + bands_ - 1;
      std::vector<double> d(static_cast<std::size_t>(height_) * det_w);
      std::vector<double> e(d.size());
      for (int s = 0; s < snapshots(); ++s) {
        std::fill(d.begin(), d.end(), 0.0);
        std::fill(e.begin(), e.end(), 0.0);
        cassi_shear(phi_, s, x.data, bands_, d.data());
        cassi_shear(phi_, s, grad_z, bands_, e.data());
        for (int l = 0; l < bands_; ++l)
          for (int r = 0; r < height_; ++r)
            for (int c = 0; c < width_; ++c) {
              const std::size_t k = static_cast<std::size_t>(r) * det_w + c + l;
              grad.at(s, r, c) += d[k] * grad_z.at(l, r, c) + x.data.at(l, r, c) * e[k];
            }
      }
      break;
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------

AfRegularizer af_regularizer(const EncoderParams& params, double acceleration, double tau) {
  if (!(acceleration > 0.0)) throw ConfigError("acceleration factor must be positive");
  if (params.mode != BinarizeMode::heaviside) throw ConfigError("AF regularizer needs a heaviside mask");
  const Image phi = binarize(params.weights, params.mode);
  const double n = static_cast<double>(phi.size());
  double active = 0.0;
  for (double v : phi.values()) active += v;
  const double gap = active / n - 1.0 / acceleration;
  AfRegularizer out;
  out.value = tau * gap * gap * gap * gap;
  out.grad = Image(phi.channels(), phi.height(), phi.width(), tau * 4.0 * gap * gap * gap / n);
  return out;
}

Measurement add_awgn(const Measurement& y, double snr_db, std::uint64_t seed) {
  if (std::isinf(snr_db) && snr_db > 0) return y;
  if (!std::isfinite(snr_db)) throw ConfigError("SNR must be finite or +inf");
  const bool masked = !y.support.empty();
  double energy = 0.0;
  for (std::size_t i = 0; i < y.values.size(); ++i)
    if (!masked || y.support[i]) energy += y.values[i] * y.values[i];
  const std::size_t count = y.acquired_count();
  if (energy == 0.0 || count == 0) throw NumericError("SNR undefined for a zero-energy measurement");
  const double sigma = std::sqrt(energy / (static_cast<double>(count) * std::pow(10.0, snr_db / 10.0)));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  Measurement out = y;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    if (!masked || out.support[i]) out.values[i] += normal(rng);
  out.snr_db = snr_db;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> mri_sampling_density(int n, int m, double acceleration, double width) {
  if (!(acceleration >= 1.0)) throw ConfigError("MRI acceleration factor must be >= 1");
  if (!(width > 0.0)) throw ConfigError("density width must be positive");
  std::vector<double> p(static_cast<std::size_t>(n) * m);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < m; ++x) {
      // Wrapped frequency distance from DC, as a fraction of the grid.
      const double fy = std::min(y, n - y) / static_cast<double>(n);
      const double fx = std::min(x, m - x) / static_cast<double>(m);
      p[static_cast<std::size_t>(y) * m + x] = std::exp(-(fy * fy + fx * fx) / (2.0 * width * width));
    }
  // Scale so the clipped density averages 1/AF.
  const double target = 1.0 / acceleration;
  double lo = 0.0, hi = 1.0;
  auto mean_at = [&](double s) {
    double acc = 0.0;
    for (double v : p) acc += std::min(1.0, s * v);
    return acc / static_cast<double>(p.size());
  };
  while (mean_at(hi) < target) hi *= 2.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_at(mid) < target ? lo : hi) = mid;
  }
  for (double& v : p) v = std::min(1.0, hi * v);
  return p;
}

SensingOperator make_mri_operator(int n, int m, double acceleration, std::uint64_t seed, double init_scale,
                                  double density_width) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  EncoderParams p{Modality::mri, BinarizeMode::heaviside, Image(1, n, m)};
  if (density_width > 0.0) {
    const auto density = mri_sampling_density(n, m, acceleration, density_width);
    for (std::size_t k = 0; k < density.size(); ++k) p.weights.values()[k] = init_scale * (density[k] - unif(rng));
  } else {
    if (!(acceleration >= 1.0)) throw ConfigError("MRI acceleration factor must be >= 1");
    const double offset = 1.0 - 1.0 / acceleration;
    for (double& v : p.weights.values()) v = init_scale * (unif(rng) - offset);
  }
  return SensingOperator::mri(std::move(p));
}

SensingOperator make_spc_operator(int height, int width, int rows, BinarizeMode mode, std::uint64_t seed,
                                  double init_scale) {
  if (rows < 1) throw ConfigError("SPC needs at least one measurement row");
  if (mode == BinarizeMode::heaviside) throw ConfigError("SPC uses sign (binary) or real coded apertures");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  EncoderParams p{Modality::spc, mode, Image(1, rows, height * width)};
  for (double& v : p.weights.values()) v = init_scale * normal(rng);
  return SensingOperator::spc(std::move(p), height, width);
}

SensingOperator make_cassi_operator(int n, int m, int bands, int snapshots, BinarizeMode mode, std::uint64_t seed,
                                    double init_scale) {
  if (snapshots < 1) throw ConfigError("CASSI needs at least one snapshot");
  if (mode == BinarizeMode::sign) throw ConfigError("CASSI uses heaviside (binary) or real coded apertures");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  EncoderParams p{Modality::cassi, mode, Image(snapshots, n, m)};
  const double offset = mode == BinarizeMode::heaviside ? 0.5 : 0.0;
  for (double& v : p.weights.values()) v = init_scale * (unif(rng) - offset);
  return SensingOperator::cassi(std::move(p), bands);
}

int spc_rows_for_ratio(double gamma, int pixels) {
  if (!(gamma > 0.0) || gamma > 1.0) throw ConfigError("compression ratio must lie in (0, 1]");
  return std::max(1, static_cast<int>(std::lround(gamma * pixels)));
}

}  // namespace kdci
