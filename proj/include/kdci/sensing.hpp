#pragma once

// Differentiable forward models for the three acquisition systems.
//
// Every operator exposes apply (forward), its exact linear adjoint, the
// backprojection A^T A x that feeds the decoder, and the vector-Jacobian
// product of that backprojection with respect to the binarized encoder
// values Phi. Binarization uses a straight-through estimator, so gradients
// with respect to Phi are also the gradients with respect to the latent W.

#include <cstdint>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

#include "kdci/common.hpp"
#include "kdci/fft.hpp"

namespace kdci {

enum class BinarizeMode { real, heaviside, sign };

std::string_view to_string(BinarizeMode m);
BinarizeMode parse_binarize_mode(std::string_view s);

/// Ground-truth signal. MRI: (2, N, N) real/imag; SPC: (1, N, N); CASSI: (L, N, M).
struct SceneTensor {
  Modality kind = Modality::spc;
  Image data;

  /// Throws NumericError for non-finite entries and ShapeError for bad channel counts.
  void validate() const;
};

/// Latent encoder weights W and the binarization applied to them.
///
/// Layout of `weights`:
///   MRI:   (1, N, M)        k-space mask grid
///   SPC:   (1, m, n)        one row per coded aperture, n = image pixels
///   CASSI: (snapshots, N, M) one coded aperture per snapshot
struct EncoderParams {
  Modality modality = Modality::spc;
  BinarizeMode mode = BinarizeMode::real;
  Image weights;
};

/// H(w) with H(0) = 1, sign(w) with sign(0) = 1, or identity for real mode.
Image binarize(const Image& w, BinarizeMode mode);

/// Straight-through backward rule: dL/dW = dL/dPhi.
Image ste_backward(const Image& w, const Image& grad_phi);

struct Measurement {
  Modality modality = Modality::spc;
  bool is_complex = false;
  /// Real values, or interleaved (re, im) pairs when is_complex.
  std::vector<double> values;
  /// Per-value flags of physically acquired entries; empty means all acquired.
  std::vector<std::uint8_t> support;
  std::optional<double> snr_db;

  std::size_t acquired_count() const;
};

class SensingOperator {
 public:
  SensingOperator() = default;

  /// MRI operator over an (N, M) k-space grid. Mode must be heaviside.
  static SensingOperator mri(EncoderParams params);
  /// SPC operator for (height, width) images; weights hold m rows of height*width.
  static SensingOperator spc(EncoderParams params, int height, int width);
  /// SD-CASSI operator for an L-band cube.
  static SensingOperator cassi(EncoderParams params, int bands);

  Modality modality() const { return params_.modality; }
  const EncoderParams& params() const { return params_; }
  /// Binarized encoder values Phi = binarize(W).
  const Image& phi() const { return phi_; }
  /// Replaces W (same shape) and refreshes Phi.
  void set_weights(Image w);

  int scene_channels() const;
  int scene_height() const { return height_; }
  int scene_width() const { return width_; }
  int snapshots() const;
  int bands() const { return bands_; }
  /// Length of Measurement::values.
  std::size_t measurement_length() const;
  /// Number of acquired scalar samples: ||Phi||_0 for MRI, m for SPC, snapshots*N*(M+L-1) for CASSI.
  std::size_t acquired_samples() const;

  Measurement forward(const SceneTensor& x) const;
  SceneTensor adjoint(const Measurement& y) const;
  /// A^T A x, the decoder input in every pipeline.
  SceneTensor backproject(const SceneTensor& x) const;
  /// d<g, A^T A x>/dPhi for upstream gradient g = dL/d(backproject(x)); shape of phi().
  Image backproject_grad(const SceneTensor& x, const Image& grad_backprojection) const;

  void check_scene(const SceneTensor& x) const;

 private:
  EncoderParams params_;
  Image phi_;
  int height_ = 0;
  int width_ = 0;
  int bands_ = 1;
};

/// Acceleration-factor regularizer tau * (sum(Phi)/n - 1/AF)^4.
struct AfRegularizer {
  double value = 0.0;
  /// Gradient with respect to Phi (and, through the STE, W).
  Image grad;
};

AfRegularizer af_regularizer(const EncoderParams& params, double acceleration, double tau);

inline constexpr double kNoiseDisabled = std::numeric_limits<double>::infinity();

/// Adds white Gaussian noise on acquired entries so the expected SNR is snr_db.
/// snr_db = +inf leaves y unchanged. Throws NumericError for an all-zero signal.
Measurement add_awgn(const Measurement& y, double snr_db, std::uint64_t seed);

// Encoder factories. Initial weights are seeded and scaled by init_scale.

/// Gaussian variable-density sampling probabilities around DC (wrapped), clipped to
/// [0, 1] and scaled to average 1/AF. `width` is the std. dev. as a fraction of the grid.
std::vector<double> mri_sampling_density(int n, int m, double acceleration, double width);

/// Mask W = s * (p_k - u), u ~ U(0,1), so entry k is acquired with probability p_k and
/// the expected transmittance is 1/AF. density_width <= 0 uses the uniform p_k = 1/AF.
SensingOperator make_mri_operator(int n, int m, double acceleration, std::uint64_t seed, double init_scale,
                                  double density_width = 0.0);
/// Rows W = s * N(0, 1); `rows` is the number of measurements.
SensingOperator make_spc_operator(int height, int width, int rows, BinarizeMode mode, std::uint64_t seed,
                                  double init_scale);
/// Coded apertures W = s * (u - 1/2) for heaviside, W = s * u for real mode.
SensingOperator make_cassi_operator(int n, int m, int bands, int snapshots, BinarizeMode mode,
                                    std::uint64_t seed, double init_scale);

/// Number of SPC rows for compression ratio gamma over n pixels (at least 1).
int spc_rows_for_ratio(double gamma, int pixels);

}  // namespace kdci
