#pragma once

// Encoder diagnostics and reconstruction quality metrics.

#include <Eigen/Dense>
#include <filesystem>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "kdci/sensing.hpp"

namespace kdci {

/// Explicit sensing matrix. Rows are measurement entries, columns scene entries in
/// (channel, y, x) order. MRI keeps only acquired k-space rows, each split into a
/// real and an imaginary row, acting on the stacked (re, im) scene.
Eigen::MatrixXd dense_matrix(const SensingOperator& op);

/// max_{i != j} |<a_i, a_j>| over columns. With `normalize` the columns are
/// scaled to unit norm first; a zero column is then a NumericError naming it.
double mutual_coherence(const Eigen::MatrixXd& a, bool normalize = true);

/// Coherence of an operator without materializing it when a closed form exists.
/// Zero columns (blocked pixels) are skipped.
double operator_coherence(const SensingOperator& op);

inline constexpr double kInfiniteCondition = std::numeric_limits<double>::infinity();

struct Spectrum {
  /// sigma_max / sigma_min, or kInfiniteCondition when sigma_min < 1e-12 sigma_max.
  double condition = 1.0;
  /// Descending.
  std::vector<double> singular_values;
  /// singular_values / sigma_max.
  std::vector<double> normalized;
};

Spectrum condition_and_spectrum(const Eigen::MatrixXd& a);
/// Singular spectrum of an operator; uses its block structure where available.
Spectrum operator_spectrum(const SensingOperator& op);

/// Top-left window x window block of A^T A.
Eigen::MatrixXd gram_section(const Eigen::MatrixXd& a, int window);
/// Same block computed through backprojections of unit vectors.
Eigen::MatrixXd operator_gram_section(const SensingOperator& op, int window);

struct BandCorrelation {
  Eigen::MatrixXd raw;
  Eigen::MatrixXd normalized;
  /// Mean of |normalized| over off-diagonal entries (0 for a single band).
  double average = 0.0;
};

/// G_ij = <A_i 1, A_j 1> summed over snapshots: the detector overlap of the
/// coded aperture seen by bands i and j.
BandCorrelation spectral_band_correlation(const SensingOperator& op);

/// Centered |DFT| (unnormalized) of one coded-aperture plane.
Eigen::MatrixXd ca_fft_magnitude(const Image& phi, int channel = 0);

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE), capped at kPsnrCap for a zero error.
double psnr(std::span<const double> x, std::span<const double> ref, double peak = 1.0);
double psnr(const Image& x, const Image& ref, double peak = 1.0);

struct SsimConstants {
  double k1 = 0.01;
  double k2 = 0.03;
  int window = 7;
  double data_range = 1.0;
};

/// Mean SSIM over all valid uniform windows of one plane.
double ssim_plane(const Image& x, const Image& ref, int channel, const SsimConstants& k = {});
/// Mean of ssim_plane over channels.
double ssim(const Image& x, const Image& ref, const SsimConstants& k = {});

/// Spectral angle at one pixel; NumericError if either spectrum is zero.
double sam(const Image& cube, const Image& ref, int y, int x);
/// Mean angle over pixels where both spectra are nonzero.
double sam_mean(const Image& cube, const Image& ref);

struct QualityMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> sam;
};

/// Modality-aware metrics: MRI on the magnitude image, SPC on the plane,
/// CASSI on the whole cube (SSIM averaged over bands, plus SAM).
QualityMetrics scene_quality(const SceneTensor& recon, const SceneTensor& ref, double peak = 1.0);

struct EncoderReport {
  Modality modality = Modality::spc;
  std::string mode;
  double mutual_coherence = 0.0;
  double condition_number = 1.0;
  std::vector<double> singular_values;
  Eigen::MatrixXd gram_section;
  std::optional<BandCorrelation> band_correlation;
  std::optional<Eigen::MatrixXd> fft_magnitude;
  double transmittance = 0.0;
};

EncoderReport analyze_encoder(const SensingOperator& op, int gram_window = 256);

nlohmann::json report_to_json(const EncoderReport& r);

/// Writes spectrum, Gram, band-correlation and FFT plots as PNG files; returns their paths.
std::vector<std::filesystem::path> write_report_plots(const EncoderReport& r, const std::filesystem::path& dir,
                                                      const std::string& prefix);

/// Line plot of a series scaled to its maximum.
void write_line_plot(const std::vector<double>& values, const std::filesystem::path& path);

/// Color-mapped PNG of a matrix, min-max scaled, nearest-neighbour upsampled to at least `min_side`.
void write_heatmap(const Eigen::MatrixXd& m, const std::filesystem::path& path, int min_side = 256);

}  // namespace kdci
