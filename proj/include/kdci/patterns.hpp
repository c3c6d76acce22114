#pragma once

// Parametric fixed encoders used as comparisons: radial and spiral k-space
// masks, Hadamard SPC rows and blue-noise coded apertures.

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "kdci/common.hpp"

namespace kdci {

struct Pattern {
  /// MRI: (1, N, M) 0/1 mask with DC at (0, 0). SPC: (1, m, n) in {-1, +1}.
  /// CASSI: (snapshots, N, M) in {0, 1}.
  Image values;
  /// Generator name and parameters, recorded in reports.
  nlohmann::json params;
};

/// Golden-angle spokes through the k-space center. Pixels are added center-out,
/// spoke by spoke, until exactly round(N*M/AF) are acquired.
Pattern golden_angle_radial(int n, int m, double acceleration);

/// Archimedean spiral r = a*theta from the center, rasterized center-out until
/// exactly round(N*M/AF) pixels are acquired.
Pattern archimedean_spiral(int n, int m, double acceleration);

/// spc_rows_for_ratio(gamma, n) rows of the 2-D Walsh-Hadamard basis H_height (x) H_width in
/// increasing total sequency. Both dims must be powers of two.
Pattern hadamard_rows(int height, int width, double gamma);

/// Void-and-cluster blue noise (toroidal Gaussian energy, sigma in pixels),
/// thresholded to `density`. One independent pattern per snapshot.
Pattern void_and_cluster(int n, int m, int snapshots, double density, std::uint64_t seed, double sigma = 1.5);

/// Reads a grayscale raster (>= 128 acquires / +1) of the given modality's encoder shape.
/// CASSI files hold the snapshots stacked vertically.
Pattern pattern_from_file(const std::filesystem::path& path, Modality modality, int channels, int rows, int cols);

}  // namespace kdci
