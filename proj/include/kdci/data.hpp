#pragma once

// Desk-scale datasets: seeded synthetic scenes per modality and optional
// ingestion of small external image directories.

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "kdci/sensing.hpp"

namespace kdci {

struct DatasetSpec {
  Modality modality = Modality::spc;
  int train = 64;
  int val = 16;
  int test = 16;
  int height = 32;
  int width = 32;
  /// Spectral bands (CASSI only).
  int bands = 8;
  /// phantom (MRI), shapes (SPC), spectral-smooth (CASSI) or external-dir.
  std::string generator;
  std::string external_dir;
  std::uint64_t seed = 0;
  /// Largest allowed jump between adjacent bands of a normalized cube.
  double max_band_jump = 0.5;
  /// SPC only: std. dev. in pixels of a Gaussian applied to the drawn shapes; 0 keeps hard edges.
  double edge_blur = 0.0;

  /// Fills an empty generator with the modality default and checks counts/dims.
  void validate();
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Dataset {
  DatasetSpec spec;
  std::vector<SceneTensor> train;
  std::vector<SceneTensor> val;
  std::vector<SceneTensor> test;
};

/// Ellipse phantoms with random contrast and a smooth random phase, as (2, N, M).
Dataset synth_mri(DatasetSpec spec);
/// Random filled polygons and strokes, as (1, N, M).
Dataset synth_spc(DatasetSpec spec);
/// Shapes with smooth nonnegative spectra over L bands, as (L, N, M).
Dataset synth_cassi(DatasetSpec spec);
/// Reads raster images (multi-page TIFF for CASSI) sorted by filename.
Dataset ingest_external(const std::filesystem::path& dir, DatasetSpec spec);

/// Dispatches on spec.generator.
Dataset make_dataset(DatasetSpec spec);

std::string dataset_hash(const DatasetSpec& spec);
std::string sample_hash(const SceneTensor& x);

/// Versioned binary container; load verifies the magic, version and spec hash.
void save_dataset_cache(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset_cache(const std::filesystem::path& path, const DatasetSpec& expected);
/// Loads from `cache_dir` when a matching container exists, otherwise builds and stores it.
Dataset cached_dataset(DatasetSpec spec, const std::filesystem::path& cache_dir);

}  // namespace kdci
