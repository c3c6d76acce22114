#pragma once

// Declarative experiments: configuration, checkpointed orchestration of the
// teacher, baseline, student and fixed-pattern runs, sweeps and result tables.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "kdci/distill.hpp"
#include "kdci/patterns.hpp"

namespace kdci {

inline constexpr int kConfigSchemaVersion = 1;

std::string_view code_version();

struct FixedPatternSpec {
  /// spiral, radial (MRI); hadamard (SPC); blue-noise (CASSI); from-file (any).
  std::string pattern;
  std::filesystem::path file;
  /// Blue-noise only.
  double density = 0.5;
  double sigma = 1.5;

  /// Short name used in table rows and checkpoint names.
  std::string system_name() const { return "fixed-" + pattern; }
};

void to_json(nlohmann::json& j, const FixedPatternSpec& p);
void from_json(const nlohmann::json& j, FixedPatternSpec& p);

struct ComparisonSet {
  bool baseline_e2e = true;
  bool teacher = true;
  std::vector<FixedPatternSpec> fixed_patterns;
};

/// KD weight grid; cells with lambda1 + lambda2 >= 1 are skipped.
struct LambdaGrid {
  std::vector<double> lambda1{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<double> lambda2{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string name = "experiment";
  Modality modality = Modality::spc;
  DatasetSpec dataset;
  DecoderConfig decoder;
  EncoderSpec student;
  RelaxationSpec relaxation;
  DistillPlan plan;
  ComparisonSet comparisons;
  /// SNR levels (dB) for the noise sweep.
  std::vector<double> noise_snr_db;
  /// Teacher cells for the teacher sweep: AF_t (MRI), gamma_t (SPC) or m_t (CASSI).
  std::vector<double> teacher_grid;
  LambdaGrid lambda_grid;
  std::vector<std::uint64_t> seeds{0};
  /// Split used for final evaluation: "test" or "val".
  std::string eval_split = "test";
  int gram_window = 256;
  std::filesystem::path output_dir = "runs/experiment";

  /// Throws ConfigError for inconsistent modalities or shapes, empty seeds,
  /// an unknown split or a pattern incompatible with the modality.
  void validate() const;
};

/// Fields missing from the JSON take their defaults; the top-level modality and
/// dims propagate into the dataset and student encoder.
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& c, const std::filesystem::path& path);

/// SHA-256 over every field that affects results (name and output_dir excluded).
std::string config_hash(const ExperimentConfig& c);

/// Builds the frozen encoder for a fixed pattern; `params` receives the generator record.
SensingOperator fixed_pattern_operator(const EncoderSpec& student, const FixedPatternSpec& p, std::uint64_t seed,
                                       nlohmann::json* params = nullptr);

struct SystemRecord {
  std::string system;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint;
  /// False when the checkpoint already existed and training was skipped.
  bool trained = false;
};

struct ResultRow {
  std::string system;
  std::string summary;
  int seeds = 0;
  double psnr_mean = 0.0;
  /// Sample standard deviation; NaN for a single seed.
  double psnr_std = 0.0;
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  std::optional<double> sam_mean;
  std::optional<double> sam_std;
  std::vector<std::filesystem::path> checkpoints;
  bool best = false;
};

struct ResultsTable {
  std::vector<ResultRow> rows;
  std::string config_hash;
  std::string code_version;
  std::string split;

  const ResultRow* find(const std::string& system) const;
};

struct NoiseRow {
  std::string system;
  /// Seed-averaged PSNR per configured SNR, then the noiseless value.
  std::vector<double> psnr;
  std::vector<double> ssim;
  double clean_psnr = 0.0;
};

struct NoiseTable {
  std::vector<double> snr_db;
  std::vector<NoiseRow> rows;
};

struct TeacherCell {
  double value = 0.0;
  std::uint64_t seed = 0;
  double teacher_psnr = 0.0;
  double student_psnr = 0.0;
  bool best = false;
};

struct TeacherSweepTable {
  std::vector<TeacherCell> cells;
  std::vector<double> skipped;
};

struct LambdaCell {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  /// Seed-averaged student PSNR on the evaluation split.
  double psnr = 0.0;
  double ssim = 0.0;
  bool best = false;
};

struct LambdaSweepTable {
  std::vector<LambdaCell> cells;
  std::vector<std::pair<double, double>> skipped;
};

class Experiment {
 public:
  explicit Experiment(ExperimentConfig config);

  const ExperimentConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const Dataset& data();
  const std::vector<SceneTensor>& eval_scenes();

  /// Per-seed specs with derived encoder, decoder and shuffling seeds.
  EncoderSpec student_spec(std::uint64_t seed) const;
  DecoderConfig decoder_config(std::uint64_t seed) const;
  DistillPlan plan(std::uint64_t seed) const;

  SystemRecord train_teacher(std::uint64_t seed);
  SystemRecord train_baseline(std::uint64_t seed);
  /// With `require_teacher` a missing teacher checkpoint is a ConfigError naming
  /// it; otherwise the teacher is trained first.
  SystemRecord distill(std::uint64_t seed, bool require_teacher = false);
  SystemRecord eval_fixed(const FixedPatternSpec& p, std::uint64_t seed);
  std::vector<AblationRun> ablate(std::uint64_t seed);

  /// Every configured stage for every seed, then report().
  std::vector<SystemRecord> run();
  /// Rebuilds metrics, reports, plots and the results table from checkpoints only.
  ResultsTable report();
  NoiseTable noise_sweep();
  TeacherSweepTable teacher_sweep();
  /// Distills one student per (lambda1, lambda2) cell from the configured teacher.
  LambdaSweepTable lambda_sweep();

  /// Systems reported for this config, in table order.
  std::vector<std::string> systems() const;
  std::filesystem::path checkpoint_path(const std::string& system, std::uint64_t seed) const;

 private:
  SystemRecord teacher_for(std::uint64_t seed, const RelaxationSpec& relax_spec, const std::string& system);
  SystemRecord student_for(std::uint64_t seed, const SystemRecord& teacher, const std::string& system,
                           const DistillPlan* plan_override = nullptr);
  std::string stage_key(const nlohmann::json& inputs) const;
  nlohmann::json common_inputs(std::uint64_t seed) const;
  SystemRecord load_or_train(const std::string& system, std::uint64_t seed, const nlohmann::json& inputs,
                             const std::function<TrainedSystem()>& train);

  ExperimentConfig cfg_;
  std::string hash_;
  std::optional<Dataset> data_;
};

void write_results_csv(const ResultsTable& t, const std::filesystem::path& path);
void write_results_markdown(const ResultsTable& t, const std::filesystem::path& path);

}  // namespace kdci
