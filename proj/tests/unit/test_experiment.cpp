#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kdci/experiment.hpp"

using namespace kdci;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("kdci_exp_" + name);
  fs::remove_all(d);
  return d;
}

// MRI phantoms need power-of-two dims of at least 16.
ExperimentConfig tiny(Modality m, const std::string& name) {
  const int side = m == Modality::mri ? 16 : 8;
  nlohmann::json j = {{"schema_version", 1},
                      {"name", name},
                      {"modality", std::string(to_string(m))},
                      {"dataset", {{"train", 8}, {"val", 4}, {"test", 4}, {"height", side}, {"width", side}, {"bands", 3}}},
                      {"decoder", {{"depth", 1}}},
                      {"plan", {{"epochs", 2}, {"batch", 4}, {"lr", 1e-3}}},
                      {"seeds", {0}},
                      {"output_dir", fresh_dir(name).string()}};
  if (m == Modality::spc) j["student"] = {{"gamma", 0.25}};
  return j.get<ExperimentConfig>();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int count_png(const fs::path& dir) {
  int n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ".png";
  return n;
}

}  // namespace

TEST(Config, JsonRoundTripKeepsHash) {
  ExperimentConfig c = tiny(Modality::cassi, "round_trip");
  c.comparisons.fixed_patterns.push_back({"blue-noise", {}, 0.4, 1.0});
  c.noise_snr_db = {20, 30};
  const ExperimentConfig back = nlohmann::json(c).get<ExperimentConfig>();
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.comparisons.fixed_patterns.at(0).density, 0.4);
  EXPECT_EQ(back.student.bands, 3);
  EXPECT_EQ(back.student.height, 8);
  EXPECT_EQ(back.student.modality, Modality::cassi);
}

TEST(Config, HashIgnoresNameAndOutputOnly) {
  const ExperimentConfig a = tiny(Modality::mri, "hash_a");
  ExperimentConfig b = a;
  b.name = "other";
  b.output_dir = "/elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.plan.epochs = 3;
  EXPECT_NE(config_hash(a), config_hash(b));
  ExperimentConfig c = a;
  c.dataset.seed = 7;
  EXPECT_NE(config_hash(a), config_hash(c));
}

TEST(Config, MissingPlanUsesModalityPreset) {
  nlohmann::json j = {{"schema_version", 1}, {"modality", "mri"}, {"student", {{"acceleration", 8}}}};
  const ExperimentConfig c = j.get<ExperimentConfig>();
  EXPECT_DOUBLE_EQ(c.plan.lambda1, 0.3);
  EXPECT_DOUBLE_EQ(c.plan.lambda2, 0.2);
  j["plan"] = {{"epochs", 5}};
  const ExperimentConfig d = j.get<ExperimentConfig>();
  EXPECT_EQ(d.plan.epochs, 5);
  EXPECT_DOUBLE_EQ(d.plan.lambda2, 0.2);
}

TEST(Config, RejectsBadInput) {
  nlohmann::json j = nlohmann::json(tiny(Modality::mri, "bad"));
  j["schema_version"] = 2;
  EXPECT_THROW(j.get<ExperimentConfig>(), ConfigError);

  ExperimentConfig c = tiny(Modality::mri, "bad");
  c.comparisons.fixed_patterns.push_back({"hadamard"});
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Modality::mri, "bad");
  c.seeds.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Modality::mri, "bad");
  c.eval_split = "train";
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Modality::mri, "bad");
  c.student.width = 32;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LoadNamesUnreadableFile) {
  try {
    load_config("/nonexistent/kdci.json");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/kdci.json"), std::string::npos);
  }
}

TEST(FixedPattern, OperatorReproducesPattern) {
  EncoderSpec spc;
  spc.modality = Modality::spc;
  spc.height = spc.width = 8;
  spc.gamma = 0.25;
  const SensingOperator op = fixed_pattern_operator(spc, {"hadamard"}, 0);
  EXPECT_EQ(op.phi().values(), hadamard_rows(8, 8, 0.25).values.values());

  EncoderSpec mri;
  mri.modality = Modality::mri;
  mri.mode = BinarizeMode::heaviside;
  mri.height = mri.width = 16;
  nlohmann::json params;
  const SensingOperator r = fixed_pattern_operator(mri, {"radial"}, 0, &params);
  EXPECT_EQ(r.phi().values(), golden_angle_radial(16, 16, 4.0).values.values());
  EXPECT_EQ(params.at("generator"), "golden-angle-radial");
  EXPECT_THROW(fixed_pattern_operator(mri, {"blue-noise"}, 0), ConfigError);
}

TEST(Experiment, SmokeRunWritesTableAndPlots) {
  ExperimentConfig c = tiny(Modality::mri, "smoke");
  c.comparisons.fixed_patterns = {{"radial"}, {"spiral"}};
  Experiment exp(c);
  const auto records = exp.run();
  EXPECT_EQ(records.size(), 5u);
  for (const auto& r : records) EXPECT_TRUE(r.trained);
  const fs::path out = c.output_dir;
  for (const char* f : {"results.csv", "results.md", "metrics.csv", "config.json", "config_hash.txt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_GE(count_png(out / "reports"), 4);
  const std::string md = slurp(out / "results.md");
  for (const auto& s : exp.systems()) EXPECT_NE(md.find("| " + s + " |"), std::string::npos) << s;
  EXPECT_NE(md.find("single-seed"), std::string::npos);
  EXPECT_NE(md.find(exp.hash()), std::string::npos);

  // A second run reuses every checkpoint.
  Experiment again(c);
  for (const auto& r : again.run()) EXPECT_FALSE(r.trained) << r.system;
}

TEST(Experiment, RerunInFreshDirectoryIsBitExact) {
  ExperimentConfig a = tiny(Modality::spc, "repro_a");
  a.comparisons.fixed_patterns = {{"hadamard"}};
  ExperimentConfig b = a;
  b.output_dir = fresh_dir("repro_b");
  Experiment(a).run();
  Experiment(b).run();
  for (const char* f : {"results.csv", "metrics.csv"})
    EXPECT_EQ(slurp(a.output_dir / f), slurp(b.output_dir / f)) << f;
}

TEST(Experiment, FixedPatternStaysFrozen) {
  ExperimentConfig c = tiny(Modality::cassi, "frozen_fixed");
  c.comparisons.fixed_patterns = {{"blue-noise"}};
  Experiment exp(c);
  const SystemRecord r = exp.eval_fixed(c.comparisons.fixed_patterns[0], 0);
  const TrainedSystem s = load_system(r.checkpoint);
  const SensingOperator expected = fixed_pattern_operator(exp.student_spec(0), c.comparisons.fixed_patterns[0], 0);
  EXPECT_EQ(encoder_checksum(s.op), encoder_checksum(expected));
  EXPECT_EQ(s.role, Role::fixed);
}

TEST(Experiment, DistillWithoutTeacherNamesCheckpoint) {
  Experiment exp(tiny(Modality::spc, "no_teacher"));
  try {
    exp.distill(0, true);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(exp.checkpoint_path("teacher", 0).string()), std::string::npos);
  }
}

TEST(Experiment, ReportWithoutCheckpointsFails) {
  Experiment exp(tiny(Modality::spc, "no_checkpoints"));
  EXPECT_THROW(exp.report(), IoError);
}

TEST(Experiment, CorruptCheckpointNamesPath) {
  ExperimentConfig c = tiny(Modality::spc, "corrupt");
  Experiment exp(c);
  const fs::path p = exp.checkpoint_path("teacher", 0);
  fs::create_directories(p.parent_path());
  std::ofstream(p) << "{\"kind\": \"trained_system\", truncated";
  try {
    exp.train_teacher(0);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
}

TEST(Experiment, CheckpointKeysTrackInputs) {
  const ExperimentConfig a = tiny(Modality::mri, "keys");
  ExperimentConfig b = a;
  b.plan.lambda1 = 0.2;
  const Experiment ea(a), eb(b);
  // KD weights do not affect end-to-end stages.
  EXPECT_EQ(ea.checkpoint_path("teacher", 0), eb.checkpoint_path("teacher", 0));
  EXPECT_EQ(ea.checkpoint_path("baseline", 0), eb.checkpoint_path("baseline", 0));
  EXPECT_NE(ea.checkpoint_path("student", 0), eb.checkpoint_path("student", 0));
  EXPECT_NE(ea.checkpoint_path("student", 0), ea.checkpoint_path("student", 1));
  EXPECT_THROW(ea.checkpoint_path("nobody", 0), ConfigError);
}

TEST(Experiment, StudentCheckpointMatchesPredictedPath) {
  Experiment exp(tiny(Modality::spc, "paths"));
  EXPECT_EQ(exp.distill(0).checkpoint, exp.checkpoint_path("student", 0));
  EXPECT_EQ(exp.train_baseline(0).checkpoint, exp.checkpoint_path("baseline", 0));
}

TEST(Experiment, NoiseSweepRowsAndSharedNoise) {
  ExperimentConfig c = tiny(Modality::spc, "noise");
  c.comparisons.baseline_e2e = false;
  c.noise_snr_db = {20, 40};
  Experiment exp(c);
  exp.run();
  const NoiseTable t = exp.noise_sweep();
  ASSERT_EQ(t.rows.size(), exp.systems().size());
  for (const auto& r : t.rows) EXPECT_EQ(r.psnr.size(), 2u);
  // Re-evaluation reuses the same noise realisation.
  const NoiseTable again = exp.noise_sweep();
  EXPECT_EQ(t.rows[0].psnr, again.rows[0].psnr);
  EXPECT_TRUE(fs::exists(c.output_dir / "noise_sweep.csv"));
  EXPECT_TRUE(fs::exists(c.output_dir / "noise_sweep.md"));
}

TEST(Experiment, TeacherSweepSkipsInvalidCells) {
  ExperimentConfig c = tiny(Modality::cassi, "tsweep");
  c.teacher_grid = {1, 2, 3};
  c.student.snapshots = 2;
  Experiment exp(c);
  const TeacherSweepTable t = exp.teacher_sweep();
  ASSERT_EQ(t.skipped.size(), 1u);
  EXPECT_EQ(t.skipped[0], 1.0);
  ASSERT_EQ(t.cells.size(), 2u);
  EXPECT_EQ(std::count_if(t.cells.begin(), t.cells.end(), [](const auto& cell) { return cell.best; }), 1);
  const std::string csv = slurp(c.output_dir / "teacher_sweep.csv");
  EXPECT_NE(csv.find("skipped"), std::string::npos);
}

TEST(Experiment, LambdaSweepSkipsOffSimplexCells) {
  ExperimentConfig c = tiny(Modality::spc, "lsweep");
  c.plan.epochs = 1;
  c.lambda_grid.lambda1 = {0.2, 0.5};
  c.lambda_grid.lambda2 = {0.3, 0.5};
  Experiment exp(c);
  const LambdaSweepTable t = exp.lambda_sweep();
  ASSERT_EQ(t.skipped.size(), 1u);
  EXPECT_EQ(t.skipped[0], std::make_pair(0.5, 0.5));
  ASSERT_EQ(t.cells.size(), 3u);
  EXPECT_EQ(std::count_if(t.cells.begin(), t.cells.end(), [](const auto& cell) { return cell.best; }), 1);
  // Distinct weights give distinct students.
  EXPECT_NE(t.cells[0].psnr, t.cells[1].psnr);
  const std::string csv = slurp(c.output_dir / "lambda_sweep.csv");
  EXPECT_NE(csv.find("skipped"), std::string::npos);
  // The default grid is the 8x8 grid restricted to the simplex.
  const ExperimentConfig d = nlohmann::json{{"schema_version", 1}, {"modality", "spc"}}.get<ExperimentConfig>();
  int valid = 0;
  for (double a : d.lambda_grid.lambda1)
    for (double b : d.lambda_grid.lambda2) valid += a + b < 1.0 - 1e-12;
  EXPECT_EQ(valid, 36);
}
