#include "kdci/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>

#include "kdci/analysis.hpp"

#ifndef KDCI_VERSION
#define KDCI_VERSION "unknown"
#endif

namespace kdci {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view code_version() { return KDCI_VERSION; }

namespace {

constexpr std::uint64_t kEncoderTag = 0xe1c;
constexpr std::uint64_t kDecoderTag = 0xdec;
constexpr std::uint64_t kPlanTag = 0x91a;
constexpr std::uint64_t kPatternTag = 0xb10e;
constexpr std::uint64_t kNoiseTag = 0x9015e;

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Short form for system names.
std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void log_line(const std::string& s) { std::clog << "[kdci] " << s << std::endl; }

std::ofstream open_out(const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, std::numeric_limits<double>::quiet_NaN()};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

bool pattern_fits(const std::string& pattern, Modality m) {
  if (pattern == "from-file") return true;
  if (pattern == "spiral" || pattern == "radial") return m == Modality::mri;
  if (pattern == "hadamard") return m == Modality::spc;
  if (pattern == "blue-noise") return m == Modality::cassi;
  return false;
}

std::string encoder_summary(const EncoderSpec& s) {
  switch (s.modality) {
    case Modality::mri: return "AF=" + fixed2(s.acceleration);
    case Modality::spc: return "gamma=" + fixed4(s.gamma) + ", " + std::string(to_string(s.mode));
    case Modality::cassi: return "snapshots=" + std::to_string(s.snapshots) + ", " + std::string(to_string(s.mode));
  }
  return "";
}

// Weights whose binarization reproduces a 0/1 or +-1 pattern.
Image weights_for(const Image& pattern) {
  Image w = pattern;
  for (double& v : w.values()) v = v > 0.0 ? 1.0 : -1.0;
  return w;
}

}  // namespace

// --- Config -----------------------------------------------------------------

void to_json(json& j, const FixedPatternSpec& p) {
  j = {{"pattern", p.pattern}};
  if (!p.file.empty()) j["file"] = p.file.string();
  if (p.pattern == "blue-noise") {
    j["density"] = p.density;
    j["sigma"] = p.sigma;
  }
}

void from_json(const json& j, FixedPatternSpec& p) {
  FixedPatternSpec d;
  p.pattern = j.at("pattern").get<std::string>();
  p.file = j.value("file", std::string());
  p.density = j.value("density", d.density);
  p.sigma = j.value("sigma", d.sigma);
}

void to_json(json& j, const ExperimentConfig& c) {
  json patterns = json::array();
  for (const auto& p : c.comparisons.fixed_patterns) patterns.push_back(p);
  j = {{"schema_version", c.schema_version},
       {"name", c.name},
       {"modality", std::string(to_string(c.modality))},
       {"dataset", c.dataset},
       {"decoder", c.decoder},
       {"student", c.student},
       {"relaxation", c.relaxation},
       {"plan", c.plan},
       {"comparisons",
        {{"baseline_e2e", c.comparisons.baseline_e2e},
         {"teacher", c.comparisons.teacher},
         {"fixed_patterns", patterns}}},
       {"noise_snr_db", c.noise_snr_db},
       {"teacher_grid", c.teacher_grid},
       {"lambda_grid", {{"lambda1", c.lambda_grid.lambda1}, {"lambda2", c.lambda_grid.lambda2}}},
       {"seeds", c.seeds},
       {"eval_split", c.eval_split},
       {"gram_window", c.gram_window},
       {"output_dir", c.output_dir.string()}};
}

void from_json(const json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  c.schema_version = j.value("schema_version", 0);
  if (c.schema_version != kConfigSchemaVersion)
    throw ConfigError("unsupported config schema_version " + std::to_string(c.schema_version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  c.name = j.value("name", d.name);
  c.modality = parse_modality(j.at("modality").get<std::string>());
  const std::string mod(to_string(c.modality));

  json ds = j.value("dataset", json::object());
  ds["modality"] = mod;
  c.dataset = ds.get<DatasetSpec>();

  json st = j.value("student", json::object());
  st["modality"] = mod;
  if (!st.contains("height")) st["height"] = c.dataset.height;
  if (!st.contains("width")) st["width"] = c.dataset.width;
  if (!st.contains("bands")) st["bands"] = c.dataset.bands;
  c.student = st.get<EncoderSpec>();

  c.decoder = j.contains("decoder") ? j.at("decoder").get<DecoderConfig>() : d.decoder;
  c.relaxation = j.contains("relaxation") ? j.at("relaxation").get<RelaxationSpec>() : d.relaxation;
  if (j.contains("plan")) {
    // Unspecified plan fields fall back to the modality preset.
    json plan = preset_plan(c.modality, c.student.acceleration);
    plan.merge_patch(j.at("plan"));
    c.plan = plan.get<DistillPlan>();
  } else {
    c.plan = preset_plan(c.modality, c.student.acceleration);
  }

  const json cmp = j.value("comparisons", json::object());
  c.comparisons.baseline_e2e = cmp.value("baseline_e2e", true);
  c.comparisons.teacher = cmp.value("teacher", true);
  c.comparisons.fixed_patterns.clear();
  for (const auto& p : cmp.value("fixed_patterns", json::array()))
    c.comparisons.fixed_patterns.push_back(p.get<FixedPatternSpec>());

  c.noise_snr_db = j.value("noise_snr_db", d.noise_snr_db);
  c.teacher_grid = j.value("teacher_grid", d.teacher_grid);
  const json lg = j.value("lambda_grid", json::object());
  c.lambda_grid.lambda1 = lg.value("lambda1", d.lambda_grid.lambda1);
  c.lambda_grid.lambda2 = lg.value("lambda2", d.lambda_grid.lambda2);
  c.seeds = j.value("seeds", d.seeds);
  c.eval_split = j.value("eval_split", d.eval_split);
  c.gram_window = j.value("gram_window", d.gram_window);
  c.output_dir = j.value("output_dir", d.output_dir.string());
}

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) throw ConfigError("unsupported config schema_version");
  if (seeds.empty()) throw ConfigError("config needs at least one seed");
  if (dataset.modality != modality || student.modality != modality)
    throw ConfigError("dataset, student and experiment modalities differ");
  if (student.height != dataset.height || student.width != dataset.width)
    throw ConfigError("student encoder dims differ from the dataset dims");
  if (modality == Modality::cassi && student.bands != dataset.bands)
    throw ConfigError("student band count differs from the dataset");
  if (eval_split != "test" && eval_split != "val") throw ConfigError("eval_split must be 'test' or 'val'");
  if (gram_window < 1) throw ConfigError("gram_window must be positive");
  student.validate();
  decoder.validate();
  plan.validate();
  for (const auto& p : comparisons.fixed_patterns) {
    if (!pattern_fits(p.pattern, modality))
      throw ConfigError("pattern '" + p.pattern + "' is not available for " + std::string(to_string(modality)));
    if (p.pattern == "from-file" && p.file.empty()) throw ConfigError("from-file pattern needs a file");
  }
  for (double snr : noise_snr_db)
    if (!std::isfinite(snr)) throw ConfigError("noise sweep SNR values must be finite");
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

void save_config(const ExperimentConfig& c, const fs::path& path) {
  auto f = open_out(path);
  f << json(c).dump(2) << "\n";
}

std::string config_hash(const ExperimentConfig& c) {
  json j = c;
  j.erase("name");
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

// --- Fixed patterns ---------------------------------------------------------

SensingOperator fixed_pattern_operator(const EncoderSpec& student, const FixedPatternSpec& p, std::uint64_t seed,
                                       json* params) {
  if (!pattern_fits(p.pattern, student.modality))
    throw ConfigError("pattern '" + p.pattern + "' is not available for " +
                      std::string(to_string(student.modality)));
  SensingOperator op = student.build_operator();
  const Image& shape = op.params().weights;
  Pattern pat;
  if (p.pattern == "radial") {
    pat = golden_angle_radial(student.height, student.width, student.acceleration);
  } else if (p.pattern == "spiral") {
    pat = archimedean_spiral(student.height, student.width, student.acceleration);
  } else if (p.pattern == "hadamard") {
    if (student.mode != BinarizeMode::sign) throw ConfigError("Hadamard rows need a sign-mode SPC encoder");
    pat = hadamard_rows(student.height, student.width, student.gamma);
  } else if (p.pattern == "blue-noise") {
    pat = void_and_cluster(student.height, student.width, student.snapshots, p.density, derive_seed(seed, kPatternTag),
                           p.sigma);
  } else {
    pat = pattern_from_file(p.file, student.modality, shape.channels(), shape.height(), shape.width());
  }
  if (!pat.values.same_shape(shape))
    throw ShapeError("pattern shape " + pat.values.shape_string() + " does not match encoder " + shape.shape_string());
  op.set_weights(weights_for(pat.values));
  if (params) *params = pat.params;
  return op;
}

// --- Results ----------------------------------------------------------------

const ResultRow* ResultsTable::find(const std::string& system) const {
  for (const auto& r : rows)
    if (r.system == system) return &r;
  return nullptr;
}

void write_results_csv(const ResultsTable& t, const fs::path& path) {
  auto f = open_out(path);
  f << "system,summary,seeds,psnr_mean,psnr_std,ssim_mean,ssim_std,sam_mean,sam_std,best,split,config_hash,"
       "code_version,checkpoints\n";
  for (const auto& r : t.rows) {
    std::string cps;
    for (const auto& c : r.checkpoints) cps += (cps.empty() ? "" : ";") + c.filename().string();
    f << r.system << ",\"" << r.summary << "\"," << r.seeds << "," << num(r.psnr_mean) << ","
      << (r.seeds < 2 ? "single-seed" : num(r.psnr_std)) << "," << num(r.ssim_mean) << ","
      << (r.seeds < 2 ? "single-seed" : num(r.ssim_std)) << "," << (r.sam_mean ? num(*r.sam_mean) : "") << ","
      << (r.sam_std ? (r.seeds < 2 ? "single-seed" : num(*r.sam_std)) : "") << "," << (r.best ? 1 : 0) << ","
      << t.split << "," << t.config_hash << "," << t.code_version << "," << cps << "\n";
  }
}

void write_results_markdown(const ResultsTable& t, const fs::path& path) {
  auto f = open_out(path);
  const bool has_sam = std::any_of(t.rows.begin(), t.rows.end(), [](const auto& r) { return r.sam_mean.has_value(); });
  f << "| System | Configuration | Seeds | PSNR (dB) | SSIM |" << (has_sam ? " SAM |" : "") << "\n";
  f << "|---|---|---|---|---|" << (has_sam ? "---|" : "") << "\n";
  auto pm = [](double m, double s, bool single, int digits) {
    std::string out = digits == 2 ? fixed2(m) : fixed4(m);
    out += single ? " (single-seed)" : " ± " + (digits == 2 ? fixed2(s) : fixed4(s));
    return out;
  };
  for (const auto& r : t.rows) {
    const bool single = r.seeds < 2;
    std::string psnr = pm(r.psnr_mean, r.psnr_std, single, 2), ssim = pm(r.ssim_mean, r.ssim_std, single, 4);
    if (r.best) {
      psnr = "**" + psnr + "**";
      ssim = "**" + ssim + "**";
    }
    f << "| " << r.system << " | " << r.summary << " | " << r.seeds << " | " << psnr << " | " << ssim << " |";
    if (has_sam) f << " " << (r.sam_mean ? pm(*r.sam_mean, r.sam_std.value_or(0.0), single, 4) : "-") << " |";
    f << "\n";
  }
  f << "\nSplit: " << t.split << ". Config hash: `" << t.config_hash << "`. Code version: " << t.code_version
    << ".\n";
}

// --- Experiment -------------------------------------------------------------

Experiment::Experiment(ExperimentConfig config) : cfg_(std::move(config)) {
  cfg_.validate();
  hash_ = config_hash(cfg_);
}

const Dataset& Experiment::data() {
  if (!data_) data_ = cached_dataset(cfg_.dataset, cfg_.output_dir / "cache");
  return *data_;
}

const std::vector<SceneTensor>& Experiment::eval_scenes() {
  const Dataset& d = data();
  const auto& split = cfg_.eval_split == "val" ? d.val : d.test;
  if (split.empty()) throw ConfigError("evaluation split '" + cfg_.eval_split + "' is empty");
  return split;
}

EncoderSpec Experiment::student_spec(std::uint64_t seed) const {
  EncoderSpec s = cfg_.student;
  s.seed = derive_seed(seed, kEncoderTag);
  return s;
}

DecoderConfig Experiment::decoder_config(std::uint64_t seed) const {
  DecoderConfig d = cfg_.decoder;
  d.seed = derive_seed(seed, kDecoderTag);
  return d;
}

DistillPlan Experiment::plan(std::uint64_t seed) const {
  DistillPlan p = cfg_.plan;
  p.seed = derive_seed(seed, kPlanTag);
  return p;
}

json Experiment::common_inputs(std::uint64_t seed) const {
  return {{"dataset", cfg_.dataset}, {"decoder", decoder_config(seed)}, {"plan", plan(seed)}, {"seed", seed}};
}

std::string Experiment::stage_key(const json& inputs) const { return sha256_hex(inputs.dump()).substr(0, 16); }

std::vector<std::string> Experiment::systems() const {
  std::vector<std::string> out;
  if (cfg_.comparisons.teacher) out.push_back("teacher");
  if (cfg_.comparisons.baseline_e2e) out.push_back("baseline");
  out.push_back("student");
  for (const auto& p : cfg_.comparisons.fixed_patterns) out.push_back(p.system_name());
  return out;
}

namespace {

// Inputs that determine a stage's checkpoint. E2E stages ignore the KD weights.
json e2e_inputs(json common, const EncoderSpec& spec, const std::string& kind) {
  common["plan"].erase("lambda1");
  common["plan"].erase("lambda2");
  common["encoder"] = spec;
  common["stage"] = kind;
  return common;
}

}  // namespace

fs::path Experiment::checkpoint_path(const std::string& system, std::uint64_t seed) const {
  json inputs;
  const EncoderSpec student = student_spec(seed);
  auto teacher_inputs = [&](const RelaxationSpec& r) {
    return e2e_inputs(common_inputs(seed), relax(student, r), "teacher");
  };
  if (system == "teacher") {
    inputs = teacher_inputs(cfg_.relaxation);
  } else if (system == "baseline") {
    inputs = e2e_inputs(common_inputs(seed), student, "baseline");
  } else if (system == "student") {
    inputs = common_inputs(seed);
    inputs["encoder"] = student;
    inputs["teacher"] = stage_key(teacher_inputs(cfg_.relaxation));
    inputs["stage"] = "student";
  } else if (system.rfind("fixed-", 0) == 0) {
    const auto it = std::find_if(cfg_.comparisons.fixed_patterns.begin(), cfg_.comparisons.fixed_patterns.end(),
                                 [&](const auto& p) { return p.system_name() == system; });
    if (it == cfg_.comparisons.fixed_patterns.end()) throw ConfigError("unknown system '" + system + "'");
    inputs = e2e_inputs(common_inputs(seed), student, "fixed");
    inputs["pattern"] = *it;
  } else {
    throw ConfigError("unknown system '" + system + "'");
  }
  return cfg_.output_dir / "checkpoints" / (system + "_s" + std::to_string(seed) + "_" + stage_key(inputs) + ".json");
}

SystemRecord Experiment::load_or_train(const std::string& system, std::uint64_t seed, const json& inputs,
                                       const std::function<TrainedSystem()>& train) {
  const fs::path path =
      cfg_.output_dir / "checkpoints" / (system + "_s" + std::to_string(seed) + "_" + stage_key(inputs) + ".json");
  if (fs::exists(path)) {
    // Validates the file; a corrupt checkpoint surfaces as IoError naming it.
    load_system(path);
    log_line("reusing " + path.filename().string());
    return {system, seed, path, false};
  }
  log_line("training " + system + " seed " + std::to_string(seed));
  TrainedSystem s = train();
  s.notes["system"] = system;
  s.notes["seed"] = seed;
  s.notes["inputs_key"] = stage_key(inputs);
  save_system(s, path);
  return {system, seed, path, true};
}

namespace {

TrainOptions logged(Role role, const std::string& system, std::uint64_t seed, bool freeze = false) {
  TrainOptions o;
  o.role = role;
  o.freeze_encoder = freeze;
  o.on_epoch = [system, seed](const EpochRecord& r) {
    log_line(system + " s" + std::to_string(seed) + " epoch " + std::to_string(r.epoch) + " loss " + num(r.total) +
             " val_psnr " + fixed2(r.val_psnr) + " T " + fixed4(r.transmittance));
  };
  return o;
}

}  // namespace

SystemRecord Experiment::teacher_for(std::uint64_t seed, const RelaxationSpec& relax_spec, const std::string& system) {
  const EncoderSpec ts = relax(student_spec(seed), relax_spec);
  const DecoderConfig dc = decoder_for(ts, decoder_config(seed));
  const json inputs = e2e_inputs(common_inputs(seed), ts, "teacher");
  return load_or_train(system, seed, inputs, [&] {
    const Dataset& d = data();
    return train_e2e(ts.build_operator(), DecoderNet(dc, ts.height, ts.width), ts, d, plan(seed),
                     logged(Role::teacher, system, seed));
  });
}

SystemRecord Experiment::student_for(std::uint64_t seed, const SystemRecord& teacher, const std::string& system,
                                     const DistillPlan* plan_override) {
  const EncoderSpec ss = student_spec(seed);
  const DecoderConfig dc = decoder_for(ss, decoder_config(seed));
  const DistillPlan sp = plan_override ? *plan_override : plan(seed);
  json inputs = common_inputs(seed);
  inputs["plan"] = sp;
  inputs["encoder"] = ss;
  inputs["teacher"] = teacher.checkpoint.stem().string().substr(teacher.checkpoint.stem().string().rfind('_') + 1);
  inputs["stage"] = "student";
  return load_or_train(system, seed, inputs, [&] {
    const TrainedSystem t = load_system(teacher.checkpoint);
    const Dataset& d = data();
    return distill_student(ss.build_operator(), DecoderNet(dc, ss.height, ss.width), ss, t, d, sp,
                           logged(Role::student, system, seed));
  });
}

SystemRecord Experiment::train_teacher(std::uint64_t seed) { return teacher_for(seed, cfg_.relaxation, "teacher"); }

SystemRecord Experiment::train_baseline(std::uint64_t seed) {
  const EncoderSpec ss = student_spec(seed);
  const DecoderConfig dc = decoder_for(ss, decoder_config(seed));
  return load_or_train("baseline", seed, e2e_inputs(common_inputs(seed), ss, "baseline"), [&] {
    const Dataset& d = data();
    return train_e2e(ss.build_operator(), DecoderNet(dc, ss.height, ss.width), ss, d, plan(seed),
                     logged(Role::baseline, "baseline", seed));
  });
}

SystemRecord Experiment::distill(std::uint64_t seed, bool require_teacher) {
  if (require_teacher) {
    const fs::path tp = checkpoint_path("teacher", seed);
    if (!fs::exists(tp))
      throw ConfigError("teacher checkpoint " + tp.string() + " does not exist; run train-teacher first");
  }
  return student_for(seed, train_teacher(seed), "student");
}

SystemRecord Experiment::eval_fixed(const FixedPatternSpec& p, std::uint64_t seed) {
  const EncoderSpec ss = student_spec(seed);
  const DecoderConfig dc = decoder_for(ss, decoder_config(seed));
  json inputs = e2e_inputs(common_inputs(seed), ss, "fixed");
  inputs["pattern"] = p;
  const std::string system = p.system_name();
  return load_or_train(system, seed, inputs, [&] {
    json params;
    SensingOperator op = fixed_pattern_operator(ss, p, seed, &params);
    const Dataset& d = data();
    TrainedSystem s = train_e2e(std::move(op), DecoderNet(dc, ss.height, ss.width), ss, d, plan(seed),
                                logged(Role::fixed, system, seed, true));
    s.notes["pattern"] = params;
    return s;
  });
}

std::vector<AblationRun> Experiment::ablate(std::uint64_t seed) {
  const SystemRecord t = train_teacher(seed);
  const TrainedSystem teacher = load_system(t.checkpoint);
  log_line("ablation seed " + std::to_string(seed));
  auto runs = kdci::ablate(student_spec(seed), decoder_config(seed), teacher, data(), plan(seed));
  auto f = open_out(cfg_.output_dir / ("ablation_s" + std::to_string(seed) + ".csv"));
  f << "enc,dec,w_task,w_dec,w_enc,psnr,ssim\n";
  for (const auto& r : runs) {
    const Evaluation ev = evaluate(r.system, eval_scenes());
    f << (r.enc_on ? 1 : 0) << "," << (r.dec_on ? 1 : 0) << "," << num(r.weights.task) << "," << num(r.weights.dec)
      << "," << num(r.weights.enc) << "," << num(ev.psnr_mean) << "," << num(ev.ssim_mean) << "\n";
  }
  return runs;
}

std::vector<SystemRecord> Experiment::run() {
  std::vector<SystemRecord> out;
  for (std::uint64_t seed : cfg_.seeds) {
    const SystemRecord t = train_teacher(seed);
    out.push_back(t);
    if (cfg_.comparisons.baseline_e2e) out.push_back(train_baseline(seed));
    out.push_back(student_for(seed, t, "student"));
    for (const auto& p : cfg_.comparisons.fixed_patterns) out.push_back(eval_fixed(p, seed));
  }
  report();
  if (!cfg_.noise_snr_db.empty()) noise_sweep();
  return out;
}

ResultsTable Experiment::report() {
  const fs::path out = cfg_.output_dir;
  const fs::path plots = out / "reports" / "plots";
  fs::create_directories(plots);
  save_config(cfg_, out / "config.json");
  {
    auto f = open_out(out / "config_hash.txt");
    f << hash_ << "\n";
  }

  auto metrics = open_out(out / "metrics.csv");
  metrics << "system,seed,row,epoch,task,dec,enc,reg,total,tau,val_psnr,val_ssim,transmittance,psnr,ssim,sam\n";

  ResultsTable table;
  table.config_hash = hash_;
  table.code_version = std::string(code_version());
  table.split = cfg_.eval_split;
  const auto& scenes = eval_scenes();

  for (const std::string& system : systems()) {
    ResultRow row;
    row.system = system;
    std::vector<double> psnrs, ssims, sams;
    for (std::uint64_t seed : cfg_.seeds) {
      const fs::path cp = checkpoint_path(system, seed);
      if (!fs::exists(cp)) throw IoError("missing checkpoint " + cp.string() + " for " + system);
      const TrainedSystem s = load_system(cp);
      row.checkpoints.push_back(cp);
      if (row.summary.empty()) {
        row.summary = encoder_summary(s.encoder);
        if (s.notes.contains("pattern")) row.summary += ", " + s.notes["pattern"].value("generator", "");
      }
      const std::string sd = std::to_string(seed);
      for (const auto& r : s.history)
        metrics << system << "," << sd << ",epoch," << r.epoch << "," << num(r.task) << "," << num(r.dec) << ","
                << num(r.enc) << "," << num(r.reg) << "," << num(r.total) << "," << num(r.tau) << ","
                << num(r.val_psnr) << "," << num(r.val_ssim) << "," << num(r.transmittance) << ",,,\n";
      const Evaluation ev = evaluate(s, scenes);
      metrics << system << "," << sd << ",final," << s.history.size() << ",,,,,,,,,,"
              << num(ev.psnr_mean) << "," << num(ev.ssim_mean) << "," << (ev.sam_mean ? num(*ev.sam_mean) : "")
              << "\n";
      psnrs.push_back(ev.psnr_mean);
      ssims.push_back(ev.ssim_mean);
      if (ev.sam_mean) sams.push_back(*ev.sam_mean);

      // Encoder report and plots.
      const std::string prefix = system + "_s" + sd;
      const EncoderReport rep = analyze_encoder(s.op, cfg_.gram_window);
      json rj = report_to_json(rep);
      rj["system"] = system;
      rj["seed"] = seed;
      rj["checkpoint"] = cp.filename().string();
      rj["eval"] = {{"split", cfg_.eval_split}, {"psnr", ev.psnr_mean}, {"ssim", ev.ssim_mean}};
      if (ev.sam_mean) rj["eval"]["sam"] = *ev.sam_mean;
      if (s.notes.contains("pattern")) rj["pattern"] = s.notes["pattern"];
      auto rf = open_out(out / "reports" / (prefix + ".json"));
      rf << rj.dump(2) << "\n";
      write_report_plots(rep, plots, prefix);
      std::vector<double> curve;
      for (const auto& r : s.history) curve.push_back(r.val_psnr);
      write_line_plot(curve, plots / (prefix + "_val_psnr.png"));
      if (s.op.modality() == Modality::mri) {
        const Image& phi = s.op.phi();
        Eigen::MatrixXd mask(phi.height(), phi.width());
        for (int y = 0; y < phi.height(); ++y)
          for (int x = 0; x < phi.width(); ++x)
            mask((y + phi.height() / 2) % phi.height(), (x + phi.width() / 2) % phi.width()) = phi.at(0, y, x);
        write_heatmap(mask, plots / (prefix + "_mask.png"));
      }
    }
    row.seeds = static_cast<int>(psnrs.size());
    std::tie(row.psnr_mean, row.psnr_std) = mean_std(psnrs);
    std::tie(row.ssim_mean, row.ssim_std) = mean_std(ssims);
    if (!sams.empty()) {
      const auto [m, sd] = mean_std(sams);
      row.sam_mean = m;
      row.sam_std = sd;
    }
    table.rows.push_back(std::move(row));
  }

  // Best among the constrained systems; the teacher is a relaxed reference.
  ResultRow* best = nullptr;
  for (auto& r : table.rows)
    if (r.system != "teacher" && (!best || r.psnr_mean > best->psnr_mean)) best = &r;
  if (best) best->best = true;

  write_results_csv(table, out / "results.csv");
  write_results_markdown(table, out / "results.md");
  return table;
}

NoiseTable Experiment::noise_sweep() {
  if (cfg_.noise_snr_db.empty()) throw ConfigError("noise sweep needs noise_snr_db values");
  NoiseTable table;
  table.snr_db = cfg_.noise_snr_db;
  const auto& scenes = eval_scenes();
  auto f = open_out(cfg_.output_dir / "noise_sweep.csv");
  f << "system,seed,snr_db,psnr,ssim\n";
  for (const std::string& system : systems()) {
    NoiseRow row;
    row.system = system;
    row.psnr.assign(table.snr_db.size(), 0.0);
    row.ssim.assign(table.snr_db.size(), 0.0);
    for (std::uint64_t seed : cfg_.seeds) {
      const fs::path cp = checkpoint_path(system, seed);
      if (!fs::exists(cp)) throw IoError("missing checkpoint " + cp.string() + " for " + system);
      const TrainedSystem s = load_system(cp);
      // One noise seed per system and seed, shared across SNR levels.
      const std::uint64_t noise_seed = derive_seed(seed, kNoiseTag);
      for (std::size_t k = 0; k < table.snr_db.size(); ++k) {
        const Evaluation ev = evaluate(s, scenes, table.snr_db[k], noise_seed);
        f << system << "," << seed << "," << num(table.snr_db[k]) << "," << num(ev.psnr_mean) << ","
          << num(ev.ssim_mean) << "\n";
        row.psnr[k] += ev.psnr_mean / static_cast<double>(cfg_.seeds.size());
        row.ssim[k] += ev.ssim_mean / static_cast<double>(cfg_.seeds.size());
      }
      const Evaluation clean = evaluate(s, scenes);
      f << system << "," << seed << ",inf," << num(clean.psnr_mean) << "," << num(clean.ssim_mean) << "\n";
      row.clean_psnr += clean.psnr_mean / static_cast<double>(cfg_.seeds.size());
    }
    table.rows.push_back(std::move(row));
  }
  auto md = open_out(cfg_.output_dir / "noise_sweep.md");
  md << "| System |";
  for (double snr : table.snr_db) md << " " << fixed2(snr) << " dB |";
  md << " noiseless |\n|---|";
  for (std::size_t k = 0; k <= table.snr_db.size(); ++k) md << "---|";
  md << "\n";
  for (const auto& r : table.rows) {
    md << "| " << r.system << " |";
    for (double p : r.psnr) md << " " << fixed2(p) << " |";
    md << " " << fixed2(r.clean_psnr) << " |\n";
  }
  return table;
}

TeacherSweepTable Experiment::teacher_sweep() {
  if (cfg_.teacher_grid.empty()) throw ConfigError("teacher sweep needs teacher_grid values");
  TeacherSweepTable table;
  const auto& scenes = eval_scenes();
  for (double v : cfg_.teacher_grid) {
    RelaxationSpec r = cfg_.relaxation;
    switch (cfg_.modality) {
      case Modality::mri: r.teacher_acceleration = v; break;
      case Modality::spc: r.teacher_gamma = v; break;
      case Modality::cassi: r.teacher_snapshots = static_cast<int>(std::lround(v)); break;
    }
    try {
      relax(cfg_.student, r);
    } catch (const ConfigError& e) {
      log_line("skipping teacher cell " + num(v) + ": " + e.what());
      table.skipped.push_back(v);
      continue;
    }
    for (std::uint64_t seed : cfg_.seeds) {
      const std::string tag = "@" + label(v);
      const SystemRecord t = teacher_for(seed, r, "teacher" + tag);
      const SystemRecord s = student_for(seed, t, "student" + tag);
      TeacherCell cell;
      cell.value = v;
      cell.seed = seed;
      cell.teacher_psnr = evaluate(load_system(t.checkpoint), scenes).psnr_mean;
      cell.student_psnr = evaluate(load_system(s.checkpoint), scenes).psnr_mean;
      table.cells.push_back(cell);
    }
  }
  std::map<double, std::vector<double>> by_value;
  for (const auto& c : table.cells) by_value[c.value].push_back(c.student_psnr);
  double best_value = 0.0, best_mean = -std::numeric_limits<double>::infinity();
  for (const auto& [v, ps] : by_value) {
    const double m = mean_std(ps).first;
    if (m > best_mean) {
      best_mean = m;
      best_value = v;
    }
  }
  for (auto& c : table.cells) c.best = !by_value.empty() && c.value == best_value;

  auto f = open_out(cfg_.output_dir / "teacher_sweep.csv");
  f << "teacher_value,seed,teacher_psnr,student_psnr,best\n";
  for (const auto& c : table.cells)
    f << num(c.value) << "," << c.seed << "," << num(c.teacher_psnr) << "," << num(c.student_psnr) << ","
      << (c.best ? 1 : 0) << "\n";
  for (double v : table.skipped) f << num(v) << ",,,,skipped\n";
  return table;
}

LambdaSweepTable Experiment::lambda_sweep() {
  const auto& grid = cfg_.lambda_grid;
  if (grid.lambda1.empty() || grid.lambda2.empty()) throw ConfigError("lambda sweep needs lambda_grid values");
  LambdaSweepTable table;
  const auto& scenes = eval_scenes();
  for (double l1 : grid.lambda1)
    for (double l2 : grid.lambda2) {
      if (l1 <= 0.0 || l2 < 0.0 || l1 + l2 > 1.0 - 1e-9) {
        log_line("skipping lambda cell (" + num(l1) + ", " + num(l2) + "): needs lambda1 > 0 and lambda1 + lambda2 < 1");
        table.skipped.emplace_back(l1, l2);
        continue;
      }
      LambdaCell cell;
      cell.lambda1 = l1;
      cell.lambda2 = l2;
      for (std::uint64_t seed : cfg_.seeds) {
        DistillPlan p = plan(seed);
        p.lambda1 = l1;
        p.lambda2 = l2;
        const SystemRecord s = student_for(seed, train_teacher(seed), "student@l" + label(l1) + "-" + label(l2), &p);
        const Evaluation ev = evaluate(load_system(s.checkpoint), scenes);
        cell.psnr += ev.psnr_mean / static_cast<double>(cfg_.seeds.size());
        cell.ssim += ev.ssim_mean / static_cast<double>(cfg_.seeds.size());
      }
      table.cells.push_back(cell);
    }
  auto best = std::max_element(table.cells.begin(), table.cells.end(),
                               [](const LambdaCell& a, const LambdaCell& b) { return a.psnr < b.psnr; });
  if (best != table.cells.end()) best->best = true;

  auto f = open_out(cfg_.output_dir / "lambda_sweep.csv");
  f << "lambda1,lambda2,lambda3,psnr,ssim,best\n";
  for (const auto& c : table.cells)
    f << num(c.lambda1) << "," << num(c.lambda2) << "," << num(1.0 - c.lambda1 - c.lambda2) << "," << num(c.psnr)
      << "," << num(c.ssim) << "," << (c.best ? 1 : 0) << "\n";
  for (const auto& [l1, l2] : table.skipped) f << num(l1) << "," << num(l2) << ",,,,skipped\n";
  return table;
}

}  // namespace kdci
