#include "kdci/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "kdci/optim.hpp"

namespace kdci {

namespace {

SensingOperator operator_from_weights(const EncoderSpec& spec, Image w) {
  EncoderParams p{spec.modality, spec.mode, std::move(w)};
  switch (spec.modality) {
    case Modality::mri: return SensingOperator::mri(std::move(p));
    case Modality::spc: return SensingOperator::spc(std::move(p), spec.height, spec.width);
    case Modality::cassi: return SensingOperator::cassi(std::move(p), spec.bands);
  }
  throw ConfigError("unknown modality");
}

}  // namespace

// --- EncoderSpec / RelaxationSpec -------------------------------------------

BinarizeMode EncoderSpec::default_mode(Modality m) {
  return m == Modality::spc ? BinarizeMode::sign : BinarizeMode::heaviside;
}

void EncoderSpec::validate() const {
  if (height < 1 || width < 1) throw ConfigError("encoder dims must be positive");
  if (!(init_scale > 0.0)) throw ConfigError("encoder init_scale must be positive");
  if (density_width < 0.0) throw ConfigError("density_width must be non-negative");
  switch (modality) {
    case Modality::mri:
      if (mode != BinarizeMode::heaviside) throw ConfigError("MRI masks use heaviside binarization");
      if (!(acceleration >= 1.0)) throw ConfigError("MRI acceleration factor must be >= 1");
      break;
    case Modality::spc:
      if (mode == BinarizeMode::heaviside) throw ConfigError("SPC apertures are sign or real");
      if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("SPC compression ratio must lie in (0, 1]");
      break;
    case Modality::cassi:
      if (mode == BinarizeMode::sign) throw ConfigError("CASSI apertures are heaviside or real");
      if (bands < 1 || snapshots < 1) throw ConfigError("CASSI needs bands >= 1 and snapshots >= 1");
      break;
  }
}

SensingOperator EncoderSpec::build_operator() const {
  validate();
  switch (modality) {
    case Modality::mri: return make_mri_operator(height, width, acceleration, seed, init_scale, density_width);
    case Modality::spc:
      return make_spc_operator(height, width, spc_rows_for_ratio(gamma, height * width), mode, seed, init_scale);
    case Modality::cassi: return make_cassi_operator(height, width, bands, snapshots, mode, seed, init_scale);
  }
  throw ConfigError("unknown modality");
}

void to_json(nlohmann::json& j, const EncoderSpec& s) {
  j = {{"modality", std::string(to_string(s.modality))},
       {"mode", std::string(to_string(s.mode))},
       {"height", s.height},
       {"width", s.width},
       {"bands", s.bands},
       {"acceleration", s.acceleration},
       {"gamma", s.gamma},
       {"snapshots", s.snapshots},
       {"init_scale", s.init_scale},
       {"density_width", s.density_width},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, EncoderSpec& s) {
  EncoderSpec d;
  s.modality = parse_modality(j.at("modality").get<std::string>());
  s.mode = j.contains("mode") ? parse_binarize_mode(j.at("mode").get<std::string>())
                              : EncoderSpec::default_mode(s.modality);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.bands = j.value("bands", d.bands);
  s.acceleration = j.value("acceleration", d.acceleration);
  s.gamma = j.value("gamma", d.gamma);
  s.snapshots = j.value("snapshots", d.snapshots);
  s.init_scale = j.value("init_scale", d.init_scale);
  s.density_width = j.value("density_width", d.density_width);
  s.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const RelaxationSpec& s) {
  j = nlohmann::json::object();
  if (s.teacher_acceleration) j["teacher_acceleration"] = *s.teacher_acceleration;
  if (s.teacher_gamma) j["teacher_gamma"] = *s.teacher_gamma;
  if (s.teacher_snapshots) j["teacher_snapshots"] = *s.teacher_snapshots;
  j["teacher_mode"] = std::string(to_string(s.teacher_mode));
  j["teacher_init_scale"] = s.teacher_init_scale;
}

void from_json(const nlohmann::json& j, RelaxationSpec& s) {
  s = RelaxationSpec{};
  if (j.contains("teacher_acceleration")) s.teacher_acceleration = j.at("teacher_acceleration").get<double>();
  if (j.contains("teacher_gamma")) s.teacher_gamma = j.at("teacher_gamma").get<double>();
  if (j.contains("teacher_snapshots")) s.teacher_snapshots = j.at("teacher_snapshots").get<int>();
  if (j.contains("teacher_mode")) s.teacher_mode = parse_binarize_mode(j.at("teacher_mode").get<std::string>());
  s.teacher_init_scale = j.value("teacher_init_scale", s.teacher_init_scale);
}

EncoderSpec relax(const EncoderSpec& student, const RelaxationSpec& spec) {
  student.validate();
  EncoderSpec t = student;
  t.seed = derive_seed(student.seed, 0x7eac);
  switch (student.modality) {
    case Modality::mri:
      t.acceleration = spec.teacher_acceleration.value_or(std::max(1.0, student.acceleration - 1.0));
      if (!(t.acceleration < student.acceleration))
        throw ConfigError("teacher acceleration " + std::to_string(t.acceleration) +
                          " must be below the student's " + std::to_string(student.acceleration));
      break;
    case Modality::spc:
      t.mode = spec.teacher_mode;
      t.gamma = spec.teacher_gamma.value_or(student.gamma);
      t.init_scale = spec.teacher_mode == BinarizeMode::real ? spec.teacher_init_scale : student.init_scale;
      if (t.gamma < student.gamma)
        throw ConfigError("teacher compression ratio " + std::to_string(t.gamma) + " is below the student's " +
                          std::to_string(student.gamma));
      break;
    case Modality::cassi:
      t.mode = spec.teacher_mode;
      t.snapshots = spec.teacher_snapshots.value_or(student.snapshots);
      t.init_scale = spec.teacher_mode == BinarizeMode::real ? spec.teacher_init_scale : student.init_scale;
      if (t.snapshots < student.snapshots)
        throw ConfigError("teacher snapshots " + std::to_string(t.snapshots) + " are fewer than the student's " +
                          std::to_string(student.snapshots));
      break;
  }
  t.validate();
  return t;
}

SensingOperator relax(const SensingOperator& student_op, const EncoderSpec& student, const RelaxationSpec& spec) {
  if (student_op.modality() != student.modality) throw ConfigError("student operator and spec disagree on modality");
  return relax(student, spec).build_operator();
}

// --- Plans ------------------------------------------------------------------

int TauSchedule::resolved_switch(int epochs) const {
  if (switch_epoch >= 0) return switch_epoch;
  return static_cast<int>(std::lround(0.4 * epochs));
}

double TauSchedule::at(int epoch, int epochs) const { return epoch < resolved_switch(epochs) ? phase1 : phase2; }

void DistillPlan::validate() const {
  if (!(lambda1 > 0.0)) throw ConfigError("lambda1 must be positive");
  if (lambda2 < 0.0) throw ConfigError("lambda2 must be non-negative");
  if (!(lambda1 + lambda2 < 1.0))
    throw ConfigError("lambda1 + lambda2 must be below 1 so that lambda3 > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (encoder_lr < 0.0) throw ConfigError("encoder learning rate must be non-negative");
  if (!(encoder_beta2 > 0.0 && encoder_beta2 < 1.0)) throw ConfigError("encoder beta2 must lie in (0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (tau.phase1 < 0.0 || tau.phase2 < 0.0) throw ConfigError("tau must be non-negative");
}

void to_json(nlohmann::json& j, const TauSchedule& t) {
  j = {{"phase1", t.phase1}, {"phase2", t.phase2}, {"switch_epoch", t.switch_epoch}};
}

void from_json(const nlohmann::json& j, TauSchedule& t) {
  TauSchedule d;
  t.phase1 = j.value("phase1", d.phase1);
  t.phase2 = j.value("phase2", d.phase2);
  t.switch_epoch = j.value("switch_epoch", d.switch_epoch);
}

void to_json(nlohmann::json& j, const DistillPlan& p) {
  j = {{"lambda1", p.lambda1}, {"lambda2", p.lambda2},         {"tau", p.tau},
       {"weight_decay", p.weight_decay}, {"epochs", p.epochs}, {"lr", p.lr},
       {"encoder_lr", p.encoder_lr}, {"encoder_beta2", p.encoder_beta2}, {"batch", p.batch},
       {"seed", p.seed}};
  if (std::isfinite(p.train_snr_db)) j["train_snr_db"] = p.train_snr_db;
}

void from_json(const nlohmann::json& j, DistillPlan& p) {
  DistillPlan d;
  p.lambda1 = j.value("lambda1", d.lambda1);
  p.lambda2 = j.value("lambda2", d.lambda2);
  p.tau = j.contains("tau") ? j.at("tau").get<TauSchedule>() : d.tau;
  p.weight_decay = j.value("weight_decay", d.weight_decay);
  p.epochs = j.value("epochs", d.epochs);
  p.lr = j.value("lr", d.lr);
  p.encoder_lr = j.value("encoder_lr", d.encoder_lr);
  p.encoder_beta2 = j.value("encoder_beta2", d.encoder_beta2);
  p.batch = j.value("batch", d.batch);
  p.seed = j.value("seed", d.seed);
  p.train_snr_db = j.value("train_snr_db", d.train_snr_db);
}

DistillPlan preset_plan(Modality m, double acceleration) {
  DistillPlan p;
  switch (m) {
    case Modality::mri:
      if (acceleration >= 16.0) {
        p.lambda1 = 0.3;
        p.lambda2 = 0.5;
      } else if (acceleration >= 8.0) {
        p.lambda1 = 0.3;
        p.lambda2 = 0.2;
      } else {
        p.lambda1 = 0.1;
        p.lambda2 = 0.3;
      }
      p.weight_decay = 1e-2;
      // A short second-moment horizon lets the mask settle after the tau switch
      // within desk-scale step counts.
      p.encoder_beta2 = 0.9;
      break;
    case Modality::spc:
      p.lambda1 = 0.1;
      p.lambda2 = 0.1;
      p.weight_decay = 0.0;
      break;
    case Modality::cassi:
      p.lambda1 = 0.1;
      p.lambda2 = 0.0;
      p.weight_decay = 1e-2;
      break;
  }
  return p;
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::teacher: return "teacher";
    case Role::student: return "student";
    case Role::baseline: return "baseline";
    case Role::fixed: return "fixed";
  }
  return "?";
}

Role parse_role(std::string_view s) {
  if (s == "teacher") return Role::teacher;
  if (s == "student") return Role::student;
  if (s == "baseline") return Role::baseline;
  if (s == "fixed") return Role::fixed;
  throw ConfigError("unknown role '" + std::string(s) + "'");
}

// --- Losses -----------------------------------------------------------------

double task_loss(std::span<const Image> recon, std::span<const Image> target) {
  if (recon.size() != target.size() || recon.empty()) throw ShapeError("task loss batch sizes differ or are empty");
  double acc = 0.0;
  for (std::size_t b = 0; b < recon.size(); ++b) {
    if (!recon[b].same_shape(target[b]))
      throw ShapeError("task loss shape " + recon[b].shape_string() + " vs " + target[b].shape_string());
    acc += (recon[b] - target[b]).squared_norm();
  }
  return acc / static_cast<double>(recon.size());
}

double decoder_kd_loss(std::span<const FeatureMap> student, std::span<const FeatureMap> teacher) {
  if (student.size() != teacher.size() || student.empty())
    throw ShapeError("bottleneck batch sizes differ or are empty");
  double acc = 0.0;
  for (std::size_t b = 0; b < student.size(); ++b) {
    if (!student[b].same_shape(teacher[b]))
      throw ShapeError("bottleneck shapes differ (" + student[b].shape_string() + " vs " + teacher[b].shape_string() +
                       "); teacher and student decoders must share a config");
    acc += (teacher[b] - student[b]).squared_norm();
  }
  return acc / static_cast<double>(student.size());
}

namespace {

void check_mri_pair(const SensingOperator& s, const SensingOperator& t) {
  if (s.modality() != Modality::mri || t.modality() != Modality::mri) throw ConfigError("MRI encoder loss needs MRI operators");
  if (!s.phi().same_shape(t.phi()))
    throw ShapeError("mask grids differ: " + s.phi().shape_string() + " vs " + t.phi().shape_string());
}

}  // namespace

EncoderLossGrad mri_encoder_loss_grad(const SensingOperator& student, const SensingOperator& teacher,
                                      std::span<const SceneTensor> batch) {
  check_mri_pair(student, teacher);
  if (batch.empty()) throw ShapeError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  EncoderLossGrad out;
  out.grad = Image(student.phi().channels(), student.phi().height(), student.phi().width());
  for (const auto& x : batch) {
    Image diff = student.backproject(x).data - teacher.backproject(x).data;
    out.value += diff.squared_norm() * inv_b;
    diff *= 2.0 * inv_b;
    out.grad += student.backproject_grad(x, diff);
  }
  return out;
}

double mri_encoder_loss(const SensingOperator& student, const SensingOperator& teacher,
                        std::span<const SceneTensor> batch) {
  check_mri_pair(student, teacher);
  if (batch.empty()) throw ShapeError("empty batch");
  double acc = 0.0;
  for (const auto& x : batch) acc += (student.backproject(x).data - teacher.backproject(x).data).squared_norm();
  return acc / static_cast<double>(batch.size());
}

namespace {

Eigen::Map<const RowMat> as_matrix(const Image& w) {
  return Eigen::Map<const RowMat>(w.data(), w.height(), w.width());
}

}  // namespace

EncoderLossGrad spc_encoder_loss_grad(const Image& w_student, const Image& a_teacher, int batch) {
  if (w_student.channels() != 1 || a_teacher.channels() != 1) throw ShapeError("SPC matrices must be (1, m, n)");
  if (w_student.width() != a_teacher.width())
    throw ShapeError("SPC column counts differ: " + std::to_string(w_student.width()) + " vs " +
                     std::to_string(a_teacher.width()));
  if (batch < 1) throw ConfigError("batch must be >= 1");
  const auto w = as_matrix(w_student);
  const auto a = as_matrix(a_teacher);
  // ||W^T W - A^T A||_F^2 = ||W W^T||^2 - 2 ||W A^T||^2 + ||A A^T||^2 without n x n Grams.
  const RowMat wwt = w * w.transpose();
  const RowMat wat = w * a.transpose();
  const RowMat aat = a * a.transpose();
  const double inv_b = 1.0 / batch;
  EncoderLossGrad out;
  out.value = std::max(0.0, wwt.squaredNorm() - 2.0 * wat.squaredNorm() + aat.squaredNorm()) * inv_b;
  // d/dW = 4 W (W^T W - A^T A) = 4 (W W^T W - (W A^T) A)
  const RowMat g = 4.0 * inv_b * (wwt * w - wat * a);
  out.grad = Image(1, w_student.height(), w_student.width());
  std::copy(g.data(), g.data() + g.size(), out.grad.data());
  return out;
}

double spc_encoder_loss(const Image& w_student, const Image& a_teacher, int batch) {
  return spc_encoder_loss_grad(w_student, a_teacher, batch).value;
}

EncoderLossGrad cassi_encoder_loss_grad(const Image& w_student, const Image& phi_teacher, int batch) {
  if (w_student.height() != phi_teacher.height() || w_student.width() != phi_teacher.width())
    throw ShapeError("coded aperture grids differ: " + w_student.shape_string() + " vs " + phi_teacher.shape_string());
  if (batch < 1) throw ConfigError("batch must be >= 1");
  const std::size_t plane = w_student.plane_size();
  const double inv_b = 1.0 / batch;
  EncoderLossGrad out;
  out.grad = Image(w_student.channels(), w_student.height(), w_student.width());
  for (std::size_t k = 0; k < plane; ++k) {
    double ws = 0.0, ts = 0.0;
    for (int s = 0; s < w_student.channels(); ++s) ws += w_student.plane(s)[k] * w_student.plane(s)[k];
    for (int s = 0; s < phi_teacher.channels(); ++s) ts += phi_teacher.plane(s)[k] * phi_teacher.plane(s)[k];
    const double d = ws - ts;
    out.value += d * d * inv_b;
    for (int s = 0; s < w_student.channels(); ++s) out.grad.plane(s)[k] = 4.0 * inv_b * d * w_student.plane(s)[k];
  }
  return out;
}

double cassi_encoder_loss(const Image& w_student, const Image& phi_teacher, int batch) {
  return cassi_encoder_loss_grad(w_student, phi_teacher, batch).value;
}

double kd_total_loss(const LossParts& parts, const DistillPlan& plan, double tau, bool explicit_weight_decay) {
  plan.validate();
  double total = plan.lambda1 * parts.task + plan.lambda2 * parts.dec + plan.lambda3() * parts.enc + tau * parts.reg;
  if (explicit_weight_decay) total += plan.weight_decay * parts.param_l2;
  return total;
}

// --- Inference --------------------------------------------------------------

SceneTensor decoder_input(const SensingOperator& op, const SceneTensor& x, double snr_db, std::uint64_t noise_seed) {
  if (std::isinf(snr_db) && snr_db > 0) return op.backproject(x);
  return op.adjoint(add_awgn(op.forward(x), snr_db, noise_seed));
}

DecoderConfig decoder_for(const EncoderSpec& spec, DecoderConfig base) {
  switch (spec.modality) {
    case Modality::mri:
      base.in_channels = 2;
      base.input_scale = 1.0;
      break;
    case Modality::spc:
      base.in_channels = 1;
      base.input_scale = 1.0 / spc_rows_for_ratio(spec.gamma, spec.height * spec.width);
      break;
    case Modality::cassi:
      base.in_channels = spec.bands;
      base.input_scale = 1.0 / (static_cast<double>(spec.bands) * spec.snapshots);
      break;
  }
  return base;
}

namespace {

std::vector<Image> decode_scenes(const DecoderNet& net, const std::vector<SceneTensor>& inputs) {
  std::vector<Image> in;
  in.reserve(inputs.size());
  for (const auto& z : inputs) in.push_back(z.data);
  return net.decode(in).reconstruction;
}

Evaluation evaluate_pair(const SensingOperator& op, const DecoderNet& net, std::span<const SceneTensor> scenes,
                         double snr_db, std::uint64_t noise_seed) {
  Evaluation ev;
  if (scenes.empty()) return ev;
  constexpr std::size_t kChunk = 16;
  double sam_acc = 0.0;
  for (std::size_t start = 0; start < scenes.size(); start += kChunk) {
    const std::size_t end = std::min(scenes.size(), start + kChunk);
    std::vector<SceneTensor> inputs;
    for (std::size_t i = start; i < end; ++i)
      inputs.push_back(decoder_input(op, scenes[i], snr_db, derive_seed(noise_seed, i)));
    const auto recon = decode_scenes(net, inputs);
    for (std::size_t i = start; i < end; ++i) {
      const QualityMetrics q = scene_quality({scenes[i].kind, recon[i - start]}, scenes[i]);
      ev.psnr_mean += q.psnr;
      ev.ssim_mean += q.ssim;
      if (q.sam) sam_acc += *q.sam;
      ev.per_sample.push_back(q);
    }
  }
  const double n = static_cast<double>(scenes.size());
  ev.psnr_mean /= n;
  ev.ssim_mean /= n;
  if (ev.per_sample.front().sam) ev.sam_mean = sam_acc / n;
  return ev;
}

}  // namespace

std::vector<SceneTensor> reconstruct(const TrainedSystem& system, std::span<const SceneTensor> scenes, double snr_db,
                                     std::uint64_t noise_seed) {
  std::vector<SceneTensor> inputs;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    inputs.push_back(decoder_input(system.op, scenes[i], snr_db, derive_seed(noise_seed, i)));
  const auto recon = decode_scenes(system.net, inputs);
  std::vector<SceneTensor> out;
  for (std::size_t i = 0; i < recon.size(); ++i) out.push_back({scenes[i].kind, recon[i]});
  return out;
}

Evaluation evaluate(const TrainedSystem& system, std::span<const SceneTensor> scenes, double snr_db,
                    std::uint64_t noise_seed) {
  return evaluate_pair(system.op, system.net, scenes, snr_db, noise_seed);
}

std::string encoder_checksum(const SensingOperator& op) {
  return sha256_hex(std::span<const double>(op.params().weights.values()));
}

std::string system_checksum(const TrainedSystem& s) {
  return sha256_hex(encoder_checksum(s.op) + parameter_checksum(s.net.parameters()));
}

// --- Training ---------------------------------------------------------------

namespace {

double transmittance(const SensingOperator& op) {
  double pass = 0.0;
  for (double v : op.phi().values()) pass += op.params().mode == BinarizeMode::sign ? (v > 0.0) : v;
  return pass / static_cast<double>(op.phi().size());
}

void check_compatible(const SensingOperator& op, const DecoderNet& net, const Dataset& data) {
  if (data.train.empty()) throw ConfigError("training split is empty");
  for (const auto* split : {&data.train, &data.val})
    for (const auto& x : *split) {
      if (x.kind != op.modality())
        throw ConfigError("dataset modality " + std::string(to_string(x.kind)) + " does not match operator " +
                          std::string(to_string(op.modality())));
      op.check_scene(x);
    }
  if (net.config().in_channels != op.scene_channels() || net.height() != op.scene_height() ||
      net.width() != op.scene_width())
    throw ConfigError("decoder input shape does not match the operator's scene shape");
}

struct Guidance {
  const TrainedSystem* teacher = nullptr;
  LossWeights weights;
};

TrainedSystem run_training(SensingOperator op, DecoderNet net, const EncoderSpec& spec, const Dataset& data,
                           const DistillPlan& plan, const Guidance& guide, const TrainOptions& options) {
  check_compatible(op, net, data);
  const LossWeights& lw = guide.weights;
  const TrainedSystem* teacher = guide.teacher;
  std::string teacher_sum;
  if (teacher) {
    if (teacher->history.empty() || teacher->role != Role::teacher)
      throw ConfigError("distillation needs a trained teacher");
    if (teacher->op.modality() != op.modality()) throw ConfigError("teacher and student modalities differ");
    if (teacher->net.bottleneck_shape() != net.bottleneck_shape())
      throw ConfigError("teacher and student decoders have different bottleneck shapes");
    teacher_sum = system_checksum(*teacher);
  }

  const bool train_encoder = !options.freeze_encoder;
  const bool af_constrained = op.modality() == Modality::mri && train_encoder;
  Adam dec_opt({plan.lr, 0.9, 0.999, 1e-8, plan.weight_decay}, net.num_parameters());
  Adam enc_opt({plan.effective_encoder_lr(), 0.9, plan.encoder_beta2, 1e-8, 0.0}, op.params().weights.size());

  TrainedSystem out(options.role, spec, op, net);
  std::vector<std::size_t> order(data.train.size());
  std::vector<double> grad(net.num_parameters());

  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const double tau = af_constrained ? plan.tau.at(epoch, plan.epochs) : 0.0;
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(plan.seed, 0x5bu, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.tau = tau;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += plan.batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(plan.batch));
      const std::size_t bsz = end - start;
      const double inv_b = 1.0 / static_cast<double>(bsz);
      std::vector<SceneTensor> xs;
      std::vector<Image> inputs, targets;
      for (std::size_t k = start; k < end; ++k) {
        const SceneTensor& x = data.train[order[k]];
        xs.push_back(x);
        targets.push_back(x.data);
        // With training noise the gradient through A^T eta is not propagated to Phi.
        inputs.push_back(decoder_input(op, x, plan.train_snr_db, derive_seed(plan.seed, epoch, order[k])).data);
      }

      DecoderTape tape;
      DecodeResult res = net.decode(inputs, tape);
      LossParts parts;
      parts.task = task_loss(res.reconstruction, targets);
      std::vector<Image> d_recon;
      for (std::size_t b = 0; b < bsz; ++b) d_recon.push_back((res.reconstruction[b] - targets[b]) * (2.0 * inv_b * lw.task));

      std::vector<Image> d_bottleneck;
      if (teacher) {
        std::vector<Image> t_inputs;
        for (const auto& x : xs) t_inputs.push_back(teacher->op.backproject(x).data);
        const auto t_feat = teacher->net.decode(t_inputs).bottleneck;
        parts.dec = decoder_kd_loss(res.bottleneck, t_feat);
        if (lw.dec != 0.0)
          for (std::size_t b = 0; b < bsz; ++b)
            d_bottleneck.push_back((res.bottleneck[b] - t_feat[b]) * (2.0 * inv_b * lw.dec));
      }

      std::fill(grad.begin(), grad.end(), 0.0);
      std::vector<Image> d_input = net.backward(tape, d_recon, d_bottleneck, grad);

      Image enc_grad(op.phi().channels(), op.phi().height(), op.phi().width());
      if (teacher) {
        switch (op.modality()) {
          case Modality::mri:
            // Folded into the backprojection gradient so a single VJP serves both terms.
            for (std::size_t b = 0; b < bsz; ++b) {
              Image diff = op.backproject(xs[b]).data - teacher->op.backproject(xs[b]).data;
              parts.enc += diff.squared_norm() * inv_b;
              if (lw.enc != 0.0) d_input[b] += diff * (2.0 * inv_b * lw.enc);
            }
            break;
          case Modality::spc: {
            auto e = spc_encoder_loss_grad(op.params().weights, teacher->op.phi(), static_cast<int>(bsz));
            parts.enc = e.value;
            enc_grad += e.grad * lw.enc;
            break;
          }
          case Modality::cassi: {
            auto e = cassi_encoder_loss_grad(op.params().weights, teacher->op.phi(), static_cast<int>(bsz));
            parts.enc = e.value;
            enc_grad += e.grad * lw.enc;
            break;
          }
        }
      }

      if (af_constrained) {
        const AfRegularizer r = af_regularizer(op.params(), spec.acceleration, 1.0);
        parts.reg = r.value;
        if (tau != 0.0) enc_grad += r.grad * tau;
      }

      const double total = lw.task * parts.task + lw.dec * parts.dec + lw.enc * parts.enc + tau * parts.reg;
      if (!std::isfinite(total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + " (task " + std::to_string(parts.task) + ", dec " +
                           std::to_string(parts.dec) + ", enc " + std::to_string(parts.enc) + ")");

      dec_opt.step(net.parameters(), grad);
      if (train_encoder) {
        for (std::size_t b = 0; b < bsz; ++b) enc_grad += op.backproject_grad(xs[b], d_input[b]);
        Image w = op.params().weights;
        enc_opt.step(w.values(), ste_backward(w, enc_grad).values());
        op.set_weights(std::move(w));
      }

      rec.task += parts.task;
      rec.dec += parts.dec;
      rec.enc += parts.enc;
      rec.reg += parts.reg;
      rec.total += total;
      ++batches;
    }
    rec.task /= batches;
    rec.dec /= batches;
    rec.enc /= batches;
    rec.reg /= batches;
    rec.total /= batches;
    rec.transmittance = transmittance(op);
    if (!data.val.empty()) {
      const Evaluation ev = evaluate_pair(op, net, data.val, kNoiseDisabled, 0);
      rec.val_psnr = ev.psnr_mean;
      rec.val_ssim = ev.ssim_mean;
    }
    out.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }

  if (teacher && system_checksum(*teacher) != teacher_sum)
    throw std::logic_error("teacher parameters changed during distillation");
  out.op = std::move(op);
  out.net = std::move(net);
  out.notes["weights"] = {{"task", lw.task}, {"dec", lw.dec}, {"enc", lw.enc}};
  out.notes["weight_decay"] = plan.weight_decay;
  return out;
}

}  // namespace

TrainedSystem train_e2e(SensingOperator op, DecoderNet net, const EncoderSpec& spec, const Dataset& data,
                        const DistillPlan& plan, const TrainOptions& options) {
  if (plan.epochs < 1 || plan.batch < 1) throw ConfigError("epochs and batch must be >= 1");
  return run_training(std::move(op), std::move(net), spec, data, plan, Guidance{nullptr, {1.0, 0.0, 0.0}}, options);
}

TrainedSystem distill_weighted(SensingOperator student_op, DecoderNet student_net, const EncoderSpec& spec,
                               const TrainedSystem& teacher, const Dataset& data, const DistillPlan& plan,
                               const LossWeights& weights, const TrainOptions& options) {
  if (plan.epochs < 1 || plan.batch < 1) throw ConfigError("epochs and batch must be >= 1");
  if (weights.task < 0 || weights.dec < 0 || weights.enc < 0) throw ConfigError("loss weights must be non-negative");
  TrainOptions opts = options;
  if (opts.role == Role::baseline) opts.role = Role::student;
  return run_training(std::move(student_op), std::move(student_net), spec, data, plan, Guidance{&teacher, weights},
                      opts);
}

TrainedSystem distill_student(SensingOperator student_op, DecoderNet student_net, const EncoderSpec& spec,
                              const TrainedSystem& teacher, const Dataset& data, const DistillPlan& plan,
                              const TrainOptions& options) {
  plan.validate();
  return distill_weighted(std::move(student_op), std::move(student_net), spec, teacher, data, plan,
                          {plan.lambda1, plan.lambda2, plan.lambda3()}, options);
}

LossWeights ablation_weights(const DistillPlan& plan, bool enc_on, bool dec_on) {
  plan.validate();
  const double l1 = plan.lambda1, l2 = dec_on ? plan.lambda2 : 0.0, l3 = enc_on ? plan.lambda3() : 0.0;
  const double mass = l1 + l2 + l3;
  return {l1 / mass, l2 / mass, l3 / mass};
}

std::vector<AblationRun> ablate(const EncoderSpec& student, const DecoderConfig& decoder, const TrainedSystem& teacher,
                                const Dataset& data, const DistillPlan& plan) {
  plan.validate();
  std::vector<AblationRun> runs;
  for (const auto& [enc_on, dec_on] : {std::pair{true, true}, {true, false}, {false, true}, {false, false}}) {
    const DecoderConfig cfg = decoder_for(student, decoder);
    SensingOperator op = student.build_operator();
    DecoderNet net(cfg, student.height, student.width);
    if (!enc_on && !dec_on) {
      runs.push_back({false, false, {1.0, 0.0, 0.0}, train_e2e(std::move(op), std::move(net), student, data, plan)});
      continue;
    }
    const LossWeights w = ablation_weights(plan, enc_on, dec_on);
    runs.push_back({enc_on, dec_on, w,
                    distill_weighted(std::move(op), std::move(net), student, teacher, data, plan, w,
                                     {Role::student, false, {}})});
  }
  return runs;
}

// --- Persistence ------------------------------------------------------------

nlohmann::json system_to_json(const TrainedSystem& s) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = "trained_system";
  j["role"] = std::string(to_string(s.role));
  j["encoder"] = s.encoder;
  const Image& w = s.op.params().weights;
  j["encoder_weights"] = {{"shape", {w.channels(), w.height(), w.width()}}, {"values", w.values()}};
  j["decoder"] = decoder_to_json(s.net);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : s.history)
    hist.push_back({{"epoch", r.epoch},   {"task", r.task},         {"dec", r.dec},
                    {"enc", r.enc},       {"reg", r.reg},           {"total", r.total},
                    {"tau", r.tau},       {"val_psnr", r.val_psnr}, {"val_ssim", r.val_ssim},
                    {"transmittance", r.transmittance}});
  j["history"] = hist;
  j["weight_decay_in_optimizer"] = s.weight_decay_in_optimizer;
  j["notes"] = s.notes;
  return j;
}

TrainedSystem system_from_json(const nlohmann::json& j) {
  if (j.value("kind", std::string()) != "trained_system") throw IoError("not a trained-system checkpoint");
  if (j.value("format_version", 0) != kCheckpointFormatVersion)
    throw IoError("unsupported checkpoint format version " + std::to_string(j.value("format_version", 0)));
  const EncoderSpec spec = j.at("encoder").get<EncoderSpec>();
  const auto shape = j.at("encoder_weights").at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw IoError("bad encoder weight shape");
  Image w(shape[0], shape[1], shape[2]);
  const auto values = j.at("encoder_weights").at("values").get<std::vector<double>>();
  if (values.size() != w.size()) throw IoError("encoder weight count does not match its shape");
  w.values() = values;
  TrainedSystem s(parse_role(j.at("role").get<std::string>()), spec, operator_from_weights(spec, std::move(w)),
                  decoder_from_json(j.at("decoder")));
  for (const auto& r : j.at("history")) {
    EpochRecord e;
    e.epoch = r.at("epoch");
    e.task = r.at("task");
    e.dec = r.at("dec");
    e.enc = r.at("enc");
    e.reg = r.at("reg");
    e.total = r.at("total");
    e.tau = r.at("tau");
    e.val_psnr = r.at("val_psnr");
    e.val_ssim = r.at("val_ssim");
    e.transmittance = r.value("transmittance", 0.0);
    s.history.push_back(e);
  }
  s.weight_decay_in_optimizer = j.value("weight_decay_in_optimizer", true);
  s.notes = j.value("notes", nlohmann::json::object());
  return s;
}

void save_system(const TrainedSystem& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot write checkpoint: " + path.string());
    os << system_to_json(s).dump();
    if (!os) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainedSystem load_system(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  try {
    return system_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace kdci
