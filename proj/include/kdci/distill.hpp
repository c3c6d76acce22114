#pragma once

// Teacher relaxation, distillation losses and the three-stage training pipeline
// (relax, train teacher, distill student), plus end-to-end training.

#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "kdci/analysis.hpp"
#include "kdci/data.hpp"
#include "kdci/decoder.hpp"
#include "kdci/sensing.hpp"

namespace kdci {

/// Everything needed to build a fresh seeded encoder.
struct EncoderSpec {
  Modality modality = Modality::spc;
  BinarizeMode mode = BinarizeMode::sign;
  int height = 32;
  int width = 32;
  /// CASSI band count.
  int bands = 8;
  /// MRI acceleration factor.
  double acceleration = 4.0;
  /// SPC compression ratio m / n.
  double gamma = 0.1;
  /// CASSI snapshots.
  int snapshots = 1;
  /// Scale of the initial latent weights.
  double init_scale = 0.05;
  /// MRI only: width of the variable-density initial mask; 0 is uniform.
  double density_width = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  SensingOperator build_operator() const;
  /// Student mode per modality: heaviside (MRI, CASSI) or sign (SPC).
  static BinarizeMode default_mode(Modality m);
};

void to_json(nlohmann::json& j, const EncoderSpec& s);
void from_json(const nlohmann::json& j, EncoderSpec& s);

/// Teacher relaxation. Unset fields take the defaults AF_s - 1, gamma_s and m_s.
struct RelaxationSpec {
  std::optional<double> teacher_acceleration;
  std::optional<double> teacher_gamma;
  std::optional<int> teacher_snapshots;
  /// SPC and CASSI teachers use real-valued apertures.
  BinarizeMode teacher_mode = BinarizeMode::real;
  /// Initial weight scale of a real-valued teacher aperture.
  double teacher_init_scale = 1.0;
};

void to_json(nlohmann::json& j, const RelaxationSpec& s);
void from_json(const nlohmann::json& j, RelaxationSpec& s);

/// Returns the teacher encoder spec for `student`; throws ConfigError when the
/// relaxation would tighten the student (AF_t >= AF_s, gamma_t < gamma_s, m_t < m_s).
EncoderSpec relax(const EncoderSpec& student, const RelaxationSpec& spec);
/// Builds the seeded teacher operator; the student operator is not touched.
SensingOperator relax(const SensingOperator& student_op, const EncoderSpec& student, const RelaxationSpec& spec);

struct TauSchedule {
  double phase1 = 1.0;
  double phase2 = 1e15;
  /// First epoch (0-based) of phase 2; negative selects 40% of the run.
  int switch_epoch = -1;

  double at(int epoch, int epochs) const;
  int resolved_switch(int epochs) const;
};

struct DistillPlan {
  double lambda1 = 0.1;
  double lambda2 = 0.3;
  TauSchedule tau;
  /// Decoupled weight decay on the decoder (the R_mu term).
  double weight_decay = 1e-2;
  int epochs = 50;
  double lr = 5e-4;
  /// Encoder learning rate; 0 uses lr.
  double encoder_lr = 0.0;
  /// Second-moment decay of the encoder optimizer.
  double encoder_beta2 = 0.999;
  int batch = 8;
  std::uint64_t seed = 0;
  /// Additive noise on measurements during training; +inf disables it.
  double train_snr_db = kNoiseDisabled;

  double lambda3() const { return 1.0 - lambda1 - lambda2; }
  double effective_encoder_lr() const { return encoder_lr > 0.0 ? encoder_lr : lr; }
  /// Throws ConfigError unless lambda1 > 0, lambda2 >= 0, lambda3 > 0, epochs, batch >= 1.
  void validate() const;
};

void to_json(nlohmann::json& j, const TauSchedule& t);
void from_json(const nlohmann::json& j, TauSchedule& t);
void to_json(nlohmann::json& j, const DistillPlan& p);
void from_json(const nlohmann::json& j, DistillPlan& p);

/// Grid-searched loss weights: MRI by acceleration factor 4, 8, 16; SPC; CASSI.
DistillPlan preset_plan(Modality m, double acceleration = 4.0);

/// Loss weights used by the training loop. Unlike DistillPlan these may be zero.
struct LossWeights {
  double task = 1.0;
  double dec = 0.0;
  double enc = 0.0;
};

enum class Role { teacher, student, baseline, fixed };

std::string_view to_string(Role r);
Role parse_role(std::string_view s);

struct EpochRecord {
  int epoch = 0;
  double task = 0.0;
  double dec = 0.0;
  double enc = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double tau = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
  double transmittance = 0.0;
};

struct TrainedSystem {
  Role role = Role::baseline;
  EncoderSpec encoder;
  SensingOperator op;
  DecoderNet net;
  std::vector<EpochRecord> history;
  /// Set when R_mu is applied as optimizer weight decay rather than a loss term.
  bool weight_decay_in_optimizer = true;
  /// Free-form provenance, e.g. the fixed pattern's generator parameters.
  nlohmann::json notes = nlohmann::json::object();

  TrainedSystem(Role r, EncoderSpec e, SensingOperator o, DecoderNet n)
      : role(r), encoder(std::move(e)), op(std::move(o)), net(std::move(n)) {}
};

// --- Loss terms. Each `_grad` variant also returns the gradient. -------------

/// (1/B) sum_b ||recon_b - target_b||^2.
double task_loss(std::span<const Image> recon, std::span<const Image> target);
/// (1/B) sum_b ||T_b - S_b||^2.
double decoder_kd_loss(std::span<const FeatureMap> student, std::span<const FeatureMap> teacher);

/// (1/B) sum_b ||F^H Phi_s F x_b - F^H Phi_t F x_b||^2.
double mri_encoder_loss(const SensingOperator& student, const SensingOperator& teacher,
                        std::span<const SceneTensor> batch);

struct EncoderLossGrad {
  double value = 0.0;
  /// Gradient with respect to the student's encoder values (Phi, and W via the STE).
  Image grad;
};

EncoderLossGrad mri_encoder_loss_grad(const SensingOperator& student, const SensingOperator& teacher,
                                      std::span<const SceneTensor> batch);
/// (1/B) ||W_s^T W_s - A_t^T A_t||_F^2 with W_s (1, m_s, n) and A_t (1, m_t, n).
double spc_encoder_loss(const Image& w_student, const Image& a_teacher, int batch);
EncoderLossGrad spc_encoder_loss_grad(const Image& w_student, const Image& a_teacher, int batch);
/// Gram loss of diagonalized coded apertures stacked over snapshots:
/// (1/B) sum_k (sum_s w_sk^2 - sum_s phi_sk^2)^2.
double cassi_encoder_loss(const Image& w_student, const Image& phi_teacher, int batch);
EncoderLossGrad cassi_encoder_loss_grad(const Image& w_student, const Image& phi_teacher, int batch);

struct LossParts {
  double task = 0.0;
  double dec = 0.0;
  double enc = 0.0;
  /// Unweighted AF regularizer value R(Phi) (tau not applied).
  double reg = 0.0;
  /// Explicit ||Theta||^2 when R_mu is a loss term; ignored otherwise.
  double param_l2 = 0.0;
};

/// lambda1 task + lambda2 dec + lambda3 enc + tau reg (+ mu param_l2 when explicit).
double kd_total_loss(const LossParts& parts, const DistillPlan& plan, double tau, bool explicit_weight_decay = false);

// --- Training. ----------------------------------------------------------------

struct TrainOptions {
  Role role = Role::baseline;
  bool freeze_encoder = false;
  /// Optional per-epoch callback (e.g. for CSV logging).
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Jointly trains encoder and decoder on the reconstruction loss plus the AF
/// regularizer (MRI). Used for teachers, baselines and, with freeze_encoder,
/// fixed-pattern decoders.
TrainedSystem train_e2e(SensingOperator op, DecoderNet net, const EncoderSpec& spec, const Dataset& data,
                        const DistillPlan& plan, const TrainOptions& options = {});

/// Trains the student under guidance of a frozen teacher. Throws ConfigError if the
/// teacher is untrained or incompatible, and std::logic_error if the teacher changed.
TrainedSystem distill_student(SensingOperator student_op, DecoderNet student_net, const EncoderSpec& spec,
                              const TrainedSystem& teacher, const Dataset& data, const DistillPlan& plan,
                              const TrainOptions& options = {});

/// As distill_student with explicit (possibly zero) loss weights.
TrainedSystem distill_weighted(SensingOperator student_op, DecoderNet student_net, const EncoderSpec& spec,
                               const TrainedSystem& teacher, const Dataset& data, const DistillPlan& plan,
                               const LossWeights& weights, const TrainOptions& options = {});

struct AblationRun {
  bool enc_on = false;
  bool dec_on = false;
  LossWeights weights;
  TrainedSystem system;
};

/// Renormalized weights for an ablation toggle; the λ mass of disabled terms is
/// redistributed proportionally among the active ones.
LossWeights ablation_weights(const DistillPlan& plan, bool enc_on, bool dec_on);

/// Runs the four (enc, dec) combinations; (off, off) is plain E2E tagged baseline.
std::vector<AblationRun> ablate(const EncoderSpec& student, const DecoderConfig& decoder, const TrainedSystem& teacher,
                                const Dataset& data, const DistillPlan& plan);

/// Forward, optional noise, adjoint and decode for every scene.
std::vector<SceneTensor> reconstruct(const TrainedSystem& system, std::span<const SceneTensor> scenes,
                                     double snr_db = kNoiseDisabled, std::uint64_t noise_seed = 0);

struct Evaluation {
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  std::optional<double> sam_mean;
  std::vector<QualityMetrics> per_sample;
};

Evaluation evaluate(const TrainedSystem& system, std::span<const SceneTensor> scenes, double snr_db = kNoiseDisabled,
                    std::uint64_t noise_seed = 0);

/// SHA-256 over the latent encoder weights.
std::string encoder_checksum(const SensingOperator& op);
/// SHA-256 over encoder weights and decoder parameters.
std::string system_checksum(const TrainedSystem& s);

/// Decoder input for a scene: A^T A x, or A^T(y + noise) when snr_db is finite.
SceneTensor decoder_input(const SensingOperator& op, const SceneTensor& x, double snr_db = kNoiseDisabled,
                          std::uint64_t noise_seed = 0);

/// Decoder sized and scaled for an encoder: input channels from the modality,
/// input scale 1/m for SPC backprojections.
DecoderConfig decoder_for(const EncoderSpec& spec, DecoderConfig base);

nlohmann::json system_to_json(const TrainedSystem& s);
TrainedSystem system_from_json(const nlohmann::json& j);
void save_system(const TrainedSystem& s, const std::filesystem::path& path);
TrainedSystem load_system(const std::filesystem::path& path);

}  // namespace kdci
