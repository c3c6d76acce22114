// kdci command-line entry point.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "kdci/analysis.hpp"
#include "kdci/experiment.hpp"

using namespace kdci;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  int epochs = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "Output directory (overrides the config)");
  cmd->add_option("-s,--seed", c.seeds, "Seeds to run (overrides the config)");
  cmd->add_option("-e,--epochs", c.epochs, "Training epochs (overrides the config)")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (c.epochs > 0) cfg.plan.epochs = c.epochs;
  cfg.validate();
  return cfg;
}

void print(const SystemRecord& r) {
  std::cout << r.system << " seed " << r.seed << (r.trained ? " trained -> " : " reused ") << r.checkpoint.string()
            << "\n";
}

void print(const ResultsTable& t) {
  for (const auto& r : t.rows) {
    std::printf("%-18s psnr %.2f ssim %.4f%s\n", r.system.c_str(), r.psnr_mean, r.ssim_mean, r.best ? "  *" : "");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation design of binary computational-imaging encoders"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(code_version()));

  Common c;
  auto* teacher = app.add_subcommand("train-teacher", "Train the relaxed teacher end to end");
  auto* baseline = app.add_subcommand("train-baseline", "Train the constrained system end to end without KD");
  auto* distill = app.add_subcommand("distill", "Train the student under a trained teacher");
  auto* fixed = app.add_subcommand("eval-fixed", "Train decoders behind the configured fixed patterns");
  auto* analyze = app.add_subcommand("analyze", "Encoder analysis report for a checkpoint");
  auto* noise = app.add_subcommand("sweep-noise", "Evaluate every system at the configured SNR levels");
  auto* tsweep = app.add_subcommand("sweep-teacher", "Distill from each teacher in the configured grid");
  auto* lsweep = app.add_subcommand("sweep-lambda", "Distill one student per cell of the KD weight grid");
  auto* report = app.add_subcommand("report", "Rebuild results, reports and plots from checkpoints");
  auto* run = app.add_subcommand("run", "All stages for all seeds, then report");
  auto* ablate = app.add_subcommand("ablate", "Encoder/decoder KD term ablation");
  for (auto* cmd : {teacher, baseline, distill, fixed, noise, tsweep, lsweep, report, run, ablate}) add_common(cmd, c);

  std::string checkpoint, analyze_out;
  int window = 256;
  analyze->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  analyze->add_option("-o,--out", analyze_out, "Directory for the report and plots")->required();
  analyze->add_option("--gram-window", window, "Gram section side")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (analyze->parsed()) {
      const TrainedSystem s = load_system(checkpoint);
      const EncoderReport rep = analyze_encoder(s.op, window);
      std::filesystem::create_directories(analyze_out);
      const std::string prefix = std::filesystem::path(checkpoint).stem().string();
      std::ofstream(std::filesystem::path(analyze_out) / (prefix + ".json")) << report_to_json(rep).dump(2) << "\n";
      for (const auto& p : write_report_plots(rep, analyze_out, prefix)) std::cout << p.string() << "\n";
      std::printf("coherence %.6g condition %.6g transmittance %.4f\n", rep.mutual_coherence,
                  rep.condition_number, rep.transmittance);
      return 0;
    }

    Experiment exp(resolve(c));
    if (teacher->parsed()) {
      for (auto seed : exp.config().seeds) print(exp.train_teacher(seed));
    } else if (baseline->parsed()) {
      for (auto seed : exp.config().seeds) print(exp.train_baseline(seed));
    } else if (distill->parsed()) {
      for (auto seed : exp.config().seeds) print(exp.distill(seed, true));
    } else if (fixed->parsed()) {
      if (exp.config().comparisons.fixed_patterns.empty()) throw ConfigError("config lists no fixed patterns");
      for (auto seed : exp.config().seeds)
        for (const auto& p : exp.config().comparisons.fixed_patterns) print(exp.eval_fixed(p, seed));
    } else if (noise->parsed()) {
      const NoiseTable t = exp.noise_sweep();
      for (const auto& r : t.rows) {
        std::printf("%-18s", r.system.c_str());
        for (double p : r.psnr) std::printf(" %6.2f", p);
        std::printf("  clean %6.2f\n", r.clean_psnr);
      }
    } else if (tsweep->parsed()) {
      const TeacherSweepTable t = exp.teacher_sweep();
      for (const auto& cell : t.cells)
        std::printf("teacher %g seed %llu: teacher %.2f student %.2f%s\n", cell.value,
                    static_cast<unsigned long long>(cell.seed), cell.teacher_psnr, cell.student_psnr,
                    cell.best ? "  *" : "");
      for (double v : t.skipped) std::printf("teacher %g skipped\n", v);
    } else if (lsweep->parsed()) {
      const LambdaSweepTable t = exp.lambda_sweep();
      for (const auto& cell : t.cells)
        std::printf("lambda1 %g lambda2 %g: psnr %.2f ssim %.4f%s\n", cell.lambda1, cell.lambda2, cell.psnr, cell.ssim,
                    cell.best ? "  *" : "");
    } else if (report->parsed()) {
      print(exp.report());
    } else if (run->parsed()) {
      exp.run();
      print(exp.report());
    } else if (ablate->parsed()) {
      for (auto seed : exp.config().seeds)
        for (const auto& r : exp.ablate(seed))
          std::printf("seed %llu enc %d dec %d val_psnr %.2f\n", static_cast<unsigned long long>(seed), r.enc_on,
                      r.dec_on, r.system.history.empty() ? 0.0 : r.system.history.back().val_psnr);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
