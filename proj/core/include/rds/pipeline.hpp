#pragma once

#include <string>

#include "rds/metrics.hpp"
#include "rds/run_config.hpp"
#include "rds/sampler.hpp"

namespace rds {

/// Construction helpers shared by the CLI and the tests.
TargetPtr target_from_config(const RunConfig& cfg);
NoisingSchedule schedule_from_config(const RunConfig& cfg, double sigma_auto_value);
Integrator integrator_from_config(const RunConfig& cfg, SchemeKind scheme);

/// sigma implied by the closest isotropic Gaussian to the mixture (mean and
/// law-of-total-variance diagonal).
double auto_sigma2_from_mixture(const GaussianMixture& mix);

struct PipelineContext {
  RunConfig config;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 keeps the pool default

  static PipelineContext from_file(const std::string& config_path, const std::string& out_dir,
                                   std::uint64_t seed_override, bool has_seed_override,
                                   int threads);
};

/// Serialized trained sampler: guidance + reference + schedule/grid + the
/// preset it was trained as.
struct SamplerCheckpoint {
  std::string family;  // rds | dis | cmcd
  std::string reference_kind;
  LossKind loss = LossKind::LV;
  NoisingSchedule schedule = NoisingSchedule::vp(1.0, 0.1, 20.0, 1.0);
  TimeGrid grid;
  Integrator integrator = Integrator::EM;
  std::optional<GaussianMixture> gmm_reference;  // rds with gmm/gaussian/pis/dds; cmcd base
  std::shared_ptr<MultiLevelEbm> ebm_reference;
  Guidance guidance;
  double cmcd_sigma = 1.0;

  void save(const std::string& path) const;
  static SamplerCheckpoint load(const std::string& path, TargetPtr target);

  RdsConfig to_rds_config(TargetPtr target) const;
  CmcdConfig to_cmcd_config(TargetPtr target) const;
};

// Subcommand bodies; each writes its outputs plus a manifest into out_dir
// and returns the primary output path.
std::string cmd_make_reference(const PipelineContext& ctx);
std::string cmd_fit_reference(const PipelineContext& ctx, const std::string& dataset_path);
std::string cmd_train(const PipelineContext& ctx, const std::string& model_path);
std::string cmd_sample(const PipelineContext& ctx, const std::string& checkpoint_path, int n);
std::string cmd_evaluate(const PipelineContext& ctx, const std::string& checkpoint_path, int n);
std::string cmd_baseline(const PipelineContext& ctx, const std::string& dataset_path);

}  // namespace rds
