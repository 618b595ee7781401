#pragma once

#include <iosfwd>

#include "rds/gmm.hpp"
#include "rds/mcmc.hpp"
#include "rds/net.hpp"
#include "rds/schedule.hpp"

namespace rds {

/// Time-indexed unnormalized density family: a learned tilt of the diffused
/// base mixture,
///   log p_l(x) = gate(tau_l) log gmm_diffused(tau_l)(x) - E_tilt(tau_l, x),
/// with gate = 1_{tau > t_lim} and E_tilt(t, x) = net(t, x)^T x. Level l
/// lives at diffusion time tau_l = T - t_{K-l}; level 0 is the reference
/// density itself.
class MultiLevelEbm {
 public:
  MultiLevelEbm(GaussianMixture base, NoisingSchedule sched, TimeGrid grid, FourierMlp tilt,
                double t_lim = 0.2);

  int dim() const { return base_.dim(); }
  int levels() const { return static_cast<int>(level_times_.size()); }
  double level_time(int level) const { return level_times_[level]; }
  double t_lim() const { return t_lim_; }
  bool gated_on(int level) const { return level_times_[level] > t_lim_; }
  const GaussianMixture& base() const { return base_; }
  const NoisingSchedule& schedule() const { return sched_; }
  const TimeGrid& grid() const { return grid_; }
  const GaussianMixture& diffused(int level) const { return diffused_[level]; }
  FourierMlp& tilt() { return tilt_; }
  const FourierMlp& tilt() const { return tilt_; }

  /// Level index whose time matches t (grid times only).
  int level_of_time(double t) const;

  double log_density(int level, const Vec& x) const;
  Vec score(int level, const Vec& x) const;
  void score_batch(int level, const SampleMat& X, SampleMat& out) const;

  /// E_tilt and its gradients (batched).
  Vec tilt_energy(double t, const SampleMat& X) const;
  SampleMat tilt_input_grad(double t, const SampleMat& X) const;
  /// Accumulates sum_i cot_i dE_tilt(t, x_i)/dtheta into grad.
  void tilt_param_grad(double t, const SampleMat& X, const Vec& cot, Vec& grad) const;

  /// Persistent negative-chain buffers (one row per chain and level).
  std::vector<SampleMat>& buffers() { return buffers_; }
  std::vector<double>& buffer_steps() { return buffer_steps_; }

  void save(std::ostream& os) const;
  static MultiLevelEbm load(std::istream& is);

 private:
  GaussianMixture base_;
  NoisingSchedule sched_;
  TimeGrid grid_;
  FourierMlp tilt_;
  double t_lim_;
  std::vector<double> level_times_;
  std::vector<GaussianMixture> diffused_;
  std::vector<SampleMat> buffers_;
  std::vector<double> buffer_steps_;
};

/// Rows of the dataset pushed through the exact forward kernel to diffusion
/// time tau.
SampleMat positive_samples(const SampleMat& dataset, const NoisingSchedule& sched, double tau,
                           int batch, RngStream& rng);

struct NegativeSampleOptions {
  int mcmc_steps = 32;
  int swap_every = 8;
  int keep_last = 16;
  std::uint64_t seed = 0;
  std::uint64_t round = 0;  // distinguishes successive calls
};

/// Replica-exchange negatives across all levels, chains warm-started from
/// the persistent buffers (seeded from the exact tilt-zero mixtures on first
/// use). Returns keep_last * chains rows per level and writes the final
/// states back to the buffers.
std::vector<SampleMat> negative_samples(MultiLevelEbm& ebm, int chains,
                                        const NegativeSampleOptions& opts);

struct EbmTrainConfig {
  int epochs = 200;
  int batch_per_level = 32;
  int grad_accum_steps = 10;
  int chains = 2;  // chains * keep_last negatives per level
  double lr = 1e-4;
  std::uint64_t seed = 0;
  NegativeSampleOptions negatives;
  double divergence_gap = 50.0;  // nats; triggers a learning-rate halving
  bool verbose = false;
};

struct EbmTrainTraceRow {
  int epoch = 0;
  double energy_gap = 0;  // mean E(positives) - mean E(negatives)
  double grad_norm = 0;
  double lr = 0;
};

struct EbmTrainResult {
  std::vector<EbmTrainTraceRow> trace;
  int lr_halvings = 0;
};

/// Integrated maximum-likelihood training: per epoch one replica-exchange
/// negative refresh, then `grad_accum_steps` gradient accumulations with
/// fresh positives, then one Adam update.
EbmTrainResult train_multilevel_ebm(MultiLevelEbm& ebm, const SampleMat& dataset,
                                    const EbmTrainConfig& cfg);

}  // namespace rds
