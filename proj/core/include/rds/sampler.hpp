#pragma once

#include <functional>
#include <memory>
#include <optional>

#include "rds/ebm.hpp"
#include "rds/gmm.hpp"
#include "rds/net.hpp"
#include "rds/schedule.hpp"
#include "rds/targets.hpp"

namespace rds {

/// Anything exposing an unnormalized time-0 log density and the diffused
/// scores of the induced noising process.
class ReferenceModel {
 public:
  virtual ~ReferenceModel() = default;
  virtual int dim() const = 0;
  virtual double log_gamma_ref(const Vec& x) const = 0;
  virtual void score(double t, const SampleMat& X, SampleMat& out) const = 0;
  Vec score1(double t, const Vec& x) const;
  /// Directional derivative of the score map (Hessian-vector product of the
  /// diffused log density); used by the pathwise KL gradient.
  virtual Vec score_jvp(double t, const Vec& x, const Vec& v) const = 0;
};

using ReferencePtr = std::shared_ptr<const ReferenceModel>;

/// Gaussian-mixture reference: diffused marginals stay mixtures, so scores
/// are analytic. Mixtures at the grid times are cached up front.
class GmmReference final : public ReferenceModel {
 public:
  GmmReference(GaussianMixture gmm, NoisingSchedule sched, const TimeGrid& grid);

  int dim() const override { return gmm_.dim(); }
  double log_gamma_ref(const Vec& x) const override { return gmm_.log_density(x); }
  void score(double t, const SampleMat& X, SampleMat& out) const override;
  Vec score_jvp(double t, const Vec& x, const Vec& v) const override;
  const GaussianMixture& mixture() const { return gmm_; }
  const GaussianMixture& diffused_at(double t) const;

 private:
  GaussianMixture gmm_;
  NoisingSchedule sched_;
  std::vector<double> times_;
  std::vector<GaussianMixture> diffused_;
};

/// Multi-level EBM reference; scores are analytic-GMM plus the learned tilt
/// gradient. score_jvp falls back to a central difference of the score.
class EbmReference final : public ReferenceModel {
 public:
  explicit EbmReference(std::shared_ptr<const MultiLevelEbm> ebm) : ebm_(std::move(ebm)) {}

  int dim() const override { return ebm_->dim(); }
  double log_gamma_ref(const Vec& x) const override { return ebm_->log_density(0, x); }
  void score(double t, const SampleMat& X, SampleMat& out) const override;
  Vec score_jvp(double t, const Vec& x, const Vec& v) const override;
  const MultiLevelEbm& ebm() const { return *ebm_; }

 private:
  std::shared_ptr<const MultiLevelEbm> ebm_;
};

/// Parametric drift correction g(t, x): a Fourier MLP plus an optional
/// target-informed head c(t) * grad log pi(x). Parameters are the net's
/// followed by the head's.
class Guidance {
 public:
  Guidance() = default;
  Guidance(FourierMlp net, std::optional<FourierMlp> time_head, TargetPtr target);

  static Guidance make(int dim, double t_scale, bool target_informed, TargetPtr target,
                       std::uint64_t seed);

  int dim() const { return net_.arch().x_dim; }
  bool target_informed() const { return time_head_.has_value(); }
  const FourierMlp& net() const { return net_; }
  FourierMlp& net() { return net_; }
  const std::optional<FourierMlp>& time_head() const { return time_head_; }

  int param_count() const;
  Vec pack_params() const;
  void set_params(const Vec& p);

  SampleMat eval(double t, const SampleMat& X) const;

  struct Tape {
    FourierMlp::Tape net_tape;
    FourierMlp::Tape head_tape;
    SampleMat target_scores;  // cached per call when the head is active
    double head_value = 0;
  };
  SampleMat eval_cached(double t, const SampleMat& X, Tape& tape) const;
  /// Accumulate dL/dparams given dL/d(eval output); optionally dL/dX
  /// (the target-informed head contributes no input gradient path and is
  /// rejected when grad_input is requested).
  void backward(const Tape& tape, const SampleMat& cot, Vec& grad, SampleMat* grad_input) const;

  void save(std::ostream& os) const;
  static Guidance load(std::istream& is, TargetPtr target);

 private:
  FourierMlp net_;
  std::optional<FourierMlp> time_head_;
  TargetPtr target_;
};

enum class LossKind { LV, KL };
LossKind loss_from_string(const std::string& s);

/// Everything a simulation/loss evaluation needs.
struct RdsConfig {
  NoisingSchedule schedule = NoisingSchedule::vp(1.0, 0.1, 20.0, 1.0);
  TimeGrid grid;
  StepCoefficients coeffs;
  ReferencePtr reference;
  TargetPtr target;
  LossKind loss = LossKind::LV;
  int batch = 512;
  int iterations = 2048;
  std::uint64_t seed = 0;

  double time_of_step(int k) const { return schedule.horizon() - grid.t[k]; }
};

/// B discrete trajectories of the reverse recursion with their noise draws
/// and the drift fields evaluated along the way.
struct TrajectoryBatch {
  std::vector<SampleMat> states;      // K+1 entries of B x d
  std::vector<SampleMat> noises;      // K entries
  std::vector<SampleMat> ref_scores;  // K entries: s^ref(T - t_k, Y_k)
  std::vector<SampleMat> guidance;    // K entries: g under the simulating parameters
  std::vector<char> valid;            // per-trajectory finite flag
  int invalid_count = 0;

  int steps() const { return static_cast<int>(noises.size()); }
  int size() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
};

/// Simulates B trajectories under the (detached) parameters in `guidance`.
TrajectoryBatch simulate(const RdsConfig& cfg, const Guidance& guidance, int B,
                         std::uint64_t noise_index);

/// Terminal states of the finite trajectories only.
SampleMat valid_terminal_states(const TrajectoryBatch& batch);

struct LossResult {
  double value = 0;
  Vec grad;
  Vec per_trajectory;  // the per-sample log-RN statistic (valid rows only)
  int invalid_count = 0;
};

/// Log-variance loss: unbiased sample variance over the batch of the
/// per-trajectory log Radon-Nikodym statistic; gradients flow only through
/// the re-evaluated guidance at the stored states. theta_matches_batch skips
/// the value re-evaluation when theta is the simulating parameter.
LossResult lv_loss(const TrajectoryBatch& batch, const Guidance& theta, const RdsConfig& cfg,
                   bool theta_matches_batch = false);

/// Reverse KL loss with pathwise gradients: trajectories are re-simulated
/// under theta with the stream given by noise_index, and the gradient is
/// backpropagated through the full recursion.
LossResult kl_loss(const RdsConfig& cfg, const Guidance& theta, int B, std::uint64_t noise_index);

struct TrainTraceRow {
  int iteration = 0;
  double loss = 0;
  double grad_norm = 0;
  int invalid = 0;
  Vec mode_weights;  // empty unless measured this iteration
};

struct TrainResult {
  Guidance guidance;
  std::vector<TrainTraceRow> trace;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainOptions {
  double lr = 1e-3;
  int mode_weight_every = 0;  // 0 disables periodic estimates
  int mode_weight_samples = 4096;
  bool verbose = false;
};

TrainResult train_rds(const RdsConfig& cfg, Guidance initial, const TrainOptions& opts);

/// Per-trajectory reverse log weight of the trained sampler (the same
/// statistic the LV loss takes the variance of), exposed for the metrics
/// module.
Vec reverse_log_weights(const TrajectoryBatch& batch, const Guidance& theta, const RdsConfig& cfg,
                        int* dropped = nullptr);

// --------------------------------------------------------------------------
// Baseline variational families sharing the TrajectoryBatch contract.

/// DIS: the reverse VP recursion with a learned state score (no reference);
/// equivalent to the EM recursion with s^ref = 0.
TrajectoryBatch dis_simulate(const RdsConfig& cfg, const Guidance& state_score, int B,
                             std::uint64_t noise_index);
LossResult dis_loss(const TrajectoryBatch& batch, const Guidance& state_score, const RdsConfig& cfg,
                    LossKind kind);

/// CMCD: controlled annealed Langevin along the geometric path between a
/// tractable base and the target. sigma is the SDE volatility.
struct CmcdConfig {
  GaussianMixture base;  // normalized; endpoint of the geometric path
  TargetPtr target;
  TimeGrid grid;
  double sigma = 1.0;
  int batch = 512;
  int iterations = 2048;
  std::uint64_t seed = 0;
};

TrajectoryBatch cmcd_simulate(const CmcdConfig& cfg, const Guidance& control, int B,
                              std::uint64_t noise_index);
LossResult cmcd_loss(const TrajectoryBatch& batch, const Guidance& control, const CmcdConfig& cfg,
                     LossKind kind);

TrainResult train_dis(const RdsConfig& cfg, Guidance initial, const TrainOptions& opts);
TrainResult train_cmcd(const CmcdConfig& cfg, Guidance initial, const TrainOptions& opts);

}  // namespace rds
