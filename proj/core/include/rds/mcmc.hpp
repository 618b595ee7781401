#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "rds/rng.hpp"
#include "rds/targets.hpp"
#include "rds/types.hpp"

namespace rds {

using LogDensityFn = std::function<double(const Vec&)>;
using ScoreFn = std::function<Vec(const Vec&)>;

/// State of one Metropolis chain. The cached log density always matches the
/// current point.
struct ChainState {
  Vec x;
  double log_density = 0;
  double step_size = 0.1;
  long accepted = 0;
  long proposed = 0;

  double acceptance_rate() const {
    return proposed > 0 ? static_cast<double>(accepted) / proposed : 0.0;
  }
};

ChainState make_chain(const Vec& x0, const LogDensityFn& log_density, double step_size = 0.1);

/// One MALA transition: x~ = x + step * score(x) + sqrt(2 step) z with the
/// Metropolis correction for the asymmetric proposal. Non-finite proposal
/// densities reject automatically.
void mala_step(ChainState& state, const LogDensityFn& log_density, const ScoreFn& score,
               RngStream& rng);

/// Random-walk Metropolis with isotropic Gaussian proposal sqrt(2 step) z.
void rwmh_step(ChainState& state, const LogDensityFn& log_density, RngStream& rng);

/// Windowed multiplicative step-size adaptation towards a target acceptance
/// rate: every `window` proposals, step *= exp(eta (rate - target)).
class StepSizeAdapter {
 public:
  explicit StepSizeAdapter(double target_rate = 0.70, double eta = 0.1, int window = 50)
      : target_(target_rate), eta_(eta), window_(window) {}

  /// Observe one proposal outcome; returns the (possibly updated) step size.
  double observe(bool accepted, double current_step);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  double target_rate() const { return target_; }

 private:
  double target_;
  double eta_;
  int window_;
  int seen_ = 0;
  int accepted_ = 0;
  bool frozen_ = false;
};

struct DatasetOptions {
  int chains_per_mode = 4;
  int warmup = 8192;
  int n_total = 60000;   // rows in the final dataset
  double target_rate = 0.70;
  double init_step = 0.05;
  std::uint64_t seed = 0;
  double min_acceptance = 0.05;  // post-warmup sanity floor
};

struct DatasetResult {
  SampleMat samples;
  std::vector<double> final_steps;
  std::vector<double> acceptance_rates;
};

/// Locally-mixed reference samples: per target mode, `chains_per_mode`
/// adapted chains started at the mode (MALA when a score exists, RWMH
/// otherwise); the last n_eff = n_total / (modes * chains) states of each
/// chain are kept.
DatasetResult build_reference_dataset(const Target& target, const DatasetOptions& opts);

/// A sequence of annealed densities p_0 .. p_K; p_0 must be exactly
/// sampleable via `sample0`.
struct AnnealSequence {
  std::vector<LogDensityFn> log_density;
  std::vector<ScoreFn> score;  // empty entries mean RWMH at that level
  std::function<Vec(RngStream&)> sample0;
  std::vector<double> step_sizes;

  int levels() const { return static_cast<int>(log_density.size()); }
};

/// Geometric interpolation p_k propto base^{1-k/K} gamma^{k/K} between a
/// tractable base mixture and the target.
AnnealSequence make_geometric_sequence(const GaussianMixture& base, const Target& target, int K,
                                       double init_step);

/// Sequential MALA, warm-started level to level. Returns per-level samples
/// (levels x L rows each).
std::vector<SampleMat> annealed_langevin(const AnnealSequence& seq, int L, int dim,
                                         std::uint64_t seed, bool adapt = true);

struct SmcResult {
  SampleMat particles;              // final level
  std::vector<double> log_z_increments;  // log mean importance weight per level
  double log_z() const {
    double s = 0;
    for (double v : log_z_increments) s += v;
    return s;
  }
};

/// Sequential Monte Carlo with multinomial resampling (systematic available
/// behind the flag) and L MALA steps per level.
SmcResult smc(const AnnealSequence& seq, int particles, int steps_per_level, int dim,
              std::uint64_t seed, bool systematic_resampling = false);

struct ReplicaExchangeOptions {
  int chains = 8;        // independent ladders
  int total_steps = 32;  // per ladder, swap rounds included
  int swap_every = 8;
  int warmup = 0;
  std::uint64_t seed = 0;
  bool adapt = true;
  int keep_last = 0;  // 0 keeps only the final state per chain
};

struct ReplicaExchangeResult {
  // per level: (chains * max(1, keep_last)) rows
  std::vector<SampleMat> level_samples;
  std::vector<SampleMat> final_states;  // per level, one row per chain
  std::vector<double> step_sizes;
};

/// Parallel tempering over the sequence: per-level MALA sweeps with
/// adjacent-pair swaps of alternating parity every `swap_every` steps.
/// `init` (optional) supplies one starting row per (level, chain).
ReplicaExchangeResult replica_exchange(const AnnealSequence& seq, const ReplicaExchangeOptions& opts,
                                       int dim,
                                       const std::vector<SampleMat>* init = nullptr,
                                       const std::vector<double>* init_steps = nullptr);

}  // namespace rds
