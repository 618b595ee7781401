#pragma once

#include "rds/sampler.hpp"

namespace rds {

enum class WeightDirection { Reverse, Forward };

/// Per-trajectory log importance weights; only finite entries enter the
/// aggregates, the rest are counted in `dropped`.
struct LogWeightRecord {
  Vec values;
  int dropped = 0;
  WeightDirection direction = WeightDirection::Reverse;
};

/// Log weights of sampler trajectories (direction: from the variational
/// process).
LogWeightRecord reverse_log_weight(const TrajectoryBatch& batch, const Guidance& theta,
                                   const RdsConfig& cfg);

/// Log weights of exactly-noised target samples (direction: from the
/// target). Needs an exact sampler on the target; the noising recursion uses
/// the scheme's closed-form kernels between consecutive grid times.
LogWeightRecord forward_log_weight(const RdsConfig& cfg, const Guidance& theta, int n,
                                   std::uint64_t seed);

struct MetricsSummary {
  double elbo = 0;
  double eubo = 0;                 // nan without a forward record
  double log_z_ratio_reverse = 0;  // log E[exp(-ell)] over reverse weights
  double log_z_ratio_forward = 0;  // -log E[exp(ell)] over forward weights
  double ness_reverse = 0;
  double ness_forward = 0;
};

/// Aggregates in log domain; forward may be null when the target has no
/// exact sampler.
MetricsSummary summarize(const LogWeightRecord& reverse, const LogWeightRecord* forward);

}  // namespace rds
