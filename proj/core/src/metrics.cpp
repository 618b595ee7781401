#include "rds/metrics.hpp"

#include <cmath>

#include "rds/thread_pool.hpp"

namespace rds {

namespace {

LogWeightRecord make_record(const Vec& raw, WeightDirection dir) {
  int finite = 0;
  for (int i = 0; i < raw.size(); ++i)
    if (std::isfinite(raw[i])) ++finite;
  LogWeightRecord rec;
  rec.direction = dir;
  rec.dropped = static_cast<int>(raw.size()) - finite;
  rec.values.resize(finite);
  int j = 0;
  for (int i = 0; i < raw.size(); ++i)
    if (std::isfinite(raw[i])) rec.values[j++] = raw[i];
  return rec;
}

}  // namespace

LogWeightRecord reverse_log_weight(const TrajectoryBatch& batch, const Guidance& theta,
                                   const RdsConfig& cfg) {
  int dropped = 0;
  const Vec ell = reverse_log_weights(batch, theta, cfg, &dropped);
  LogWeightRecord rec = make_record(ell, WeightDirection::Reverse);
  rec.dropped += dropped;
  return rec;
}

LogWeightRecord forward_log_weight(const RdsConfig& cfg, const Guidance& theta, int n,
                                   std::uint64_t seed) {
  if (!cfg.target->has_exact_sampler())
    throw Unsupported("forward weights need a target with an exact sampler");
  const int K = cfg.coeffs.size();
  const int d = cfg.target->dim();
  const double T = cfg.schedule.horizon();

  TrajectoryBatch batch;
  batch.states.assign(K + 1, SampleMat(n, d));
  batch.noises.assign(K, SampleMat(n, d));
  batch.valid.assign(n, 1);

  // exact draws at the data end, then the closed-form noising recursion
  // backwards in index (towards the base)
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    RngStream rng(seed, Stage::Evaluate, i);
    batch.states[K].row(static_cast<Eigen::Index>(i)) = cfg.target->sample(rng).transpose();
    for (int k = K - 1; k >= 0; --k) {
      const auto kern = cfg.schedule.forward_kernel(T - cfg.grid.t[k + 1], T - cfg.grid.t[k]);
      const double sd = std::sqrt(kern.var);
      for (int j = 0; j < d; ++j) {
        batch.states[k](static_cast<Eigen::Index>(i), j) =
            kern.mean_scale * batch.states[k + 1](static_cast<Eigen::Index>(i), j) +
            sd * rng.normal();
      }
    }
  });

  // drift fields along the noised trajectories
  batch.ref_scores.assign(K, SampleMat(n, d));
  batch.guidance.assign(K, SampleMat(n, d));
  Vec ell = Vec::Zero(n);
  for (int k = 0; k < K; ++k) {
    const double t = cfg.time_of_step(k);
    cfg.reference->score(t, batch.states[k], batch.ref_scores[k]);
    batch.guidance[k] = theta.eval(t, batch.states[k]);
    const double a = cfg.coeffs.a[k];
    const double b = cfg.coeffs.b[k];
    const double sc = std::sqrt(cfg.coeffs.c[k]);
    const double w = cfg.coeffs.w[k];
    // residual of the theta-kernel at the observed transition
    const SampleMat eps =
        (batch.states[k + 1] - a * batch.states[k] -
         b * (batch.ref_scores[k] + batch.guidance[k])) /
        sc;
    ell += (0.5 * w * batch.guidance[k].array().square().rowwise().sum() +
            std::sqrt(w) * (batch.guidance[k].array() * eps.array()).rowwise().sum())
               .matrix();
  }
  for (int i = 0; i < n; ++i) {
    const Vec yk = batch.states[K].row(i).transpose();
    ell[i] += cfg.reference->log_gamma_ref(yk) - cfg.target->log_gamma(yk);
  }
  return make_record(ell, WeightDirection::Forward);
}

MetricsSummary summarize(const LogWeightRecord& reverse, const LogWeightRecord* forward) {
  if (reverse.values.size() == 0) throw InvalidArgument("summarize: empty reverse record");
  if (reverse.direction != WeightDirection::Reverse)
    throw InvalidArgument("summarize: first record must be reverse-direction");
  const auto log_mean = [](const Vec& v) {
    return logsumexp(v) - std::log(static_cast<double>(v.size()));
  };

  MetricsSummary s;
  const Vec& lr = reverse.values;
  s.elbo = -lr.mean();
  s.log_z_ratio_reverse = log_mean(-lr);
  // nESS_r = E[r]^2 / E[r^2] with r = exp(-ell)
  s.ness_reverse = std::exp(2.0 * log_mean(-lr) - log_mean(-2.0 * lr));

  if (forward) {
    if (forward->values.size() == 0) throw InvalidArgument("summarize: empty forward record");
    if (forward->direction != WeightDirection::Forward)
      throw InvalidArgument("summarize: second record must be forward-direction");
    const Vec& lf = forward->values;
    s.eubo = -lf.mean();
    s.log_z_ratio_forward = -log_mean(lf);
    // nESS_f = (E_f[1/r] E_r[r])^{-1}, clipped into (0, 1]
    const double v = std::exp(-(log_mean(lf) + log_mean(-lr)));
    s.ness_forward = std::min(1.0, v);
  } else {
    s.eubo = std::nan("");
    s.log_z_ratio_forward = std::nan("");
    s.ness_forward = std::nan("");
  }
  return s;
}

}  // namespace rds
