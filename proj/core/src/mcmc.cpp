#include "rds/mcmc.hpp"

#include <cmath>

#include "rds/thread_pool.hpp"

namespace rds {

ChainState make_chain(const Vec& x0, const LogDensityFn& log_density, double step_size) {
  ChainState st;
  st.x = x0;
  st.log_density = log_density(x0);
  st.step_size = step_size;
  return st;
}

void mala_step(ChainState& state, const LogDensityFn& log_density, const ScoreFn& score,
               RngStream& rng) {
  const double lam = state.step_size;
  const Vec grad = score(state.x);
  const Vec z = rng.normal_vec(static_cast<int>(state.x.size()));
  const Vec prop = state.x + lam * grad + std::sqrt(2.0 * lam) * z;
  const double prop_ld = log_density(prop);
  ++state.proposed;
  if (std::isfinite(prop_ld)) {
    // q(y|x) = N(y; x + lam score(x), 2 lam I)
    const Vec prop_grad = score(prop);
    const double fwd = -(prop - state.x - lam * grad).squaredNorm() / (4.0 * lam);
    const double bwd = -(state.x - prop - lam * prop_grad).squaredNorm() / (4.0 * lam);
    const double log_alpha = prop_ld - state.log_density + bwd - fwd;
    if (std::log(rng.uniform()) <= log_alpha) {
      state.x = prop;
      state.log_density = prop_ld;
      ++state.accepted;
    }
  }
}

void rwmh_step(ChainState& state, const LogDensityFn& log_density, RngStream& rng) {
  const double lam = state.step_size;
  const Vec z = rng.normal_vec(static_cast<int>(state.x.size()));
  const Vec prop = state.x + std::sqrt(2.0 * lam) * z;
  const double prop_ld = log_density(prop);
  ++state.proposed;
  if (std::isfinite(prop_ld)) {
    const double log_alpha = prop_ld - state.log_density;
    if (std::log(rng.uniform()) <= log_alpha) {
      state.x = prop;
      state.log_density = prop_ld;
      ++state.accepted;
    }
  }
}

double StepSizeAdapter::observe(bool accepted, double current_step) {
  if (frozen_) return current_step;
  ++seen_;
  if (accepted) ++accepted_;
  if (seen_ >= window_) {
    const double rate = static_cast<double>(accepted_) / seen_;
    current_step *= std::exp(eta_ * (rate - target_));
    seen_ = 0;
    accepted_ = 0;
  }
  return current_step;
}

namespace {

void run_adapted_chain(ChainState& st, const LogDensityFn& ld, const ScoreFn* score,
                       StepSizeAdapter& adapter, int steps, RngStream& rng,
                       SampleMat* keep = nullptr, int keep_from = 0) {
  for (int i = 0; i < steps; ++i) {
    const long before = st.accepted;
    if (score) {
      mala_step(st, ld, *score, rng);
    } else {
      rwmh_step(st, ld, rng);
    }
    st.step_size = adapter.observe(st.accepted > before, st.step_size);
    if (keep && i >= keep_from) keep->row(i - keep_from) = st.x.transpose();
  }
}

}  // namespace

DatasetResult build_reference_dataset(const Target& target, const DatasetOptions& opts) {
  const auto& modes = target.modes();
  if (modes.empty()) throw InvalidArgument("target has no known modes");
  const int n_chains = static_cast<int>(modes.size()) * opts.chains_per_mode;
  const int n_eff = opts.n_total / n_chains;
  if (n_eff < 1) throw InvalidArgument("n_total too small for the chain layout");

  LogDensityFn ld = [&](const Vec& x) { return target.log_gamma(x); };
  std::optional<ScoreFn> score;
  if (target.has_score()) score = [&](const Vec& x) { return target.score(x); };

  DatasetResult out;
  out.samples.resize(static_cast<Eigen::Index>(n_chains) * n_eff, target.dim());
  out.final_steps.resize(n_chains);
  out.acceptance_rates.resize(n_chains);
  std::vector<std::string> failures(n_chains);

  parallel_for(static_cast<std::size_t>(n_chains), [&](std::size_t c) {
    const int mode = static_cast<int>(c) / opts.chains_per_mode;
    RngStream rng(opts.seed, Stage::MakeReference, c);
    ChainState st = make_chain(modes[mode], ld, opts.init_step);
    StepSizeAdapter adapter(opts.target_rate);
    run_adapted_chain(st, ld, score ? &*score : nullptr, adapter, opts.warmup, rng);
    adapter.freeze();
    st.accepted = 0;
    st.proposed = 0;
    SampleMat keep(n_eff, target.dim());
    run_adapted_chain(st, ld, score ? &*score : nullptr, adapter, n_eff, rng, &keep, 0);
    out.samples.middleRows(static_cast<Eigen::Index>(c) * n_eff, n_eff) = keep;
    out.final_steps[c] = st.step_size;
    out.acceptance_rates[c] = st.acceptance_rate();
    if (st.acceptance_rate() < opts.min_acceptance) {
      failures[c] = "chain " + std::to_string(c) + " acceptance " +
                    std::to_string(st.acceptance_rate()) + " below " +
                    std::to_string(opts.min_acceptance) + " (step " +
                    std::to_string(st.step_size) + ")";
    }
  });

  for (const auto& f : failures) {
    if (!f.empty()) throw NumericError("reference dataset aborted: " + f);
  }
  return out;
}

AnnealSequence make_geometric_sequence(const GaussianMixture& base, const Target& target, int K,
                                       double init_step) {
  if (K < 1) throw InvalidArgument("geometric sequence needs K >= 1");
  AnnealSequence seq;
  auto base_ptr = std::make_shared<GaussianMixture>(base);
  // keep the target alive through the closures via a raw reference: callers
  // own the target for the duration of the run
  for (int k = 0; k <= K; ++k) {
    const double lam = static_cast<double>(k) / K;
    seq.log_density.push_back([base_ptr, &target, lam](const Vec& x) {
      const double lb = base_ptr->log_density(x);
      if (lam == 0.0) return lb;
      const double lt = target.log_gamma(x);
      return (1.0 - lam) * lb + lam * lt;
    });
    if (target.has_score()) {
      seq.score.push_back([base_ptr, &target, lam](const Vec& x) {
        Vec sb;
        base_ptr->log_density_and_score(x, sb);
        if (lam == 0.0) return sb;
        return Vec((1.0 - lam) * sb + lam * target.score(x));
      });
    } else {
      seq.score.push_back(ScoreFn{});
    }
    seq.step_sizes.push_back(init_step);
  }
  seq.sample0 = [base_ptr](RngStream& rng) { return base_ptr->sample(rng); };
  return seq;
}

std::vector<SampleMat> annealed_langevin(const AnnealSequence& seq, int L, int dim,
                                         std::uint64_t seed, bool adapt) {
  const int K = seq.levels() - 1;
  RngStream rng(seed, Stage::Baseline, 0);
  std::vector<SampleMat> out(K + 1);
  ChainState st = make_chain(seq.sample0(rng), seq.log_density[0], seq.step_sizes[0]);
  out[0].resize(L, dim);
  {
    StepSizeAdapter adapter;
    if (!adapt) adapter.freeze();
    run_adapted_chain(st, seq.log_density[0], seq.score[0] ? &seq.score[0] : nullptr, adapter, L,
                      rng, &out[0], 0);
  }
  for (int k = 1; k <= K; ++k) {
    st.log_density = seq.log_density[k](st.x);
    StepSizeAdapter adapter;
    if (!adapt) adapter.freeze();
    out[k].resize(L, dim);
    run_adapted_chain(st, seq.log_density[k], seq.score[k] ? &seq.score[k] : nullptr, adapter, L,
                      rng, &out[k], 0);
  }
  return out;
}

SmcResult smc(const AnnealSequence& seq, int particles, int steps_per_level, int dim,
              std::uint64_t seed, bool systematic_resampling) {
  if (particles < 2) throw InvalidArgument("smc needs at least two particles");
  const int K = seq.levels() - 1;
  SmcResult out;
  SampleMat x(particles, dim);
  {
    RngStream rng(seed, Stage::Baseline, 0);
    for (int n = 0; n < particles; ++n) x.row(n) = seq.sample0(rng).transpose();
  }
  std::vector<double> steps(K + 1, seq.step_sizes.empty() ? 0.05 : seq.step_sizes[0]);

  for (int k = 0; k < K; ++k) {
    // importance weights p_{k+1}/p_k at current particles
    Vec logw(particles);
    parallel_for(static_cast<std::size_t>(particles), [&](std::size_t n) {
      const Vec xn = x.row(n).transpose();
      logw[n] = seq.log_density[k + 1](xn) - seq.log_density[k](xn);
    });
    const double lse = logsumexp(logw);
    if (!std::isfinite(lse)) throw NumericError("smc: all importance weights vanished");
    out.log_z_increments.push_back(lse - std::log(static_cast<double>(particles)));
    Vec w = (logw.array() - lse).exp();

    // resample with replacement
    RngStream rng(seed, Stage::Baseline, 1000 + static_cast<std::uint64_t>(k));
    std::vector<int> idx(particles);
    if (systematic_resampling) {
      const double u0 = rng.uniform() / particles;
      double cum = w[0];
      int j = 0;
      for (int n = 0; n < particles; ++n) {
        const double u = u0 + static_cast<double>(n) / particles;
        while (u > cum && j + 1 < particles) cum += w[++j];
        idx[n] = j;
      }
    } else {
      for (int n = 0; n < particles; ++n) {
        const double u = rng.uniform();
        double cum = 0;
        int j = particles - 1;
        for (int m = 0; m < particles; ++m) {
          cum += w[m];
          if (u <= cum) {
            j = m;
            break;
          }
        }
        idx[n] = j;
      }
    }
    SampleMat resampled(particles, dim);
    for (int n = 0; n < particles; ++n) resampled.row(n) = x.row(idx[n]);
    x = std::move(resampled);

    // move with MALA (or RWMH) targeting p_{k+1}
    std::vector<double> adapted(particles, steps[k + 1]);
    parallel_for(static_cast<std::size_t>(particles), [&](std::size_t n) {
      RngStream prng(seed, Stage::Baseline,
                     (static_cast<std::uint64_t>(k) << 32) ^ (2000000 + n));
      ChainState st = make_chain(x.row(n).transpose(), seq.log_density[k + 1], steps[k + 1]);
      StepSizeAdapter adapter;
      run_adapted_chain(st, seq.log_density[k + 1],
                        seq.score[k + 1] ? &seq.score[k + 1] : nullptr, adapter, steps_per_level,
                        prng);
      x.row(n) = st.x.transpose();
      adapted[n] = st.step_size;
    });
    // carry the median adapted step to the next level
    std::vector<double> sorted = adapted;
    std::nth_element(sorted.begin(), sorted.begin() + particles / 2, sorted.end());
    if (k + 2 <= K) steps[k + 2] = sorted[particles / 2];
  }
  out.particles = std::move(x);
  return out;
}

ReplicaExchangeResult replica_exchange(const AnnealSequence& seq,
                                       const ReplicaExchangeOptions& opts, int dim,
                                       const std::vector<SampleMat>* init,
                                       const std::vector<double>* init_steps) {
  const int K = seq.levels() - 1;
  const int C = opts.chains;
  const int keep = std::max(0, opts.keep_last);

  // states[k] row c = chain c at level k
  std::vector<SampleMat> states(K + 1, SampleMat(C, dim));
  std::vector<Vec> log_dens(K + 1, Vec(C));
  if (init) {
    if (static_cast<int>(init->size()) != K + 1) throw InvalidArgument("re: bad init size");
    for (int k = 0; k <= K; ++k) states[k] = (*init)[k];
  } else {
    for (int k = 0; k <= K; ++k) {
      RngStream rng(opts.seed, Stage::Baseline, 5000000 + static_cast<std::uint64_t>(k));
      for (int c = 0; c < C; ++c) states[k].row(c) = seq.sample0(rng).transpose();
    }
  }
  parallel_for(static_cast<std::size_t>(K + 1), [&](std::size_t k) {
    for (int c = 0; c < C; ++c) log_dens[k][c] = seq.log_density[k](states[k].row(c).transpose());
  });

  std::vector<double> steps(K + 1);
  for (int k = 0; k <= K; ++k)
    steps[k] = init_steps ? (*init_steps)[k]
                          : (k < static_cast<int>(seq.step_sizes.size()) ? seq.step_sizes[k] : 0.05);
  std::vector<StepSizeAdapter> adapters(K + 1);

  ReplicaExchangeResult out;
  out.level_samples.assign(K + 1, SampleMat(static_cast<Eigen::Index>(C) * std::max(1, keep), dim));
  std::vector<int> kept(K + 1, 0);

  const int total = opts.warmup + opts.total_steps;
  int parity = 0;
  for (int m = 0; m < total; ++m) {
    const bool swap_round = ((m + 1) % opts.swap_every) == 0;
    if (swap_round) {
      RngStream rng(opts.seed, Stage::Baseline, 7000000 + static_cast<std::uint64_t>(m));
      for (int k = parity; k < K; k += 2) {
        for (int c = 0; c < C; ++c) {
          const Vec xa = states[k].row(c).transpose();
          const Vec xb = states[k + 1].row(c).transpose();
          const double la_b = seq.log_density[k](xb);
          const double lb_a = seq.log_density[k + 1](xa);
          const double log_p = la_b + lb_a - log_dens[k][c] - log_dens[k + 1][c];
          if (std::log(rng.uniform()) < log_p) {
            states[k].row(c) = xb.transpose();
            states[k + 1].row(c) = xa.transpose();
            log_dens[k][c] = la_b;
            log_dens[k + 1][c] = lb_a;
          }
        }
      }
      parity = 1 - parity;
    } else {
      parallel_for(static_cast<std::size_t>(K + 1), [&](std::size_t k) {
        for (int c = 0; c < C; ++c) {
          RngStream rng(opts.seed, Stage::Baseline,
                        (static_cast<std::uint64_t>(m) << 40) ^ (static_cast<std::uint64_t>(k) << 20) ^
                            static_cast<std::uint64_t>(c));
          ChainState st;
          st.x = states[k].row(c).transpose();
          st.log_density = log_dens[k][c];
          st.step_size = steps[k];
          const long before = st.accepted;
          if (seq.score[k]) {
            mala_step(st, seq.log_density[k], seq.score[k], rng);
          } else {
            rwmh_step(st, seq.log_density[k], rng);
          }
          if (opts.adapt && c == 0)
            steps[k] = adapters[k].observe(st.accepted > before, steps[k]);
          states[k].row(c) = st.x.transpose();
          log_dens[k][c] = st.log_density;
        }
      });
    }
    if (keep > 0 && m >= total - keep) {
      for (int k = 0; k <= K; ++k) {
        out.level_samples[k].middleRows(static_cast<Eigen::Index>(kept[k]) * C, C) = states[k];
        ++kept[k];
      }
    }
  }

  out.final_states = states;
  out.step_sizes = steps;
  if (keep == 0) out.level_samples = states;
  return out;
}

}  // namespace rds
