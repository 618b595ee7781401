#include "rds/ebm.hpp"

#include <cmath>
#include <iostream>
#include <istream>
#include <ostream>

#include "rds/io.hpp"
#include "rds/thread_pool.hpp"

namespace rds {

MultiLevelEbm::MultiLevelEbm(GaussianMixture base, NoisingSchedule sched, TimeGrid grid,
                             FourierMlp tilt, double t_lim)
    : base_(std::move(base)),
      sched_(std::move(sched)),
      grid_(std::move(grid)),
      tilt_(std::move(tilt)),
      t_lim_(t_lim) {
  if (tilt_.arch().x_dim != base_.dim() || tilt_.arch().out_dim != base_.dim())
    throw InvalidArgument("tilt net must map R^d to R^d");
  const int K = grid_.intervals();
  const double T = sched_.horizon();
  level_times_.resize(K + 1);
  for (int l = 0; l <= K; ++l) level_times_[l] = T - grid_.t[K - l];
  level_times_[0] = 0.0;
  diffused_.reserve(K + 1);
  for (int l = 0; l <= K; ++l) diffused_.push_back(base_.diffused(sched_, level_times_[l]));
  buffers_.assign(K + 1, SampleMat());
  buffer_steps_.assign(K + 1, 0.01);
}

int MultiLevelEbm::level_of_time(double t) const {
  for (int l = 0; l < levels(); ++l) {
    if (std::abs(level_times_[l] - t) < 1e-9) return l;
  }
  throw InvalidArgument("time does not match any EBM level");
}

double MultiLevelEbm::log_density(int level, const Vec& x) const {
  double ld = 0.0;
  if (gated_on(level)) ld = diffused_[level].log_density(x);
  SampleMat X(1, x.size());
  X.row(0) = x.transpose();
  return ld - tilt_energy(level_times_[level], X)[0];
}

Vec MultiLevelEbm::score(int level, const Vec& x) const {
  SampleMat X(1, x.size());
  X.row(0) = x.transpose();
  SampleMat out;
  score_batch(level, X, out);
  return out.row(0).transpose();
}

void MultiLevelEbm::score_batch(int level, const SampleMat& X, SampleMat& out) const {
  out = -tilt_input_grad(level_times_[level], X);
  if (gated_on(level)) {
    const GaussianMixture& mix = diffused_[level];
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      Vec s;
      mix.log_density_and_score(X.row(i).transpose(), s);
      out.row(i) += s.transpose();
    }
  }
}

Vec MultiLevelEbm::tilt_energy(double t, const SampleMat& X) const {
  const SampleMat v = tilt_.forward(t, X);
  return (v.array() * X.array()).rowwise().sum();
}

SampleMat MultiLevelEbm::tilt_input_grad(double t, const SampleMat& X) const {
  // d/dx [v(t,x)^T x] = v + (dv/dx)^T x
  FourierMlp::Tape tape;
  const SampleMat v = tilt_.forward_cached(t, X, tape);
  SampleMat gi;
  tilt_.backward(tape, X, nullptr, &gi);
  return gi + v;
}

void MultiLevelEbm::tilt_param_grad(double t, const SampleMat& X, const Vec& cot,
                                    Vec& grad) const {
  FourierMlp::Tape tape;
  tilt_.forward_cached(t, X, tape);
  SampleMat c = X;
  c.array().colwise() *= Eigen::Map<const Eigen::ArrayXd>(cot.data(), cot.size());
  tilt_.backward(tape, c, &grad, nullptr);
}

void MultiLevelEbm::save(std::ostream& os) const {
  os << "rds-ebm v1\n";
  os << to_string(sched_.kind()) << ' ' << format_double(sched_.horizon()) << ' ';
  switch (sched_.kind()) {
    case SchemeKind::PBM: os << format_double(sched_.pbm_sigma2()); break;
    case SchemeKind::VP:
      os << format_double(sched_.vp_sigma()) << ' ' << format_double(sched_.vp_beta_min()) << ' '
         << format_double(sched_.vp_beta_max());
      break;
    case SchemeKind::POUM: os << format_double(sched_.poum_beta()); break;
    case SchemeKind::GPBM: os << format_double(sched_.gpbm_zeta()); break;
  }
  os << '\n' << format_double(t_lim_) << '\n';
  os << grid_.t.size() << '\n';
  Vec t(grid_.t.size());
  for (size_t i = 0; i < grid_.t.size(); ++i) t[i] = grid_.t[i];
  write_row(os, t);
  base_.save(os);
  tilt_.save(os);
}

MultiLevelEbm MultiLevelEbm::load(std::istream& is) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != "rds-ebm" || version != "v1") throw InvalidArgument("not an ebm archive");
  std::string kind;
  double T = 0;
  is >> kind >> T;
  NoisingSchedule sched = [&]() -> NoisingSchedule {
    switch (scheme_from_string(kind)) {
      case SchemeKind::PBM: {
        double s2;
        is >> s2;
        return NoisingSchedule::pbm(s2, T);
      }
      case SchemeKind::VP: {
        double s, bmin, bmax;
        is >> s >> bmin >> bmax;
        return NoisingSchedule::vp(s, bmin, bmax, T);
      }
      case SchemeKind::POUM: {
        double b;
        is >> b;
        return NoisingSchedule::poum(b, T);
      }
      case SchemeKind::GPBM: {
        double z;
        is >> z;
        return NoisingSchedule::gpbm(z, T);
      }
    }
    throw InvalidArgument("bad scheme");
  }();
  double t_lim = 0;
  is >> t_lim;
  size_t n = 0;
  is >> n;
  TimeGrid grid;
  const Vec t = read_vec(is, static_cast<int>(n));
  grid.t.assign(t.data(), t.data() + t.size());
  GaussianMixture base = GaussianMixture::load(is);
  FourierMlp tilt = FourierMlp::load(is);
  return {std::move(base), std::move(sched), std::move(grid), std::move(tilt), t_lim};
}

SampleMat positive_samples(const SampleMat& dataset, const NoisingSchedule& sched, double tau,
                           int batch, RngStream& rng) {
  const auto kern = sched.forward_kernel(0.0, tau);
  const double sd = std::sqrt(kern.var);
  SampleMat out(batch, dataset.cols());
  for (int i = 0; i < batch; ++i) {
    const auto row = rng.uniform_int(static_cast<std::uint64_t>(dataset.rows()));
    out.row(i) = kern.mean_scale * dataset.row(static_cast<Eigen::Index>(row));
    for (Eigen::Index j = 0; j < dataset.cols(); ++j) out(i, j) += sd * rng.normal();
  }
  return out;
}

std::vector<SampleMat> negative_samples(MultiLevelEbm& ebm, int chains,
                                        const NegativeSampleOptions& opts) {
  const int K = ebm.levels() - 1;
  const int d = ebm.dim();

  // seed buffers from the exact tilt-zero mixtures on first use (gated-off
  // levels use the diffused mixture as well, the natural anchor below t_lim)
  for (int l = 0; l <= K; ++l) {
    if (ebm.buffers()[l].rows() != chains) {
      RngStream rng(opts.seed, Stage::EbmNegatives, 90000000ull + static_cast<std::uint64_t>(l));
      SampleMat init(chains, d);
      ebm.diffused(l).sample(rng, init);
      ebm.buffers()[l] = init;
    }
  }

  // anneal sequence runs most-noised first: sequence level j = ebm level K - j
  AnnealSequence seq;
  for (int j = 0; j <= K; ++j) {
    const int level = K - j;
    seq.log_density.push_back([&ebm, level](const Vec& x) { return ebm.log_density(level, x); });
    seq.score.push_back([&ebm, level](const Vec& x) { return ebm.score(level, x); });
  }
  seq.sample0 = [&ebm, K](RngStream& rng) { return ebm.diffused(K).sample(rng); };

  std::vector<SampleMat> init(K + 1);
  std::vector<double> init_steps(K + 1);
  for (int j = 0; j <= K; ++j) {
    init[j] = ebm.buffers()[K - j];
    init_steps[j] = ebm.buffer_steps()[K - j];
  }

  ReplicaExchangeOptions re;
  re.chains = chains;
  re.total_steps = opts.mcmc_steps;
  re.swap_every = opts.swap_every;
  re.keep_last = opts.keep_last;
  re.seed = opts.seed ^ (opts.round * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL);
  re.adapt = true;

  auto result = replica_exchange(seq, re, d, &init, &init_steps);

  std::vector<SampleMat> negatives(K + 1);
  for (int j = 0; j <= K; ++j) {
    const int level = K - j;
    negatives[level] = result.level_samples[j];
    ebm.buffers()[level] = result.final_states[j];
    ebm.buffer_steps()[level] = result.step_sizes[j];
  }
  return negatives;
}

EbmTrainResult train_multilevel_ebm(MultiLevelEbm& ebm, const SampleMat& dataset,
                                    const EbmTrainConfig& cfg) {
  if (dataset.cols() != ebm.dim()) throw InvalidArgument("dataset dimension mismatch");
  const int K = ebm.levels() - 1;
  const int B = cfg.batch_per_level;

  AdamState adam;
  adam.lr = cfg.lr;
  adam.reset(ebm.tilt().param_count());

  EbmTrainResult out;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    NegativeSampleOptions nopts = cfg.negatives;
    nopts.seed = cfg.seed;
    nopts.round = static_cast<std::uint64_t>(epoch);
    auto negatives = negative_samples(ebm, cfg.chains, nopts);

    Vec grad = Vec::Zero(ebm.tilt().param_count());
    double pos_energy = 0, neg_energy = 0;
    long pos_count = 0, neg_count = 0;

    // full energy -log p_l summed over rows
    auto energy_sum = [&](int l, const SampleMat& X) {
      double s = ebm.tilt_energy(ebm.level_time(l), X).sum();
      if (ebm.gated_on(l)) {
        for (Eigen::Index i = 0; i < X.rows(); ++i)
          s -= ebm.diffused(l).log_density(X.row(i).transpose());
      }
      return s;
    };

    for (int sub = 0; sub < cfg.grad_accum_steps; ++sub) {
      for (int l = 0; l <= K; ++l) {
        RngStream rng(cfg.seed, Stage::EbmPositives,
                      (static_cast<std::uint64_t>(epoch) << 32) ^
                          (static_cast<std::uint64_t>(sub) << 16) ^ static_cast<std::uint64_t>(l));
        const SampleMat pos = positive_samples(dataset, ebm.schedule(), ebm.level_time(l), B, rng);
        // d(-loglik)/dphi = E[dE(pos)] - E[dE(neg)]
        ebm.tilt_param_grad(ebm.level_time(l), pos,
                            Vec::Constant(pos.rows(), 1.0 / pos.rows()), grad);
        const SampleMat& neg = negatives[l];
        ebm.tilt_param_grad(ebm.level_time(l), neg,
                            Vec::Constant(neg.rows(), -1.0 / neg.rows()), grad);
        pos_energy += energy_sum(l, pos);
        pos_count += pos.rows();
        if (sub == 0) {
          neg_energy += energy_sum(l, neg);
          neg_count += neg.rows();
        }
      }
    }
    grad /= static_cast<double>(cfg.grad_accum_steps);

    const double gap = pos_energy / pos_count - neg_energy / neg_count;
    if (gap < -cfg.divergence_gap) {
      adam.lr *= 0.5;
      ++out.lr_halvings;
      std::cerr << "[ebm] warning: positive energy drifted " << -gap
                << " nats below negatives; halving learning rate to " << adam.lr << "\n";
    }

    adam_step(adam, ebm.tilt().params(), grad);

    out.trace.push_back({epoch, gap, grad.norm(), adam.lr});
    if (cfg.verbose && (epoch % 10 == 0 || epoch + 1 == cfg.epochs)) {
      std::cerr << "[ebm] epoch " << epoch << " gap " << gap << " |grad| " << grad.norm() << "\n";
    }
  }
  return out;
}

}  // namespace rds
