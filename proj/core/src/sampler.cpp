#include "rds/sampler.hpp"

#include <cmath>
#include <iostream>

#include "rds/io.hpp"
#include "rds/thread_pool.hpp"

namespace rds {

Vec ReferenceModel::score1(double t, const Vec& x) const {
  SampleMat X(1, x.size());
  X.row(0) = x.transpose();
  SampleMat out;
  score(t, X, out);
  return out.row(0).transpose();
}

// ---------------------------------------------------------------------------
// GmmReference

GmmReference::GmmReference(GaussianMixture gmm, NoisingSchedule sched, const TimeGrid& grid)
    : gmm_(std::move(gmm)), sched_(std::move(sched)) {
  const int K = grid.intervals();
  const double T = sched_.horizon();
  times_.push_back(0.0);
  diffused_.push_back(gmm_);
  for (int k = 0; k <= K; ++k) {
    const double t = T - grid.t[k];
    times_.push_back(t);
    diffused_.push_back(gmm_.diffused(sched_, t));
  }
}

const GaussianMixture& GmmReference::diffused_at(double t) const {
  for (size_t i = 0; i < times_.size(); ++i) {
    if (std::abs(times_[i] - t) < 1e-12) return diffused_[i];
  }
  throw InvalidArgument("reference score queried off the cached time grid");
}

void GmmReference::score(double t, const SampleMat& X, SampleMat& out) const {
  const GaussianMixture& mix = diffused_at(t);
  out.resize(X.rows(), X.cols());
  const Eigen::Index n = X.rows();
  const Eigen::Index chunk = 64;
  const std::size_t blocks = static_cast<std::size_t>((n + chunk - 1) / chunk);
  parallel_for(blocks, [&](std::size_t blk) {
    const Eigen::Index lo = static_cast<Eigen::Index>(blk) * chunk;
    const Eigen::Index hi = std::min(lo + chunk, n);
    Vec s;
    for (Eigen::Index i = lo; i < hi; ++i) {
      mix.log_density_and_score(X.row(i).transpose(), s);
      out.row(i) = s.transpose();
    }
  });
}

Vec GmmReference::score_jvp(double t, const Vec& x, const Vec& v) const {
  return diffused_at(t).score_jvp(x, v);
}

// ---------------------------------------------------------------------------
// EbmReference

void EbmReference::score(double t, const SampleMat& X, SampleMat& out) const {
  ebm_->score_batch(ebm_->level_of_time(t), X, out);
}

Vec EbmReference::score_jvp(double t, const Vec& x, const Vec& v) const {
  // central difference of the score along v
  const double eps = 1e-5 * (1.0 + x.norm()) / std::max(v.norm(), 1e-12);
  const int level = ebm_->level_of_time(t);
  return (ebm_->score(level, x + eps * v) - ebm_->score(level, x - eps * v)) / (2.0 * eps);
}

// ---------------------------------------------------------------------------
// Guidance

Guidance::Guidance(FourierMlp net, std::optional<FourierMlp> time_head, TargetPtr target)
    : net_(std::move(net)), time_head_(std::move(time_head)), target_(std::move(target)) {
  if (time_head_ && (!target_ || !target_->has_score()))
    throw InvalidArgument("target-informed head needs a target with a score");
}

Guidance Guidance::make(int dim, double t_scale, bool target_informed, TargetPtr target,
                        std::uint64_t seed) {
  MlpArch arch;
  arch.x_dim = dim;
  arch.out_dim = dim;
  arch.fourier = 64;
  arch.hidden = {64, 64, 64, 64};
  arch.t_scale = t_scale;
  FourierMlp net(arch);
  RngStream rng(seed, Stage::Train, 999);
  net.init_random(rng);

  std::optional<FourierMlp> head;
  if (target_informed) {
    MlpArch harch;
    harch.x_dim = 0;
    harch.out_dim = 1;
    harch.fourier = 16;
    harch.hidden = {64};
    harch.t_scale = t_scale;
    head.emplace(harch);
    head->init_random(rng);
  }
  return {std::move(net), std::move(head), std::move(target)};
}

int Guidance::param_count() const {
  return net_.param_count() + (time_head_ ? time_head_->param_count() : 0);
}

Vec Guidance::pack_params() const {
  Vec p(param_count());
  p.head(net_.param_count()) = net_.params();
  if (time_head_) p.tail(time_head_->param_count()) = time_head_->params();
  return p;
}

void Guidance::set_params(const Vec& p) {
  if (p.size() != param_count()) throw InvalidArgument("guidance parameter size mismatch");
  net_.params() = p.head(net_.param_count());
  if (time_head_) time_head_->params() = p.tail(time_head_->param_count());
}

SampleMat Guidance::eval(double t, const SampleMat& X) const {
  Tape tape;
  return eval_cached(t, X, tape);
}

SampleMat Guidance::eval_cached(double t, const SampleMat& X, Tape& tape) const {
  SampleMat out = net_.forward_cached(t, X, tape.net_tape);
  if (time_head_) {
    const SampleMat empty(1, 0);
    tape.head_value = time_head_->forward_cached(t, empty, tape.head_tape)(0, 0);
    tape.target_scores.resize(X.rows(), X.cols());
    parallel_for(static_cast<std::size_t>(X.rows()), [&](std::size_t i) {
      tape.target_scores.row(static_cast<Eigen::Index>(i)) =
          target_->score(X.row(static_cast<Eigen::Index>(i)).transpose()).transpose();
    });
    out += tape.head_value * tape.target_scores;
  }
  return out;
}

void Guidance::backward(const Tape& tape, const SampleMat& cot, Vec& grad,
                        SampleMat* grad_input) const {
  if (grad_input && time_head_)
    throw Unsupported("pathwise input gradients are not available with a target-informed head");
  Vec ng = Vec::Zero(net_.param_count());
  net_.backward(tape.net_tape, cot, &ng, grad_input);
  grad.head(net_.param_count()) += ng;
  if (time_head_) {
    const double c_cot = (cot.array() * tape.target_scores.array()).sum();
    SampleMat hc(1, 1);
    hc(0, 0) = c_cot;
    Vec hg = Vec::Zero(time_head_->param_count());
    time_head_->backward(tape.head_tape, hc, &hg, nullptr);
    grad.tail(time_head_->param_count()) += hg;
  }
}

void Guidance::save(std::ostream& os) const {
  os << "rds-guidance v1\n";
  os << (time_head_ ? 1 : 0) << '\n';
  net_.save(os);
  if (time_head_) time_head_->save(os);
}

Guidance Guidance::load(std::istream& is, TargetPtr target) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != "rds-guidance" || version != "v1") throw InvalidArgument("not a guidance checkpoint");
  int has_head = 0;
  is >> has_head;
  FourierMlp net = FourierMlp::load(is);
  std::optional<FourierMlp> head;
  if (has_head) head = FourierMlp::load(is);
  return {std::move(net), std::move(head), std::move(target)};
}

LossKind loss_from_string(const std::string& s) {
  if (s == "lv") return LossKind::LV;
  if (s == "kl") return LossKind::KL;
  throw InvalidArgument("unknown loss kind: " + s);
}

// ---------------------------------------------------------------------------
// Simulation

namespace {

void flag_invalid_rows(const SampleMat& m, std::vector<char>& valid, int& invalid_count) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (valid[i] && !m.row(i).allFinite()) {
      valid[i] = 0;
      ++invalid_count;
    }
  }
}

void zero_invalid_rows(SampleMat& m, const std::vector<char>& valid) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!valid[i]) m.row(i).setZero();
  }
}

TrajectoryBatch run_recursion(const RdsConfig& cfg, const Guidance& guidance,
                              const ReferenceModel* reference, int B,
                              std::uint64_t noise_index) {
  const int K = cfg.coeffs.size();
  const int d = cfg.target ? cfg.target->dim() : guidance.dim();
  TrajectoryBatch batch;
  batch.states.resize(K + 1);
  batch.noises.assign(K, SampleMat(B, d));
  batch.ref_scores.assign(K, SampleMat::Zero(B, d));
  batch.guidance.assign(K, SampleMat(B, d));
  batch.valid.assign(B, 1);

  // per-trajectory streams: the base draw then the K noise rows
  SampleMat y0(B, d);
  parallel_for(static_cast<std::size_t>(B), [&](std::size_t b) {
    RngStream rng(cfg.seed, Stage::Train,
                  noise_index * 0x100000000ull + static_cast<std::uint64_t>(b));
    y0.row(static_cast<Eigen::Index>(b)) = cfg.schedule.sample_base(d, rng).transpose();
    for (int k = 0; k < K; ++k) {
      for (int j = 0; j < d; ++j) batch.noises[k](static_cast<Eigen::Index>(b), j) = rng.normal();
    }
  });
  batch.states[0] = std::move(y0);

  for (int k = 0; k < K; ++k) {
    const double t = cfg.time_of_step(k);
    SampleMat& y = batch.states[k];
    if (reference) reference->score(t, y, batch.ref_scores[k]);
    batch.guidance[k] = guidance.eval(t, y);
    flag_invalid_rows(batch.ref_scores[k], batch.valid, batch.invalid_count);
    flag_invalid_rows(batch.guidance[k], batch.valid, batch.invalid_count);
    zero_invalid_rows(batch.ref_scores[k], batch.valid);
    zero_invalid_rows(batch.guidance[k], batch.valid);

    const double a = cfg.coeffs.a[k];
    const double b = cfg.coeffs.b[k];
    const double sc = std::sqrt(cfg.coeffs.c[k]);
    batch.states[k + 1] =
        a * y + b * (batch.ref_scores[k] + batch.guidance[k]) + sc * batch.noises[k];
    flag_invalid_rows(batch.states[k + 1], batch.valid, batch.invalid_count);
    zero_invalid_rows(batch.states[k + 1], batch.valid);
  }
  return batch;
}

}  // namespace

TrajectoryBatch simulate(const RdsConfig& cfg, const Guidance& guidance, int B,
                         std::uint64_t noise_index) {
  if (!cfg.reference) throw InvalidArgument("simulate needs a reference model");
  if (B < 0) throw InvalidArgument("negative batch size");
  TrajectoryBatch batch = run_recursion(cfg, guidance, cfg.reference.get(), B, noise_index);
  if (batch.invalid_count > 0) {
    std::cerr << "[rds] warning: " << batch.invalid_count
              << " trajectories went non-finite and were excluded\n";
  }
  return batch;
}

SampleMat valid_terminal_states(const TrajectoryBatch& batch) {
  const SampleMat& all = batch.states.back();
  int n = 0;
  for (char c : batch.valid) n += c;
  SampleMat out(n, all.cols());
  int j = 0;
  for (Eigen::Index i = 0; i < all.rows(); ++i) {
    if (batch.valid[i]) out.row(j++) = all.row(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-trajectory log Radon-Nikodym statistic (reverse direction)

namespace {

/// ell_b = sum_k w_k g^T (g_hat - g/2) + sum_k sqrt(w_k) g^T Z_k + rho(Y_K)
/// where g = theta's guidance at the stored states and g_hat is the
/// simulating guidance cached in the batch.
Vec log_rn_statistic(const TrajectoryBatch& batch, const Guidance& theta, const RdsConfig& cfg,
                     bool reuse_cached, std::vector<SampleMat>* theta_values) {
  const int K = batch.steps();
  const int B = batch.size();
  Vec ell = Vec::Zero(B);
  for (int k = 0; k < K; ++k) {
    const double w = cfg.coeffs.w[k];
    const double sw = std::sqrt(w);
    const SampleMat& ghat = batch.guidance[k];
    SampleMat g;
    if (reuse_cached) {
      g = ghat;
    } else {
      g = theta.eval(cfg.time_of_step(k), batch.states[k]);
    }
    ell += (w * (g.array() * (ghat - 0.5 * g).array()).rowwise().sum() +
            sw * (g.array() * batch.noises[k].array()).rowwise().sum())
               .matrix();
    if (theta_values) (*theta_values)[k] = std::move(g);
  }
  for (int b = 0; b < B; ++b) {
    if (!batch.valid[b]) continue;
    const Vec yk = batch.states[K].row(b).transpose();
    ell[b] += cfg.reference->log_gamma_ref(yk) - cfg.target->log_gamma(yk);
  }
  return ell;
}

Vec compact_valid(const Vec& v, const std::vector<char>& valid) {
  int n = 0;
  for (char c : valid) n += c;
  Vec out(n);
  int j = 0;
  for (int i = 0; i < v.size(); ++i) {
    if (valid[i]) out[j++] = v[i];
  }
  return out;
}

}  // namespace

Vec reverse_log_weights(const TrajectoryBatch& batch, const Guidance& theta, const RdsConfig& cfg,
                        int* dropped) {
  Vec ell = log_rn_statistic(batch, theta, cfg, /*reuse_cached=*/false, nullptr);
  if (dropped) *dropped = batch.invalid_count;
  return compact_valid(ell, batch.valid);
}

LossResult lv_loss(const TrajectoryBatch& batch, const Guidance& theta, const RdsConfig& cfg,
                   bool theta_matches_batch) {
  const int K = batch.steps();
  const int B = batch.size();
  int Bv = 0;
  for (char c : batch.valid) Bv += c;
  if (Bv < 2) throw InvalidArgument("lv_loss needs at least two valid trajectories");

  std::vector<SampleMat> g_values(K);
  Vec ell = log_rn_statistic(batch, theta, cfg, theta_matches_batch, &g_values);

  double mean = 0;
  for (int b = 0; b < B; ++b)
    if (batch.valid[b]) mean += ell[b];
  mean /= Bv;
  double var = 0;
  for (int b = 0; b < B; ++b)
    if (batch.valid[b]) var += (ell[b] - mean) * (ell[b] - mean);
  var /= (Bv - 1);

  // d var / d ell_b = 2 (ell_b - mean) / (Bv - 1); gradients flow only
  // through g^theta at the fixed visited states
  Vec grad = Vec::Zero(theta.param_count());
  Vec coef(B);
  for (int b = 0; b < B; ++b)
    coef[b] = batch.valid[b] ? 2.0 * (ell[b] - mean) / (Bv - 1) : 0.0;

  for (int k = 0; k < K; ++k) {
    const double w = cfg.coeffs.w[k];
    const double sw = std::sqrt(w);
    Guidance::Tape tape;
    theta.eval_cached(cfg.time_of_step(k), batch.states[k], tape);
    // d ell / d g = w (ghat - g) + sqrt(w) Z
    SampleMat cot =
        w * (batch.guidance[k] - g_values[k]) + sw * batch.noises[k];
    cot.array().colwise() *= Eigen::Map<const Eigen::ArrayXd>(coef.data(), B);
    theta.backward(tape, cot, grad, nullptr);
  }

  LossResult out;
  out.value = var;
  out.grad = std::move(grad);
  out.per_trajectory = compact_valid(ell, batch.valid);
  out.invalid_count = batch.invalid_count;
  return out;
}

LossResult kl_loss(const RdsConfig& cfg, const Guidance& theta, int B, std::uint64_t noise_index) {
  if (B < 1) throw InvalidArgument("kl_loss needs at least one trajectory");
  if (theta.target_informed())
    throw Unsupported("pathwise KL gradients are not available with a target-informed head");
  TrajectoryBatch batch = simulate(cfg, theta, B, noise_index);
  const int K = batch.steps();
  int Bv = 0;
  for (char c : batch.valid) Bv += c;
  if (Bv < 1) throw NumericError("kl_loss: all trajectories went non-finite");
  const int d = batch.states[0].cols();

  // value: mean of sum_k (w_k/2) |g|^2 + rho(Y_K)
  Vec ell = Vec::Zero(B);
  for (int k = 0; k < K; ++k) {
    ell += (0.5 * cfg.coeffs.w[k] * batch.guidance[k].array().square().rowwise().sum()).matrix();
  }
  for (int b = 0; b < B; ++b) {
    if (!batch.valid[b]) continue;
    const Vec yk = batch.states[K].row(b).transpose();
    ell[b] += cfg.reference->log_gamma_ref(yk) - cfg.target->log_gamma(yk);
  }
  double value = 0;
  for (int b = 0; b < B; ++b)
    if (batch.valid[b]) value += ell[b];
  value /= Bv;

  // pathwise adjoint through the full recursion
  Vec grad = Vec::Zero(theta.param_count());
  SampleMat lambda(B, d);
  for (int b = 0; b < B; ++b) {
    if (!batch.valid[b]) {
      lambda.row(b).setZero();
      continue;
    }
    const Vec yk = batch.states[K].row(b).transpose();
    lambda.row(b) =
        (cfg.reference->score1(0.0, yk) - cfg.target->score(yk)).transpose() / Bv;
  }
  for (int k = K - 1; k >= 0; --k) {
    const double t = cfg.time_of_step(k);
    const double a = cfg.coeffs.a[k];
    const double b = cfg.coeffs.b[k];
    const double w = cfg.coeffs.w[k];
    Guidance::Tape tape;
    theta.eval_cached(t, batch.states[k], tape);
    SampleMat cot = b * lambda + (w / Bv) * batch.guidance[k];
    for (int i = 0; i < B; ++i)
      if (!batch.valid[i]) cot.row(i).setZero();
    SampleMat gi;
    theta.backward(tape, cot, grad, &gi);
    SampleMat next(B, d);
    parallel_for(static_cast<std::size_t>(B), [&](std::size_t i) {
      const Eigen::Index bi = static_cast<Eigen::Index>(i);
      if (!batch.valid[bi]) {
        next.row(bi).setZero();
        return;
      }
      const Vec jvp = cfg.reference->score_jvp(t, batch.states[k].row(bi).transpose(),
                                               lambda.row(bi).transpose());
      next.row(bi) = a * lambda.row(bi) + b * jvp.transpose() + gi.row(bi);
    });
    lambda = std::move(next);
  }

  LossResult out;
  out.value = value;
  out.grad = std::move(grad);
  out.per_trajectory = compact_valid(ell, batch.valid);
  out.invalid_count = batch.invalid_count;
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

TrainResult train_generic(
    int iterations, int batch, double lr, const TrainOptions& opts, Guidance initial,
    const std::function<LossResult(const Guidance&, std::uint64_t)>& step_loss,
    const std::function<SampleMat(const Guidance&, int, std::uint64_t)>& fresh_samples,
    const TargetPtr& target) {
  TrainResult result;
  result.guidance = std::move(initial);
  AdamState adam;
  adam.lr = lr;
  adam.reset(result.guidance.param_count());

  int consecutive_nan = 0;
  for (int n = 0; n < iterations; ++n) {
    LossResult loss = step_loss(result.guidance, static_cast<std::uint64_t>(n));
    if (!std::isfinite(loss.value)) {
      if (++consecutive_nan >= 2) {
        result.aborted = true;
        result.abort_reason = "loss was non-finite on two consecutive iterations";
        return result;
      }
    } else {
      consecutive_nan = 0;
      Vec params = result.guidance.pack_params();
      adam_step(adam, params, loss.grad);
      result.guidance.set_params(params);
    }

    TrainTraceRow row;
    row.iteration = n;
    row.loss = loss.value;
    row.grad_norm = loss.grad.allFinite() ? loss.grad.norm() : std::nan("");
    row.invalid = loss.invalid_count;
    if (opts.mode_weight_every > 0 && target &&
        (n % opts.mode_weight_every == 0 || n + 1 == iterations)) {
      const SampleMat fresh = fresh_samples(result.guidance, opts.mode_weight_samples,
                                            (1ull << 40) + static_cast<std::uint64_t>(n));
      row.mode_weights = estimate_mode_weight(fresh, *target);
    }
    if (opts.verbose && (n % 64 == 0 || n + 1 == iterations)) {
      std::cerr << "[train] iter " << n << " loss " << loss.value << " |grad| " << row.grad_norm
                << "\n";
    }
    result.trace.push_back(std::move(row));
  }
  return result;
}

}  // namespace

TrainResult train_rds(const RdsConfig& cfg, Guidance initial, const TrainOptions& opts) {
  auto step_loss = [&cfg](const Guidance& g, std::uint64_t n) {
    if (cfg.loss == LossKind::LV) {
      TrajectoryBatch batch = simulate(cfg, g, cfg.batch, n);
      return lv_loss(batch, g, cfg, /*theta_matches_batch=*/true);
    }
    return kl_loss(cfg, g, cfg.batch, n);
  };
  auto fresh = [&cfg](const Guidance& g, int n, std::uint64_t idx) {
    return valid_terminal_states(simulate(cfg, g, n, idx));
  };
  return train_generic(cfg.iterations, cfg.batch, opts.lr, opts, std::move(initial), step_loss,
                       fresh, cfg.target);
}

// ---------------------------------------------------------------------------
// DIS

TrajectoryBatch dis_simulate(const RdsConfig& cfg, const Guidance& state_score, int B,
                             std::uint64_t noise_index) {
  if (cfg.schedule.kind() != SchemeKind::VP)
    throw Unsupported("the DIS recursion is defined for the VP schedule only");
  if (cfg.coeffs.integrator != Integrator::EM)
    throw Unsupported("the DIS recursion uses EM coefficients");
  return run_recursion(cfg, state_score, nullptr, B, noise_index);
}

LossResult dis_loss(const TrajectoryBatch& batch, const Guidance& state_score,
                    const RdsConfig& cfg, LossKind kind) {
  const int K = batch.steps();
  const int B = batch.size();
  int Bv = 0;
  for (char c : batch.valid) Bv += c;
  if (kind == LossKind::LV && Bv < 2)
    throw InvalidArgument("lv dis_loss needs at least two valid trajectories");
  if (Bv < 1) throw InvalidArgument("dis_loss: empty batch");
  const double T = cfg.schedule.horizon();
  const double s2 = cfg.schedule.vp_sigma() * cfg.schedule.vp_sigma();
  const int d = batch.states[0].cols();

  // ell_b = log pi_base(Y_0) - log gamma(Y_K)
  //         + sum_k d/2 log(beta_{k+1}/beta_k) - 1/2 |eps_k|^2 + 1/2 |eps'_k|^2
  Vec ell(B);
  for (int b = 0; b < B; ++b) {
    const Vec y0 = batch.states[0].row(b).transpose();
    const Vec yk = batch.states[K].row(b).transpose();
    ell[b] = -0.5 * d * std::log(2.0 * M_PI * s2) - 0.5 * y0.squaredNorm() / s2;
    if (batch.valid[b]) ell[b] -= cfg.target->log_gamma(yk);
  }

  std::vector<SampleMat> eps(K), s_values(K);
  std::vector<double> sqrt_bd(K);
  for (int k = 0; k < K; ++k) {
    const double bk = cfg.schedule.beta(T - cfg.grid.t[k]);
    const double bk1 = cfg.schedule.beta(T - cfg.grid.t[k + 1]);
    const double dk = cfg.grid.delta(k);
    const double fk1 = cfg.schedule.f(T - cfg.grid.t[k + 1]);
    sqrt_bd[k] = std::sqrt(bk * dk);
    // eps_k: residual of the theta-kernel; equals Z_k + sqrt(beta dk)(s_hat - s)
    s_values[k] = state_score.eval(cfg.time_of_step(k), batch.states[k]);
    eps[k] = batch.noises[k] + sqrt_bd[k] * (batch.guidance[k] - s_values[k]);
    // eps'_k: residual of the exact-noising reverse kernel, theta-free
    const SampleMat epsp =
        (batch.states[k] - batch.states[k + 1] - fk1 * dk * batch.states[k + 1]) /
        std::sqrt(bk1 * dk);
    ell += (0.5 * d * std::log(bk1 / bk) - 0.5 * eps[k].array().square().rowwise().sum() +
            0.5 * epsp.array().square().rowwise().sum())
               .matrix();
  }

  LossResult out;
  out.invalid_count = batch.invalid_count;
  out.per_trajectory = compact_valid(ell, batch.valid);
  Vec grad = Vec::Zero(state_score.param_count());

  if (kind == LossKind::LV) {
    double mean = 0;
    for (int b = 0; b < B; ++b)
      if (batch.valid[b]) mean += ell[b];
    mean /= Bv;
    double var = 0;
    for (int b = 0; b < B; ++b)
      if (batch.valid[b]) var += (ell[b] - mean) * (ell[b] - mean);
    out.value = var / (Bv - 1);
    Vec coef(B);
    for (int b = 0; b < B; ++b)
      coef[b] = batch.valid[b] ? 2.0 * (ell[b] - mean) / (Bv - 1) : 0.0;
    for (int k = 0; k < K; ++k) {
      Guidance::Tape tape;
      state_score.eval_cached(cfg.time_of_step(k), batch.states[k], tape);
      // d ell / d s^theta(Y_k) = sqrt(beta dk) eps_k
      SampleMat cot = sqrt_bd[k] * eps[k];
      cot.array().colwise() *= Eigen::Map<const Eigen::ArrayXd>(coef.data(), B);
      state_score.backward(tape, cot, grad, nullptr);
    }
    out.grad = std::move(grad);
    return out;
  }
  // KL value is exact; its pathwise gradient is not provided for this
  // baseline family (training uses LV, matching the experiments).
  double mean = 0;
  for (int b = 0; b < B; ++b)
    if (batch.valid[b]) mean += ell[b];
  out.value = mean / Bv;
  out.grad = Vec::Constant(state_score.param_count(), std::nan(""));
  return out;
}

TrainResult train_dis(const RdsConfig& cfg, Guidance initial, const TrainOptions& opts) {
  if (cfg.loss == LossKind::KL)
    throw Unsupported("DIS training is provided with the LV objective only");
  auto step_loss = [&cfg](const Guidance& g, std::uint64_t n) {
    TrajectoryBatch batch = dis_simulate(cfg, g, cfg.batch, n);
    return dis_loss(batch, g, cfg, LossKind::LV);
  };
  auto fresh = [&cfg](const Guidance& g, int n, std::uint64_t idx) {
    return valid_terminal_states(dis_simulate(cfg, g, n, idx));
  };
  return train_generic(cfg.iterations, cfg.batch, opts.lr, opts, std::move(initial), step_loss,
                       fresh, cfg.target);
}

// ---------------------------------------------------------------------------
// CMCD

namespace {

// grad log pi_t along the geometric path, lam = t / T
void cmcd_path_score(const CmcdConfig& cfg, double lam, const SampleMat& X, SampleMat& out) {
  out.resize(X.rows(), X.cols());
  parallel_for(static_cast<std::size_t>(X.rows()), [&](std::size_t i) {
    const Eigen::Index bi = static_cast<Eigen::Index>(i);
    const Vec x = X.row(bi).transpose();
    Vec sb;
    cfg.base.log_density_and_score(x, sb);
    if (lam > 0.0) {
      out.row(bi) = ((1.0 - lam) * sb + lam * cfg.target->score(x)).transpose();
    } else {
      out.row(bi) = sb.transpose();
    }
  });
}

}  // namespace

TrajectoryBatch cmcd_simulate(const CmcdConfig& cfg, const Guidance& control, int B,
                              std::uint64_t noise_index) {
  if (!cfg.target->has_score()) throw Unsupported("cmcd needs a target score");
  const int K = cfg.grid.intervals();
  const double T = cfg.grid.t.back();
  const int d = cfg.target->dim();
  const double s2 = cfg.sigma * cfg.sigma;
  TrajectoryBatch batch;
  batch.states.resize(K + 1);
  batch.noises.assign(K, SampleMat(B, d));
  batch.ref_scores.assign(K, SampleMat(B, d));
  batch.guidance.assign(K, SampleMat(B, d));
  batch.valid.assign(B, 1);

  SampleMat y0(B, d);
  parallel_for(static_cast<std::size_t>(B), [&](std::size_t b) {
    RngStream rng(cfg.seed, Stage::Train,
                  noise_index * 0x100000000ull + static_cast<std::uint64_t>(b));
    y0.row(static_cast<Eigen::Index>(b)) = cfg.base.sample(rng).transpose();
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < d; ++j) batch.noises[k](static_cast<Eigen::Index>(b), j) = rng.normal();
  });
  batch.states[0] = std::move(y0);

  for (int k = 0; k < K; ++k) {
    const double dk = cfg.grid.delta(k);
    SampleMat& y = batch.states[k];
    cmcd_path_score(cfg, cfg.grid.t[k] / T, y, batch.ref_scores[k]);
    batch.guidance[k] = control.eval(cfg.grid.t[k], y);
    flag_invalid_rows(batch.ref_scores[k], batch.valid, batch.invalid_count);
    flag_invalid_rows(batch.guidance[k], batch.valid, batch.invalid_count);
    zero_invalid_rows(batch.ref_scores[k], batch.valid);
    zero_invalid_rows(batch.guidance[k], batch.valid);
    batch.states[k + 1] = y + 0.5 * s2 * dk * (batch.ref_scores[k] + batch.guidance[k]) +
                          cfg.sigma * std::sqrt(dk) * batch.noises[k];
    flag_invalid_rows(batch.states[k + 1], batch.valid, batch.invalid_count);
    zero_invalid_rows(batch.states[k + 1], batch.valid);
  }
  return batch;
}

LossResult cmcd_loss(const TrajectoryBatch& batch, const Guidance& control, const CmcdConfig& cfg,
                     LossKind kind) {
  const int K = batch.steps();
  const int B = batch.size();
  int Bv = 0;
  for (char c : batch.valid) Bv += c;
  if (kind == LossKind::LV && Bv < 2)
    throw InvalidArgument("lv cmcd_loss needs at least two valid trajectories");
  if (Bv < 1) throw InvalidArgument("cmcd_loss: empty batch");
  const double T = cfg.grid.t.back();
  const double s2 = cfg.sigma * cfg.sigma;

  // h^theta at every state, including Y_K (it enters u_{K-1})
  std::vector<SampleMat> h(K + 1);
  for (int k = 0; k <= K; ++k) h[k] = control.eval(cfg.grid.t[k], batch.states[k]);
  // path scores at Y_{k+1} for u_k
  std::vector<SampleMat> path_next(K);
  for (int k = 0; k < K; ++k)
    cmcd_path_score(cfg, cfg.grid.t[k + 1] / T, batch.states[k + 1], path_next[k]);

  Vec ell(B);
  for (int b = 0; b < B; ++b) {
    const Vec y0 = batch.states[0].row(b).transpose();
    const Vec yk = batch.states[K].row(b).transpose();
    ell[b] = cfg.base.log_density(y0);
    if (batch.valid[b]) ell[b] -= cfg.target->log_gamma(yk);
  }

  std::vector<SampleMat> u(K), eps(K);
  std::vector<double> w(K);
  for (int k = 0; k < K; ++k) {
    const double dk = cfg.grid.delta(k);
    w[k] = s2 * dk / 4.0;
    const double sw = std::sqrt(w[k]);
    u[k] = batch.ref_scores[k] + path_next[k] + h[k] - h[k + 1];
    // residual of the theta-kernel; equals Z_k + sqrt(w)(h_hat - h) at theta_hat
    eps[k] = batch.noises[k] + sw * (batch.guidance[k] - h[k]);
    ell += (0.5 * w[k] * u[k].array().square().rowwise().sum() +
            sw * (u[k].array() * eps[k].array()).rowwise().sum())
               .matrix();
  }

  LossResult out;
  out.invalid_count = batch.invalid_count;
  out.per_trajectory = compact_valid(ell, batch.valid);
  Vec grad = Vec::Zero(control.param_count());

  if (kind == LossKind::LV) {
    double mean = 0;
    for (int b = 0; b < B; ++b)
      if (batch.valid[b]) mean += ell[b];
    mean /= Bv;
    double var = 0;
    for (int b = 0; b < B; ++b)
      if (batch.valid[b]) var += (ell[b] - mean) * (ell[b] - mean);
    out.value = var / (Bv - 1);
    Vec coef(B);
    for (int b = 0; b < B; ++b)
      coef[b] = batch.valid[b] ? 2.0 * (ell[b] - mean) / (Bv - 1) : 0.0;
    // dl/dh_j = [j<K] (w_j u_j + sqrt(w_j) eps_j - w_j u_j)            (u_j and eps_j terms)
    //          - [j>=1] (w_{j-1} u_{j-1} + sqrt(w_{j-1}) eps_{j-1})    (u_{j-1} term)
    for (int j = 0; j <= K; ++j) {
      SampleMat cot = SampleMat::Zero(B, batch.states[0].cols());
      if (j < K) cot += std::sqrt(w[j]) * eps[j];
      if (j >= 1) cot -= w[j - 1] * u[j - 1] + std::sqrt(w[j - 1]) * eps[j - 1];
      cot.array().colwise() *= Eigen::Map<const Eigen::ArrayXd>(coef.data(), B);
      Guidance::Tape tape;
      control.eval_cached(cfg.grid.t[j], batch.states[j], tape);
      control.backward(tape, cot, grad, nullptr);
    }
    out.grad = std::move(grad);
    return out;
  }
  double mean = 0;
  for (int b = 0; b < B; ++b)
    if (batch.valid[b]) mean += ell[b];
  out.value = mean / Bv;
  out.grad = Vec::Constant(control.param_count(), std::nan(""));
  return out;
}

TrainResult train_cmcd(const CmcdConfig& cfg, Guidance initial, const TrainOptions& opts) {
  auto step_loss = [&cfg](const Guidance& g, std::uint64_t n) {
    TrajectoryBatch batch = cmcd_simulate(cfg, g, cfg.batch, n);
    return cmcd_loss(batch, g, cfg, LossKind::LV);
  };
  auto fresh = [&cfg](const Guidance& g, int n, std::uint64_t idx) {
    return valid_terminal_states(cmcd_simulate(cfg, g, n, idx));
  };
  return train_generic(cfg.iterations, cfg.batch, opts.lr, opts, std::move(initial), step_loss,
                       fresh, cfg.target);
}

}  // namespace rds
