#include "rds/gmm.hpp"

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "rds/io.hpp"

namespace rds {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

GaussianMixture::GaussianMixture(Vec weights, std::vector<Vec> means, std::vector<Vec> diag_covs)
    : weights_(std::move(weights)),
      means_(std::move(means)),
      diag_covs_(std::move(diag_covs)),
      cov_type_(CovType::Diag) {
  rebuild_cache();
}

GaussianMixture::GaussianMixture(Vec weights, std::vector<Vec> means, std::vector<Mat> full_covs)
    : weights_(std::move(weights)),
      means_(std::move(means)),
      full_covs_(std::move(full_covs)),
      cov_type_(CovType::Full) {
  rebuild_cache();
}

Mat GaussianMixture::cov_as_matrix(int j) const {
  if (cov_type_ == CovType::Full) return full_covs_[j];
  return diag_covs_[j].asDiagonal();
}

void GaussianMixture::rebuild_cache() {
  const int J = components();
  const int d = dim();
  if (J == 0) throw InvalidArgument("mixture needs at least one component");
  if (std::abs(weights_.sum() - 1.0) > 1e-9 || weights_.minCoeff() < 0)
    throw InvalidArgument("mixture weights must lie on the simplex");
  if (cov_type_ == CovType::Full) {
    cache_.resize(J);
    for (int j = 0; j < J; ++j) {
      cache_[j].llt.compute(full_covs_[j]);
      if (cache_[j].llt.info() != Eigen::Success)
        throw NumericError("mixture covariance is not positive definite");
      const double log_det =
          2.0 * cache_[j].llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      cache_[j].log_norm = -0.5 * d * kLog2Pi - 0.5 * log_det;
    }
  } else {
    diag_log_norm_.resize(J);
    for (int j = 0; j < J; ++j) {
      if (diag_covs_[j].minCoeff() <= 0)
        throw NumericError("mixture covariance is not positive definite");
      diag_log_norm_[j] = -0.5 * d * kLog2Pi - 0.5 * diag_covs_[j].array().log().sum();
    }
  }
}

double GaussianMixture::component_log_density(int j, const Vec& x) const {
  return comp_log_density(j, x);
}

double GaussianMixture::comp_log_density(int j, const Vec& x) const {
  if (cov_type_ == CovType::Full) {
    const Vec r = x - means_[j];
    const Vec y = cache_[j].llt.matrixL().solve(r);
    return cache_[j].log_norm - 0.5 * y.squaredNorm();
  }
  const Vec r = x - means_[j];
  return diag_log_norm_[j] - 0.5 * (r.array().square() / diag_covs_[j].array()).sum();
}

double GaussianMixture::log_density(const Vec& x) const {
  const int J = components();
  Vec lp(J);
  for (int j = 0; j < J; ++j) lp[j] = std::log(weights_[j]) + comp_log_density(j, x);
  return logsumexp(lp);
}

double GaussianMixture::log_density_and_score(const Vec& x, Vec& score) const {
  const int J = components();
  Vec lp(J);
  std::vector<Vec> u(J);  // Sigma_j^{-1} (m_j - x)
  for (int j = 0; j < J; ++j) {
    lp[j] = std::log(weights_[j]) + comp_log_density(j, x);
    if (cov_type_ == CovType::Full) {
      u[j] = cache_[j].llt.solve(means_[j] - x);
    } else {
      u[j] = (means_[j] - x).array() / diag_covs_[j].array();
    }
  }
  const double ld = logsumexp(lp);
  score.setZero(dim());
  for (int j = 0; j < J; ++j) score += std::exp(lp[j] - ld) * u[j];
  return ld;
}

Vec GaussianMixture::score(const Vec& x) const {
  Vec s;
  log_density_and_score(x, s);
  return s;
}

Vec GaussianMixture::score_jvp(const Vec& x, const Vec& v) const {
  // Hessian of log density: sum_j r_j (u_j u_j^T - Sigma_j^{-1}) - s s^T
  const int J = components();
  Vec lp(J);
  std::vector<Vec> u(J);
  for (int j = 0; j < J; ++j) {
    lp[j] = std::log(weights_[j]) + comp_log_density(j, x);
    if (cov_type_ == CovType::Full) {
      u[j] = cache_[j].llt.solve(means_[j] - x);
    } else {
      u[j] = (means_[j] - x).array() / diag_covs_[j].array();
    }
  }
  const double ld = logsumexp(lp);
  Vec s = Vec::Zero(dim());
  Vec out = Vec::Zero(dim());
  for (int j = 0; j < J; ++j) {
    const double rj = std::exp(lp[j] - ld);
    s += rj * u[j];
    out += rj * u[j].dot(v) * u[j];
    if (cov_type_ == CovType::Full) {
      out -= rj * cache_[j].llt.solve(v);
    } else {
      out -= rj * (v.array() / diag_covs_[j].array()).matrix();
    }
  }
  out -= s.dot(v) * s;
  return out;
}

Vec GaussianMixture::sample(RngStream& rng) const {
  const int J = components();
  int j = J - 1;
  double u = rng.uniform();
  double acc = 0;
  for (int i = 0; i < J; ++i) {
    acc += weights_[i];
    if (u <= acc) {
      j = i;
      break;
    }
  }
  const Vec z = rng.normal_vec(dim());
  if (cov_type_ == CovType::Full) {
    return means_[j] + cache_[j].llt.matrixL() * z;
  }
  return means_[j].array() + diag_covs_[j].array().sqrt() * z.array();
}

void GaussianMixture::sample(RngStream& rng, Eigen::Ref<SampleMat> out) const {
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = sample(rng).transpose();
}

int GaussianMixture::nearest_component(const Vec& x) const {
  int best = 0;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < components(); ++j) {
    const double lp = comp_log_density(j, x);
    if (lp > best_lp) {
      best_lp = lp;
      best = j;
    }
  }
  return best;
}

Vec GaussianMixture::mixture_mean() const {
  Vec m = Vec::Zero(dim());
  for (int j = 0; j < components(); ++j) m += weights_[j] * means_[j];
  return m;
}

Vec GaussianMixture::mixture_diag_var() const {
  const Vec m = mixture_mean();
  Vec v = Vec::Zero(dim());
  for (int j = 0; j < components(); ++j) {
    const Vec dc = cov_type_ == CovType::Full ? full_covs_[j].diagonal() : diag_covs_[j];
    v.array() += weights_[j] * (dc.array() + (means_[j] - m).array().square());
  }
  return v;
}

GaussianMixture GaussianMixture::diffused(const NoisingSchedule& sched, double t) const {
  const auto kern = sched.forward_kernel(0.0, t);
  const double s = sched.S(t);
  const double s2 = s * s;
  std::vector<Vec> means(components());
  for (int j = 0; j < components(); ++j) means[j] = s * means_[j];
  if (cov_type_ == CovType::Full) {
    std::vector<Mat> covs(components());
    for (int j = 0; j < components(); ++j) {
      covs[j] = s2 * full_covs_[j];
      covs[j].diagonal().array() += kern.var;
    }
    return {weights_, std::move(means), std::move(covs)};
  }
  std::vector<Vec> covs(components());
  for (int j = 0; j < components(); ++j) covs[j] = (s2 * diag_covs_[j]).array() + kern.var;
  return {weights_, std::move(means), std::move(covs)};
}

void GaussianMixture::save(std::ostream& os) const {
  os << "rds-gmm v1\n";
  os << components() << ' ' << dim() << ' ' << (cov_type_ == CovType::Diag ? "diag" : "full")
     << '\n';
  for (int j = 0; j < components(); ++j) {
    os << format_double(weights_[j]) << '\n';
    write_row(os, means_[j]);
    if (cov_type_ == CovType::Diag) {
      write_row(os, diag_covs_[j]);
    } else {
      for (int r = 0; r < dim(); ++r) write_row(os, full_covs_[j].row(r).transpose());
    }
  }
}

GaussianMixture GaussianMixture::load(std::istream& is) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != "rds-gmm" || version != "v1") throw InvalidArgument("not a gmm model file");
  int J = 0, d = 0;
  std::string cov;
  is >> J >> d >> cov;
  if (!is || J < 1 || d < 1) throw InvalidArgument("corrupt gmm header");
  Vec w(J);
  std::vector<Vec> means(J);
  if (cov == "diag") {
    std::vector<Vec> covs(J);
    for (int j = 0; j < J; ++j) {
      is >> w[j];
      means[j] = read_vec(is, d);
      covs[j] = read_vec(is, d);
    }
    if (!is) throw InvalidArgument("corrupt gmm payload");
    return {w, std::move(means), std::move(covs)};
  }
  if (cov != "full") throw InvalidArgument("unknown gmm covariance type: " + cov);
  std::vector<Mat> covs(J);
  for (int j = 0; j < J; ++j) {
    is >> w[j];
    means[j] = read_vec(is, d);
    covs[j].resize(d, d);
    for (int r = 0; r < d; ++r) covs[j].row(r) = read_vec(is, d).transpose();
  }
  if (!is) throw InvalidArgument("corrupt gmm payload");
  return {w, std::move(means), std::move(covs)};
}

GaussianMixture fit_gaussian_ml(const SampleMat& samples, CovType cov_type, double reg) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n <= d) throw InvalidArgument("fit_gaussian_ml needs more samples than dimensions");
  const Vec mean = samples.colwise().mean().transpose();
  Vec w = Vec::Ones(1);
  std::vector<Vec> means{mean};
  if (cov_type == CovType::Diag) {
    Vec var = ((samples.rowwise() - mean.transpose()).array().square().colwise().sum() /
               static_cast<double>(n))
                  .transpose();
    const double floor = reg * std::max(var.mean(), 1e-300);
    var.array() += floor;
    return {w, std::move(means), std::vector<Vec>{var}};
  }
  Mat centered = samples.rowwise() - mean.transpose();
  Mat cov = centered.transpose() * centered / static_cast<double>(n);
  const double floor = reg * std::max(cov.diagonal().mean(), 1e-300);
  cov.diagonal().array() += floor;
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw NumericError("ml covariance is rank deficient even after regularization");
  return {w, std::move(means), std::vector<Mat>{cov}};
}

namespace {

// k-means++ seeding followed by a handful of Lloyd iterations.
std::vector<Vec> kmeans_init(const SampleMat& x, int J, RngStream& rng) {
  const Eigen::Index n = x.rows();
  std::vector<Vec> centers;
  centers.reserve(J);
  centers.push_back(x.row(static_cast<Eigen::Index>(rng.uniform_int(n))).transpose());
  Vec d2 = (x.rowwise() - centers[0].transpose()).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < J) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total;
      double acc = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (u <= acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.uniform_int(n));
    }
    centers.push_back(x.row(pick).transpose());
    d2 = d2.cwiseMin((x.rowwise() - centers.back().transpose()).rowwise().squaredNorm());
  }
  // a few Lloyd sweeps tighten the seeds
  std::vector<int> assign(n);
  for (int sweep = 0; sweep < 5; ++sweep) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < J; ++j) {
        const double dist = (x.row(i).transpose() - centers[j]).squaredNorm();
        if (dist < best) {
          best = dist;
          assign[i] = j;
        }
      }
    }
    for (int j = 0; j < J; ++j) {
      Vec sum = Vec::Zero(x.cols());
      int count = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (assign[i] == j) {
          sum += x.row(i).transpose();
          ++count;
        }
      }
      if (count > 0) centers[j] = sum / count;
    }
  }
  return centers;
}

struct EmState {
  Vec w;
  std::vector<Vec> means;
  std::vector<Vec> dcov;
  std::vector<Mat> fcov;
};

GaussianMixture to_mixture(const EmState& st, CovType type) {
  if (type == CovType::Diag) return {st.w, st.means, st.dcov};
  return {st.w, st.means, st.fcov};
}

}  // namespace

EmFitResult fit_gmm_em(const SampleMat& samples, int J_request, const EmOptions& opts) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (J_request < 1) throw InvalidArgument("fit_gmm_em requires J >= 1");
  if (n < J_request) throw InvalidArgument("fit_gmm_em needs at least J samples");
  if (J_request == 1) {
    EmFitResult res;
    res.model = fit_gaussian_ml(samples, opts.cov_type, opts.reg);
    Vec s(1);
    double ll = 0;
    for (Eigen::Index i = 0; i < n; ++i) ll += res.model.log_density(samples.row(i).transpose());
    res.log_likelihood = ll / static_cast<double>(n);
    res.iterations = 1;
    return res;
  }

  EmFitResult best;
  best.log_likelihood = -std::numeric_limits<double>::infinity();
  bool have_best = false;

  for (int restart = 0; restart < std::max(1, opts.restarts); ++restart) {
    int J = J_request;
    RngStream rng(opts.seed, Stage::FitReference, static_cast<std::uint64_t>(restart));
    auto centers = kmeans_init(samples, J, rng);

    EmState st;
    st.w = Vec::Constant(J, 1.0 / J);
    st.means = centers;
    const Vec gvar = ((samples.rowwise() - samples.colwise().mean()).array().square().colwise().sum() /
                      static_cast<double>(n))
                         .transpose();
    if (opts.cov_type == CovType::Diag) {
      st.dcov.assign(J, gvar.cwiseMax(1e-12));
    } else {
      Mat g = gvar.cwiseMax(1e-12).asDiagonal();
      st.fcov.assign(J, g);
    }

    double prev_ll = -std::numeric_limits<double>::infinity();
    double max_drop = 0;
    int iters = 0;
    int pruned = 0;
    Mat resp(n, J);

    for (int it = 0; it < opts.max_iters; ++it) {
      const GaussianMixture model = to_mixture(st, opts.cov_type);
      // E-step in log domain; J may have shrunk after pruning
      double ll = 0;
      Vec lp(J);
      resp.resize(n, J);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Vec xi = samples.row(i).transpose();
        for (int j = 0; j < J; ++j)
          lp[j] = std::log(st.w[j]) + model.component_log_density(j, xi);
        const double norm = logsumexp(lp);
        ll += norm;
        for (int j = 0; j < J; ++j) resp(i, j) = std::exp(lp[j] - norm);
      }
      ll /= static_cast<double>(n);
      ++iters;
      if (ll < prev_ll) max_drop = std::max(max_drop, prev_ll - ll);
      const bool converged = it > 0 && std::abs(ll - prev_ll) < opts.tol;
      prev_ll = ll;
      if (converged) break;

      // M-step
      for (int j = 0; j < J; ++j) {
        const double nj = resp.col(j).sum();
        st.w[j] = nj / static_cast<double>(n);
        if (nj < 1e-300) continue;
        Vec mj = (resp.col(j).transpose() * samples.matrix()).transpose() / nj;
        st.means[j] = mj;
        if (opts.cov_type == CovType::Diag) {
          Vec var = Vec::Zero(d);
          for (Eigen::Index i = 0; i < n; ++i)
            var.array() += resp(i, j) * (samples.row(i).transpose() - mj).array().square();
          var /= nj;
          var.array() += opts.reg * std::max(var.mean(), 1e-300);
          st.dcov[j] = var;
        } else {
          Mat cov = Mat::Zero(d, d);
          for (Eigen::Index i = 0; i < n; ++i) {
            const Vec r = samples.row(i).transpose() - mj;
            cov.noalias() += resp(i, j) * r * r.transpose();
          }
          cov /= nj;
          cov.diagonal().array() += opts.reg * std::max(cov.diagonal().mean(), 1e-300);
          st.fcov[j] = cov;
        }
      }
      // prune starved components
      std::vector<int> keep;
      for (int j = 0; j < J; ++j)
        if (st.w[j] >= opts.prune_weight) keep.push_back(j);
      if (static_cast<int>(keep.size()) < J && !keep.empty()) {
        pruned += J - static_cast<int>(keep.size());
        EmState nst;
        nst.w.resize(keep.size());
        for (size_t m = 0; m < keep.size(); ++m) {
          nst.w[m] = st.w[keep[m]];
          nst.means.push_back(st.means[keep[m]]);
          if (opts.cov_type == CovType::Diag)
            nst.dcov.push_back(st.dcov[keep[m]]);
          else
            nst.fcov.push_back(st.fcov[keep[m]]);
        }
        nst.w /= nst.w.sum();
        st = std::move(nst);
        J = static_cast<int>(st.w.size());
      }
      st.w /= st.w.sum();
    }

    if (!have_best || prev_ll > best.log_likelihood) {
      best.model = to_mixture(st, opts.cov_type);
      best.log_likelihood = prev_ll;
      best.iterations = iters;
      best.max_ll_decrease = max_drop;
      best.pruned_components = pruned;
      have_best = true;
    }
  }
  return best;
}

double optimal_isotropic_sigma2(const Vec& mean, const Vec& diag_var) {
  if (diag_var.minCoeff() <= 0) throw InvalidArgument("diagonal variances must be positive");
  return (mean.squaredNorm() + diag_var.sum()) / static_cast<double>(mean.size());
}

}  // namespace rds
