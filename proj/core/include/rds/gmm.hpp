#pragma once

#include <iosfwd>
#include <optional>
#include <vector>

#include "rds/rng.hpp"
#include "rds/schedule.hpp"
#include "rds/types.hpp"

namespace rds {

enum class CovType { Diag, Full };

/// Mixture of Gaussians over R^d with weights on the simplex. Covariances are
/// diagonal or full SPD; full components cache their Cholesky factor, rebuilt
/// only when parameters change.
class GaussianMixture {
 public:
  GaussianMixture() = default;
  GaussianMixture(Vec weights, std::vector<Vec> means, std::vector<Vec> diag_covs);
  GaussianMixture(Vec weights, std::vector<Vec> means, std::vector<Mat> full_covs);

  int components() const { return static_cast<int>(weights_.size()); }
  int dim() const { return means_.empty() ? 0 : static_cast<int>(means_[0].size()); }
  CovType cov_type() const { return cov_type_; }
  const Vec& weights() const { return weights_; }
  const Vec& mean(int j) const { return means_[j]; }
  const Vec& diag_cov(int j) const { return diag_covs_[j]; }
  const Mat& full_cov(int j) const { return full_covs_[j]; }
  Mat cov_as_matrix(int j) const;

  /// Normalized log density (Z = 1 by construction).
  double log_density(const Vec& x) const;
  /// Log density of component j alone (no weight).
  double component_log_density(int j, const Vec& x) const;
  /// Log density and its gradient in one pass.
  double log_density_and_score(const Vec& x, Vec& score) const;
  Vec score(const Vec& x) const;
  /// Hessian of the log density applied to v (needed for pathwise gradients).
  Vec score_jvp(const Vec& x, const Vec& v) const;

  Vec sample(RngStream& rng) const;
  void sample(RngStream& rng, Eigen::Ref<SampleMat> out) const;

  /// Index of the component with the largest unweighted density at x.
  int nearest_component(const Vec& x) const;

  /// Mixture mean and per-coordinate variance (law of total variance).
  Vec mixture_mean() const;
  Vec mixture_diag_var() const;

  /// Law of X_t when X_0 follows this mixture and evolves under sched:
  /// component j becomes N(S(t) m_j, S(t)^2 Sigma_j + marginal_var(t) I).
  GaussianMixture diffused(const NoisingSchedule& sched, double t) const;

  void save(std::ostream& os) const;
  static GaussianMixture load(std::istream& is);

 private:
  struct CompCache {
    Eigen::LLT<Mat> llt;
    double log_norm = 0;  // -(d/2)log(2pi) - (1/2)log|Sigma|
  };
  void rebuild_cache();
  double comp_log_density(int j, const Vec& x) const;

  Vec weights_;
  std::vector<Vec> means_;
  std::vector<Vec> diag_covs_;
  std::vector<Mat> full_covs_;
  std::vector<CompCache> cache_;
  std::vector<double> diag_log_norm_;
  CovType cov_type_ = CovType::Diag;
};

/// Maximum-likelihood Gaussian (J = 1) with regularized covariance.
GaussianMixture fit_gaussian_ml(const SampleMat& samples, CovType cov_type,
                                double reg = 1e-6);

struct EmOptions {
  CovType cov_type = CovType::Full;
  double reg = 1e-6;          // added to diagonals each M-step, scaled by mean diagonal
  int restarts = 3;
  int max_iters = 500;
  double tol = 1e-6;          // log-likelihood gain per sample
  std::uint64_t seed = 0;
  double prune_weight = 1e-8;
};

struct EmFitResult {
  GaussianMixture model;
  double log_likelihood = 0;   // final mean log-likelihood
  int iterations = 0;
  double max_ll_decrease = 0;  // largest observed per-iteration drop (should be ~0)
  int pruned_components = 0;
};

/// Expectation-maximization fit of a J-component mixture; k-means++ style
/// initialization, best of `restarts` by final likelihood.
EmFitResult fit_gmm_em(const SampleMat& samples, int J, const EmOptions& opts);

/// d^{-1} (m^T m + sum_j Gamma_j^2): the isotropic variance closest in KL to
/// the diagonal Gaussian N(m, diag(Gamma^2)).
double optimal_isotropic_sigma2(const Vec& mean, const Vec& diag_var);

}  // namespace rds
