#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rds/gmm.hpp"
#include "rds/rng.hpp"
#include "rds/types.hpp"

namespace rds {

/// Unnormalized target density with mode bookkeeping. Scores may be
/// unavailable (piecewise-constant supports); samplers fall back to RWMH.
class Target {
 public:
  virtual ~Target() = default;

  virtual int dim() const = 0;
  virtual double log_gamma(const Vec& x) const = 0;

  virtual bool has_score() const { return true; }
  virtual Vec score(const Vec& x) const = 0;

  virtual const std::vector<Vec>& modes() const = 0;
  virtual int classify_mode(const Vec& x) const = 0;
  int mode_count() const { return static_cast<int>(modes().size()); }

  virtual bool has_exact_sampler() const { return false; }
  virtual Vec sample(RngStream&) const { throw Unsupported("target has no exact sampler"); }

  virtual std::string name() const = 0;
};

using TargetPtr = std::shared_ptr<const Target>;

enum class CovSetting { Isotropic, DiagMedium, DiagHard, FullMedium, FullHard };
CovSetting cov_setting_from_string(const std::string& s);
const char* to_string(CovSetting s);

/// (2/3) N(-1_d, Sigma) + (1/3) N(1_d, Sigma). Sigma follows the named
/// setting: scale (5e-2)^2, log-linear diagonal interpolation, and for the
/// full variants a conjugation with a fixed-seed orthogonal matrix (QR of a
/// seed-42 uniform [0,5) matrix; deterministic within a build).
TargetPtr make_bimodal_gmm(int d, CovSetting setting);

/// 16-d two-component mixture (weights 0.7 / 0.3, means +-0.6) whose
/// covariances are axis-plane rotations of near-diagonal matrices.
TargetPtr make_fig2_gmm();

/// Target backed by an explicit mixture (normalized, Z = 1).
TargetPtr make_gmm_target(GaussianMixture gmm, std::string name);

/// Three concentric rings (radii 1, 3, 5; width 0.1; weights 1/9, 3/9, 5/9).
TargetPtr make_rings();

/// Eight active 2x2 squares on [-4,4]^2; left squares carry 18.75% each,
/// right squares 6.25% each. No score (flat inside, -inf outside).
TargetPtr make_checkerboard();

struct Phi4Params {
  int d = 32;
  double a = 0.1;
  double beta_temp = 20.0;
  double h = 0.0;
};

/// 1-d lattice field system with quartic on-site potential, pinned to zero
/// at both boundaries. Bimodal; the local field h tilts the mode weights.
TargetPtr make_phi4(const Phi4Params& p);

/// Ratio of mode masses from a Laplace expansion around the two modes.
/// order 0: density ratio at the modes; order 2: adds the curvature
/// correction |det H|^{-1/2} (tridiagonal, evaluated in log domain).
double phi4_laplace_ratio(const Phi4Params& p, int order);

/// Locates the two phi^4 modes by damped Newton descent; gradient norm below
/// 1e-10 on exit.
std::pair<Vec, Vec> phi4_modes(const Phi4Params& p);

/// Monte-Carlo frequency of each mode under the target's classifier.
Vec estimate_mode_weight(const SampleMat& samples, const Target& target);

}  // namespace rds
