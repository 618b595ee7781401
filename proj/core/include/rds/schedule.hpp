#pragma once

#include <vector>

#include "rds/rng.hpp"
#include "rds/types.hpp"

namespace rds {

enum class SchemeKind { PBM, VP, POUM, GPBM };
enum class Integrator { EM, EI };

const char* to_string(SchemeKind k);
const char* to_string(Integrator k);
SchemeKind scheme_from_string(const std::string& s);

/// Gaussian transition law of the noising SDE between two times:
/// x_t | x_s ~ N(mean_scale * x_s, var * I).
struct GaussKernelParams {
  double mean_scale = 1.0;
  double var = 0.0;
};

/// Terminal law the scheme transports the initial condition to.
struct BaseLaw {
  bool is_point = false;  // pinned schemes end at the origin
  double var = 0.0;       // isotropic variance otherwise
};

/// One of the four linear noising SDEs dX = f(t) X dt + sqrt(beta(t)) dW on
/// [0, T]. All time integrals are elementary for the supported beta
/// schedules, so every accessor below is a closed form.
class NoisingSchedule {
 public:
  static NoisingSchedule pbm(double sigma2, double T);
  static NoisingSchedule vp(double sigma, double beta_min, double beta_max, double T);
  static NoisingSchedule poum(double beta0, double T);
  static NoisingSchedule gpbm(double zeta0, double T);

  SchemeKind kind() const { return kind_; }
  double horizon() const { return T_; }
  bool is_exact() const { return kind_ != SchemeKind::VP; }

  double f(double t) const;
  double beta(double t) const;
  double alpha(double t) const;    // \int_0^t beta
  double S(double t) const;        // exp(\int_0^t f)
  double sigma2(double t) const;   // \int_0^t beta / S^2
  double marginal_var(double t) const;  // S(t)^2 sigma2(t), finite at t = T

  /// Exact conditional law of X_t given X_s, 0 <= s <= t <= T.
  GaussKernelParams forward_kernel(double s, double t) const;

  BaseLaw base_law() const;
  Vec sample_base(int dim, RngStream& rng) const;

  // kind-specific parameters (used for config round trips)
  double pbm_sigma2() const { return p0_; }
  double vp_sigma() const { return p0_; }
  double vp_beta_min() const { return p1_; }
  double vp_beta_max() const { return p2_; }
  double poum_beta() const { return p0_; }
  double gpbm_zeta() const { return p0_; }

 private:
  NoisingSchedule(SchemeKind kind, double T, double p0, double p1, double p2);

  SchemeKind kind_;
  double T_;
  double p0_ = 0, p1_ = 0, p2_ = 0;
};

/// Discretization of [t0, T] into K intervals, strictly increasing,
/// t_K = T. Pinned schemes keep t0 > 0 so reverse-time coefficients at
/// T - t0 stay finite.
struct TimeGrid {
  std::vector<double> t;

  int intervals() const { return static_cast<int>(t.size()) - 1; }
  double delta(int k) const { return t[k + 1] - t[k]; }
};

TimeGrid make_time_grid(int K, double T, SchemeKind kind);

/// Per-interval coefficients of the discrete reverse-time recursion
/// Y_{k+1} = a_k Y_k + b_k (s^ref + g)(Y_k) + sqrt(c_k) Z_k, together with
/// the loss weights w_k = b_k^2 / c_k.
struct StepCoefficients {
  Integrator integrator = Integrator::EM;
  std::vector<double> w, a, b, c;

  int size() const { return static_cast<int>(w.size()); }
};

StepCoefficients discretization_coeffs(const NoisingSchedule& sched, const TimeGrid& grid,
                                       Integrator integrator);

}  // namespace rds
