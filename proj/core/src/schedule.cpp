#include "rds/schedule.hpp"

#include <cmath>

namespace rds {

double logsumexp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

const char* to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::PBM: return "pbm";
    case SchemeKind::VP: return "vp";
    case SchemeKind::POUM: return "poum";
    case SchemeKind::GPBM: return "gpbm";
  }
  return "?";
}

const char* to_string(Integrator k) { return k == Integrator::EM ? "em" : "ei"; }

SchemeKind scheme_from_string(const std::string& s) {
  if (s == "pbm") return SchemeKind::PBM;
  if (s == "vp") return SchemeKind::VP;
  if (s == "poum") return SchemeKind::POUM;
  if (s == "gpbm") return SchemeKind::GPBM;
  throw InvalidArgument("unknown noising scheme: " + s);
}

NoisingSchedule::NoisingSchedule(SchemeKind kind, double T, double p0, double p1, double p2)
    : kind_(kind), T_(T), p0_(p0), p1_(p1), p2_(p2) {
  if (T <= 0) throw InvalidArgument("schedule horizon must be positive");
}

NoisingSchedule NoisingSchedule::pbm(double sigma2, double T) {
  if (sigma2 <= 0) throw InvalidArgument("pbm sigma2 must be positive");
  return {SchemeKind::PBM, T, sigma2, 0, 0};
}

NoisingSchedule NoisingSchedule::vp(double sigma, double beta_min, double beta_max, double T) {
  if (sigma <= 0 || beta_min <= 0 || beta_max < beta_min)
    throw InvalidArgument("vp requires sigma > 0 and 0 < beta_min <= beta_max");
  return {SchemeKind::VP, T, sigma, beta_min, beta_max};
}

NoisingSchedule NoisingSchedule::poum(double beta0, double T) {
  if (beta0 <= 0) throw InvalidArgument("poum beta must be positive");
  return {SchemeKind::POUM, T, beta0, 0, 0};
}

NoisingSchedule NoisingSchedule::gpbm(double zeta0, double T) {
  if (zeta0 <= 0) throw InvalidArgument("gpbm zeta must be positive");
  return {SchemeKind::GPBM, T, zeta0, 0, 0};
}

double NoisingSchedule::beta(double t) const {
  switch (kind_) {
    case SchemeKind::PBM: return p0_;
    case SchemeKind::VP: return p1_ + (p2_ - p1_) * t / T_;
    case SchemeKind::POUM: return p0_;
    case SchemeKind::GPBM: return 2.0 / (T_ - t);
  }
  return 0;
}

double NoisingSchedule::alpha(double t) const {
  switch (kind_) {
    case SchemeKind::PBM: return p0_ * t;
    case SchemeKind::VP: return p1_ * t + 0.5 * (p2_ - p1_) * t * t / T_;
    case SchemeKind::POUM: return p0_ * t;
    case SchemeKind::GPBM: return 2.0 * std::log(T_ / (T_ - t));
  }
  return 0;
}

double NoisingSchedule::f(double t) const {
  switch (kind_) {
    case SchemeKind::PBM: return -1.0 / (T_ - t);
    case SchemeKind::VP: return -beta(t) / (2.0 * p0_ * p0_);
    case SchemeKind::POUM: return -0.5 * p0_ / std::tanh(0.5 * p0_ * (T_ - t));
    case SchemeKind::GPBM: return -1.0 / (T_ - t);
  }
  return 0;
}

double NoisingSchedule::S(double t) const {
  switch (kind_) {
    case SchemeKind::PBM: return (T_ - t) / T_;
    case SchemeKind::VP: return std::exp(-alpha(t) / (2.0 * p0_ * p0_));
    case SchemeKind::POUM: return std::sinh(0.5 * p0_ * (T_ - t)) / std::sinh(0.5 * p0_ * T_);
    case SchemeKind::GPBM: return (T_ - t) / T_;
  }
  return 0;
}

double NoisingSchedule::sigma2(double t) const {
  switch (kind_) {
    case SchemeKind::PBM: return p0_ * T_ * t / (T_ - t);
    case SchemeKind::VP: {
      const double s2 = p0_ * p0_;
      return s2 * std::expm1(alpha(t) / s2);
    }
    case SchemeKind::POUM: {
      const double eta0 = 0.5 * p0_ * T_;
      const double etat = 0.5 * p0_ * (T_ - t);
      const double sh0 = std::sinh(eta0);
      return 2.0 * sh0 * sh0 * (1.0 / std::tanh(etat) - 1.0 / std::tanh(eta0));
    }
    case SchemeKind::GPBM: {
      const double r = T_ / (T_ - t);
      return r * r - 1.0;
    }
  }
  return 0;
}

double NoisingSchedule::marginal_var(double t) const { return forward_kernel(0.0, t).var; }

GaussKernelParams NoisingSchedule::forward_kernel(double s, double t) const {
  if (s > t || s < 0 || t > T_) throw InvalidArgument("forward_kernel requires 0 <= s <= t <= T");
  if (s == t) return {1.0, 0.0};
  GaussKernelParams out;
  switch (kind_) {
    case SchemeKind::PBM: {
      // remaining budgets A - alpha(.) reduce to sigma2 * (T - .)
      out.mean_scale = (T_ - t) / (T_ - s);
      out.var = p0_ * (t - s) * (T_ - t) / (T_ - s);
      break;
    }
    case SchemeKind::VP: {
      const double s2 = p0_ * p0_;
      const double u = (alpha(t) - alpha(s)) / s2;
      out.mean_scale = std::exp(-0.5 * u);
      out.var = -s2 * std::expm1(-u);
      break;
    }
    case SchemeKind::POUM: {
      const double etas = 0.5 * p0_ * (T_ - s);
      const double etat = 0.5 * p0_ * (T_ - t);
      const double sht = std::sinh(etat);
      out.mean_scale = sht / std::sinh(etas);
      out.var = 2.0 * sht * sht * (1.0 / std::tanh(etat) - 1.0 / std::tanh(etas));
      break;
    }
    case SchemeKind::GPBM: {
      const double r = (T_ - t) / (T_ - s);
      out.mean_scale = r;
      out.var = 1.0 - r * r;
      break;
    }
  }
  return out;
}

BaseLaw NoisingSchedule::base_law() const {
  switch (kind_) {
    case SchemeKind::PBM:
    case SchemeKind::POUM: return {true, 0.0};
    case SchemeKind::VP: return {false, p0_ * p0_};
    case SchemeKind::GPBM: return {false, 1.0};
  }
  return {};
}

Vec NoisingSchedule::sample_base(int dim, RngStream& rng) const {
  const BaseLaw law = base_law();
  if (law.is_point) return Vec::Zero(dim);
  return std::sqrt(law.var) * rng.normal_vec(dim);
}

TimeGrid make_time_grid(int K, double T, SchemeKind kind) {
  if (K < 1 || T <= 0) throw InvalidArgument("make_time_grid requires K >= 1 and T > 0");
  // Pinned schemes have a singular reverse-time drift at T - t0 = T, so the
  // grid is floored away from 0.
  const double t0 = (kind == SchemeKind::VP) ? 0.0 : 1e-4;
  TimeGrid grid;
  grid.t.resize(K + 1);
  for (int k = 0; k <= K; ++k) grid.t[k] = t0 + (T - t0) * static_cast<double>(k) / K;
  grid.t[K] = T;
  return grid;
}

StepCoefficients discretization_coeffs(const NoisingSchedule& sched, const TimeGrid& grid,
                                       Integrator integrator) {
  const int K = grid.intervals();
  if (K < 1) throw InvalidArgument("grid needs at least one interval");
  const double T = sched.horizon();
  StepCoefficients out;
  out.integrator = integrator;
  out.w.resize(K);
  out.a.resize(K);
  out.b.resize(K);
  out.c.resize(K);

  if (integrator == Integrator::EM) {
    for (int k = 0; k < K; ++k) {
      const double tk = grid.t[k];
      const double dk = grid.delta(k);
      const double bq = sched.beta(T - tk) * dk;
      out.w[k] = bq;
      out.a[k] = 1.0 - sched.f(T - tk) * dk;
      out.b[k] = bq;
      out.c[k] = bq;
    }
    return out;
  }

  switch (sched.kind()) {
    case SchemeKind::PBM: {
      const double A = sched.alpha(T);
      for (int k = 0; k < K; ++k) {
        const double rem_k = A - sched.alpha(T - grid.t[k]);        // remaining budget at step k
        const double rem_k1 = A - sched.alpha(T - grid.t[k + 1]);
        const double da = sched.alpha(T - grid.t[k]) - sched.alpha(T - grid.t[k + 1]);
        out.a[k] = rem_k1 / rem_k;
        out.b[k] = da;
        out.c[k] = rem_k1 * da / rem_k;
        out.w[k] = rem_k * da / rem_k1;
      }
      break;
    }
    case SchemeKind::VP: {
      const double s2 = sched.vp_sigma() * sched.vp_sigma();
      for (int k = 0; k < K; ++k) {
        // exact integration of the linear part over the interval; u is the
        // beta increment in units of sigma^2 so the sigma = 1 closed forms
        // apply verbatim
        const double u = (sched.alpha(T - grid.t[k]) - sched.alpha(T - grid.t[k + 1])) / s2;
        const double lam = std::expm1(u);
        out.a[k] = std::sqrt(1.0 + lam);
        out.b[k] = 2.0 * s2 * (std::sqrt(1.0 + lam) - 1.0);
        out.c[k] = s2 * lam;
        out.w[k] = 4.0 * s2 * std::tanh(0.25 * u);
      }
      break;
    }
    default:
      throw Unsupported("EI coefficients are defined for PBM and VP only");
  }
  // w = b^2/c holds algebraically; guard against a pathological interval.
  for (int k = 0; k < K; ++k) {
    if (!(out.c[k] > 0)) throw NumericError("non-positive step variance in discretization");
  }
  return out;
}

}  // namespace rds
