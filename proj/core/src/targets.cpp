#include "rds/targets.hpp"

#include <cmath>

namespace rds {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

CovSetting cov_setting_from_string(const std::string& s) {
  if (s == "isotropic") return CovSetting::Isotropic;
  if (s == "diag-medium") return CovSetting::DiagMedium;
  if (s == "diag-hard") return CovSetting::DiagHard;
  if (s == "full-medium") return CovSetting::FullMedium;
  if (s == "full-hard") return CovSetting::FullHard;
  throw InvalidArgument("unknown covariance setting: " + s);
}

const char* to_string(CovSetting s) {
  switch (s) {
    case CovSetting::Isotropic: return "isotropic";
    case CovSetting::DiagMedium: return "diag-medium";
    case CovSetting::DiagHard: return "diag-hard";
    case CovSetting::FullMedium: return "full-medium";
    case CovSetting::FullHard: return "full-hard";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Gaussian mixture targets

namespace {

class GmmTarget final : public Target {
 public:
  GmmTarget(GaussianMixture gmm, std::string name) : gmm_(std::move(gmm)), name_(std::move(name)) {
    for (int j = 0; j < gmm_.components(); ++j) modes_.push_back(gmm_.mean(j));
  }

  int dim() const override { return gmm_.dim(); }
  double log_gamma(const Vec& x) const override { return gmm_.log_density(x); }
  Vec score(const Vec& x) const override { return gmm_.score(x); }
  const std::vector<Vec>& modes() const override { return modes_; }
  int classify_mode(const Vec& x) const override { return gmm_.nearest_component(x); }
  bool has_exact_sampler() const override { return true; }
  Vec sample(RngStream& rng) const override { return gmm_.sample(rng); }
  std::string name() const override { return name_; }

  const GaussianMixture& mixture() const { return gmm_; }

 private:
  GaussianMixture gmm_;
  std::vector<Vec> modes_;
  std::string name_;
};

Vec logdiag_interp(int d, double lo, double hi) {
  Vec v(d);
  if (d == 1) {
    v[0] = hi;
    return v;
  }
  const double la = std::log(lo);
  const double lb = std::log(hi);
  for (int i = 0; i < d; ++i) v[i] = std::exp(la + (lb - la) * i / (d - 1));
  return v;
}

// Deterministic orthogonal matrix: QR of a seed-42 uniform [0,5) matrix,
// columns sign-fixed so R has a positive diagonal. Reproducible within a
// build; the generator is recorded in the run manifest.
Mat fixed_orthogonal(int d) {
  RngStream rng(42, Stage::FitReference, 0);
  Mat m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = 5.0 * rng.uniform();
  Eigen::HouseholderQR<Mat> qr(m);
  Mat q = qr.householderQ();
  const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace

TargetPtr make_bimodal_gmm(int d, CovSetting setting) {
  if (d < 1) throw InvalidArgument("dimension must be >= 1");
  const double scale = 5e-2 * 5e-2;
  Vec w(2);
  w << 2.0 / 3.0, 1.0 / 3.0;
  std::vector<Vec> means{Vec::Constant(d, -1.0), Vec::Constant(d, 1.0)};
  switch (setting) {
    case CovSetting::Isotropic: {
      std::vector<Vec> covs{Vec::Constant(d, scale), Vec::Constant(d, scale)};
      return make_gmm_target({w, std::move(means), std::move(covs)}, "gmm_bimodal");
    }
    case CovSetting::DiagMedium:
    case CovSetting::DiagHard: {
      const double lo = setting == CovSetting::DiagMedium ? 1e-2 : 1e-4;
      Vec diag = scale * logdiag_interp(d, lo, 1.0).array();
      std::vector<Vec> covs{diag, diag};
      return make_gmm_target({w, std::move(means), std::move(covs)}, "gmm_bimodal");
    }
    case CovSetting::FullMedium:
    case CovSetting::FullHard: {
      const double lo = setting == CovSetting::FullMedium ? 1e-2 : 1e-4;
      const Mat q = fixed_orthogonal(d);
      const Vec diag = logdiag_interp(d, lo, 1.0);
      Mat cov = scale * (q * diag.asDiagonal() * q.transpose());
      cov = 0.5 * (cov + cov.transpose());  // symmetry to rounding
      std::vector<Mat> covs{cov, cov};
      return make_gmm_target({w, std::move(means), std::move(covs)}, "gmm_bimodal");
    }
  }
  throw InvalidArgument("unknown covariance setting");
}

TargetPtr make_fig2_gmm() {
  const int d = 16;
  auto rotation = [&](double angle) {
    Mat r = Mat::Identity(d, d);
    r(0, 0) = std::cos(angle);
    r(0, d - 1) = -std::sin(angle);
    r(d - 1, 0) = std::sin(angle);
    r(d - 1, d - 1) = std::cos(angle);
    return r;
  };
  Vec diag1 = Vec::Constant(d, 1e-2);
  diag1[d - 1] = 1e-1;
  Vec diag2 = Vec::Constant(d, 1e-2);
  diag2[0] = 1e-1;
  const Mat r1 = rotation(M_PI / 4.0);
  const Mat r2 = rotation(M_PI / 6.0);
  Mat cov1 = r1 * diag1.asDiagonal() * r1.transpose();
  Mat cov2 = r2 * diag2.asDiagonal() * r2.transpose();
  cov1 = 0.5 * (cov1 + cov1.transpose());
  cov2 = 0.5 * (cov2 + cov2.transpose());
  Vec w(2);
  w << 0.7, 0.3;
  std::vector<Vec> means{Vec::Constant(d, -0.6), Vec::Constant(d, 0.6)};
  return make_gmm_target({w, std::move(means), std::vector<Mat>{cov1, cov2}}, "gmm_fig2");
}

TargetPtr make_gmm_target(GaussianMixture gmm, std::string name) {
  return std::make_shared<GmmTarget>(std::move(gmm), std::move(name));
}

// ---------------------------------------------------------------------------
// Rings

namespace {

class RingsTarget final : public Target {
 public:
  RingsTarget() {
    for (int j = 0; j < 3; ++j) {
      Vec m(2);
      m << radii_[j], 0.0;
      modes_.push_back(m);
    }
  }

  int dim() const override { return 2; }

  double log_gamma(const Vec& x) const override {
    const double rho = x.norm();
    if (rho < 1e-12) return kNegInf;
    Vec lp(3);
    for (int j = 0; j < 3; ++j) {
      const double r = rho - radii_[j];
      lp[j] = std::log(weights_[j]) - 0.5 * r * r / (width_ * width_);
    }
    // radius Gaussian x uniform angle, with the polar Jacobian 1/rho
    return logsumexp(lp) - 0.5 * std::log(2.0 * M_PI * width_ * width_) -
           std::log(2.0 * M_PI) - std::log(rho);
  }

  Vec score(const Vec& x) const override {
    const double rho = x.norm();
    if (rho < 1e-12) return Vec::Zero(2);
    Vec lp(3);
    for (int j = 0; j < 3; ++j) {
      const double r = rho - radii_[j];
      lp[j] = std::log(weights_[j]) - 0.5 * r * r / (width_ * width_);
    }
    const double norm = logsumexp(lp);
    double drho = 0;  // d/drho of the radial log term
    for (int j = 0; j < 3; ++j)
      drho -= std::exp(lp[j] - norm) * (rho - radii_[j]) / (width_ * width_);
    drho -= 1.0 / rho;
    return (drho / rho) * x;
  }

  const std::vector<Vec>& modes() const override { return modes_; }

  int classify_mode(const Vec& x) const override {
    const double rho = x.norm();
    int best = 0;
    double bd = std::abs(rho - radii_[0]);
    for (int j = 1; j < 3; ++j) {
      const double dj = std::abs(rho - radii_[j]);
      if (dj < bd) {
        bd = dj;
        best = j;
      }
    }
    return best;
  }

  bool has_exact_sampler() const override { return true; }

  Vec sample(RngStream& rng) const override {
    const double u = rng.uniform();
    int j = u < weights_[0] ? 0 : (u < weights_[0] + weights_[1] ? 1 : 2);
    const double r = radii_[j] + width_ * rng.normal();
    const double theta = 2.0 * M_PI * rng.uniform();
    Vec x(2);
    x << r * std::cos(theta), r * std::sin(theta);
    return x;
  }

  std::string name() const override { return "rings"; }

 private:
  double radii_[3] = {1.0, 3.0, 5.0};
  double weights_[3] = {1.0 / 9.0, 3.0 / 9.0, 5.0 / 9.0};
  double width_ = 0.1;
  std::vector<Vec> modes_;
};

}  // namespace

TargetPtr make_rings() { return std::make_shared<RingsTarget>(); }

// ---------------------------------------------------------------------------
// Checkerboard

namespace {

class CheckerboardTarget final : public Target {
 public:
  CheckerboardTarget() {
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        if ((i + j) % 2 != 0) continue;
        Vec c(2);
        c << -4.0 + 2.0 * i + 1.0, -4.0 + 2.0 * j + 1.0;
        centers_.push_back(c);
        weights_.push_back(i < 2 ? 0.1875 : 0.0625);
      }
    }
  }

  int dim() const override { return 2; }

  double log_gamma(const Vec& x) const override {
    const int cell = cell_index(x);
    if (cell < 0) return kNegInf;
    return std::log(weights_[cell] / 4.0);  // each square has area 4
  }

  bool has_score() const override { return false; }
  Vec score(const Vec&) const override {
    throw Unsupported("checkerboard density has no score; use RWMH");
  }

  const std::vector<Vec>& modes() const override { return centers_; }

  int classify_mode(const Vec& x) const override {
    // nearest active square center, so off-support points still classify
    int best = 0;
    double bd = (x - centers_[0]).squaredNorm();
    for (size_t j = 1; j < centers_.size(); ++j) {
      const double dj = (x - centers_[j]).squaredNorm();
      if (dj < bd) {
        bd = dj;
        best = static_cast<int>(j);
      }
    }
    return best;
  }

  bool has_exact_sampler() const override { return true; }

  Vec sample(RngStream& rng) const override {
    double u = rng.uniform();
    size_t j = weights_.size() - 1;
    double acc = 0;
    for (size_t i = 0; i < weights_.size(); ++i) {
      acc += weights_[i];
      if (u <= acc) {
        j = i;
        break;
      }
    }
    Vec x(2);
    x << centers_[j][0] + 2.0 * (rng.uniform() - 0.5), centers_[j][1] + 2.0 * (rng.uniform() - 0.5);
    return x;
  }

  std::string name() const override { return "checkerboard"; }

 private:
  int cell_index(const Vec& x) const {
    if (x[0] <= -4.0 || x[0] >= 4.0 || x[1] <= -4.0 || x[1] >= 4.0) return -1;
    const int i = static_cast<int>(std::floor((x[0] + 4.0) / 2.0));
    const int j = static_cast<int>(std::floor((x[1] + 4.0) / 2.0));
    if ((i + j) % 2 != 0) return -1;
    // map (i, j) back to the active-square ordering used in the ctor
    int idx = 0;
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) {
        if ((a + b) % 2 != 0) continue;
        if (a == i && b == j) return idx;
        ++idx;
      }
    }
    return -1;
  }

  std::vector<Vec> centers_;
  std::vector<double> weights_;
};

}  // namespace

TargetPtr make_checkerboard() { return std::make_shared<CheckerboardTarget>(); }

// ---------------------------------------------------------------------------
// phi^4 lattice field

namespace {

double phi4_log_gamma(const Phi4Params& p, const Vec& phi) {
  const int d = p.d;
  // boundary sites are pinned to zero, so the coupling sum picks up
  // phi_1^2 and phi_d^2 at the ends
  double coupling = phi[0] * phi[0] + phi[d - 1] * phi[d - 1];
  for (int i = 1; i < d; ++i) {
    const double diff = phi[i] - phi[i - 1];
    coupling += diff * diff;
  }
  double quartic = 0;
  for (int i = 0; i < d; ++i) {
    const double q = 1.0 - phi[i] * phi[i];
    quartic += q * q;
  }
  return -p.beta_temp *
         (0.5 * p.a * d * coupling + quartic / (4.0 * p.a * d) + p.h * phi.sum());
}

Vec phi4_score(const Phi4Params& p, const Vec& phi) {
  const int d = p.d;
  Vec g(d);
  for (int i = 0; i < d; ++i) {
    const double left = i > 0 ? phi[i - 1] : 0.0;
    const double right = i < d - 1 ? phi[i + 1] : 0.0;
    g[i] = -p.beta_temp * (p.a * d * (2.0 * phi[i] - left - right) +
                           phi[i] * (phi[i] * phi[i] - 1.0) / (p.a * d) + p.h);
  }
  return g;
}

// Tridiagonal Hessian of log gamma: constant off-diagonal beta*a*d, diagonal
// -2 beta a d - beta (3 phi_i^2 - 1)/(a d).
void phi4_hessian_tridiag(const Phi4Params& p, const Vec& phi, Vec& diag, double& off) {
  const int d = p.d;
  diag.resize(d);
  off = p.beta_temp * p.a * d;
  for (int i = 0; i < d; ++i)
    diag[i] = -2.0 * p.beta_temp * p.a * d -
              p.beta_temp * (3.0 * phi[i] * phi[i] - 1.0) / (p.a * d);
}

// log |det H| via the LDL^T pivot recursion on -H (SPD at a mode), carried
// in log domain so beta = 20, d = 32 cannot overflow.
double phi4_log_abs_det_hessian(const Phi4Params& p, const Vec& phi) {
  Vec diag;
  double off;
  phi4_hessian_tridiag(p, phi, diag, off);
  double log_det = 0;
  double prev_pivot = 0;
  for (int i = 0; i < p.d; ++i) {
    double pivot = -diag[i];
    if (i > 0) pivot -= off * off / prev_pivot;
    if (pivot <= 0) throw NumericError("phi4 Hessian not negative definite at candidate mode");
    log_det += std::log(pivot);
    prev_pivot = pivot;
  }
  return log_det;
}

// Damped Newton ascent on log gamma; the Newton system is tridiagonal and
// solved with the Thomas recursion.
Vec phi4_newton(const Phi4Params& p, Vec phi) {
  const int d = p.d;
  double energy = -phi4_log_gamma(p, phi);
  for (int it = 0; it < 200; ++it) {
    const Vec g = phi4_score(p, phi);
    if (g.norm() < 1e-11) return phi;
    Vec diag;
    double off;
    phi4_hessian_tridiag(p, phi, diag, off);
    Vec a = -diag;
    Vec rhs = g;
    for (int i = 1; i < d; ++i) {
      const double m = -off / a[i - 1];
      a[i] -= m * -off;
      rhs[i] -= m * rhs[i - 1];
    }
    Vec step(d);
    step[d - 1] = rhs[d - 1] / a[d - 1];
    for (int i = d - 2; i >= 0; --i) step[i] = (rhs[i] + off * step[i + 1]) / a[i];
    double scale = 1.0;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      const Vec cand = phi + scale * step;
      const double cand_energy = -phi4_log_gamma(p, cand);
      if (cand_energy <= energy + 1e-15) {
        phi = cand;
        energy = cand_energy;
        moved = true;
        break;
      }
      scale *= 0.5;
    }
    if (!moved) break;
  }
  if (phi4_score(p, phi).norm() >= 1e-10)
    throw NumericError("phi4 mode search did not reach gradient norm 1e-10");
  return phi;
}

class Phi4Target final : public Target {
 public:
  explicit Phi4Target(const Phi4Params& p) : p_(p) {
    if (p.d < 2 || p.a <= 0 || p.beta_temp <= 0)
      throw InvalidArgument("phi4 requires d >= 2, a > 0, beta > 0");
    auto [lo, hi] = phi4_modes(p);
    modes_.push_back(lo);
    modes_.push_back(hi);
  }

  int dim() const override { return p_.d; }
  double log_gamma(const Vec& phi) const override { return phi4_log_gamma(p_, phi); }
  Vec score(const Vec& phi) const override { return phi4_score(p_, phi); }
  const std::vector<Vec>& modes() const override { return modes_; }

  int classify_mode(const Vec& phi) const override {
    // sign of the middle site
    return phi[p_.d / 2 - 1] < 0 ? 0 : 1;
  }

  std::string name() const override { return "phi4"; }

 private:
  Phi4Params p_;
  std::vector<Vec> modes_;
};

}  // namespace

TargetPtr make_phi4(const Phi4Params& p) { return std::make_shared<Phi4Target>(p); }

std::pair<Vec, Vec> phi4_modes(const Phi4Params& p) {
  Vec minus = phi4_newton(p, Vec::Constant(p.d, -1.0));
  Vec plus = phi4_newton(p, Vec::Constant(p.d, 1.0));
  return {minus, plus};
}

double phi4_laplace_ratio(const Phi4Params& p, int order) {
  if (order != 0 && order != 2) throw InvalidArgument("laplace order must be 0 or 2");
  auto [minus, plus] = phi4_modes(p);
  double log_ratio = phi4_log_gamma(p, minus) - phi4_log_gamma(p, plus);
  if (order == 2) {
    log_ratio -= 0.5 * (phi4_log_abs_det_hessian(p, minus) - phi4_log_abs_det_hessian(p, plus));
  }
  return std::exp(log_ratio);
}

Vec estimate_mode_weight(const SampleMat& samples, const Target& target) {
  if (samples.rows() == 0) throw InvalidArgument("estimate_mode_weight: empty sample set");
  if (samples.cols() != target.dim())
    throw InvalidArgument("estimate_mode_weight: dimension mismatch");
  Vec counts = Vec::Zero(target.mode_count());
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    counts[target.classify_mode(samples.row(i).transpose())] += 1.0;
  }
  return counts / static_cast<double>(samples.rows());
}

}  // namespace rds
