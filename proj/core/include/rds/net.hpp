#pragma once

#include <iosfwd>
#include <vector>

#include "rds/rng.hpp"
#include "rds/types.hpp"

namespace rds {

/// Architecture of a Fourier-feature MLP. The input layer sees
/// [sin(2 pi k t'), cos(2 pi k t') for k = 1..F, (x - mean) / std] with
/// t' = t / t_scale; hidden layers are GELU, the output layer is linear and
/// zero-initialized so a fresh net is identically zero.
struct MlpArch {
  int x_dim = 0;
  int out_dim = 1;
  int fourier = 64;
  std::vector<int> hidden = {64, 64, 64, 64};
  double t_scale = 1.0;

  int feature_dim() const { return 2 * fourier + x_dim; }
  bool operator==(const MlpArch&) const = default;
};

class FourierMlp {
 public:
  FourierMlp() = default;
  explicit FourierMlp(const MlpArch& arch);

  const MlpArch& arch() const { return arch_; }
  int param_count() const { return static_cast<int>(params_.size()); }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }

  /// Gaussian fan-in init for hidden layers; output layer stays zero.
  void init_random(RngStream& rng, double weight_scale = 1.0);

  /// Input standardization (identity by default).
  void set_preconditioning(const Vec& mean, const Vec& std);
  const Vec& precond_mean() const { return pre_mean_; }
  const Vec& precond_std() const { return pre_std_; }

  /// Batched evaluation at a shared time t; X has one sample per row.
  SampleMat forward(double t, const SampleMat& X) const;
  Vec forward1(double t, const Vec& x) const;

  /// Per-call caches; reusable across calls of the same batch shape.
  struct Tape {
    double t = 0;
    SampleMat features;
    std::vector<SampleMat> pre;   // layer inputs to gelu
    std::vector<SampleMat> post;  // gelu outputs
  };

  SampleMat forward_cached(double t, const SampleMat& X, Tape& tape) const;

  /// Reverse pass. cot is dL/d(output). Accumulates dL/dparams into
  /// grad_params (must be param_count long, pre-zeroed by the caller) and,
  /// when grad_input is non-null, writes dL/dX into it. Deterministic for
  /// any worker count.
  void backward(const Tape& tape, const SampleMat& cot, Vec* grad_params,
                SampleMat* grad_input) const;

  /// dL/dx for a single (t, x) with scalar-product cotangent.
  Vec grad_input1(double t, const Vec& x, const Vec& cot) const;

  void save(std::ostream& os) const;
  /// Throws InvalidArgument when the stored architecture differs from any
  /// expected one supplied by the caller.
  static FourierMlp load(std::istream& is);

 private:
  struct Layout {
    int w_off, b_off, in, out;
  };
  const Layout& layer(int l) const { return layout_[l]; }
  int layer_count() const { return static_cast<int>(layout_.size()); }
  SampleMat features(double t, const SampleMat& X) const;

  MlpArch arch_;
  Vec params_;
  std::vector<Layout> layout_;
  Vec pre_mean_, pre_std_;
};

/// Adam with bias correction. Steps with non-finite gradients are skipped
/// (counter not advanced) and counted.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vec m, v;
  long step = 0;
  long skipped = 0;

  void reset(int n) {
    m = Vec::Zero(n);
    v = Vec::Zero(n);
    step = 0;
    skipped = 0;
  }
};

void adam_step(AdamState& state, Vec& params, const Vec& grad);

}  // namespace rds
