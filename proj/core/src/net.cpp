#include "rds/net.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "rds/io.hpp"
#include "rds/thread_pool.hpp"

namespace rds {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr Eigen::Index kRowBlock = 256;

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2)); }

double gelu_grad(double z) {
  return 0.5 * (1.0 + std::erf(z * kInvSqrt2)) + z * kInvSqrt2Pi * std::exp(-0.5 * z * z);
}

void blocked_rows(Eigen::Index n, const std::function<void(Eigen::Index, Eigen::Index, std::size_t)>& fn) {
  const std::size_t blocks = static_cast<std::size_t>((n + kRowBlock - 1) / kRowBlock);
  parallel_for(blocks, [&](std::size_t b) {
    const Eigen::Index lo = static_cast<Eigen::Index>(b) * kRowBlock;
    const Eigen::Index len = std::min(kRowBlock, n - lo);
    fn(lo, len, b);
  });
}

}  // namespace

FourierMlp::FourierMlp(const MlpArch& arch) : arch_(arch) {
  if (arch.out_dim < 1 || arch.fourier < 0 || arch.x_dim < 0 || arch.t_scale <= 0)
    throw InvalidArgument("bad mlp architecture");
  int offset = 0;
  int in = arch.feature_dim();
  for (int h : arch.hidden) {
    layout_.push_back({offset, offset + in * h, in, h});
    offset += in * h + h;
    in = h;
  }
  layout_.push_back({offset, offset + in * arch.out_dim, in, arch.out_dim});
  offset += in * arch.out_dim + arch.out_dim;
  params_ = Vec::Zero(offset);
  pre_mean_ = Vec::Zero(arch.x_dim);
  pre_std_ = Vec::Ones(arch.x_dim);
}

void FourierMlp::init_random(RngStream& rng, double weight_scale) {
  // hidden layers only; the output layer stays zero so the fresh net is 0
  for (int l = 0; l + 1 < layer_count(); ++l) {
    const Layout& ly = layout_[l];
    const double s = weight_scale / std::sqrt(static_cast<double>(ly.in));
    for (int i = 0; i < ly.in * ly.out; ++i) params_[ly.w_off + i] = s * rng.normal();
    for (int i = 0; i < ly.out; ++i) params_[ly.b_off + i] = 0.0;
  }
  const Layout& out = layout_.back();
  params_.segment(out.w_off, out.in * out.out + out.out).setZero();
}

void FourierMlp::set_preconditioning(const Vec& mean, const Vec& std) {
  if (mean.size() != arch_.x_dim || std.size() != arch_.x_dim || std.minCoeff() <= 0)
    throw InvalidArgument("bad preconditioning vectors");
  pre_mean_ = mean;
  pre_std_ = std;
}

SampleMat FourierMlp::features(double t, const SampleMat& X) const {
  const Eigen::Index n = X.rows();
  const int F = arch_.fourier;
  SampleMat feat(n, arch_.feature_dim());
  const double tp = t / arch_.t_scale;
  for (int k = 0; k < F; ++k) {
    const double angle = 2.0 * M_PI * (k + 1) * tp;
    feat.col(k).setConstant(std::sin(angle));
    feat.col(F + k).setConstant(std::cos(angle));
  }
  if (arch_.x_dim > 0) {
    feat.rightCols(arch_.x_dim) =
        (X.rowwise() - pre_mean_.transpose()).array().rowwise() /
        pre_std_.transpose().array();
  }
  return feat;
}

SampleMat FourierMlp::forward(double t, const SampleMat& X) const {
  Tape tape;
  return forward_cached(t, X, tape);
}

Vec FourierMlp::forward1(double t, const Vec& x) const {
  SampleMat X(1, x.size());
  X.row(0) = x.transpose();
  return forward(t, X).row(0).transpose();
}

SampleMat FourierMlp::forward_cached(double t, const SampleMat& X, Tape& tape) const {
  if (X.cols() != arch_.x_dim) throw InvalidArgument("mlp input width mismatch");
  if (!X.allFinite()) throw NumericError("non-finite input to mlp");
  tape.t = t;
  tape.features = features(t, X);
  const int L = layer_count();
  const Eigen::Index n = X.rows();
  tape.pre.resize(L - 1);
  tape.post.resize(L - 1);
  for (int l = 0; l + 1 < L; ++l) {
    tape.pre[l].resize(n, layout_[l].out);
    tape.post[l].resize(n, layout_[l].out);
  }
  SampleMat out(n, arch_.out_dim);

  blocked_rows(n, [&](Eigen::Index lo, Eigen::Index len, std::size_t) {
    SampleMat h = tape.features.middleRows(lo, len);
    for (int l = 0; l < L; ++l) {
      const Layout& ly = layout_[l];
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
          params_.data() + ly.w_off, ly.out, ly.in);
      Eigen::Map<const Vec> bias(params_.data() + ly.b_off, ly.out);
      SampleMat z = h * W.transpose();
      z.rowwise() += bias.transpose();
      if (l + 1 < L) {
        tape.pre[l].middleRows(lo, len) = z;
        h = z.unaryExpr([](double v) { return gelu(v); });
        tape.post[l].middleRows(lo, len) = h;
      } else {
        out.middleRows(lo, len) = z;
      }
    }
  });
  return out;
}

void FourierMlp::backward(const Tape& tape, const SampleMat& cot, Vec* grad_params,
                          SampleMat* grad_input) const {
  const Eigen::Index n = tape.features.rows();
  if (cot.rows() != n || cot.cols() != arch_.out_dim)
    throw InvalidArgument("cotangent shape mismatch");
  const int L = layer_count();
  if (grad_input) grad_input->resize(n, arch_.x_dim);

  const std::size_t blocks = static_cast<std::size_t>((n + kRowBlock - 1) / kRowBlock);
  std::vector<Vec> partials;
  if (grad_params) partials.assign(blocks, Vec::Zero(params_.size()));

  blocked_rows(n, [&](Eigen::Index lo, Eigen::Index len, std::size_t blk) {
    SampleMat delta = cot.middleRows(lo, len);
    for (int l = L - 1; l >= 0; --l) {
      const Layout& ly = layout_[l];
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
          params_.data() + ly.w_off, ly.out, ly.in);
      if (grad_params) {
        Vec& g = partials[blk];
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gW(
            g.data() + ly.w_off, ly.out, ly.in);
        Eigen::Map<Vec> gB(g.data() + ly.b_off, ly.out);
        const SampleMat& in_act =
            l == 0 ? static_cast<const SampleMat&>(tape.features) : tape.post[l - 1];
        gW.noalias() += delta.transpose() * in_act.middleRows(lo, len);
        gB.noalias() += delta.colwise().sum().transpose();
      }
      if (l == 0 && !grad_input) break;
      SampleMat next = delta * W;
      if (l > 0) {
        next.array() *=
            tape.pre[l - 1].middleRows(lo, len).unaryExpr([](double v) { return gelu_grad(v); }).array();
      } else if (grad_input) {
        // restrict to the x block of the feature map and undo the scaling
        grad_input->middleRows(lo, len) =
            next.rightCols(arch_.x_dim).array().rowwise() /
            pre_std_.transpose().array();
      }
      delta = std::move(next);
    }
  });

  if (grad_params) {
    for (const Vec& g : partials) *grad_params += g;  // block order, deterministic
  }
}

Vec FourierMlp::grad_input1(double t, const Vec& x, const Vec& cot) const {
  SampleMat X(1, x.size());
  X.row(0) = x.transpose();
  Tape tape;
  forward_cached(t, X, tape);
  SampleMat C(1, cot.size());
  C.row(0) = cot.transpose();
  SampleMat gi;
  backward(tape, C, nullptr, &gi);
  return gi.row(0).transpose();
}

void FourierMlp::save(std::ostream& os) const {
  os << "rds-net v1\n";
  os << arch_.x_dim << ' ' << arch_.out_dim << ' ' << arch_.fourier << ' '
     << format_double(arch_.t_scale) << '\n';
  os << arch_.hidden.size();
  for (int h : arch_.hidden) os << ' ' << h;
  os << '\n';
  write_row(os, pre_mean_);
  write_row(os, pre_std_);
  os << params_.size() << '\n';
  for (int i = 0; i < params_.size(); ++i) os << format_double(params_[i]) << '\n';
}

FourierMlp FourierMlp::load(std::istream& is) {
  std::string magic, version;
  is >> magic >> version;
  if (magic != "rds-net" || version != "v1") throw InvalidArgument("not a net checkpoint");
  MlpArch arch;
  is >> arch.x_dim >> arch.out_dim >> arch.fourier >> arch.t_scale;
  size_t nh = 0;
  is >> nh;
  arch.hidden.resize(nh);
  for (size_t i = 0; i < nh; ++i) is >> arch.hidden[i];
  if (!is) throw InvalidArgument("corrupt net checkpoint header");
  FourierMlp net(arch);
  net.pre_mean_ = read_vec(is, arch.x_dim);
  net.pre_std_ = read_vec(is, arch.x_dim);
  long n = 0;
  is >> n;
  if (n != net.param_count())
    throw InvalidArgument("net checkpoint does not match its architecture header");
  for (long i = 0; i < n; ++i) is >> net.params_[i];
  if (!is) throw InvalidArgument("corrupt net checkpoint payload");
  return net;
}

void adam_step(AdamState& state, Vec& params, const Vec& grad) {
  if (state.m.size() != params.size()) state.reset(static_cast<int>(params.size()));
  if (grad.size() != params.size()) throw InvalidArgument("adam: gradient shape mismatch");
  if (!grad.allFinite()) {
    ++state.skipped;
    return;
  }
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v.array().matrix() +
            (1.0 - state.beta2) * grad.array().square().matrix();
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= state.lr * (state.m.array() / bc1) /
                    ((state.v.array() / bc2).sqrt() + state.eps);
}

}  // namespace rds
