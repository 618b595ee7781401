#include "rds/rng.hpp"

#include <cmath>

namespace rds {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, Stage stage, std::uint64_t index) {
  std::uint64_t s = splitmix64(seed);
  s = splitmix64(s ^ static_cast<std::uint64_t>(stage));
  s = splitmix64(s ^ index);
  return s;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, Stage stage, std::uint64_t index)
    : gen_(derive_seed(seed, stage, index)) {}

double RngStream::uniform() {
  // 53-bit mantissa in (0,1]; shifted away from 0 so log() is always finite.
  const std::uint64_t bits = gen_() >> 11;
  return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
}

double RngStream::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t RngStream::uniform_int(std::uint64_t n) {
  // Rejection-free modulo bias is negligible for n << 2^64 but we reject
  // anyway to keep draws exact.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return x % n;
}

Vec RngStream::normal_vec(int d) {
  Vec v(d);
  for (int i = 0; i < d; ++i) v[i] = normal();
  return v;
}

void RngStream::fill_normal(Eigen::Ref<SampleMat> out) {
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = normal();
}

}  // namespace rds
