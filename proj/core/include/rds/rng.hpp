#pragma once

#include <cstdint>
#include <random>

#include "rds/types.hpp"

namespace rds {

/// Pipeline stages used to derive independent random streams. Streams are a
/// pure function of (seed, stage, index), so the degree of parallelism never
/// changes the numbers that come out of a run.
enum class Stage : std::uint64_t {
  MakeReference = 1,
  FitReference = 2,
  Train = 3,
  Sample = 4,
  Evaluate = 5,
  Baseline = 6,
  EbmNegatives = 7,
  EbmPositives = 8,
  Test = 99,
};

/// Counter-derived random stream. Normal variates use Box-Muller without a
/// cached spare so the draw sequence is a simple function of the uniform
/// stream.
class RngStream {
 public:
  RngStream(std::uint64_t seed, Stage stage, std::uint64_t index);

  double uniform();                      // U(0,1), never exactly 0
  double normal();                       // N(0,1)
  std::uint64_t uniform_int(std::uint64_t n);  // U{0,...,n-1}
  Vec normal_vec(int d);
  void fill_normal(Eigen::Ref<SampleMat> out);

 private:
  std::mt19937_64 gen_;
};

}  // namespace rds
