#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "kss/types.hpp"

namespace kss {

std::uint64_t splitmix64(std::uint64_t x);

// Seed for an independent substream identified by (seed, a, b).
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

using Rng = std::mt19937_64;
Rng make_rng(std::uint64_t seed, std::uint64_t stream_a, std::uint64_t stream_b = 0);

// Counter-based Rademacher entry keyed on (seed, tag, row, col).
inline double rademacher(std::uint64_t seed, std::uint64_t tag, std::uint64_t row, std::uint64_t col) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
  h = splitmix64(h ^ row);
  h = splitmix64(h ^ (col * 0x9e3779b97f4a7c15ULL));
  return (h >> 63) ? 1.0 : -1.0;
}

double normal_cdf(double x);
double normal_quantile(double p);
double chi2_quantile(double p, double df);
double chi2_cdf(double x, double df);

double mean(const std::vector<double>& x);
double variance(const std::vector<double>& x);  // unbiased
double skewness(const std::vector<double>& x);

struct KsResult {
  double statistic;
  double p_value;
};

// Asymptotic Kolmogorov tail probability P(K > lambda).
double kolmogorov_tail(double lambda);
KsResult ks_normal(std::vector<double> x, double mu, double sd);
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);

// Running mean and variance (Welford).
class RunningStats {
 public:
  void add(double x);
  long count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double se_mean() const;

 private:
  long n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

}  // namespace kss
