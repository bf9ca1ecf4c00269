#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "demark/core.hpp"

namespace demark::stats {

/// Standard normal upper tail 1 - Phi(z), via erfc so deep tails keep precision.
inline double normal_sf(double z) noexcept { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

inline double normal_cdf(double z) noexcept { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Phi^{-1}(p).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error("normal quantile needs p in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// Lower median (element n/2 - 1 for even n, 0-based).
inline double lower_median(std::vector<double> values) {
  if (values.empty()) throw Error("median of an empty sample");
  const std::size_t k = (values.size() - 1) / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

inline double mean(std::span<const double> values) {
  if (values.empty()) throw Error("mean of an empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

/// Sample standard deviation (n - 1 denominator).
inline double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

inline double standard_error(std::span<const double> values) {
  return stddev(values) / std::sqrt(static_cast<double>(values.size()));
}

struct KsResult {
  double statistic;
  double p_value;
};

/// Kolmogorov limiting survival function Q(lambda) = 2 sum (-1)^{k-1} e^{-2 k^2 lambda^2}.
inline double kolmogorov_sf(double lambda) noexcept {
  if (lambda < 0.2) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? term : -term);
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

/// One-sample KS test against Uniform[0,1], with the Stephens small-sample
/// correction on the asymptotic p-value.
inline KsResult ks_uniform(std::vector<double> sample) {
  if (sample.empty()) throw Error("KS test on an empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double x = std::clamp(sample[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - x, x - static_cast<double>(i) / n});
  }
  const double root = std::sqrt(n);
  return {d, kolmogorov_sf((root + 0.12 + 0.11 / root) * d)};
}

}  // namespace demark::stats
