#pragma once

#include <cstdint>
#include <vector>

#include "mmcl/random.hpp"

namespace mmcl {

/// Mean and population covariance of a feature cloud, with exact streaming
/// merge, jittered Cholesky sampling, and Mahalanobis distance. Internals are
/// double; sampled features come back as float32.
struct GaussianModel {
  int dim = 0;
  std::int64_t count = 0;
  std::vector<double> mean;  // dim
  std::vector<double> cov;   // dim*dim, row-major, population (divide by n)

  /// rows: n*dim row-major features, n >= 1.
  static GaussianModel fit(const std::vector<float>& rows, int dim);

  /// Exact pooled statistics of the union of both sample sets.
  static GaussianModel merged(const GaussianModel& a, const GaussianModel& b);

  /// Diagonal regularizer used for factorization and distances:
  /// 1e-4 * trace(cov) / dim. Zero when the covariance is zero.
  double jitter() const;

  /// n draws from N(mean, cov + jitter*I) as n*dim float rows. A zero
  /// covariance yields the mean exactly.
  std::vector<float> sample(int n, RngStream& rng) const;

  /// sqrt((x-mean)^T (cov + jitter*I)^{-1} (x-mean)). Zero covariance falls
  /// back to Euclidean distance from the mean.
  double mahalanobis(const float* x) const;
};

}  // namespace mmcl
