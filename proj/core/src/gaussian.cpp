#include "mmcl/gaussian.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>

#include "mmcl/errors.hpp"

namespace mmcl {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat cov_matrix(const GaussianModel& g) {
  Mat m(g.dim, g.dim);
  for (int i = 0; i < g.dim; ++i)
    for (int j = 0; j < g.dim; ++j) m(i, j) = g.cov[static_cast<std::size_t>(i) * g.dim + j];
  return m;
}

// Lower Cholesky factor of cov + jitter*I, escalating the jitter on the rare
// roundoff-indefinite case. Zero covariance maps to a zero factor.
Mat chol_factor(const GaussianModel& g) {
  double eps = g.jitter();
  if (eps == 0.0) return Mat::Zero(g.dim, g.dim);
  Mat c = cov_matrix(g);
  for (int attempt = 0; attempt < 6; ++attempt) {
    Eigen::LLT<Mat> llt(c + eps * Mat::Identity(g.dim, g.dim));
    if (llt.info() == Eigen::Success) return llt.matrixL();
    eps *= 10.0;
  }
  throw NumericFault("gaussian covariance factorization failed after jitter escalation");
}

}  // namespace

GaussianModel GaussianModel::fit(const std::vector<float>& rows, int dim) {
  if (dim <= 0) throw UsageError("gaussian fit: dim must be positive");
  if (rows.empty() || rows.size() % static_cast<std::size_t>(dim) != 0) {
    throw UsageError("gaussian fit: row data size must be a positive multiple of dim");
  }
  std::int64_t n = static_cast<std::int64_t>(rows.size()) / dim;
  GaussianModel g;
  g.dim = dim;
  g.count = n;
  g.mean.assign(static_cast<std::size_t>(dim), 0.0);
  g.cov.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  for (std::int64_t r = 0; r < n; ++r)
    for (int j = 0; j < dim; ++j) g.mean[static_cast<std::size_t>(j)] += rows[r * dim + j];
  for (int j = 0; j < dim; ++j) g.mean[static_cast<std::size_t>(j)] /= static_cast<double>(n);
  for (std::int64_t r = 0; r < n; ++r) {
    for (int i = 0; i < dim; ++i) {
      double ci = rows[r * dim + i] - g.mean[static_cast<std::size_t>(i)];
      for (int j = i; j < dim; ++j) {
        double cj = rows[r * dim + j] - g.mean[static_cast<std::size_t>(j)];
        g.cov[static_cast<std::size_t>(i) * dim + j] += ci * cj;
      }
    }
  }
  for (int i = 0; i < dim; ++i) {
    for (int j = i; j < dim; ++j) {
      double v = g.cov[static_cast<std::size_t>(i) * dim + j] / static_cast<double>(n);
      g.cov[static_cast<std::size_t>(i) * dim + j] = v;
      g.cov[static_cast<std::size_t>(j) * dim + i] = v;
    }
  }
  return g;
}

GaussianModel GaussianModel::merged(const GaussianModel& a, const GaussianModel& b) {
  if (a.count == 0) return b;
  if (b.count == 0) return a;
  if (a.dim != b.dim) throw UsageError("gaussian merge: dimension mismatch");
  GaussianModel g;
  g.dim = a.dim;
  g.count = a.count + b.count;
  double wa = static_cast<double>(a.count) / static_cast<double>(g.count);
  double wb = static_cast<double>(b.count) / static_cast<double>(g.count);
  g.mean.resize(static_cast<std::size_t>(g.dim));
  for (int i = 0; i < g.dim; ++i) {
    g.mean[static_cast<std::size_t>(i)] =
        wa * a.mean[static_cast<std::size_t>(i)] + wb * b.mean[static_cast<std::size_t>(i)];
  }
  // Pool second moments: E[xx^T] = cov + mean mean^T for each side.
  g.cov.resize(static_cast<std::size_t>(g.dim) * g.dim);
  for (int i = 0; i < g.dim; ++i) {
    for (int j = 0; j < g.dim; ++j) {
      double ma = a.cov[static_cast<std::size_t>(i) * g.dim + j] +
                  a.mean[static_cast<std::size_t>(i)] * a.mean[static_cast<std::size_t>(j)];
      double mb = b.cov[static_cast<std::size_t>(i) * g.dim + j] +
                  b.mean[static_cast<std::size_t>(i)] * b.mean[static_cast<std::size_t>(j)];
      g.cov[static_cast<std::size_t>(i) * g.dim + j] =
          wa * ma + wb * mb -
          g.mean[static_cast<std::size_t>(i)] * g.mean[static_cast<std::size_t>(j)];
    }
  }
  return g;
}

double GaussianModel::jitter() const {
  double trace = 0.0;
  for (int i = 0; i < dim; ++i) trace += cov[static_cast<std::size_t>(i) * dim + i];
  return 1e-4 * trace / static_cast<double>(dim);
}

std::vector<float> GaussianModel::sample(int n, RngStream& rng) const {
  if (n <= 0) throw UsageError("gaussian sample: n must be positive");
  if (count == 0) throw UsageError("gaussian sample: model holds no observations");
  Mat L = chol_factor(*this);
  std::vector<float> out(static_cast<std::size_t>(n) * dim);
  Vec z(dim);
  for (int r = 0; r < n; ++r) {
    for (int j = 0; j < dim; ++j) z(j) = rng.normal();
    Vec x = L * z;
    for (int j = 0; j < dim; ++j) {
      out[static_cast<std::size_t>(r) * dim + j] =
          static_cast<float>(mean[static_cast<std::size_t>(j)] + x(j));
    }
  }
  return out;
}

double GaussianModel::mahalanobis(const float* x) const {
  if (count == 0) throw UsageError("gaussian mahalanobis: model holds no observations");
  Vec z(dim);
  for (int j = 0; j < dim; ++j) z(j) = x[j] - mean[static_cast<std::size_t>(j)];
  double eps = jitter();
  if (eps == 0.0) return z.norm();
  Mat c = cov_matrix(*this);
  for (int attempt = 0; attempt < 6; ++attempt) {
    Eigen::LLT<Mat> llt(c + eps * Mat::Identity(dim, dim));
    if (llt.info() == Eigen::Success) {
      Vec y = llt.matrixL().solve(z);
      return y.norm();
    }
    eps *= 10.0;
  }
  throw NumericFault("gaussian covariance factorization failed after jitter escalation");
}

}  // namespace mmcl
