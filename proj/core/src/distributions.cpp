#include "hbma/distributions.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "hbma/errors.hpp"

namespace hbma {

namespace {
constexpr double kLogSqrt2Pi = 0.9189385332046727;  // log(sqrt(2*pi))
constexpr double kInf = std::numeric_limits<double>::infinity();

std::size_t tri_index(std::size_t i, std::size_t j) { return i * (i + 1) / 2 + j; }
}  // namespace

CholeskyCorr CholeskyCorr::identity(std::size_t dim) {
  CholeskyCorr c;
  c.dim = dim;
  c.lower.assign(dim * (dim + 1) / 2, 0.0);
  for (std::size_t i = 0; i < dim; ++i) c.lower[tri_index(i, i)] = 1.0;
  return c;
}

CholeskyCorr CholeskyCorr::from_rho(double rho) {
  if (!(std::abs(rho) < 1.0)) throw DomainError("correlation must satisfy |rho| < 1");
  CholeskyCorr c = identity(2);
  c.lower[tri_index(1, 0)] = rho;
  c.lower[tri_index(1, 1)] = std::sqrt(1.0 - rho * rho);
  return c;
}

double CholeskyCorr::at(std::size_t i, std::size_t j) const {
  return j > i ? 0.0 : lower[tri_index(i, j)];
}

double CholeskyCorr::rho() const {
  if (dim != 2) throw DomainError("rho() requires a 2x2 factor");
  return lower[tri_index(1, 0)];
}

std::vector<double> CholeskyCorr::to_matrix() const {
  std::vector<double> m(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k <= std::min(i, j); ++k) s += at(i, k) * at(j, k);
      m[i * dim + j] = s;
    }
  return m;
}

void CholeskyCorr::validate(double tol) const {
  if (dim == 0 || lower.size() != dim * (dim + 1) / 2)
    throw DomainError("CholeskyCorr: inconsistent storage");
  for (std::size_t i = 0; i < dim; ++i) {
    if (!(at(i, i) > 0.0)) throw DomainError("CholeskyCorr: non-positive diagonal");
    double norm = 0.0;
    for (std::size_t j = 0; j <= i; ++j) norm += at(i, j) * at(i, j);
    if (std::abs(norm - 1.0) > tol) throw DomainError("CholeskyCorr: row norm is not 1");
  }
}

CovarianceDecomp CovarianceDecomp::from_matrix_2x2(double v11, double v12, double v22) {
  if (!(v11 > 0.0) || !(v22 > 0.0)) throw DomainError("covariance diagonal must be positive");
  const double t1 = std::sqrt(v11);
  const double t2 = std::sqrt(v22);
  const double rho = v12 / (t1 * t2);
  if (!(std::abs(rho) < 1.0)) throw DomainError("covariance is not positive definite");
  CovarianceDecomp d;
  d.theta = {t1, t2};
  d.corr = CholeskyCorr::from_rho(rho);
  return d;
}

std::vector<double> CovarianceDecomp::to_matrix() const {
  const std::size_t n = dim();
  std::vector<double> omega = corr.to_matrix();
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = theta[i] * omega[i * n + j] * theta[j];
  return v;
}

double normal_lpdf(double x, double mean, double sd) {
  if (!(sd > 0.0)) throw DomainError("normal_lpdf: sd must be positive");
  const double z = (x - mean) / sd;
  return -kLogSqrt2Pi - std::log(sd) - 0.5 * z * z;
}

NormalLpdfGrad normal_lpdf_grad(double x, double mean, double sd) {
  if (!(sd > 0.0)) throw DomainError("normal_lpdf_grad: sd must be positive");
  const double z = (x - mean) / sd;
  NormalLpdfGrad g;
  g.logpdf = -kLogSqrt2Pi - std::log(sd) - 0.5 * z * z;
  g.d_x = -z / sd;
  g.d_mean = z / sd;
  g.d_sd = (z * z - 1.0) / sd;
  return g;
}

HalfCauchyLpdfGrad half_cauchy_lpdf_grad(double x, double scale) {
  if (!(scale > 0.0)) throw DomainError("half_cauchy_lpdf_grad: scale must be positive");
  HalfCauchyLpdfGrad g;
  if (!(x > 0.0)) {
    g.logpdf = -kInf;
    g.d_x = 0.0;
    g.in_support = false;
    return g;
  }
  const double r = x / scale;
  g.logpdf = std::log(2.0 / std::numbers::pi) - std::log(scale) - std::log1p(r * r);
  g.d_x = -2.0 * x / (scale * scale + x * x);
  g.in_support = true;
  return g;
}

LkjLpdfGrad lkj_corr_lpdf_grad(const CholeskyCorr& corr, double eta) {
  corr.validate();
  if (!(eta > 0.0)) throw DomainError("lkj_corr_lpdf_grad: eta must be positive");
  LkjLpdfGrad g;
  g.logpdf = 0.0;
  g.d_diag.assign(corr.dim, 0.0);
  // log det Omega = 2 * sum_i log L_ii (row 0 diagonal is fixed at 1)
  for (std::size_t i = 0; i < corr.dim; ++i) {
    const double lii = corr.at(i, i);
    g.logpdf += 2.0 * (eta - 1.0) * std::log(lii);
    g.d_diag[i] = 2.0 * (eta - 1.0) / lii;
  }
  return g;
}

Mvn2LpdfGrad mvn2_lpdf_grad(double x1, double x2, double mean1, double mean2,
                            const CovarianceDecomp& decomp) {
  if (decomp.dim() != 2) throw DomainError("mvn2_lpdf_grad: decomposition must be 2x2");
  decomp.corr.validate();
  const double t1 = decomp.theta[0];
  const double t2 = decomp.theta[1];
  if (!(t1 > 0.0) || !(t2 > 0.0)) throw DomainError("mvn2_lpdf_grad: scales must be positive");
  const double rho = decomp.corr.rho();
  const double omr2 = 1.0 - rho * rho;  // 1 - rho^2 > 0 by construction

  const double a = (x1 - mean1) / t1;
  const double b = (x2 - mean2) / t2;
  const double quad = (a * a - 2.0 * rho * a * b + b * b) / omr2;

  Mvn2LpdfGrad g;
  g.logpdf = -std::log(2.0 * std::numbers::pi) - std::log(t1) - std::log(t2) -
             0.5 * std::log(omr2) - 0.5 * quad;
  const double ga = -(a - rho * b) / omr2;  // d logpdf / d a
  const double gb = -(b - rho * a) / omr2;
  g.d_x1 = ga / t1;
  g.d_x2 = gb / t2;
  g.d_mean1 = -g.d_x1;
  g.d_mean2 = -g.d_x2;
  g.d_theta1 = (-1.0 - ga * a) / t1;
  g.d_theta2 = (-1.0 - gb * b) / t2;
  g.d_rho = rho / omr2 + a * b / omr2 - rho * quad / omr2;
  return g;
}

UniformLpdf uniform_lpdf(double x, double lo, double hi) {
  if (!(lo < hi)) throw DomainError("uniform_lpdf: lo must be < hi");
  UniformLpdf u;
  if (x < lo || x > hi) {
    u.logpdf = -kInf;
    u.in_support = false;
  } else {
    u.logpdf = -std::log(hi - lo);
    u.in_support = true;
  }
  return u;
}

}  // namespace hbma
