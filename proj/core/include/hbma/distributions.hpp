#pragma once

#include <cstddef>
#include <vector>

namespace hbma {

/// Lower-triangular Cholesky factor of a correlation matrix: rows have unit
/// norm and the diagonal is positive, so L L^T has a unit diagonal. All the
/// shipped models use dim 2, but the type supports any dimension.
struct CholeskyCorr {
  std::size_t dim = 0;
  std::vector<double> lower;  // row-major packed lower triangle incl. diagonal

  static CholeskyCorr identity(std::size_t dim);
  /// 2x2 factor [[1,0],[rho, sqrt(1-rho^2)]]; requires |rho| < 1.
  static CholeskyCorr from_rho(double rho);

  double at(std::size_t i, std::size_t j) const;  // 0 above the diagonal
  double rho() const;                             // dim-2 convenience
  /// Dense correlation matrix L L^T, row-major dim x dim.
  std::vector<double> to_matrix() const;
  /// Throws DomainError unless rows are unit-norm with positive diagonal.
  void validate(double tol = 1e-8) const;
};

/// Scale-vector + correlation decomposition V = diag(theta) * Omega * diag(theta).
struct CovarianceDecomp {
  std::vector<double> theta;  // positive scales
  CholeskyCorr corr;

  static CovarianceDecomp from_matrix_2x2(double v11, double v12, double v22);
  std::vector<double> to_matrix() const;  // row-major dim x dim
  std::size_t dim() const { return theta.size(); }
};

/// Results carry the log density and analytic partials; every *_grad
/// function here is finite-difference checked in the test suite.
struct NormalLpdfGrad {
  double logpdf;
  double d_x;
  double d_mean;
  double d_sd;
};
NormalLpdfGrad normal_lpdf_grad(double x, double mean, double sd);
double normal_lpdf(double x, double mean, double sd);

struct HalfCauchyLpdfGrad {
  double logpdf;  // -inf when x <= 0 (out of support)
  double d_x;
  bool in_support;
};
HalfCauchyLpdfGrad half_cauchy_lpdf_grad(double x, double scale);

/// Shape part of the LKJ density on the factor: (eta-1) * log det(L L^T),
/// i.e. 2(eta-1) * sum_i log L_ii. Normalizing constant dropped; the
/// stick-breaking Jacobian lives in the transform layer, not here.
struct LkjLpdfGrad {
  double logpdf;
  std::vector<double> d_diag;  // gradient wrt the diagonal entries of L
};
LkjLpdfGrad lkj_corr_lpdf_grad(const CholeskyCorr& corr, double eta);

struct Mvn2LpdfGrad {
  double logpdf;
  double d_x1, d_x2;
  double d_mean1, d_mean2;
  double d_theta1, d_theta2;
  double d_rho;
};
/// Bivariate normal via the Cholesky factor of the decomposition; no
/// explicit matrix inverse.
Mvn2LpdfGrad mvn2_lpdf_grad(double x1, double x2, double mean1, double mean2,
                            const CovarianceDecomp& decomp);

struct UniformLpdf {
  double logpdf;  // -log(hi-lo) inside, -inf outside
  bool in_support;
};
UniformLpdf uniform_lpdf(double x, double lo, double hi);

}  // namespace hbma
