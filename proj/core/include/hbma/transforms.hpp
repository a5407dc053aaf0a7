#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hbma/distributions.hpp"

namespace hbma::transforms {

/// x = exp(u); log-Jacobian = u.
struct Positive {
  double value;
  double dvalue_du;
  double log_jacobian;
  double dlogj_du;
};
Positive positive(double u);
double positive_unconstrain(double x);

/// x = lo + (hi-lo) * logistic(u).
struct Bounded {
  double value;
  double dvalue_du;
  double log_jacobian;
  double dlogj_du;
};
Bounded bounded(double u, double lo, double hi);
double bounded_unconstrain(double x, double lo, double hi);

/// rho = tanh(y); log-Jacobian = log(1 - rho^2).
struct Correlation {
  double rho;
  double drho_dy;
  double log_jacobian;
  double dlogj_dy;
};
Correlation correlation(double y);
double correlation_unconstrain(double rho);

/// Canonical stick-breaking map from d(d-1)/2 unconstrained values to a
/// correlation Cholesky factor, with the log-Jacobian of the map. The tape
/// fields feed the reverse pass.
struct CholCorr {
  CholeskyCorr factor;
  double log_jacobian = 0.0;
  std::vector<double> z;      // tanh(y), per below-diagonal element
  std::vector<double> w;      // sqrt(1 - running row sum of squares)
  std::vector<double> s;      // running sum before each element
};
CholCorr chol_corr_constrain(std::span<const double> y, std::size_t dim);
std::vector<double> chol_corr_unconstrain(const CholeskyCorr& factor);

/// Reverse pass: gradient wrt the unconstrained vector given the gradient
/// wrt every packed-lower-triangle entry of the factor (incl. diagonal) and
/// the weight on the log-Jacobian term in the objective.
std::vector<double> chol_corr_backward(const CholCorr& forward, std::span<const double> d_lower,
                                       double d_logj);

}  // namespace hbma::transforms
