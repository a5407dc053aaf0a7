#include "hbma/transforms.hpp"

#include <cmath>

#include "hbma/errors.hpp"

namespace hbma::transforms {

namespace {
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
}  // namespace

Positive positive(double u) {
  Positive p;
  p.value = std::exp(u);
  p.dvalue_du = p.value;
  p.log_jacobian = u;
  p.dlogj_du = 1.0;
  return p;
}

double positive_unconstrain(double x) {
  if (!(x > 0.0)) throw DomainError("positive_unconstrain: x must be positive");
  return std::log(x);
}

Bounded bounded(double u, double lo, double hi) {
  if (!(lo < hi)) throw DomainError("bounded transform: lo must be < hi");
  const double s = 1.0 / (1.0 + std::exp(-u));
  Bounded b;
  b.value = lo + (hi - lo) * s;
  b.dvalue_du = (hi - lo) * s * (1.0 - s);
  b.log_jacobian = std::log(hi - lo) - softplus(u) - softplus(-u);
  b.dlogj_du = 1.0 - 2.0 * s;
  return b;
}

double bounded_unconstrain(double x, double lo, double hi) {
  if (!(lo < x && x < hi)) throw DomainError("bounded_unconstrain: x outside (lo, hi)");
  const double s = (x - lo) / (hi - lo);
  return std::log(s) - std::log1p(-s);
}

Correlation correlation(double y) {
  Correlation c;
  c.rho = std::tanh(y);
  c.drho_dy = 1.0 - c.rho * c.rho;
  c.log_jacobian = std::log(c.drho_dy);
  c.dlogj_dy = -2.0 * c.rho;
  return c;
}

double correlation_unconstrain(double rho) {
  if (!(std::abs(rho) < 1.0)) throw DomainError("correlation_unconstrain: |rho| must be < 1");
  return std::atanh(rho);
}

CholCorr chol_corr_constrain(std::span<const double> y, std::size_t dim) {
  const std::size_t n_free = dim * (dim - 1) / 2;
  if (y.size() != n_free) throw DomainError("chol_corr_constrain: wrong unconstrained length");
  CholCorr out;
  out.factor.dim = dim;
  out.factor.lower.assign(dim * (dim + 1) / 2, 0.0);
  out.z.resize(n_free);
  out.w.resize(n_free);
  out.s.resize(n_free);

  std::size_t idx = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    double sum_sq = 0.0;
    for (std::size_t j = 0; j < i; ++j, ++idx) {
      const double z = std::tanh(y[idx]);
      const double w = std::sqrt(1.0 - sum_sq);
      out.z[idx] = z;
      out.w[idx] = w;
      out.s[idx] = sum_sq;
      const double l = z * w;
      out.factor.lower[i * (i + 1) / 2 + j] = l;
      out.log_jacobian += std::log1p(-z * z) + 0.5 * std::log1p(-sum_sq);
      sum_sq += l * l;
    }
    out.factor.lower[i * (i + 1) / 2 + i] = std::sqrt(1.0 - sum_sq);
  }
  return out;
}

std::vector<double> chol_corr_unconstrain(const CholeskyCorr& factor) {
  factor.validate();
  const std::size_t dim = factor.dim;
  std::vector<double> y;
  y.reserve(dim * (dim - 1) / 2);
  for (std::size_t i = 1; i < dim; ++i) {
    double sum_sq = 0.0;
    for (std::size_t j = 0; j < i; ++j) {
      const double w = std::sqrt(1.0 - sum_sq);
      const double l = factor.at(i, j);
      y.push_back(std::atanh(l / w));
      sum_sq += l * l;
    }
  }
  return y;
}

std::vector<double> chol_corr_backward(const CholCorr& forward, std::span<const double> d_lower,
                                       double d_logj) {
  const std::size_t dim = forward.factor.dim;
  if (d_lower.size() != dim * (dim + 1) / 2)
    throw DomainError("chol_corr_backward: wrong gradient length");
  std::vector<double> dy(dim * (dim - 1) / 2, 0.0);

  std::size_t row_start = 0;  // index of the row's first free element
  for (std::size_t i = 1; i < dim; ++i) {
    // running sum gradient, backward from the diagonal entry
    const double lii = forward.factor.at(i, i);
    double g_s = d_lower[i * (i + 1) / 2 + i] * (lii > 0.0 ? -0.5 / lii : 0.0);
    for (std::size_t j = i; j-- > 0;) {
      const std::size_t idx = row_start + j;
      const double z = forward.z[idx];
      const double w = forward.w[idx];
      const double s = forward.s[idx];
      const double l = forward.factor.at(i, j);
      const double g_l = d_lower[i * (i + 1) / 2 + j] + g_s * 2.0 * l;
      const double g_z = g_l * w;
      const double g_w = g_l * z;
      // s feeds the next element's sum, w, and the 0.5*log(1-s) Jacobian term
      g_s = g_s + g_w * (-0.5 / w) + d_logj * (-0.5 / (1.0 - s));
      dy[idx] = g_z * (1.0 - z * z) + d_logj * (-2.0 * z);
    }
    row_start += i;
  }
  return dy;
}

}  // namespace hbma::transforms
