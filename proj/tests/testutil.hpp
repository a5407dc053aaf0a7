#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "hbma/rng.hpp"

namespace testutil {

inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
  const double scale = std::max({1.0, std::abs(got), std::abs(want)});
  return std::abs(got - want) / scale;
}

// central finite difference of a multivariate function along coordinate i
inline double central_diff_at(const std::function<double(const std::vector<double>&)>& f,
                              std::vector<double> x, std::size_t i, double h = 1e-6) {
  const double xi = x[i];
  x[i] = xi + h;
  const double up = f(x);
  x[i] = xi - h;
  const double dn = f(x);
  return (up - dn) / (2.0 * h);
}

}  // namespace testutil
