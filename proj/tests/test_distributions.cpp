#include "hbma/distributions.hpp"

#include <cmath>

#include <doctest.h>

#include "hbma/errors.hpp"
#include "hbma/rng.hpp"
#include "hbma/transforms.hpp"
#include "testutil.hpp"

using namespace hbma;

TEST_CASE("normal log density closed forms") {
  const auto g0 = normal_lpdf_grad(0.0, 0.0, 1.0);
  CHECK(g0.logpdf == doctest::Approx(-0.9189385332).epsilon(1e-9));
  CHECK(g0.d_x == doctest::Approx(0.0));

  const auto g1 = normal_lpdf_grad(1.0, 0.0, 1.0);
  CHECK(g1.d_x == doctest::Approx(-1.0));

  CHECK_THROWS_AS(normal_lpdf_grad(0.0, 0.0, 0.0), DomainError);
  CHECK_THROWS_AS(normal_lpdf_grad(0.0, 0.0, -1.0), DomainError);
}

TEST_CASE("normal gradient matches finite differences") {
  const auto g = normal_lpdf_grad(2.3, 1.1, 0.7);
  const auto fx = [](double x) { return normal_lpdf(x, 1.1, 0.7); };
  const auto fm = [](double m) { return normal_lpdf(2.3, m, 0.7); };
  const auto fs = [](double s) { return normal_lpdf(2.3, 1.1, s); };
  CHECK(testutil::rel_err(g.d_x, testutil::central_diff(fx, 2.3)) < 1e-6);
  CHECK(testutil::rel_err(g.d_mean, testutil::central_diff(fm, 1.1)) < 1e-6);
  CHECK(testutil::rel_err(g.d_sd, testutil::central_diff(fs, 0.7)) < 1e-6);

  Rng rng(42, 0);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.normal(0.0, 3.0);
    const double m = rng.normal(0.0, 3.0);
    const double s = 0.2 + 3.0 * rng.uniform();
    const auto grad = normal_lpdf_grad(x, m, s);
    CHECK(testutil::rel_err(grad.d_x, testutil::central_diff(
                                          [&](double v) { return normal_lpdf(v, m, s); }, x)) <
          1e-6);
    CHECK(testutil::rel_err(grad.d_mean, testutil::central_diff(
                                             [&](double v) { return normal_lpdf(x, v, s); }, m)) <
          1e-6);
    CHECK(testutil::rel_err(grad.d_sd, testutil::central_diff(
                                           [&](double v) { return normal_lpdf(x, m, v); }, s)) <
          1e-6);
  }
}

TEST_CASE("half-Cauchy closed forms and gradient") {
  const auto g = half_cauchy_lpdf_grad(10.0, 10.0);
  CHECK(g.logpdf == doctest::Approx(std::log(1.0 / (10.0 * 3.14159265358979))).epsilon(1e-9));
  CHECK(g.logpdf == doctest::Approx(-3.4473).epsilon(1e-4));
  CHECK(g.d_x == doctest::Approx(-1.0 / 10.0));  // -1/s at x = s

  for (double s : {0.5, 2.5, 10.0}) {
    const auto at_s = half_cauchy_lpdf_grad(s, s);
    CHECK(at_s.d_x == doctest::Approx(-1.0 / s).epsilon(1e-12));
  }

  const auto out = half_cauchy_lpdf_grad(-1.0, 10.0);
  CHECK(!out.in_support);
  CHECK(out.logpdf == -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(half_cauchy_lpdf_grad(1.0, 0.0), DomainError);

  Rng rng(7, 0);
  auto lp = [](double x, double s) { return half_cauchy_lpdf_grad(x, s).logpdf; };
  CHECK(testutil::rel_err(half_cauchy_lpdf_grad(3.7, 10.0).d_x,
                          testutil::central_diff([&](double v) { return lp(v, 10.0); }, 3.7)) <
        1e-6);
  for (int i = 0; i < 100; ++i) {
    const double s = 0.5 + 10.0 * rng.uniform();
    const double x = 0.1 + 5.0 * rng.uniform();
    CHECK(testutil::rel_err(half_cauchy_lpdf_grad(x, s).d_x,
                            testutil::central_diff([&](double v) { return lp(v, s); }, x)) < 1e-6);
  }
}

TEST_CASE("uniform log density") {
  CHECK(uniform_lpdf(5.0, 0.0, 100000.0).logpdf == doctest::Approx(-11.5129).epsilon(1e-4));
  CHECK(!uniform_lpdf(-1.0, 0.0, 100000.0).in_support);
  CHECK(uniform_lpdf(0.5, 0.0, 1.0).logpdf == doctest::Approx(0.0));
  CHECK_THROWS_AS(uniform_lpdf(0.0, 1.0, 1.0), DomainError);
}

TEST_CASE("LKJ density on the factor") {
  // eta = 1: uniform over correlation matrices
  const auto a = lkj_corr_lpdf_grad(CholeskyCorr::from_rho(0.3), 1.0);
  const auto b = lkj_corr_lpdf_grad(CholeskyCorr::from_rho(-0.8), 1.0);
  CHECK(a.logpdf == doctest::Approx(b.logpdf).epsilon(1e-15));
  CHECK(a.logpdf == doctest::Approx(0.0));

  // 2x2 closed form: (eta-1) log(1 - rho^2)
  const auto c = lkj_corr_lpdf_grad(CholeskyCorr::from_rho(0.5), 3.0);
  CHECK(c.logpdf == doctest::Approx(2.0 * std::log(0.75)).epsilon(1e-12));
  CHECK(c.logpdf == doctest::Approx(-0.575364).epsilon(1e-5));

  CHECK_THROWS_AS(lkj_corr_lpdf_grad(CholeskyCorr::from_rho(0.5), 0.0), DomainError);
}

TEST_CASE("LKJ + stick-breaking gradient matches finite differences") {
  Rng rng(11, 0);
  for (std::size_t dim : {2u, 3u, 4u}) {
    const std::size_t n_free = dim * (dim - 1) / 2;
    for (int rep = 0; rep < 40; ++rep) {
      std::vector<double> y(n_free);
      for (auto& v : y) v = rng.normal(0.0, 0.8);
      const double eta = 0.5 + 3.0 * rng.uniform();

      // objective: LKJ shape density + transform log-Jacobian, as composed
      // inside the model kernels
      auto objective = [&](const std::vector<double>& yv) {
        const auto fwd = transforms::chol_corr_constrain(yv, dim);
        return lkj_corr_lpdf_grad(fwd.factor, eta).logpdf + fwd.log_jacobian;
      };

      const auto fwd = transforms::chol_corr_constrain(y, dim);
      const auto lkj = lkj_corr_lpdf_grad(fwd.factor, eta);
      std::vector<double> d_lower(dim * (dim + 1) / 2, 0.0);
      for (std::size_t i = 0; i < dim; ++i)
        d_lower[i * (i + 1) / 2 + i] = lkj.d_diag[i];
      const auto dy = transforms::chol_corr_backward(fwd, d_lower, 1.0);

      for (std::size_t i = 0; i < n_free; ++i) {
        const double fd = testutil::central_diff_at(objective, y, i);
        CHECK(testutil::rel_err(dy[i], fd) < 1e-6);
      }
    }
  }
}

TEST_CASE("bivariate normal closed forms") {
  CovarianceDecomp iso;
  iso.theta = {1.0, 1.0};
  iso.corr = CholeskyCorr::from_rho(0.0);
  const auto g = mvn2_lpdf_grad(0.0, 0.0, 0.0, 0.0, iso);
  CHECK(g.logpdf == doctest::Approx(-std::log(2.0 * 3.14159265358979)).epsilon(1e-12));

  // rho = 0 factorizes into two univariate normals
  CovarianceDecomp d;
  d.theta = {2.0, 0.5};
  d.corr = CholeskyCorr::from_rho(0.0);
  const auto joint = mvn2_lpdf_grad(1.3, -0.4, 0.2, 0.1, d);
  const double split = normal_lpdf(1.3, 0.2, 2.0) + normal_lpdf(-0.4, 0.1, 0.5);
  CHECK(std::abs(joint.logpdf - split) < 1e-12);
}

TEST_CASE("bivariate normal matches the quadratic-form oracle") {
  // independent route: explicit inverse of V
  auto direct = [](double x1, double x2, double m1, double m2, double v11, double v12,
                   double v22) {
    const double det = v11 * v22 - v12 * v12;
    const double a = x1 - m1, b = x2 - m2;
    const double quad = (v22 * a * a - 2.0 * v12 * a * b + v11 * b * b) / det;
    return -std::log(2.0 * 3.14159265358979) - 0.5 * std::log(det) - 0.5 * quad;
  };
  Rng rng(3, 0);
  for (int i = 0; i < 100; ++i) {
    const double t1 = 0.3 + 2.0 * rng.uniform();
    const double t2 = 0.3 + 2.0 * rng.uniform();
    const double rho = 1.8 * rng.uniform() - 0.9;
    CovarianceDecomp d;
    d.theta = {t1, t2};
    d.corr = CholeskyCorr::from_rho(rho);
    const double x1 = rng.normal(0, 2), x2 = rng.normal(0, 2);
    const double m1 = rng.normal(0, 1), m2 = rng.normal(0, 1);
    const auto g = mvn2_lpdf_grad(x1, x2, m1, m2, d);
    const double want = direct(x1, x2, m1, m2, t1 * t1, t1 * t2 * rho, t2 * t2);
    CHECK(std::abs(g.logpdf - want) < 1e-10);
  }

  // fixed case from the contract: rho = 0.6, theta = (2, 0.5)
  CovarianceDecomp d;
  d.theta = {2.0, 0.5};
  d.corr = CholeskyCorr::from_rho(0.6);
  const auto g = mvn2_lpdf_grad(0.7, -1.1, 0.3, 0.2, d);
  CHECK(std::abs(g.logpdf - direct(0.7, -1.1, 0.3, 0.2, 4.0, 0.6, 0.25)) < 1e-10);
}

TEST_CASE("bivariate normal gradients match finite differences") {
  Rng rng(5, 0);
  for (int i = 0; i < 100; ++i) {
    const double t1 = 0.3 + 2.0 * rng.uniform();
    const double t2 = 0.3 + 2.0 * rng.uniform();
    const double rho = 1.6 * rng.uniform() - 0.8;
    const double x1 = rng.normal(0, 2), x2 = rng.normal(0, 2);
    const double m1 = rng.normal(0, 1), m2 = rng.normal(0, 1);
    auto lp = [&](double a1, double a2, double b1, double b2, double s1, double s2, double r) {
      CovarianceDecomp d;
      d.theta = {s1, s2};
      d.corr = CholeskyCorr::from_rho(r);
      return mvn2_lpdf_grad(a1, a2, b1, b2, d).logpdf;
    };
    CovarianceDecomp d;
    d.theta = {t1, t2};
    d.corr = CholeskyCorr::from_rho(rho);
    const auto g = mvn2_lpdf_grad(x1, x2, m1, m2, d);
    CHECK(testutil::rel_err(g.d_x1, testutil::central_diff([&](double v) {
                              return lp(v, x2, m1, m2, t1, t2, rho);
                            }, x1)) < 1e-6);
    CHECK(testutil::rel_err(g.d_x2, testutil::central_diff([&](double v) {
                              return lp(x1, v, m1, m2, t1, t2, rho);
                            }, x2)) < 1e-6);
    CHECK(testutil::rel_err(g.d_mean1, testutil::central_diff([&](double v) {
                              return lp(x1, x2, v, m2, t1, t2, rho);
                            }, m1)) < 1e-6);
    CHECK(testutil::rel_err(g.d_mean2, testutil::central_diff([&](double v) {
                              return lp(x1, x2, m1, v, t1, t2, rho);
                            }, m2)) < 1e-6);
    CHECK(testutil::rel_err(g.d_theta1, testutil::central_diff([&](double v) {
                              return lp(x1, x2, m1, m2, v, t2, rho);
                            }, t1)) < 1e-6);
    CHECK(testutil::rel_err(g.d_theta2, testutil::central_diff([&](double v) {
                              return lp(x1, x2, m1, m2, t1, v, rho);
                            }, t2)) < 1e-6);
    CHECK(testutil::rel_err(g.d_rho, testutil::central_diff([&](double v) {
                              return lp(x1, x2, m1, m2, t1, t2, v);
                            }, rho)) < 1e-6);
  }
}

TEST_CASE("covariance decomposition round trip") {
  Rng rng(9, 0);
  for (int i = 0; i < 100; ++i) {
    const double t1 = 0.2 + 3.0 * rng.uniform();
    const double t2 = 0.2 + 3.0 * rng.uniform();
    const double rho = 1.9 * rng.uniform() - 0.95;
    const double v11 = t1 * t1, v22 = t2 * t2, v12 = t1 * t2 * rho;
    const auto d = CovarianceDecomp::from_matrix_2x2(v11, v12, v22);
    const auto back = d.to_matrix();
    CHECK(std::abs(back[0] - v11) < 1e-12 * std::max(1.0, v11));
    CHECK(std::abs(back[1] - v12) < 1e-12 * std::max(1.0, std::abs(v12)));
    CHECK(std::abs(back[2] - v12) < 1e-12 * std::max(1.0, std::abs(v12)));
    CHECK(std::abs(back[3] - v22) < 1e-12 * std::max(1.0, v22));
  }
  CHECK_THROWS_AS(CovarianceDecomp::from_matrix_2x2(1.0, 1.2, 1.0), DomainError);
  CHECK_THROWS_AS(CovarianceDecomp::from_matrix_2x2(-1.0, 0.0, 1.0), DomainError);
}

TEST_CASE("scalar transforms round trip with correct Jacobians") {
  Rng rng(13, 0);
  for (int i = 0; i < 100; ++i) {
    const double u = rng.normal(0.0, 2.0);

    const auto p = transforms::positive(u);
    CHECK(std::abs(transforms::positive_unconstrain(p.value) - u) < 1e-10);
    CHECK(testutil::rel_err(p.log_jacobian, std::log(std::abs(testutil::central_diff(
                                                [](double v) { return std::exp(v); }, u)))) <
          1e-6);

    const auto b = transforms::bounded(u, 0.5, 9.5);
    CHECK(std::abs(transforms::bounded_unconstrain(b.value, 0.5, 9.5) - u) < 1e-8);
    const auto bmap = [](double v) { return 0.5 + 9.0 / (1.0 + std::exp(-v)); };
    CHECK(testutil::rel_err(b.log_jacobian,
                            std::log(std::abs(testutil::central_diff(bmap, u)))) < 1e-6);

    const auto c = transforms::correlation(u);
    CHECK(std::abs(transforms::correlation_unconstrain(c.rho) - u) < 1e-8);
    CHECK(testutil::rel_err(c.log_jacobian, std::log(std::abs(testutil::central_diff(
                                                [](double v) { return std::tanh(v); }, u)))) <
          1e-6);
  }
}

TEST_CASE("stick-breaking correlation factor round trips and is valid") {
  Rng rng(17, 0);
  for (std::size_t dim : {2u, 3u, 5u}) {
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> y(dim * (dim - 1) / 2);
      for (auto& v : y) v = rng.normal(0.0, 1.0);
      const auto fwd = transforms::chol_corr_constrain(y, dim);
      fwd.factor.validate();
      const auto back = transforms::chol_corr_unconstrain(fwd.factor);
      for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(back[i] - y[i]) < 1e-10);

      const auto omega = fwd.factor.to_matrix();
      for (std::size_t i = 0; i < dim; ++i)
        CHECK(std::abs(omega[i * dim + i] - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("stick-breaking log-Jacobian matches the finite-difference determinant") {
  // the free elements of the factor, in construction order
  auto pack = [](const CholeskyCorr& f) {
    std::vector<double> out;
    for (std::size_t i = 1; i < f.dim; ++i)
      for (std::size_t j = 0; j < i; ++j) out.push_back(f.at(i, j));
    return out;
  };
  Rng rng(19, 0);
  for (std::size_t dim : {2u, 3u}) {
    const std::size_t n = dim * (dim - 1) / 2;
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> y(n);
      for (auto& v : y) v = rng.normal(0.0, 0.7);
      // Jacobian matrix of free factor elements wrt y by finite differences
      std::vector<std::vector<double>> jac(n, std::vector<double>(n));
      for (std::size_t col = 0; col < n; ++col) {
        auto yp = y, ym = y;
        const double h = 1e-6;
        yp[col] += h;
        ym[col] -= h;
        const auto up = pack(transforms::chol_corr_constrain(yp, dim).factor);
        const auto dn = pack(transforms::chol_corr_constrain(ym, dim).factor);
        for (std::size_t row = 0; row < n; ++row) jac[row][col] = (up[row] - dn[row]) / (2.0 * h);
      }
      // log |det| by Gaussian elimination
      double log_det = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t pivot = i;
        for (std::size_t r = i + 1; r < n; ++r)
          if (std::abs(jac[r][i]) > std::abs(jac[pivot][i])) pivot = r;
        std::swap(jac[i], jac[pivot]);
        log_det += std::log(std::abs(jac[i][i]));
        for (std::size_t r = i + 1; r < n; ++r) {
          const double f = jac[r][i] / jac[i][i];
          for (std::size_t c = i; c < n; ++c) jac[r][c] -= f * jac[i][c];
        }
      }
      const auto fwd = transforms::chol_corr_constrain(y, dim);
      CHECK(testutil::rel_err(fwd.log_jacobian, log_det) < 1e-6);
    }
  }
}
