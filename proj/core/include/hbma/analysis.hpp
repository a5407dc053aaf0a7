#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hbma/data.hpp"
#include "hbma/sampler.hpp"

namespace hbma {

/// Conventional pooling factor: the share of a site estimator's variability
/// attributable to sampling noise rather than genuine heterogeneity.
double pooling_factor(double se_k, double sigma_tau_sq_post_mean);

/// Mixing weight expressing the site posterior mean as a convex combination
/// of the generalized effect and the site's no-pooling estimate. Clamped to
/// [0,1]; undefined when the two anchors coincide.
struct BruteForcePooling {
  double omega_b = 0.0;
  bool clamped = false;
  bool defined = true;
};
BruteForcePooling brute_force_pooling(double post_mean_tau_k, double post_mean_tau,
                                      double no_pool_tau_k);

/// Gelman-Pardoe generalized pooling factor over error draws eps[draw][site].
struct GeneralizedPooling {
  double lambda = 0.0;
  bool defined = true;
};
GeneralizedPooling generalized_pooling(const std::vector<std::vector<double>>& eps_draws);

/// Empirical quantile, linear interpolation (type 7).
double quantile_type7(std::vector<double> values, double p);
double quantile_sorted_type7(const std::vector<double>& sorted, double p);

struct QuantileRow {
  std::string name;
  double mean, q025, q25, q50, q75, q975;
};
/// One row per column: mean plus the 2.5/25/50/75/97.5 percent quantiles,
/// in the caller-provided row order.
std::vector<QuantileRow> quantile_table(const std::vector<std::vector<double>>& columns,
                                        const std::vector<std::string>& names);

struct PredictiveSummary {
  std::vector<double> mu_next;  // empty for families without a mu block
  std::vector<double> tau_next;
  std::size_t rejected = 0;     // non-PD covariance draws (should stay 0)
  double tau_mean = 0.0;
  double tau_sd = 0.0;
  std::vector<QuantileRow> quantiles;
  std::vector<std::pair<double, double>> tau_tail;  // threshold -> P(tau_next < t)
};

/// Next-site draws from the bivariate parent: one predictive draw per
/// posterior draw of (mu, tau, V), V supplied via its decomposition.
PredictiveSummary posterior_predictive_next_site(
    const std::vector<double>& mu, const std::vector<double>& tau,
    const std::vector<double>& theta1, const std::vector<double>& theta2,
    const std::vector<double>& rho, std::uint64_t seed,
    const std::vector<double>& tail_thresholds = {0.0});

/// Univariate variant for families with a scalar heterogeneity scale.
PredictiveSummary posterior_predictive_next_site(const std::vector<double>& tau,
                                                 const std::vector<double>& sigma_tau,
                                                 std::uint64_t seed,
                                                 const std::vector<double>& tail_thresholds = {
                                                     0.0});

struct OlsEstimate {
  std::string label;
  double estimate = 0.0;
  double se = 0.0;  // heteroskedasticity-robust (HC1)
  double n0 = 0.0, n1 = 0.0;
  bool ok = true;  // false when an arm is too small to estimate
};
struct OlsComparators {
  std::vector<OlsEstimate> per_site;  // no-pooling regressions
  OlsEstimate pooled;                 // single full-pooling regression
};
OlsComparators ols_comparators(const MicroDataset& data);
/// Control-arm means with classical standard errors (for mu-block pooling).
std::vector<OlsEstimate> control_mean_estimates(const MicroDataset& data);

struct PoolingEntry {
  std::string site;
  double no_pool_estimate = 0.0;
  double se_hat = 0.0;
  double post_mean_site = 0.0;
  double omega = 0.0;
  double omega_b = 0.0;
  bool omega_b_clamped = false;
  bool omega_b_defined = true;
};
struct PoolingBlock {
  std::vector<PoolingEntry> entries;
  double sigma_sq_post_mean = 0.0;
  double lambda = 0.0;
  bool lambda_defined = true;
  double avg_omega = 0.0;
  double avg_omega_b = 0.0;
  std::size_t clamp_events = 0;
};
struct PoolingReport {
  PoolingBlock tau;
  std::optional<PoolingBlock> mu;
};
/// Assemble all pooling metrics for a fit. Summary families read the
/// no-pooling estimates from the data; microdata families use per-site
/// robust OLS.
PoolingReport build_pooling_report(const PosteriorDraws& draws, const SummaryDataset* summary,
                                   const MicroDataset* micro);

struct RidgeCovariateStat {
  std::string name;
  double mean_abs_beta = 0.0;
  double abs_q025 = 0.0, abs_q975 = 0.0;
  std::size_t rank = 0;  // 1 = largest magnitude
};
struct RidgePenaltyBlock {
  double penalty = 0.0;
  bool converged = true;
  bool ties = false;
  bool order_meaningful = true;  // top vs runner-up intervals disjoint
  std::vector<RidgeCovariateStat> covariates;  // sorted by magnitude, desc
};
struct RidgeReport {
  std::vector<RidgePenaltyBlock> penalties;  // converged fits only
  std::vector<double> excluded_penalties;    // unconverged, with flag
  std::vector<std::string> ordering;         // covariate order at the first penalty
  bool ordering_stable = false;
  bool order_meaningful = false;
};
/// Magnitude ordering of the tau-equation coefficients across a penalty
/// sweep; verdict is stable iff the ordering is identical at every penalty.
RidgeReport ridge_coefficient_report(
    const std::vector<std::pair<double, const PosteriorDraws*>>& fits,
    const std::vector<std::string>& covariate_names);

struct DensityCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};
/// Gaussian kernel density with Silverman bandwidth, for plot-ready output.
DensityCurve kde_density(const std::vector<double>& draws, std::size_t grid_points = 256);

}  // namespace hbma
