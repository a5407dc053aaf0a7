#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hbma/data.hpp"
#include "hbma/models.hpp"
#include "hbma/sampler.hpp"

namespace hbma {

/// Deterministic 2-d quadrature grid over (tau, sigma_tau). Site effects
/// integrate out analytically, so two dimensions suffice for any K.
struct GridSpec {
  double tau_lo = 0.0, tau_hi = 0.0;
  std::size_t tau_points = 0;
  double sigma_lo = 0.0, sigma_hi = 0.0;
  std::size_t sigma_points = 0;

  void validate() const;  // bounds ordered, total points <= 1e8
  /// Fraction of the (possibly truncated) prior mass inside the bounds.
  double prior_mass_covered(const PriorConfig& prior) const;
  /// Data-adaptive default: tau spans the estimates plus 10 standard
  /// errors (and the hypermean prior's central 99.9% when it is informative
  /// at desk scale); sigma spans (0, upper] with a generous upper bound.
  static GridSpec for_summaries(const SummaryDataset& data, const PriorConfig& prior,
                                std::size_t points_per_dim = 400);
};

struct QuadratureMoments {
  double mean = 0.0;
  double sd = 0.0;
  double q025 = 0.0, q50 = 0.0, q975 = 0.0;
};
struct QuadratureResult {
  QuadratureMoments tau;
  QuadratureMoments sigma_tau;
  std::vector<QuadratureMoments> tau_k;
  double boundary_mass = 0.0;  // posterior mass on the outermost grid cells
};
/// Reference posterior for the scalar random-effects model by trapezoid
/// integration; K <= 3 guard keeps the conjugate-conditional site block
/// cheap. Errors when more than 0.1% of the mass sits on the boundary.
QuadratureResult quadrature_rubin_posterior(const SummaryDataset& data, const GridSpec& grid,
                                            const PriorConfig& prior);

/// Generating values for synthetic datasets; every field is recorded so
/// recovery checks can compare against the exact truth.
struct SyntheticTruth {
  std::uint64_t seed = 0;
  std::size_t n_sites = 5;
  std::size_t rows_per_site = 100;

  double mu = 0.0;
  double tau = 0.0;
  double sigma_mu = 1.0;   // parent scale of the site control means
  double sigma_tau = 1.0;  // parent scale of the site effects
  double rho = 0.0;        // parent correlation

  std::vector<double> sigma_y;  // per-site outcome scale, cycled; default {1}
  std::vector<double> se_tau;   // summary-data standard errors, cycled
  std::vector<double> se_mu;    // enables the mu block when nonempty

  // interactions: per-cell parent values (little-endian cell order)
  std::vector<std::string> covariate_names;
  std::vector<double> cell_mu, cell_tau, cell_sigma_mu, cell_sigma_tau;

  // site-covariate regression structure
  std::vector<std::vector<double>> site_covariates;  // [column][site]
  std::vector<double> beta_mu, beta_tau;
};

SummaryDataset simulate_summary_data(const SyntheticTruth& truth);
MicroDataset simulate_micro_data(const SyntheticTruth& truth);

/// Simulation-based calibration. Truths are drawn from the fit priors
/// (scale priors truncated via PriorConfig::scale_upper so draws stay at
/// desk scale); generation and fitting must share the same PriorConfig for
/// the rank-uniformity theorem to apply.
struct SbcConfig {
  Family family = Family::rubin_summary;
  std::size_t replications = 200;
  std::size_t n_sites = 5;
  std::size_t rows_per_site = 50;
  std::vector<double> se_tau = {1.0};
  std::vector<double> se_mu = {};  // joint_summary only
  std::uint64_t seed = 0;
  std::size_t ranks = 99;  // thinned posterior draws per replication
  std::size_t bins = 20;
  SamplerConfig sampler;  // chains/iters default to a small calibrated run
  PriorConfig prior;      // shared by generation and fit
  std::size_t threads = 0;
  /// Fault-injection knob for harness self-tests: the fit sees standard
  /// errors scaled by this factor while data are generated at scale 1.
  double fault_se_scale = 1.0;

  SbcConfig();  // fills the small-run sampler defaults
};
struct SbcParamResult {
  std::string name;
  std::vector<std::size_t> bin_counts;
  double chi_square = 0.0;
  double p_value = 0.0;
};
struct SbcReport {
  std::vector<SbcParamResult> params;
  std::size_t replications = 0;
  std::size_t included = 0;
  std::size_t excluded = 0;  // unconverged or failed fits
  double exclusion_rate = 0.0;
  bool pass(double p_threshold = 0.01, double max_exclusion_rate = 0.05) const;
  std::string to_json() const;
};
SbcReport sbc_run(const SbcConfig& config);

/// Bounded prior set used by the SBC harness and other desk-scale checks.
PriorConfig sbc_default_prior();

/// Upper tail of the chi-square distribution (regularized incomplete gamma).
double chi_square_p_value(double statistic, double dof);

}  // namespace hbma
