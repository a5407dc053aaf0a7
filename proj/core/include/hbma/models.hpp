#pragma once

#include <span>
#include <string>
#include <vector>

#include "hbma/data.hpp"
#include "hbma/sampler.hpp"

namespace hbma {

enum class Family {
  rubin_summary,
  joint_summary,
  full_data_joint,
  full_data_independent,
  interactions,
  site_ridge,
};

std::string family_name(Family family);
Family family_from_name(const std::string& name);
const std::vector<Family>& all_families();

struct PriorConfig {
  double hypermean_sd = 1000.0;   // mu, tau ~ N(0, hypermean_sd^2)
  double scale_cauchy = 10.0;     // scales ~ half-Cauchy(0, scale_cauchy)
  double scale_upper = 0.0;       // > 0 truncates the scale prior above (SBC use)
  double lkj_eta = 3.0;           // correlation ~ LKJ(eta)
  double sigma_y_lo = 0.0;        // sigma_y ~ U(lo, hi)
  double sigma_y_hi = 100000.0;
  double ridge_sd = 0.5;          // beta rows ~ N(0, ridge_sd) -- sd, not variance
};

struct RidgeOptions {
  /// Drop this column from the tau-equation regressors (it stays in the mu
  /// equation). Empty string disables the variant.
  std::string omit_from_tau;
};

struct ModelSpec {
  Family family = Family::rubin_summary;
  PriorConfig prior;
  std::vector<std::string> interaction_covariates;
  RidgeOptions ridge;
};

/// Immutable views of whatever data a family needs; make_target validates
/// that the required pieces are present.
struct DataBundle {
  const MicroDataset* micro = nullptr;
  const SummaryDataset* summary = nullptr;
  const SiteCovariateTable* site_covariates = nullptr;  // standardized
  const CellDataset* cells = nullptr;
};

/// Named slices of the unconstrained parameter vector.
struct ParamSlice {
  std::string name;
  std::size_t offset;
  std::size_t size;
};
struct ParamLayout {
  std::size_t dim = 0;
  std::vector<ParamSlice> slices;
  std::size_t offset(const std::string& name) const;  // throws DomainError
};
ParamLayout layout_for(const ModelSpec& spec, const DataBundle& data);

/// Per site x arm sufficient statistics (count, sum, sum of squares) for
/// Gaussian row likelihoods: one O(N) pass, then O(K) per evaluation.
struct ArmStats {
  double n0 = 0, sum0 = 0, sumsq0 = 0;  // control
  double n1 = 0, sum1 = 0, sumsq1 = 0;  // treated
};
std::vector<ArmStats> compute_arm_stats(const MicroDataset& data);
/// [site][cell] stats for the interactions likelihood.
std::vector<std::vector<ArmStats>> compute_cell_stats(const CellDataset& cells);

/// Log-posterior kernels (density + gradient on the unconstrained scale,
/// Jacobians included). All are finite-difference checked in the tests.
double rubin_lp(std::span<const double> u, std::span<double> grad, const SummaryDataset& data,
                const PriorConfig& prior);
double joint_summary_lp(std::span<const double> u, std::span<double> grad,
                        const SummaryDataset& data, const PriorConfig& prior);
double full_data_lp(std::span<const double> u, std::span<double> grad,
                    const std::vector<ArmStats>& stats, const PriorConfig& prior);
double independent_full_data_lp(std::span<const double> u, std::span<double> grad,
                                const std::vector<ArmStats>& stats, const PriorConfig& prior);
double interactions_lp(std::span<const double> u, std::span<double> grad,
                       const std::vector<std::vector<ArmStats>>& stats, const PriorConfig& prior);
double ridge_site_lp(std::span<const double> u, std::span<double> grad,
                     const std::vector<ArmStats>& stats,
                     const std::vector<std::vector<double>>& covariates_mu,
                     const std::vector<std::vector<double>>& covariates_tau,
                     const PriorConfig& prior);

/// Conditional posterior mean of a site effect given fixed hyperparameters:
/// the precision-weighted combination of the hypermean and the site estimate.
double conditional_site_mean(double tau_hat, double se, double tau, double sigma_tau);

/// Bundle a kernel with its constrained readout. The returned target owns
/// copies of everything it needs and is safe to share across chains.
TargetDensity make_target(const ModelSpec& spec, const DataBundle& data);

}  // namespace hbma
