#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hbma {

/// A differentiable log density on an unconstrained space plus the readout
/// that maps unconstrained points to named constrained parameters. The log
/// density must already include all transform Jacobians.
struct TargetDensity {
  std::size_t dim = 0;
  /// Returns log density; writes the gradient (same length as the point).
  std::function<double(std::span<const double>, std::span<double>)> logp_grad;
  std::vector<std::string> param_names;
  std::function<std::vector<double>(std::span<const double>)> constrain;
};

struct SamplerConfig {
  std::size_t chains = 4;
  std::size_t warmup = 1000;
  std::size_t iters = 1000;
  double target_accept = 0.8;
  std::size_t max_tree_depth = 10;
  std::uint64_t seed = 0;
  double init_radius = 2.0;  // unconstrained init drawn from U(-r, r)^dim
  bool adapt_metric = true;
  bool check_gradient = true;  // finite-difference self-check at the init point
  bool parallel_chains = true;

  void validate() const;  // throws ValidationError
};

struct ParamDiagnostics {
  double mean = 0.0;
  double sd = 0.0;
  double rhat = 0.0;  // NaN when degenerate
  double ess = 0.0;
  double mcse = 0.0;
};

struct PosteriorDraws {
  std::vector<std::string> names;
  std::size_t n_chains = 0;
  std::size_t n_iters = 0;           // retained per chain
  std::vector<double> values;        // [chain][iter][param]
  std::vector<ParamDiagnostics> diagnostics;
  std::size_t divergences = 0;
  double divergence_rate = 0.0;
  bool divergence_flagged = false;   // rate > 10%
  std::vector<double> step_size;     // adapted step size per chain
  std::uint64_t seed = 0;
  bool converged = false;            // R-hat < 1.1 on every non-constant parameter
  double max_rhat = 0.0;

  double value(std::size_t chain, std::size_t iter, std::size_t param) const {
    return values[(chain * n_iters + iter) * names.size() + param];
  }
  std::optional<std::size_t> index_of(const std::string& name) const;
  std::size_t require_index(const std::string& name) const;
  /// All chains concatenated, chain-major.
  std::vector<double> merged_column(std::size_t param) const;
  std::vector<std::vector<double>> chain_columns(std::size_t param) const;
  void write_csv(const std::string& path) const;
};

/// Split-chain potential scale reduction factor. Each chain is halved;
/// returns NaN for degenerate inputs (zero within-chain variance).
double split_rhat(const std::vector<std::vector<double>>& chains);

struct EssMcse {
  double ess;
  double mcse;
};
/// Effective sample size via the autocorrelation sum with Geyer's initial
/// monotone positive sequence, on split chains; MCSE = sd / sqrt(ESS).
EssMcse ess_and_mcse(const std::vector<std::vector<double>>& chains);

/// Multi-chain NUTS with dual-averaging step adaptation and (optionally)
/// diagonal metric adaptation during warmup. Deterministic given
/// (seed, config, target); chains use fixed split streams of the seed.
PosteriorDraws nuts_sample(const TargetDensity& target, const SamplerConfig& config);

}  // namespace hbma
