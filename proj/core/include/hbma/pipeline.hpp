#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hbma/models.hpp"

namespace hbma {

inline constexpr const char* kVersion = "0.1.0";

/// Process exit codes; distinct per failure class.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitIoError = 3,
  kExitConvergenceError = 4,
};

struct RunConfig {
  std::string micro_data;
  std::string summary_data;
  std::string site_covariates;
  std::vector<std::string> outcomes;  // microdata outcome columns
  std::vector<std::string> families = {"rubin_summary"};

  std::uint64_t seed = 0;
  std::size_t chains = 4;
  std::size_t warmup = 1000;
  std::size_t iters = 1000;
  double target_accept = 0.8;
  std::size_t max_tree_depth = 10;
  double init_radius = 2.0;

  PriorConfig prior;

  std::vector<std::string> interaction_covariates;
  std::size_t max_interaction_covariates = 4;

  std::vector<double> ridge_sweep = {0.25, 0.5, 1.0, 3.0};
  bool ridge_standardize_outcome = true;   // z-score the outcome for ridge fits
  bool ridge_include_control_mean = true;  // prepend the per-site control mean column
  bool ridge_omit_control_mean_from_tau = false;

  bool analysis_pooling = true;
  bool analysis_predictive = true;
  std::vector<double> tail_thresholds = {0.0};

  std::string out_dir = "hbma-out";
  bool allow_nonconverged = false;
};

struct ConfigResult {
  RunConfig config;
  std::vector<std::string> errors;  // aggregated, not first-fail
  bool ok() const { return errors.empty(); }
};

/// Parse and validate a flat key-value config file ("key = value", '#'
/// comments, comma-separated lists; ':' also accepted as separator).
/// Unknown keys are rejected. All defaults are materialized.
ConfigResult validate_config(const std::string& path);
ConfigResult validate_config_text(const std::string& text);

/// Canonical one-key-per-line rendering with every default filled in.
std::string normalized_config_text(const RunConfig& config);

/// 64-bit FNV-1a, used for config and artifact content hashes.
std::uint64_t fnv1a64(const std::string& bytes);

/// Load -> fit -> analyze -> report. Writes draws, quantile tables,
/// pooling/predictive/OLS/ridge reports and a manifest into out_dir.
/// Returns an ExitCode; convergence failures still write artifacts.
int run_pipeline(const RunConfig& config);

}  // namespace hbma
