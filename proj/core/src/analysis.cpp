#include "hbma/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "hbma/errors.hpp"
#include "hbma/rng.hpp"

namespace hbma {

namespace {
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kNan : s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}
}  // namespace

double pooling_factor(double se_k, double sigma_tau_sq_post_mean) {
  if (!(se_k > 0.0)) throw DomainError("pooling_factor: se must be positive");
  if (sigma_tau_sq_post_mean < 0.0)
    throw DomainError("pooling_factor: sigma^2 must be nonnegative");
  const double se_sq = se_k * se_k;
  return se_sq / (sigma_tau_sq_post_mean + se_sq);
}

BruteForcePooling brute_force_pooling(double post_mean_tau_k, double post_mean_tau,
                                      double no_pool_tau_k) {
  BruteForcePooling out;
  const double denom = post_mean_tau - no_pool_tau_k;
  if (std::abs(denom) < 1e-12) {
    out.defined = false;
    out.omega_b = kNan;
    return out;
  }
  double w = (post_mean_tau_k - no_pool_tau_k) / denom;
  if (w < 0.0 || w > 1.0) {
    // shrinkage on other parameters can push the raw ratio outside [0,1]
    w = std::clamp(w, 0.0, 1.0);
    out.clamped = true;
  }
  out.omega_b = w;
  return out;
}

GeneralizedPooling generalized_pooling(const std::vector<std::vector<double>>& eps_draws) {
  GeneralizedPooling out;
  const std::size_t n_draws = eps_draws.size();
  if (n_draws < 2 || eps_draws[0].size() < 2)
    throw DomainError("generalized_pooling: need >=2 draws and >=2 sites");
  const std::size_t K = eps_draws[0].size();
  const double dK = static_cast<double>(K);

  // numerator: variance across sites of the posterior-mean errors
  std::vector<double> site_means(K, 0.0);
  for (const auto& draw : eps_draws)
    for (std::size_t k = 0; k < K; ++k) site_means[k] += draw[k];
  for (double& m : site_means) m /= static_cast<double>(n_draws);
  double grand = 0.0;
  for (double m : site_means) grand += m;
  grand /= dK;
  double numer = 0.0;
  for (double m : site_means) numer += (m - grand) * (m - grand);
  numer /= (dK - 1.0);

  // denominator: posterior mean of the per-draw across-site variance
  double denom = 0.0;
  for (const auto& draw : eps_draws) {
    double dm = 0.0;
    for (double e : draw) dm += e;
    dm /= dK;
    double v = 0.0;
    for (double e : draw) v += (e - dm) * (e - dm);
    denom += v / (dK - 1.0);
  }
  denom /= static_cast<double>(n_draws);

  if (!(denom > 0.0)) {
    out.defined = false;
    out.lambda = kNan;
    return out;
  }
  out.lambda = 1.0 - numer / denom;
  return out;
}

double quantile_sorted_type7(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw DomainError("quantile of empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("quantile level outside [0,1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double quantile_type7(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  return quantile_sorted_type7(values, p);
}

std::vector<QuantileRow> quantile_table(const std::vector<std::vector<double>>& columns,
                                        const std::vector<std::string>& names) {
  if (columns.size() != names.size())
    throw DomainError("quantile_table: names/columns size mismatch");
  std::vector<QuantileRow> rows;
  rows.reserve(columns.size());
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].empty()) throw DomainError("quantile_table: empty draw column " + names[i]);
    std::vector<double> sorted = columns[i];
    std::sort(sorted.begin(), sorted.end());
    QuantileRow row;
    row.name = names[i];
    row.mean = mean_of(sorted);
    row.q025 = quantile_sorted_type7(sorted, 0.025);
    row.q25 = quantile_sorted_type7(sorted, 0.25);
    row.q50 = quantile_sorted_type7(sorted, 0.50);
    row.q75 = quantile_sorted_type7(sorted, 0.75);
    row.q975 = quantile_sorted_type7(sorted, 0.975);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

void finish_predictive(PredictiveSummary& s, const std::vector<double>& thresholds) {
  s.tau_mean = mean_of(s.tau_next);
  s.tau_sd = sd_of(s.tau_next);
  std::vector<std::vector<double>> cols;
  std::vector<std::string> names;
  if (!s.mu_next.empty()) {
    cols.push_back(s.mu_next);
    names.push_back("mu_next");
  }
  cols.push_back(s.tau_next);
  names.push_back("tau_next");
  s.quantiles = quantile_table(cols, names);
  for (double t : thresholds) {
    std::size_t below = 0;
    for (double v : s.tau_next)
      if (v < t) ++below;
    s.tau_tail.emplace_back(t, static_cast<double>(below) / static_cast<double>(s.tau_next.size()));
  }
}

}  // namespace

PredictiveSummary posterior_predictive_next_site(
    const std::vector<double>& mu, const std::vector<double>& tau,
    const std::vector<double>& theta1, const std::vector<double>& theta2,
    const std::vector<double>& rho, std::uint64_t seed,
    const std::vector<double>& tail_thresholds) {
  const std::size_t n = tau.size();
  if (mu.size() != n || theta1.size() != n || theta2.size() != n || rho.size() != n)
    throw DomainError("posterior_predictive_next_site: draw vectors must align");
  if (n == 0) throw DomainError("posterior_predictive_next_site: no draws");
  PredictiveSummary s;
  s.mu_next.reserve(n);
  s.tau_next.reserve(n);
  Rng rng(seed, 0x9d5f);
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = rng.normal();
    const double z2 = rng.normal();
    if (!(theta1[i] >= 0.0) || !(theta2[i] >= 0.0) || !(std::abs(rho[i]) <= 1.0)) {
      ++s.rejected;
      continue;
    }
    const double rho_bar = std::sqrt(std::max(0.0, 1.0 - rho[i] * rho[i]));
    s.mu_next.push_back(mu[i] + theta1[i] * z1);
    s.tau_next.push_back(tau[i] + theta2[i] * (rho[i] * z1 + rho_bar * z2));
  }
  if (s.tau_next.empty()) throw DomainError("posterior_predictive_next_site: all draws rejected");
  finish_predictive(s, tail_thresholds);
  return s;
}

PredictiveSummary posterior_predictive_next_site(const std::vector<double>& tau,
                                                 const std::vector<double>& sigma_tau,
                                                 std::uint64_t seed,
                                                 const std::vector<double>& tail_thresholds) {
  if (tau.size() != sigma_tau.size() || tau.empty())
    throw DomainError("posterior_predictive_next_site: draw vectors must align");
  PredictiveSummary s;
  s.tau_next.reserve(tau.size());
  Rng rng(seed, 0x9d5f);
  for (std::size_t i = 0; i < tau.size(); ++i) {
    const double z = rng.normal();
    if (!(sigma_tau[i] >= 0.0)) {
      ++s.rejected;
      continue;
    }
    s.tau_next.push_back(tau[i] + sigma_tau[i] * z);
  }
  if (s.tau_next.empty()) throw DomainError("posterior_predictive_next_site: all draws rejected");
  finish_predictive(s, tail_thresholds);
  return s;
}

namespace {

// y = a + b*T on the given rows; HC1 sandwich se for b
OlsEstimate diff_in_means(const std::vector<double>& y0, const std::vector<double>& y1,
                          const std::string& label) {
  OlsEstimate e;
  e.label = label;
  e.n0 = static_cast<double>(y0.size());
  e.n1 = static_cast<double>(y1.size());
  if (y0.size() < 2 || y1.size() < 2) {
    e.ok = false;
    return e;
  }
  const double m0 = mean_of(y0);
  const double m1 = mean_of(y1);
  e.estimate = m1 - m0;
  double s0 = 0.0, s1 = 0.0;  // residual sums of squares per arm
  for (double y : y0) s0 += (y - m0) * (y - m0);
  for (double y : y1) s1 += (y - m1) * (y - m1);
  const double n = e.n0 + e.n1;
  const double hc1 = n / (n - 2.0);
  e.se = std::sqrt(hc1 * (s0 / (e.n0 * e.n0) + s1 / (e.n1 * e.n1)));
  return e;
}

}  // namespace

OlsComparators ols_comparators(const MicroDataset& data) {
  OlsComparators out;
  const std::size_t K = data.n_sites();
  std::vector<std::vector<double>> y0(K), y1(K);
  std::vector<double> all0, all1;
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    const auto k = static_cast<std::size_t>(data.site[r]);
    auto& bucket = data.treatment[r] ? y1[k] : y0[k];
    bucket.push_back(data.outcome[r]);
    (data.treatment[r] ? all1 : all0).push_back(data.outcome[r]);
  }
  for (std::size_t k = 0; k < K; ++k)
    out.per_site.push_back(diff_in_means(y0[k], y1[k], data.site_labels[k]));
  out.pooled = diff_in_means(all0, all1, "pooled");
  return out;
}

std::vector<OlsEstimate> control_mean_estimates(const MicroDataset& data) {
  const std::size_t K = data.n_sites();
  std::vector<std::vector<double>> y0(K);
  for (std::size_t r = 0; r < data.n_rows(); ++r)
    if (!data.treatment[r]) y0[static_cast<std::size_t>(data.site[r])].push_back(data.outcome[r]);
  std::vector<OlsEstimate> out;
  for (std::size_t k = 0; k < K; ++k) {
    OlsEstimate e;
    e.label = data.site_labels[k];
    e.n0 = static_cast<double>(y0[k].size());
    if (y0[k].size() < 2) {
      e.ok = false;
    } else {
      e.estimate = mean_of(y0[k]);
      e.se = sd_of(y0[k]) / std::sqrt(e.n0);
    }
    out.push_back(e);
  }
  return out;
}

namespace {

PoolingBlock build_block(const PosteriorDraws& draws, const std::string& hyper_name,
                         const std::string& site_base, const std::string& var_name,
                         bool var_is_scale, const std::vector<double>& no_pool,
                         const std::vector<double>& se_hat,
                         const std::vector<std::string>& site_labels) {
  PoolingBlock block;
  const std::size_t K = no_pool.size();
  const auto hyper_idx = draws.require_index(hyper_name);
  const auto hyper_draws = draws.merged_column(hyper_idx);
  const double hyper_mean = mean_of(hyper_draws);

  const auto var_draws = draws.merged_column(draws.require_index(var_name));
  double var_mean = 0.0;
  for (double v : var_draws) var_mean += var_is_scale ? v * v : v;
  var_mean /= static_cast<double>(var_draws.size());
  block.sigma_sq_post_mean = var_mean;

  std::vector<std::vector<double>> eps(hyper_draws.size(), std::vector<double>(K));
  double sum_omega = 0.0, sum_omega_b = 0.0;
  std::size_t n_omega_b = 0;
  for (std::size_t k = 0; k < K; ++k) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s[%zu]", site_base.c_str(), k + 1);
    const auto site_draws = draws.merged_column(draws.require_index(buf));
    for (std::size_t i = 0; i < site_draws.size(); ++i)
      eps[i][k] = site_draws[i] - hyper_draws[i];

    PoolingEntry entry;
    entry.site = k < site_labels.size() ? site_labels[k] : std::string(buf);
    entry.no_pool_estimate = no_pool[k];
    entry.se_hat = se_hat[k];
    entry.post_mean_site = mean_of(site_draws);
    entry.omega = pooling_factor(se_hat[k], var_mean);
    const auto bf = brute_force_pooling(entry.post_mean_site, hyper_mean, no_pool[k]);
    entry.omega_b = bf.omega_b;
    entry.omega_b_clamped = bf.clamped;
    entry.omega_b_defined = bf.defined;
    if (bf.clamped) ++block.clamp_events;
    sum_omega += entry.omega;
    if (bf.defined) {
      sum_omega_b += bf.omega_b;
      ++n_omega_b;
    }
    block.entries.push_back(std::move(entry));
  }
  block.avg_omega = sum_omega / static_cast<double>(K);
  block.avg_omega_b = n_omega_b ? sum_omega_b / static_cast<double>(n_omega_b) : kNan;
  const auto gp = generalized_pooling(eps);
  block.lambda = gp.lambda;
  block.lambda_defined = gp.defined;
  return block;
}

}  // namespace

PoolingReport build_pooling_report(const PosteriorDraws& draws, const SummaryDataset* summary,
                                   const MicroDataset* micro) {
  PoolingReport report;
  std::vector<double> tau_hat, se_tau;
  std::vector<std::string> labels;
  if (summary) {
    tau_hat = summary->tau_hat;
    se_tau = summary->se_tau;
    labels = summary->site_labels;
  } else if (micro) {
    const auto ols = ols_comparators(*micro);
    for (const auto& e : ols.per_site) {
      if (!e.ok) continue;  // degenerate arm: skipped with flag in the OLS report
      tau_hat.push_back(e.estimate);
      se_tau.push_back(e.se);
      labels.push_back(e.label);
    }
  } else {
    throw DomainError("build_pooling_report: need summary or micro data");
  }

  const bool rubin = draws.index_of("sigma_tau").has_value();
  report.tau = build_block(draws, "tau", "tau", rubin ? "sigma_tau" : "V[2,2]", rubin, tau_hat,
                           se_tau, labels);

  // mu block when the fit carries site-level control means
  if (draws.index_of("mu").has_value() && draws.index_of("mu[1]").has_value()) {
    std::vector<double> mu_hat, se_mu;
    bool have = false;
    if (summary && summary->has_mu()) {
      mu_hat = summary->mu_hat;
      se_mu = summary->se_mu;
      have = true;
    } else if (micro) {
      for (const auto& e : control_mean_estimates(*micro)) {
        if (!e.ok) continue;
        mu_hat.push_back(e.estimate);
        se_mu.push_back(e.se);
      }
      have = mu_hat.size() == tau_hat.size();
    }
    if (have)
      report.mu = build_block(draws, "mu", "mu", "V[1,1]", false, mu_hat, se_mu, labels);
  }
  return report;
}

RidgeReport ridge_coefficient_report(
    const std::vector<std::pair<double, const PosteriorDraws*>>& fits,
    const std::vector<std::string>& covariate_names) {
  RidgeReport report;
  for (const auto& [penalty, draws] : fits) {
    if (!draws->converged) {
      report.excluded_penalties.push_back(penalty);
      continue;
    }
    RidgePenaltyBlock block;
    block.penalty = penalty;
    for (std::size_t j = 0; j < covariate_names.size(); ++j) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "beta_tau[%zu]", j + 1);
      auto col = draws->merged_column(draws->require_index(buf));
      for (double& v : col) v = std::abs(v);
      RidgeCovariateStat stat;
      stat.name = covariate_names[j];
      stat.mean_abs_beta = mean_of(col);
      std::sort(col.begin(), col.end());
      stat.abs_q025 = quantile_sorted_type7(col, 0.025);
      stat.abs_q975 = quantile_sorted_type7(col, 0.975);
      block.covariates.push_back(std::move(stat));
    }
    // ties broken by covariate column order (stable sort), flagged
    std::stable_sort(block.covariates.begin(), block.covariates.end(),
                     [](const auto& a, const auto& b) { return a.mean_abs_beta > b.mean_abs_beta; });
    for (std::size_t i = 0; i + 1 < block.covariates.size(); ++i)
      if (block.covariates[i].mean_abs_beta == block.covariates[i + 1].mean_abs_beta)
        block.ties = true;
    for (std::size_t i = 0; i < block.covariates.size(); ++i) block.covariates[i].rank = i + 1;
    if (block.covariates.size() >= 2)
      block.order_meaningful = block.covariates[0].abs_q025 > block.covariates[1].abs_q975;
    report.penalties.push_back(std::move(block));
  }

  if (!report.penalties.empty()) {
    for (const auto& c : report.penalties.front().covariates) report.ordering.push_back(c.name);
    report.ordering_stable = true;
    for (const auto& block : report.penalties) {
      std::vector<std::string> order;
      for (const auto& c : block.covariates) order.push_back(c.name);
      if (order != report.ordering) report.ordering_stable = false;
    }
    report.order_meaningful = true;
    for (const auto& block : report.penalties)
      if (!block.order_meaningful) report.order_meaningful = false;
  }
  return report;
}

DensityCurve kde_density(const std::vector<double>& draws, std::size_t grid_points) {
  DensityCurve curve;
  if (draws.size() < 2 || grid_points < 2) return curve;
  std::vector<double> sorted = draws;
  std::sort(sorted.begin(), sorted.end());
  const double sd = sd_of(sorted);
  const double iqr = quantile_sorted_type7(sorted, 0.75) - quantile_sorted_type7(sorted, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (spread <= 0.0) spread = sd;
  const double h =
      0.9 * spread * std::pow(static_cast<double>(sorted.size()), -0.2);  // Silverman
  if (!(h > 0.0)) return curve;  // degenerate sample, no curve
  curve.bandwidth = h;
  const double lo = sorted.front() - 3.0 * h;
  const double hi = sorted.back() + 3.0 * h;
  const double step = (hi - lo) / static_cast<double>(grid_points - 1);
  const double norm =
      1.0 / (static_cast<double>(sorted.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double x = lo + step * static_cast<double>(g);
    double dens = 0.0;
    for (double v : sorted) {
      const double z = (x - v) / h;
      dens += std::exp(-0.5 * z * z);
    }
    curve.x.push_back(x);
    curve.density.push_back(dens * norm);
  }
  return curve;
}

}  // namespace hbma
