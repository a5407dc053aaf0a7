#include "hbma/oracle.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

#include "hbma/distributions.hpp"
#include "hbma/errors.hpp"
#include "hbma/fit.hpp"
#include "hbma/rng.hpp"

namespace hbma {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double half_cauchy_cdf(double x, double scale) {
  return x <= 0.0 ? 0.0 : 2.0 / std::numbers::pi * std::atan(x / scale);
}

std::string site_label(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "site%03zu", k + 1);
  return buf;
}

double cycled(const std::vector<double>& v, std::size_t i, double fallback) {
  if (v.empty()) return fallback;
  return v[i % v.size()];
}

// regularized lower incomplete gamma P(a, x), series + continued fraction
double gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw DomainError("gamma_p: bad arguments");
  if (x == 0.0) return 0.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    // series representation
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  // continued fraction for Q(a, x)
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  const double q = std::exp(-x + a * std::log(x) - gln) * h;
  return 1.0 - q;
}

}  // namespace

double chi_square_p_value(double statistic, double dof) {
  if (statistic <= 0.0) return 1.0;
  return 1.0 - gamma_p(0.5 * dof, 0.5 * statistic);
}

void GridSpec::validate() const {
  if (!(tau_lo < tau_hi) || !(sigma_lo < sigma_hi))
    throw DomainError("grid bounds must be ordered");
  if (tau_points < 4 || sigma_points < 4) throw DomainError("grid needs at least 4 points per dim");
  if (static_cast<double>(tau_points) * static_cast<double>(sigma_points) > 1e8)
    throw DomainError("grid exceeds the 1e8 point guard");
  if (sigma_lo < 0.0) throw DomainError("sigma grid must be nonnegative");
}

double GridSpec::prior_mass_covered(const PriorConfig& prior) const {
  const double tau_mass =
      normal_cdf(tau_hi / prior.hypermean_sd) - normal_cdf(tau_lo / prior.hypermean_sd);
  double sigma_total = 1.0;
  if (prior.scale_upper > 0.0) sigma_total = half_cauchy_cdf(prior.scale_upper, prior.scale_cauchy);
  const double sigma_mass = (half_cauchy_cdf(sigma_hi, prior.scale_cauchy) -
                             half_cauchy_cdf(std::max(sigma_lo, 0.0), prior.scale_cauchy)) /
                            sigma_total;
  return tau_mass * sigma_mass;
}

GridSpec GridSpec::for_summaries(const SummaryDataset& data, const PriorConfig& prior,
                                 std::size_t points_per_dim) {
  double lo = kInf, hi = -kInf, max_se = 0.0;
  for (std::size_t k = 0; k < data.n_sites(); ++k) {
    lo = std::min(lo, data.tau_hat[k]);
    hi = std::max(hi, data.tau_hat[k]);
    max_se = std::max(max_se, data.se_tau[k]);
  }
  GridSpec g;
  g.tau_lo = lo - 10.0 * max_se;
  g.tau_hi = hi + 10.0 * max_se;
  if (prior.hypermean_sd <= 20.0) {
    // informative prior at desk scale: cover its central 99.9% as well
    g.tau_lo = std::min(g.tau_lo, -3.885 * prior.hypermean_sd);
    g.tau_hi = std::max(g.tau_hi, 3.885 * prior.hypermean_sd);
  }
  g.sigma_lo = 0.0;
  g.sigma_hi = prior.scale_upper > 0.0 ? prior.scale_upper
                                       : std::max(10.0 * max_se, 4.0 * (hi - lo) + 10.0 * max_se);
  g.tau_points = points_per_dim;
  g.sigma_points = points_per_dim;
  return g;
}

QuadratureResult quadrature_rubin_posterior(const SummaryDataset& data, const GridSpec& grid,
                                            const PriorConfig& prior) {
  grid.validate();
  const std::size_t K = data.n_sites();
  if (K > 3) throw DomainError("quadrature oracle supports K <= 3 (dimensionality guard)");

  const std::size_t nt = grid.tau_points;
  const std::size_t ns = grid.sigma_points;
  const double dt = (grid.tau_hi - grid.tau_lo) / static_cast<double>(nt - 1);
  const double ds = (grid.sigma_hi - grid.sigma_lo) / static_cast<double>(ns - 1);

  std::vector<double> taus(nt), sigmas(ns);
  for (std::size_t i = 0; i < nt; ++i) taus[i] = grid.tau_lo + dt * static_cast<double>(i);
  for (std::size_t j = 0; j < ns; ++j) sigmas[j] = grid.sigma_lo + ds * static_cast<double>(j);

  // log posterior kernel on the grid; site effects marginalize analytically:
  // tau_hat_k | tau, sigma ~ N(tau, sigma^2 + se_k^2)
  std::vector<double> logw(nt * ns, -kInf);
  double max_lw = -kInf;
  for (std::size_t j = 0; j < ns; ++j) {
    const double sigma = sigmas[j];
    // the half-Cauchy density is finite at the sigma = 0 edge
    const double hc_logpdf =
        sigma > 0.0 ? half_cauchy_lpdf_grad(sigma, prior.scale_cauchy).logpdf
                    : std::log(2.0 / (std::numbers::pi * prior.scale_cauchy));
    for (std::size_t i = 0; i < nt; ++i) {
      double lw = hc_logpdf + normal_lpdf(taus[i], 0.0, prior.hypermean_sd);
      for (std::size_t k = 0; k < K; ++k) {
        const double sd = std::sqrt(sigma * sigma + data.se_tau[k] * data.se_tau[k]);
        lw += normal_lpdf(data.tau_hat[k], taus[i], sd);
      }
      logw[j * nt + i] = lw;
      max_lw = std::max(max_lw, lw);
    }
  }

  // trapezoid weights (edge cells get half weight per dimension)
  std::vector<double> w(nt * ns, 0.0);
  double total = 0.0;
  for (std::size_t j = 0; j < ns; ++j)
    for (std::size_t i = 0; i < nt; ++i) {
      if (logw[j * nt + i] == -kInf) continue;
      double tw = std::exp(logw[j * nt + i] - max_lw);
      if (i == 0 || i + 1 == nt) tw *= 0.5;
      if (j == 0 || j + 1 == ns) tw *= 0.5;
      w[j * nt + i] = tw;
      total += tw;
    }
  if (!(total > 0.0)) throw DomainError("quadrature: posterior mass underflowed on this grid");
  for (double& x : w) x /= total;

  double boundary = 0.0;
  for (std::size_t j = 0; j < ns; ++j)
    for (std::size_t i = 0; i < nt; ++i)
      if (i == 0 || i + 1 == nt || j == 0 || j + 1 == ns) boundary += w[j * nt + i];
  if (boundary > 0.001)
    throw DomainError("quadrature: " + std::to_string(boundary * 100.0) +
                      "% of posterior mass on the grid boundary; widen the bounds");

  QuadratureResult result;
  result.boundary_mass = boundary;

  // marginal moments and quantiles for tau and sigma
  auto marginal = [&](bool over_tau) {
    const std::size_t n = over_tau ? nt : ns;
    std::vector<double> mass(n, 0.0);
    for (std::size_t j = 0; j < ns; ++j)
      for (std::size_t i = 0; i < nt; ++i) mass[over_tau ? i : j] += w[j * nt + i];
    const auto& axis = over_tau ? taus : sigmas;
    QuadratureMoments m;
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s1 += mass[i] * axis[i];
      s2 += mass[i] * axis[i] * axis[i];
    }
    m.mean = s1;
    m.sd = std::sqrt(std::max(0.0, s2 - s1 * s1));
    // quantiles by linear interpolation of the cumulative mass
    auto quantile = [&](double p) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double next = acc + mass[i];
        if (next >= p) {
          if (i == 0 || mass[i] <= 0.0) return axis[i];
          return axis[i - 1] + (axis[i] - axis[i - 1]) * (p - acc) / mass[i];
        }
        acc = next;
      }
      return axis[n - 1];
    };
    m.q025 = quantile(0.025);
    m.q50 = quantile(0.50);
    m.q975 = quantile(0.975);
    return m;
  };
  result.tau = marginal(true);
  result.sigma_tau = marginal(false);

  // site effects: conjugate conditional N(m_k, v_k) averaged over the grid
  for (std::size_t k = 0; k < K; ++k) {
    const double se_sq = data.se_tau[k] * data.se_tau[k];
    double e1 = 0.0, e2 = 0.0;
    for (std::size_t j = 0; j < ns; ++j) {
      const double sig_sq = sigmas[j] * sigmas[j];
      for (std::size_t i = 0; i < nt; ++i) {
        const double wi = w[j * nt + i];
        if (wi == 0.0) continue;
        double m, v;
        if (sig_sq == 0.0) {
          m = taus[i];
          v = 0.0;
        } else {
          v = 1.0 / (1.0 / sig_sq + 1.0 / se_sq);
          m = v * (taus[i] / sig_sq + data.tau_hat[k] / se_sq);
        }
        e1 += wi * m;
        e2 += wi * (v + m * m);
      }
    }
    QuadratureMoments mk;
    mk.mean = e1;
    mk.sd = std::sqrt(std::max(0.0, e2 - e1 * e1));
    // mixture-of-normals quantiles by bisection on the averaged CDF
    auto mixture_cdf = [&](double x) {
      double cdf = 0.0;
      for (std::size_t j = 0; j < ns; ++j) {
        const double sig_sq = sigmas[j] * sigmas[j];
        for (std::size_t i = 0; i < nt; ++i) {
          const double wi = w[j * nt + i];
          if (wi == 0.0) continue;
          double m, v;
          if (sig_sq == 0.0) {
            m = taus[i];
            v = 0.0;
          } else {
            v = 1.0 / (1.0 / sig_sq + 1.0 / se_sq);
            m = v * (taus[i] / sig_sq + data.tau_hat[k] / se_sq);
          }
          cdf += wi * (v > 0.0 ? normal_cdf((x - m) / std::sqrt(v)) : (x >= m ? 1.0 : 0.0));
        }
      }
      return cdf;
    };
    auto mixture_quantile = [&](double p) {
      double lo = mk.mean - 12.0 * (mk.sd + 1e-12);
      double hi = mk.mean + 12.0 * (mk.sd + 1e-12);
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mixture_cdf(mid) < p ? lo : hi) = mid;
      }
      return 0.5 * (lo + hi);
    };
    mk.q025 = mixture_quantile(0.025);
    mk.q50 = mixture_quantile(0.50);
    mk.q975 = mixture_quantile(0.975);
    result.tau_k.push_back(mk);
  }
  return result;
}

// ---------------------------------------------------------------------------
// synthetic data

SummaryDataset simulate_summary_data(const SyntheticTruth& truth) {
  Rng rng(truth.seed, 0x5151);
  SummaryDataset d;
  const std::size_t K = truth.n_sites;
  const bool with_mu = !truth.se_mu.empty();
  for (std::size_t k = 0; k < K; ++k) d.site_labels.push_back(site_label(k));
  d.tau_hat.resize(K);
  d.se_tau.resize(K);
  if (with_mu) {
    d.mu_hat.resize(K);
    d.se_mu.resize(K);
  }
  const double rho_bar = std::sqrt(1.0 - truth.rho * truth.rho);
  for (std::size_t k = 0; k < K; ++k) {
    const double z1 = rng.normal();
    const double z2 = rng.normal();
    const double mu_k = truth.mu + truth.sigma_mu * z1;
    const double tau_k = truth.tau + truth.sigma_tau * (truth.rho * z1 + rho_bar * z2);
    d.se_tau[k] = cycled(truth.se_tau, k, 1.0);
    d.tau_hat[k] = rng.normal(tau_k, d.se_tau[k]);
    if (with_mu) {
      d.se_mu[k] = cycled(truth.se_mu, k, 1.0);
      d.mu_hat[k] = rng.normal(mu_k, d.se_mu[k]);
    }
  }
  return d;
}

MicroDataset simulate_micro_data(const SyntheticTruth& truth) {
  Rng rng(truth.seed, 0x5152);
  MicroDataset d;
  const std::size_t K = truth.n_sites;
  const std::size_t n = truth.rows_per_site;
  const std::size_t L = truth.covariate_names.size();
  const std::size_t C = std::size_t{1} << L;
  d.outcome_name = "outcome";
  d.covariate_names = truth.covariate_names;
  d.covariates.resize(L);
  for (std::size_t k = 0; k < K; ++k) d.site_labels.push_back(site_label(k));

  const bool cells = !truth.cell_mu.empty();
  if (cells && (truth.cell_mu.size() != C || truth.cell_tau.size() != C))
    throw DomainError("simulate_micro_data: cell effect vectors must have 2^L entries");

  const double rho_bar = std::sqrt(1.0 - truth.rho * truth.rho);
  for (std::size_t k = 0; k < K; ++k) {
    // parent draws for this site
    std::vector<double> mu_lk(C), tau_lk(C);
    if (cells) {
      for (std::size_t l = 0; l < C; ++l) {
        mu_lk[l] = rng.normal(truth.cell_mu[l], cycled(truth.cell_sigma_mu, l, 0.0));
        tau_lk[l] = rng.normal(truth.cell_tau[l], cycled(truth.cell_sigma_tau, l, 0.0));
      }
    } else {
      const double z1 = rng.normal();
      const double z2 = rng.normal();
      double mu_shift = 0.0, tau_shift = 0.0;
      for (std::size_t j = 0; j < truth.beta_mu.size(); ++j)
        mu_shift += truth.site_covariates[j][k] * truth.beta_mu[j];
      for (std::size_t j = 0; j < truth.beta_tau.size(); ++j)
        tau_shift += truth.site_covariates[j][k] * truth.beta_tau[j];
      mu_lk[0] = truth.mu + mu_shift + truth.sigma_mu * z1;
      tau_lk[0] = truth.tau + tau_shift + truth.sigma_tau * (truth.rho * z1 + rho_bar * z2);
    }
    const double sigma_y = cycled(truth.sigma_y, k, 1.0);
    for (std::size_t r = 0; r < n; ++r) {
      // deterministic balance over cells and arms
      const std::size_t cell = r % C;
      const std::uint8_t treat = static_cast<std::uint8_t>((r / C) % 2);
      d.site.push_back(static_cast<std::int32_t>(k));
      d.treatment.push_back(treat);
      for (std::size_t j = 0; j < L; ++j)
        d.covariates[j].push_back(static_cast<std::uint8_t>((cell >> j) & 1u));
      const double mean = mu_lk[cells ? cell : 0] + (treat ? tau_lk[cells ? cell : 0] : 0.0);
      d.outcome.push_back(rng.normal(mean, sigma_y));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// simulation-based calibration

SbcConfig::SbcConfig() {
  sampler.chains = 2;
  sampler.warmup = 300;
  sampler.iters = 300;
  sampler.parallel_chains = false;  // replications parallelize instead
  sampler.check_gradient = false;
  prior = sbc_default_prior();
}

PriorConfig sbc_default_prior() {
  PriorConfig p;
  p.hypermean_sd = 10.0;
  p.scale_cauchy = 2.5;
  p.scale_upper = 15.0;
  p.lkj_eta = 3.0;
  p.sigma_y_lo = 0.5;
  p.sigma_y_hi = 10.0;
  return p;
}

bool SbcReport::pass(double p_threshold, double max_exclusion_rate) const {
  if (params.empty() || included == 0) return false;
  if (exclusion_rate >= max_exclusion_rate) return false;
  for (const auto& p : params)
    if (!(p.p_value > p_threshold)) return false;
  return true;
}

std::string SbcReport::to_json() const {
  std::ostringstream out;
  out << "{\n  \"replications\": " << replications << ",\n  \"included\": " << included
      << ",\n  \"excluded\": " << excluded << ",\n  \"exclusion_rate\": " << exclusion_rate
      << ",\n  \"params\": [";
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    out << (i ? "," : "") << "\n    {\"name\": \"" << p.name << "\", \"chi_square\": " << p.chi_square
        << ", \"p_value\": " << p.p_value << ", \"bins\": [";
    for (std::size_t b = 0; b < p.bin_counts.size(); ++b)
      out << (b ? "," : "") << p.bin_counts[b];
    out << "]}";
  }
  out << "\n  ],\n  \"pass\": " << (pass() ? "true" : "false") << "\n}\n";
  return out.str();
}

namespace {

struct SbcRep {
  bool included = false;
  std::vector<std::size_t> ranks;  // aligned with ranked parameter list
};

std::vector<std::string> sbc_ranked_params(Family family) {
  switch (family) {
    case Family::rubin_summary:
      return {"tau", "sigma_tau"};
    case Family::joint_summary:
    case Family::full_data_joint:
      return {"mu", "tau", "theta[1]", "theta[2]", "Omega[1,2]"};
    case Family::full_data_independent:
      return {"mu", "tau", "theta[1]", "theta[2]"};
    default:
      throw DomainError("sbc_run: family " + family_name(family) + " lacks a generation recipe");
  }
}

SbcRep sbc_replication(const SbcConfig& cfg, std::size_t rep,
                       const std::vector<std::string>& ranked) {
  Rng rng(cfg.seed, 0xbc00 + rep);
  const auto& prior = cfg.prior;

  // truth drawn from the fit priors
  SyntheticTruth truth;
  truth.seed = cfg.seed ^ (0x51c0ull + rep * 0x9e3779b97f4a7c15ull);
  truth.n_sites = cfg.n_sites;
  truth.rows_per_site = cfg.rows_per_site;
  truth.tau = rng.normal(0.0, prior.hypermean_sd);
  truth.mu = rng.normal(0.0, prior.hypermean_sd);
  truth.sigma_mu = rng.half_cauchy(prior.scale_cauchy, prior.scale_upper);
  truth.sigma_tau = rng.half_cauchy(prior.scale_cauchy, prior.scale_upper);
  truth.rho = 2.0 * rng.beta(prior.lkj_eta, prior.lkj_eta) - 1.0;
  truth.se_tau = cfg.se_tau;
  truth.sigma_y.clear();
  for (std::size_t k = 0; k < cfg.n_sites; ++k)
    truth.sigma_y.push_back(rng.uniform(prior.sigma_y_lo, prior.sigma_y_hi));

  ModelSpec spec;
  spec.family = cfg.family;
  spec.prior = prior;

  SummaryDataset summary;
  MicroDataset micro;
  DataBundle bundle;
  const bool is_summary =
      cfg.family == Family::rubin_summary || cfg.family == Family::joint_summary;
  if (is_summary) {
    if (cfg.family == Family::joint_summary && cfg.se_mu.empty())
      throw DomainError("sbc_run: joint_summary needs se_mu");
    truth.se_mu = cfg.se_mu;
    if (cfg.family == Family::rubin_summary) truth.se_mu.clear();
    summary = simulate_summary_data(truth);
    if (cfg.fault_se_scale != 1.0)
      for (double& se : summary.se_tau) se *= cfg.fault_se_scale;
    bundle.summary = &summary;
  } else {
    micro = simulate_micro_data(truth);
    bundle.micro = &micro;
  }

  SamplerConfig sampler = cfg.sampler;
  sampler.seed = cfg.seed ^ (0xfeedull + rep * 0x2545f4914f6cdd1dull);

  SbcRep out;
  PosteriorDraws draws;
  try {
    draws = run_chains(spec, bundle, sampler);
  } catch (const std::exception&) {
    return out;  // excluded
  }

  // convergence screen on the ranked parameters
  for (const auto& name : ranked) {
    const auto idx = draws.index_of(name);
    if (!idx) return out;
    const auto& diag = draws.diagnostics[*idx];
    if (diag.sd > 0.0 && (!std::isfinite(diag.rhat) || diag.rhat >= 1.1)) return out;
  }

  const std::size_t total = draws.n_chains * draws.n_iters;
  if (total < cfg.ranks) return out;
  const std::size_t stride = total / cfg.ranks;

  auto truth_of = [&](const std::string& name) {
    if (name == "tau") return truth.tau;
    if (name == "mu") return truth.mu;
    if (name == "sigma_tau" || name == "theta[2]") return truth.sigma_tau;
    if (name == "theta[1]") return truth.sigma_mu;
    if (name == "Omega[1,2]") return truth.rho;
    throw DomainError("sbc_run: no truth recorded for " + name);
  };

  for (const auto& name : ranked) {
    const auto col = draws.merged_column(draws.require_index(name));
    const double t = truth_of(name);
    std::size_t rank = 0;
    for (std::size_t i = 0; i < cfg.ranks; ++i)
      if (col[i * stride] < t) ++rank;
    out.ranks.push_back(rank);
  }
  out.included = true;
  return out;
}

}  // namespace

SbcReport sbc_run(const SbcConfig& cfg) {
  if (cfg.replications == 0) throw ValidationError("sbc_run: zero replications requested");
  if (cfg.bins < 2 || cfg.ranks < cfg.bins || (cfg.ranks + 1) % cfg.bins != 0)
    throw ValidationError("sbc_run: bins must divide ranks + 1");
  const auto ranked = sbc_ranked_params(cfg.family);

  std::vector<SbcRep> reps(cfg.replications);
  const std::size_t n_threads =
      cfg.threads ? cfg.threads : std::max<unsigned>(1, std::thread::hardware_concurrency());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cfg.replications) return;
      reps[i] = sbc_replication(cfg, i, ranked);
    }
  };
  if (n_threads > 1) {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  } else {
    worker();
  }

  SbcReport report;
  report.replications = cfg.replications;
  const std::size_t per_bin = (cfg.ranks + 1) / cfg.bins;
  for (std::size_t pi = 0; pi < ranked.size(); ++pi) {
    SbcParamResult pr;
    pr.name = ranked[pi];
    pr.bin_counts.assign(cfg.bins, 0);
    report.params.push_back(std::move(pr));
  }
  for (const auto& rep : reps) {
    if (!rep.included) {
      ++report.excluded;
      continue;
    }
    ++report.included;
    for (std::size_t pi = 0; pi < ranked.size(); ++pi)
      report.params[pi].bin_counts[rep.ranks[pi] / per_bin]++;
  }
  report.exclusion_rate =
      static_cast<double>(report.excluded) / static_cast<double>(cfg.replications);
  if (report.included == 0) throw ValidationError("sbc_run: every replication was excluded");

  const double expected =
      static_cast<double>(report.included) / static_cast<double>(cfg.bins);
  for (auto& pr : report.params) {
    double stat = 0.0;
    for (std::size_t b = 0; b < cfg.bins; ++b) {
      const double d = static_cast<double>(pr.bin_counts[b]) - expected;
      stat += d * d / expected;
    }
    pr.chi_square = stat;
    pr.p_value = chi_square_p_value(stat, static_cast<double>(cfg.bins - 1));
  }
  return report;
}

}  // namespace hbma
