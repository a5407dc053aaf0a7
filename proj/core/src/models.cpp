#include "hbma/models.hpp"

#include <cmath>
#include <cstdio>

#include "hbma/distributions.hpp"
#include "hbma/errors.hpp"
#include "hbma/transforms.hpp"

namespace hbma {

namespace {

constexpr double kLogSqrt2Pi = 0.9189385332046727;

std::string idx1(const char* base, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s[%zu]", base, i + 1);
  return buf;
}
std::string idx2(const char* base, std::size_t i, std::size_t j) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s[%zu,%zu]", base, i + 1, j + 1);
  return buf;
}
std::string cell2(const char* base, std::size_t l, std::size_t k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s[%zu][%zu]", base, l + 1, k + 1);
  return buf;
}

// Half-Cauchy scale on the positive (optionally bounded) transform.
struct ScaleValue {
  double value;
  double dvalue_du;
  double prior_grad_du;  // d(prior + Jacobian)/du
};
ScaleValue scale_param(double u, const PriorConfig& pc, double& lp) {
  if (pc.scale_upper > 0.0) {
    const auto b = transforms::bounded(u, 0.0, pc.scale_upper);
    const auto hc = half_cauchy_lpdf_grad(b.value, pc.scale_cauchy);
    lp += hc.logpdf + b.log_jacobian;
    return {b.value, b.dvalue_du, hc.d_x * b.dvalue_du + b.dlogj_du};
  }
  const auto p = transforms::positive(u);
  const auto hc = half_cauchy_lpdf_grad(p.value, pc.scale_cauchy);
  lp += hc.logpdf + p.log_jacobian;
  return {p.value, p.dvalue_du, hc.d_x * p.dvalue_du + p.dlogj_du};
}

// Uniform(lo, hi) outcome scale on the logit-bounded transform.
struct SigmaYValue {
  double value;
  double dvalue_dv;
  double prior_grad_dv;
};
SigmaYValue sigma_y_param(double v, const PriorConfig& pc, double& lp) {
  const auto b = transforms::bounded(v, pc.sigma_y_lo, pc.sigma_y_hi);
  lp += uniform_lpdf(b.value, pc.sigma_y_lo, pc.sigma_y_hi).logpdf + b.log_jacobian;
  return {b.value, b.dvalue_du, b.dlogj_du};
}

// 2x2 correlation with LKJ shape prior, on the tanh transform.
struct CorrValue {
  double rho;
  double rho_bar;  // sqrt(1 - rho^2)
  double drho_dy;
  double prior_grad_dy;
};
CorrValue corr_param(double y, double eta, double& lp) {
  const auto t = transforms::correlation(y);
  const auto lkj = lkj_corr_lpdf_grad(CholeskyCorr::from_rho(t.rho), eta);
  lp += lkj.logpdf + t.log_jacobian;
  const double rho_bar = std::sqrt(1.0 - t.rho * t.rho);
  // d L_22 / d rho = -rho / rho_bar
  const double dprior_drho = lkj.d_diag[1] * (-t.rho / rho_bar);
  return {t.rho, rho_bar, t.drho_dy, dprior_drho * t.drho_dy + t.dlogj_dy};
}

void hypermean_prior(double m, double sd, double& lp, double& grad) {
  lp += normal_lpdf(m, 0.0, sd);
  grad += -m / (sd * sd);
}

void std_normal_prior(double z, double& lp, double& grad) {
  lp += -0.5 * z * z - kLogSqrt2Pi;
  grad += -z;
}

struct LikGrad {
  double d_mu;
  double d_tau;
  double d_sigma;
};
// Gaussian likelihood of one site's rows from sufficient statistics:
// control mean mu_k, treated mean mu_k + tau_k, common scale sigma.
LikGrad gaussian_lik(const ArmStats& s, double mu_k, double tau_k, double sigma, double& lp) {
  const double m0 = mu_k;
  const double m1 = mu_k + tau_k;
  const double ssr = s.sumsq0 - 2.0 * m0 * s.sum0 + s.n0 * m0 * m0 +
                     s.sumsq1 - 2.0 * m1 * s.sum1 + s.n1 * m1 * m1;
  const double n = s.n0 + s.n1;
  const double inv_var = 1.0 / (sigma * sigma);
  lp += -n * (std::log(sigma) + kLogSqrt2Pi) - 0.5 * ssr * inv_var;
  LikGrad g;
  g.d_tau = (s.sum1 - s.n1 * m1) * inv_var;
  g.d_mu = (s.sum0 - s.n0 * m0) * inv_var + g.d_tau;
  g.d_sigma = -n / sigma + ssr * inv_var / sigma;
  return g;
}

}  // namespace

std::string family_name(Family family) {
  switch (family) {
    case Family::rubin_summary: return "rubin_summary";
    case Family::joint_summary: return "joint_summary";
    case Family::full_data_joint: return "full_data_joint";
    case Family::full_data_independent: return "full_data_independent";
    case Family::interactions: return "interactions";
    case Family::site_ridge: return "site_ridge";
  }
  throw DomainError("unknown family");
}

Family family_from_name(const std::string& name) {
  for (Family f : all_families())
    if (family_name(f) == name) return f;
  throw ValidationError("unknown model family '" + name + "'");
}

const std::vector<Family>& all_families() {
  static const std::vector<Family> families = {
      Family::rubin_summary,     Family::joint_summary, Family::full_data_joint,
      Family::full_data_independent, Family::interactions,  Family::site_ridge};
  return families;
}

std::size_t ParamLayout::offset(const std::string& name) const {
  for (const auto& s : slices)
    if (s.name == name) return s.offset;
  throw DomainError("no parameter slice named '" + name + "'");
}

std::vector<ArmStats> compute_arm_stats(const MicroDataset& data) {
  std::vector<ArmStats> stats(data.n_sites());
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    auto& s = stats[static_cast<std::size_t>(data.site[r])];
    const double y = data.outcome[r];
    if (data.treatment[r]) {
      s.n1 += 1.0;
      s.sum1 += y;
      s.sumsq1 += y * y;
    } else {
      s.n0 += 1.0;
      s.sum0 += y;
      s.sumsq0 += y * y;
    }
  }
  return stats;
}

std::vector<std::vector<ArmStats>> compute_cell_stats(const CellDataset& cells) {
  const MicroDataset& data = *cells.data;
  std::vector<std::vector<ArmStats>> stats(data.n_sites(),
                                           std::vector<ArmStats>(cells.n_cells()));
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    auto& s = stats[static_cast<std::size_t>(data.site[r])]
                   [static_cast<std::size_t>(cells.cell_of_row[r])];
    const double y = data.outcome[r];
    if (data.treatment[r]) {
      s.n1 += 1.0;
      s.sum1 += y;
      s.sumsq1 += y * y;
    } else {
      s.n0 += 1.0;
      s.sum0 += y;
      s.sumsq0 += y * y;
    }
  }
  return stats;
}

double conditional_site_mean(double tau_hat, double se, double tau, double sigma_tau) {
  if (!(se > 0.0)) throw DomainError("conditional_site_mean: se must be positive");
  if (sigma_tau == 0.0) return tau;
  const double prec_data = 1.0 / (se * se);
  const double prec_parent = 1.0 / (sigma_tau * sigma_tau);
  return (tau_hat * prec_data + tau * prec_parent) / (prec_data + prec_parent);
}

// ---------------------------------------------------------------------------
// kernels

double rubin_lp(std::span<const double> u, std::span<double> grad, const SummaryDataset& data,
                const PriorConfig& prior) {
  const std::size_t K = data.n_sites();
  if (u.size() != 2 + K || grad.size() != u.size())
    throw DomainError("rubin_lp: wrong parameter dimension");
  std::fill(grad.begin(), grad.end(), 0.0);
  double lp = 0.0;

  const double tau = u[0];
  const auto sigma = scale_param(u[1], prior, lp);
  hypermean_prior(tau, prior.hypermean_sd, lp, grad[0]);
  grad[1] += sigma.prior_grad_du;

  double d_sigma = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double z = u[2 + k];
    const double tau_k = tau + sigma.value * z;
    const auto nl = normal_lpdf_grad(data.tau_hat[k], tau_k, data.se_tau[k]);
    lp += nl.logpdf;
    grad[0] += nl.d_mean;
    d_sigma += nl.d_mean * z;
    grad[2 + k] += nl.d_mean * sigma.value;
    std_normal_prior(z, lp, grad[2 + k]);
  }
  grad[1] += d_sigma * sigma.dvalue_du;
  return lp;
}

namespace {

// Shared skeleton for the bivariate-parent families. `K` sites; non-centered
// innovations z; per-site site-level likelihood supplied by the caller via
// the (d_mu_k, d_tau_k, site params) hook.
struct BivariateBlock {
  double mu, tau;
  ScaleValue theta1, theta2;
  CorrValue corr;  // rho forced to 0 for independent parents
  bool joint;
};

BivariateBlock read_bivariate(std::span<const double> u, std::span<double> grad,
                              const PriorConfig& prior, bool joint, double& lp) {
  BivariateBlock b;
  b.joint = joint;
  b.mu = u[0];
  b.tau = u[1];
  hypermean_prior(b.mu, prior.hypermean_sd, lp, grad[0]);
  hypermean_prior(b.tau, prior.hypermean_sd, lp, grad[1]);
  b.theta1 = scale_param(u[2], prior, lp);
  b.theta2 = scale_param(u[3], prior, lp);
  grad[2] += b.theta1.prior_grad_du;
  grad[3] += b.theta2.prior_grad_du;
  if (joint) {
    b.corr = corr_param(u[4], prior.lkj_eta, lp);
    grad[4] += b.corr.prior_grad_dy;
  } else {
    b.corr = CorrValue{0.0, 1.0, 0.0, 0.0};
  }
  return b;
}

}  // namespace

double joint_summary_lp(std::span<const double> u, std::span<double> grad,
                        const SummaryDataset& data, const PriorConfig& prior) {
  if (!data.has_mu()) throw SchemaError("joint_summary_lp: summary data lacks mu columns");
  const std::size_t K = data.n_sites();
  if (u.size() != 5 + 2 * K || grad.size() != u.size())
    throw DomainError("joint_summary_lp: wrong parameter dimension");
  std::fill(grad.begin(), grad.end(), 0.0);
  double lp = 0.0;
  auto b = read_bivariate(u, grad, prior, /*joint=*/true, lp);

  const std::size_t z0 = 5;
  double d_t1 = 0.0, d_t2 = 0.0, d_rho = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double zm = u[z0 + 2 * k];
    const double zt = u[z0 + 2 * k + 1];
    const double mu_k = b.mu + b.theta1.value * zm;
    const double tau_k = b.tau + b.theta2.value * (b.corr.rho * zm + b.corr.rho_bar * zt);
    const auto nt = normal_lpdf_grad(data.tau_hat[k], tau_k, data.se_tau[k]);
    const auto nm = normal_lpdf_grad(data.mu_hat[k], mu_k, data.se_mu[k]);
    lp += nt.logpdf + nm.logpdf;
    const double d_mu_k = nm.d_mean;
    const double d_tau_k = nt.d_mean;
    grad[0] += d_mu_k;
    grad[1] += d_tau_k;
    d_t1 += d_mu_k * zm;
    d_t2 += d_tau_k * (b.corr.rho * zm + b.corr.rho_bar * zt);
    d_rho += d_tau_k * b.theta2.value * (zm - b.corr.rho / b.corr.rho_bar * zt);
    grad[z0 + 2 * k] += d_mu_k * b.theta1.value + d_tau_k * b.theta2.value * b.corr.rho;
    grad[z0 + 2 * k + 1] += d_tau_k * b.theta2.value * b.corr.rho_bar;
    std_normal_prior(zm, lp, grad[z0 + 2 * k]);
    std_normal_prior(zt, lp, grad[z0 + 2 * k + 1]);
  }
  grad[2] += d_t1 * b.theta1.dvalue_du;
  grad[3] += d_t2 * b.theta2.dvalue_du;
  grad[4] += d_rho * b.corr.drho_dy;
  return lp;
}

namespace {

double full_data_lp_impl(std::span<const double> u, std::span<double> grad,
                         const std::vector<ArmStats>& stats, const PriorConfig& prior,
                         bool joint) {
  const std::size_t K = stats.size();
  const std::size_t head = joint ? 5 : 4;
  if (u.size() != head + 3 * K || grad.size() != u.size())
    throw DomainError("full_data_lp: wrong parameter dimension");
  std::fill(grad.begin(), grad.end(), 0.0);
  double lp = 0.0;
  auto b = read_bivariate(u, grad, prior, joint, lp);

  const std::size_t z0 = head;
  const std::size_t v0 = head + 2 * K;
  double d_t1 = 0.0, d_t2 = 0.0, d_rho = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double zm = u[z0 + 2 * k];
    const double zt = u[z0 + 2 * k + 1];
    const auto sy = sigma_y_param(u[v0 + k], prior, lp);
    const double mu_k = b.mu + b.theta1.value * zm;
    const double tau_k = b.tau + b.theta2.value * (b.corr.rho * zm + b.corr.rho_bar * zt);
    const auto lik = gaussian_lik(stats[k], mu_k, tau_k, sy.value, lp);
    grad[0] += lik.d_mu;
    grad[1] += lik.d_tau;
    d_t1 += lik.d_mu * zm;
    d_t2 += lik.d_tau * (b.corr.rho * zm + b.corr.rho_bar * zt);
    if (joint) d_rho += lik.d_tau * b.theta2.value * (zm - b.corr.rho / b.corr.rho_bar * zt);
    grad[z0 + 2 * k] += lik.d_mu * b.theta1.value + lik.d_tau * b.theta2.value * b.corr.rho;
    grad[z0 + 2 * k + 1] += lik.d_tau * b.theta2.value * b.corr.rho_bar;
    grad[v0 + k] += lik.d_sigma * sy.dvalue_dv + sy.prior_grad_dv;
    std_normal_prior(zm, lp, grad[z0 + 2 * k]);
    std_normal_prior(zt, lp, grad[z0 + 2 * k + 1]);
  }
  grad[2] += d_t1 * b.theta1.dvalue_du;
  grad[3] += d_t2 * b.theta2.dvalue_du;
  if (joint) grad[4] += d_rho * b.corr.drho_dy;
  return lp;
}

}  // namespace

double full_data_lp(std::span<const double> u, std::span<double> grad,
                    const std::vector<ArmStats>& stats, const PriorConfig& prior) {
  return full_data_lp_impl(u, grad, stats, prior, /*joint=*/true);
}

double independent_full_data_lp(std::span<const double> u, std::span<double> grad,
                                const std::vector<ArmStats>& stats, const PriorConfig& prior) {
  return full_data_lp_impl(u, grad, stats, prior, /*joint=*/false);
}

double interactions_lp(std::span<const double> u, std::span<double> grad,
                       const std::vector<std::vector<ArmStats>>& stats,
                       const PriorConfig& prior) {
  const std::size_t K = stats.size();
  if (K == 0) throw DomainError("interactions_lp: no sites");
  const std::size_t C = stats[0].size();
  // layout: [mu_l, tau_l] x C | [a_mu_l, a_tau_l] x C | [zm, zt] x C x K | v x K
  const std::size_t hyper0 = 0;
  const std::size_t scale0 = 2 * C;
  const std::size_t z0 = 4 * C;
  const std::size_t v0 = 4 * C + 2 * C * K;
  if (u.size() != v0 + K || grad.size() != u.size())
    throw DomainError("interactions_lp: wrong parameter dimension");
  std::fill(grad.begin(), grad.end(), 0.0);
  double lp = 0.0;

  std::vector<ScaleValue> s_mu(C), s_tau(C);
  for (std::size_t l = 0; l < C; ++l) {
    hypermean_prior(u[hyper0 + 2 * l], prior.hypermean_sd, lp, grad[hyper0 + 2 * l]);
    hypermean_prior(u[hyper0 + 2 * l + 1], prior.hypermean_sd, lp, grad[hyper0 + 2 * l + 1]);
    s_mu[l] = scale_param(u[scale0 + 2 * l], prior, lp);
    s_tau[l] = scale_param(u[scale0 + 2 * l + 1], prior, lp);
    grad[scale0 + 2 * l] += s_mu[l].prior_grad_du;
    grad[scale0 + 2 * l + 1] += s_tau[l].prior_grad_du;
  }

  for (std::size_t k = 0; k < K; ++k) {
    const auto sy = sigma_y_param(u[v0 + k], prior, lp);
    double d_sigma = 0.0;
    for (std::size_t l = 0; l < C; ++l) {
      const std::size_t zi = z0 + 2 * (l * K + k);
      const double zm = u[zi];
      const double zt = u[zi + 1];
      const double mu_lk = u[hyper0 + 2 * l] + s_mu[l].value * zm;
      const double tau_lk = u[hyper0 + 2 * l + 1] + s_tau[l].value * zt;
      const auto lik = gaussian_lik(stats[k][l], mu_lk, tau_lk, sy.value, lp);
      grad[hyper0 + 2 * l] += lik.d_mu;
      grad[hyper0 + 2 * l + 1] += lik.d_tau;
      grad[scale0 + 2 * l] += lik.d_mu * zm * s_mu[l].dvalue_du;
      grad[scale0 + 2 * l + 1] += lik.d_tau * zt * s_tau[l].dvalue_du;
      grad[zi] += lik.d_mu * s_mu[l].value;
      grad[zi + 1] += lik.d_tau * s_tau[l].value;
      std_normal_prior(zm, lp, grad[zi]);
      std_normal_prior(zt, lp, grad[zi + 1]);
      d_sigma += lik.d_sigma;
    }
    grad[v0 + k] += d_sigma * sy.dvalue_dv + sy.prior_grad_dv;
  }
  return lp;
}

double ridge_site_lp(std::span<const double> u, std::span<double> grad,
                     const std::vector<ArmStats>& stats,
                     const std::vector<std::vector<double>>& covariates_mu,
                     const std::vector<std::vector<double>>& covariates_tau,
                     const PriorConfig& prior) {
  const std::size_t K = stats.size();
  const std::size_t M = covariates_mu.size();
  const std::size_t Mt = covariates_tau.size();
  // layout: mu, tau | beta_mu x M | beta_tau x Mt | a1, a2, y | [zm, zt] x K | v x K
  const std::size_t bmu0 = 2;
  const std::size_t btau0 = 2 + M;
  const std::size_t th0 = 2 + M + Mt;
  const std::size_t z0 = th0 + 3;
  const std::size_t v0 = z0 + 2 * K;
  if (u.size() != v0 + K || grad.size() != u.size())
    throw DomainError("ridge_site_lp: wrong parameter dimension");
  std::fill(grad.begin(), grad.end(), 0.0);
  double lp = 0.0;

  const double mu = u[0];
  const double tau = u[1];
  hypermean_prior(mu, prior.hypermean_sd, lp, grad[0]);
  hypermean_prior(tau, prior.hypermean_sd, lp, grad[1]);
  for (std::size_t j = 0; j < M; ++j) {
    lp += normal_lpdf(u[bmu0 + j], 0.0, prior.ridge_sd);
    grad[bmu0 + j] += -u[bmu0 + j] / (prior.ridge_sd * prior.ridge_sd);
  }
  for (std::size_t j = 0; j < Mt; ++j) {
    lp += normal_lpdf(u[btau0 + j], 0.0, prior.ridge_sd);
    grad[btau0 + j] += -u[btau0 + j] / (prior.ridge_sd * prior.ridge_sd);
  }
  auto t1 = scale_param(u[th0], prior, lp);
  auto t2 = scale_param(u[th0 + 1], prior, lp);
  auto corr = corr_param(u[th0 + 2], prior.lkj_eta, lp);
  grad[th0] += t1.prior_grad_du;
  grad[th0 + 1] += t2.prior_grad_du;
  grad[th0 + 2] += corr.prior_grad_dy;

  double d_t1 = 0.0, d_t2 = 0.0, d_rho = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double zm = u[z0 + 2 * k];
    const double zt = u[z0 + 2 * k + 1];
    const auto sy = sigma_y_param(u[v0 + k], prior, lp);
    double mu_shift = 0.0, tau_shift = 0.0;
    for (std::size_t j = 0; j < M; ++j) mu_shift += covariates_mu[j][k] * u[bmu0 + j];
    for (std::size_t j = 0; j < Mt; ++j) tau_shift += covariates_tau[j][k] * u[btau0 + j];
    const double mu_k = mu + mu_shift + t1.value * zm;
    const double tau_k = tau + tau_shift + t2.value * (corr.rho * zm + corr.rho_bar * zt);
    const auto lik = gaussian_lik(stats[k], mu_k, tau_k, sy.value, lp);
    grad[0] += lik.d_mu;
    grad[1] += lik.d_tau;
    for (std::size_t j = 0; j < M; ++j) grad[bmu0 + j] += lik.d_mu * covariates_mu[j][k];
    for (std::size_t j = 0; j < Mt; ++j) grad[btau0 + j] += lik.d_tau * covariates_tau[j][k];
    d_t1 += lik.d_mu * zm;
    d_t2 += lik.d_tau * (corr.rho * zm + corr.rho_bar * zt);
    d_rho += lik.d_tau * t2.value * (zm - corr.rho / corr.rho_bar * zt);
    grad[z0 + 2 * k] += lik.d_mu * t1.value + lik.d_tau * t2.value * corr.rho;
    grad[z0 + 2 * k + 1] += lik.d_tau * t2.value * corr.rho_bar;
    grad[v0 + k] += lik.d_sigma * sy.dvalue_dv + sy.prior_grad_dv;
    std_normal_prior(zm, lp, grad[z0 + 2 * k]);
    std_normal_prior(zt, lp, grad[z0 + 2 * k + 1]);
  }
  grad[th0] += d_t1 * t1.dvalue_du;
  grad[th0 + 1] += d_t2 * t2.dvalue_du;
  grad[th0 + 2] += d_rho * corr.drho_dy;
  return lp;
}

// ---------------------------------------------------------------------------
// layouts, readouts, target assembly

namespace {

std::size_t site_count(const ModelSpec& spec, const DataBundle& data) {
  switch (spec.family) {
    case Family::rubin_summary:
    case Family::joint_summary:
      if (!data.summary) throw SchemaError("family requires summary data");
      return data.summary->n_sites();
    case Family::interactions:
      if (!data.cells || !data.cells->data) throw SchemaError("family requires interaction cells");
      return data.cells->data->n_sites();
    default:
      if (!data.micro) throw SchemaError("family requires microdata");
      return data.micro->n_sites();
  }
}

void check_standardized(const SiteCovariateTable& t) {
  const double n = static_cast<double>(t.n_sites());
  for (std::size_t c = 0; c < t.n_columns(); ++c) {
    double mean = 0.0;
    for (double v : t.columns[c]) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : t.columns[c]) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    if (std::abs(mean) > 1e-6 || std::abs(sd - 1.0) > 1e-4)
      throw SchemaError("site covariate column '" + t.column_names[c] +
                        "' is not standardized (mean " + std::to_string(mean) + ", sd " +
                        std::to_string(sd) + ")");
  }
}

}  // namespace

ParamLayout layout_for(const ModelSpec& spec, const DataBundle& data) {
  const std::size_t K = site_count(spec, data);
  ParamLayout layout;
  auto add = [&layout](const std::string& name, std::size_t size) {
    layout.slices.push_back({name, layout.dim, size});
    layout.dim += size;
  };
  switch (spec.family) {
    case Family::rubin_summary:
      add("tau", 1);
      add("log_sigma_tau", 1);
      add("z", K);
      break;
    case Family::joint_summary:
      add("mu", 1);
      add("tau", 1);
      add("log_theta", 2);
      add("corr", 1);
      add("z", 2 * K);
      break;
    case Family::full_data_joint:
      add("mu", 1);
      add("tau", 1);
      add("log_theta", 2);
      add("corr", 1);
      add("z", 2 * K);
      add("sigma_y_raw", K);
      break;
    case Family::full_data_independent:
      add("mu", 1);
      add("tau", 1);
      add("log_theta", 2);
      add("z", 2 * K);
      add("sigma_y_raw", K);
      break;
    case Family::interactions: {
      if (!data.cells) throw SchemaError("interactions family requires cells");
      if (data.cells->n_covariates() < 1)
        throw ValidationError("interactions family needs at least one covariate");
      const std::size_t C = data.cells->n_cells();
      add("cell_hypermeans", 2 * C);
      add("cell_log_scales", 2 * C);
      add("z", 2 * C * K);
      add("sigma_y_raw", K);
      break;
    }
    case Family::site_ridge: {
      if (!data.site_covariates) throw SchemaError("site_ridge family requires site covariates");
      const std::size_t M = data.site_covariates->n_columns();
      std::size_t Mt = M;
      if (!spec.ridge.omit_from_tau.empty()) {
        if (!data.site_covariates->column_index(spec.ridge.omit_from_tau))
          throw SchemaError("omit_from_tau column '" + spec.ridge.omit_from_tau +
                            "' not in covariate table");
        Mt = M - 1;
      }
      add("mu", 1);
      add("tau", 1);
      add("beta_mu", M);
      add("beta_tau", Mt);
      add("log_theta", 2);
      add("corr", 1);
      add("z", 2 * K);
      add("sigma_y_raw", K);
      break;
    }
  }
  return layout;
}

TargetDensity make_target(const ModelSpec& spec, const DataBundle& data) {
  const std::size_t K = site_count(spec, data);
  const ParamLayout layout = layout_for(spec, data);
  const PriorConfig prior = spec.prior;
  TargetDensity target;
  target.dim = layout.dim;

  auto constrain_scale = [prior](double u) {
    return prior.scale_upper > 0.0 ? transforms::bounded(u, 0.0, prior.scale_upper).value
                                   : std::exp(u);
  };
  auto constrain_sigma_y = [prior](double v) {
    return transforms::bounded(v, prior.sigma_y_lo, prior.sigma_y_hi).value;
  };

  switch (spec.family) {
    case Family::rubin_summary: {
      const SummaryDataset d = *data.summary;
      target.logp_grad = [d, prior](std::span<const double> u, std::span<double> g) {
        return rubin_lp(u, g, d, prior);
      };
      target.param_names.push_back("tau");
      for (std::size_t k = 0; k < K; ++k) target.param_names.push_back(idx1("tau", k));
      target.param_names.push_back("sigma_tau");
      target.constrain = [K, constrain_scale](std::span<const double> u) {
        std::vector<double> out;
        out.reserve(K + 2);
        const double tau = u[0];
        const double sigma = constrain_scale(u[1]);
        out.push_back(tau);
        for (std::size_t k = 0; k < K; ++k) out.push_back(tau + sigma * u[2 + k]);
        out.push_back(sigma);
        return out;
      };
      break;
    }
    case Family::joint_summary:
    case Family::full_data_joint:
    case Family::full_data_independent:
    case Family::site_ridge: {
      const bool joint = spec.family != Family::full_data_independent;
      const bool has_sigma_y = spec.family != Family::joint_summary;
      const bool ridge = spec.family == Family::site_ridge;

      // covariate matrices for the ridge family, [column][site]
      std::vector<std::vector<double>> x_mu, x_tau;
      std::vector<std::string> cov_names, cov_tau_names;
      if (ridge) {
        if (!data.micro) throw SchemaError("site_ridge family requires microdata");
        const auto& table = *data.site_covariates;
        if (table.site_labels != data.micro->site_labels)
          throw ValidationError("site covariate rows do not match microdata sites");
        check_standardized(table);
        for (std::size_t c = 0; c < table.n_columns(); ++c) {
          x_mu.push_back(table.columns[c]);
          cov_names.push_back(table.column_names[c]);
          if (table.column_names[c] != spec.ridge.omit_from_tau) {
            x_tau.push_back(table.columns[c]);
            cov_tau_names.push_back(table.column_names[c]);
          }
        }
      }

      if (spec.family == Family::joint_summary) {
        if (!data.summary) throw SchemaError("joint_summary requires summary data");
        if (!data.summary->has_mu())
          throw SchemaError("joint_summary requires mu_hat and se_mu columns");
        const SummaryDataset d = *data.summary;
        target.logp_grad = [d, prior](std::span<const double> u, std::span<double> g) {
          return joint_summary_lp(u, g, d, prior);
        };
      } else {
        const std::vector<ArmStats> stats = compute_arm_stats(*data.micro);
        if (spec.family == Family::full_data_joint) {
          target.logp_grad = [stats, prior](std::span<const double> u, std::span<double> g) {
            return full_data_lp(u, g, stats, prior);
          };
        } else if (spec.family == Family::full_data_independent) {
          target.logp_grad = [stats, prior](std::span<const double> u, std::span<double> g) {
            return independent_full_data_lp(u, g, stats, prior);
          };
        } else {
          target.logp_grad = [stats, x_mu, x_tau, prior](std::span<const double> u,
                                                         std::span<double> g) {
            return ridge_site_lp(u, g, stats, x_mu, x_tau, prior);
          };
        }
      }

      target.param_names = {"mu", "tau"};
      const std::size_t M = x_mu.size(), Mt = x_tau.size();
      if (ridge) {
        for (std::size_t j = 0; j < M; ++j) target.param_names.push_back(idx1("beta_mu", j));
        for (std::size_t j = 0; j < Mt; ++j) target.param_names.push_back(idx1("beta_tau", j));
      }
      for (std::size_t k = 0; k < K; ++k) {
        target.param_names.push_back(idx1("mu", k));
        target.param_names.push_back(idx1("tau", k));
      }
      if (has_sigma_y)
        for (std::size_t k = 0; k < K; ++k) target.param_names.push_back(idx1("sigma_y", k));
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) target.param_names.push_back(idx2("Omega", i, j));
      target.param_names.push_back(idx1("theta", 0));
      target.param_names.push_back(idx1("theta", 1));
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) target.param_names.push_back(idx2("V", i, j));

      const std::size_t head = 2 + (ridge ? M + Mt : 0);
      target.constrain = [K, head, M, Mt, joint, has_sigma_y, ridge, x_mu, x_tau,
                          constrain_scale, constrain_sigma_y](std::span<const double> u) {
        std::vector<double> out;
        const double mu = u[0];
        const double tau = u[1];
        out.push_back(mu);
        out.push_back(tau);
        if (ridge)
          for (std::size_t j = 0; j < M + Mt; ++j) out.push_back(u[2 + j]);
        const double t1 = constrain_scale(u[head]);
        const double t2 = constrain_scale(u[head + 1]);
        const double rho = joint ? std::tanh(u[head + 1 + 1]) : 0.0;
        const double rho_bar = std::sqrt(1.0 - rho * rho);
        const std::size_t z0 = head + (joint ? 3 : 2);
        for (std::size_t k = 0; k < K; ++k) {
          const double zm = u[z0 + 2 * k];
          const double zt = u[z0 + 2 * k + 1];
          double mu_shift = 0.0, tau_shift = 0.0;
          for (std::size_t j = 0; j < M; ++j) mu_shift += x_mu[j][k] * u[2 + j];
          for (std::size_t j = 0; j < Mt; ++j) tau_shift += x_tau[j][k] * u[2 + M + j];
          out.push_back(mu + mu_shift + t1 * zm);
          out.push_back(tau + tau_shift + t2 * (rho * zm + rho_bar * zt));
        }
        if (has_sigma_y) {
          const std::size_t v0 = z0 + 2 * K;
          for (std::size_t k = 0; k < K; ++k) out.push_back(constrain_sigma_y(u[v0 + k]));
        }
        out.push_back(1.0);
        out.push_back(rho);
        out.push_back(rho);
        out.push_back(1.0);
        out.push_back(t1);
        out.push_back(t2);
        out.push_back(t1 * t1);
        out.push_back(t1 * t2 * rho);
        out.push_back(t1 * t2 * rho);
        out.push_back(t2 * t2);
        return out;
      };
      break;
    }
    case Family::interactions: {
      const CellDataset& cells = *data.cells;
      const std::vector<std::vector<ArmStats>> stats = compute_cell_stats(cells);
      const std::size_t C = cells.n_cells();
      target.logp_grad = [stats, prior](std::span<const double> u, std::span<double> g) {
        return interactions_lp(u, g, stats, prior);
      };
      for (std::size_t l = 0; l < C; ++l) {
        target.param_names.push_back(idx1("mu_cell", l));
        target.param_names.push_back(idx1("tau_cell", l));
      }
      for (std::size_t l = 0; l < C; ++l)
        for (std::size_t k = 0; k < K; ++k) {
          target.param_names.push_back(cell2("mu_cell", l, k));
          target.param_names.push_back(cell2("tau_cell", l, k));
        }
      for (std::size_t k = 0; k < K; ++k) target.param_names.push_back(idx1("sigma_y", k));
      for (std::size_t l = 0; l < C; ++l) {
        target.param_names.push_back(idx1("sigma_mu_cell", l));
        target.param_names.push_back(idx1("sigma_tau_cell", l));
      }
      target.constrain = [K, C, constrain_scale, constrain_sigma_y](std::span<const double> u) {
        std::vector<double> out;
        const std::size_t scale0 = 2 * C;
        const std::size_t z0 = 4 * C;
        const std::size_t v0 = 4 * C + 2 * C * K;
        for (std::size_t l = 0; l < 2 * C; ++l) out.push_back(u[l]);
        for (std::size_t l = 0; l < C; ++l) {
          const double sm = constrain_scale(u[scale0 + 2 * l]);
          const double st = constrain_scale(u[scale0 + 2 * l + 1]);
          for (std::size_t k = 0; k < K; ++k) {
            const std::size_t zi = z0 + 2 * (l * K + k);
            out.push_back(u[2 * l] + sm * u[zi]);
            out.push_back(u[2 * l + 1] + st * u[zi + 1]);
          }
        }
        for (std::size_t k = 0; k < K; ++k) out.push_back(constrain_sigma_y(u[v0 + k]));
        for (std::size_t l = 0; l < C; ++l) {
          out.push_back(constrain_scale(u[scale0 + 2 * l]));
          out.push_back(constrain_scale(u[scale0 + 2 * l + 1]));
        }
        return out;
      };
      break;
    }
  }
  return target;
}

}  // namespace hbma
