#include "hbma/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>

#include "hbma/csv.hpp"
#include "hbma/errors.hpp"
#include "hbma/rng.hpp"

namespace hbma {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMaxEnergyError = 1000.0;  // divergence threshold

double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? kNan : s / static_cast<double>(v.size());
}

double var_of(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return kNan;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

std::vector<std::vector<double>> split_in_half(const std::vector<std::vector<double>>& chains) {
  std::vector<std::vector<double>> halves;
  for (const auto& chain : chains) {
    const std::size_t n = chain.size() / 2;  // odd middle element dropped
    halves.emplace_back(chain.begin(), chain.begin() + n);
    halves.emplace_back(chain.end() - n, chain.end());
  }
  return halves;
}

// between/within variance decomposition shared by rhat and ess
struct VarDecomp {
  double w = kNan;         // mean within-sequence variance
  double var_plus = kNan;  // marginal posterior variance estimate
  bool degenerate = true;
};
VarDecomp decompose(const std::vector<std::vector<double>>& seqs) {
  VarDecomp d;
  if (seqs.size() < 2) return d;
  const double n = static_cast<double>(seqs[0].size());
  if (n < 2) return d;
  std::vector<double> means, vars;
  for (const auto& s : seqs) {
    const double m = mean_of(s);
    means.push_back(m);
    vars.push_back(var_of(s, m));
  }
  d.w = mean_of(vars);
  const double b_over_n = var_of(means, mean_of(means));
  if (!std::isfinite(d.w) || d.w <= 0.0) return d;
  d.var_plus = (n - 1.0) / n * d.w + b_over_n;
  d.degenerate = false;
  return d;
}

}  // namespace

void SamplerConfig::validate() const {
  if (chains == 0) throw ValidationError("sampler config: chains must be positive");
  if (iters == 0) throw ValidationError("sampler config: iters must be positive");
  if (!(target_accept > 0.0 && target_accept < 1.0))
    throw ValidationError("sampler config: target_accept must lie in (0,1)");
  if (max_tree_depth == 0) throw ValidationError("sampler config: max_tree_depth must be positive");
  if (!(init_radius > 0.0)) throw ValidationError("sampler config: init_radius must be positive");
}

double split_rhat(const std::vector<std::vector<double>>& chains) {
  const auto halves = split_in_half(chains);
  const auto d = decompose(halves);
  if (d.degenerate) return kNan;
  return std::sqrt(d.var_plus / d.w);
}

EssMcse ess_and_mcse(const std::vector<std::vector<double>>& chains) {
  const auto seqs = split_in_half(chains);
  const auto d = decompose(seqs);
  if (d.degenerate || !(d.var_plus > 0.0)) return {kNan, kNan};
  const std::size_t m = seqs.size();
  const std::size_t n = seqs[0].size();

  std::vector<double> means;
  for (const auto& s : seqs) means.push_back(mean_of(s));

  // lag-t correlation estimate from the variogram; computed lazily because
  // Geyer's rule usually terminates after a handful of lags
  auto rho_at = [&](std::size_t t) {
    double vt = 0.0;
    for (const auto& s : seqs)
      for (std::size_t i = 0; i + t < n; ++i) {
        const double diff = s[i + t] - s[i];
        vt += diff * diff;
      }
    vt /= static_cast<double>(m * (n - t));
    return 1.0 - vt / (2.0 * d.var_plus);
  };

  // initial monotone positive sequence over paired correlations
  double tau = -1.0;
  double prev_pair = kInf;
  for (std::size_t t = 0; t + 1 < n; t += 2) {
    const double rho_even = (t == 0) ? 1.0 : rho_at(t);
    const double rho_odd = rho_at(t + 1);
    double pair = rho_even + rho_odd;
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(m * n) + 10.0));

  const double ess = static_cast<double>(m * n) / tau;
  // sd from pooled draws
  std::vector<double> all;
  all.reserve(m * n);
  for (const auto& s : seqs) all.insert(all.end(), s.begin(), s.end());
  const double sd = std::sqrt(var_of(all, mean_of(all)));
  return {ess, sd / std::sqrt(ess)};
}

// ---------------------------------------------------------------------------
// NUTS

namespace {

struct PhasePoint {
  std::vector<double> q;
  std::vector<double> p;
  std::vector<double> grad;
  double logp = 0.0;
};

struct ChainOutput {
  std::vector<double> draws;  // [iter][constrained param]
  std::size_t divergences = 0;
  double step_size = 0.0;
};

struct DualAveraging {
  double delta;
  double mu = 0.0;
  double log_eps = 0.0;
  double log_eps_bar = 0.0;
  double h_bar = 0.0;
  double counter = 0.0;
  static constexpr double gamma = 0.05;
  static constexpr double t0 = 10.0;
  static constexpr double kappa = 0.75;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    log_eps = std::log(eps);
    log_eps_bar = 0.0;
    h_bar = 0.0;
    counter = 0.0;
  }
  double update(double alpha) {
    counter += 1.0;
    h_bar = (1.0 - 1.0 / (counter + t0)) * h_bar + (delta - alpha) / (counter + t0);
    log_eps = mu - std::sqrt(counter) * h_bar / gamma;
    const double w = std::pow(counter, -kappa);
    log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
    return std::exp(log_eps);
  }
  double adapted() const { return std::exp(log_eps_bar); }
};

// Welford accumulator for the diagonal metric
struct RunningVariance {
  std::size_t n = 0;
  std::vector<double> mean, m2;
  void reset(std::size_t dim) {
    n = 0;
    mean.assign(dim, 0.0);
    m2.assign(dim, 0.0);
  }
  void add(const std::vector<double>& x) {
    ++n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d / static_cast<double>(n);
      m2[i] += d * (x[i] - mean[i]);
    }
  }
  // regularized toward unit scale, as is conventional for windowed adaptation
  std::vector<double> regularized() const {
    std::vector<double> v(mean.size(), 1.0);
    if (n < 3) return v;
    const double dn = static_cast<double>(n);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double raw = m2[i] / (dn - 1.0);
      v[i] = dn / (dn + 5.0) * raw + 1e-3 * (5.0 / (dn + 5.0));
    }
    return v;
  }
};

class ChainSampler {
 public:
  ChainSampler(const TargetDensity& target, const SamplerConfig& cfg, std::size_t chain_index)
      : target_(target),
        cfg_(cfg),
        rng_(cfg.seed, chain_index),
        inv_mass_(target.dim, 1.0),
        chain_index_(chain_index) {}

  ChainOutput run() {
    PhasePoint state = initialize();
    if (chain_index_ == 0 && cfg_.check_gradient) self_check_gradient(state.q);

    eps_ = find_reasonable_eps(state);
    da_.delta = cfg_.target_accept;
    da_.restart(eps_);

    const auto windows = metric_windows();
    RunningVariance accum;
    accum.reset(target_.dim);
    std::size_t window_idx = 0;

    for (std::size_t m = 0; m < cfg_.warmup; ++m) {
      const auto res = transition(state);
      eps_ = da_.update(res.accept_stat);
      if (window_idx < windows.size()) {
        const auto [w_begin, w_end] = windows[window_idx];
        if (m >= w_begin) accum.add(state.q);
        if (m + 1 == w_end) {
          inv_mass_ = accum.regularized();
          accum.reset(target_.dim);
          ++window_idx;
          state = refresh(state.q);  // gradients unchanged; recompute for safety
          eps_ = find_reasonable_eps(state);
          da_.restart(eps_);
        }
      }
    }
    if (cfg_.warmup > 0) eps_ = da_.adapted();

    ChainOutput out;
    out.step_size = eps_;
    out.draws.reserve(cfg_.iters * target_.param_names.size());
    for (std::size_t m = 0; m < cfg_.iters; ++m) {
      const auto res = transition(state);
      if (res.divergent) ++out.divergences;
      const auto constrained = target_.constrain(state.q);
      out.draws.insert(out.draws.end(), constrained.begin(), constrained.end());
    }
    return out;
  }

 private:
  struct TransitionResult {
    double accept_stat = 0.0;
    bool divergent = false;
  };

  struct Tree {
    PhasePoint left, right;
    std::vector<double> q_prop;
    double logw = -kInf;
    double sum_alpha = 0.0;
    std::size_t n_alpha = 0;
    bool divergent = false;
    bool turning = false;
  };

  PhasePoint refresh(const std::vector<double>& q) {
    PhasePoint s;
    s.q = q;
    s.p.assign(target_.dim, 0.0);
    s.grad.assign(target_.dim, 0.0);
    s.logp = target_.logp_grad(s.q, s.grad);
    return s;
  }

  PhasePoint initialize() {
    for (int attempt = 0; attempt < 100; ++attempt) {
      std::vector<double> q(target_.dim);
      for (auto& qi : q) qi = rng_.uniform(-cfg_.init_radius, cfg_.init_radius);
      PhasePoint s = refresh(q);
      if (!std::isfinite(s.logp)) continue;
      bool grad_ok = true;
      for (double g : s.grad)
        if (!std::isfinite(g)) {
          grad_ok = false;
          break;
        }
      if (grad_ok) return s;
    }
    throw InitializationError("non-finite density at all of 100 randomized init attempts");
  }

  void self_check_gradient(const std::vector<double>& q) {
    std::vector<double> grad(target_.dim);
    const double lp = target_.logp_grad(q, grad);
    std::vector<double> probe(target_.dim);
    std::vector<double> scratch(target_.dim);
    const std::size_t n_check = std::min<std::size_t>(target_.dim, 8);
    const std::size_t stride = std::max<std::size_t>(1, target_.dim / n_check);
    for (std::size_t i = 0; i < target_.dim; i += stride) {
      const double h = 1e-5 * (1.0 + std::abs(q[i]));
      probe = q;
      probe[i] = q[i] + h;
      const double up = target_.logp_grad(probe, scratch);
      probe[i] = q[i] - h;
      const double dn = target_.logp_grad(probe, scratch);
      const double fd = (up - dn) / (2.0 * h);
      const double tol = 1e-4 * std::max({1.0, std::abs(fd), std::abs(grad[i])}) +
                         1e-10 * std::abs(lp) / h;
      if (!std::isfinite(fd) || std::abs(fd - grad[i]) > tol)
        throw InitializationError("gradient self-check failed at startup (coordinate " +
                                  std::to_string(i) + ")");
    }
  }

  double kinetic(const std::vector<double>& p) const {
    double k = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) k += p[i] * p[i] * inv_mass_[i];
    return 0.5 * k;
  }

  void sample_momentum(PhasePoint& s) {
    for (std::size_t i = 0; i < target_.dim; ++i) s.p[i] = rng_.normal() / std::sqrt(inv_mass_[i]);
  }

  void leapfrog(PhasePoint& s, double eps) {
    for (std::size_t i = 0; i < target_.dim; ++i) s.p[i] += 0.5 * eps * s.grad[i];
    for (std::size_t i = 0; i < target_.dim; ++i) s.q[i] += eps * inv_mass_[i] * s.p[i];
    s.logp = target_.logp_grad(s.q, s.grad);
    for (std::size_t i = 0; i < target_.dim; ++i) s.p[i] += 0.5 * eps * s.grad[i];
  }

  double find_reasonable_eps(const PhasePoint& start) {
    double eps = 1.0;
    PhasePoint s = start;
    sample_momentum(s);
    const double h0 = -s.logp + kinetic(s.p);
    auto accept_of = [&](double e) {
      PhasePoint t = s;
      leapfrog(t, e);
      if (!std::isfinite(t.logp)) return 0.0;
      const double h1 = -t.logp + kinetic(t.p);
      return std::exp(std::min(0.0, h0 - h1));
    };
    double a = accept_of(eps);
    const bool grow = a > 0.5;
    for (int i = 0; i < 50; ++i) {
      eps *= grow ? 2.0 : 0.5;
      a = accept_of(eps);
      if (grow ? a <= 0.5 : a >= 0.5) break;
      if (eps > 1e7 || eps < 1e-10) break;
    }
    return std::clamp(eps, 1e-10, 1e7);
  }

  bool uturn(const PhasePoint& left, const PhasePoint& right) const {
    double dot_left = 0.0, dot_right = 0.0;
    for (std::size_t i = 0; i < target_.dim; ++i) {
      const double dq = right.q[i] - left.q[i];
      dot_left += dq * inv_mass_[i] * left.p[i];
      dot_right += dq * inv_mass_[i] * right.p[i];
    }
    return dot_left < 0.0 || dot_right < 0.0;
  }

  Tree leaf(const PhasePoint& from, double directed_eps, double h0) {
    Tree t;
    PhasePoint s = from;
    leapfrog(s, directed_eps);
    double h = std::isfinite(s.logp) ? -s.logp + kinetic(s.p) : kInf;
    if (!std::isfinite(h)) h = kInf;
    const double delta_h = h - h0;
    t.divergent = delta_h > kMaxEnergyError;
    t.logw = t.divergent ? -kInf : -delta_h;  // weights relative to exp(-h0)
    t.sum_alpha = delta_h <= 0.0 ? 1.0 : std::exp(-delta_h);
    t.n_alpha = 1;
    t.q_prop = s.q;
    t.left = s;
    t.right = std::move(s);
    return t;
  }

  Tree build_tree(std::size_t depth, const PhasePoint& from, int dir, double h0) {
    if (depth == 0) return leaf(from, dir > 0 ? eps_ : -eps_, h0);
    Tree first = build_tree(depth - 1, from, dir, h0);
    if (first.divergent || first.turning) return first;
    Tree second = build_tree(depth - 1, dir > 0 ? first.right : first.left, dir, h0);

    Tree merged;
    merged.sum_alpha = first.sum_alpha + second.sum_alpha;
    merged.n_alpha = first.n_alpha + second.n_alpha;
    merged.divergent = second.divergent;
    merged.logw = log_sum_exp(first.logw, second.logw);
    // multinomial sampling within the subtree
    merged.q_prop = first.q_prop;
    if (second.logw > -kInf && std::log(rng_.uniform_pos()) < second.logw - merged.logw)
      merged.q_prop = second.q_prop;
    merged.left = dir > 0 ? first.left : second.left;
    merged.right = dir > 0 ? second.right : first.right;
    merged.turning = second.turning || merged.divergent || uturn(merged.left, merged.right);
    return merged;
  }

  TransitionResult transition(PhasePoint& state) {
    sample_momentum(state);
    const double h0 = -state.logp + kinetic(state.p);

    Tree traj;
    traj.left = state;
    traj.right = state;
    traj.q_prop = state.q;
    traj.logw = 0.0;  // exp(-(h0 - h0))
    traj.sum_alpha = 0.0;
    traj.n_alpha = 0;

    TransitionResult res;
    for (std::size_t depth = 0; depth < cfg_.max_tree_depth; ++depth) {
      const int dir = rng_.coin() ? 1 : -1;
      const Tree sub = build_tree(depth, dir > 0 ? traj.right : traj.left, dir, h0);
      traj.sum_alpha += sub.sum_alpha;
      traj.n_alpha += sub.n_alpha;
      if (sub.divergent) {
        res.divergent = true;
        break;
      }
      if (sub.turning) break;
      // biased progressive sampling favors the new subtree
      if (std::log(rng_.uniform_pos()) < sub.logw - traj.logw) traj.q_prop = sub.q_prop;
      traj.logw = log_sum_exp(traj.logw, sub.logw);
      if (dir > 0)
        traj.right = sub.right;
      else
        traj.left = sub.left;
      if (uturn(traj.left, traj.right)) break;
    }
    res.accept_stat =
        traj.n_alpha > 0 ? traj.sum_alpha / static_cast<double>(traj.n_alpha) : 0.0;
    state = refresh(traj.q_prop);
    return res;
  }

  // Stan-style expanding windows between a step-size-only head and tail.
  std::vector<std::pair<std::size_t, std::size_t>> metric_windows() const {
    std::vector<std::pair<std::size_t, std::size_t>> windows;
    if (!cfg_.adapt_metric || cfg_.warmup < 150) return windows;
    const std::size_t init_buffer = 75, term_buffer = 50;
    const std::size_t end = cfg_.warmup - term_buffer;
    std::size_t start = init_buffer;
    std::size_t width = 25;
    while (start + width <= end) {
      // absorb the remainder if the next doubling would not fit
      const bool last = start + 3 * width > end;
      const std::size_t stop = last ? end : start + width;
      windows.emplace_back(start, stop);
      start = stop;
      width *= 2;
    }
    return windows;
  }

  const TargetDensity& target_;
  SamplerConfig cfg_;
  Rng rng_;
  std::vector<double> inv_mass_;
  std::size_t chain_index_;
  double eps_ = 1.0;
  DualAveraging da_{};
};

}  // namespace

std::optional<std::size_t> PosteriorDraws::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  return std::nullopt;
}

std::size_t PosteriorDraws::require_index(const std::string& name) const {
  const auto idx = index_of(name);
  if (!idx) throw DomainError("no posterior parameter named '" + name + "'");
  return *idx;
}

std::vector<double> PosteriorDraws::merged_column(std::size_t param) const {
  std::vector<double> out;
  out.reserve(n_chains * n_iters);
  for (std::size_t c = 0; c < n_chains; ++c)
    for (std::size_t i = 0; i < n_iters; ++i) out.push_back(value(c, i, param));
  return out;
}

std::vector<std::vector<double>> PosteriorDraws::chain_columns(std::size_t param) const {
  std::vector<std::vector<double>> out(n_chains);
  for (std::size_t c = 0; c < n_chains; ++c) {
    out[c].reserve(n_iters);
    for (std::size_t i = 0; i < n_iters; ++i) out[c].push_back(value(c, i, param));
  }
  return out;
}

void PosteriorDraws::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << "chain,iter";
  for (const auto& name : names) out << "," << name;
  out << "\n";
  for (std::size_t c = 0; c < n_chains; ++c)
    for (std::size_t i = 0; i < n_iters; ++i) {
      out << (c + 1) << "," << (i + 1);
      for (std::size_t p = 0; p < names.size(); ++p)
        out << "," << csv::format_double(value(c, i, p));
      out << "\n";
    }
  if (!out) throw IoError("short write: " + path);
}

PosteriorDraws nuts_sample(const TargetDensity& target, const SamplerConfig& config) {
  config.validate();
  if (target.dim == 0 || !target.logp_grad) throw DomainError("nuts_sample: empty target");

  std::vector<ChainOutput> outputs(config.chains);
  auto run_one = [&](std::size_t c) {
    ChainSampler sampler(target, config, c);
    return sampler.run();
  };
  if (config.parallel_chains && config.chains > 1) {
    std::vector<std::future<ChainOutput>> futures;
    for (std::size_t c = 0; c < config.chains; ++c)
      futures.push_back(std::async(std::launch::async, run_one, c));
    for (std::size_t c = 0; c < config.chains; ++c) outputs[c] = futures[c].get();
  } else {
    for (std::size_t c = 0; c < config.chains; ++c) outputs[c] = run_one(c);
  }

  PosteriorDraws draws;
  draws.names = target.param_names;
  draws.n_chains = config.chains;
  draws.n_iters = config.iters;
  draws.seed = config.seed;
  draws.values.reserve(config.chains * config.iters * draws.names.size());
  for (auto& out : outputs) {
    draws.values.insert(draws.values.end(), out.draws.begin(), out.draws.end());
    draws.divergences += out.divergences;
    draws.step_size.push_back(out.step_size);
  }
  draws.divergence_rate =
      static_cast<double>(draws.divergences) / static_cast<double>(config.chains * config.iters);
  draws.divergence_flagged = draws.divergence_rate > 0.10;

  // per-parameter diagnostics and the convergence verdict
  draws.diagnostics.resize(draws.names.size());
  bool ok = config.chains >= 2 && config.iters >= 4;
  double max_rhat = 0.0;
  for (std::size_t p = 0; p < draws.names.size(); ++p) {
    auto& d = draws.diagnostics[p];
    const auto merged = draws.merged_column(p);
    d.mean = mean_of(merged);
    const double v = var_of(merged, d.mean);
    d.sd = std::isfinite(v) ? std::sqrt(v) : 0.0;
    const auto chains = draws.chain_columns(p);
    d.rhat = split_rhat(chains);
    const auto em = ess_and_mcse(chains);
    d.ess = em.ess;
    d.mcse = em.mcse;
    if (d.sd == 0.0) continue;  // constant parameter (e.g. fixed correlation entries)
    if (!std::isfinite(d.rhat) || d.rhat >= 1.1) ok = false;
    if (std::isfinite(d.rhat)) max_rhat = std::max(max_rhat, d.rhat);
  }
  draws.converged = ok;
  draws.max_rhat = max_rhat;
  return draws;
}

}  // namespace hbma
