#include "hbma/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "hbma/analysis.hpp"
#include "hbma/csv.hpp"
#include "hbma/errors.hpp"
#include "hbma/fit.hpp"

namespace hbma {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t s = base + 0x9e3779b97f4a7c15ull * (salt + 1);
  s = (s ^ (s >> 30)) * 0xbf58476d1ce4e5b9ull;
  s = (s ^ (s >> 27)) * 0x94d049bb133111ebull;
  return s ^ (s >> 31);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      const auto t = trim(cur);
      if (!t.empty()) out.push_back(t);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  const auto t = trim(cur);
  if (!t.empty()) out.push_back(t);
  return out;
}

// setters keyed by config name; each returns an error string or ""
using Setter = std::function<std::string(RunConfig&, const std::string&)>;

std::string parse_double_value(const std::string& v, double& out) {
  const char* b = v.data();
  const char* e = b + v.size();
  auto [p, ec] = std::from_chars(b, e, out);
  if (ec != std::errc() || p != e) return "expected a number, got '" + v + "'";
  return "";
}

std::string parse_size_value(const std::string& v, std::size_t& out) {
  double d = 0;
  auto err = parse_double_value(v, d);
  if (!err.empty()) return err;
  if (d < 0 || d != std::floor(d)) return "expected a nonnegative integer, got '" + v + "'";
  out = static_cast<std::size_t>(d);
  return "";
}

std::string parse_bool_value(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes") {
    out = true;
    return "";
  }
  if (v == "false" || v == "0" || v == "no") {
    out = false;
    return "";
  }
  return "expected true/false, got '" + v + "'";
}

std::string parse_double_list(const std::string& v, std::vector<double>& out) {
  out.clear();
  for (const auto& item : split_list(v)) {
    double d = 0;
    auto err = parse_double_value(item, d);
    if (!err.empty()) return err;
    out.push_back(d);
  }
  return "";
}

const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> setters = {
      {"micro_data", [](RunConfig& c, const std::string& v) { c.micro_data = v; return std::string(); }},
      {"summary_data", [](RunConfig& c, const std::string& v) { c.summary_data = v; return std::string(); }},
      {"site_covariates", [](RunConfig& c, const std::string& v) { c.site_covariates = v; return std::string(); }},
      {"outcomes", [](RunConfig& c, const std::string& v) { c.outcomes = split_list(v); return std::string(); }},
      {"families", [](RunConfig& c, const std::string& v) { c.families = split_list(v); return std::string(); }},
      {"seed",
       [](RunConfig& c, const std::string& v) {
         std::size_t s;
         auto err = parse_size_value(v, s);
         if (err.empty()) c.seed = s;
         return err;
       }},
      {"chains", [](RunConfig& c, const std::string& v) { return parse_size_value(v, c.chains); }},
      {"warmup", [](RunConfig& c, const std::string& v) { return parse_size_value(v, c.warmup); }},
      {"iters", [](RunConfig& c, const std::string& v) { return parse_size_value(v, c.iters); }},
      {"target_accept",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.target_accept); }},
      {"max_tree_depth",
       [](RunConfig& c, const std::string& v) { return parse_size_value(v, c.max_tree_depth); }},
      {"init_radius",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.init_radius); }},
      {"hypermean_sd",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.hypermean_sd); }},
      {"scale_cauchy",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.scale_cauchy); }},
      {"scale_upper",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.scale_upper); }},
      {"lkj_eta",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.lkj_eta); }},
      {"sigma_y_lo",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.sigma_y_lo); }},
      {"sigma_y_hi",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.sigma_y_hi); }},
      {"ridge_sd",
       [](RunConfig& c, const std::string& v) { return parse_double_value(v, c.prior.ridge_sd); }},
      {"interaction_covariates",
       [](RunConfig& c, const std::string& v) {
         c.interaction_covariates = split_list(v);
         return std::string();
       }},
      {"max_interaction_covariates",
       [](RunConfig& c, const std::string& v) {
         return parse_size_value(v, c.max_interaction_covariates);
       }},
      {"ridge_sweep",
       [](RunConfig& c, const std::string& v) { return parse_double_list(v, c.ridge_sweep); }},
      {"ridge_standardize_outcome",
       [](RunConfig& c, const std::string& v) {
         return parse_bool_value(v, c.ridge_standardize_outcome);
       }},
      {"ridge_include_control_mean",
       [](RunConfig& c, const std::string& v) {
         return parse_bool_value(v, c.ridge_include_control_mean);
       }},
      {"ridge_omit_control_mean_from_tau",
       [](RunConfig& c, const std::string& v) {
         return parse_bool_value(v, c.ridge_omit_control_mean_from_tau);
       }},
      {"analysis_pooling",
       [](RunConfig& c, const std::string& v) { return parse_bool_value(v, c.analysis_pooling); }},
      {"analysis_predictive",
       [](RunConfig& c, const std::string& v) { return parse_bool_value(v, c.analysis_predictive); }},
      {"tail_thresholds",
       [](RunConfig& c, const std::string& v) { return parse_double_list(v, c.tail_thresholds); }},
      {"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; return std::string(); }},
      {"allow_nonconverged",
       [](RunConfig& c, const std::string& v) { return parse_bool_value(v, c.allow_nonconverged); }},
  };
  return setters;
}

void validate_semantics(const RunConfig& c, std::vector<std::string>& errors) {
  if (c.chains == 0) errors.push_back("chains must be positive");
  if (c.iters == 0) errors.push_back("iters must be positive");
  if (!(c.target_accept > 0.0 && c.target_accept < 1.0))
    errors.push_back("target_accept must lie in (0,1)");
  if (c.max_tree_depth == 0) errors.push_back("max_tree_depth must be positive");
  if (!(c.init_radius > 0.0)) errors.push_back("init_radius must be positive");
  if (!(c.prior.hypermean_sd > 0.0)) errors.push_back("hypermean_sd must be positive");
  if (!(c.prior.scale_cauchy > 0.0)) errors.push_back("scale_cauchy must be positive");
  if (!(c.prior.lkj_eta > 0.0)) errors.push_back("lkj_eta must be positive");
  if (!(c.prior.sigma_y_lo < c.prior.sigma_y_hi))
    errors.push_back("sigma_y_lo must be below sigma_y_hi");
  if (!(c.prior.ridge_sd > 0.0)) errors.push_back("ridge_sd must be positive");
  if (c.families.empty()) errors.push_back("families must not be empty");
  for (const auto& name : c.families) {
    try {
      const Family f = family_from_name(name);
      const bool needs_micro = f == Family::full_data_joint || f == Family::full_data_independent ||
                               f == Family::interactions || f == Family::site_ridge;
      const bool needs_summary = f == Family::rubin_summary || f == Family::joint_summary;
      if (needs_micro && c.micro_data.empty())
        errors.push_back("family " + name + " requires micro_data");
      if (needs_micro && c.outcomes.empty())
        errors.push_back("family " + name + " requires outcomes");
      if (needs_summary && c.summary_data.empty())
        errors.push_back("family " + name + " requires summary_data");
      if (f == Family::interactions && c.interaction_covariates.empty())
        errors.push_back("family interactions requires interaction_covariates");
      if (f == Family::site_ridge && c.site_covariates.empty())
        errors.push_back("family site_ridge requires site_covariates");
    } catch (const ValidationError& e) {
      errors.push_back(e.what());
    }
  }
  for (double p : c.ridge_sweep)
    if (!(p > 0.0)) errors.push_back("ridge_sweep entries must be positive");
}

}  // namespace

ConfigResult validate_config_text(const std::string& text) {
  ConfigResult result;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  const auto& setters = config_setters();
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto sep = line.find('=');
    if (sep == std::string::npos) sep = line.find(':');
    if (sep == std::string::npos) {
      result.errors.push_back("line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, sep));
    const std::string value = trim(line.substr(sep + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) {
      result.errors.push_back("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      continue;
    }
    const auto err = it->second(result.config, value);
    if (!err.empty())
      result.errors.push_back("line " + std::to_string(line_no) + " (" + key + "): " + err);
  }
  validate_semantics(result.config, result.errors);
  return result;
}

ConfigResult validate_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return validate_config_text(buf.str());
}

std::string normalized_config_text(const RunConfig& c) {
  std::ostringstream out;
  auto emit = [&out](const std::string& key, const std::string& value) {
    out << key << " = " << value << "\n";
  };
  auto join = [](const std::vector<std::string>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + items[i];
    return s;
  };
  auto join_d = [](const std::vector<double>& items) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i)
      s += (i ? "," : "") + csv::format_double(items[i]);
    return s;
  };
  emit("micro_data", c.micro_data);
  emit("summary_data", c.summary_data);
  emit("site_covariates", c.site_covariates);
  emit("outcomes", join(c.outcomes));
  emit("families", join(c.families));
  emit("seed", std::to_string(c.seed));
  emit("chains", std::to_string(c.chains));
  emit("warmup", std::to_string(c.warmup));
  emit("iters", std::to_string(c.iters));
  emit("target_accept", csv::format_double(c.target_accept));
  emit("max_tree_depth", std::to_string(c.max_tree_depth));
  emit("init_radius", csv::format_double(c.init_radius));
  emit("hypermean_sd", csv::format_double(c.prior.hypermean_sd));
  emit("scale_cauchy", csv::format_double(c.prior.scale_cauchy));
  emit("scale_upper", csv::format_double(c.prior.scale_upper));
  emit("lkj_eta", csv::format_double(c.prior.lkj_eta));
  emit("sigma_y_lo", csv::format_double(c.prior.sigma_y_lo));
  emit("sigma_y_hi", csv::format_double(c.prior.sigma_y_hi));
  emit("ridge_sd", csv::format_double(c.prior.ridge_sd));
  emit("interaction_covariates", join(c.interaction_covariates));
  emit("max_interaction_covariates", std::to_string(c.max_interaction_covariates));
  emit("ridge_sweep", join_d(c.ridge_sweep));
  emit("ridge_standardize_outcome", c.ridge_standardize_outcome ? "true" : "false");
  emit("ridge_include_control_mean", c.ridge_include_control_mean ? "true" : "false");
  emit("ridge_omit_control_mean_from_tau", c.ridge_omit_control_mean_from_tau ? "true" : "false");
  emit("analysis_pooling", c.analysis_pooling ? "true" : "false");
  emit("analysis_predictive", c.analysis_predictive ? "true" : "false");
  emit("tail_thresholds", join_d(c.tail_thresholds));
  emit("out_dir", c.out_dir);
  emit("allow_nonconverged", c.allow_nonconverged ? "true" : "false");
  return out.str();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// pipeline

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct ArtifactWriter {
  fs::path dir;
  std::vector<std::string> files;  // relative paths, in write order

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << text;
    if (!out) throw IoError("short write: " + (dir / name).string());
    files.push_back(name);
  }
};

ordered_json quantiles_to_json(const std::vector<QuantileRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["parameter"] = r.name;
    row["mean"] = r.mean;
    row["2.5%"] = r.q025;
    row["25%"] = r.q25;
    row["50%"] = r.q50;
    row["75%"] = r.q75;
    row["97.5%"] = r.q975;
    arr.push_back(row);
  }
  return arr;
}

std::string quantiles_to_csv(const std::vector<QuantileRow>& rows) {
  std::ostringstream out;
  out << "parameter,mean,2.5%,25%,50%,75%,97.5%\n";
  for (const auto& r : rows)
    out << r.name << "," << csv::format_double(r.mean) << "," << csv::format_double(r.q025) << ","
        << csv::format_double(r.q25) << "," << csv::format_double(r.q50) << ","
        << csv::format_double(r.q75) << "," << csv::format_double(r.q975) << "\n";
  return out.str();
}

ordered_json pooling_block_json(const PoolingBlock& b) {
  ordered_json j;
  j["sigma_sq_post_mean"] = b.sigma_sq_post_mean;
  j["lambda"] = b.lambda_defined ? ordered_json(b.lambda) : ordered_json(nullptr);
  j["avg_omega"] = b.avg_omega;
  j["avg_omega_b"] = b.avg_omega_b;
  j["clamp_events"] = b.clamp_events;
  ordered_json sites = ordered_json::array();
  for (const auto& e : b.entries) {
    ordered_json s;
    s["site"] = e.site;
    s["no_pool_estimate"] = e.no_pool_estimate;
    s["se_hat"] = e.se_hat;
    s["post_mean"] = e.post_mean_site;
    s["omega"] = e.omega;
    s["omega_b"] = e.omega_b_defined ? ordered_json(e.omega_b) : ordered_json(nullptr);
    s["omega_b_clamped"] = e.omega_b_clamped;
    sites.push_back(s);
  }
  j["sites"] = sites;
  return j;
}

ordered_json predictive_json(const PredictiveSummary& p) {
  ordered_json j;
  j["tau_mean"] = p.tau_mean;
  j["tau_sd"] = p.tau_sd;
  j["rejected_draws"] = p.rejected;
  j["quantiles"] = quantiles_to_json(p.quantiles);
  ordered_json tails = ordered_json::array();
  for (const auto& [t, prob] : p.tau_tail) {
    ordered_json row;
    row["threshold"] = t;
    row["p_below"] = prob;
    tails.push_back(row);
  }
  j["tau_tail"] = tails;
  return j;
}

struct FitRecord {
  std::string outcome;
  std::string family;
  double penalty = 0.0;  // ridge only
  bool converged = false;
  double max_rhat = 0.0;
  std::size_t divergences = 0;
};

// draws for the quantile table and reports: model parameters in family
// order plus predictive columns
struct FitArtifacts {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
};

}  // namespace

int run_pipeline(const RunConfig& config_in) {
  RunConfig config = config_in;
  try {
    // env var may supply the default output root
    if (const char* root = std::getenv("HBMA_OUT_ROOT");
        root && *root && fs::path(config.out_dir).is_relative())
      config.out_dir = (fs::path(root) / config.out_dir).string();

    std::vector<std::string> errors;
    validate_semantics(config, errors);
    if (!errors.empty()) {
      for (const auto& e : errors) std::cerr << "config error: " << e << "\n";
      return kExitConfigError;
    }

    // load everything up front so failures leave no partial outputs
    SummaryDataset summary;
    bool have_summary = false;
    if (!config.summary_data.empty()) {
      summary = load_summaries(config.summary_data);
      have_summary = true;
    }
    SiteCovariateTable covariates_raw;
    bool have_covariates = false;
    if (!config.site_covariates.empty()) {
      covariates_raw = load_site_covariates(config.site_covariates);
      have_covariates = true;
    }
    std::vector<Family> families;
    for (const auto& name : config.families) families.push_back(family_from_name(name));
    const bool any_micro_family =
        std::any_of(families.begin(), families.end(), [](Family f) {
          return f == Family::full_data_joint || f == Family::full_data_independent ||
                 f == Family::interactions || f == Family::site_ridge;
        });
    const bool any_interactions =
        std::any_of(families.begin(), families.end(),
                    [](Family f) { return f == Family::interactions; });

    std::map<std::string, MicroDataset> micro_by_outcome;
    if (any_micro_family) {
      for (const auto& outcome : config.outcomes) {
        MicroSchema schema;
        schema.outcome_column = outcome;
        if (any_interactions) schema.covariate_columns = config.interaction_covariates;
        micro_by_outcome.emplace(outcome, load_microdata(config.micro_data, schema));
      }
    }

    fs::create_directories(config.out_dir);
    ArtifactWriter writer{config.out_dir, {}};

    std::vector<FitRecord> records;
    std::size_t fit_counter = 0;
    bool all_converged = true;

    auto fit_and_report = [&](const std::string& outcome, Family family, const ModelSpec& spec,
                              const DataBundle& bundle, const std::string& prefix,
                              bool write_reports) -> PosteriorDraws {
      SamplerConfig sampler;
      sampler.chains = config.chains;
      sampler.warmup = config.warmup;
      sampler.iters = config.iters;
      sampler.target_accept = config.target_accept;
      sampler.max_tree_depth = config.max_tree_depth;
      sampler.init_radius = config.init_radius;
      sampler.seed = derive_seed(config.seed, fit_counter++);
      PosteriorDraws draws = run_chains(spec, bundle, sampler);

      FitRecord rec;
      rec.outcome = outcome;
      rec.family = family_name(family);
      rec.penalty = spec.prior.ridge_sd;
      rec.converged = draws.converged;
      rec.max_rhat = draws.max_rhat;
      rec.divergences = draws.divergences;
      records.push_back(rec);
      if (!draws.converged) all_converged = false;

      if (!write_reports) return draws;

      draws.write_csv((writer.dir / (prefix + "_draws.csv")).string());
      writer.files.push_back(prefix + "_draws.csv");

      // quantile table: model parameters in family order + predictive tail
      std::vector<std::string> names = draws.names;
      std::vector<std::vector<double>> columns;
      for (std::size_t p = 0; p < draws.names.size(); ++p)
        columns.push_back(draws.merged_column(p));

      PredictiveSummary predictive;
      bool have_predictive = false;
      if (config.analysis_predictive) {
        const std::uint64_t pseed = derive_seed(sampler.seed, 0x9d5f);
        if (family == Family::rubin_summary) {
          predictive = posterior_predictive_next_site(
              draws.merged_column(draws.require_index("tau")),
              draws.merged_column(draws.require_index("sigma_tau")), pseed,
              config.tail_thresholds);
          names.push_back("tau_next");
          columns.push_back(predictive.tau_next);
          have_predictive = true;
        } else if (family == Family::interactions) {
          const std::size_t n_cells = std::size_t{1} << spec.interaction_covariates.size();
          for (std::size_t l = 0; l < n_cells; ++l) {
            char mu_name[48], tau_name[48], sig_mu[48], sig_tau[48];
            std::snprintf(mu_name, sizeof(mu_name), "mu_cell[%zu]", l + 1);
            std::snprintf(tau_name, sizeof(tau_name), "tau_cell[%zu]", l + 1);
            std::snprintf(sig_mu, sizeof(sig_mu), "sigma_mu_cell[%zu]", l + 1);
            std::snprintf(sig_tau, sizeof(sig_tau), "sigma_tau_cell[%zu]", l + 1);
            auto cell_pred = posterior_predictive_next_site(
                draws.merged_column(draws.require_index(tau_name)),
                draws.merged_column(draws.require_index(sig_tau)), derive_seed(pseed, l),
                config.tail_thresholds);
            char next_name[48];
            std::snprintf(next_name, sizeof(next_name), "tau_next_cell[%zu]", l + 1);
            names.push_back(next_name);
            columns.push_back(cell_pred.tau_next);
            if (l == 0) {
              predictive = cell_pred;
              have_predictive = true;
            }
          }
        } else {
          predictive = posterior_predictive_next_site(
              draws.merged_column(draws.require_index("mu")),
              draws.merged_column(draws.require_index("tau")),
              draws.merged_column(draws.require_index("theta[1]")),
              draws.merged_column(draws.require_index("theta[2]")),
              draws.merged_column(draws.require_index("Omega[1,2]")), pseed,
              config.tail_thresholds);
          names.push_back("mu_next");
          columns.push_back(predictive.mu_next);
          names.push_back("tau_next");
          columns.push_back(predictive.tau_next);
          have_predictive = true;
        }
      }

      const auto table = quantile_table(columns, names);
      writer.write_text(prefix + "_quantiles.csv", quantiles_to_csv(table));
      writer.write_text(prefix + "_quantiles.json", quantiles_to_json(table).dump(2) + "\n");

      if (have_predictive)
        writer.write_text(prefix + "_predictive.json", predictive_json(predictive).dump(2) + "\n");

      if (config.analysis_pooling && family != Family::interactions &&
          family != Family::site_ridge) {
        const MicroDataset* micro = bundle.micro;
        const SummaryDataset* summ = bundle.summary;
        const auto pooling = build_pooling_report(draws, summ, micro);
        ordered_json j;
        j["tau"] = pooling_block_json(pooling.tau);
        if (pooling.mu) j["mu"] = pooling_block_json(*pooling.mu);
        writer.write_text(prefix + "_pooling.json", j.dump(2) + "\n");
      }

      // plot-ready density curves for the headline parameters
      {
        std::ostringstream out;
        out << "parameter,x,density\n";
        for (std::size_t p = 0; p < names.size(); ++p) {
          const bool headline = names[p] == "mu" || names[p] == "tau" ||
                                names[p].rfind("tau[", 0) == 0 ||
                                names[p].rfind("tau_cell[", 0) == 0 ||
                                names[p].rfind("mu_next", 0) == 0 ||
                                names[p].rfind("tau_next", 0) == 0;
          if (!headline) continue;
          const auto curve = kde_density(columns[p]);
          for (std::size_t g = 0; g < curve.x.size(); ++g)
            out << names[p] << "," << csv::format_double(curve.x[g]) << ","
                << csv::format_double(curve.density[g]) << "\n";
        }
        writer.write_text(prefix + "_density.csv", out.str());
      }
      return draws;
    };

    // summary families fit once per run (the summary file carries one outcome)
    for (Family family : families) {
      if (family != Family::rubin_summary && family != Family::joint_summary) continue;
      if (!have_summary) continue;
      ModelSpec spec;
      spec.family = family;
      spec.prior = config.prior;
      DataBundle bundle;
      bundle.summary = &summary;
      fit_and_report("summary", family, spec, bundle, "summary_" + family_name(family), true);
    }

    for (const auto& outcome : config.outcomes) {
      const auto micro_it = micro_by_outcome.find(outcome);
      if (micro_it == micro_by_outcome.end()) continue;

      // OLS comparators once per microdata outcome
      {
        const auto ols = ols_comparators(micro_it->second);
        std::ostringstream out;
        out << "site,estimate,se,n0,n1,ok\n";
        auto emit = [&out](const OlsEstimate& e) {
          out << e.label << "," << csv::format_double(e.estimate) << ","
              << csv::format_double(e.se) << "," << csv::format_double(e.n0) << ","
              << csv::format_double(e.n1) << "," << (e.ok ? "1" : "0") << "\n";
        };
        for (const auto& e : ols.per_site) emit(e);
        emit(ols.pooled);
        writer.write_text(outcome + "_ols.csv", out.str());
      }

      for (Family family : families) {
        if (family == Family::rubin_summary || family == Family::joint_summary) continue;

        ModelSpec spec;
        spec.family = family;
        spec.prior = config.prior;
        DataBundle bundle;
        const std::string prefix = outcome + "_" + family_name(family);

        const MicroDataset& micro = micro_it->second;
        if (family == Family::full_data_joint || family == Family::full_data_independent) {
          bundle.micro = &micro;
          fit_and_report(outcome, family, spec, bundle, prefix, true);
        } else if (family == Family::interactions) {
          spec.interaction_covariates = config.interaction_covariates;
          const CellDataset cells = build_interaction_cells(micro, config.interaction_covariates,
                                                            config.max_interaction_covariates);
          bundle.micro = &micro;
          bundle.cells = &cells;
          auto draws = fit_and_report(outcome, family, spec, bundle, prefix, true);
          if (!cells.warnings.empty()) {
            ordered_json j;
            j["warnings"] = cells.warnings;
            writer.write_text(prefix + "_warnings.json", j.dump(2) + "\n");
          }
        } else {  // site_ridge
          if (!have_covariates) continue;
          MicroDataset micro_ridge = micro;
          if (config.ridge_standardize_outcome) {
            double mean = 0.0;
            for (double y : micro_ridge.outcome) mean += y;
            mean /= static_cast<double>(micro_ridge.n_rows());
            double ss = 0.0;
            for (double y : micro_ridge.outcome) ss += (y - mean) * (y - mean);
            const double sd = std::sqrt(ss / static_cast<double>(micro_ridge.n_rows() - 1));
            if (sd > 0.0)
              for (double& y : micro_ridge.outcome) y = (y - mean) / sd;
          }
          SiteCovariateTable table = covariates_raw;
          if (config.ridge_include_control_mean) {
            std::vector<double> cm;
            for (const auto& e : control_mean_estimates(micro_ridge)) cm.push_back(e.estimate);
            table.column_names.insert(table.column_names.begin(), "control_mean");
            table.columns.insert(table.columns.begin(), cm);
          }
          auto [standardized, scaler] = standardize_columns(table);
          spec.ridge.omit_from_tau =
              config.ridge_omit_control_mean_from_tau ? "control_mean" : "";
          bundle.micro = &micro_ridge;
          bundle.site_covariates = &standardized;

          // sweep over penalties; the configured ridge_sd is the main fit
          std::vector<double> sweep = config.ridge_sweep;
          if (std::find(sweep.begin(), sweep.end(), config.prior.ridge_sd) == sweep.end())
            sweep.insert(sweep.begin(), config.prior.ridge_sd);
          std::vector<PosteriorDraws> sweep_draws;
          std::vector<std::pair<double, const PosteriorDraws*>> fits;
          for (double penalty : sweep) {
            ModelSpec pspec = spec;
            pspec.prior.ridge_sd = penalty;
            const bool main_fit = penalty == config.prior.ridge_sd;
            char pbuf[32];
            std::snprintf(pbuf, sizeof(pbuf), "_p%g", penalty);
            sweep_draws.push_back(fit_and_report(outcome, family, pspec, bundle,
                                                 prefix + (main_fit ? "" : pbuf), main_fit));
          }
          for (std::size_t i = 0; i < sweep.size(); ++i)
            fits.emplace_back(sweep[i], &sweep_draws[i]);

          std::vector<std::string> tau_covariate_names;
          for (const auto& name : standardized.column_names)
            if (name != spec.ridge.omit_from_tau) tau_covariate_names.push_back(name);
          const auto report = ridge_coefficient_report(fits, tau_covariate_names);
          ordered_json j;
          j["ordering_stable"] = report.ordering_stable;
          j["order_meaningful"] = report.order_meaningful;
          j["ordering"] = report.ordering;
          j["excluded_penalties"] = report.excluded_penalties;
          ordered_json blocks = ordered_json::array();
          for (const auto& b : report.penalties) {
            ordered_json jb;
            jb["penalty"] = b.penalty;
            jb["ties"] = b.ties;
            jb["order_meaningful"] = b.order_meaningful;
            ordered_json covs = ordered_json::array();
            for (const auto& c : b.covariates) {
              ordered_json jc;
              jc["covariate"] = c.name;
              jc["rank"] = c.rank;
              jc["mean_abs_beta"] = c.mean_abs_beta;
              jc["abs_beta_2.5%"] = c.abs_q025;
              jc["abs_beta_97.5%"] = c.abs_q975;
              covs.push_back(jc);
            }
            jb["covariates"] = covs;
            blocks.push_back(jb);
          }
          j["penalties"] = blocks;
          writer.write_text(prefix + "_report.json", j.dump(2) + "\n");
        }
      }
    }

    // manifest with config hash and per-file content hashes
    const std::string config_text = normalized_config_text(config);
    ordered_json manifest;
    manifest["version"] = kVersion;
    manifest["seed"] = config.seed;
    manifest["config_hash"] = hex64(fnv1a64(config_text));
    manifest["config"] = config_text;
    ordered_json jfits = ordered_json::array();
    for (const auto& r : records) {
      ordered_json jr;
      jr["outcome"] = r.outcome;
      jr["family"] = r.family;
      if (r.family == "site_ridge") jr["penalty"] = r.penalty;
      jr["converged"] = r.converged;
      jr["max_rhat"] = r.max_rhat;
      jr["divergences"] = r.divergences;
      jfits.push_back(jr);
    }
    manifest["fits"] = jfits;
    manifest["converged_all"] = all_converged;
    ordered_json jfiles = ordered_json::array();
    for (const auto& name : writer.files) {
      std::ifstream in(fs::path(config.out_dir) / name, std::ios::binary);
      std::ostringstream buf;
      buf << in.rdbuf();
      ordered_json jf;
      jf["path"] = name;
      jf["fnv1a64"] = hex64(fnv1a64(buf.str()));
      jfiles.push_back(jf);
    }
    manifest["files"] = jfiles;
    {
      std::ofstream out(fs::path(config.out_dir) / "manifest.json", std::ios::binary);
      if (!out) throw IoError("cannot write manifest");
      out << manifest.dump(2) << "\n";
    }

    if (!all_converged && !config.allow_nonconverged) {
      std::cerr << "convergence failure: at least one fit has R-hat >= 1.1 "
                   "(see manifest.json; pass allow_nonconverged to downgrade)\n";
      return kExitConvergenceError;
    }
    return kExitOk;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIoError;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace hbma
