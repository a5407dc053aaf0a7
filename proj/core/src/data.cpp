#include "hbma/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "hbma/csv.hpp"
#include "hbma/errors.hpp"

namespace hbma {

namespace {

// label -> dense index, ascending label order
std::map<std::string, std::int32_t> index_sites(const std::vector<std::string>& labels_in_order) {
  std::map<std::string, std::int32_t> idx;
  for (const auto& label : labels_in_order) idx.emplace(label, 0);
  std::int32_t i = 0;
  for (auto& [label, v] : idx) v = i++;
  return idx;
}

}  // namespace

std::optional<std::size_t> MicroDataset::covariate_index(const std::string& name) const {
  for (std::size_t i = 0; i < covariate_names.size(); ++i)
    if (covariate_names[i] == name) return i;
  return std::nullopt;
}

std::optional<std::size_t> SiteCovariateTable::column_index(const std::string& name) const {
  for (std::size_t i = 0; i < column_names.size(); ++i)
    if (column_names[i] == name) return i;
  return std::nullopt;
}

MicroDataset microdata_from_csv_text(const std::string& text, const MicroSchema& schema,
                                     const std::string& context) {
  const csv::Table t = csv::read_string(text);
  const std::size_t c_site = t.require_column(schema.site_column, context);
  const std::size_t c_treat = t.require_column(schema.treatment_column, context);
  if (schema.outcome_column.empty()) throw SchemaError(context + ": no outcome column mapped");
  const std::size_t c_out = t.require_column(schema.outcome_column, context);
  std::vector<std::size_t> c_cov;
  for (const auto& name : schema.covariate_columns)
    c_cov.push_back(t.require_column(name, context));

  MicroDataset d;
  d.outcome_name = schema.outcome_column;
  d.covariate_names = schema.covariate_columns;
  d.covariates.resize(c_cov.size());

  std::vector<std::string> raw_labels;
  raw_labels.reserve(t.rows.size());
  for (const auto& row : t.rows) raw_labels.push_back(row[c_site]);
  const auto site_index = index_sites(raw_labels);
  d.site_labels.resize(site_index.size());
  for (const auto& [label, idx] : site_index) d.site_labels[static_cast<std::size_t>(idx)] = label;

  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto y = csv::parse_double(row[c_out]);
    if (!y) {
      ++d.rows_dropped_missing;  // complete-case: drop and count
      continue;
    }
    const auto treat = csv::parse_double(row[c_treat]);
    if (!treat || (*treat != 0.0 && *treat != 1.0))
      throw ValidationError(context + ": non-binary treatment '" + row[c_treat] + "' at data row " +
                            std::to_string(r + 1));
    d.site.push_back(site_index.at(row[c_site]));
    d.treatment.push_back(static_cast<std::uint8_t>(*treat));
    d.outcome.push_back(*y);
    for (std::size_t j = 0; j < c_cov.size(); ++j) {
      const auto x = csv::parse_double(row[c_cov[j]]);
      if (!x || (*x != 0.0 && *x != 1.0))
        throw ValidationError(context + ": covariate '" + schema.covariate_columns[j] +
                              "' must be binary, got '" + row[c_cov[j]] + "' at data row " +
                              std::to_string(r + 1));
      d.covariates[j].push_back(static_cast<std::uint8_t>(*x));
    }
  }

  if (d.n_sites() < 2)
    throw ValidationError(context + ": need at least 2 sites, found " +
                          std::to_string(d.n_sites()));

  // every site needs both arms
  std::vector<std::size_t> n_control(d.n_sites(), 0), n_treated(d.n_sites(), 0);
  for (std::size_t r = 0; r < d.n_rows(); ++r)
    (d.treatment[r] ? n_treated : n_control)[static_cast<std::size_t>(d.site[r])]++;
  for (std::size_t k = 0; k < d.n_sites(); ++k) {
    if (n_treated[k] == 0)
      throw ValidationError(context + ": site " + d.site_labels[k] + " lacks treatment arm");
    if (n_control[k] == 0)
      throw ValidationError(context + ": site " + d.site_labels[k] + " lacks control arm");
  }
  return d;
}

MicroDataset load_microdata(const std::string& path, const MicroSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return microdata_from_csv_text(buf.str(), schema, path);
}

void write_microdata(const std::string& path, const MicroDataset& data) {
  csv::Table t;
  t.header = {"site", "treatment", data.outcome_name};
  for (const auto& name : data.covariate_names) t.header.push_back(name);
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    std::vector<std::string> row;
    row.push_back(data.site_labels[static_cast<std::size_t>(data.site[r])]);
    row.push_back(data.treatment[r] ? "1" : "0");
    row.push_back(csv::format_double(data.outcome[r]));
    for (const auto& col : data.covariates) row.push_back(col[r] ? "1" : "0");
    t.rows.push_back(std::move(row));
  }
  csv::write_file(path, t);
}

SummaryDataset summaries_from_csv_text(const std::string& text, const std::string& context) {
  const csv::Table t = csv::read_string(text);
  const std::size_t c_site = t.require_column("site", context);
  const std::size_t c_tau = t.require_column("tau_hat", context);
  const std::size_t c_se = t.require_column("se_tau", context);
  const auto c_mu = t.column("mu_hat");
  const auto c_semu = t.column("se_mu");
  if (c_mu.has_value() != c_semu.has_value())
    throw ValidationError(context + ": mu_hat and se_mu must be provided together");

  std::vector<std::string> raw_labels;
  for (const auto& row : t.rows) raw_labels.push_back(row[c_site]);
  const auto site_index = index_sites(raw_labels);
  if (site_index.size() != t.rows.size())
    throw ValidationError(context + ": duplicate site rows");

  SummaryDataset d;
  d.site_labels.resize(site_index.size());
  for (const auto& [label, idx] : site_index) d.site_labels[static_cast<std::size_t>(idx)] = label;
  const std::size_t K = d.site_labels.size();
  d.tau_hat.resize(K);
  d.se_tau.resize(K);
  if (c_mu) {
    d.mu_hat.resize(K);
    d.se_mu.resize(K);
  }

  for (const auto& row : t.rows) {
    const auto k = static_cast<std::size_t>(site_index.at(row[c_site]));
    const auto tau = csv::parse_double(row[c_tau]);
    const auto se = csv::parse_double(row[c_se]);
    if (!tau || !se) throw ValidationError(context + ": missing tau_hat/se_tau for site " + row[c_site]);
    if (*se <= 0.0)
      throw ValidationError(context + ": se_tau must be positive, site " + row[c_site] + " has " +
                            csv::format_double(*se));
    d.tau_hat[k] = *tau;
    d.se_tau[k] = *se;
    if (c_mu) {
      const auto mu = csv::parse_double(row[*c_mu]);
      const auto semu = csv::parse_double(row[*c_semu]);
      if (!mu || !semu)
        throw ValidationError(context + ": missing mu_hat/se_mu for site " + row[c_site]);
      if (*semu <= 0.0)
        throw ValidationError(context + ": se_mu must be positive, site " + row[c_site]);
      d.mu_hat[k] = *mu;
      d.se_mu[k] = *semu;
    }
  }
  if (K < 2) throw ValidationError(context + ": need at least 2 sites");
  return d;
}

SummaryDataset load_summaries(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return summaries_from_csv_text(buf.str(), path);
}

SiteCovariateTable site_covariates_from_csv_text(const std::string& text,
                                                 const std::string& context) {
  const csv::Table t = csv::read_string(text);
  const std::size_t c_site = t.require_column("site", context);

  std::vector<std::string> raw_labels;
  for (const auto& row : t.rows) raw_labels.push_back(row[c_site]);
  const auto site_index = index_sites(raw_labels);
  if (site_index.size() != t.rows.size())
    throw ValidationError(context + ": duplicate site rows");

  SiteCovariateTable table;
  table.site_labels.resize(site_index.size());
  for (const auto& [label, idx] : site_index)
    table.site_labels[static_cast<std::size_t>(idx)] = label;

  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (c == c_site) continue;
    table.column_names.push_back(t.header[c]);
    std::vector<double> col(table.n_sites());
    for (const auto& row : t.rows) {
      const auto v = csv::parse_double(row[c]);
      if (!v)
        throw ValidationError(context + ": missing value in column " + t.header[c] + " for site " +
                              row[c_site]);
      col[static_cast<std::size_t>(site_index.at(row[c_site]))] = *v;
    }
    table.columns.push_back(std::move(col));
  }
  return table;
}

SiteCovariateTable load_site_covariates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return site_covariates_from_csv_text(buf.str(), path);
}

std::vector<std::uint8_t> CellDataset::cell_pattern(std::size_t cell) const {
  std::vector<std::uint8_t> pattern(n_covariates());
  for (std::size_t j = 0; j < pattern.size(); ++j)
    pattern[j] = static_cast<std::uint8_t>((cell >> j) & 1u);
  return pattern;
}

std::string CellDataset::cell_label(std::size_t cell) const {
  if (covariate_names.empty()) return "all";
  std::string label;
  const auto pattern = cell_pattern(cell);
  for (std::size_t j = 0; j < covariate_names.size(); ++j) {
    if (j) label += ",";
    label += covariate_names[j] + "=" + (pattern[j] ? "1" : "0");
  }
  return label;
}

CellDataset build_interaction_cells(const MicroDataset& data,
                                    const std::vector<std::string>& covariate_names,
                                    std::size_t max_covariates) {
  if (covariate_names.size() > max_covariates)
    throw ValidationError("refusing " + std::to_string(covariate_names.size()) +
                          " interaction covariates (limit " + std::to_string(max_covariates) +
                          "; 2^L cells explode)");
  CellDataset cells;
  cells.data = &data;
  cells.covariate_names = covariate_names;

  std::vector<std::size_t> cov_idx;
  for (const auto& name : covariate_names) {
    const auto idx = data.covariate_index(name);
    if (!idx) throw ValidationError("unknown covariate '" + name + "'");
    cov_idx.push_back(*idx);
  }

  const std::size_t n_cells = cells.n_cells();
  cells.cell_of_row.resize(data.n_rows());
  cells.cell_counts.assign(data.n_sites(), std::vector<std::size_t>(n_cells, 0));
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    std::size_t cell = 0;
    for (std::size_t j = 0; j < cov_idx.size(); ++j)
      cell |= static_cast<std::size_t>(data.covariates[cov_idx[j]][r]) << j;
    cells.cell_of_row[r] = static_cast<std::int32_t>(cell);
    cells.cell_counts[static_cast<std::size_t>(data.site[r])][cell]++;
  }

  // a covariate constant within a site leaves cells empty there; the
  // hierarchical prior still identifies those parameters, so warn only
  for (std::size_t k = 0; k < data.n_sites(); ++k)
    for (std::size_t l = 0; l < n_cells; ++l)
      if (cells.cell_counts[k][l] == 0)
        cells.warnings.push_back("site " + data.site_labels[k] + " has no rows in cell " +
                                 std::to_string(l + 1) + " (" + cells.cell_label(l) + ")");
  return cells;
}

std::vector<double> Standardizer::transform(std::size_t column,
                                            const std::vector<double>& values) const {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - mean[column]) / sd[column];
  return out;
}

std::vector<double> Standardizer::inverse(std::size_t column,
                                          const std::vector<double>& values) const {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * sd[column] + mean[column];
  return out;
}

std::pair<SiteCovariateTable, Standardizer> standardize_columns(const SiteCovariateTable& table) {
  SiteCovariateTable z = table;
  Standardizer s;
  s.column_names = table.column_names;
  const double n = static_cast<double>(table.n_sites());
  if (table.n_sites() < 2) throw ValidationError("standardize: need at least 2 sites");
  for (std::size_t c = 0; c < table.n_columns(); ++c) {
    const auto& col = table.columns[c];
    double mean = 0.0;
    for (double v : col) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : col) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    if (sd == 0.0)
      throw ValidationError("column " + table.column_names[c] + " has zero variance");
    s.mean.push_back(mean);
    s.sd.push_back(sd);
    for (double& v : z.columns[c]) v = (v - mean) / sd;
  }
  return {std::move(z), std::move(s)};
}

}  // namespace hbma
