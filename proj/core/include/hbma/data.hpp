#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hbma {

/// Per-household rows from one or more randomized experiments. Sites are
/// keyed by string label and mapped to a dense index in ascending label
/// order, so site ordering is deterministic across all modules.
struct MicroDataset {
  std::vector<std::string> site_labels;        // ascending, size K
  std::vector<std::int32_t> site;              // per row, index into site_labels
  std::vector<std::uint8_t> treatment;         // per row, 0/1
  std::vector<double> outcome;                 // per row
  std::vector<std::string> covariate_names;    // L binary household covariates
  std::vector<std::vector<std::uint8_t>> covariates;  // [covariate][row]
  std::string outcome_name;
  std::size_t rows_dropped_missing = 0;

  std::size_t n_sites() const { return site_labels.size(); }
  std::size_t n_rows() const { return outcome.size(); }
  std::optional<std::size_t> covariate_index(const std::string& name) const;
};

/// Per-site estimates and standard errors; the mu pair is optional but must
/// be all-present or all-absent.
struct SummaryDataset {
  std::vector<std::string> site_labels;  // ascending
  std::vector<double> tau_hat;
  std::vector<double> se_tau;
  std::vector<double> mu_hat;  // empty unless has_mu()
  std::vector<double> se_mu;

  std::size_t n_sites() const { return site_labels.size(); }
  bool has_mu() const { return !mu_hat.empty(); }
};

/// One row of site-level covariates per site, aligned to ascending site
/// label order. M may exceed K.
struct SiteCovariateTable {
  std::vector<std::string> site_labels;
  std::vector<std::string> column_names;
  std::vector<std::vector<double>> columns;  // [column][site]

  std::size_t n_sites() const { return site_labels.size(); }
  std::size_t n_columns() const { return column_names.size(); }
  std::optional<std::size_t> column_index(const std::string& name) const;
};

/// Power-set interaction cells over L binary covariates. Cell l (1-based)
/// corresponds to the little-endian binary encoding of the covariate
/// vector: covariate j equals bit j of (l-1), so cell 1 is all zeros.
struct CellDataset {
  const MicroDataset* data = nullptr;
  std::vector<std::string> covariate_names;           // the L chosen covariates
  std::vector<std::int32_t> cell_of_row;              // 0-based cell per row
  std::vector<std::vector<std::size_t>> cell_counts;  // [site][cell]
  std::vector<std::string> warnings;                  // degenerate-cell records

  std::size_t n_covariates() const { return covariate_names.size(); }
  std::size_t n_cells() const { return std::size_t{1} << covariate_names.size(); }
  /// Covariate pattern of a 0-based cell index.
  std::vector<std::uint8_t> cell_pattern(std::size_t cell) const;
  std::string cell_label(std::size_t cell) const;
};

/// Column-wise z-scoring state; inverse recovers originals.
struct Standardizer {
  std::vector<std::string> column_names;
  std::vector<double> mean;
  std::vector<double> sd;  // sample sd, denominator K-1

  std::vector<double> transform(std::size_t column, const std::vector<double>& values) const;
  std::vector<double> inverse(std::size_t column, const std::vector<double>& values) const;
};

struct MicroSchema {
  std::string site_column = "site";
  std::string treatment_column = "treatment";
  std::string outcome_column;                // required
  std::vector<std::string> covariate_columns;  // optional binary columns
};

MicroDataset load_microdata(const std::string& path, const MicroSchema& schema);
MicroDataset microdata_from_csv_text(const std::string& text, const MicroSchema& schema,
                                     const std::string& context = "microdata");
void write_microdata(const std::string& path, const MicroDataset& data);

SummaryDataset load_summaries(const std::string& path);
SummaryDataset summaries_from_csv_text(const std::string& text,
                                       const std::string& context = "summaries");

SiteCovariateTable load_site_covariates(const std::string& path);
SiteCovariateTable site_covariates_from_csv_text(const std::string& text,
                                                 const std::string& context = "site covariates");

/// Expand the power set of the named binary covariates into cells.
/// Refuses more than `max_covariates` covariates (cell explosion guard).
CellDataset build_interaction_cells(const MicroDataset& data,
                                    const std::vector<std::string>& covariate_names,
                                    std::size_t max_covariates = 4);

/// Z-score every column (sample sd, denominator K-1). Errors on any
/// zero-variance column, naming it.
std::pair<SiteCovariateTable, Standardizer> standardize_columns(const SiteCovariateTable& table);

}  // namespace hbma
