#pragma once

#include <optional>
#include <string>
#include <vector>

namespace hbma::csv {

/// Header + string cells. Values are parsed on demand; empty/NA cells stay
/// empty strings so callers decide how to treat missingness.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const;
  std::size_t require_column(const std::string& name, const std::string& context) const;
};

Table read_file(const std::string& path);
Table read_string(const std::string& text);

/// Locale-independent double parse; empty / "NA" / "nan" -> nullopt.
std::optional<double> parse_double(const std::string& cell);

/// Round-trippable formatting (shortest exact decimal).
std::string format_double(double v);

void write_file(const std::string& path, const Table& table);

}  // namespace hbma::csv
