#include "hbma/csv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hbma/errors.hpp"

namespace hbma::csv {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  // trim surrounding spaces
  for (auto& cell : cells) {
    std::size_t b = cell.find_first_not_of(" \t");
    std::size_t e = cell.find_last_not_of(" \t");
    cell = (b == std::string::npos) ? std::string() : cell.substr(b, e - b + 1);
  }
  return cells;
}

}  // namespace

std::optional<std::size_t> Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  return std::nullopt;
}

std::size_t Table::require_column(const std::string& name, const std::string& context) const {
  auto idx = column(name);
  if (!idx) throw SchemaError(context + ": missing required column '" + name + "'");
  return *idx;
}

Table read_string(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_line(line);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size())
        throw SchemaError("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                          std::to_string(t.header.size()));
      t.rows.push_back(std::move(cells));
    }
  }
  if (first) throw SchemaError("csv input is empty (no header row)");
  return t;
}

Table read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return read_string(buf.str());
  } catch (const SchemaError& e) {
    throw SchemaError(path + ": " + e.what());
  }
}

std::optional<double> parse_double(const std::string& cell) {
  if (cell.empty() || cell == "NA" || cell == "na" || cell == "nan" || cell == "NaN" || cell == "NAN")
    return std::nullopt;
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e)
    throw SchemaError("cannot parse numeric cell '" + cell + "'");
  return v;
}

std::string format_double(double v) {
  char buf[40];
  // %.17g is exact; prefer the shortest representation that round-trips
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0.0;
    std::from_chars(buf, buf + std::string_view(buf).size(), back);
    if (back == v) break;
  }
  return buf;
}

void write_file(const std::string& path, const Table& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  for (std::size_t i = 0; i < table.header.size(); ++i)
    out << (i ? "," : "") << table.header[i];
  out << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  if (!out) throw IoError("short write: " + path);
}

}  // namespace hbma::csv
