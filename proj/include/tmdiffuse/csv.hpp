#pragma once

#include "core.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace tmd {

// Raw CSV cell table; empty string marks a missing cell.
struct CsvTable {
  std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open file: " + path);
  CsvTable table;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == EOF) break;
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (line.empty()) cells.emplace_back();
    table.rows.push_back(std::move(cells));
  }
  return table;
}

inline bool parse_cell(const std::string& s, double& out) {
  size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return false;
  size_t b = s.find_last_not_of(" \t");
  std::string t = s.substr(a, b - a + 1);
  try {
    size_t pos = 0;
    out = std::stod(t, &pos);
    if (pos != t.size()) throw ValidationError("trailing characters in cell: " + s);
  } catch (const std::invalid_argument&) {
    throw ValidationError("cell does not parse as a number: " + s);
  } catch (const std::out_of_range&) {
    throw ValidationError("cell out of range: " + s);
  }
  return true;
}

// Dense numeric matrix, no missing cells allowed.
inline Matrix read_csv_matrix(const std::string& path) {
  CsvTable t = read_csv_table(path);
  require(!t.rows.empty(), "empty CSV: " + path);
  size_t cols = t.rows[0].size();
  Matrix m(static_cast<int>(t.rows.size()), static_cast<int>(cols));
  for (size_t i = 0; i < t.rows.size(); ++i) {
    if (t.rows[i].size() != cols)
      throw ValidationError(path + ": ragged row at line " + std::to_string(i + 1));
    for (size_t j = 0; j < cols; ++j) {
      double v;
      if (!parse_cell(t.rows[i][j], v))
        throw ValidationError(path + ": empty cell at line " + std::to_string(i + 1));
      m(static_cast<int>(i), static_cast<int>(j)) = v;
    }
  }
  return m;
}

inline void write_csv_matrix(const std::string& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write file: " + path);
  out << std::setprecision(17);
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
}

}  // namespace tmd
