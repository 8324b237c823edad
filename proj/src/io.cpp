#include "fntk/io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fntk/errors.hpp"

namespace fntk {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view content) {
  const std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InputError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec) throw InputError("cannot move output into place at '" + path + "': " + ec.message());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view cell = line.substr(start, comma == std::string_view::npos
                                                   ? std::string_view::npos
                                                   : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r'))
      cell.remove_suffix(1);
    out.emplace_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_cell(const std::string& cell, std::size_t line_no) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw InputError("CSV line " + std::to_string(line_no) + ": cannot parse '" + cell + "'");
  }
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw InputError("CSV line " + std::to_string(line_no) + ": expected " +
                       std::to_string(t.header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) row.push_back(parse_cell(c, line_no));
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::vector<std::size_t> columns_with_prefix(const std::vector<std::string>& header,
                                             std::string_view prefix) {
  std::vector<std::size_t> cols;
  for (std::size_t k = 0;; ++k) {
    const std::string name = std::string(prefix) + std::to_string(k);
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) break;
    cols.push_back(static_cast<std::size_t>(it - header.begin()));
  }
  return cols;
}

}  // namespace

std::string dataset_to_csv(const TaskDataset& data) {
  std::string out;
  for (Index j = 0; j < data.inputs.cols(); ++j) {
    if (j) out += ',';
    out += "x_" + std::to_string(j);
  }
  for (Index j = 0; j < data.targets.cols(); ++j) out += ",y_" + std::to_string(j);
  out += '\n';
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.inputs.cols(); ++j) {
      if (j) out += ',';
      out += format_double(data.inputs(i, j));
    }
    for (Index j = 0; j < data.targets.cols(); ++j) out += ',' + format_double(data.targets(i, j));
    out += '\n';
  }
  return out;
}

TaskDataset dataset_from_csv(std::string_view text, double noise_variance) {
  const CsvTable t = parse_csv(text);
  if (t.header.empty()) throw InputError("dataset CSV has no header");
  const auto xs = columns_with_prefix(t.header, "x_");
  const auto ys = columns_with_prefix(t.header, "y_");
  if (xs.empty() || ys.empty()) throw InputError("dataset CSV needs x_0.. and y_0.. columns");
  TaskDataset d;
  d.noise_variance = noise_variance;
  const auto n = static_cast<Index>(t.rows.size());
  d.inputs.resize(n, static_cast<Index>(xs.size()));
  d.targets.resize(n, static_cast<Index>(ys.size()));
  for (Index i = 0; i < n; ++i) {
    const auto& row = t.rows[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < xs.size(); ++j) d.inputs(i, static_cast<Index>(j)) = row[xs[j]];
    for (std::size_t j = 0; j < ys.size(); ++j) d.targets(i, static_cast<Index>(j)) = row[ys[j]];
  }
  return d;
}

TaskDataset load_dataset(const std::string& path, double noise_variance) {
  return dataset_from_csv(read_file(path), noise_variance);
}

Matrix inputs_from_csv(std::string_view text, Index expected_dim) {
  const CsvTable t = parse_csv(text);
  if (t.header.empty()) {
    if (expected_dim >= 0) return Matrix(0, expected_dim);
    throw InputError("input CSV has no header");
  }
  const auto xs = columns_with_prefix(t.header, "x_");
  if (xs.empty()) throw InputError("input CSV needs x_0.. columns");
  if (expected_dim >= 0 && static_cast<Index>(xs.size()) != expected_dim) {
    throw InputError("input CSV has " + std::to_string(xs.size()) + " x columns, expected " +
                     std::to_string(expected_dim));
  }
  Matrix x(static_cast<Index>(t.rows.size()), static_cast<Index>(xs.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    for (std::size_t j = 0; j < xs.size(); ++j)
      x(static_cast<Index>(i), static_cast<Index>(j)) = t.rows[i][xs[j]];
  return x;
}

}  // namespace fntk
