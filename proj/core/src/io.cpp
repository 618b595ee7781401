#include "rds/io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rds {

std::string format_double(double v) {
  char buf[40];
  // shortest round-trip representation
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_row(std::ostream& os, const Vec& v) {
  for (int i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << format_double(v[i]);
  }
  os << '\n';
}

Vec read_vec(std::istream& is, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) is >> v[i];
  return v;
}

struct CsvWriter::Impl {
  std::ofstream out;
  size_t columns = 0;
};

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : impl_(new Impl) {
  impl_->out.open(path);
  if (!impl_->out) throw InvalidArgument("cannot open for writing: " + path);
  impl_->columns = header.size();
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) impl_->out << ',';
    impl_->out << header[i];
  }
  impl_->out << "\r\n";
}

CsvWriter::~CsvWriter() { delete impl_; }

void CsvWriter::row(const std::vector<double>& values) {
  if (values.size() != impl_->columns) throw InvalidArgument("csv row width mismatch");
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) impl_->out << ',';
    impl_->out << format_double(values[i]);
  }
  impl_->out << "\r\n";
}

void CsvWriter::row(const Vec& values) {
  row(std::vector<double>(values.data(), values.data() + values.size()));
}

SampleMat read_csv_matrix(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("empty csv: " + path);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InvalidArgument("csv has no data rows: " + path);
  SampleMat m(rows.size(), rows[0].size());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw InvalidArgument("ragged csv: " + path);
    for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot open for writing: " + path);
  out << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace rds
