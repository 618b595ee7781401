#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "rds/types.hpp"

namespace rds {

/// Shortest decimal form that round-trips the double exactly (up to 17
/// significant digits, '.' separator).
std::string format_double(double v);

void write_row(std::ostream& os, const Vec& v);
Vec read_vec(std::istream& is, int n);

/// RFC-4180-style CSV with a header row. All numeric cells use
/// format_double.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void row(const std::vector<double>& values);
  void row(const Vec& values);

 private:
  struct Impl;
  Impl* impl_;
};

SampleMat read_csv_matrix(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace rds
