#pragma once

// Small CSV tables: a header row, data rows, and an optional trailing
// "# config_hash=<hex>" comment.

#include <string>
#include <vector>

namespace mmclip {

class CsvTable {
 public:
  CsvTable() = default;
  explicit CsvTable(std::vector<std::string> header);

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  /// Throws InvalidArgument when the row width differs from the header.
  void add(std::vector<std::string> row);
  std::size_t column(const std::string& name) const;
  const std::string& at(std::size_t row, const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;

  /// Text with the footer appended when `config_hash` is non-empty.
  std::string str(const std::string& config_hash = {}) const;
  void save(const std::string& path, const std::string& config_hash = {}) const;

  /// Parses text written by str(); '#' lines are skipped.
  static CsvTable parse(const std::string& text);
  static CsvTable load(const std::string& path);

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Shortest round-trip decimal form; "nan" and "inf" for non-finite values.
std::string fmt(double v);
std::string fmt(std::size_t v);

/// Footer value of a CSV file, or empty when it has none.
std::string csv_config_hash(const std::string& text);

}  // namespace mmclip
