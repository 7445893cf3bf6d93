#pragma once

#include <optional>
#include <string>
#include <vector>

namespace fprb {

// Plain-text table with fixed column widths; cells wider than their column
// push the row out rather than being truncated.
class TextTable {
 public:
  struct Column {
    std::string title;
    int width = 12;
    bool left = false;
  };

  TextTable(std::string caption, std::vector<Column> columns);

  void add_row(std::vector<std::string> cells);
  std::string render() const;

 private:
  std::string caption_;
  std::vector<Column> columns_;
  std::vector<std::vector<std::string>> rows_;
};

std::string fixed(double value, int precision = 3);
std::string fixed(const std::optional<double>& value, int precision = 3, const std::string& missing = "n/a");
std::string percent(double fraction, int precision = 1);
std::string interval(double lower, double upper, int precision = 3);

}  // namespace fprb
