#include "fprb/table.hpp"

#include <cstdio>
#include <utility>

#include "fprb/errors.hpp"

namespace fprb {

TextTable::TextTable(std::string caption, std::vector<Column> columns)
    : caption_(std::move(caption)), columns_(std::move(columns)) {}

void TextTable::add_row(std::vector<std::string> cells) {
  require(cells.size() == columns_.size(), "table row has " + std::to_string(cells.size()) + " cells, expected " +
                                               std::to_string(columns_.size()));
  rows_.push_back(std::move(cells));
}

namespace {

void pad(std::string& out, const std::string& cell, const TextTable::Column& c) {
  const auto w = static_cast<std::size_t>(c.width);
  const std::string fill(cell.size() < w ? w - cell.size() : 0, ' ');
  out += c.left ? cell + fill : fill + cell;
}

}  // namespace

std::string TextTable::render() const {
  std::string out = caption_ + "\n";
  std::string header, rule;
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (i) header += "  ", rule += "  ";
    pad(header, columns_[i].title, columns_[i]);
    rule += std::string(static_cast<std::size_t>(columns_[i].width), '-');
  }
  out += header + "\n" + rule + "\n";
  for (const auto& row : rows_) {
    std::string line;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (i) line += "  ";
      pad(line, row[i], columns_[i]);
    }
    out += line + "\n";
  }
  return out;
}

std::string fixed(double value, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, value);
  std::string s = buf;
  // never print "-0.000"
  if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::string fixed(const std::optional<double>& value, int precision, const std::string& missing) {
  return value ? fixed(*value, precision) : missing;
}

std::string percent(double fraction, int precision) { return fixed(100.0 * fraction, precision) + "%"; }

std::string interval(double lower, double upper, int precision) {
  return "[" + fixed(lower, precision) + ", " + fixed(upper, precision) + "]";
}

}  // namespace fprb
