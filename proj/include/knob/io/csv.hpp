#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace knob::io {

/// Shortest decimal that round-trips to the same double; "nan", "inf", "-inf"
/// for non-finite values.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

/// Comma-separated, '.' decimal point, LF line endings, header row first.
/// Absent optionals become empty cells. Strings are quoted only when needed.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) {
    if (header.empty()) throw std::invalid_argument("csv: header must not be empty");
    for (const auto& h : header) put_text(h);
    end_row();
  }

  CsvWriter& cell(double x) { return raw(format_double(x)); }
  CsvWriter& cell(std::optional<double> x) { return x ? cell(*x) : raw(""); }
  CsvWriter& cell(bool b) { return raw(b ? "1" : "0"); }
  CsvWriter& cell(std::string_view s) {
    put_text(s);
    return *this;
  }
  CsvWriter& cell(const char* s) { return cell(std::string_view(s)); }

  template <typename T>
    requires(std::is_integral_v<T> && !std::is_same_v<T, bool>)
  CsvWriter& cell(T x) {
    return raw(std::to_string(x));
  }

  template <typename T>
    requires(std::is_integral_v<T> && !std::is_same_v<T, bool>)
  CsvWriter& cell(std::optional<T> x) {
    return x ? cell(*x) : raw("");
  }

  void end_row() {
    if (in_row_ != columns_) {
      throw std::logic_error("csv: row has " + std::to_string(in_row_) + " cells, expected " +
                             std::to_string(columns_));
    }
    buf_ += '\n';
    in_row_ = 0;
    ++rows_;
  }

  /// Data rows written so far (header excluded).
  std::size_t rows() const noexcept { return rows_ - 1; }
  const std::string& str() const noexcept { return buf_; }

 private:
  CsvWriter& raw(std::string_view s) {
    sep();
    buf_ += s;
    return *this;
  }

  void put_text(std::string_view s) {
    sep();
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) {
      buf_ += s;
      return;
    }
    buf_ += '"';
    for (char c : s) {
      if (c == '"') buf_ += '"';
      buf_ += c;
    }
    buf_ += '"';
  }

  void sep() {
    if (in_row_ == columns_) throw std::logic_error("csv: too many cells in row");
    if (in_row_ > 0) buf_ += ',';
    ++in_row_;
  }

  std::size_t columns_;
  std::size_t in_row_ = 0;
  std::size_t rows_ = 0;
  std::string buf_;
};

}  // namespace knob::io
