#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cprompt::harness {

inline constexpr std::array<const char*, 9> kReportColumns = {
    "experiment", "corpus", "compression", "prompt_source", "k",
    "ppl",        "nll",    "accuracy",    "latency_ms"};

struct ReportRow {
  std::string experiment;
  std::string corpus;
  std::string compression;
  std::string prompt_source;  // "none", or the compression label the prompt was trained on
  std::size_t k = 0;
  std::optional<double> ppl;
  std::optional<double> nll;
  std::optional<double> accuracy;
  std::optional<double> latency_ms;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ReportTable {
  std::vector<ReportRow> rows;

  void append(const ReportTable& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
  // First row matching all given fields, or nullptr.
  const ReportRow* find(const std::string& experiment, const std::string& corpus,
                        const std::string& compression, const std::string& prompt_source,
                        std::optional<std::size_t> k = std::nullopt) const;
  friend bool operator==(const ReportTable&, const ReportTable&) = default;
};

// Six significant digits, '.' decimal point, empty for a missing value.
std::string format_number(std::optional<double> v);

std::string to_csv(const ReportTable& table);
std::string to_markdown(const ReportTable& table);
ReportTable parse_csv(const std::string& text);

// Writes report.csv and report.md into `dir`, replacing existing files.
void emit_report(const ReportTable& table, const std::filesystem::path& dir);

}  // namespace cprompt::harness
