#include "cprompt/report.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cprompt/core.hpp"

namespace cprompt::harness {

const ReportRow* ReportTable::find(const std::string& experiment, const std::string& corpus,
                                   const std::string& compression, const std::string& prompt_source,
                                   std::optional<std::size_t> k) const {
  for (const auto& r : rows) {
    if (r.experiment == experiment && r.corpus == corpus && r.compression == compression &&
        r.prompt_source == prompt_source && (!k || r.k == *k)) {
      return &r;
    }
  }
  return nullptr;
}

std::string format_number(std::optional<double> v) {
  if (!v) return {};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", *v);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> cells(const ReportRow& r) {
  return {r.experiment,        r.corpus,         r.compression,         r.prompt_source,
          std::to_string(r.k), format_number(r.ppl), format_number(r.nll), format_number(r.accuracy),
          format_number(r.latency_ms)};
}

std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw DataError("report: bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw DataError("report: bad number '" + s + "'");
  }
}

std::vector<std::vector<std::string>> split_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (any) {
    row.push_back(std::move(field));
    records.push_back(std::move(row));
  }
  return records;
}

}  // namespace

std::string to_csv(const ReportTable& table) {
  std::string out;
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) {
    if (i) out += ',';
    out += kReportColumns[i];
  }
  out += '\n';
  for (const auto& r : table.rows) {
    const auto cs = cells(r);
    for (std::size_t i = 0; i < cs.size(); ++i) {
      if (i) out += ',';
      out += csv_field(cs[i]);
    }
    out += '\n';
  }
  return out;
}

std::string to_markdown(const ReportTable& table) {
  std::string out = "|";
  for (const char* c : kReportColumns) out += std::string(" ") + c + " |";
  out += "\n|";
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) out += "---|";
  out += '\n';
  for (const auto& r : table.rows) {
    out += '|';
    for (const auto& c : cells(r)) out += " " + (c.empty() ? std::string("-") : c) + " |";
    out += '\n';
  }
  return out;
}

ReportTable parse_csv(const std::string& text) {
  const auto records = split_csv(text);
  if (records.empty()) throw DataError("report: empty CSV");
  const auto& header = records.front();
  if (header.size() != kReportColumns.size()) throw DataError("report: unexpected header");
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] != kReportColumns[i]) throw DataError("report: unexpected column '" + header[i] + "'");
  }
  ReportTable t;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& f = records[i];
    if (f.size() != kReportColumns.size()) {
      throw DataError("report: row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    }
    ReportRow r;
    r.experiment = f[0];
    r.corpus = f[1];
    r.compression = f[2];
    r.prompt_source = f[3];
    r.k = static_cast<std::size_t>(std::stoull(f[4]));
    r.ppl = parse_number(f[5]);
    r.nll = parse_number(f[6]);
    r.accuracy = parse_number(f[7]);
    r.latency_ms = parse_number(f[8]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

void emit_report(const ReportTable& table, const std::filesystem::path& dir) {
  if (table.rows.empty()) throw ContractError("emit_report: table is empty");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FilesystemError("cannot create " + dir.string() + ": " + ec.message());
  const auto write = [](const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw FilesystemError("cannot write " + p.string());
    out << s;
    if (!out) throw FilesystemError("write failed for " + p.string());
  };
  write(dir / "report.csv", to_csv(table));
  write(dir / "report.md", to_markdown(table));
}

}  // namespace cprompt::harness
