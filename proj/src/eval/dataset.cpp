#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "terra/eval.hpp"

namespace terra::eval {

namespace {

constexpr int64_t kMsPerDay = temporal::kMsPerDay;
constexpr int64_t kYearMs = 366 * kMsPerDay;       // "no longer than 1 year"
constexpr int64_t kSixMonthsMs = 183 * kMsPerDay;  // valid-period slack

// Fractional decimal digits of a numeric literal; scientific notation is
// folded into the count.
int decimal_digits(const std::string& literal) {
  std::string s = literal;
  int exp_shift = 0;
  auto epos = s.find_first_of("eE");
  if (epos != std::string::npos) {
    exp_shift = std::atoi(s.c_str() + epos + 1);
    s = s.substr(0, epos);
  }
  auto dot = s.find('.');
  int digits = dot == std::string::npos ? 0 : static_cast<int>(s.size() - dot - 1);
  return digits - exp_shift;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct RawRow {
  std::map<std::string, std::string> fields;
};

bool has(const RawRow& r, const std::string& key) {
  auto it = r.fields.find(key);
  return it != r.fields.end() && !it->second.empty();
}

double num(const RawRow& r, const std::string& key) {
  return std::stod(r.fields.at(key));
}

int64_t ms(const RawRow& r, const std::string& key) {
  return std::stoll(r.fields.at(key));
}

const char* const kChangeFields[] = {
    "label_before",
    "label_after",
    "valid_time_start_before_ms",
    "valid_time_end_before_ms",
    "valid_time_start_after_ms",
    "valid_time_end_after_ms",
    "support_time_start_before_ms",
    "support_time_end_before_ms",
    "support_time_start_after_ms",
    "support_time_end_after_ms",
};

}  // namespace

std::vector<std::string> validate_row(const EvalRow& row, const std::string& x_literal,
                                      const std::string& y_literal) {
  std::vector<std::string> problems;
  if (!(row.x >= -180.0 && row.x <= 180.0)) problems.push_back("x outside [-180, 180]");
  if (!(row.y >= -90.0 && row.y <= 90.0)) problems.push_back("y outside [-90, 90]");
  if (decimal_digits(x_literal) < 4) problems.push_back("x has less than 1e-4 degree precision");
  if (decimal_digits(y_literal) < 4) problems.push_back("y has less than 1e-4 degree precision");
  if (row.split != "train" && row.split != "test") {
    problems.push_back("split must be 'train' or 'test'");
  }

  auto check_periods = [&](int64_t vs, int64_t ve, int64_t ss, int64_t se,
                           const std::string& tag) {
    if (ss >= se) problems.push_back(tag + "support period must have positive length");
    if (se - ss > kYearMs) problems.push_back(tag + "support period longer than 1 year");
    if (vs > ve) problems.push_back(tag + "valid period ends before it starts");
    if (vs < ss - kSixMonthsMs) {
      problems.push_back(tag + "valid period starts more than 6 months before support");
    }
    if (ve > se + kSixMonthsMs) {
      problems.push_back(tag + "valid period ends more than 6 months after support");
    }
  };
  if (row.is_change) {
    check_periods(row.valid_before_start_ms, row.valid_before_end_ms,
                  row.support_before_start_ms, row.support_before_end_ms, "before ");
    check_periods(row.valid_after_start_ms, row.valid_after_end_ms, row.support_after_start_ms,
                  row.support_after_end_ms, "after ");
  } else {
    check_periods(row.valid_start_ms, row.valid_end_ms, row.support_start_ms,
                  row.support_end_ms, "");
  }
  return problems;
}

namespace {

EvalRow row_from_raw(const RawRow& raw, bool change) {
  EvalRow row;
  row.is_change = change;
  row.x = num(raw, "x");
  row.y = num(raw, "y");
  row.label = num(raw, "label");
  if (has(raw, "label_name")) row.label_name = raw.fields.at("label_name");
  if (has(raw, "shard")) row.shard = ms(raw, "shard");
  row.split = raw.fields.at("split");
  if (change) {
    row.label_before = num(raw, "label_before");
    row.label_after = num(raw, "label_after");
    if (has(raw, "label_before_name")) row.label_before_name = raw.fields.at("label_before_name");
    if (has(raw, "label_after_name")) row.label_after_name = raw.fields.at("label_after_name");
    row.valid_before_start_ms = ms(raw, "valid_time_start_before_ms");
    row.valid_before_end_ms = ms(raw, "valid_time_end_before_ms");
    row.valid_after_start_ms = ms(raw, "valid_time_start_after_ms");
    row.valid_after_end_ms = ms(raw, "valid_time_end_after_ms");
    row.support_before_start_ms = ms(raw, "support_time_start_before_ms");
    row.support_before_end_ms = ms(raw, "support_time_end_before_ms");
    row.support_after_start_ms = ms(raw, "support_time_start_after_ms");
    row.support_after_end_ms = ms(raw, "support_time_end_after_ms");
  } else {
    row.valid_start_ms = ms(raw, "valid_time_start_ms");
    row.valid_end_ms = ms(raw, "valid_time_end_ms");
    row.support_start_ms = ms(raw, "support_time_start_ms");
    row.support_end_ms = ms(raw, "support_time_end_ms");
  }
  return row;
}

Dataset build_dataset(const std::vector<RawRow>& raws, const std::string& path) {
  check_input(!raws.empty(), "dataset " + path + ": no rows");
  const char* const required[] = {"x", "y", "label", "split"};
  std::vector<std::string> problems;

  bool change = true;
  for (const char* f : kChangeFields) change &= has(raws[0], f);
  if (!change) {
    for (const char* f : {"valid_time_start_ms", "valid_time_end_ms", "support_time_start_ms",
                          "support_time_end_ms"}) {
      if (!has(raws[0], f)) problems.push_back(std::string("missing field: ") + f);
    }
  }
  for (const char* f : required) {
    if (!has(raws[0], f)) problems.push_back(std::string("missing field: ") + f);
  }
  if (!problems.empty()) {
    std::string msg = "dataset " + path + ": schema violations:";
    for (const auto& p : problems) msg += "\n  " + p;
    raise_invalid(msg);
  }

  Dataset out;
  out.change = change;
  for (size_t i = 0; i < raws.size(); ++i) {
    EvalRow row;
    try {
      row = row_from_raw(raws[i], change);
    } catch (const std::exception& e) {
      problems.push_back("row " + std::to_string(i + 1) + ": unparseable field (" + e.what() +
                         ")");
      continue;
    }
    auto row_problems = validate_row(row, raws[i].fields.at("x"), raws[i].fields.at("y"));
    for (const auto& p : row_problems) {
      problems.push_back("row " + std::to_string(i + 1) + ": " + p);
    }
    if (row.label != std::floor(row.label)) out.labels_integral = false;
    out.rows.push_back(std::move(row));
  }
  if (!problems.empty()) {
    std::string msg = "dataset " + path + ": " + std::to_string(problems.size()) +
                      " validation failure(s):";
    size_t shown = 0;
    for (const auto& p : problems) {
      msg += "\n  " + p;
      if (++shown >= 20) {
        msg += "\n  ...";
        break;
      }
    }
    raise_invalid(msg);
  }
  return out;
}

std::vector<RawRow> parse_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise_io("dataset: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) raise_invalid("dataset " + path + ": empty file");
  std::vector<std::string> header;
  {
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(trim(cell));
  }
  std::vector<RawRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    RawRow raw;
    std::istringstream ss(line);
    std::string cell;
    size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col < header.size()) raw.fields[header[col]] = trim(cell);
      ++col;
    }
    rows.push_back(std::move(raw));
  }
  return rows;
}

std::vector<RawRow> parse_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise_io("dataset: cannot open " + path);
  std::vector<RawRow> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      raise_invalid("dataset " + path + ": line " + std::to_string(lineno) +
                    ": invalid JSON: " + e.what());
    }
    RawRow raw;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.value().is_string()) {
        raw.fields[it.key()] = it.value().get<std::string>();
      } else if (!it.value().is_null()) {
        // dump() round-trips numbers with shortest form, preserving the
        // stated decimal precision of coordinate literals
        raw.fields[it.key()] = it.value().dump();
      }
    }
    rows.push_back(std::move(raw));
  }
  return rows;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  bool jsonl = path.size() >= 6 && (path.substr(path.size() - 6) == ".jsonl" ||
                                    path.substr(path.size() - 5) == ".json");
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") jsonl = true;
  auto raws = jsonl ? parse_jsonl(path) : parse_csv(path);
  return build_dataset(raws, path);
}

}  // namespace terra::eval
