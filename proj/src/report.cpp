#include "gleve/report.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kHuMin = -1024.0;
constexpr double kHuMax = 3071.0;

struct Cursor {
  const std::string& line;
  int line_no;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(line_no, int(pos) + 1, msg);
  }
  void skip_ws() {
    while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
  }
  bool done() {
    skip_ws();
    return pos >= line.size();
  }
  std::string token() {
    skip_ws();
    if (pos >= line.size()) fail("expected token");
    std::size_t start = pos;
    while (pos < line.size() && !std::isspace(std::uint8_t(line[pos]))) ++pos;
    return line.substr(start, pos - start);
  }
};

int parse_int(Cursor& c, const std::string& what) {
  std::string t = c.token();
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(t, &used);
  } catch (const std::exception&) {
    c.fail("non-numeric " + what + ": '" + t + "'");
  }
  if (used != t.size() || v < 0 || v > 1'000'000) {
    c.fail("bad " + what + ": '" + t + "'");
  }
  return int(v);
}

double parse_float_str(const std::string& t, Cursor& c,
                       const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    c.fail("non-numeric " + what + ": '" + t + "'");
  }
  if (used != t.size() || !std::isfinite(v)) {
    c.fail("non-numeric " + what + ": '" + t + "'");
  }
  return v;
}

// splits "key=value", keeping value verbatim
bool split_kv(const std::string& t, std::string& key, std::string& value) {
  auto eq = t.find('=');
  if (eq == std::string::npos || eq == 0) return false;
  key = t.substr(0, eq);
  value = t.substr(eq + 1);
  return true;
}

std::string format_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void ReportDoc::validate() const {
  for (int i = 0; i < lesion_count(); ++i) {
    const LesionRecord& r = lesions[std::size_t(i)];
    if (r.lesion_id != i) throw DataError("lesion ids not dense from 0");
    if (!organ_table.count(r.organ_id)) {
      throw DataError("lesion references unknown organ id");
    }
    if (!(r.reported_volume_mm3 > 0.0)) {
      throw DataError("reported volume must be positive");
    }
    if (r.reported_mean_hu < kHuMin || r.reported_mean_hu > kHuMax) {
      throw DataError("reported HU outside calibrated range");
    }
  }
}

ReportDoc parse_report(const std::string& text) {
  ReportDoc doc;
  std::map<std::string, int> organ_by_name;
  bool saw_case = false;
  bool saw_lesion = false;
  int line_no = 0;

  std::istringstream ss(text);
  std::string raw;
  while (std::getline(ss, raw)) {
    ++line_no;
    std::string line = raw;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    Cursor c{line, line_no};
    if (c.done()) continue;

    std::string directive = c.token();
    if (directive == "case") {
      if (saw_case) c.fail("duplicate case directive");
      doc.case_id = c.token();
      saw_case = true;
    } else if (directive == "organ") {
      if (!saw_case) c.fail("organ before case directive");
      if (saw_lesion) c.fail("organ after lesion section");
      int id = parse_int(c, "organ id");
      if (doc.organ_table.count(id)) c.fail("duplicate organ id");
      OrganInfo info;
      info.name = c.token();
      std::string kv = c.token(), key, value;
      if (!split_kv(kv, key, value) || key != "background_hu") {
        c.fail("expected background_hu=<float>");
      }
      info.background_mean_hu = parse_float_str(value, c, "background_hu");
      if (organ_by_name.count(info.name)) c.fail("duplicate organ name");
      organ_by_name[info.name] = id;
      doc.organ_table[id] = info;
    } else if (directive == "lesion") {
      if (!saw_case) c.fail("lesion before case directive");
      saw_lesion = true;
      LesionRecord rec;
      rec.raw_text = raw;
      rec.lesion_id = parse_int(c, "lesion id");
      if (rec.lesion_id != int(doc.lesions.size())) {
        if (rec.lesion_id < int(doc.lesions.size()))
          c.fail("duplicate lesion id");
        c.fail("lesion ids must be dense from 0");
      }
      bool have_organ = false, have_size = false, have_hu = false,
           have_loc = false;
      rec.sub_location = "none";
      while (!c.done()) {
        c.skip_ws();
        if (line.compare(c.pos, 2, "::") == 0) {
          c.pos += 2;
          c.skip_ws();
          rec.free_text = line.substr(c.pos);
          while (!rec.free_text.empty() &&
                 std::isspace(std::uint8_t(rec.free_text.back())))
            rec.free_text.pop_back();
          c.pos = line.size();
          break;
        }
        std::string kv = c.token(), key, value;
        if (!split_kv(kv, key, value)) c.fail("expected key=value: '" + kv + "'");
        if (key == "organ") {
          if (have_organ) c.fail("duplicate organ field");
          have_organ = true;
          // accept either the numeric id or the organ name
          bool numeric = !value.empty();
          for (char ch : value)
            if (!std::isdigit(std::uint8_t(ch))) numeric = false;
          if (numeric) {
            int id = int(std::stol(value));
            if (!doc.organ_table.count(id))
              c.fail("unknown organ id '" + value + "'");
            rec.organ_id = id;
          } else {
            auto it = organ_by_name.find(value);
            if (it == organ_by_name.end())
              c.fail("unknown organ '" + value + "'");
            rec.organ_id = it->second;
          }
        } else if (key == "loc") {
          if (have_loc) c.fail("duplicate loc field");
          have_loc = true;
          if (value.empty()) c.fail("empty loc token");
          rec.sub_location = value;
        } else if (key == "volume_mm3") {
          if (have_size) c.fail("duplicate size field");
          have_size = true;
          rec.reported_volume_mm3 = parse_float_str(value, c, "volume_mm3");
          if (!(rec.reported_volume_mm3 > 0.0)) c.fail("volume must be > 0");
        } else if (key == "diameter_mm") {
          if (have_size) c.fail("duplicate size field");
          have_size = true;
          double d = parse_float_str(value, c, "diameter_mm");
          if (!(d > 0.0)) c.fail("diameter must be > 0");
          rec.reported_volume_mm3 = kPi * d * d * d / 6.0;
        } else if (key == "hu") {
          if (have_hu) c.fail("duplicate hu field");
          have_hu = true;
          rec.reported_mean_hu = parse_float_str(value, c, "hu");
          if (rec.reported_mean_hu < kHuMin || rec.reported_mean_hu > kHuMax) {
            c.fail("hu outside [-1024, 3071]");
          }
        } else {
          c.fail("unknown lesion field '" + key + "'");
        }
      }
      if (!have_organ) c.fail("lesion missing organ field");
      if (!have_size) c.fail("lesion missing size field");
      if (!have_hu) c.fail("lesion missing hu field");
      doc.lesions.push_back(std::move(rec));
    } else {
      c.fail("unknown directive '" + directive + "'");
    }
  }
  if (!saw_case) throw ParseError(line_no, 1, "missing case directive");
  doc.validate();
  return doc;
}

std::string serialize_report(const ReportDoc& doc) {
  std::ostringstream os;
  os << "case " << doc.case_id << "\n";
  for (const auto& [id, info] : doc.organ_table) {
    os << "organ " << id << " " << info.name
       << " background_hu=" << format_float(info.background_mean_hu) << "\n";
  }
  for (const LesionRecord& r : doc.lesions) {
    os << "lesion " << r.lesion_id << " organ=" << r.organ_id
       << " loc=" << r.sub_location
       << " volume_mm3=" << format_float(r.reported_volume_mm3)
       << " hu=" << format_float(r.reported_mean_hu);
    if (!r.free_text.empty()) os << " :: " << r.free_text;
    os << "\n";
  }
  return os.str();
}

double contrast_features(const ReportDoc& doc, int lesion_index) {
  if (lesion_index < 0 || lesion_index >= doc.lesion_count()) {
    throw DataError("lesion index out of range");
  }
  const LesionRecord& r = doc.lesions[std::size_t(lesion_index)];
  return r.reported_mean_hu - doc.organ_table.at(r.organ_id).background_mean_hu;
}

}  // namespace gleve
