#pragma once

#include <map>
#include <string>
#include <vector>

namespace gleve {

// One parsed lesion description. Size is canonicalized to volume (a
// diameter_mm directive is converted to the sphere volume pi*d^3/6 at
// parse time; the original line survives in raw_text).
struct LesionRecord {
  int lesion_id = 0;
  int organ_id = 0;
  std::string sub_location;  // "none" means unspecified
  double reported_volume_mm3 = 0.0;
  double reported_mean_hu = 0.0;
  std::string free_text;
  std::string raw_text;
};

struct OrganInfo {
  std::string name;
  double background_mean_hu = 0.0;
};

struct ReportDoc {
  std::string case_id;
  std::map<int, OrganInfo> organ_table;
  std::vector<LesionRecord> lesions;

  int lesion_count() const { return int(lesions.size()); }
  void validate() const;
};

// Line-oriented grammar, one directive per line, '#' comments, order:
// case, organ*, lesion*. Total and deterministic: any input yields a
// ReportDoc or a ParseError.
ReportDoc parse_report(const std::string& text);

// Canonical form: parse(serialize(doc)) == doc and serialize is a fixed
// point under parse-serialize round trips.
std::string serialize_report(const ReportDoc& doc);

// delta_hu = reported mean HU minus the organ background mean.
double contrast_features(const ReportDoc& doc, int lesion_index);

}  // namespace gleve
