#pragma once

#include <array>
#include <string>
#include <vector>

#include "gleve/report.hpp"
#include "gleve/volume.hpp"

namespace gleve {

struct PhantomOrgan {
  int organ_id = 0;
  std::string name;
  std::array<double, 3> center_mm{0, 0, 0};
  std::array<double, 3> radii_mm{0, 0, 0};
  double mean_hu = 0.0;
  double noise_sigma = 5.0;
};

struct PhantomLesion {
  int lesion_id = 0;
  int organ_id = 0;
  std::array<double, 3> center_mm{0, 0, 0};
  std::array<double, 3> radii_mm{0, 0, 0};
  double mean_hu = 0.0;
  std::string loc = "none";
};

struct PhantomSpec {
  std::string case_id;
  int nx = 32, ny = 32, nz = 32;
  float sx = 1.0f, sy = 1.0f, sz = 1.0f;
  double background_hu = -100.0;
  double background_noise_sigma = 5.0;
  double lesion_margin_mm = 2.0;
  std::vector<PhantomOrgan> organs;
  std::vector<PhantomLesion> lesions;
  std::uint64_t seed = 2026;
  bool has_mask = true;  // masks participate in supervised training

  // containment and margin invariants; throws DataError on violation
  void validate() const;
};

struct PhantomCase {
  PhantomSpec spec;
  Volume3 ct;        // with seeded noise
  Volume3 ct_clean;  // noiseless; source for report statistics
  std::vector<Mask3> organ_masks;   // parallel to spec.organs
  std::vector<Mask3> lesion_masks;  // parallel to spec.lesions
  ReportDoc report;
};

// Analytic rasterization (voxel center inside the ellipsoid), piecewise HU
// plus seeded Gaussian noise. Report volume comes from the rasterized voxel
// count and HU from the noiseless mean, so report and image agree by
// construction.
PhantomCase generate(const PhantomSpec& spec);

// Named suites of 10 specs each. "weak" keeps ceil(mask_ratio * 10) specs
// mask-carrying; the rest train on report supervision alone.
std::vector<PhantomSpec> suite(const std::string& name,
                               std::uint64_t seed = 2026,
                               double mask_ratio = 1.0);

// Case directory layout: ct.vol, ct_clean.vol, organ_<k>.mask,
// lesion_<k>.mask, report.txt, manifest.json.
void write_case(const PhantomCase& c, const std::string& dir);

struct LoadedCase {
  std::string case_id;
  Volume3 ct;
  std::vector<int> organ_ids;
  std::vector<Mask3> organ_masks;
  std::vector<Mask3> lesion_masks;
  ReportDoc report;
  bool has_mask = true;
};

LoadedCase load_case(const std::string& dir);

// Writes each case into <dir>/<case_id>/ plus a suite manifest.
std::vector<std::string> write_suite(const std::vector<PhantomSpec>& specs,
                                     const std::string& dir);
std::vector<std::string> list_suite(const std::string& dir);

}  // namespace gleve
