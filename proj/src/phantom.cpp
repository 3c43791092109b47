#include "gleve/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "gleve/errors.hpp"
#include "gleve/params.hpp"

namespace gleve {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

bool inside_ellipsoid(const std::array<double, 3>& p,
                      const std::array<double, 3>& c,
                      const std::array<double, 3>& r) {
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / r[a];
    acc += d * d;
  }
  return acc <= 1.0;
}

double max_radius(const std::array<double, 3>& r) {
  return std::max({r[0], r[1], r[2]});
}

std::string octant_token(const std::array<double, 3>& p,
                         const std::array<double, 3>& c) {
  std::string tok;
  tok += p[0] < c[0] ? "ant" : "post";
  tok += p[1] < c[1] ? "-left" : "-right";
  tok += p[2] < c[2] ? "-sup" : "-inf";
  return tok;
}

}  // namespace

void PhantomSpec::validate() const {
  if (nx <= 0 || ny <= 0 || nz <= 0) throw DataError("phantom dims invalid");
  for (const PhantomOrgan& o : organs) {
    for (double r : o.radii_mm)
      if (!(r > 0.0)) throw DataError("organ radii must be positive");
  }
  for (const PhantomLesion& l : lesions) {
    const PhantomOrgan* organ = nullptr;
    for (const PhantomOrgan& o : organs)
      if (o.organ_id == l.organ_id) organ = &o;
    if (!organ) throw DataError("lesion references unknown phantom organ");
    for (double r : l.radii_mm)
      if (!(r > 0.0)) throw DataError("lesion radii must be positive");
    // containment: probe the lesion surface along 26 directions
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          if (!dx && !dy && !dz) continue;
          double norm = std::sqrt(double(dx * dx + dy * dy + dz * dz));
          std::array<double, 3> p{
              l.center_mm[0] + l.radii_mm[0] * dx / norm,
              l.center_mm[1] + l.radii_mm[1] * dy / norm,
              l.center_mm[2] + l.radii_mm[2] * dz / norm};
          if (!inside_ellipsoid(p, organ->center_mm, organ->radii_mm)) {
            throw DataError("lesion " + std::to_string(l.lesion_id) +
                            " not contained in organ " + organ->name);
          }
        }
    if (l.mean_hu == organ->mean_hu) {
      throw DataError("lesion HU must differ from organ HU");
    }
  }
  for (std::size_t i = 0; i < lesions.size(); ++i) {
    for (std::size_t j = i + 1; j < lesions.size(); ++j) {
      const auto& a = lesions[i];
      const auto& b = lesions[j];
      double dist = 0.0;
      for (int ax = 0; ax < 3; ++ax) {
        const double d = a.center_mm[ax] - b.center_mm[ax];
        dist += d * d;
      }
      dist = std::sqrt(dist);
      if (dist < max_radius(a.radii_mm) + max_radius(b.radii_mm) +
                     lesion_margin_mm) {
        throw DataError("lesion margin violated between " +
                        std::to_string(a.lesion_id) + " and " +
                        std::to_string(b.lesion_id));
      }
    }
  }
}

PhantomCase generate(const PhantomSpec& spec) {
  spec.validate();
  PhantomCase out;
  out.spec = spec;
  out.ct_clean = Volume3(spec.nx, spec.ny, spec.nz, 1, spec.sx, spec.sy,
                         spec.sz);
  for (const PhantomOrgan& o : spec.organs) {
    out.organ_masks.emplace_back(spec.nx, spec.ny, spec.nz, spec.sx, spec.sy,
                                 spec.sz);
    (void)o;
  }
  for (const PhantomLesion& l : spec.lesions) {
    out.lesion_masks.emplace_back(spec.nx, spec.ny, spec.nz, spec.sx, spec.sy,
                                  spec.sz);
    (void)l;
  }

  std::vector<double> sigma(std::size_t(out.ct_clean.voxels()),
                            spec.background_noise_sigma);
  for (int x = 0; x < spec.nx; ++x)
    for (int y = 0; y < spec.ny; ++y)
      for (int z = 0; z < spec.nz; ++z) {
        const std::array<double, 3> p{(x + 0.5) * spec.sx, (y + 0.5) * spec.sy,
                                      (z + 0.5) * spec.sz};
        double hu = spec.background_hu;
        const std::int64_t idx = out.ct_clean.vox_index(x, y, z);
        for (std::size_t k = 0; k < spec.organs.size(); ++k) {
          const PhantomOrgan& o = spec.organs[k];
          if (inside_ellipsoid(p, o.center_mm, o.radii_mm)) {
            out.organ_masks[k].data[std::size_t(idx)] = 1;
            hu = o.mean_hu;
            sigma[std::size_t(idx)] = o.noise_sigma;
          }
        }
        for (std::size_t k = 0; k < spec.lesions.size(); ++k) {
          const PhantomLesion& l = spec.lesions[k];
          if (inside_ellipsoid(p, l.center_mm, l.radii_mm)) {
            out.lesion_masks[k].data[std::size_t(idx)] = 1;
            hu = l.mean_hu;
          }
        }
        out.ct_clean.data[std::size_t(idx)] = float(hu);
      }

  out.ct = out.ct_clean;
  Rng rng(spec.seed ^ fnv1a("phantom-noise:" + spec.case_id));
  for (std::int64_t i = 0; i < out.ct.voxels(); ++i) {
    out.ct.data[std::size_t(i)] +=
        float(sigma[std::size_t(i)] * rng.normal());
  }

  // report consistent with the rasterization
  out.report.case_id = spec.case_id;
  for (const PhantomOrgan& o : spec.organs) {
    out.report.organ_table[o.organ_id] = {o.name, o.mean_hu};
  }
  for (std::size_t k = 0; k < spec.lesions.size(); ++k) {
    const PhantomLesion& l = spec.lesions[k];
    const std::int64_t count = out.lesion_masks[k].count();
    if (count == 0) throw DataError("lesion rasterized to zero voxels");
    LesionRecord rec;
    rec.lesion_id = l.lesion_id;
    rec.organ_id = l.organ_id;
    rec.sub_location = l.loc;
    rec.reported_volume_mm3 =
        double(count) * out.ct_clean.voxel_volume_mm3();
    double hu = 0.0;
    for (std::int64_t v = 0; v < out.ct_clean.voxels(); ++v) {
      if (out.lesion_masks[k].data[std::size_t(v)]) hu += out.ct_clean.data[std::size_t(v)];
    }
    rec.reported_mean_hu = hu / double(count);
    rec.free_text = "synthetic phantom lesion";
    out.report.lesions.push_back(rec);
  }
  out.report.validate();
  return out;
}

namespace {

PhantomSpec base_spec(const std::string& suite_name, int index,
                      std::uint64_t seed) {
  PhantomSpec spec;
  spec.case_id = suite_name + "_" + std::string(index < 10 ? "0" : "") +
                 std::to_string(index);
  spec.seed = seed ^ fnv1a(spec.case_id);
  return spec;
}

PhantomLesion place_lesion(Rng& rng, const PhantomOrgan& organ, int lesion_id,
                           double radius_mm, double hu,
                           const std::vector<PhantomLesion>& existing,
                           double margin_mm) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    PhantomLesion l;
    l.lesion_id = lesion_id;
    l.organ_id = organ.organ_id;
    l.radii_mm = {radius_mm, radius_mm, radius_mm};
    l.mean_hu = hu;
    std::array<double, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const double room = organ.radii_mm[a] - radius_mm - 1.0;
      if (room <= 0.0) break;
      c[a] = organ.center_mm[a] + (2.0 * rng.uniform() - 1.0) * room * 0.75;
    }
    l.center_mm = c;
    l.loc = octant_token(c, organ.center_mm);
    bool ok = true;
    for (int dx = -1; dx <= 1 && ok; ++dx)
      for (int dy = -1; dy <= 1 && ok; ++dy)
        for (int dz = -1; dz <= 1 && ok; ++dz) {
          if (!dx && !dy && !dz) continue;
          const double norm = std::sqrt(double(dx * dx + dy * dy + dz * dz));
          const std::array<double, 3> p{c[0] + radius_mm * dx / norm,
                                        c[1] + radius_mm * dy / norm,
                                        c[2] + radius_mm * dz / norm};
          if (!inside_ellipsoid(p, organ.center_mm, organ.radii_mm)) ok = false;
        }
    for (const PhantomLesion& e : existing) {
      double dist = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double d = e.center_mm[a] - c[a];
        dist += d * d;
      }
      if (std::sqrt(dist) <
          max_radius(e.radii_mm) + radius_mm + margin_mm) {
        ok = false;
      }
    }
    if (ok) return l;
  }
  throw DataError("could not place lesion " + std::to_string(lesion_id));
}

}  // namespace

std::vector<PhantomSpec> suite(const std::string& name, std::uint64_t seed,
                               double mask_ratio) {
  const int kCases = 10;
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < kCases; ++i) {
    PhantomSpec spec = base_spec(name, i, seed);
    Rng rng(spec.seed ^ fnv1a("suite-layout"));

    PhantomOrgan liver;
    liver.organ_id = 0;
    liver.name = "liver";
    liver.center_mm = {16.0, 16.0, 16.0};
    liver.radii_mm = {12.0, 11.0, 10.0};
    liver.mean_hu = 50.0;

    if (name == "easy") {
      spec.organs = {liver};
      const double r = 3.2 + 1.6 * rng.uniform();
      const double hu = liver.mean_hu + 55.0 + 20.0 * rng.uniform();
      spec.lesions = {place_lesion(rng, liver, 0, r, hu, {},
                                   spec.lesion_margin_mm)};
    } else if (name == "small") {
      spec.organs = {liver};
      // 8 or 19 voxels at 1 mm spacing depending on grid alignment; both
      // inside the 8..27 voxel band, low contrast either way
      const bool tiny = (i % 2 == 0);
      const double r = tiny ? 1.0 + 0.25 * rng.uniform()
                            : 1.55 + 0.15 * rng.uniform();
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double hu = liver.mean_hu + sign * 15.0;
      PhantomLesion l =
          place_lesion(rng, liver, 0, r, hu, {}, spec.lesion_margin_mm);
      for (int a = 0; a < 3; ++a) {
        // corner-aligned spheres hold 8 voxel centers, voxel-centered 19
        l.center_mm[std::size_t(a)] =
            tiny ? std::round(l.center_mm[std::size_t(a)])
                 : std::floor(l.center_mm[std::size_t(a)]) + 0.5;
      }
      spec.lesions = {l};
    } else if (name == "multi" || name == "weak") {
      PhantomOrgan left = liver;
      left.center_mm = {10.5, 16.0, 16.0};
      left.radii_mm = {8.5, 10.5, 10.0};
      PhantomOrgan right;
      right.organ_id = 1;
      right.name = "kidney";
      right.center_mm = {25.0, 16.0, 16.0};
      right.radii_mm = {5.5, 7.0, 6.5};
      right.mean_hu = 30.0;
      spec.organs = {left, right};

      const int n = 2 + rng.uniform_int(0, 2);  // 2..4 lesions
      // fixed anchors keep pairwise margins feasible with 3 liver lesions;
      // distinct sizes and HU offsets so attributes disambiguate
      const double radii[4] = {2.0, 2.8, 3.0, 2.2};
      const double deltas[4] = {60.0, -45.0, 75.0, -60.0};
      const double anchors[4][3] = {{-0.35, -0.42, -0.35},
                                    {0.10, 0.15, -0.10},
                                    {0.28, 0.42, 0.28},
                                    {-0.06, 0.30, -0.45}};
      for (int k = 0; k < n; ++k) {
        const PhantomOrgan& organ = (k == 1) ? right : left;
        PhantomLesion l;
        l.lesion_id = k;
        l.organ_id = organ.organ_id;
        const double r = radii[k] * (0.95 + 0.1 * rng.uniform());
        l.radii_mm = {r, r, r};
        l.mean_hu = organ.mean_hu + deltas[k];
        for (int a = 0; a < 3; ++a) {
          const double jitter = 0.01 * (2.0 * rng.uniform() - 1.0);
          l.center_mm[std::size_t(a)] =
              organ.center_mm[std::size_t(a)] +
              (anchors[k][a] + jitter) * organ.radii_mm[std::size_t(a)];
        }
        l.loc = octant_token(l.center_mm, organ.center_mm);
        spec.lesions.push_back(l);
      }
    } else {
      throw ConfigError("unknown phantom suite: " + name);
    }
    specs.push_back(std::move(spec));
  }
  if (name == "weak") {
    const int carry = int(std::ceil(mask_ratio * double(specs.size())));
    for (int i = 0; i < int(specs.size()); ++i) {
      specs[std::size_t(i)].has_mask = i < carry;
    }
  }
  for (PhantomSpec& s : specs) s.validate();
  return specs;
}

void write_case(const PhantomCase& c, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["case_id"] = c.spec.case_id;
  manifest["has_mask"] = c.spec.has_mask;
  manifest["ct"] = "ct.vol";
  manifest["ct_clean"] = "ct_clean.vol";
  write_volume(dir + "/ct.vol", c.ct);
  write_volume(dir + "/ct_clean.vol", c.ct_clean);
  json organs = json::array();
  for (std::size_t k = 0; k < c.organ_masks.size(); ++k) {
    const std::string file = "organ_" + std::to_string(c.spec.organs[k].organ_id) + ".mask";
    write_mask(dir + "/" + file, c.organ_masks[k]);
    organs.push_back({{"organ_id", c.spec.organs[k].organ_id}, {"file", file}});
  }
  manifest["organs"] = organs;
  json lesions = json::array();
  for (std::size_t k = 0; k < c.lesion_masks.size(); ++k) {
    const std::string file = "lesion_" + std::to_string(c.spec.lesions[k].lesion_id) + ".mask";
    write_mask(dir + "/" + file, c.lesion_masks[k]);
    lesions.push_back({{"lesion_id", c.spec.lesions[k].lesion_id}, {"file", file}});
  }
  manifest["lesions"] = lesions;
  manifest["report"] = "report.txt";
  std::ofstream rep(dir + "/report.txt");
  rep << serialize_report(c.report);
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

LoadedCase load_case(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw DataError("missing manifest: " + dir);
  json manifest = json::parse(mf, nullptr, true, true);
  LoadedCase c;
  c.case_id = manifest.at("case_id").get<std::string>();
  c.has_mask = manifest.at("has_mask").get<bool>();
  c.ct = read_volume(dir + "/" + manifest.at("ct").get<std::string>());
  for (const auto& o : manifest.at("organs")) {
    c.organ_ids.push_back(o.at("organ_id").get<int>());
    c.organ_masks.push_back(read_mask(dir + "/" + o.at("file").get<std::string>()));
  }
  for (const auto& l : manifest.at("lesions")) {
    c.lesion_masks.push_back(read_mask(dir + "/" + l.at("file").get<std::string>()));
  }
  std::ifstream rep(dir + "/report.txt");
  std::string text((std::istreambuf_iterator<char>(rep)),
                   std::istreambuf_iterator<char>());
  c.report = parse_report(text);
  return c;
}

std::vector<std::string> write_suite(const std::vector<PhantomSpec>& specs,
                                     const std::string& dir) {
  fs::create_directories(dir);
  std::vector<std::string> case_dirs;
  json manifest = json::array();
  for (const PhantomSpec& spec : specs) {
    PhantomCase c = generate(spec);
    const std::string cdir = dir + "/" + spec.case_id;
    write_case(c, cdir);
    case_dirs.push_back(cdir);
    manifest.push_back(spec.case_id);
  }
  std::ofstream mf(dir + "/suite.json");
  mf << manifest.dump(2) << "\n";
  return case_dirs;
}

std::vector<std::string> list_suite(const std::string& dir) {
  std::ifstream mf(dir + "/suite.json");
  if (!mf) throw DataError("missing suite manifest: " + dir);
  json manifest = json::parse(mf);
  std::vector<std::string> out;
  for (const auto& id : manifest) {
    out.push_back(dir + "/" + id.get<std::string>());
  }
  return out;
}

}  // namespace gleve
