#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gleve/errors.hpp"
#include "gleve/params.hpp"
#include "gleve/report.hpp"

using namespace gleve;

namespace {

const char* kMinimal =
    "case demo\n"
    "organ 0 liver background_hu=55\n"
    "lesion 0 organ=liver loc=upper-pole volume_mm3=4200 hu=35 :: hypodense\n";

}  // namespace

TEST_CASE("minimal valid document") {
  ReportDoc doc = parse_report(kMinimal);
  CHECK(doc.case_id == "demo");
  REQUIRE(doc.lesion_count() == 1);
  const LesionRecord& r = doc.lesions[0];
  CHECK(r.organ_id == 0);
  CHECK(r.sub_location == "upper-pole");
  CHECK(r.reported_volume_mm3 == doctest::Approx(4200.0));
  CHECK(r.reported_mean_hu == doctest::Approx(35.0));
  CHECK(r.free_text == "hypodense");
}

TEST_CASE("empty lesion section and comments") {
  ReportDoc doc = parse_report(
      "# a phantom study\n"
      "case empty01\n"
      "organ 0 liver background_hu=50  # organ line\n");
  CHECK(doc.lesion_count() == 0);
  CHECK(doc.organ_table.at(0).name == "liver");
}

TEST_CASE("unknown organ reference fails with position") {
  try {
    parse_report(
        "case x\n"
        "organ 0 liver background_hu=50\n"
        "lesion 0 organ=spleen loc=none volume_mm3=10 hu=30\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line == 3);
    CHECK(std::string(e.what()).find("spleen") != std::string::npos);
  }
}

TEST_CASE("structured errors for malformed input") {
  CHECK_THROWS_AS(parse_report(""), ParseError);  // missing case
  CHECK_THROWS_AS(parse_report("case a\nlesson 0\n"), ParseError);
  CHECK_THROWS_AS(
      parse_report("case a\norgan 0 liver background_hu=abc\n"), ParseError);
  CHECK_THROWS_AS(parse_report("case a\norgan 0 liver background_hu=1\n"
                               "lesion 0 organ=liver loc=x volume_mm3=nope hu=1\n"),
                  ParseError);
  // duplicate lesion id
  CHECK_THROWS_AS(parse_report("case a\norgan 0 liver background_hu=1\n"
                               "lesion 0 organ=0 loc=x volume_mm3=10 hu=1\n"
                               "lesion 0 organ=0 loc=x volume_mm3=10 hu=1\n"),
                  ParseError);
  // non-dense ids
  CHECK_THROWS_AS(parse_report("case a\norgan 0 liver background_hu=1\n"
                               "lesion 1 organ=0 loc=x volume_mm3=10 hu=1\n"),
                  ParseError);
  // HU out of the calibrated range
  CHECK_THROWS_AS(parse_report("case a\norgan 0 liver background_hu=1\n"
                               "lesion 0 organ=0 loc=x volume_mm3=10 hu=5000\n"),
                  ParseError);
}

TEST_CASE("diameter converts to sphere volume") {
  ReportDoc doc = parse_report(
      "case d\norgan 0 liver background_hu=50\n"
      "lesion 0 organ=liver loc=none diameter_mm=10 hu=30\n");
  CHECK(doc.lesions[0].reported_volume_mm3 ==
        doctest::Approx(3.14159265358979 * 1000.0 / 6.0).epsilon(1e-9));
  CHECK(doc.lesions[0].raw_text.find("diameter_mm=10") != std::string::npos);
}

TEST_CASE("serialize then parse is a canonical fixed point") {
  const std::string once = serialize_report(parse_report(kMinimal));
  const std::string twice = serialize_report(parse_report(once));
  CHECK(once == twice);

  // diameter form canonicalizes to volume and stays fixed
  const std::string diam =
      "case d\norgan 0 liver background_hu=50\n"
      "lesion 0 organ=0 loc=mid diameter_mm=8 hu=22 :: small nodule\n";
  const std::string s1 = serialize_report(parse_report(diam));
  const std::string s2 = serialize_report(parse_report(s1));
  CHECK(s1 == s2);
  CHECK(s1.find("volume_mm3=") != std::string::npos);
  CHECK(s1.find("small nodule") != std::string::npos);
}

TEST_CASE("contrast features") {
  ReportDoc doc = parse_report(
      "case c\norgan 0 liver background_hu=55\n"
      "organ 1 kidney background_hu=30\n"
      "lesion 0 organ=liver loc=none volume_mm3=100 hu=35\n"
      "lesion 1 organ=liver loc=none volume_mm3=200 hu=55\n"
      "lesion 2 organ=kidney loc=none volume_mm3=50 hu=80\n");
  CHECK(contrast_features(doc, 0) == doctest::Approx(-20.0));
  CHECK(contrast_features(doc, 1) == doctest::Approx(0.0));
  CHECK(contrast_features(doc, 2) == doctest::Approx(50.0));
  CHECK_THROWS_AS(contrast_features(doc, 3), DataError);
  // lesions in the same organ share the background value
  CHECK(contrast_features(doc, 0) + 20.0 ==
        doctest::Approx(contrast_features(doc, 1)));
}

TEST_CASE("parser survives random byte inputs") {
  Rng rng(2026);
  for (int trial = 0; trial < 2000; ++trial) {
    const int len = rng.uniform_int(0, 120);
    std::string input;
    for (int i = 0; i < len; ++i) {
      input.push_back(char(rng.uniform_int(0, 255)));
    }
    try {
      ReportDoc doc = parse_report(input);
      doc.validate();
    } catch (const ParseError&) {
      // structured failure is the expected outcome
    }
  }
  CHECK(true);
}

TEST_CASE("mutated valid documents parse or fail structurally") {
  Rng rng(7);
  const std::string base = kMinimal;
  for (int trial = 0; trial < 500; ++trial) {
    std::string mutated = base;
    const int edits = 1 + rng.uniform_int(0, 3);
    for (int e = 0; e < edits; ++e) {
      const std::size_t pos = std::size_t(rng.uniform_int(0, int(mutated.size()) - 1));
      mutated[pos] = char(rng.uniform_int(0, 255));
    }
    try {
      parse_report(mutated);
    } catch (const ParseError&) {
    }
  }
  CHECK(true);
}
