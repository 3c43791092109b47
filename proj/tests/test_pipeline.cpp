#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gleve/pipeline.hpp"

using namespace gleve;

namespace {

LoadedCase loaded_from(const PhantomCase& c) {
  LoadedCase lc;
  lc.case_id = c.spec.case_id;
  lc.ct = c.ct;
  for (const PhantomOrgan& o : c.spec.organs) lc.organ_ids.push_back(o.organ_id);
  lc.organ_masks = c.organ_masks;
  lc.lesion_masks = c.lesion_masks;
  lc.report = c.report;
  lc.has_mask = c.spec.has_mask;
  return lc;
}

LoadedCase easy_case(int index = 0, std::uint64_t seed = 2026) {
  auto specs = suite("easy", seed);
  return loaded_from(generate(specs[std::size_t(index)]));
}

}  // namespace

TEST_CASE("config parsing: defaults, overrides, unknown keys") {
  PipelineConfig def = parse_config("");
  CHECK(def.graph.d == 32);
  CHECK(def.proposal.k_p == 5);
  CHECK(def.octree.min_block == 4);
  CHECK(def.loss.con == 1.0);
  CHECK(def.optim.lr == doctest::Approx(1e-4));
  CHECK(def.seed == 2026);

  PipelineConfig cfg = parse_config(
      "# comment\n"
      "[graph]\n"
      "graph.d = 16\n"
      "proposal.tau = 0.25\n"
      "octree.depth = 3\n"
      "optim.lr = 0.01\n"
      "anver_off = true\n"
      "seed = 7\n");
  CHECK(cfg.graph.d == 16);
  CHECK(cfg.proposal.tau == 0.25);
  CHECK(cfg.octree.depth == 3);
  CHECK(cfg.anatomical_prior_off);
  CHECK(cfg.verification_off);
  CHECK(cfg.seed == 7);
  CHECK(cfg.graph.seed == 7);

  CHECK_THROWS_AS(parse_config("nonsense.key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("graph.d 16\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("proposal.tau = -1\n"), ConfigError);
}

TEST_CASE("ground on a case with no lesions returns an empty result") {
  PhantomSpec spec;
  spec.case_id = "empty";
  spec.seed = 5;
  PhantomOrgan o;
  o.organ_id = 0;
  o.name = "liver";
  o.center_mm = {16, 16, 16};
  o.radii_mm = {10, 10, 10};
  o.mean_hu = 45.0;
  spec.organs = {o};
  LoadedCase lc = loaded_from(generate(spec));

  PipelineConfig cfg;
  ParamStore ps;
  init_all_params(ps, cfg);
  GroundingResult res = ground(lc, ps, cfg);
  CHECK(res.lesions.empty());
  CHECK(res.losses.total == 0.0);
}

TEST_CASE("ground produces one result per lesion with in-bounds masks") {
  LoadedCase lc = easy_case();
  PipelineConfig cfg;
  ParamStore ps;
  init_all_params(ps, cfg);
  GroundingResult res = ground(lc, ps, cfg);
  REQUIRE(int(res.lesions.size()) == lc.report.lesion_count());
  const LesionGrounding& lg = res.lesions[0];
  CHECK(lg.final_mask.nx == lc.ct.nx);
  for (float f : lg.final_mask.data) {
    CHECK(f >= 0.0f);
    CHECK(f <= 1.0f);
  }
  CHECK(!lg.proposals.empty());
  CHECK(lg.selected >= 0);
  CHECK(lg.selected < int(lg.proposals.size()));
  // losses composed exactly
  CHECK(res.losses.con == res.losses.attr + res.losses.org);
  const LossWeights& w = cfg.loss;
  CHECK(res.losses.weak ==
        w.uni * res.losses.uni + w.con * res.losses.con + w.sep * res.losses.sep);
}

TEST_CASE("grounding is deterministic") {
  LoadedCase lc = easy_case(1);
  PipelineConfig cfg;
  ParamStore ps;
  init_all_params(ps, cfg);
  GroundingResult a = ground(lc, ps, cfg);
  GroundingResult b = ground(lc, ps, cfg);
  REQUIRE(a.lesions.size() == b.lesions.size());
  for (std::size_t i = 0; i < a.lesions.size(); ++i) {
    CHECK(a.lesions[i].final_mask.data == b.lesions[i].final_mask.data);
    CHECK(a.lesions[i].selected == b.lesions[i].selected);
  }
  CHECK(a.losses.total == b.losses.total);
}

TEST_CASE("ablation flag semantics") {
  LoadedCase lc = easy_case(2);
  PipelineConfig cfg;
  ParamStore ps;
  init_all_params(ps, cfg);

  // ocre_off: the final mask equals the binary indicator of the selection
  PipelineConfig oc = cfg;
  oc.ocre_off = true;
  GroundingResult res = ground(lc, ps, oc);
  const LesionGrounding& lg = res.lesions[0];
  const Proposal& sel = lg.proposals[std::size_t(lg.selected)];
  std::int64_t nonzero = 0;
  for (std::int64_t i = 0; i < lg.final_mask.voxels(); ++i) {
    const float f = lg.final_mask.data[std::size_t(i)];
    CHECK((f == 0.0f || f == 1.0f));
    nonzero += f != 0.0f;
  }
  CHECK(nonzero == std::int64_t(sel.voxels.size()));
  for (std::int64_t v : sel.voxels) {
    CHECK(lg.final_mask.data[std::size_t(v)] == 1.0f);
  }

  // anatomical_prior_off at identity-initialized FiLM changes nothing,
  // because psi starts at gamma=1, beta=0
  PipelineConfig ap = cfg;
  ap.anatomical_prior_off = true;
  GroundingResult with_prior = ground(lc, ps, cfg);
  GroundingResult without = ground(lc, ps, ap);
  CHECK(with_prior.lesions[0].response.data == without.lesions[0].response.data);

  // verification_off picks the top-response candidate and reports no scores
  PipelineConfig vo = cfg;
  vo.verification_off = true;
  GroundingResult nover = ground(lc, ps, vo);
  CHECK(nover.lesions[0].selected == 0);
  CHECK(nover.losses.uni == 0.0);

  // lequ_off still yields queries and a full pipeline pass
  PipelineConfig lq = cfg;
  lq.lequ_off = true;
  GroundingResult nolequ = ground(lc, ps, lq);
  CHECK(nolequ.lesions.size() == 1);
}

TEST_CASE("train: zero steps, delta gating and determinism") {
  std::vector<LoadedCase> cases;
  for (int i = 0; i < 3; ++i) cases.push_back(easy_case(i));

  PipelineConfig cfg;
  cfg.optim.lr = 1e-3;

  // steps = 0 leaves parameters at init
  TrainResult r0 = train(cases, cfg, 0);
  ParamStore fresh;
  init_all_params(fresh, cfg);
  CHECK(r0.params.flatten() == fresh.flatten());
  CHECK(r0.seg_evaluations == 0);

  // masks withheld -> the supervised term is never evaluated
  std::vector<LoadedCase> weak = cases;
  for (auto& c : weak) c.has_mask = false;
  TrainResult rw = train(weak, cfg, 4);
  CHECK(rw.seg_evaluations == 0);

  // masks available -> it is evaluated (twice per lesion per step)
  TrainResult rs = train(cases, cfg, 4);
  CHECK(rs.seg_evaluations == 8);

  // two runs are bit-identical
  TrainResult ra = train(cases, cfg, 6);
  TrainResult rb = train(cases, cfg, 6);
  CHECK(ra.params.flatten() == rb.params.flatten());
  CHECK(ra.loss_trace == rb.loss_trace);
  CHECK(ra.loss_csv == rb.loss_csv);
}

TEST_CASE("octree activity gate reduces work relative to threshold zero") {
  LoadedCase lc = easy_case(4);
  PipelineConfig gated;
  ParamStore ps;
  init_all_params(ps, gated);
  PipelineConfig open = gated;
  open.octree.activity_threshold = 0.0;

  GroundingResult g1 = ground(lc, ps, gated);
  GroundingResult g2 = ground(lc, ps, open);
  int nodes_gated = 0, nodes_open = 0;
  for (int n : g1.octree_active_nodes) nodes_gated += n;
  for (int n : g2.octree_active_nodes) nodes_open += n;
  CHECK(nodes_gated <= nodes_open);
  CHECK(nodes_open > 0);
}

TEST_CASE("evaluate_case wires metrics together") {
  LoadedCase lc = easy_case(5);
  PipelineConfig cfg;
  // ideal prediction: the GT itself
  Mask3 pred = union_gt(lc);
  CaseEval ev = evaluate_case(lc, pred, cfg);
  CHECK(ev.dice == doctest::Approx(1.0));
  REQUIRE(ev.hd95_mm.has_value());
  CHECK(*ev.hd95_mm == doctest::Approx(0.0));
  CHECK(ev.lr_metric == doctest::Approx(1.0));
  CHECK(ev.lls_metric == doctest::Approx(1.0));

  const std::string json_text = eval_report_json({ev}, {lc});
  CHECK(json_text.find("per_case") != std::string::npos);
  CHECK(json_text.find("aggregate") != std::string::npos);
}
