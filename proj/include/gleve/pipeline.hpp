#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gleve/anatomy.hpp"
#include "gleve/metrics.hpp"
#include "gleve/objectives.hpp"
#include "gleve/octree.hpp"
#include "gleve/phantom.hpp"
#include "gleve/proposal.hpp"
#include "gleve/semgraph.hpp"

namespace gleve {

struct PipelineConfig {
  GraphConfig graph;
  AnatomyConfig anatomy;
  ProposalConfig proposal;
  OctreeConfig octree;
  LossWeights loss;
  OptimizerConfig optim;
  double d0_mm = 20.0;
  double pred_threshold = 0.5;
  std::uint64_t seed = 2026;

  // ablations; anver_off is the merged AnVer switch
  bool lequ_off = false;
  bool anatomical_prior_off = false;
  bool verification_off = false;
  bool ocre_off = false;

  void set_seed(std::uint64_t s) {
    seed = s;
    graph.seed = s;
    anatomy.seed = s;
  }
};

// Minimal dotted key=value config text ('#' comments, bools, ints, floats).
// Unknown keys are a ConfigError.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config_file(const std::string& path);

void init_all_params(ParamStore& ps, const PipelineConfig& cfg);

struct LesionGrounding {
  int lesion_id = 0;
  std::vector<Proposal> proposals;
  int selected = -1;
  bool fallback = false;  // no candidates; organ-prior seed used
  Volume3 final_mask;     // soft, full volume
  Volume3 response;       // S_i, full volume
};

struct StageTiming {
  double graph_ms = 0.0;
  double modulate_ms = 0.0;
  double propose_ms = 0.0;
  double refine_ms = 0.0;
};

struct GroundingResult {
  std::vector<LesionGrounding> lesions;
  LossReport losses;
  StageTiming timing;
  std::vector<int> octree_active_nodes;  // summed per lesion
};

GroundingResult ground(const LoadedCase& c, const ParamStore& ps,
                       const PipelineConfig& cfg);

// Writes per-lesion soft masks, the thresholded union mask, proposals JSONL
// and a mid-axial response PGM per lesion.
void write_grounding(const GroundingResult& res, const LoadedCase& c,
                     const PipelineConfig& cfg, const std::string& out_dir);

struct EvalPoint {
  int step = 0;
  double lr_metric = 0.0;
  double lls_metric = 0.0;
};

struct TrainResult {
  ParamStore params;
  std::vector<double> loss_trace;
  std::string loss_csv;
  std::vector<EvalPoint> eval_trace;
  int seg_evaluations = 0;  // instrumentation for the delta gate
};

// Batch-1 loop over the train split (8:1:1 by case order), AdamW with cosine
// annealing, LR/LLS on the eval split every 50 steps.
TrainResult train(const std::vector<LoadedCase>& cases,
                  const PipelineConfig& cfg, int steps);

struct CaseEval {
  std::string case_id;
  double dice = 0.0;
  std::optional<double> hd95_mm;
  double lr_metric = 0.0;
  double lls_metric = 0.0;
  MatchResult match;
};

CaseEval evaluate_case(const LoadedCase& c, const Mask3& pred_union,
                       const PipelineConfig& cfg);

// Metrics JSON (per-case entries plus overall and per-organ aggregates).
std::string eval_report_json(const std::vector<CaseEval>& evals,
                             const std::vector<LoadedCase>& cases);

Mask3 union_gt(const LoadedCase& c);
Mask3 threshold_mask(const Volume3& soft, double threshold);

}  // namespace gleve
