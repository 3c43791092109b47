#pragma once

#include <vector>

#include "gleve/ad.hpp"
#include "gleve/params.hpp"
#include "gleve/report.hpp"
#include "gleve/semgraph.hpp"
#include "gleve/volume.hpp"

namespace gleve {

struct ProposalConfig {
  int k_p = 5;
  double quantile = 0.995;
  int min_voxels = 2;
  double max_fraction = 0.2;  // reject components larger than this share
  int connectivity = 26;
  double tau = 0.5;
  double eps = 1e-8;
  double sigma_hu = 20.0;
};

struct Proposal {
  int lesion_id = 0;
  std::vector<std::int64_t> voxels;  // global linear indices, ascending
  BBox3 bbox;                        // tight bound
  double mean_response = 0.0;
  double volume_mm3 = 0.0;
  double mean_hu = 0.0;
  double organ_overlap = 0.0;  // mean soft organ-map value over the region
  std::vector<double> region_feature;
  double score = 0.0;
  double soft_assign = 0.0;
};

void init_verifier_params(ParamStore& ps, int feature_channels, int d,
                          std::uint64_t seed);

// S(x) = max_m cos(q_m, F(x)); zero-norm feature rows give exactly 0.
ad::Val response_map_tape(ad::Tape& t, ad::Val queries_proj, ad::Val features);

// Plain wrapper: queries live in graph space and are projected by the
// shared qproj map before matching.
Volume3 response_map(const LesionQuerySet& qs, const Volume3& features,
                     const ParamStore& ps);

// Adaptive threshold at the configured quantile of S, connected components,
// size floor and max-fraction cap, ranked by mean response (ties by minimum
// linear index). Geometry only; stats and scores are added by verify.
std::vector<Proposal> generate_candidates(const std::vector<double>& response,
                                          const Volume3& like, int lesion_id,
                                          const ProposalConfig& cfg);

struct VerifyTapeResult {
  ad::Val score_vec;    // {K}
  ad::Val soft_assign;  // {K}
  int selected = 0;
};

// Region verification: s_k = sigmoid(Ws [v_k ; z]) + eta . xi_k with
// xi = (organ overlap, exp(-|V-Vr|/(Vr+eps)), exp(-|mu-mur|/sigma_hu)).
// Fills proposal stats, scores and soft assigns; selection is the hard
// argmax with ties going to the lowest index.
VerifyTapeResult verify_tape(ad::Tape& t, std::vector<Proposal>& props,
                             ad::Val z, ad::Val features_mod,
                             const Volume3& soft_organ, const Volume3& ct,
                             const LesionRecord& record, const TapeParams& tp,
                             const ProposalConfig& cfg);

std::pair<std::vector<Proposal>, int> verify(
    std::vector<Proposal> props, const LesionQuerySet& qs,
    const Volume3& features_mod, const Volume3& soft_organ, const Volume3& ct,
    const LesionRecord& record, const ParamStore& ps,
    const ProposalConfig& cfg);

// Entropy of the temperature-scaled score distribution, summed over lesions.
ad::Val unimodality_tape(ad::Tape& t, const std::vector<ad::Val>& score_vecs,
                         const ProposalConfig& cfg);

struct UnimodalityResult {
  double loss = 0.0;
  std::vector<std::vector<double>> soft_assigns;
};

UnimodalityResult unimodality_loss(
    const std::vector<std::vector<double>>& scores_per_lesion, double tau,
    double eps);

}  // namespace gleve
