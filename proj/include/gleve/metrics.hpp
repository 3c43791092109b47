#pragma once

#include <array>
#include <vector>

#include "gleve/volume.hpp"

namespace gleve {

// 2|A n B| / (|A| + |B|); both empty -> 1.0 by convention.
double dice(const Mask3& a, const Mask3& b);

// 95th percentile (type-7 interpolation) of the symmetric surface-distance
// multiset in mm. Boundary voxels have a 6-connected background neighbor or
// touch the volume edge. Distances come from an exact Euclidean distance
// transform; both masks must be nonempty.
double hd95(const Mask3& a, const Mask3& b);

// exact anisotropic squared EDT to the set of seed voxels (seed != 0)
std::vector<double> squared_edt(const Mask3& seeds);

Mask3 boundary_voxels(const Mask3& m);

double percentile_type7(std::vector<double> xs, double p);

// Minimum-cost complete assignment on a square matrix (shortest augmenting
// paths with potentials). Returns row -> column.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

struct MatchPair {
  int gt_index = 0;
  int pred_index = 0;
  double dice = 0.0;
  double centroid_dist_mm = 0.0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_gt;
  std::vector<int> unmatched_pred;
  int n_matched = 0;
  int n_gt = 0;
  int n_pred = 0;
};

// Instances via connected components on both masks, cost -dice with
// dice < 0.1 forbidden, Hungarian assignment over allowed entries,
// lexicographic (i, j) tie-break.
MatchResult match_lesions(const Mask3& gt, const Mask3& pred,
                          int connectivity = 26);

constexpr double kMatchDiceThreshold = 0.1;

// N_matched / N_gt; error when there are no GT lesions.
double lesion_recall(const MatchResult& m);

// (1/N_gt) sum Dice(i, pi(i)) exp(-d_i/d0); unmatched GT contribute 0.
double lls(const MatchResult& m, double d0_mm = 20.0);

}  // namespace gleve
