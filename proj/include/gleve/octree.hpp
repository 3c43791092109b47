#pragma once

#include <array>
#include <vector>

#include "gleve/ad.hpp"
#include "gleve/params.hpp"
#include "gleve/proposal.hpp"
#include "gleve/volume.hpp"

namespace gleve {

struct OctreeConfig {
  int margin = 4;     // voxels added around the candidate bbox
  int min_block = 4;  // smallest node edge at the coarsest grid
  int depth = 2;      // requested levels; capped so leaf edge >= min_block
  double activity_threshold = 0.05;
  double logit_eps = 1e-6;
};

// Root cube is the smallest power-of-two cube covering the candidate bbox
// plus margin. It may extend past the volume; out-of-volume voxels read as
// zero features. Level l grid has edge root_edge >> (depth - l); the blocks
// processed at level l are the depth-l octree nodes, each level0_edge^3
// cells in its level grid.
struct Octree {
  std::array<int, 3> root_lo{0, 0, 0};  // global coords, may be negative
  int root_edge = 0;                    // E, power of two
  int depth = 0;                        // D
  int level0_edge = 0;                  // E >> D

  int grid_edge(int level) const { return level0_edge << level; }
};

void init_refine_params(ParamStore& ps, int feature_channels,
                        std::uint64_t seed);

Octree build_octree(const Proposal& p_star, const Volume3& like,
                    const OctreeConfig& cfg);

// Coarsest-grid initial mask: a level-0 cell is 1 when any candidate voxel
// falls inside it (max-pool downsampling keeps thin structures).
ad::Tensor level0_mask(const Octree& tree, const std::vector<std::int64_t>& voxels,
                       const Volume3& like);

struct RefineLevelResult {
  ad::Val canvas;                  // {1, G_l, G_l, G_l}
  std::vector<char> active;       // per depth-l node, lexicographic (i,j,k)
  int active_count = 0;
};

// One refinement level: upsample the previous prediction, run the shared
// residual head over each active node with a 2-voxel halo (1 per conv
// layer) and merge the disjoint node outputs. The head is
//   sigmoid( conv2(tanh(conv1([F ; m]))) + logit(m) )
// so a zero second conv is an exact pass-through of the upsampled prior.
RefineLevelResult refine_level_tape(ad::Tape& t, const Octree& tree, int level,
                                    ad::Val prev_canvas, ad::Val level_feats,
                                    const TapeParams& tp,
                                    const OctreeConfig& cfg,
                                    const std::vector<char>& parent_active);

struct RefineResult {
  Octree tree;
  ad::Val final_mask;                       // {1, E, E, E} root-local
  std::vector<ad::Val> level_canvases;      // index 0..D
  std::vector<std::vector<char>> activity;  // per level 1..D
  std::vector<int> active_counts;           // per level 1..D
};

// Full coarse-to-fine pass. features_mod is the {V, C} organ-aware feature
// matrix for the whole volume; the root crop and its average-pooled pyramid
// supply per-level features.
RefineResult refine_full_tape(ad::Tape& t, const Octree& tree,
                              const std::vector<std::int64_t>& voxels,
                              ad::Val features_mod, const Volume3& like,
                              const TapeParams& tp, const OctreeConfig& cfg);

// Root-local tensor -> global soft-mask volume (zeros outside the root).
Volume3 root_to_volume(const Octree& tree, const ad::Tensor& local,
                       const Volume3& like);

// Plain wrapper: build the octree from the candidate and run all levels.
Volume3 refine_full(const Proposal& p_star, const Volume3& features_mod,
                    const ParamStore& ps, const OctreeConfig& cfg);

}  // namespace gleve
