#pragma once

#include <vector>

#include "gleve/ad.hpp"
#include "gleve/params.hpp"
#include "gleve/volume.hpp"

namespace gleve {

struct AnatomyConfig {
  int d_e = 16;        // organ embedding dim
  int channels = 8;    // visual feature channels C
  int max_organs = 8;  // embedding table rows
  double soft_sigma = 1.0;
  std::uint64_t seed = 2026;
};

void init_anatomy_params(ParamStore& ps, const AnatomyConfig& cfg);

// Fixed filter bank standing in for a learned visual encoder: raw HU, three
// Gaussian scales, gradient magnitude at those scales, and 3^3 local
// variance. Channels are z-scored over the volume so cosine matching sees
// comparable magnitudes. Result is {V, C} with V = nx*ny*nz.
ad::Tensor encode_features(const Volume3& ct);

std::vector<Volume3> organ_soft_maps(const std::vector<Mask3>& organ_masks,
                                     double sigma);

// Soft maps stacked per voxel: {V, K}.
ad::Tensor soft_map_matrix(const std::vector<Volume3>& soft_maps);

// E_hat(x) = phi_o(sum_k M_k(x) e_k); background rows map to phi_o(0).
ad::Val anatomy_token_tape(ad::Tape& t, ad::Val soft_matrix,
                           const std::vector<int>& organ_ids,
                           const TapeParams& tp);

// (gamma, beta) = psi(E_hat); F_mod = gamma * F + beta, per voxel per
// channel. psi starts at identity (gamma=1, beta=0).
ad::Val film_modulate_tape(ad::Tape& t, ad::Val features, ad::Val e_hat,
                           const TapeParams& tp, const AnatomyConfig& cfg);

// Plain wrappers over the tape path for single-shot use.
Volume3 anatomy_token(const std::vector<Volume3>& soft_maps,
                      const std::vector<int>& organ_ids, const ParamStore& ps,
                      const AnatomyConfig& cfg);
Volume3 film_modulate(const Volume3& features, const Volume3& e_hat,
                      const ParamStore& ps, const AnatomyConfig& cfg);

}  // namespace gleve
