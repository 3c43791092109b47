#include "gleve/anatomy.hpp"

#include <cmath>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

void zscore_channel(std::vector<double>& col) {
  double mean = 0.0;
  for (double x : col) mean += x;
  mean /= double(col.size());
  double var = 0.0;
  for (double x : col) var += (x - mean) * (x - mean);
  var /= double(col.size());
  const double sd = std::sqrt(var);
  if (sd < 1e-12) {
    for (double& x : col) x = 0.0;
    return;
  }
  for (double& x : col) x = (x - mean) / sd;
}

// spacing-aware central differences
Volume3 gradient_magnitude(const Volume3& v) {
  Volume3 out(v.nx, v.ny, v.nz, 1, v.sx, v.sy, v.sz);
  for (int x = 0; x < v.nx; ++x)
    for (int y = 0; y < v.ny; ++y)
      for (int z = 0; z < v.nz; ++z) {
        auto diff = [&](int dx, int dy, int dz, double h) {
          int x0 = std::max(x - dx, 0), x1 = std::min(x + dx, v.nx - 1);
          int y0 = std::max(y - dy, 0), y1 = std::min(y + dy, v.ny - 1);
          int z0 = std::max(z - dz, 0), z1 = std::min(z + dz, v.nz - 1);
          double span = h * ((x1 - x0) + (y1 - y0) + (z1 - z0));
          if (span == 0.0) return 0.0;
          return (double(v.at(x1, y1, z1)) - v.at(x0, y0, z0)) / span;
        };
        double gx = diff(1, 0, 0, v.sx);
        double gy = diff(0, 1, 0, v.sy);
        double gz = diff(0, 0, 1, v.sz);
        out.at(x, y, z) = float(std::sqrt(gx * gx + gy * gy + gz * gz));
      }
  return out;
}

Volume3 local_variance(const Volume3& v) {
  Volume3 out(v.nx, v.ny, v.nz, 1, v.sx, v.sy, v.sz);
  for (int x = 0; x < v.nx; ++x)
    for (int y = 0; y < v.ny; ++y)
      for (int z = 0; z < v.nz; ++z) {
        double sum = 0.0, sumsq = 0.0;
        int n = 0;
        for (int dx = -1; dx <= 1; ++dx)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dz = -1; dz <= 1; ++dz) {
              int px = x + dx, py = y + dy, pz = z + dz;
              if (px < 0 || px >= v.nx || py < 0 || py >= v.ny || pz < 0 ||
                  pz >= v.nz)
                continue;
              double a = v.at(px, py, pz);
              sum += a;
              sumsq += a * a;
              ++n;
            }
        double mean = sum / n;
        out.at(x, y, z) = float(std::max(0.0, sumsq / n - mean * mean));
      }
  return out;
}

}  // namespace

void init_anatomy_params(ParamStore& ps, const AnatomyConfig& cfg) {
  const double se = 1.0 / std::sqrt(double(cfg.d_e));
  const int c = cfg.channels;
  ps.emplace_gaussian("an.organ_emb", {cfg.max_organs, cfg.d_e}, se, cfg.seed);
  ps.emplace_gaussian("an.phi_W", {cfg.d_e, c}, se, cfg.seed);
  ps.emplace_zeros("an.phi_b", {c});
  ps.emplace_gaussian("an.psi_W1", {c, 2 * c}, 1.0 / std::sqrt(double(c)),
                      cfg.seed);
  ps.emplace_zeros("an.psi_b1", {2 * c});
  // zero head: gamma = 1 + 0, beta = 0 at start (identity modulation)
  ps.emplace_zeros("an.psi_W2", {2 * c, 2 * c});
  ps.emplace_zeros("an.psi_b2", {2 * c});
}

ad::Tensor encode_features(const Volume3& ct) {
  if (ct.channels != 1) throw DataError("encode_features expects 1 channel");
  const std::int64_t n = ct.voxels();
  const int kChannels = 8;

  std::vector<Volume3> banks;
  banks.push_back(ct);  // raw HU
  Volume3 g1 = gaussian_smooth_volume(ct, 1.0);
  Volume3 g2 = gaussian_smooth_volume(ct, 2.0);
  Volume3 g4 = gaussian_smooth_volume(ct, 4.0);
  banks.push_back(g1);
  banks.push_back(g2);
  banks.push_back(g4);
  banks.push_back(gradient_magnitude(g1));
  banks.push_back(gradient_magnitude(g2));
  banks.push_back(gradient_magnitude(g4));
  banks.push_back(local_variance(ct));

  ad::Tensor f({int(n), kChannels});
  std::vector<double> col(static_cast<std::size_t>(n));
  for (int c = 0; c < kChannels; ++c) {
    for (std::int64_t i = 0; i < n; ++i) col[std::size_t(i)] = banks[std::size_t(c)].data[std::size_t(i)];
    zscore_channel(col);
    for (std::int64_t i = 0; i < n; ++i) f[i * kChannels + c] = col[std::size_t(i)];
  }
  return f;
}

std::vector<Volume3> organ_soft_maps(const std::vector<Mask3>& organ_masks,
                                     double sigma) {
  std::vector<Volume3> out;
  out.reserve(organ_masks.size());
  for (const Mask3& m : organ_masks) out.push_back(gaussian_smooth(m, sigma));
  return out;
}

ad::Tensor soft_map_matrix(const std::vector<Volume3>& soft_maps) {
  if (soft_maps.empty()) throw DataError("need at least one soft map");
  const std::int64_t n = soft_maps.front().voxels();
  const int k = int(soft_maps.size());
  for (const Volume3& v : soft_maps) {
    if (v.voxels() != n) throw DataError("soft map dims mismatch");
  }
  ad::Tensor m({int(n), k});
  for (int j = 0; j < k; ++j)
    for (std::int64_t i = 0; i < n; ++i)
      m[i * k + j] = soft_maps[std::size_t(j)].data[std::size_t(i)];
  return m;
}

ad::Val anatomy_token_tape(ad::Tape& t, ad::Val soft_matrix,
                           const std::vector<int>& organ_ids,
                           const TapeParams& tp) {
  ad::Val emb = t.gather_rows(tp["an.organ_emb"], organ_ids);
  ad::Val weighted = t.matmul(soft_matrix, emb);
  return t.add_rowvec(t.matmul(weighted, tp["an.phi_W"]), tp["an.phi_b"]);
}

ad::Val film_modulate_tape(ad::Tape& t, ad::Val features, ad::Val e_hat,
                           const TapeParams& tp, const AnatomyConfig& cfg) {
  const int c = cfg.channels;
  ad::Val hidden = t.tanh_(
      t.add_rowvec(t.matmul(e_hat, tp["an.psi_W1"]), tp["an.psi_b1"]));
  ad::Val raw = t.add_rowvec(t.matmul(hidden, tp["an.psi_W2"]), tp["an.psi_b2"]);
  ad::Val gamma = t.add_scalar(t.col_slice(raw, 0, c), 1.0);
  ad::Val beta = t.col_slice(raw, c, 2 * c);
  return t.add(t.mul(gamma, features), beta);
}

namespace {

Volume3 matrix_to_volume(const ad::Tensor& m, const Volume3& like) {
  Volume3 out(like.nx, like.ny, like.nz, m.cols(), like.sx, like.sy, like.sz);
  for (std::int64_t i = 0; i < m.numel(); ++i) out.data[std::size_t(i)] = float(m[i]);
  return out;
}

ad::Tensor volume_to_matrix(const Volume3& v) {
  ad::Tensor m({int(v.voxels()), v.channels});
  for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = v.data[std::size_t(i)];
  return m;
}

}  // namespace

Volume3 anatomy_token(const std::vector<Volume3>& soft_maps,
                      const std::vector<int>& organ_ids, const ParamStore& ps,
                      const AnatomyConfig&) {
  if (soft_maps.size() != organ_ids.size()) {
    throw DataError("soft map / organ id count mismatch");
  }
  ad::Tape t;
  TapeParams tp(t, ps);
  ad::Val m = t.leaf(soft_map_matrix(soft_maps));
  ad::Val e = anatomy_token_tape(t, m, organ_ids, tp);
  return matrix_to_volume(t.value(e), soft_maps.front());
}

Volume3 film_modulate(const Volume3& features, const Volume3& e_hat,
                      const ParamStore& ps, const AnatomyConfig& cfg) {
  if (!features.same_grid(e_hat) || features.channels != cfg.channels ||
      e_hat.channels != cfg.channels) {
    throw DataError("film_modulate shape mismatch");
  }
  ad::Tape t;
  TapeParams tp(t, ps);
  ad::Val f = t.leaf(volume_to_matrix(features));
  ad::Val e = t.leaf(volume_to_matrix(e_hat));
  ad::Val out = film_modulate_tape(t, f, e, tp, cfg);
  return matrix_to_volume(t.value(out), features);
}

}  // namespace gleve
