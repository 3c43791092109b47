#include "gleve/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

constexpr double kBig = 1e20;

// Felzenszwalb-Huttenlocher lower envelope for one line; f holds squared
// distances on entry, s2 is the squared voxel spacing along the line.
void dt_line(std::vector<double>& f, std::vector<double>& d,
             std::vector<int>& v, std::vector<double>& z, double s2) {
  const int n = int(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -kBig;
  z[1] = kBig;
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      s = ((f[std::size_t(q)] + s2 * q * q) -
           (f[std::size_t(v[std::size_t(k)])] +
            s2 * v[std::size_t(k)] * v[std::size_t(k)])) /
          (2.0 * s2 * (q - v[std::size_t(k)]));
      if (k > 0 && s <= z[std::size_t(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[std::size_t(k)] = q;
    z[std::size_t(k)] = s;
    z[std::size_t(k) + 1] = kBig;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[std::size_t(k) + 1] < double(q)) ++k;
    const int vq = v[std::size_t(k)];
    d[std::size_t(q)] = s2 * (q - vq) * (q - vq) + f[std::size_t(vq)];
  }
}

std::array<double, 3> component_centroid_mm(
    const std::vector<std::int64_t>& comp, const Mask3& m) {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (std::int64_t v : comp) {
    const int z = int(v % m.nz);
    const int y = int((v / m.nz) % m.ny);
    const int x = int(v / (std::int64_t(m.ny) * m.nz));
    cx += (x + 0.5) * m.sx;
    cy += (y + 0.5) * m.sy;
    cz += (z + 0.5) * m.sz;
  }
  const double n = double(comp.size());
  return {cx / n, cy / n, cz / n};
}

double pair_dice(const std::vector<std::int64_t>& a,
                 const std::vector<std::int64_t>& b) {
  // both sorted ascending
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return 2.0 * double(inter) / double(a.size() + b.size());
}

}  // namespace

double dice(const Mask3& a, const Mask3& b) {
  if (!a.same_grid(b)) throw DataError("dice: shape mismatch");
  std::int64_t inter = 0, ca = 0, cb = 0;
  for (std::int64_t i = 0; i < a.voxels(); ++i) {
    ca += a.data[std::size_t(i)];
    cb += b.data[std::size_t(i)];
    inter += a.data[std::size_t(i)] & b.data[std::size_t(i)];
  }
  if (ca + cb == 0) return 1.0;  // documented convention
  return 2.0 * double(inter) / double(ca + cb);
}

Mask3 boundary_voxels(const Mask3& m) {
  Mask3 out(m.nx, m.ny, m.nz, m.sx, m.sy, m.sz);
  static constexpr int kOffs[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                      {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
  for (int x = 0; x < m.nx; ++x)
    for (int y = 0; y < m.ny; ++y)
      for (int z = 0; z < m.nz; ++z) {
        if (!m.at(x, y, z)) continue;
        bool edge = false;
        for (const auto& o : kOffs) {
          const int px = x + o[0], py = y + o[1], pz = z + o[2];
          if (px < 0 || px >= m.nx || py < 0 || py >= m.ny || pz < 0 ||
              pz >= m.nz || !m.at(px, py, pz)) {
            edge = true;
            break;
          }
        }
        if (edge) out.at(x, y, z) = 1;
      }
  return out;
}

std::vector<double> squared_edt(const Mask3& seeds) {
  const std::int64_t n = seeds.voxels();
  std::vector<double> d(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    d[std::size_t(i)] = seeds.data[std::size_t(i)] ? 0.0 : kBig;
  }
  const auto maxdim = std::size_t(std::max({seeds.nx, seeds.ny, seeds.nz}));
  std::vector<double> f(maxdim), out(maxdim);
  std::vector<int> v(maxdim);
  std::vector<double> z(maxdim + 1);

  // z axis (stride 1)
  for (int x = 0; x < seeds.nx; ++x)
    for (int y = 0; y < seeds.ny; ++y) {
      const std::int64_t base = (std::int64_t(x) * seeds.ny + y) * seeds.nz;
      f.assign(d.begin() + base, d.begin() + base + seeds.nz);
      f.resize(std::size_t(seeds.nz));
      dt_line(f, out, v, z, double(seeds.sz) * seeds.sz);
      std::copy(out.begin(), out.begin() + seeds.nz, d.begin() + base);
    }
  // y axis
  for (int x = 0; x < seeds.nx; ++x)
    for (int zz = 0; zz < seeds.nz; ++zz) {
      const std::int64_t base = std::int64_t(x) * seeds.ny * seeds.nz + zz;
      f.resize(std::size_t(seeds.ny));
      for (int y = 0; y < seeds.ny; ++y)
        f[std::size_t(y)] = d[std::size_t(base + std::int64_t(y) * seeds.nz)];
      dt_line(f, out, v, z, double(seeds.sy) * seeds.sy);
      for (int y = 0; y < seeds.ny; ++y)
        d[std::size_t(base + std::int64_t(y) * seeds.nz)] = out[std::size_t(y)];
    }
  // x axis
  const std::int64_t xstride = std::int64_t(seeds.ny) * seeds.nz;
  for (int y = 0; y < seeds.ny; ++y)
    for (int zz = 0; zz < seeds.nz; ++zz) {
      const std::int64_t base = std::int64_t(y) * seeds.nz + zz;
      f.resize(std::size_t(seeds.nx));
      for (int x = 0; x < seeds.nx; ++x)
        f[std::size_t(x)] = d[std::size_t(base + std::int64_t(x) * xstride)];
      dt_line(f, out, v, z, double(seeds.sx) * seeds.sx);
      for (int x = 0; x < seeds.nx; ++x)
        d[std::size_t(base + std::int64_t(x) * xstride)] = out[std::size_t(x)];
    }
  return d;
}

double percentile_type7(std::vector<double> xs, double p) {
  if (xs.empty()) throw DataError("percentile of empty set");
  std::sort(xs.begin(), xs.end());
  const double h = (double(xs.size()) - 1.0) * p;
  const std::size_t lo = std::size_t(std::floor(h));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (h - double(lo)) * (xs[hi] - xs[lo]);
}

double hd95(const Mask3& a, const Mask3& b) {
  if (!a.same_grid(b)) throw DataError("hd95: shape mismatch");
  if (a.count() == 0 || b.count() == 0) {
    throw DataError("hd95 undefined for empty mask");
  }
  const Mask3 ba = boundary_voxels(a);
  const Mask3 bb = boundary_voxels(b);
  const std::vector<double> edt_a = squared_edt(ba);
  const std::vector<double> edt_b = squared_edt(bb);
  std::vector<double> dists;
  for (std::int64_t i = 0; i < a.voxels(); ++i) {
    if (ba.data[std::size_t(i)]) dists.push_back(std::sqrt(edt_b[std::size_t(i)]));
    if (bb.data[std::size_t(i)]) dists.push_back(std::sqrt(edt_a[std::size_t(i)]));
  }
  return percentile_type7(std::move(dists), 0.95);
}

std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = int(cost.size());
  if (n == 0) return {};
  for (const auto& row : cost) {
    if (int(row.size()) != n) throw DataError("hungarian: matrix not square");
  }
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(std::size_t(n) + 1, 0.0), v(std::size_t(n) + 1, 0.0);
  std::vector<int> p(std::size_t(n) + 1, 0), way(std::size_t(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(std::size_t(n) + 1, inf);
    std::vector<char> used(std::size_t(n) + 1, 0);
    do {
      used[std::size_t(j0)] = 1;
      const int i0 = p[std::size_t(j0)];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[std::size_t(j)]) continue;
        const double cur =
            cost[std::size_t(i0) - 1][std::size_t(j) - 1] - u[std::size_t(i0)] - v[std::size_t(j)];
        if (cur < minv[std::size_t(j)]) {
          minv[std::size_t(j)] = cur;
          way[std::size_t(j)] = j0;
        }
        if (minv[std::size_t(j)] < delta) {
          delta = minv[std::size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[std::size_t(j)]) {
          u[std::size_t(p[std::size_t(j)])] += delta;
          v[std::size_t(j)] -= delta;
        } else {
          minv[std::size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[std::size_t(j0)] != 0);
    do {
      const int j1 = way[std::size_t(j0)];
      p[std::size_t(j0)] = p[std::size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(std::size_t(n), -1);
  for (int j = 1; j <= n; ++j) {
    if (p[std::size_t(j)]) row_to_col[std::size_t(p[std::size_t(j)]) - 1] = j - 1;
  }
  return row_to_col;
}

MatchResult match_lesions(const Mask3& gt, const Mask3& pred,
                          int connectivity) {
  if (!gt.same_grid(pred)) throw DataError("match_lesions: shape mismatch");
  const auto gt_comps = connected_components(gt, connectivity);
  const auto pr_comps = connected_components(pred, connectivity);
  MatchResult res;
  res.n_gt = int(gt_comps.size());
  res.n_pred = int(pr_comps.size());

  const int n = std::max(res.n_gt, res.n_pred);
  if (n == 0) return res;

  std::vector<std::vector<double>> dmat(
      std::size_t(res.n_gt), std::vector<double>(std::size_t(res.n_pred), 0.0));
  for (int i = 0; i < res.n_gt; ++i)
    for (int j = 0; j < res.n_pred; ++j)
      dmat[std::size_t(i)][std::size_t(j)] =
          pair_dice(gt_comps[std::size_t(i)], pr_comps[std::size_t(j)]);

  // square cost matrix; forbidden and dummy entries cost 0 so the optimum
  // maximizes total dice over allowed pairs; a tiny lexicographic bias
  // makes equal-dice ties deterministic
  std::vector<std::vector<double>> cost(std::size_t(n),
                                        std::vector<double>(std::size_t(n), 0.0));
  for (int i = 0; i < res.n_gt; ++i)
    for (int j = 0; j < res.n_pred; ++j) {
      const double d = dmat[std::size_t(i)][std::size_t(j)];
      if (d >= kMatchDiceThreshold) {
        cost[std::size_t(i)][std::size_t(j)] =
            -d + 1e-12 * double(i * (res.n_pred + 1) + j);
      }
    }
  const std::vector<int> assign = hungarian(cost);

  std::vector<char> pred_matched(std::size_t(res.n_pred), 0);
  for (int i = 0; i < res.n_gt; ++i) {
    const int j = assign[std::size_t(i)];
    if (j < res.n_pred && dmat[std::size_t(i)][std::size_t(j)] >= kMatchDiceThreshold) {
      MatchPair pair;
      pair.gt_index = i;
      pair.pred_index = j;
      pair.dice = dmat[std::size_t(i)][std::size_t(j)];
      const auto cg = component_centroid_mm(gt_comps[std::size_t(i)], gt);
      const auto cp = component_centroid_mm(pr_comps[std::size_t(j)], pred);
      pair.centroid_dist_mm = std::sqrt((cg[0] - cp[0]) * (cg[0] - cp[0]) +
                                        (cg[1] - cp[1]) * (cg[1] - cp[1]) +
                                        (cg[2] - cp[2]) * (cg[2] - cp[2]));
      res.pairs.push_back(pair);
      pred_matched[std::size_t(j)] = 1;
    } else {
      res.unmatched_gt.push_back(i);
    }
  }
  for (int j = 0; j < res.n_pred; ++j) {
    if (!pred_matched[std::size_t(j)]) res.unmatched_pred.push_back(j);
  }
  res.n_matched = int(res.pairs.size());
  return res;
}

double lesion_recall(const MatchResult& m) {
  if (m.n_gt < 1) throw DataError("lesion_recall undefined without GT lesions");
  return double(m.n_matched) / double(m.n_gt);
}

double lls(const MatchResult& m, double d0_mm) {
  if (m.n_gt < 1) throw DataError("lls undefined without GT lesions");
  if (!(d0_mm > 0.0)) throw ConfigError("lls: d0 must be positive");
  double acc = 0.0;
  for (const MatchPair& p : m.pairs) {
    acc += p.dice * std::exp(-p.centroid_dist_mm / d0_mm);
  }
  return acc / double(m.n_gt);
}

}  // namespace gleve
