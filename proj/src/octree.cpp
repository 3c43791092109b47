#include "gleve/octree.hpp"

#include <algorithm>
#include <cmath>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

int next_pow2(int v) {
  int p = 1;
  while (p < v) p <<= 1;
  return p;
}

int int_log2(int v) {
  int l = 0;
  while ((1 << (l + 1)) <= v) ++l;
  return l;
}

}  // namespace

void init_refine_params(ParamStore& ps, int feature_channels,
                        std::uint64_t seed) {
  const int ci = feature_channels + 1;
  ps.emplace_gaussian("oc.conv1_K", {8, ci, 3, 3, 3},
                      0.1 / std::sqrt(27.0 * ci), seed);
  ps.emplace_zeros("oc.conv1_b", {8});
  // zero head: refinement starts as the identity on the upsampled prior
  ps.emplace_zeros("oc.conv2_K", {1, 8, 3, 3, 3});
  ps.emplace_zeros("oc.conv2_b", {1});
}

Octree build_octree(const Proposal& p_star, const Volume3& like,
                    const OctreeConfig& cfg) {
  if (p_star.voxels.empty()) throw DataError("build_octree: empty candidate");
  Octree tree;
  const BBox3& b = p_star.bbox;
  int needed = 0;
  for (int a = 0; a < 3; ++a) {
    needed = std::max(needed, b.extent(a) + 2 * cfg.margin);
  }
  tree.root_edge = std::max(next_pow2(needed), cfg.min_block);
  tree.depth = std::min(cfg.depth, int_log2(tree.root_edge / cfg.min_block));
  tree.depth = std::max(tree.depth, 0);
  tree.level0_edge = tree.root_edge >> tree.depth;

  const int dims[3] = {like.nx, like.ny, like.nz};
  for (int a = 0; a < 3; ++a) {
    const int center2 = b.lo[a] + b.hi[a];  // 2x the bbox center
    int lo = (center2 - tree.root_edge) / 2;
    if (tree.root_edge <= dims[a]) {
      lo = std::clamp(lo, 0, dims[a] - tree.root_edge);
    }
    tree.root_lo[a] = lo;
  }
  return tree;
}

ad::Tensor level0_mask(const Octree& tree, const std::vector<std::int64_t>& voxels,
                       const Volume3& like) {
  const int g = tree.level0_edge;
  const int cell = tree.root_edge / g;
  ad::Tensor m({1, g, g, g});
  for (std::int64_t v : voxels) {
    const int z = int(v % like.nz);
    const int y = int((v / like.nz) % like.ny);
    const int x = int(v / (std::int64_t(like.ny) * like.nz));
    const int lx = (x - tree.root_lo[0]) / cell;
    const int ly = (y - tree.root_lo[1]) / cell;
    const int lz = (z - tree.root_lo[2]) / cell;
    if (lx < 0 || lx >= g || ly < 0 || ly >= g || lz < 0 || lz >= g) continue;
    m[(std::int64_t(lx) * g + ly) * g + lz] = 1.0;
  }
  return m;
}

RefineLevelResult refine_level_tape(ad::Tape& t, const Octree& tree, int level,
                                    ad::Val prev_canvas, ad::Val level_feats,
                                    const TapeParams& tp,
                                    const OctreeConfig& cfg,
                                    const std::vector<char>& parent_active) {
  if (level < 1 || level > tree.depth) {
    throw DataError("refine_level: level out of sequence");
  }
  const int nb = 1 << level;  // blocks per axis
  const int g = tree.grid_edge(level);
  const int block = tree.level0_edge;
  const int halo = 2;  // one voxel per conv layer

  ad::Val up = t.upsample2(prev_canvas);
  const ad::Tensor& uval = t.value(up);

  RefineLevelResult res;
  res.active.assign(std::size_t(nb) * nb * nb, 0);
  ad::Val canvas = t.leaf(ad::Tensor({1, g, g, g}));

  for (int bi = 0; bi < nb; ++bi)
    for (int bj = 0; bj < nb; ++bj)
      for (int bk = 0; bk < nb; ++bk) {
        const std::size_t flat =
            std::size_t((bi * nb + bj) * nb + bk);
        const std::size_t parent_flat = std::size_t(
            ((bi / 2) * (nb / 2) + (bj / 2)) * (nb / 2) + (bk / 2));
        const bool parent_ok =
            level == 1 ? true : parent_active[parent_flat] != 0;
        if (!parent_ok) continue;

        double peak = 0.0;
        for (int x = bi * block; x < (bi + 1) * block; ++x)
          for (int y = bj * block; y < (bj + 1) * block; ++y)
            for (int z = bk * block; z < (bk + 1) * block; ++z)
              peak = std::max(peak,
                              uval[(std::int64_t(x) * g + y) * g + z]);
        if (peak < cfg.activity_threshold) continue;

        res.active[flat] = 1;
        ++res.active_count;
        const std::array<int, 3> lo{bi * block, bj * block, bk * block};
        const std::array<int, 3> hlo{lo[0] - halo, lo[1] - halo, lo[2] - halo};
        const std::array<int, 3> hext{block + 2 * halo, block + 2 * halo,
                                      block + 2 * halo};
        ad::Val fcrop = t.crop3(level_feats, hlo, hext);
        ad::Val mcrop = t.crop3(up, hlo, hext);
        const int ci = t.value(fcrop).shape[0] + 1;
        ad::Val x = t.reshape(t.concat(fcrop, mcrop),
                              {ci, hext[0], hext[1], hext[2]});
        ad::Val h1 = t.tanh_(t.conv3d(x, tp["oc.conv1_K"], tp["oc.conv1_b"]));
        ad::Val logits_full = t.conv3d(h1, tp["oc.conv2_K"], tp["oc.conv2_b"]);
        ad::Val logits_core =
            t.crop3(logits_full, {halo, halo, halo}, {block, block, block});
        ad::Val m_core = t.crop3(up, lo, {block, block, block});
        ad::Val out = t.sigmoid_(
            t.add(logits_core, t.logit_(m_core, cfg.logit_eps)));
        canvas = t.add(canvas, t.embed3(out, {g, g, g}, lo));
      }
  res.canvas = canvas;
  return res;
}

RefineResult refine_full_tape(ad::Tape& t, const Octree& tree,
                              const std::vector<std::int64_t>& voxels,
                              ad::Val features_mod, const Volume3& like,
                              const TapeParams& tp, const OctreeConfig& cfg) {
  RefineResult res;
  res.tree = tree;

  // root-local feature pyramid; out-of-volume voxels read zero
  const int c = t.value(features_mod).cols();
  ad::Val fsp = t.reshape(t.transpose(features_mod),
                          {c, like.nx, like.ny, like.nz});
  ad::Val froot = t.crop3(fsp, tree.root_lo,
                          {tree.root_edge, tree.root_edge, tree.root_edge});
  std::vector<ad::Val> pyramid(std::size_t(tree.depth) + 1);
  pyramid[std::size_t(tree.depth)] = froot;
  for (int l = tree.depth - 1; l >= 0; --l) {
    pyramid[std::size_t(l)] = t.avgpool2(pyramid[std::size_t(l) + 1]);
  }

  ad::Val canvas = t.leaf(level0_mask(tree, voxels, like));
  res.level_canvases.push_back(canvas);
  std::vector<char> parent;  // unused at level 1
  for (int l = 1; l <= tree.depth; ++l) {
    RefineLevelResult lvl = refine_level_tape(
        t, tree, l, canvas, pyramid[std::size_t(l)], tp, cfg, parent);
    canvas = lvl.canvas;
    parent = lvl.active;
    res.level_canvases.push_back(canvas);
    res.activity.push_back(std::move(lvl.active));
    res.active_counts.push_back(lvl.active_count);
  }
  res.final_mask = canvas;
  return res;
}

Volume3 root_to_volume(const Octree& tree, const ad::Tensor& local,
                       const Volume3& like) {
  Volume3 out(like.nx, like.ny, like.nz, 1, like.sx, like.sy, like.sz);
  const int e = tree.root_edge;
  for (int x = 0; x < e; ++x) {
    const int gx = tree.root_lo[0] + x;
    if (gx < 0 || gx >= like.nx) continue;
    for (int y = 0; y < e; ++y) {
      const int gy = tree.root_lo[1] + y;
      if (gy < 0 || gy >= like.ny) continue;
      for (int z = 0; z < e; ++z) {
        const int gz = tree.root_lo[2] + z;
        if (gz < 0 || gz >= like.nz) continue;
        out.at(gx, gy, gz) = float(local[(std::int64_t(x) * e + y) * e + z]);
      }
    }
  }
  return out;
}

Volume3 refine_full(const Proposal& p_star, const Volume3& features_mod,
                    const ParamStore& ps, const OctreeConfig& cfg) {
  Octree tree = build_octree(p_star, features_mod, cfg);
  ad::Tape t;
  TapeParams tp(t, ps);
  ad::Tensor f({int(features_mod.voxels()), features_mod.channels});
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = features_mod.data[std::size_t(i)];
  auto res = refine_full_tape(t, tree, p_star.voxels, t.leaf(std::move(f)),
                              features_mod, tp, cfg);
  return root_to_volume(tree, t.value(res.final_mask), features_mod);
}

}  // namespace gleve
