// Acceptance suite: every criterion prints one [PASS]/[FAIL] line. The
// phantom experiments run the full pipeline end to end at desk scale.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <queue>
#include <set>

#include "gleve/pipeline.hpp"

using namespace gleve;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "[PASS] " : "[FAIL] ") << name << " — " << detail
            << std::endl;
  CHECK_MESSAGE(pass, (name + ": " + detail));
}

// --- independent oracles -------------------------------------------------

std::vector<std::set<std::int64_t>> bfs_components(const Mask3& m, int conn) {
  std::vector<std::set<std::int64_t>> comps;
  std::vector<char> seen(std::size_t(m.voxels()), 0);
  for (std::int64_t s = 0; s < m.voxels(); ++s) {
    if (!m.data[std::size_t(s)] || seen[std::size_t(s)]) continue;
    std::set<std::int64_t> comp;
    std::queue<std::int64_t> q;
    q.push(s);
    seen[std::size_t(s)] = 1;
    while (!q.empty()) {
      const std::int64_t cur = q.front();
      q.pop();
      comp.insert(cur);
      const int z = int(cur % m.nz);
      const int y = int((cur / m.nz) % m.ny);
      const int x = int(cur / (std::int64_t(m.ny) * m.nz));
      for (int dx = -1; dx <= 1; ++dx)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dz = -1; dz <= 1; ++dz) {
            const int man = std::abs(dx) + std::abs(dy) + std::abs(dz);
            if (man == 0) continue;
            if (conn == 6 && man > 1) continue;
            if (conn == 18 && man > 2) continue;
            const int px = x + dx, py = y + dy, pz = z + dz;
            if (px < 0 || px >= m.nx || py < 0 || py >= m.ny || pz < 0 ||
                pz >= m.nz)
              continue;
            const std::int64_t ni = m.vox_index(px, py, pz);
            if (m.data[std::size_t(ni)] && !seen[std::size_t(ni)]) {
              seen[std::size_t(ni)] = 1;
              q.push(ni);
            }
          }
    }
    comps.push_back(std::move(comp));
  }
  return comps;
}

double hd95_all_pairs(const Mask3& a, const Mask3& b) {
  const Mask3 ba = boundary_voxels(a);
  const Mask3 bb = boundary_voxels(b);
  std::vector<std::array<double, 3>> pa, pb;
  auto collect = [](const Mask3& m, std::vector<std::array<double, 3>>& out) {
    for (int x = 0; x < m.nx; ++x)
      for (int y = 0; y < m.ny; ++y)
        for (int z = 0; z < m.nz; ++z)
          if (m.at(x, y, z))
            out.push_back({x * double(m.sx), y * double(m.sy), z * double(m.sz)});
  };
  collect(ba, pa);
  collect(bb, pb);
  auto min_dist = [](const std::array<double, 3>& p,
                     const std::vector<std::array<double, 3>>& set) {
    double best = 1e300;
    for (const auto& q : set) {
      best = std::min(best, (p[0] - q[0]) * (p[0] - q[0]) +
                                (p[1] - q[1]) * (p[1] - q[1]) +
                                (p[2] - q[2]) * (p[2] - q[2]));
    }
    return std::sqrt(best);
  };
  std::vector<double> dists;
  for (const auto& p : pa) dists.push_back(min_dist(p, pb));
  for (const auto& p : pb) dists.push_back(min_dist(p, pa));
  return percentile_type7(std::move(dists), 0.95);
}

Mask3 random_mask(int n, double density, Rng& rng, float sx = 1.0f,
                  float sy = 1.0f, float sz = 1.0f) {
  Mask3 m(n, n, n, sx, sy, sz);
  for (auto& v : m.data) v = rng.uniform() < density ? 1 : 0;
  return m;
}

double check_store(const ParamStore& ps,
                   const std::function<ad::Val(ad::Tape&, const TapeParams&)>&
                       build) {
  DiffProbe probe;
  probe.value = [&](const std::vector<double>& theta) {
    ParamStore store = ps;
    store.unflatten(theta);
    ad::Tape t;
    TapeParams tp(t, store);
    return t.scalar_value(build(t, tp));
  };
  probe.gradient = [&](const std::vector<double>& theta) {
    ParamStore store = ps;
    store.unflatten(theta);
    ad::Tape t;
    TapeParams tp(t, store);
    ad::Val loss = build(t, tp);
    t.backward(loss);
    std::vector<double> grad;
    for (const std::string& name : store.names()) {
      const ad::Tensor& g = tp.grad(name);
      grad.insert(grad.end(), g.v.begin(), g.v.end());
    }
    return grad;
  };
  return grad_check(probe, ps.flatten(), 1e-5);
}

// Training configuration for the phantom experiments. The config default
// keeps the full-scale learning rate; a few-hundred-step desk session needs
// a larger one to move the randomly initialized heads.
PipelineConfig experiment_config() {
  PipelineConfig cfg;
  cfg.optim.lr = 3e-3;
  return cfg;
}

std::vector<LoadedCase> cases_from_specs(const std::vector<PhantomSpec>& specs) {
  std::vector<LoadedCase> cases;
  for (const PhantomSpec& spec : specs) {
    PhantomCase c = generate(spec);
    LoadedCase lc;
    lc.case_id = c.spec.case_id;
    lc.ct = c.ct;
    for (const PhantomOrgan& o : c.spec.organs) lc.organ_ids.push_back(o.organ_id);
    lc.organ_masks = c.organ_masks;
    lc.lesion_masks = c.lesion_masks;
    lc.report = c.report;
    lc.has_mask = c.spec.has_mask;
    cases.push_back(std::move(lc));
  }
  return cases;
}

Mask3 predict_union(const LoadedCase& c, const GroundingResult& g,
                    const PipelineConfig& cfg) {
  Mask3 pred(c.ct.nx, c.ct.ny, c.ct.nz, c.ct.sx, c.ct.sy, c.ct.sz);
  for (const LesionGrounding& lg : g.lesions) {
    Mask3 bin = threshold_mask(lg.final_mask, cfg.pred_threshold);
    for (std::int64_t i = 0; i < pred.voxels(); ++i) {
      pred.data[std::size_t(i)] |= bin.data[std::size_t(i)];
    }
  }
  return pred;
}

}  // namespace

TEST_CASE("oracle equivalence") {
  const auto t0 = Clock::now();

  {
    Rng rng(1001);
    bool ok = true;
    const int conns[3] = {6, 18, 26};
    for (int trial = 0; trial < 200 && ok; ++trial) {
      Mask3 m = random_mask(6, 0.25 + 0.4 * rng.uniform(), rng);
      const int conn = conns[trial % 3];
      auto got = connected_components(m, conn);
      auto expect = bfs_components(m, conn);
      if (got.size() != expect.size()) {
        ok = false;
        break;
      }
      std::set<std::set<std::int64_t>> gs, es;
      for (auto& c : got) gs.insert(std::set<std::int64_t>(c.begin(), c.end()));
      for (auto& c : expect) es.insert(std::move(c));
      ok = gs == es;
    }
    report("oracle: connected components vs BFS", ok, "200 masks, exact");
  }

  {
    Rng rng(1002);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 2 + rng.uniform_int(0, 4);
      std::vector<std::vector<double>> cost(
          static_cast<std::size_t>(n),
          std::vector<double>(static_cast<std::size_t>(n)));
      for (auto& row : cost)
        for (double& c : row) c = 2.0 * rng.uniform() - 1.0;
      auto assign = hungarian(cost);
      double got = 0.0;
      for (int i = 0; i < n; ++i)
        got += cost[std::size_t(i)][std::size_t(assign[std::size_t(i)])];
      std::vector<int> perm(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) perm[std::size_t(i)] = i;
      double best = 1e300;
      do {
        double tot = 0.0;
        for (int i = 0; i < n; ++i)
          tot += cost[std::size_t(i)][std::size_t(perm[std::size_t(i)])];
        best = std::min(best, tot);
      } while (std::next_permutation(perm.begin(), perm.end()));
      worst = std::max(worst, std::abs(got - best));
    }
    report("oracle: Hungarian vs permutation brute force", worst <= 1e-9,
           "200 instances, max deviation " + std::to_string(worst));
  }

  {
    Rng rng(1003);
    double worst = 0.0;
    int done = 0;
    while (done < 50) {
      const float sx = done % 2 ? 0.8f : 1.0f;
      const float sz = done % 3 ? 1.0f : 2.0f;
      Mask3 a = random_mask(6, 0.35, rng, sx, 1.0f, sz);
      Mask3 b = random_mask(6, 0.35, rng, sx, 1.0f, sz);
      if (a.count() == 0 || b.count() == 0) continue;
      worst = std::max(worst, std::abs(hd95(a, b) - hd95_all_pairs(a, b)));
      ++done;
    }
    report("oracle: HD95 vs all-pairs boundary", worst <= 1e-9,
           "50 instances, max deviation " + std::to_string(worst));
  }

  {
    Volume3 like(32, 32, 32);
    OctreeConfig ocfg;
    ocfg.activity_threshold = 0.0;
    const int channels = 3;
    double worst = 0.0;
    for (std::uint64_t seed : {41ull, 42ull, 43ull}) {
      ParamStore ps;
      init_refine_params(ps, channels, seed);
      Rng rng(seed);
      for (auto& x : ps.get("oc.conv2_K").v) x = 0.3 * rng.normal();
      for (auto& x : ps.get("oc.conv2_b").v) x = 0.1 * rng.normal();

      Proposal p;
      for (int x = 13; x < 17; ++x)
        for (int y = 14; y < 18; ++y)
          for (int z = 12; z < 16; ++z)
            p.voxels.push_back(like.vox_index(x, y, z));
      std::sort(p.voxels.begin(), p.voxels.end());
      p.bbox.lo = {13, 14, 12};
      p.bbox.hi = {17, 18, 16};
      Octree tree = build_octree(p, like, ocfg);

      ad::Tape t;
      TapeParams tp(t, ps);
      Rng fr(seed + 9);
      ad::Tensor feats({int(like.voxels()), channels});
      for (auto& x : feats.v) x = fr.normal();
      auto res = refine_full_tape(t, tree, p.voxels, t.leaf(feats), like, tp,
                                  ocfg);

      // monolithic: the head applied over the whole level grid
      ad::Val fsp = t.reshape(t.transpose(t.leaf(feats)),
                              {channels, like.nx, like.ny, like.nz});
      ad::Val froot = t.crop3(fsp, tree.root_lo,
                              {tree.root_edge, tree.root_edge, tree.root_edge});
      std::vector<ad::Val> pyr(std::size_t(tree.depth) + 1);
      pyr[std::size_t(tree.depth)] = froot;
      for (int l = tree.depth - 1; l >= 0; --l)
        pyr[std::size_t(l)] = t.avgpool2(pyr[std::size_t(l) + 1]);
      ad::Val prev = t.leaf(level0_mask(tree, p.voxels, like));
      for (int l = 1; l <= tree.depth; ++l) {
        ad::Val up = t.upsample2(prev);
        const int g = tree.grid_edge(l);
        ad::Val x = t.reshape(t.concat(pyr[std::size_t(l)], up),
                              {channels + 1, g, g, g});
        ad::Val h1 = t.tanh_(t.conv3d(x, tp["oc.conv1_K"], tp["oc.conv1_b"]));
        ad::Val logits = t.conv3d(h1, tp["oc.conv2_K"], tp["oc.conv2_b"]);
        prev = t.sigmoid_(t.add(logits, t.logit_(up, ocfg.logit_eps)));
      }
      const ad::Tensor& mono = t.value(prev);
      const ad::Tensor& tiled = t.value(res.final_mask);
      for (std::int64_t i = 0; i < mono.numel(); ++i)
        worst = std::max(worst, std::abs(mono[i] - tiled[i]));
    }
    report("oracle: octree tiled vs monolithic", worst <= 1e-5,
           "3 seeds, max abs deviation " + std::to_string(worst));
  }

  const double secs = seconds_since(t0);
  report("oracle suite runtime", secs < 60.0,
         std::to_string(secs) + " s (< 60 s)");
}

TEST_CASE("gradient suite") {
  const auto t0 = Clock::now();
  const std::uint64_t seeds[10] = {101, 102, 103, 104, 105,
                                   106, 107, 108, 109, 110};

  {
    ReportDoc doc = parse_report(
        "case g\norgan 0 liver background_hu=55\norgan 1 kidney "
        "background_hu=30\n"
        "lesion 0 organ=liver loc=upper volume_mm3=500 hu=35\n"
        "lesion 1 organ=liver loc=lower volume_mm3=9000 hu=90\n"
        "lesion 2 organ=kidney loc=mid volume_mm3=300 hu=20\n");
    SemanticGraph g = build_graph(doc);
    GraphConfig gc;
    gc.d = 8;
    gc.d_r = 4;
    gc.layers = 2;
    gc.num_queries = 2;
    double worst = 0.0;
    for (std::uint64_t seed : seeds) {
      ParamStore ps;
      GraphConfig c2 = gc;
      c2.seed = seed;
      init_graph_params(ps, c2, 4);
      Rng rng(seed);
      for (auto& x : ps.get("graph.l0.ffn.W2").v) x = 0.3 * rng.normal();
      for (auto& x : ps.get("graph.l1.ffn.W2").v) x = 0.3 * rng.normal();
      worst = std::max(worst,
                       check_store(ps, [&](ad::Tape& t, const TapeParams& tp) {
                         return t.sum(run_graph_layers(t, g, tp, c2));
                       }));
    }
    report("gradients: graph attention layers", worst < 1e-4,
           "10 seeds, max rel err " + std::to_string(worst));
  }

  {
    AnatomyConfig ac;
    ac.d_e = 4;
    ac.channels = 3;
    ac.max_organs = 4;
    const int n = 2;
    Rng fr(77);
    Volume3 soft_a(n, n, n), soft_b(n, n, n);
    for (auto& f : soft_a.data) f = float(0.5 + 0.4 * fr.uniform());
    for (auto& f : soft_b.data) f = float(0.4 * fr.uniform());
    ad::Tensor feats({n * n * n, ac.channels});
    for (auto& f : feats.v) f = fr.normal();
    double worst = 0.0;
    for (std::uint64_t seed : seeds) {
      ParamStore ps;
      AnatomyConfig c2 = ac;
      c2.seed = seed;
      init_anatomy_params(ps, c2);
      Rng rng(seed);
      for (auto& x : ps.get("an.psi_W2").v) x = 0.4 * rng.normal();
      for (auto& x : ps.get("an.psi_b2").v) x = 0.2 * rng.normal();
      worst = std::max(
          worst, check_store(ps, [&](ad::Tape& t, const TapeParams& tp) {
            ad::Val soft = t.leaf(soft_map_matrix({soft_a, soft_b}));
            ad::Val e = anatomy_token_tape(t, soft, {0, 2}, tp);
            ad::Val f = film_modulate_tape(t, t.leaf(feats), e, tp, c2);
            return t.sum(t.mul(f, t.tanh_(f)));
          }));
    }
    report("gradients: FiLM modulation", worst < 1e-4,
           "10 seeds, max rel err " + std::to_string(worst));
  }

  {
    const int channels = 3, d = 4;
    Rng fr(88);
    Volume3 ct(6, 6, 6), soft(6, 6, 6), fmod(6, 6, 6, channels);
    for (auto& f : fmod.data) f = float(fr.normal());
    for (auto& f : soft.data) f = float(fr.uniform());
    for (auto& f : ct.data) f = float(25.0 + 5.0 * fr.uniform());
    LesionRecord rec;
    rec.reported_volume_mm3 = 6.0;
    rec.reported_mean_hu = 25.0;
    std::vector<Proposal> props;
    for (int x0 : {0, 3}) {
      Proposal p;
      for (int y = 0; y < 2; ++y)
        for (int z = 0; z < 3; ++z) p.voxels.push_back(ct.vox_index(x0, y, z));
      p.bbox.lo = {x0, 0, 0};
      p.bbox.hi = {x0 + 1, 2, 3};
      props.push_back(p);
    }
    ProposalConfig pc;
    ad::Tensor z0({1, d});
    Rng zr(89);
    for (auto& x : z0.v) x = zr.normal();
    ad::Tensor fm({216, channels});
    for (std::int64_t i = 0; i < fm.numel(); ++i) fm[i] = fmod.data[std::size_t(i)];

    double worst = 0.0;
    for (std::uint64_t seed : seeds) {
      ParamStore ps;
      init_verifier_params(ps, channels, d, seed);
      Rng rng(seed);
      for (auto& x : ps.get("ver.Ws").v) x = 0.5 * rng.normal();
      worst = std::max(
          worst, check_store(ps, [&](ad::Tape& t, const TapeParams& tp) {
            std::vector<Proposal> work = props;
            auto ver = verify_tape(t, work, t.leaf(z0), t.leaf(fm), soft, ct,
                                   rec, tp, pc);
            ad::Val uni = unimodality_tape(t, {ver.score_vec}, pc);
            return t.add(uni, t.sum(ver.score_vec));
          }));
    }
    report("gradients: verifier + entropy", worst < 1e-4,
           "10 seeds, max rel err " + std::to_string(worst));
  }

  {
    Volume3 like(8, 8, 8);
    OctreeConfig ocfg;
    ocfg.margin = 1;
    const int channels = 2;
    Proposal p;
    for (int x = 3; x < 6; ++x)
      for (int y = 3; y < 6; ++y)
        for (int z = 3; z < 6; ++z) p.voxels.push_back(like.vox_index(x, y, z));
    std::sort(p.voxels.begin(), p.voxels.end());
    p.bbox.lo = {3, 3, 3};
    p.bbox.hi = {6, 6, 6};
    double worst = 0.0;
    for (std::uint64_t seed : seeds) {
      ParamStore ps;
      init_refine_params(ps, channels, seed);
      Rng rng(seed);
      for (auto& x : ps.get("oc.conv2_K").v) x = 0.3 * rng.normal();
      for (auto& x : ps.get("oc.conv2_b").v) x = 0.1 * rng.normal();
      Octree tree = build_octree(p, like, ocfg);
      Rng fr2(seed + 7);
      ad::Tensor feats({int(like.voxels()), channels});
      for (auto& x : feats.v) x = fr2.normal();
      worst = std::max(
          worst, check_store(ps, [&](ad::Tape& t, const TapeParams& tp) {
            auto res = refine_full_tape(t, tree, p.voxels, t.leaf(feats), like,
                                        tp, ocfg);
            return t.sum(res.final_mask);
          }));
    }
    report("gradients: octree refinement head", worst < 1e-4,
           "10 seeds, max rel err " + std::to_string(worst));
  }

  {
    const int n = 3;
    double worst = 0.0;
    for (std::uint64_t seed : seeds) {
      Rng rng(seed);
      ad::Tensor gt({n * n * n}), organ({n * n * n}), hu({n * n * n});
      for (auto& x : gt.v) x = rng.uniform() < 0.4 ? 1.0 : 0.0;
      for (auto& x : organ.v) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
      for (auto& x : hu.v) x = 30.0 + 5.0 * rng.normal();
      std::vector<double> p0(std::size_t(n * n * n));
      for (auto& x : p0) x = 0.1 + 0.8 * rng.uniform();

      auto build = [&](ad::Tape& t, ad::Val p) {
        ad::Val seg = seg_loss_tape(t, p, t.leaf(gt), 1e-8);
        ad::Val org = org_loss_tape(t, p, t.leaf(organ), 1e-8);
        ad::Val vol = soft_volume_tape(t, p, 1.5);
        ad::Val mu = soft_mean_hu_tape(t, p, t.leaf(hu), 1e-8);
        ad::Val attr = attr_loss_tape(t, vol, mu, 20.0, 32.0, 1e-8);
        return t.add(t.add(seg, org), attr);
      };
      DiffProbe probe;
      probe.value = [&](const std::vector<double>& th) {
        ad::Tape t;
        ad::Val p = t.leaf(ad::Tensor({n * n * n}, th));
        return t.scalar_value(build(t, p));
      };
      probe.gradient = [&](const std::vector<double>& th) {
        ad::Tape t;
        ad::Val p = t.leaf(ad::Tensor({n * n * n}, th));
        ad::Val loss = build(t, p);
        t.backward(loss);
        return t.grad(p).v;
      };
      worst = std::max(worst, grad_check(probe, p0, 1e-6));
    }
    report("gradients: weak-supervision losses", worst < 1e-4,
           "10 seeds, max rel err " + std::to_string(worst));
  }

  const double secs = seconds_since(t0);
  report("gradient suite runtime", secs < 120.0,
         std::to_string(secs) + " s (< 120 s)");
}

TEST_CASE("closed-form loss values") {
  const int k_p = 5;
  auto uni = unimodality_loss({std::vector<double>(std::size_t(k_p), 0.7)},
                              0.5, 1e-8);
  const double err_uni = std::abs(uni.loss - std::log(double(k_p)));
  report("closed form: uniform-score unimodality = ln K_p", err_uni <= 1e-6,
         "deviation " + std::to_string(err_uni));

  const double attr = attr_loss(2.0 * 480.0, 35.0, 480.0, 35.0, 1e-8);
  report("closed form: attr loss for V = 2Vr", std::abs(attr - 1.0) <= 1e-6,
         "value " + std::to_string(attr));

  MatchResult m;
  m.n_gt = 1;
  m.n_matched = 1;
  m.pairs = {{0, 0, 0.5, 20.0}};
  const double val = lls(m, 20.0);
  const double err_lls = std::abs(val - 0.5 * std::exp(-1.0));
  report("closed form: LLS = 0.5 e^-1", err_lls <= 1e-9,
         "deviation " + std::to_string(err_lls));
}

TEST_CASE("metric bounds and relations") {
  Rng rng(3001);
  bool sym_ok = true, range_ok = true, rel_ok = true, mono_ok = true;
  for (int trial = 0; trial < 500; ++trial) {
    Mask3 a = random_mask(5, 0.2 + 0.5 * rng.uniform(), rng);
    Mask3 b = random_mask(5, 0.2 + 0.5 * rng.uniform(), rng);
    const double d1 = dice(a, b);
    const double d2 = dice(b, a);
    sym_ok = sym_ok && d1 == d2;
    range_ok = range_ok && d1 >= 0.0 && d1 <= 1.0;
    if (a.count() > 0) {
      MatchResult m = match_lesions(a, b, 26);
      rel_ok = rel_ok && lls(m, 20.0) <= lesion_recall(m) + 1e-12;
      if (m.n_matched > 0) {
        MatchResult far = m;
        far.pairs[0].centroid_dist_mm += 1.0 + 10.0 * rng.uniform();
        mono_ok = mono_ok && lls(far, 20.0) < lls(m, 20.0);
      }
    }
  }
  report("metrics: dice symmetric and in [0,1]", sym_ok && range_ok,
         "500 random pairs");
  report("metrics: LLS <= LR", rel_ok, "500 random pairs");
  report("metrics: LLS monotone in centroid distance", mono_ok,
         "500 random pairs");
}

TEST_CASE("end-to-end phantom experiment") {
  const auto t0 = Clock::now();
  PipelineConfig cfg = experiment_config();
  auto easy = cases_from_specs(suite("easy", cfg.seed));
  TrainResult res = train(easy, cfg, 500);
  const double secs = seconds_since(t0);

  const EvalPoint first = res.eval_trace.front();
  const EvalPoint last = res.eval_trace.back();
  report("e2e: easy-suite runtime", secs < 600.0,
         std::to_string(secs) + " s (< 600 s)");
  report("e2e: final eval LR >= 0.9", last.lr_metric >= 0.9,
         "LR " + std::to_string(last.lr_metric));
  report("e2e: eval LR does not regress", last.lr_metric >= first.lr_metric,
         std::to_string(first.lr_metric) + " -> " +
             std::to_string(last.lr_metric));
  report("e2e: eval LLS does not regress", last.lls_metric >= first.lls_metric,
         std::to_string(first.lls_metric) + " -> " +
             std::to_string(last.lls_metric));

  auto multi = cases_from_specs(suite("multi", cfg.seed));
  TrainResult mres = train(multi, cfg, 400);
  int have = 0, correct = 0;
  for (const LoadedCase& c : multi) {
    GroundingResult g = ground(c, mres.params, cfg);
    for (const LesionGrounding& lg : g.lesions) {
      if (lg.fallback) continue;
      const Mask3& gt = c.lesion_masks[std::size_t(lg.lesion_id)];
      int best = -1;
      std::int64_t best_ov = 0;
      for (int k = 0; k < int(lg.proposals.size()); ++k) {
        std::int64_t ov = 0;
        for (std::int64_t v : lg.proposals[std::size_t(k)].voxels)
          ov += gt.data[std::size_t(v)];
        if (ov > best_ov) {
          best_ov = ov;
          best = k;
        }
      }
      if (best >= 0) {
        ++have;
        if (lg.selected == best) ++correct;
      }
    }
  }
  const double acc = have > 0 ? double(correct) / double(have) : 0.0;
  report("e2e: multi-suite verification accuracy >= 0.8",
         acc >= 0.8 && have > 0,
         std::to_string(correct) + "/" + std::to_string(have) + " = " +
             std::to_string(acc));
}

TEST_CASE("ablation smoke: removing refinement does not improve HD95") {
  PipelineConfig cfg = experiment_config();
  auto small = cases_from_specs(suite("small", cfg.seed));
  TrainResult res = train(small, cfg, 800);

  PipelineConfig off = cfg;
  off.ocre_off = true;
  double hd_full = 0.0, hd_off = 0.0;
  int counted = 0, empty = 0;
  for (const LoadedCase& c : small) {
    Mask3 gt = union_gt(c);
    Mask3 pf = predict_union(c, ground(c, res.params, cfg), cfg);
    Mask3 po = predict_union(c, ground(c, res.params, off), off);
    if (gt.count() == 0 || pf.count() == 0 || po.count() == 0) {
      ++empty;
      continue;
    }
    hd_full += hd95(gt, pf);
    hd_off += hd95(gt, po);
    ++counted;
  }
  const bool ok = counted > 0 && hd_off >= hd_full - 1e-9;
  report("ablation: mean HD95 without refinement >= full pipeline", ok,
         "full " + std::to_string(counted ? hd_full / counted : -1.0) +
             " mm vs off " + std::to_string(counted ? hd_off / counted : -1.0) +
             " mm over " + std::to_string(counted) + " cases (" +
             std::to_string(empty) + " skipped: empty mask)");
}

TEST_CASE("determinism: bit-identical artifacts across runs") {
  namespace fs = std::filesystem;
  auto run_once = [](const std::string& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    PipelineConfig cfg = experiment_config();
    cfg.set_seed(2026);
    auto cases = cases_from_specs(suite("easy", cfg.seed));
    TrainResult res = train(cases, cfg, 120);
    res.params.save(dir + "/ckpt.bin");
    std::ofstream(dir + "/loss.csv") << res.loss_csv;
    std::vector<CaseEval> evals;
    std::vector<LoadedCase> used;
    for (int i = 8; i < 10; ++i) {
      GroundingResult g = ground(cases[std::size_t(i)], res.params, cfg);
      write_grounding(g, cases[std::size_t(i)], cfg,
                      dir + "/" + cases[std::size_t(i)].case_id);
      Mask3 pred = predict_union(cases[std::size_t(i)], g, cfg);
      evals.push_back(evaluate_case(cases[std::size_t(i)], pred, cfg));
      used.push_back(cases[std::size_t(i)]);
    }
    std::ofstream(dir + "/metrics.json") << eval_report_json(evals, used);
  };
  run_once("acc_det_run1");
  run_once("acc_det_run2");

  auto file_bytes = [](const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
  };
  bool identical = true;
  std::vector<std::string> rel;
  for (const auto& entry : fs::recursive_directory_iterator("acc_det_run1")) {
    if (entry.is_regular_file()) {
      rel.push_back(fs::relative(entry.path(), "acc_det_run1").string());
    }
  }
  std::sort(rel.begin(), rel.end());
  for (const std::string& r : rel) {
    if (file_bytes("acc_det_run1/" + r) != file_bytes("acc_det_run2/" + r)) {
      identical = false;
      std::cout << "  mismatch: " << r << "\n";
    }
  }
  report("determinism: checkpoints, masks and metrics JSON",
         identical && !rel.empty(),
         std::to_string(rel.size()) + " files compared bit-for-bit");
  fs::remove_all("acc_det_run1");
  fs::remove_all("acc_det_run2");
}

TEST_CASE("fuzz: report parser survives random bytes") {
  Rng rng(2026);
  const std::string seed_doc =
      "case fz\norgan 0 liver background_hu=55\n"
      "lesion 0 organ=liver loc=upper volume_mm3=4200 hu=35 :: nodule\n";
  int structured = 0, parsed = 0;
  for (int trial = 0; trial < 100000; ++trial) {
    std::string input;
    if (trial % 3 == 0) {
      input = seed_doc;
      const int edits = 1 + rng.uniform_int(0, 5);
      for (int e = 0; e < edits; ++e) {
        input[std::size_t(rng.uniform_int(0, int(input.size()) - 1))] =
            char(rng.uniform_int(0, 255));
      }
    } else {
      const int len = rng.uniform_int(0, 160);
      input.reserve(std::size_t(len));
      for (int i = 0; i < len; ++i)
        input.push_back(char(rng.uniform_int(0, 255)));
    }
    try {
      ReportDoc doc = parse_report(input);
      doc.validate();
      ++parsed;
    } catch (const ParseError&) {
      ++structured;
    } catch (const DataError&) {
      ++structured;
    }
  }
  report("fuzz: 1e5 random inputs, structured outcomes only",
         structured + parsed == 100000,
         std::to_string(parsed) + " parsed, " + std::to_string(structured) +
             " structured errors");
}
