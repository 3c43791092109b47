#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "gleve/objectives.hpp"
#include "gleve/proposal.hpp"

using namespace gleve;
using ad::Tape;
using ad::Tensor;
using ad::Val;

namespace {

ProposalConfig small_cfg() {
  ProposalConfig cfg;
  cfg.k_p = 3;
  cfg.quantile = 0.9;
  cfg.min_voxels = 2;
  return cfg;
}

ParamStore verifier_store(int channels, int d, std::uint64_t seed) {
  ParamStore ps;
  init_verifier_params(ps, channels, d, seed);
  return ps;
}

}  // namespace

TEST_CASE("response map: self-cosine, orthogonal query, zero features") {
  const int channels = 4;
  Tape t;
  Tensor f({3, channels});
  // voxel 0: distinctive direction; voxel 1: orthogonal; voxel 2: zero
  f[0 * 4 + 0] = 2.0;
  f[1 * 4 + 1] = 3.0;
  Tensor q({1, channels});
  q[0] = 1.0;  // aligned with voxel 0
  Val s = response_map_tape(t, t.leaf(q), t.leaf(f));
  const Tensor& sv = t.value(s);
  CHECK(sv[0] == doctest::Approx(1.0));
  CHECK(sv[1] == doctest::Approx(0.0));
  CHECK(sv[2] == doctest::Approx(0.0));  // zero-norm voxel rule
}

TEST_CASE("response map matches a per-voxel max-of-cosines oracle") {
  Rng rng(5);
  const int channels = 4, m = 3, n = 27;
  Tensor f({n, channels}), q({m, channels});
  for (auto& x : f.v) x = rng.normal();
  for (auto& x : q.v) x = rng.normal();
  Tape t;
  const Tensor& got = t.value(response_map_tape(t, t.leaf(q), t.leaf(f)));
  for (int v = 0; v < n; ++v) {
    double best = -2.0;
    for (int j = 0; j < m; ++j) {
      double dot = 0.0, nf = 0.0, nq = 0.0;
      for (int c = 0; c < channels; ++c) {
        dot += f[std::int64_t(v) * channels + c] * q[std::int64_t(j) * channels + c];
        nf += f[std::int64_t(v) * channels + c] * f[std::int64_t(v) * channels + c];
        nq += q[std::int64_t(j) * channels + c] * q[std::int64_t(j) * channels + c];
      }
      best = std::max(best, dot / std::sqrt(nf * nq));
    }
    CHECK(got[v] == doctest::Approx(best).epsilon(1e-9));
    CHECK(got[v] >= -1.0 - 1e-12);
    CHECK(got[v] <= 1.0 + 1e-12);
  }
}

TEST_CASE("response map is invariant to positive query rescaling") {
  Rng rng(6);
  const int channels = 4, m = 2, n = 16;
  Tensor f({n, channels}), q({m, channels});
  for (auto& x : f.v) x = rng.normal();
  for (auto& x : q.v) x = rng.normal();
  Tensor q_scaled = q;
  for (int c = 0; c < channels; ++c) {
    q_scaled[std::int64_t(0) * channels + c] *= 7.5;
    q_scaled[std::int64_t(1) * channels + c] *= 0.03;
  }
  Tape ta, tb;
  const Tensor& a = ta.value(response_map_tape(ta, ta.leaf(q), ta.leaf(f)));
  const Tensor& b = tb.value(response_map_tape(tb, tb.leaf(q_scaled), tb.leaf(f)));
  for (int v = 0; v < n; ++v) {
    CHECK(a[v] == doctest::Approx(b[v]).epsilon(1e-9));
  }
}

TEST_CASE("query gradients flow through the response map") {
  Rng rng(7);
  const int channels = 4, m = 2, n = 8;
  Tensor f({n, channels}), q0({m, channels});
  for (auto& x : f.v) x = rng.normal();
  for (auto& x : q0.v) x = rng.normal();

  DiffProbe probe;
  probe.value = [&](const std::vector<double>& theta) {
    Tape t;
    Val q = t.leaf(Tensor({m, channels}, theta));
    return t.scalar_value(t.sum(response_map_tape(t, q, t.leaf(f))));
  };
  probe.gradient = [&](const std::vector<double>& theta) {
    Tape t;
    Val q = t.leaf(Tensor({m, channels}, theta));
    Val loss = t.sum(response_map_tape(t, q, t.leaf(f)));
    t.backward(loss);
    return t.grad(q).v;
  };
  CHECK(grad_check(probe, q0.v, 1e-6) < 1e-4);
}

TEST_CASE("candidate generation: bright blob, constant map, equal-blob ties") {
  Volume3 like(8, 8, 8);
  ProposalConfig cfg = small_cfg();
  cfg.quantile = 0.99;  // top ~5 of 512 voxels; the blobs below cover more

  // a single bright 2x2x2 blob
  std::vector<double> s(512, 0.0);
  std::vector<std::int64_t> blob;
  for (int x = 2; x < 4; ++x)
    for (int y = 2; y < 4; ++y)
      for (int z = 2; z < 4; ++z) blob.push_back(like.vox_index(x, y, z));
  for (auto v : blob) s[std::size_t(v)] = 0.9;
  auto props = generate_candidates(s, like, 0, cfg);
  REQUIRE(props.size() == 1);
  CHECK(props[0].voxels == blob);
  CHECK(props[0].bbox.lo == std::array<int, 3>{2, 2, 2});
  CHECK(props[0].bbox.hi == std::array<int, 3>{4, 4, 4});

  // constant response map -> whole-volume component exceeds the cap
  std::vector<double> flat(512, 0.5);
  CHECK(generate_candidates(flat, like, 0, cfg).empty());

  // two identical blobs, k_p = 1 -> lower min linear index wins
  std::vector<double> twin(512, 0.0);
  std::vector<std::int64_t> first, second;
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 2; ++z) {
        first.push_back(like.vox_index(x, y, z));
        second.push_back(like.vox_index(x + 5, y + 5, z + 5));
      }
  for (auto v : first) twin[std::size_t(v)] = 0.8;
  for (auto v : second) twin[std::size_t(v)] = 0.8;
  ProposalConfig one = cfg;
  one.k_p = 1;
  auto picked = generate_candidates(twin, like, 0, one);
  REQUIRE(picked.size() == 1);
  CHECK(picked[0].voxels == first);

  // size floor: an isolated voxel at the threshold is dropped while the
  // adjacent bar survives
  std::vector<double> spike(512, 0.0);
  std::vector<std::int64_t> bar;
  for (int x = 0; x < 5; ++x) bar.push_back(like.vox_index(x, 0, 0));
  for (auto v : bar) spike[std::size_t(v)] = 0.9;
  spike[std::size_t(like.vox_index(7, 7, 7))] = 1.0;
  auto floored = generate_candidates(spike, like, 0, cfg);
  REQUIRE(floored.size() == 1);
  CHECK(floored[0].voxels == bar);
}

TEST_CASE("candidates are disjoint and above threshold") {
  Rng rng(8);
  Volume3 like(6, 6, 6);
  std::vector<double> s(216);
  for (auto& x : s) x = rng.uniform();
  ProposalConfig cfg = small_cfg();
  cfg.quantile = 0.8;
  cfg.min_voxels = 1;
  auto props = generate_candidates(s, like, 0, cfg);
  std::set<std::int64_t> seen;
  for (const auto& p : props) {
    for (auto v : p.voxels) {
      CHECK(!seen.count(v));
      seen.insert(v);
    }
  }
}

TEST_CASE("verify: singleton, overlap monotonicity, exact stat match") {
  const int channels = 3, d = 4;
  Volume3 ct(6, 6, 6);
  Volume3 soft_organ(6, 6, 6);
  Volume3 fmod(6, 6, 6, channels);
  Rng rng(9);
  for (auto& f : fmod.data) f = float(rng.normal());
  for (auto& f : ct.data) f = 30.0f;

  LesionRecord rec;
  rec.lesion_id = 0;
  rec.organ_id = 0;
  rec.reported_volume_mm3 = 8.0;
  rec.reported_mean_hu = 30.0;

  LesionQuerySet qs;
  qs.lesion_id = 0;
  qs.z.assign(d, 0.5);
  qs.queries = {std::vector<double>(d, 0.5)};

  auto make_prop = [&](int x0) {
    Proposal p;
    p.lesion_id = 0;
    for (int x = x0; x < x0 + 2; ++x)
      for (int y = 0; y < 2; ++y)
        for (int z = 0; z < 2; ++z) p.voxels.push_back(ct.vox_index(x, y, z));
    p.bbox.lo = {x0, 0, 0};
    p.bbox.hi = {x0 + 2, 2, 2};
    return p;
  };

  ParamStore ps = verifier_store(channels, d, 2026);

  // singleton -> selected 0 regardless of params
  auto [single, sel0] = verify({make_prop(0)}, qs, fmod, soft_organ, ct, rec,
                               ps, small_cfg());
  CHECK(sel0 == 0);
  CHECK(single[0].soft_assign == doctest::Approx(1.0));
  // exact stat match -> both match features equal 1
  CHECK(single[0].volume_mm3 == doctest::Approx(8.0));
  CHECK(single[0].mean_hu == doctest::Approx(30.0));

  // two candidates identical except organ overlap; eta = (1,0,0), Ws = 0
  for (auto& x : ps.get("ver.Ws").v) x = 0.0;
  ps.get("ver.eta").v = {1.0, 0.0, 0.0};
  // first candidate sits where soft organ = 1
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 2; ++z) soft_organ.at(x, y, z) = 1.0f;
  auto [scored, selected] = verify({make_prop(0), make_prop(4)}, qs, fmod,
                                   soft_organ, ct, rec, ps, small_cfg());
  CHECK(selected == 0);
  CHECK(scored[0].organ_overlap == doctest::Approx(1.0));
  CHECK(scored[1].organ_overlap == doctest::Approx(0.0));
  CHECK(scored[0].score > scored[1].score);
  CHECK(scored[0].soft_assign + scored[1].soft_assign == doctest::Approx(1.0));
}

TEST_CASE("verify throws on empty candidate list") {
  const int channels = 3, d = 4;
  Volume3 ct(4, 4, 4), soft(4, 4, 4), fmod(4, 4, 4, channels);
  LesionRecord rec;
  rec.reported_volume_mm3 = 1.0;
  LesionQuerySet qs;
  qs.z.assign(d, 0.5);
  qs.queries = {std::vector<double>(d, 0.5)};
  ParamStore ps = verifier_store(channels, d, 1);
  CHECK_THROWS_AS(verify({}, qs, fmod, soft, ct, rec, ps, small_cfg()),
                  DataError);
}

TEST_CASE("unimodality loss closed forms") {
  ProposalConfig cfg;
  cfg.tau = 0.5;
  cfg.eps = 1e-8;

  // singleton: p = 1, contribution ~ 0
  auto single = unimodality_loss({{2.3}}, cfg.tau, cfg.eps);
  CHECK(single.loss == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(single.soft_assigns[0][0] == doctest::Approx(1.0));

  // equal scores over 4 candidates: contribution = ln 4
  auto uniform = unimodality_loss({{1.0, 1.0, 1.0, 1.0}}, cfg.tau, cfg.eps);
  CHECK(uniform.loss == doctest::Approx(std::log(4.0)).epsilon(1e-6));

  // tau -> 0 with distinct scores: contribution -> 0
  auto sharp = unimodality_loss({{1.0, 0.5, 0.0}}, 1e-3, cfg.eps);
  CHECK(sharp.loss < 1e-6);

  // sums over lesions
  auto both = unimodality_loss({{1.0, 1.0}, {0.3}}, cfg.tau, cfg.eps);
  CHECK(both.loss == doctest::Approx(std::log(2.0)).epsilon(1e-5));
}

TEST_CASE("score shift invariance of assigns and selection") {
  const int channels = 3, d = 4;
  Rng rng(12);
  Volume3 ct(6, 6, 6), soft(6, 6, 6), fmod(6, 6, 6, channels);
  for (auto& f : fmod.data) f = float(rng.normal());
  for (auto& f : soft.data) f = float(rng.uniform());
  for (auto& f : ct.data) f = float(20.0 + 10.0 * rng.uniform());

  LesionRecord rec;
  rec.reported_volume_mm3 = 6.0;
  rec.reported_mean_hu = 25.0;
  LesionQuerySet qs;
  qs.z.assign(d, 0.3);
  qs.queries = {std::vector<double>(d, 0.3)};

  std::vector<Proposal> props;
  for (int x0 : {0, 2, 4}) {
    Proposal p;
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 3; ++z) p.voxels.push_back(ct.vox_index(x0, y, z));
    p.bbox.lo = {x0, 0, 0};
    p.bbox.hi = {x0 + 1, 2, 3};
    props.push_back(p);
  }

  ParamStore ps = verifier_store(channels, d, 7);
  auto [scored, selected] = verify(props, qs, fmod, soft, ct, rec, ps,
                                   small_cfg());
  std::vector<std::vector<double>> shifted{{}};
  std::vector<std::vector<double>> base{{}};
  for (const auto& p : scored) {
    base[0].push_back(p.score);
    shifted[0].push_back(p.score + 3.7);
  }
  auto r1 = unimodality_loss(base, 0.5, 1e-8);
  auto r2 = unimodality_loss(shifted, 0.5, 1e-8);
  CHECK(r1.loss == doctest::Approx(r2.loss).epsilon(1e-9));
  for (std::size_t i = 0; i < r1.soft_assigns[0].size(); ++i) {
    CHECK(r1.soft_assigns[0][i] ==
          doctest::Approx(r2.soft_assigns[0][i]).epsilon(1e-9));
  }
  int best_base = 0, best_shift = 0;
  for (int i = 1; i < int(base[0].size()); ++i) {
    if (base[0][std::size_t(i)] > base[0][std::size_t(best_base)]) best_base = i;
    if (shifted[0][std::size_t(i)] > shifted[0][std::size_t(best_shift)]) best_shift = i;
  }
  CHECK(best_base == best_shift);
  CHECK(best_base == selected);
}

TEST_CASE("gradient through verifier scores and entropy") {
  const int channels = 3, d = 4;
  Rng rng(13);
  Volume3 ct(6, 6, 6), soft(6, 6, 6), fmod(6, 6, 6, channels);
  for (auto& f : fmod.data) f = float(rng.normal());
  for (auto& f : soft.data) f = float(rng.uniform());
  for (auto& f : ct.data) f = float(25.0 + 5.0 * rng.uniform());

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

  ProposalConfig pcfg = small_cfg();
  Tensor z0({1, d});
  Rng zr(14);
  for (auto& x : z0.v) x = zr.normal();

  for (std::uint64_t seed : {3ull, 4ull, 5ull}) {
    ParamStore ps = verifier_store(channels, d, seed);
    Rng wr(seed);
    for (auto& x : ps.get("ver.Ws").v) x = 0.5 * wr.normal();

    // probe: L_uni + sum of scores, differentiated w.r.t. Ws and eta
    auto loss_of = [&](const ParamStore& store, ad::Tape& t,
                       const TapeParams& tp) {
      std::vector<Proposal> work = props;
      Tensor fm({216, channels});
      for (std::int64_t i = 0; i < fm.numel(); ++i) fm[i] = fmod.data[std::size_t(i)];
      auto ver = verify_tape(t, work, t.leaf(z0), t.leaf(fm), soft, ct, rec,
                             tp, pcfg);
      Val uni = unimodality_tape(t, {ver.score_vec}, pcfg);
      (void)store;
      return t.add(uni, t.sum(ver.score_vec));
    };

    DiffProbe probe;
    probe.value = [&](const std::vector<double>& theta) {
      ParamStore store = ps;
      store.unflatten(theta);
      ad::Tape t;
      TapeParams tp(t, store);
      return t.scalar_value(loss_of(store, t, tp));
    };
    probe.gradient = [&](const std::vector<double>& theta) {
      ParamStore store = ps;
      store.unflatten(theta);
      ad::Tape t;
      TapeParams tp(t, store);
      Val loss = loss_of(store, t, tp);
      t.backward(loss);
      std::vector<double> grad;
      for (const std::string& name : store.names()) {
        const Tensor& gg = tp.grad(name);
        grad.insert(grad.end(), gg.v.begin(), gg.v.end());
      }
      return grad;
    };
    CHECK(grad_check(probe, ps.flatten(), 1e-5) < 1e-4);
  }
}
