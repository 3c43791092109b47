#include "gleve/proposal.hpp"

#include <algorithm>
#include <cmath>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

double quantile_type7(std::vector<double> xs, double q) {
  std::sort(xs.begin(), xs.end());
  const double h = (double(xs.size()) - 1.0) * q;
  const std::size_t lo = std::size_t(std::floor(h));
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (h - double(lo)) * (xs[hi] - xs[lo]);
}

BBox3 tight_bbox(const std::vector<std::int64_t>& voxels, const Volume3& like) {
  BBox3 b;
  b.lo = {like.nx, like.ny, like.nz};
  b.hi = {0, 0, 0};
  for (std::int64_t v : voxels) {
    const int z = int(v % like.nz);
    const int y = int((v / like.nz) % like.ny);
    const int x = int(v / (std::int64_t(like.ny) * like.nz));
    b.lo = {std::min(b.lo[0], x), std::min(b.lo[1], y), std::min(b.lo[2], z)};
    b.hi = {std::max(b.hi[0], x + 1), std::max(b.hi[1], y + 1),
            std::max(b.hi[2], z + 1)};
  }
  return b;
}

}  // namespace

void init_verifier_params(ParamStore& ps, int feature_channels, int d,
                          std::uint64_t seed) {
  ps.emplace_gaussian("ver.Ws", {feature_channels + d, 1},
                      0.1 / std::sqrt(double(feature_channels + d)), seed);
  // evidence features are already [0,1]-scaled and higher-is-better
  ps.emplace_const("ver.eta", {3}, 1.0);
}

ad::Val response_map_tape(ad::Tape& t, ad::Val queries_proj,
                          ad::Val features) {
  const ad::Tensor& q = t.value(queries_proj);
  const ad::Tensor& f = t.value(features);
  if (q.cols() != f.cols()) {
    throw NumericError("response_map: query/feature channel mismatch");
  }
  const int m = q.rows();
  const std::int64_t v = f.rows();

  ad::Tensor guard_f({int(v)});
  for (auto& x : guard_f.v) x = 1e-12;
  ad::Tensor guard_q({m});
  for (auto& x : guard_q.v) x = 1e-12;

  ad::Val fnorm = t.sqrt_(t.row_sum(t.mul(features, features)));
  ad::Val finv = t.div(t.leaf(ad::Tensor({int(v)}, std::vector<double>(std::size_t(v), 1.0))),
                       t.maximum(fnorm, t.leaf(guard_f)));
  ad::Val qnorm = t.sqrt_(t.row_sum(t.mul(queries_proj, queries_proj)));
  ad::Val qinv = t.div(t.leaf(ad::Tensor({m}, std::vector<double>(std::size_t(m), 1.0))),
                       t.maximum(qnorm, t.leaf(guard_q)));

  // raw dot products {V, M}, then scale rows by 1/|f| and columns by 1/|q|
  ad::Val dots = t.matmul(features, t.transpose(queries_proj));
  ad::Val byf = t.scale_rows(dots, finv);
  ad::Val all = t.transpose(t.scale_rows(t.transpose(byf), qinv));

  ad::Val best;
  for (int j = 0; j < m; ++j) {
    ad::Val col = t.reshape(t.col_slice(all, j, j + 1), {int(v)});
    best = j == 0 ? col : t.maximum(best, col);
  }
  return best;
}

Volume3 response_map(const LesionQuerySet& qs, const Volume3& features,
                     const ParamStore& ps) {
  qs.validate();
  ad::Tape t;
  TapeParams tp(t, ps);
  const int m = int(qs.queries.size());
  const int d = int(qs.z.size());
  ad::Tensor q({m, d});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j)
      q[std::int64_t(i) * d + j] = qs.queries[std::size_t(i)][std::size_t(j)];
  ad::Val qproj = t.matmul(t.leaf(std::move(q)), tp["qproj"]);

  ad::Tensor f({int(features.voxels()), features.channels});
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = features.data[std::size_t(i)];
  ad::Val s = response_map_tape(t, qproj, t.leaf(std::move(f)));

  Volume3 out(features.nx, features.ny, features.nz, 1, features.sx,
              features.sy, features.sz);
  const ad::Tensor& sv = t.value(s);
  for (std::int64_t i = 0; i < sv.numel(); ++i) out.data[std::size_t(i)] = float(sv[i]);
  return out;
}

std::vector<Proposal> generate_candidates(const std::vector<double>& response,
                                          const Volume3& like, int lesion_id,
                                          const ProposalConfig& cfg) {
  if (cfg.k_p < 1) throw ConfigError("k_p must be >= 1");
  if (std::int64_t(response.size()) != like.voxels()) {
    throw DataError("response size mismatch");
  }
  const double thresh = quantile_type7(response, cfg.quantile);

  Mask3 above(like.nx, like.ny, like.nz, like.sx, like.sy, like.sz);
  for (std::int64_t i = 0; i < like.voxels(); ++i) {
    above.data[std::size_t(i)] = response[std::size_t(i)] >= thresh ? 1 : 0;
  }
  auto comps = connected_components(above, cfg.connectivity);

  const double max_size = cfg.max_fraction * double(like.voxels());
  struct Ranked {
    double mean;
    std::vector<std::int64_t> voxels;
  };
  std::vector<Ranked> ranked;
  for (auto& comp : comps) {
    if (int(comp.size()) < cfg.min_voxels) continue;
    if (double(comp.size()) > max_size) continue;
    double mean = 0.0;
    for (std::int64_t v : comp) mean += response[std::size_t(v)];
    mean /= double(comp.size());
    ranked.push_back({mean, std::move(comp)});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.mean != b.mean) return a.mean > b.mean;
    return a.voxels.front() < b.voxels.front();
  });

  std::vector<Proposal> out;
  for (std::size_t i = 0; i < ranked.size() && int(i) < cfg.k_p; ++i) {
    Proposal p;
    p.lesion_id = lesion_id;
    p.voxels = std::move(ranked[i].voxels);
    p.mean_response = ranked[i].mean;
    p.bbox = tight_bbox(p.voxels, like);
    out.push_back(std::move(p));
  }
  return out;
}

VerifyTapeResult verify_tape(ad::Tape& t, std::vector<Proposal>& props,
                             ad::Val z, ad::Val features_mod,
                             const Volume3& soft_organ, const Volume3& ct,
                             const LesionRecord& record, const TapeParams& tp,
                             const ProposalConfig& cfg) {
  if (props.empty()) {
    throw DataError("verify: no candidates for lesion " +
                    std::to_string(record.lesion_id));
  }
  const int k = int(props.size());
  std::vector<ad::Val> scores;
  for (Proposal& p : props) {
    // region stats against the report
    double hu = 0.0, overlap = 0.0;
    for (std::int64_t v : p.voxels) {
      hu += ct.data[std::size_t(v)];
      overlap += soft_organ.data[std::size_t(v)];
    }
    hu /= double(p.voxels.size());
    overlap /= double(p.voxels.size());
    p.mean_hu = hu;
    p.organ_overlap = overlap;
    p.volume_mm3 = double(p.voxels.size()) * ct.voxel_volume_mm3();

    const double vol_match =
        std::exp(-std::abs(p.volume_mm3 - record.reported_volume_mm3) /
                 (record.reported_volume_mm3 + cfg.eps));
    const double hu_match =
        std::exp(-std::abs(hu - record.reported_mean_hu) / cfg.sigma_hu);

    std::vector<int> rows(p.voxels.begin(), p.voxels.end());
    ad::Val v_pooled = t.reshape(t.col_mean(t.gather_rows(features_mod, rows)),
                                 {1, int(t.value(features_mod).cols())});
    p.region_feature = t.value(v_pooled).v;

    ad::Val vz = t.reshape(t.concat(v_pooled, z), {1, int(t.value(v_pooled).cols() + t.value(z).cols())});
    ad::Val sem = t.sigmoid_(t.matmul(vz, tp["ver.Ws"]));
    ad::Val xi = t.leaf(ad::Tensor({3}, {overlap, vol_match, hu_match}));
    ad::Val evidence = t.sum(t.mul(tp["ver.eta"], xi));
    scores.push_back(t.add(t.reshape(sem, {1}), evidence));
  }
  ad::Val score_vec = scores[0];
  for (int i = 1; i < k; ++i) score_vec = t.concat(score_vec, scores[std::size_t(i)]);

  VerifyTapeResult res;
  res.score_vec = score_vec;
  res.soft_assign = t.segment_softmax(t.mul_scalar(score_vec, 1.0 / cfg.tau),
                                      std::vector<int>(std::size_t(k), 0));
  const ad::Tensor& sv = t.value(score_vec);
  const ad::Tensor& pv = t.value(res.soft_assign);
  int best = 0;
  for (int i = 1; i < k; ++i) {
    if (sv[i] > sv[best]) best = i;  // ties keep the lowest index
  }
  res.selected = best;
  for (int i = 0; i < k; ++i) {
    props[std::size_t(i)].score = sv[i];
    props[std::size_t(i)].soft_assign = pv[i];
  }
  return res;
}

std::pair<std::vector<Proposal>, int> verify(
    std::vector<Proposal> props, const LesionQuerySet& qs,
    const Volume3& features_mod, const Volume3& soft_organ, const Volume3& ct,
    const LesionRecord& record, const ParamStore& ps,
    const ProposalConfig& cfg) {
  ad::Tape t;
  TapeParams tp(t, ps);
  ad::Tensor f({int(features_mod.voxels()), features_mod.channels});
  for (std::int64_t i = 0; i < f.numel(); ++i) f[i] = features_mod.data[std::size_t(i)];
  ad::Tensor zt({1, int(qs.z.size())});
  for (std::size_t i = 0; i < qs.z.size(); ++i) zt[std::int64_t(i)] = qs.z[i];
  auto res = verify_tape(t, props, t.leaf(std::move(zt)), t.leaf(std::move(f)),
                         soft_organ, ct, record, tp, cfg);
  return {std::move(props), res.selected};
}

ad::Val unimodality_tape(ad::Tape& t, const std::vector<ad::Val>& score_vecs,
                         const ProposalConfig& cfg) {
  ad::Val total = t.leaf(ad::Tensor::scalar(0.0));
  for (const ad::Val& s : score_vecs) {
    const int k = int(t.value(s).numel());
    ad::Val p = t.segment_softmax(t.mul_scalar(s, 1.0 / cfg.tau),
                                  std::vector<int>(std::size_t(k), 0));
    ad::Val ent =
        t.mul_scalar(t.sum(t.mul(p, t.log_(t.add_scalar(p, cfg.eps)))), -1.0);
    total = t.add(total, ent);
  }
  return total;
}

UnimodalityResult unimodality_loss(
    const std::vector<std::vector<double>>& scores_per_lesion, double tau,
    double eps) {
  if (tau <= 0.0) throw ConfigError("tau must be positive");
  UnimodalityResult res;
  for (const auto& scores : scores_per_lesion) {
    if (scores.empty()) throw DataError("lesion without scores");
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    std::vector<double> p(scores.size());
    double zsum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      p[i] = std::exp((scores[i] - mx) / tau);
      zsum += p[i];
    }
    for (double& x : p) x /= zsum;
    for (double x : p) res.loss -= x * std::log(x + eps);
    res.soft_assigns.push_back(std::move(p));
  }
  return res;
}

}  // namespace gleve
