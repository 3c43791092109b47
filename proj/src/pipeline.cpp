#include "gleve/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- config

struct KeyValue {
  std::string key;
  std::string value;
  int line;
};

std::vector<KeyValue> tokenize_config(const std::string& text) {
  std::vector<KeyValue> out;
  std::istringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto strip = [](std::string s) {
      while (!s.empty() && std::isspace(std::uint8_t(s.front()))) s.erase(s.begin());
      while (!s.empty() && std::isspace(std::uint8_t(s.back()))) s.pop_back();
      return s;
    };
    line = strip(line);
    if (line.empty()) continue;
    if (line.front() == '[') continue;  // section headers are decorative
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    out.push_back({strip(line.substr(0, eq)), strip(line.substr(eq + 1)),
                   line_no});
  }
  return out;
}

double to_double(const KeyValue& kv) {
  try {
    std::size_t used = 0;
    double v = std::stod(kv.value, &used);
    if (used != kv.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(kv.line) +
                      ": bad number '" + kv.value + "'");
  }
}

int to_int(const KeyValue& kv) {
  const double d = to_double(kv);
  if (d != std::floor(d)) {
    throw ConfigError("config line " + std::to_string(kv.line) +
                      ": expected integer");
  }
  return int(d);
}

bool to_bool(const KeyValue& kv) {
  if (kv.value == "true" || kv.value == "1") return true;
  if (kv.value == "false" || kv.value == "0") return false;
  throw ConfigError("config line " + std::to_string(kv.line) +
                    ": expected bool");
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig cfg;
  for (const KeyValue& kv : tokenize_config(text)) {
    const std::string& k = kv.key;
    if (k == "graph.d") cfg.graph.d = to_int(kv);
    else if (k == "graph.d_r") cfg.graph.d_r = to_int(kv);
    else if (k == "graph.layers") cfg.graph.layers = to_int(kv);
    else if (k == "graph.num_queries") cfg.graph.num_queries = to_int(kv);
    else if (k == "anatomy.d_e") cfg.anatomy.d_e = to_int(kv);
    else if (k == "anatomy.max_organs") cfg.anatomy.max_organs = to_int(kv);
    else if (k == "anatomy.soft_sigma") cfg.anatomy.soft_sigma = to_double(kv);
    else if (k == "proposal.k_p") cfg.proposal.k_p = to_int(kv);
    else if (k == "proposal.quantile") cfg.proposal.quantile = to_double(kv);
    else if (k == "proposal.min_voxels") cfg.proposal.min_voxels = to_int(kv);
    else if (k == "proposal.max_fraction") cfg.proposal.max_fraction = to_double(kv);
    else if (k == "proposal.connectivity") cfg.proposal.connectivity = to_int(kv);
    else if (k == "proposal.tau") cfg.proposal.tau = to_double(kv);
    else if (k == "proposal.eps") cfg.proposal.eps = to_double(kv);
    else if (k == "proposal.sigma_hu") cfg.proposal.sigma_hu = to_double(kv);
    else if (k == "octree.margin") cfg.octree.margin = to_int(kv);
    else if (k == "octree.min_block") cfg.octree.min_block = to_int(kv);
    else if (k == "octree.depth") cfg.octree.depth = to_int(kv);
    else if (k == "octree.activity_threshold") cfg.octree.activity_threshold = to_double(kv);
    else if (k == "loss.uni") cfg.loss.uni = to_double(kv);
    else if (k == "loss.con") cfg.loss.con = to_double(kv);
    else if (k == "loss.sep") cfg.loss.sep = to_double(kv);
    else if (k == "loss.seg") cfg.loss.seg = to_double(kv);
    else if (k == "loss.weak") cfg.loss.weak = to_double(kv);
    else if (k == "loss.eps") cfg.loss.eps = to_double(kv);
    else if (k == "optim.lr") cfg.optim.lr = to_double(kv);
    else if (k == "optim.beta1") cfg.optim.beta1 = to_double(kv);
    else if (k == "optim.beta2") cfg.optim.beta2 = to_double(kv);
    else if (k == "optim.eps") cfg.optim.eps = to_double(kv);
    else if (k == "optim.weight_decay") cfg.optim.weight_decay = to_double(kv);
    else if (k == "optim.cosine") cfg.optim.cosine = to_bool(kv);
    else if (k == "d0_mm") cfg.d0_mm = to_double(kv);
    else if (k == "pred_threshold") cfg.pred_threshold = to_double(kv);
    else if (k == "seed") cfg.set_seed(std::uint64_t(to_int(kv)));
    else if (k == "lequ_off") cfg.lequ_off = to_bool(kv);
    else if (k == "anatomical_prior_off") cfg.anatomical_prior_off = to_bool(kv);
    else if (k == "verification_off") cfg.verification_off = to_bool(kv);
    else if (k == "anver_off") {
      const bool v = to_bool(kv);
      cfg.anatomical_prior_off = v;
      cfg.verification_off = v;
    } else if (k == "ocre_off") cfg.ocre_off = to_bool(kv);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  if (cfg.proposal.quantile <= 0.0 || cfg.proposal.quantile >= 1.0) {
    throw ConfigError("proposal.quantile must be in (0,1)");
  }
  if (cfg.proposal.tau <= 0.0) throw ConfigError("proposal.tau must be > 0");
  return cfg;
}

PipelineConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

void init_all_params(ParamStore& ps, const PipelineConfig& cfg) {
  init_graph_params(ps, cfg.graph, cfg.anatomy.channels);
  init_anatomy_params(ps, cfg.anatomy);
  init_verifier_params(ps, cfg.anatomy.channels, cfg.graph.d, cfg.seed);
  init_refine_params(ps, cfg.anatomy.channels, cfg.seed);
}

// ------------------------------------------------------------- case setup

namespace {

struct CaseContext {
  const LoadedCase* data = nullptr;
  SemanticGraph graph;
  ad::Tensor features;     // {V, C}
  ad::Tensor soft_matrix;  // {V, K}
  std::vector<Volume3> soft_maps;
  ad::Tensor hu_spatial;               // {1,nx,ny,nz}, noisy ct
  ad::Tensor ones_spatial;             // {1,nx,ny,nz}
  std::vector<ad::Tensor> organ_spatial;  // binary organ indicators
  std::vector<std::vector<double>> gt_flat;  // {V} per lesion (may be empty)
  std::vector<int> lesion_organ_row;  // lesion -> index into organ arrays
};

CaseContext prepare_case(const LoadedCase& c, const PipelineConfig& cfg) {
  CaseContext ctx;
  ctx.data = &c;
  ctx.graph = build_graph(c.report);
  ctx.features = encode_features(c.ct);
  ctx.soft_maps = organ_soft_maps(c.organ_masks, cfg.anatomy.soft_sigma);
  ctx.soft_matrix = soft_map_matrix(ctx.soft_maps);

  const std::int64_t v = c.ct.voxels();
  ctx.hu_spatial = ad::Tensor({1, c.ct.nx, c.ct.ny, c.ct.nz});
  ctx.ones_spatial = ad::Tensor({1, c.ct.nx, c.ct.ny, c.ct.nz});
  for (std::int64_t i = 0; i < v; ++i) {
    ctx.hu_spatial[i] = c.ct.data[std::size_t(i)];
    ctx.ones_spatial[i] = 1.0;
  }
  for (const Mask3& om : c.organ_masks) {
    ad::Tensor o({1, c.ct.nx, c.ct.ny, c.ct.nz});
    for (std::int64_t i = 0; i < v; ++i) o[i] = om.data[std::size_t(i)];
    ctx.organ_spatial.push_back(std::move(o));
  }
  for (const Mask3& gm : c.lesion_masks) {
    std::vector<double> flat(static_cast<std::size_t>(v));
    for (std::int64_t i = 0; i < v; ++i) flat[std::size_t(i)] = gm.data[std::size_t(i)];
    ctx.gt_flat.push_back(std::move(flat));
  }
  for (const LesionRecord& r : c.report.lesions) {
    int row = -1;
    for (std::size_t k = 0; k < c.organ_ids.size(); ++k) {
      if (c.organ_ids[k] == r.organ_id) row = int(k);
    }
    if (row < 0) throw DataError("case is missing organ mask for lesion");
    ctx.lesion_organ_row.push_back(row);
  }
  return ctx;
}

Proposal fallback_proposal(const CaseContext& ctx, int lesion_idx) {
  // seed a 3^3 cube at the organ soft-map peak (lowest linear index wins)
  const Volume3& soft = ctx.soft_maps[std::size_t(
      ctx.lesion_organ_row[std::size_t(lesion_idx)])];
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < soft.voxels(); ++i) {
    if (soft.data[std::size_t(i)] > soft.data[std::size_t(best)]) best = i;
  }
  const int bz = int(best % soft.nz);
  const int by = int((best / soft.nz) % soft.ny);
  const int bx = int(best / (std::int64_t(soft.ny) * soft.nz));
  Proposal p;
  p.lesion_id = ctx.data->report.lesions[std::size_t(lesion_idx)].lesion_id;
  p.bbox.lo = {std::max(bx - 1, 0), std::max(by - 1, 0), std::max(bz - 1, 0)};
  p.bbox.hi = {std::min(bx + 2, soft.nx), std::min(by + 2, soft.ny),
               std::min(bz + 2, soft.nz)};
  for (int x = p.bbox.lo[0]; x < p.bbox.hi[0]; ++x)
    for (int y = p.bbox.lo[1]; y < p.bbox.hi[1]; ++y)
      for (int z = p.bbox.lo[2]; z < p.bbox.hi[2]; ++z)
        p.voxels.push_back(soft.vox_index(x, y, z));
  return p;
}

ad::Val pick(ad::Tape& t, ad::Val vec, int i) {
  const int n = int(t.value(vec).numel());
  return t.reshape(t.col_slice(t.reshape(vec, {1, n}), i, i + 1), {1});
}

struct RunOutput {
  std::vector<LesionGrounding> lesions;
  LossReport losses;
  ad::Val total;
  bool losses_built = false;
  int seg_evals = 0;
  std::vector<int> active_nodes;
  StageTiming timing;
};

// Balanced voxel subset for supervising one lesion's response map: its own
// GT voxels, sibling-lesion voxels subsampled to at most the positive count
// (pushes the maps apart without letting sibling suppression swamp the own
// signal), and a seeded per-step background sample of 3x positives.
std::pair<std::vector<int>, ad::Tensor> response_subset(
    const CaseContext& ctx, int lesion_idx, int step,
    const PipelineConfig& cfg) {
  const std::int64_t v = ctx.data->ct.voxels();
  std::vector<char> any_gt(std::size_t(v), 0);
  for (const auto& flat : ctx.gt_flat) {
    for (std::int64_t i = 0; i < v; ++i) {
      if (flat[std::size_t(i)] > 0.0) any_gt[std::size_t(i)] = 1;
    }
  }
  std::vector<int> idx;
  std::vector<double> labels;
  std::int64_t positives = 0;
  std::vector<int> sibling;
  for (std::int64_t i = 0; i < v; ++i) {
    if (ctx.gt_flat[std::size_t(lesion_idx)][std::size_t(i)] > 0.0) {
      idx.push_back(int(i));
      labels.push_back(1.0);
      ++positives;
    } else if (any_gt[std::size_t(i)]) {
      sibling.push_back(int(i));
    }
  }
  Rng rng(cfg.seed ^ fnv1a(ctx.data->case_id + ":resp") ^
          (std::uint64_t(step) * 0x9e3779b97f4a7c15ULL) ^
          std::uint64_t(lesion_idx));
  if (!sibling.empty()) {
    const double keep =
        std::min(1.0, double(positives) / double(sibling.size()));
    for (int s : sibling) {
      if (rng.uniform() < keep) {
        idx.push_back(s);
        labels.push_back(0.0);
      }
    }
  }
  const std::int64_t want = 3 * std::max<std::int64_t>(positives, 8);
  for (std::int64_t k = 0; k < want; ++k) {
    const int cand = rng.uniform_int(0, int(v) - 1);
    if (any_gt[std::size_t(cand)]) continue;
    idx.push_back(cand);
    labels.push_back(0.0);
  }
  const int count = int(labels.size());
  return {std::move(idx), ad::Tensor({count}, std::move(labels))};
}

RunOutput run_case_tape(ad::Tape& t, const TapeParams& tp,
                        const CaseContext& ctx, const PipelineConfig& cfg,
                        bool build_losses, int step) {
  const LoadedCase& c = *ctx.data;
  const Volume3& ct = c.ct;
  const int n_lesions = c.report.lesion_count();
  RunOutput out;

  auto t0 = Clock::now();
  auto queries = [&] {
    ad::Val h = run_graph_layers(t, ctx.graph, tp, cfg.graph);
    return lesion_queries_tape(t, h, ctx.graph, tp, cfg.graph, cfg.lequ_off);
  }();
  out.timing.graph_ms = ms_since(t0);

  t0 = Clock::now();
  ad::Val features = t.leaf(ctx.features);
  ad::Val fmod = features;
  if (!cfg.anatomical_prior_off) {
    ad::Val soft = t.leaf(ctx.soft_matrix);
    ad::Val ehat = anatomy_token_tape(t, soft, c.organ_ids, tp);
    fmod = film_modulate_tape(t, features, ehat, tp, cfg.anatomy);
  }
  out.timing.modulate_ms = ms_since(t0);

  const bool delta = c.has_mask && int(ctx.gt_flat.size()) == n_lesions &&
                     n_lesions > 0;

  std::vector<ad::Val> score_vecs;
  std::vector<ad::Val> attr_terms, org_terms, seg_terms;
  struct MaskedCanvas {
    ad::Val masked;  // {1,E,E,E} in-volume part
    Octree tree;
  };
  std::vector<MaskedCanvas> canvases;

  for (int i = 0; i < n_lesions; ++i) {
    auto tp0 = Clock::now();
    const LesionRecord& rec = c.report.lesions[std::size_t(i)];
    LesionGrounding lg;
    lg.lesion_id = rec.lesion_id;

    ad::Val s_val = response_map_tape(t, queries[std::size_t(i)].queries_proj, fmod);
    const ad::Tensor& s_ten = t.value(s_val);
    lg.response = Volume3(ct.nx, ct.ny, ct.nz, 1, ct.sx, ct.sy, ct.sz);
    for (std::int64_t k = 0; k < s_ten.numel(); ++k)
      lg.response.data[std::size_t(k)] = float(s_ten[k]);

    lg.proposals = generate_candidates(s_ten.v, ct, rec.lesion_id, cfg.proposal);

    const int organ_row = ctx.lesion_organ_row[std::size_t(i)];
    ad::Val soft_assign;
    bool have_scores = false;
    if (lg.proposals.empty()) {
      lg.proposals.push_back(fallback_proposal(ctx, i));
      lg.fallback = true;
      lg.selected = 0;
    } else if (cfg.verification_off) {
      lg.selected = 0;  // candidates are ranked by mean response
    } else {
      auto ver = verify_tape(t, lg.proposals, queries[std::size_t(i)].z, fmod,
                             ctx.soft_maps[std::size_t(organ_row)], ct, rec,
                             tp, cfg.proposal);
      lg.selected = ver.selected;
      soft_assign = ver.soft_assign;
      score_vecs.push_back(ver.score_vec);
      have_scores = true;
    }
    out.timing.propose_ms += ms_since(tp0);

    tp0 = Clock::now();
    const Proposal& chosen = lg.proposals[std::size_t(lg.selected)];
    Octree tree = build_octree(chosen, ct, cfg.octree);

    ad::Val masked_canvas;
    if (cfg.ocre_off) {
      // final mask is the binary candidate indicator
      ad::Tensor local({1, tree.root_edge, tree.root_edge, tree.root_edge});
      for (std::int64_t v : chosen.voxels) {
        const int z = int(v % ct.nz);
        const int y = int((v / ct.nz) % ct.ny);
        const int x = int(v / (std::int64_t(ct.ny) * ct.nz));
        const int lx = x - tree.root_lo[0];
        const int ly = y - tree.root_lo[1];
        const int lz = z - tree.root_lo[2];
        local[(std::int64_t(lx) * tree.root_edge + ly) * tree.root_edge + lz] = 1.0;
      }
      masked_canvas = t.leaf(std::move(local));
      out.active_nodes.push_back(0);
    } else {
      auto refined = refine_full_tape(t, tree, chosen.voxels, fmod, ct, tp,
                                      cfg.octree);
      ad::Val valid = t.crop3(t.leaf(ctx.ones_spatial), tree.root_lo,
                              {tree.root_edge, tree.root_edge, tree.root_edge});
      masked_canvas = t.mul(refined.final_mask, valid);
      int nodes = 0;
      for (int a : refined.active_counts) nodes += a;
      out.active_nodes.push_back(nodes);
    }
    canvases.push_back({masked_canvas, tree});

    lg.final_mask = root_to_volume(tree, t.value(masked_canvas), ct);
    out.timing.refine_ms += ms_since(tp0);

    if (build_losses) {
      const std::array<int, 3> ext{tree.root_edge, tree.root_edge,
                                   tree.root_edge};
      ad::Val hu_crop = t.crop3(t.leaf(ctx.hu_spatial), tree.root_lo, ext);
      ad::Val organ_crop = t.crop3(t.leaf(ctx.organ_spatial[std::size_t(organ_row)]),
                                   tree.root_lo, ext);
      // differentiable stats of the refined mask
      ad::Val vol_hat = soft_volume_tape(t, masked_canvas, ct.voxel_volume_mm3());
      ad::Val hu_hat = soft_mean_hu_tape(t, masked_canvas, hu_crop, cfg.loss.eps);
      ad::Val attr_sel = attr_loss_tape(t, vol_hat, hu_hat,
                                        rec.reported_volume_mm3,
                                        rec.reported_mean_hu, cfg.loss.eps);
      ad::Val org_sel = org_loss_tape(t, masked_canvas, organ_crop, cfg.loss.eps);

      if (have_scores && int(lg.proposals.size()) > 1) {
        // soft assigns weight per-candidate consistency; non-selected
        // candidates contribute their (fixed) region statistics
        ad::Val attr_acc, org_acc;
        const Mask3& organ_bin = c.organ_masks[std::size_t(organ_row)];
        for (int k = 0; k < int(lg.proposals.size()); ++k) {
          ad::Val w = pick(t, soft_assign, k);
          ad::Val ak, ok;
          if (k == lg.selected) {
            ak = attr_sel;
            ok = org_sel;
          } else {
            const Proposal& p = lg.proposals[std::size_t(k)];
            ak = t.leaf(ad::Tensor::scalar(
                attr_loss(p.volume_mm3, p.mean_hu, rec.reported_volume_mm3,
                          rec.reported_mean_hu, cfg.loss.eps)));
            std::int64_t inside = 0;
            for (std::int64_t v : p.voxels) inside += organ_bin.data[std::size_t(v)];
            ok = t.leaf(ad::Tensor::scalar(
                1.0 - double(inside) / double(p.voxels.size())));
          }
          ad::Val wa = t.mul(w, ak);
          ad::Val wo = t.mul(w, ok);
          attr_acc = k == 0 ? wa : t.add(attr_acc, wa);
          org_acc = k == 0 ? wo : t.add(org_acc, wo);
        }
        attr_terms.push_back(attr_acc);
        org_terms.push_back(org_acc);
      } else {
        attr_terms.push_back(attr_sel);
        org_terms.push_back(org_sel);
      }

      if (delta) {
        ad::Tensor gt_sp({1, ct.nx, ct.ny, ct.nz}, ctx.gt_flat[std::size_t(i)]);
        ad::Val gt_crop = t.crop3(t.leaf(std::move(gt_sp)), tree.root_lo, ext);
        ad::Val seg_mask = seg_loss_tape(t, masked_canvas, gt_crop, cfg.loss.eps);
        // the response map is the coarsest prediction; supervising it on a
        // balanced voxel subset binds the lesion queries to image evidence
        auto [sub_idx, sub_labels] = response_subset(ctx, i, step, cfg);
        ad::Val s_sub = t.reshape(
            t.gather_rows(t.reshape(s_val, {int(ct.voxels()), 1}), sub_idx),
            {int(sub_idx.size())});
        ad::Val resp_prob = t.add_scalar(
            t.mul_scalar(s_sub, 0.5 * (1.0 - 1e-6)), 0.5);
        ad::Val seg_resp =
            seg_loss_tape(t, resp_prob, t.leaf(std::move(sub_labels)),
                          cfg.loss.eps);
        seg_terms.push_back(t.add(seg_mask, seg_resp));
        out.seg_evals += 2;
      }
    }
    out.lesions.push_back(std::move(lg));
  }

  if (!build_losses) return out;
  out.losses_built = true;

  ad::Val zero = t.leaf(ad::Tensor::scalar(0.0));
  ad::Val uni = score_vecs.empty() ? zero
                                   : unimodality_tape(t, score_vecs, cfg.proposal);
  ad::Val attr = zero, org = zero, seg = zero, sep = zero;
  for (const ad::Val& a : attr_terms) attr = t.add(attr, a);
  for (const ad::Val& o : org_terms) org = t.add(org, o);
  for (const ad::Val& s : seg_terms) seg = t.add(seg, s);

  // pairwise separation over in-volume canvases, evaluated on overlapping
  // root-cube regions (disjoint roots contribute exactly zero)
  for (std::size_t i = 0; i < canvases.size(); ++i) {
    for (std::size_t j = i + 1; j < canvases.size(); ++j) {
      const Octree& ta_ = canvases[i].tree;
      const Octree& tb_ = canvases[j].tree;
      std::array<int, 3> lo{}, hi{};
      bool overlap = true;
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(ta_.root_lo[a], tb_.root_lo[a]);
        hi[a] = std::min(ta_.root_lo[a] + ta_.root_edge,
                         tb_.root_lo[a] + tb_.root_edge);
        if (lo[a] >= hi[a]) overlap = false;
      }
      if (!overlap) continue;  // intersection and min are identically zero
      ad::Val suma = t.sum(canvases[i].masked);
      ad::Val sumb = t.sum(canvases[j].masked);
      const std::array<int, 3> ext{hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]};
      ad::Val ca = t.crop3(canvases[i].masked,
                           {lo[0] - ta_.root_lo[0], lo[1] - ta_.root_lo[1],
                            lo[2] - ta_.root_lo[2]},
                           ext);
      ad::Val cb = t.crop3(canvases[j].masked,
                           {lo[0] - tb_.root_lo[0], lo[1] - tb_.root_lo[1],
                            lo[2] - tb_.root_lo[2]},
                           ext);
      ad::Val inter = t.sum(t.mul(ca, cb));
      ad::Val min_sum = t.sum(t.minimum(ca, cb));
      // sum of max = sum_a + sum_b - sum of min over the intersection
      ad::Val union_sum = t.sub(t.add(suma, sumb), min_sum);
      sep = t.add(sep, t.div(inter, t.add_scalar(union_sum, cfg.loss.eps)));
    }
  }

  out.losses = total_loss(t.scalar_value(uni), t.scalar_value(attr),
                          t.scalar_value(org), t.scalar_value(sep),
                          t.scalar_value(seg), delta, cfg.loss);

  ad::Val con = t.add(attr, org);
  ad::Val weak = t.add(t.add(t.mul_scalar(uni, cfg.loss.uni),
                             t.mul_scalar(con, cfg.loss.con)),
                       t.mul_scalar(sep, cfg.loss.sep));
  ad::Val total = t.add(t.mul_scalar(seg, delta ? cfg.loss.seg : 0.0),
                        t.mul_scalar(weak, cfg.loss.weak));
  out.total = total;
  return out;
}

}  // namespace

GroundingResult ground(const LoadedCase& c, const ParamStore& ps,
                       const PipelineConfig& cfg) {
  CaseContext ctx = prepare_case(c, cfg);
  ad::Tape t;
  TapeParams tp(t, ps);
  RunOutput run = run_case_tape(t, tp, ctx, cfg, /*build_losses=*/true, 0);
  GroundingResult res;
  res.lesions = std::move(run.lesions);
  res.losses = run.losses;
  res.timing = run.timing;
  res.octree_active_nodes = run.active_nodes;
  return res;
}

Mask3 threshold_mask(const Volume3& soft, double threshold) {
  Mask3 m(soft.nx, soft.ny, soft.nz, soft.sx, soft.sy, soft.sz);
  for (std::int64_t i = 0; i < soft.voxels(); ++i) {
    m.data[std::size_t(i)] = soft.data[std::size_t(i)] >= threshold ? 1 : 0;
  }
  return m;
}

Mask3 union_gt(const LoadedCase& c) {
  if (c.lesion_masks.empty()) throw DataError("case has no GT lesion masks");
  Mask3 u = c.lesion_masks.front();
  for (std::size_t k = 1; k < c.lesion_masks.size(); ++k) {
    for (std::int64_t i = 0; i < u.voxels(); ++i) {
      u.data[std::size_t(i)] |= c.lesion_masks[k].data[std::size_t(i)];
    }
  }
  return u;
}

void write_grounding(const GroundingResult& res, const LoadedCase& c,
                     const PipelineConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  Mask3 pred_union(c.ct.nx, c.ct.ny, c.ct.nz, c.ct.sx, c.ct.sy, c.ct.sz);
  std::ofstream jl(out_dir + "/proposals.jsonl");
  for (const LesionGrounding& lg : res.lesions) {
    write_volume(out_dir + "/lesion_" + std::to_string(lg.lesion_id) +
                     "_pred.vol",
                 lg.final_mask);
    Mask3 bin = threshold_mask(lg.final_mask, cfg.pred_threshold);
    for (std::int64_t i = 0; i < bin.voxels(); ++i) {
      pred_union.data[std::size_t(i)] |= bin.data[std::size_t(i)];
    }
    for (int k = 0; k < int(lg.proposals.size()); ++k) {
      const Proposal& p = lg.proposals[std::size_t(k)];
      json row;
      row["lesion_id"] = p.lesion_id;
      row["bbox"] = {p.bbox.lo[0], p.bbox.lo[1], p.bbox.lo[2],
                     p.bbox.hi[0], p.bbox.hi[1], p.bbox.hi[2]};
      row["voxel_count"] = p.voxels.size();
      row["volume_mm3"] = p.volume_mm3;
      row["mean_hu"] = p.mean_hu;
      row["organ_overlap"] = p.organ_overlap;
      row["mean_response"] = p.mean_response;
      row["score"] = p.score;
      row["soft_assign"] = p.soft_assign;
      row["selected"] = (k == lg.selected);
      row["fallback"] = lg.fallback;
      jl << row.dump() << "\n";
    }
    // mid-axial response slice as PGM (z = nz/2)
    const Volume3& s = lg.response;
    std::ofstream pgm(out_dir + "/response_" + std::to_string(lg.lesion_id) +
                          ".pgm",
                      std::ios::binary);
    pgm << "P5\n" << s.nx << " " << s.ny << "\n255\n";
    const int z = s.nz / 2;
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const double v = std::clamp((s.at(x, y, z) + 1.0) / 2.0, 0.0, 1.0);
        pgm.put(char(int(v * 255.0)));
      }
  }
  write_mask(out_dir + "/pred_union.mask", pred_union);
}

CaseEval evaluate_case(const LoadedCase& c, const Mask3& pred_union,
                       const PipelineConfig& cfg) {
  CaseEval ev;
  ev.case_id = c.case_id;
  Mask3 gt = union_gt(c);
  ev.dice = dice(gt, pred_union);
  if (gt.count() > 0 && pred_union.count() > 0) {
    ev.hd95_mm = hd95(gt, pred_union);
  }
  ev.match = match_lesions(gt, pred_union, cfg.proposal.connectivity);
  ev.lr_metric = ev.match.n_gt > 0 ? lesion_recall(ev.match) : 0.0;
  ev.lls_metric = ev.match.n_gt > 0 ? lls(ev.match, cfg.d0_mm) : 0.0;
  return ev;
}

std::string eval_report_json(const std::vector<CaseEval>& evals,
                             const std::vector<LoadedCase>& cases) {
  json root;
  json per_case = json::array();
  struct Agg {
    std::vector<double> dice, hd, lr, lls;
  };
  Agg overall;
  std::map<std::string, Agg> by_organ;

  for (std::size_t i = 0; i < evals.size(); ++i) {
    const CaseEval& ev = evals[i];
    json jc;
    jc["case_id"] = ev.case_id;
    jc["dice"] = ev.dice;
    if (ev.hd95_mm) jc["hd95_mm"] = *ev.hd95_mm;
    else jc["hd95_mm"] = nullptr;
    jc["lr"] = ev.lr_metric;
    jc["lls"] = ev.lls_metric;
    json matches = json::array();
    for (const MatchPair& p : ev.match.pairs) {
      matches.push_back({{"gt", p.gt_index},
                         {"pred", p.pred_index},
                         {"dice", p.dice},
                         {"centroid_dist_mm", p.centroid_dist_mm}});
    }
    jc["matches"] = matches;
    per_case.push_back(jc);

    overall.dice.push_back(ev.dice);
    if (ev.hd95_mm) overall.hd.push_back(*ev.hd95_mm);
    overall.lr.push_back(ev.lr_metric);
    overall.lls.push_back(ev.lls_metric);
    if (i < cases.size()) {
      // attribute the case metrics to every organ its report references
      std::set<std::string> organs;
      for (const LesionRecord& r : cases[i].report.lesions) {
        organs.insert(cases[i].report.organ_table.at(r.organ_id).name);
      }
      for (const std::string& name : organs) {
        Agg& a = by_organ[name];
        a.dice.push_back(ev.dice);
        if (ev.hd95_mm) a.hd.push_back(*ev.hd95_mm);
        a.lr.push_back(ev.lr_metric);
        a.lls.push_back(ev.lls_metric);
      }
    }
  }

  auto mean_std = [](const std::vector<double>& xs) {
    json j;
    if (xs.empty()) {
      j["mean"] = nullptr;
      j["std"] = nullptr;
      return j;
    }
    double m = 0.0;
    for (double x : xs) m += x;
    m /= double(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - m) * (x - m);
    var /= double(xs.size());
    j["mean"] = m;
    j["std"] = std::sqrt(var);
    return j;
  };
  auto agg_json = [&](const Agg& a) {
    json j;
    j["dice"] = mean_std(a.dice);
    j["hd95_mm"] = mean_std(a.hd);
    j["lr"] = mean_std(a.lr);
    j["lls"] = mean_std(a.lls);
    return j;
  };

  root["per_case"] = per_case;
  root["aggregate"]["overall"] = agg_json(overall);
  json organs;
  for (const auto& [name, agg] : by_organ) organs[name] = agg_json(agg);
  root["aggregate"]["per_organ"] = organs;
  return root.dump(2) + "\n";
}

TrainResult train(const std::vector<LoadedCase>& cases,
                  const PipelineConfig& cfg, int steps) {
  if (cases.empty()) throw DataError("train: empty suite");

  // 8:1:1 split by case order
  const int n = int(cases.size());
  const int n_train = std::max(1, (n * 8) / 10);
  const int n_eval = std::max(n > n_train ? 1 : 0, (n * 1) / 10);
  std::vector<const LoadedCase*> train_cases, eval_cases;
  for (int i = 0; i < n; ++i) {
    if (i < n_train) train_cases.push_back(&cases[std::size_t(i)]);
    else if (i < n_train + n_eval) eval_cases.push_back(&cases[std::size_t(i)]);
  }
  if (eval_cases.empty()) eval_cases = train_cases;

  std::vector<CaseContext> ctxs;
  for (const LoadedCase* c : train_cases) ctxs.push_back(prepare_case(*c, cfg));

  TrainResult res;
  ParamStore& ps = res.params;
  init_all_params(ps, cfg);

  std::ostringstream csv;
  csv << "step,uni,attr,org,con,sep,weak,seg,total,lr\n";

  auto eval_now = [&](int step) {
    std::int64_t matched = 0, gt_total = 0;
    double lls_sum = 0.0;
    for (const LoadedCase* c : eval_cases) {
      GroundingResult g = ground(*c, ps, cfg);
      Mask3 pred(c->ct.nx, c->ct.ny, c->ct.nz, c->ct.sx, c->ct.sy, c->ct.sz);
      for (const LesionGrounding& lg : g.lesions) {
        Mask3 bin = threshold_mask(lg.final_mask, cfg.pred_threshold);
        for (std::int64_t i = 0; i < pred.voxels(); ++i) {
          pred.data[std::size_t(i)] |= bin.data[std::size_t(i)];
        }
      }
      MatchResult m = match_lesions(union_gt(*c), pred, cfg.proposal.connectivity);
      matched += m.n_matched;
      gt_total += m.n_gt;
      lls_sum += m.n_gt > 0 ? lls(m, cfg.d0_mm) * m.n_gt : 0.0;
    }
    EvalPoint pt;
    pt.step = step;
    pt.lr_metric = gt_total > 0 ? double(matched) / double(gt_total) : 0.0;
    pt.lls_metric = gt_total > 0 ? lls_sum / double(gt_total) : 0.0;
    res.eval_trace.push_back(pt);
  };

  eval_now(0);

  std::vector<double> flat = ps.flatten();
  const std::vector<std::string> names = ps.names();
  int step_index = 0;

  auto loss_and_grad = [&](const std::vector<double>& params,
                           std::vector<double>& grad) -> double {
    ps.unflatten(params);
    const CaseContext& ctx = ctxs[std::size_t(step_index % int(ctxs.size()))];
    ad::Tape t;
    TapeParams tp(t, ps);
    RunOutput run =
        run_case_tape(t, tp, ctx, cfg, /*build_losses=*/true, step_index);
    res.seg_evaluations += run.seg_evals;
    t.backward(run.total);
    std::size_t off = 0;
    for (const std::string& name : names) {
      const ad::Tensor& g = tp.grad(name);
      std::copy(g.v.begin(), g.v.end(), grad.begin() + std::ptrdiff_t(off));
      off += g.v.size();
    }
    const LossReport& lr_rep = run.losses;
    csv << step_index << "," << lr_rep.uni << "," << lr_rep.attr << ","
        << lr_rep.org << "," << lr_rep.con << "," << lr_rep.sep << ","
        << lr_rep.weak << "," << lr_rep.seg << "," << lr_rep.total;
    ++step_index;
    return lr_rep.total;
  };

  AdamW opt(flat.size(), cfg.optim, steps);
  std::vector<double> grad(flat.size(), 0.0);
  for (int s = 0; s < steps; ++s) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const double loss = loss_and_grad(flat, grad);
    csv << "," << opt.current_lr() << "\n";
    if (!std::isfinite(loss)) {
      // abort with the last finite-loss parameters already in `ps`
      res.loss_csv = csv.str();
      throw NumericError("train: non-finite loss at step " + std::to_string(s));
    }
    res.loss_trace.push_back(loss);
    opt.step(flat, grad);
    if ((s + 1) % 50 == 0 || s + 1 == steps) {
      ps.unflatten(flat);
      eval_now(s + 1);
    }
  }
  ps.unflatten(flat);
  res.loss_csv = csv.str();
  return res;
}

}  // namespace gleve
