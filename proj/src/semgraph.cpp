#include "gleve/semgraph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "gleve/errors.hpp"

namespace gleve {

namespace {

const char* kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::kLesion: return "lesion";
    case NodeKind::kAnatomical: return "anatomical";
    case NodeKind::kAttribute: return "attribute";
  }
  return "?";
}

const char* rel_name(RelationType r) {
  switch (r) {
    case RelationType::kLesionOrgan: return "lesion-organ";
    case RelationType::kLesionAttribute: return "lesion-attribute";
    case RelationType::kIntraOrgan: return "intra-organ";
  }
  return "?";
}

std::string layer_key(int layer, const char* tensor) {
  return "graph.l" + std::to_string(layer) + "." + tensor;
}

}  // namespace

std::string size_bucket_token(double volume_mm3) {
  return "size_decade:" + std::to_string(int(std::floor(std::log10(volume_mm3))));
}

std::string hu_bucket_token(double mean_hu) {
  return "hu_bucket:" + std::to_string(int(std::floor(mean_hu / 20.0)));
}

std::string contrast_token(double delta_hu) {
  if (delta_hu > 0.0) return "contrast:pos";
  if (delta_hu < 0.0) return "contrast:neg";
  return "contrast:zero";
}

void SemanticGraph::validate() const {
  const int n = node_count();
  std::vector<int> organ_edges(nodes.size(), 0);
  for (const GraphEdge& e : edges) {
    if (e.src < 0 || e.src >= n || e.dst < 0 || e.dst >= n) {
      throw DataError("graph edge endpoint out of range");
    }
    if (e.rel == RelationType::kLesionOrgan) organ_edges[std::size_t(e.dst)]++;
  }
  for (int v : lesion_node) {
    if (v < 0 || v >= n || nodes[std::size_t(v)].kind != NodeKind::kLesion) {
      throw DataError("lesion node index invalid");
    }
    if (organ_edges[std::size_t(v)] != 1) {
      throw DataError("lesion node must have exactly one lesion-organ edge");
    }
  }
}

SemanticGraph build_graph(const ReportDoc& doc) {
  doc.validate();
  SemanticGraph g;

  // lesion nodes first, ordered by id; the token is the structured
  // description (the stand-in for encoding the lesion text), so lesions
  // with identical fields share an embedding and distinct ones separate
  for (int i = 0; i < doc.lesion_count(); ++i) {
    const LesionRecord& r = doc.lesions[std::size_t(i)];
    std::string token = "lesion|organ:" + doc.organ_table.at(r.organ_id).name +
                        "|" + size_bucket_token(r.reported_volume_mm3) + "|" +
                        hu_bucket_token(r.reported_mean_hu) + "|" +
                        contrast_token(contrast_features(doc, i)) +
                        "|loc:" + r.sub_location;
    g.nodes.push_back({int(g.nodes.size()), NodeKind::kLesion, token});
    g.lesion_node.push_back(g.nodes.back().id);
  }
  // one anatomical node per referenced organ, by organ id
  std::map<int, int> organ_node;
  std::set<int> referenced;
  for (const LesionRecord& r : doc.lesions) referenced.insert(r.organ_id);
  for (int oid : referenced) {
    organ_node[oid] = int(g.nodes.size());
    g.nodes.push_back({int(g.nodes.size()), NodeKind::kAnatomical,
                       "organ:" + doc.organ_table.at(oid).name});
  }
  // attribute nodes deduplicated by token, first-appearance order
  std::map<std::string, int> attr_node;
  auto attr = [&](const std::string& token) {
    auto it = attr_node.find(token);
    if (it != attr_node.end()) return it->second;
    int id = int(g.nodes.size());
    g.nodes.push_back({id, NodeKind::kAttribute, token});
    attr_node.emplace(token, id);
    return id;
  };

  for (int i = 0; i < doc.lesion_count(); ++i) {
    const LesionRecord& r = doc.lesions[std::size_t(i)];
    const int les = g.lesion_node[std::size_t(i)];
    g.edges.push_back({organ_node.at(r.organ_id), les,
                       RelationType::kLesionOrgan});
    std::vector<std::string> tokens;
    if (r.sub_location != "none") tokens.push_back("loc:" + r.sub_location);
    tokens.push_back(size_bucket_token(r.reported_volume_mm3));
    tokens.push_back(hu_bucket_token(r.reported_mean_hu));
    tokens.push_back(contrast_token(contrast_features(doc, i)));
    for (const std::string& t : tokens) {
      g.edges.push_back({attr(t), les, RelationType::kLesionAttribute});
    }
  }
  // bidirectional intra-organ edges between lesion pairs sharing an organ
  for (int i = 0; i < doc.lesion_count(); ++i) {
    for (int j = i + 1; j < doc.lesion_count(); ++j) {
      if (doc.lesions[std::size_t(i)].organ_id !=
          doc.lesions[std::size_t(j)].organ_id)
        continue;
      const int a = g.lesion_node[std::size_t(i)];
      const int b = g.lesion_node[std::size_t(j)];
      g.edges.push_back({a, b, RelationType::kIntraOrgan});
      g.edges.push_back({b, a, RelationType::kIntraOrgan});
    }
  }
  g.validate();
  return g;
}

std::string dump_graph(const SemanticGraph& g) {
  std::ostringstream os;
  for (const GraphNode& n : g.nodes) {
    os << "node " << n.id << " " << kind_name(n.kind) << " " << n.token << "\n";
  }
  for (const GraphEdge& e : g.edges) {
    os << "edge " << e.src << " " << e.dst << " " << rel_name(e.rel) << "\n";
  }
  return os.str();
}

ad::Tensor init_embeddings(const SemanticGraph& g, int d, std::uint64_t seed) {
  ad::Tensor h({g.node_count(), d});
  const double scale = 1.0 / std::sqrt(double(d));
  for (int i = 0; i < g.node_count(); ++i) {
    Rng rng(seed ^ fnv1a("emb:" + g.nodes[std::size_t(i)].token));
    for (int j = 0; j < d; ++j)
      h[std::int64_t(i) * d + j] = scale * rng.normal();
  }
  return h;
}

void init_graph_params(ParamStore& ps, const GraphConfig& cfg,
                       int feature_channels) {
  const double sd = 1.0 / std::sqrt(double(cfg.d));
  const double sr = 1.0 / std::sqrt(double(cfg.d_r));
  for (int l = 0; l < cfg.layers; ++l) {
    ps.emplace_gaussian(layer_key(l, "Wq"), {cfg.d, cfg.d}, sd, cfg.seed);
    ps.emplace_gaussian(layer_key(l, "Wk"), {cfg.d, cfg.d}, sd, cfg.seed);
    ps.emplace_gaussian(layer_key(l, "Wv"), {cfg.d, cfg.d}, sd, cfg.seed);
    ps.emplace_gaussian(layer_key(l, "Wr"), {cfg.d_r, cfg.d}, sr, cfg.seed);
    ps.emplace_gaussian(layer_key(l, "ffn.W1"), {cfg.d, cfg.d}, sd, cfg.seed);
    ps.emplace_zeros(layer_key(l, "ffn.b1"), {cfg.d});
    // small second layer keeps early layers near the residual path
    ps.emplace_gaussian(layer_key(l, "ffn.W2"), {cfg.d, cfg.d}, 0.1 * sd,
                        cfg.seed);
    ps.emplace_zeros(layer_key(l, "ffn.b2"), {cfg.d});
  }
  ps.emplace_gaussian("graph.rel", {3, cfg.d_r}, sr, cfg.seed);
  ps.emplace_gaussian("qb.W1", {cfg.d, cfg.d}, sd, cfg.seed);
  ps.emplace_zeros("qb.b1", {cfg.d});
  // zero body + random per-query offsets: q(m) = z + b2[m] at init
  ps.emplace_zeros("qb.W2", {cfg.d, cfg.num_queries * cfg.d});
  ps.emplace_gaussian("qb.b2", {cfg.num_queries * cfg.d}, 0.5 * sd, cfg.seed);
  ps.emplace_gaussian("qproj", {cfg.d, feature_channels}, sd, cfg.seed);
}

ad::Val graph_layer(ad::Tape& t, ad::Val h, const SemanticGraph& g,
                    const TapeParams& tp, const GraphConfig& cfg, int layer) {
  if (layer < 1 || layer > cfg.layers) {
    throw ConfigError("graph_layer: layer index out of range");
  }
  const int n = g.node_count();
  const int pl = layer - 1;

  // FFN residual branch
  ad::Val hidden = t.tanh_(t.add_rowvec(t.matmul(h, tp[layer_key(pl, "ffn.W1")]),
                                        tp[layer_key(pl, "ffn.b1")]));
  ad::Val ffn = t.add(
      t.add_rowvec(t.matmul(hidden, tp[layer_key(pl, "ffn.W2")]),
                   tp[layer_key(pl, "ffn.b2")]),
      h);
  if (g.edges.empty()) return ffn;

  // edges sorted by destination so attention segments are contiguous
  std::vector<int> order(g.edges.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[int(i)] = int(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return g.edges[std::size_t(a)].dst < g.edges[std::size_t(b)].dst;
  });
  std::vector<int> src, dst, rel;
  for (int e : order) {
    src.push_back(g.edges[std::size_t(e)].src);
    dst.push_back(g.edges[std::size_t(e)].dst);
    rel.push_back(int(g.edges[std::size_t(e)].rel));
  }

  ad::Val q = t.matmul(h, tp[layer_key(pl, "Wq")]);
  ad::Val k = t.matmul(h, tp[layer_key(pl, "Wk")]);
  ad::Val v = t.matmul(h, tp[layer_key(pl, "Wv")]);
  ad::Val r = t.matmul(t.gather_rows(tp["graph.rel"], rel),
                       tp[layer_key(pl, "Wr")]);

  ad::Val qe = t.gather_rows(q, dst);
  ad::Val ke = t.add(t.gather_rows(k, src), r);
  ad::Val scores =
      t.mul_scalar(t.row_sum(t.mul(qe, ke)), 1.0 / std::sqrt(double(cfg.d)));
  ad::Val alpha = t.segment_softmax(scores, dst);
  ad::Val messages = t.scale_rows(t.gather_rows(v, src), alpha);
  ad::Val agg = t.segment_sum_rows(messages, dst, n);
  return t.add(ffn, agg);
}

ad::Val run_graph_layers(ad::Tape& t, const SemanticGraph& g,
                         const TapeParams& tp, const GraphConfig& cfg) {
  ad::Val h = t.leaf(init_embeddings(g, cfg.d, cfg.seed));
  for (int l = 1; l <= cfg.layers; ++l) h = graph_layer(t, h, g, tp, cfg, l);
  return h;
}

std::vector<LesionQueryTape> lesion_queries_tape(ad::Tape& t, ad::Val h_final,
                                                 const SemanticGraph& g,
                                                 const TapeParams& tp,
                                                 const GraphConfig& cfg,
                                                 bool lequ_off) {
  std::vector<LesionQueryTape> out;
  for (std::size_t i = 0; i < g.lesion_node.size(); ++i) {
    LesionQueryTape lq;
    lq.lesion_id = int(i);
    if (lequ_off) {
      // direct embedding of the structured fields: mean of the initial
      // embeddings over this lesion's node and its attached field nodes
      std::vector<int> own{g.lesion_node[i]};
      for (const GraphEdge& e : g.edges) {
        if (e.dst == g.lesion_node[i] && e.rel != RelationType::kIntraOrgan) {
          own.push_back(e.src);
        }
      }
      ad::Val h0 = t.leaf(init_embeddings(g, cfg.d, cfg.seed));
      ad::Val rows = t.gather_rows(h0, own);
      lq.z = t.reshape(t.col_mean(rows), {1, cfg.d});
    } else {
      lq.z = t.gather_rows(h_final, {g.lesion_node[i]});
    }
    ad::Val hidden =
        t.tanh_(t.add_rowvec(t.matmul(lq.z, tp["qb.W1"]), tp["qb.b1"]));
    ad::Val qout = t.add_rowvec(t.matmul(hidden, tp["qb.W2"]), tp["qb.b2"]);
    ad::Val stacked;
    for (int m = 0; m < cfg.num_queries; ++m) {
      ad::Val qm = t.add(t.col_slice(qout, m * cfg.d, (m + 1) * cfg.d), lq.z);
      stacked = m == 0 ? qm : t.concat(stacked, qm);
    }
    lq.queries = t.reshape(stacked, {cfg.num_queries, cfg.d});
    lq.queries_proj = t.matmul(lq.queries, tp["qproj"]);
    out.push_back(lq);
  }
  return out;
}

void LesionQuerySet::validate() const {
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  if (queries.empty()) throw NumericError("query set must be nonempty");
  for (double x : z)
    if (!std::isfinite(x)) throw NumericError("query summary not finite");
  if (norm(z) <= 1e-8) throw NumericError("query summary vector is zero");
  for (const auto& q : queries) {
    for (double x : q)
      if (!std::isfinite(x)) throw NumericError("query not finite");
    if (norm(q) <= 1e-8) throw NumericError("query vector is zero");
  }
}

std::vector<LesionQuerySet> lesion_queries(const SemanticGraph& g,
                                           const ParamStore& ps,
                                           const GraphConfig& cfg) {
  ad::Tape t;
  TapeParams tp(t, ps);
  ad::Val h = run_graph_layers(t, g, tp, cfg);
  auto tapes = lesion_queries_tape(t, h, g, tp, cfg);
  std::vector<LesionQuerySet> out;
  for (const auto& lq : tapes) {
    LesionQuerySet qs;
    qs.lesion_id = lq.lesion_id;
    qs.z = t.value(lq.z).v;
    const ad::Tensor& q = t.value(lq.queries);
    for (int m = 0; m < q.rows(); ++m) {
      qs.queries.emplace_back(q.v.begin() + std::int64_t(m) * q.cols(),
                              q.v.begin() + std::int64_t(m + 1) * q.cols());
    }
    qs.validate();
    out.push_back(std::move(qs));
  }
  return out;
}

}  // namespace gleve
