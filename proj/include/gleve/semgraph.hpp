#pragma once

#include <string>
#include <vector>

#include "gleve/ad.hpp"
#include "gleve/params.hpp"
#include "gleve/report.hpp"

namespace gleve {

enum class NodeKind { kLesion, kAnatomical, kAttribute };

// Edge direction is src -> dst; information flows into the destination.
// Organ and attribute nodes point at their lesion node, intra-organ edges
// connect lesion pairs in both directions.
enum class RelationType { kLesionOrgan = 0, kLesionAttribute = 1, kIntraOrgan = 2 };

struct GraphNode {
  int id = 0;
  NodeKind kind = NodeKind::kLesion;
  std::string token;
};

struct GraphEdge {
  int src = 0;
  int dst = 0;
  RelationType rel = RelationType::kLesionOrgan;
};

struct SemanticGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::vector<int> lesion_node;  // lesion id -> node id

  int node_count() const { return int(nodes.size()); }
  void validate() const;
};

struct GraphConfig {
  int d = 32;
  int d_r = 8;
  int layers = 2;
  int num_queries = 4;
  std::uint64_t seed = 2026;
};

// Node ordering: lesions by id, organs by id, then attribute nodes in first
// appearance order (attributes are deduplicated by token across lesions).
// A sub_location of "none" contributes no attribute node.
SemanticGraph build_graph(const ReportDoc& doc);

// Line-based dump (nodes then edges) for golden tests.
std::string dump_graph(const SemanticGraph& g);

// Token buckets used for attribute nodes.
std::string size_bucket_token(double volume_mm3);
std::string hu_bucket_token(double mean_hu);
std::string contrast_token(double delta_hu);

// Seeded token-keyed Gaussian rows, scale 1/sqrt(d). Identical tokens give
// identical vectors across graphs.
ad::Tensor init_embeddings(const SemanticGraph& g, int d, std::uint64_t seed);

// Registers all graph-side parameters (attention layers, relation table,
// query bank, query projection) with their initial values.
void init_graph_params(ParamStore& ps, const GraphConfig& cfg,
                       int feature_channels);

// One relation-aware attention layer:
//   alpha = softmax_{u in N(v)} [(Wq h_v)^T (Wk h_u + Wr r_uv) / sqrt(d)]
//   h'_v  = FFN(h_v) + sum_u alpha_uv Wv h_u
// FFN is residual: h + tanh(h W1 + b1) W2 + b2.
ad::Val graph_layer(ad::Tape& t, ad::Val h, const SemanticGraph& g,
                    const TapeParams& tp, const GraphConfig& cfg, int layer);

// Full stack from seeded embeddings to H^L.
ad::Val run_graph_layers(ad::Tape& t, const SemanticGraph& g,
                         const TapeParams& tp, const GraphConfig& cfg);

struct LesionQueryTape {
  int lesion_id = 0;
  ad::Val z;             // {1, d}
  ad::Val queries;       // {M, d}
  ad::Val queries_proj;  // {M, C} after the shared d->C projection
};

// z_i is the lesion node row of H^L; the query bank emits M queries as
// q(m) = z + MLP_m(z). When lequ_off is set, z_i is instead the mean of
// the initial embeddings of the lesion's own field nodes (no reasoning).
std::vector<LesionQueryTape> lesion_queries_tape(ad::Tape& t, ad::Val h_final,
                                                 const SemanticGraph& g,
                                                 const TapeParams& tp,
                                                 const GraphConfig& cfg,
                                                 bool lequ_off = false);

struct LesionQuerySet {
  int lesion_id = 0;
  std::vector<double> z;
  std::vector<std::vector<double>> queries;
  void validate() const;
};

std::vector<LesionQuerySet> lesion_queries(const SemanticGraph& g,
                                           const ParamStore& ps,
                                           const GraphConfig& cfg);

}  // namespace gleve
