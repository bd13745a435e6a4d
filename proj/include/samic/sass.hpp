#pragma once

#include "samic/layers.hpp"

#include <iosfwd>
#include <limits>
#include <optional>

namespace samic {

struct ClusterConfig {
  int clusters = 16;       // K
  Index semantic_dim = 16;  // C_sem
  double temperature = 0.1;
  bool gumbel = true;  // Gumbel noise on hard assignment in training mode

  void validate() const;
};

/// Conv3x3 -> SiLU -> Conv3x3 -> SiLU -> Conv1x1 projection to the semantic space.
struct SemanticExtractor {
  Conv2dLayer conv1, conv2, proj;

  static SemanticExtractor make(Index channels, Index semantic_dim, Rng& rng);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct SortKey {
  double row = std::numeric_limits<double>::infinity();  // mean pixel row of the members
  double col = std::numeric_limits<double>::infinity();  // mean pixel column of the members
};

struct SemanticAssignment {
  Tensord p;                    // K x N soft probabilities
  std::vector<int> labels;      // hard cluster id per pixel (column of the one-hot q)
  std::vector<SortKey> keys;    // per cluster
  std::vector<Index> perm;      // sequence position -> raster index
  std::vector<Index> inverse;   // raster index -> sequence position
  Index height = 0, width = 0;

  /// K x N one-hot matrix q.
  Tensord one_hot() const;
};

Tensord extract_semantic_features(const Tensord& x, const SemanticExtractor& net);
/// Adds sin(pi * row / H) to the first half of the channels and cos(pi * col / W) to the rest.
Tensord add_positional_encoding(const Tensord& features);
/// Cosine similarity of every pixel to every center over tau, softmax over clusters. Returns K x N.
Tensord soft_assign(const Tensord& features, const Tensord& centers, double temperature);
/// argmax_k(log p + Gumbel noise); noise off gives argmax p. Ties go to the smaller k.
std::vector<int> hard_assign(const Tensord& p, bool gumbel, std::uint64_t seed);
std::vector<SortKey> cluster_sort_keys(const std::vector<int>& labels, int clusters, Index height, Index width);
/// Clusters in ascending (row, col, id) key order; raster order inside each cluster.
std::pair<std::vector<Index>, std::vector<Index>> build_permutation(const std::vector<int>& labels,
                                                                  const std::vector<SortKey>& keys);

/// CSV rows (seq_pos, pixel_row, pixel_col, cluster_id).
void write_scan_trace(std::ostream& os, const SemanticAssignment& a);

/// Input-dependent state-space mixer over an N x E token sequence.
struct SsmParams {
  LinearLayer x_proj;    // E -> dt_rank + 2 S, no bias
  LinearLayer dt_proj;   // dt_rank -> E, bias sets the initial step size
  Tensord log_a;         // E x S; A = -exp(log_a)
  Tensord d_skip;        // 1 x E

  static SsmParams make(Index channels, Index state_dim, Index dt_rank, Rng& rng);
  Index state_dim() const { return log_a.dim(1); }
  Index dt_rank() const { return dt_proj.weight.dim(0); }
  void collect(const std::string& prefix, ParamList& out) const;
};

Tensord ssm_scan(const Tensord& seq, const SsmParams& params);

struct SambBlock {
  ClusterConfig cluster;
  LayerNormParams norm;
  LinearLayer in_proj;   // C -> 2E (value and gate), no bias
  Tensord conv_w, conv_b;  // depthwise 3x3 on the value stream
  SsmParams ssm;
  LayerNormParams out_norm;
  LinearLayer out_proj;  // E -> C, no bias
  SemanticExtractor extractor;
  Tensord centers;       // K x C_sem

  static SambBlock make(Index channels, const ClusterConfig& cluster, Rng& rng, Index expand = 2,
                        Index state_dim = 8);
  Index channels() const { return norm.gamma.dim(1); }
  void collect(const std::string& prefix, ParamList& out) const;
};

struct SambOptions {
  bool training = false;
  std::uint64_t seed = 0;
  /// Reuse this assignment instead of recomputing one. The soft-path weight is
  /// then 1 + s - s0 with s0 the stored value, which equals the straight-through
  /// weight at the stored point but varies smoothly with the parameters.
  const SemanticAssignment* frozen = nullptr;
  /// Receives the assignment used by the forward pass.
  SemanticAssignment* record = nullptr;
};

SemanticAssignment compute_assignment(const Tensord& x, const SambBlock& block, bool training, std::uint64_t seed);
Tensord samb_forward(const Tensord& x, const SambBlock& block, const SambOptions& options = {});

}  // namespace samic
