#include "samic/sass.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace samic {

void ClusterConfig::validate() const {
  if (clusters < 1) throw std::invalid_argument("cluster count must be at least 1");
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
  if (semantic_dim < 2) throw std::invalid_argument("semantic dimension must be at least 2");
}

SemanticExtractor SemanticExtractor::make(Index channels, Index semantic_dim, Rng& rng) {
  SemanticExtractor e;
  e.conv1 = Conv2dLayer::make(channels, semantic_dim, 3, 1, rng);
  e.conv2 = Conv2dLayer::make(semantic_dim, semantic_dim, 3, 1, rng);
  e.proj = Conv2dLayer::make(semantic_dim, semantic_dim, 1, 1, rng);
  return e;
}

void SemanticExtractor::collect(const std::string& prefix, ParamList& out) const {
  conv1.collect(prefix + ".conv1", out);
  conv2.collect(prefix + ".conv2", out);
  proj.collect(prefix + ".proj", out);
}

Tensord SemanticAssignment::one_hot() const {
  const Index n = static_cast<Index>(labels.size());
  const Index k = static_cast<Index>(keys.size());
  Tensord q({k, n});
  for (Index i = 0; i < n; ++i) q.mutable_value()[labels[static_cast<std::size_t>(i)] * n + i] = 1.0;
  return q;
}

Tensord extract_semantic_features(const Tensord& x, const SemanticExtractor& net) {
  if (x.rank() != 3 || x.dim(0) != net.conv1.in_channels()) {
    throw std::invalid_argument("semantic extractor expects " + std::to_string(net.conv1.in_channels()) +
                                " channels, got " + to_string(x.shape()));
  }
  return net.proj(silu(net.conv2(silu(net.conv1(x)))));
}

Tensord add_positional_encoding(const Tensord& features) {
  if (features.rank() != 3) throw std::invalid_argument("positional encoding expects C x H x W");
  const Index c = features.dim(0), h = features.dim(1), w = features.dim(2);
  if (c < 2) throw std::invalid_argument("positional encoding needs at least 2 channels");
  Tensord pe({c, h, w});
  auto& v = pe.mutable_value();
  const Index half = c / 2;
  for (Index ch = 0; ch < c; ++ch)
    for (Index r = 0; r < h; ++r)
      for (Index col = 0; col < w; ++col) {
        v[(ch * h + r) * w + col] = ch < half
                                        ? std::sin(std::numbers::pi * static_cast<double>(r) / static_cast<double>(h))
                                        : std::cos(std::numbers::pi * static_cast<double>(col) / static_cast<double>(w));
      }
  return add(features, pe);
}

Tensord soft_assign(const Tensord& features, const Tensord& centers, double temperature) {
  if (centers.rank() != 2 || centers.dim(1) != features.dim(0)) {
    throw std::invalid_argument("centers " + to_string(centers.shape()) + " do not match features " +
                                to_string(features.shape()));
  }
  Tensord pixels = normalize_rows(to_tokens(features));  // N x C_sem
  Tensord c = normalize_rows(centers);                   // K x C_sem
  Tensord sim = mul_scalar(matmul(c, transpose(pixels)), 1.0 / temperature);
  return softmax(sim, 0);
}

std::vector<int> hard_assign(const Tensord& p, bool gumbel, std::uint64_t seed) {
  const Index k = p.dim(0), n = p.dim(1);
  const auto& pv = p.value();
  std::vector<int> labels(static_cast<std::size_t>(n), 0);
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> noise(static_cast<std::size_t>(k), 0.0);
  for (Index i = 0; i < n; ++i) {
    if (gumbel) {
      for (auto& g : noise) {
        double u = unif(rng);
        while (u <= 0.0) u = unif(rng);
        g = -std::log(-std::log(u));
      }
    }
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Index c = 0; c < k; ++c) {
      const double score = gumbel ? std::log(pv[c * n + i]) + noise[static_cast<std::size_t>(c)] : pv[c * n + i];
      if (score > best) {
        best = score;
        arg = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = arg;
  }
  return labels;
}

std::vector<SortKey> cluster_sort_keys(const std::vector<int>& labels, int clusters, Index height, Index width) {
  if (static_cast<Index>(labels.size()) != height * width) throw std::invalid_argument("label count != H * W");
  std::vector<double> rows(static_cast<std::size_t>(clusters), 0.0), cols(rows), count(rows);
  for (Index i = 0; i < height * width; ++i) {
    const auto k = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    if (k >= rows.size()) throw std::out_of_range("cluster id out of range");
    rows[k] += static_cast<double>(i / width);
    cols[k] += static_cast<double>(i % width);
    count[k] += 1.0;
  }
  std::vector<SortKey> keys(static_cast<std::size_t>(clusters));
  for (std::size_t k = 0; k < keys.size(); ++k) {
    if (count[k] > 0) keys[k] = {rows[k] / count[k], cols[k] / count[k]};
  }
  return keys;
}

std::pair<std::vector<Index>, std::vector<Index>> build_permutation(const std::vector<int>& labels,
                                                                  const std::vector<SortKey>& keys) {
  std::vector<int> order(keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const SortKey& ka = keys[static_cast<std::size_t>(a)];
    const SortKey& kb = keys[static_cast<std::size_t>(b)];
    if (ka.row != kb.row) return ka.row < kb.row;
    if (ka.col != kb.col) return ka.col < kb.col;
    return a < b;
  });
  std::vector<Index> rank(keys.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[static_cast<std::size_t>(order[r])] = static_cast<Index>(r);

  // Counting sort by cluster rank keeps raster order inside each run.
  std::vector<Index> start(keys.size() + 1, 0);
  for (int l : labels) ++start[static_cast<std::size_t>(rank[static_cast<std::size_t>(l)]) + 1];
  std::partial_sum(start.begin(), start.end(), start.begin());
  std::vector<Index> perm(labels.size()), inverse(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Index pos = start[static_cast<std::size_t>(rank[static_cast<std::size_t>(labels[i])])]++;
    perm[static_cast<std::size_t>(pos)] = static_cast<Index>(i);
    inverse[i] = pos;
  }
  return {std::move(perm), std::move(inverse)};
}

void write_scan_trace(std::ostream& os, const SemanticAssignment& a) {
  os << "seq_pos,pixel_row,pixel_col,cluster_id\n";
  for (std::size_t s = 0; s < a.perm.size(); ++s) {
    const Index i = a.perm[s];
    os << s << ',' << i / a.width << ',' << i % a.width << ',' << a.labels[static_cast<std::size_t>(i)] << '\n';
  }
}

SsmParams SsmParams::make(Index channels, Index state_dim, Index dt_rank, Rng& rng) {
  SsmParams p;
  p.x_proj = LinearLayer::make(channels, dt_rank + 2 * state_dim, rng, false);
  p.dt_proj = LinearLayer::make(dt_rank, channels, rng, true);
  // Initial step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus.
  std::uniform_real_distribution<double> unif(std::log(1e-3), std::log(1e-1));
  for (auto& b : p.dt_proj.bias.mutable_value()) {
    const double dt = std::exp(unif(rng));
    b = dt + std::log(-std::expm1(-dt));
  }
  p.log_a = Tensord({channels, state_dim});
  for (Index e = 0; e < channels; ++e)
    for (Index s = 0; s < state_dim; ++s) p.log_a.mutable_value()[e * state_dim + s] = std::log(static_cast<double>(s + 1));
  p.d_skip = Tensord::constant({1, channels}, 1.0);
  return p;
}

void SsmParams::collect(const std::string& prefix, ParamList& out) const {
  x_proj.collect(prefix + ".x_proj", out);
  dt_proj.collect(prefix + ".dt_proj", out);
  out.emplace_back(prefix + ".log_a", log_a);
  out.emplace_back(prefix + ".d_skip", d_skip);
}

Tensord ssm_scan(const Tensord& seq, const SsmParams& params) {
  if (seq.rank() != 2 || seq.dim(0) < 1) throw std::invalid_argument("ssm_scan expects a non-empty N x E sequence");
  const Index r = params.dt_rank(), s = params.state_dim();
  Tensord proj = params.x_proj(seq);
  Tensord delta = softplus(params.dt_proj(slice(proj, 1, 0, r)));
  Tensord b = slice(proj, 1, r, r + s);
  Tensord c = slice(proj, 1, r + s, r + 2 * s);
  Tensord a = neg(exp(params.log_a));
  return selective_scan(seq, delta, a, b, c, params.d_skip);
}

SambBlock SambBlock::make(Index channels, const ClusterConfig& cluster, Rng& rng, Index expand, Index state_dim) {
  cluster.validate();
  const Index e = expand * channels;
  SambBlock b;
  b.cluster = cluster;
  b.norm = LayerNormParams::make(channels);
  b.in_proj = LinearLayer::make(channels, 2 * e, rng, false);
  b.conv_w = uniform_init({e, 3, 3}, 1.0 / 3.0, rng);
  b.conv_b = Tensord({e});
  b.ssm = SsmParams::make(e, state_dim, std::max<Index>(1, (channels + 15) / 16), rng);
  b.out_norm = LayerNormParams::make(e);
  b.out_proj = LinearLayer::make(e, channels, rng, false);
  b.extractor = SemanticExtractor::make(channels, cluster.semantic_dim, rng);
  b.centers = normal_init({cluster.clusters, cluster.semantic_dim}, 1.0, rng);
  return b;
}

void SambBlock::collect(const std::string& prefix, ParamList& out) const {
  norm.collect(prefix + ".norm", out);
  in_proj.collect(prefix + ".in_proj", out);
  out.emplace_back(prefix + ".conv.weight", conv_w);
  out.emplace_back(prefix + ".conv.bias", conv_b);
  ssm.collect(prefix + ".ssm", out);
  out_norm.collect(prefix + ".out_norm", out);
  out_proj.collect(prefix + ".out_proj", out);
  extractor.collect(prefix + ".semantic", out);
  out.emplace_back(prefix + ".centers", centers);
}

namespace {

Tensord soft_probabilities(const Tensord& x, const SambBlock& block) {
  const Index n = x.dim(1) * x.dim(2);
  if (block.cluster.clusters == 1) return Tensord::constant({1, n}, 1.0);
  Tensord features = add_positional_encoding(extract_semantic_features(x, block.extractor));
  return soft_assign(features, block.centers, block.cluster.temperature);
}

}  // namespace

SemanticAssignment compute_assignment(const Tensord& x, const SambBlock& block, bool training, std::uint64_t seed) {
  SemanticAssignment a;
  a.height = x.dim(1);
  a.width = x.dim(2);
  a.p = soft_probabilities(x, block);
  a.labels = hard_assign(a.p, training && block.cluster.gumbel, seed);
  a.keys = cluster_sort_keys(a.labels, block.cluster.clusters, a.height, a.width);
  std::tie(a.perm, a.inverse) = build_permutation(a.labels, a.keys);
  return a;
}

Tensord samb_forward(const Tensord& x, const SambBlock& block, const SambOptions& options) {
  if (x.rank() != 3 || x.dim(0) != block.channels()) {
    throw std::invalid_argument("SAMB expects " + std::to_string(block.channels()) + " channels, got " +
                                to_string(x.shape()));
  }
  const Index h = x.dim(1), w = x.dim(2), n = h * w;
  const Index e = block.conv_w.dim(0);

  SemanticAssignment assignment;
  Tensord selected;  // N x 1 probability of the chosen cluster
  if (options.frozen != nullptr) {
    assignment = *options.frozen;
    if (assignment.height != h || assignment.width != w) throw std::invalid_argument("frozen assignment size mismatch");
    Tensord p = soft_probabilities(x, block);
    Tensord q = assignment.one_hot();
    Tensord s = reshape(sum_axis(mul(p, q), 0), {n, 1});
    Tensord s0(Shape{n, 1}, sum_axis(mul(assignment.p.detach(), q), 0).value());
    selected = add_scalar(sub(s, s0), 1.0);
  } else {
    assignment = compute_assignment(x, block, options.training, options.seed);
    Tensord q = assignment.one_hot();
    Tensord s = reshape(sum_axis(mul(assignment.p, q), 0), {n, 1});
    selected = straight_through(Tensord::constant({n, 1}, 1.0), s);
  }

  Tensord tokens = to_tokens(x);
  Tensord xz = block.in_proj(block.norm(tokens));
  Tensord value = from_tokens(slice(xz, 1, 0, e), h, w);
  Tensord gate = slice(xz, 1, e, 2 * e);
  value = to_tokens(silu(depthwise_conv2d(value, block.conv_w, block.conv_b)));
  value = mul(value, selected);

  Tensord scanned = ssm_scan(gather_rows(value, std::span<const Index>(assignment.perm)), block.ssm);
  Tensord restored = gather_rows(scanned, std::span<const Index>(assignment.inverse));
  Tensord mixed = mul(block.out_norm(restored), silu(gate));
  Tensord out = add(tokens, block.out_proj(mixed));
  if (options.record != nullptr) *options.record = std::move(assignment);
  return from_tokens(out, h, w);
}

}  // namespace samic
