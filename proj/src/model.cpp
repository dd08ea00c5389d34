#include "ost/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ost {

std::vector<Index> ModelConfig::tap_counts() const {
  std::vector<Index> counts = mfa_taps;
  counts.push_back(n_search);
  if (mfa_direction == MfaDirection::DeepToShallow) std::reverse(counts.begin(), counts.end());
  return counts;
}

void ModelConfig::validate() const {
  if (n_template <= 0 || n_search <= 0) throw std::invalid_argument("point counts must be positive");
  if (feature_dim <= 0 || n_heads <= 0 || feature_dim % n_heads != 0) {
    throw std::invalid_argument("feature_dim must be a positive multiple of n_heads");
  }
  if (n_ttm_layers <= 0) throw std::invalid_argument("need at least one transformer layer");
  if (static_cast<Index>(mfa_taps.size()) != n_ttm_layers - 1) {
    throw std::invalid_argument("mfa_taps must have n_ttm_layers - 1 entries");
  }
  Index prev = 0;
  for (Index t : mfa_taps) {
    if (t <= prev || t > n_search) throw std::invalid_argument("mfa_taps must be ascending and <= n_search");
    prev = t;
  }
  if (gcn_neighbors <= 0 || gcn_radius <= 0.0) {
    throw std::invalid_argument("gcn neighborhood must be positive");
  }
  if (conv_channels <= 0) throw std::invalid_argument("conv_channels must be positive");
}

// ---------------------------------------------------------------------------
// Parameter construction

namespace {

Tensor uniform_init(Shape shape, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  ArrayX v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return Tensor::from_array(std::move(shape), std::move(v), true);
}

LinearParams init_linear(Index d_in, Index d_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
  LinearParams p;
  p.w = uniform_init({d_in, d_out}, limit, rng);
  p.b = Tensor::zeros({d_out}, true);
  return p;
}

ConvParams init_conv(Index c_out, Index c_in, Index k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(c_in * k * k);
  const double fan_out = static_cast<double>(c_out * k * k);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  ConvParams p;
  p.kernel = uniform_init({c_out, c_in, k, k}, limit, rng);
  p.bias = Tensor::zeros({c_out}, true);
  return p;
}

void push_linear(std::vector<NamedParam>& out, const std::string& prefix, LinearParams& p) {
  out.push_back({prefix + ".w", p.w});
  out.push_back({prefix + ".b", p.b});
}

void push_conv(std::vector<NamedParam>& out, const std::string& prefix, ConvParams& p) {
  out.push_back({prefix + ".kernel", p.kernel});
  out.push_back({prefix + ".bias", p.bias});
}

std::vector<Index> iota_rows(Index begin, Index end) {
  std::vector<Index> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return rows;
}

Tensor slice_rows(const Tensor& x, Index begin, Index end) {
  return gather_rows(x, iota_rows(begin, end));
}

Tensor points_tensor(const Points& pts) {
  ArrayX v = Eigen::Map<const ArrayX>(pts.data(), pts.size());
  return Tensor::from_array({pts.rows(), 3}, std::move(v));
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const Index d = cfg.feature_dim;

  ModelParams p;
  p.gcn.resize(2);
  p.gcn[0].message = init_linear(3, d, rng);
  p.gcn[0].update = init_linear(d, d, rng);
  p.gcn[1].message = init_linear(d + 3, d, rng);
  p.gcn[1].update = init_linear(d, d, rng);

  p.ttm.resize(cfg.n_ttm_layers);
  for (TtmLayerParams& t : p.ttm) {
    t.pe_hidden = init_linear(3, d, rng);
    t.pe_out = init_linear(d, d, rng);
    t.q = init_linear(d, d, rng);
    t.k = init_linear(d, d, rng);
    t.v = init_linear(d, d, rng);
    t.o = init_linear(d, d, rng);
    t.ln1_gain = Tensor::full({d}, 1.0, true);
    t.ln1_bias = Tensor::zeros({d}, true);
    t.ffn_hidden = init_linear(d, 2 * d, rng);
    t.ffn_out = init_linear(2 * d, d, rng);
    t.ln2_gain = Tensor::full({d}, 1.0, true);
    t.ln2_bias = Tensor::zeros({d}, true);
  }

  p.mfa_combine.resize(cfg.n_ttm_layers - 1);
  for (LinearParams& c : p.mfa_combine) c = init_linear(2 * d, d, rng);

  p.seg_hidden = init_linear(d, d, rng);
  p.seg_out = init_linear(d, 1, rng);

  const Index aug = 4 + d;  // score + xyz + features
  p.trunk.resize(3);
  p.trunk[0] = init_conv(cfg.conv_channels, aug, 3, rng);
  p.trunk[1] = init_conv(cfg.conv_channels, cfg.conv_channels, 3, rng);
  p.trunk[2] = init_conv(cfg.conv_channels, cfg.conv_channels, 3, rng);
  p.head_heatmap = init_conv(1, cfg.conv_channels, 1, rng);
  p.head_offset = init_conv(3, cfg.conv_channels, 1, rng);
  p.head_z = init_conv(1, cfg.conv_channels, 1, rng);
  return p;
}

std::vector<NamedParam> ModelParams::named() {
  std::vector<NamedParam> out;
  for (size_t i = 0; i < gcn.size(); ++i) {
    const std::string prefix = "gcn." + std::to_string(i);
    push_linear(out, prefix + ".message", gcn[i].message);
    push_linear(out, prefix + ".update", gcn[i].update);
  }
  for (size_t i = 0; i < ttm.size(); ++i) {
    const std::string prefix = "ttm." + std::to_string(i);
    TtmLayerParams& t = ttm[i];
    push_linear(out, prefix + ".pe_hidden", t.pe_hidden);
    push_linear(out, prefix + ".pe_out", t.pe_out);
    push_linear(out, prefix + ".q", t.q);
    push_linear(out, prefix + ".k", t.k);
    push_linear(out, prefix + ".v", t.v);
    push_linear(out, prefix + ".o", t.o);
    out.push_back({prefix + ".ln1.gain", t.ln1_gain});
    out.push_back({prefix + ".ln1.bias", t.ln1_bias});
    push_linear(out, prefix + ".ffn_hidden", t.ffn_hidden);
    push_linear(out, prefix + ".ffn_out", t.ffn_out);
    out.push_back({prefix + ".ln2.gain", t.ln2_gain});
    out.push_back({prefix + ".ln2.bias", t.ln2_bias});
  }
  for (size_t i = 0; i < mfa_combine.size(); ++i) {
    push_linear(out, "mfa." + std::to_string(i), mfa_combine[i]);
  }
  push_linear(out, "seg.hidden", seg_hidden);
  push_linear(out, "seg.out", seg_out);
  for (size_t i = 0; i < trunk.size(); ++i) {
    push_conv(out, "bev.trunk." + std::to_string(i), trunk[i]);
  }
  push_conv(out, "bev.heatmap", head_heatmap);
  push_conv(out, "bev.offset", head_offset);
  push_conv(out, "bev.z", head_z);
  return out;
}

std::vector<Tensor> ModelParams::tensors() {
  std::vector<Tensor> out;
  for (NamedParam& p : named()) out.push_back(p.tensor);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;  // shares nodes, rebind below
  auto fresh = [](Tensor& t) {
    t = Tensor::from_array(t.shape(), t.values(), true);
  };
  auto fresh_linear = [&](LinearParams& l) {
    fresh(l.w);
    fresh(l.b);
  };
  auto fresh_conv = [&](ConvParams& c) {
    fresh(c.kernel);
    fresh(c.bias);
  };
  for (GcnLayerParams& g : copy.gcn) {
    fresh_linear(g.message);
    fresh_linear(g.update);
  }
  for (TtmLayerParams& t : copy.ttm) {
    fresh_linear(t.pe_hidden);
    fresh_linear(t.pe_out);
    fresh_linear(t.q);
    fresh_linear(t.k);
    fresh_linear(t.v);
    fresh_linear(t.o);
    fresh(t.ln1_gain);
    fresh(t.ln1_bias);
    fresh_linear(t.ffn_hidden);
    fresh_linear(t.ffn_out);
    fresh(t.ln2_gain);
    fresh(t.ln2_bias);
  }
  for (LinearParams& c : copy.mfa_combine) fresh_linear(c);
  fresh_linear(copy.seg_hidden);
  fresh_linear(copy.seg_out);
  for (ConvParams& c : copy.trunk) fresh_conv(c);
  fresh_conv(copy.head_heatmap);
  fresh_conv(copy.head_offset);
  fresh_conv(copy.head_z);
  return copy;
}

// ---------------------------------------------------------------------------
// Attention record

MatrixX AttentionRecord::block(Index head, bool row_template, bool col_template) const {
  const MatrixX& a = attn.at(head);
  const Index nt = n_template, ns = n_tokens - n_template;
  const Index r0 = row_template ? 0 : nt, rn = row_template ? nt : ns;
  const Index c0 = col_template ? 0 : nt, cn = col_template ? nt : ns;
  return a.block(r0, c0, rn, cn);
}

MatrixX AttentionRecord::value_template(Index head) const {
  return value.at(head).topRows(n_template);
}
MatrixX AttentionRecord::value_search(Index head) const {
  return value.at(head).bottomRows(n_tokens - n_template);
}
MatrixX AttentionRecord::context_template(Index head) const {
  return context.at(head).topRows(n_template);
}
MatrixX AttentionRecord::context_search(Index head) const {
  return context.at(head).bottomRows(n_tokens - n_template);
}

// ---------------------------------------------------------------------------
// Forward pieces

Tensor local_encode(const Points& pts, const std::vector<GcnLayerParams>& layers,
                    double radius, Index neighbors) {
  if (layers.size() != 2) throw std::invalid_argument("local encoder expects 2 layers");
  const Index n = pts.rows();
  if (n == 0) throw std::invalid_argument("local_encode on an empty cloud");

  std::vector<Index> flat_nbr;
  flat_nbr.reserve(n * neighbors);
  Points rel(n * neighbors, 3);
  for (Index i = 0; i < n; ++i) {
    const auto nbrs = ball_query(pts, Eigen::Vector3d(pts.row(i)), radius, neighbors);
    for (Index j = 0; j < neighbors; ++j) {
      flat_nbr.push_back(nbrs[j]);
      rel.row(i * neighbors + j) = pts.row(nbrs[j]) - pts.row(i);
    }
  }
  Tensor rel_t = points_tensor(rel);

  Tensor feats;
  for (size_t l = 0; l < layers.size(); ++l) {
    Tensor edge_in;
    if (l == 0) {
      edge_in = rel_t;
    } else {
      edge_in = concat({gather_rows(feats, flat_nbr), rel_t}, 1);
    }
    Tensor msg = relu(linear(edge_in, layers[l].message.w, layers[l].message.b));
    const Index d = msg.extent(1);
    Tensor pooled = reduce(reshape(msg, {n, neighbors, d}), 1, Reduce::Max);
    feats = relu(linear(pooled, layers[l].update.w, layers[l].update.b));
  }
  return feats;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2) throw std::invalid_argument("layer_norm expects [rows, d]");
  const Index rows = x.extent(0);
  Tensor mu = reshape(reduce(x, 1, Reduce::Mean), {rows, 1});
  Tensor centered = x - mu;
  Tensor var = reshape(reduce(centered * centered, 1, Reduce::Mean), {rows, 1});
  Tensor norm = centered / sqrt(add_scalar(var, eps));
  return norm * gain + bias;
}

Tensor ttm_layer_forward(const Points& coords, const Tensor& feats, const TtmLayerParams& p,
                         Index n_heads, Index n_template, const ForwardOptions& opts,
                         AttentionRecord* record) {
  const Index n = feats.extent(0), d = feats.extent(1);
  if (coords.rows() != n) throw std::invalid_argument("coords and features disagree on token count");
  if (d % n_heads != 0) throw std::invalid_argument("feature dim not divisible by heads");
  const Index dh = d / n_heads;

  Tensor pe = linear(relu(linear(points_tensor(coords), p.pe_hidden.w, p.pe_hidden.b)),
                     p.pe_out.w, p.pe_out.b);
  Tensor x = feats + pe;

  auto to_heads = [&](const Tensor& t) {
    // [n, d] -> [heads, n, dh]
    return transpose(reshape(t, {n, n_heads, dh}), 0, 1);
  };
  Tensor q = to_heads(linear(x, p.q.w, p.q.b));
  Tensor k = to_heads(linear(x, p.k.w, p.k.b));
  Tensor v = to_heads(linear(x, p.v.w, p.v.b));

  Tensor scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor attn;
  if (opts.attention == AttentionMode::Full) {
    attn = softmax(scores, 2);
  } else {
    // Cross blocks removed: template rows see template columns only, search
    // rows see search columns only, identically across heads.
    std::vector<std::uint8_t> keep(n_heads * n * n);
    for (Index h = 0; h < n_heads; ++h) {
      for (Index r = 0; r < n; ++r) {
        const bool rt = r < n_template;
        for (Index c = 0; c < n; ++c) {
          keep[(h * n + r) * n + c] = (c < n_template) == rt ? 1 : 0;
        }
      }
    }
    attn = softmax_masked(scores, 2, keep);
  }

  Tensor ctx = matmul(attn, v);  // [heads, n, dh]

  if (record) {
    record->n_template = n_template;
    record->n_tokens = n;
    record->attn.clear();
    record->value.clear();
    record->context.clear();
    for (Index h = 0; h < n_heads; ++h) {
      record->attn.push_back(
          Eigen::Map<const MatrixX>(attn.values().data() + h * n * n, n, n));
      record->value.push_back(
          Eigen::Map<const MatrixX>(v.values().data() + h * n * dh, n, dh));
      record->context.push_back(
          Eigen::Map<const MatrixX>(ctx.values().data() + h * n * dh, n, dh));
    }
  }

  Tensor merged = reshape(transpose(ctx, 0, 1), {n, d});
  Tensor attended = linear(merged, p.o.w, p.o.b);
  Tensor res1 = layer_norm(x + attended, p.ln1_gain, p.ln1_bias);
  Tensor ffn = linear(relu(linear(res1, p.ffn_hidden.w, p.ffn_hidden.b)), p.ffn_out.w, p.ffn_out.b);
  return layer_norm(res1 + ffn, p.ln2_gain, p.ln2_bias);
}

std::vector<LayerTap> one_stream_forward(const PointCloud& tmpl, const PointCloud& search,
                                         const ModelParams& params, const ModelConfig& cfg,
                                         const ForwardOptions& opts,
                                         ModelDiagnostics* diagnostics) {
  if (tmpl.size() != cfg.n_template || search.size() != cfg.n_search) {
    throw std::invalid_argument("cloud sizes do not match the model configuration");
  }
  Tensor tf = local_encode(tmpl.xyz, params.gcn, cfg.gcn_radius, cfg.gcn_neighbors);
  Tensor sf = local_encode(search.xyz, params.gcn, cfg.gcn_radius, cfg.gcn_neighbors);

  const Index nt = cfg.n_template, ns = cfg.n_search;
  Points coords(nt + ns, 3);
  coords.topRows(nt) = tmpl.xyz;
  coords.bottomRows(ns) = search.xyz;
  Tensor feats = concat({tf, sf}, 0);

  if (diagnostics) diagnostics->attention.assign(cfg.n_ttm_layers, {});
  const std::vector<Index> counts = cfg.tap_counts();
  std::vector<LayerTap> taps(cfg.n_ttm_layers);
  for (Index l = 0; l < cfg.n_ttm_layers; ++l) {
    AttentionRecord* rec =
        diagnostics && opts.record_attention ? &diagnostics->attention[l] : nullptr;
    feats = ttm_layer_forward(coords, feats, params.ttm[l], cfg.n_heads, nt, opts, rec);

    Tensor search_feats = slice_rows(feats, nt, nt + ns);
    if (counts[l] == ns) {
      taps[l] = {search.xyz, search_feats};
    } else {
      const auto idx = farthest_point_sample(search.xyz, counts[l], opts.fps_start);
      Points sub(counts[l], 3);
      for (Index i = 0; i < counts[l]; ++i) sub.row(i) = search.xyz.row(idx[i]);
      taps[l] = {std::move(sub), gather_rows(search_feats, idx)};
    }
  }
  return taps;
}

LayerTap mfa_forward(const std::vector<LayerTap>& taps, MfaDirection direction,
                     const std::vector<LinearParams>& combine) {
  if (taps.empty()) throw std::invalid_argument("mfa_forward with no taps");
  if (combine.size() + 1 != taps.size()) {
    throw std::invalid_argument("mfa_forward needs one combine stage per tap transition");
  }
  std::vector<Index> order(taps.size());
  std::iota(order.begin(), order.end(), Index{0});
  if (direction == MfaDirection::DeepToShallow) std::reverse(order.begin(), order.end());

  const LayerTap* current = &taps[order[0]];
  LayerTap carried;
  for (size_t s = 1; s < order.size(); ++s) {
    const LayerTap& next = taps[order[s]];
    const InterpolationPlan plan = interpolation_plan(current->coords, next.coords);
    Tensor prop = interpolate_features(current->feats, plan);
    Tensor merged = relu(linear(concat({prop, next.feats}, 1), combine[s - 1].w, combine[s - 1].b));
    carried = {next.coords, merged};
    current = &carried;
  }
  if (taps.size() == 1) return taps[0];

  // The reversed walk ends on the smallest subset; lift the result back onto
  // the full search set so both directions satisfy the same contract.
  const LayerTap& full = taps.back();
  if (carried.coords.rows() != full.coords.rows()) {
    const InterpolationPlan lift = interpolation_plan(carried.coords, full.coords);
    carried = {full.coords, interpolate_features(carried.feats, lift)};
  }
  return carried;
}

Tensor segment_scores(const Tensor& feats, const ModelParams& params) {
  Tensor hidden = relu(linear(feats, params.seg_hidden.w, params.seg_hidden.b));
  Tensor logits = linear(hidden, params.seg_out.w, params.seg_out.b);
  return reshape(sigmoid(logits), {feats.extent(0)});
}

Tensor augment_features(const Tensor& scores, const Points& coords, const Tensor& feats) {
  const Index n = feats.extent(0);
  if (scores.numel() != n || coords.rows() != n) {
    throw std::invalid_argument("augment_features inputs disagree on point count");
  }
  return concat({reshape(scores, {n, 1}), points_tensor(coords), feats}, 1);
}

HeadOutputs bev_head_forward(const BevImage& bev, const ModelParams& params) {
  Tensor x = bev.features;
  for (const ConvParams& c : params.trunk) {
    const Index co = c.kernel.extent(0);
    x = relu(conv2d(x, c.kernel, 1, 1) + reshape(c.bias, {co, 1, 1}));
  }
  const Index ny = x.extent(1), nx = x.extent(2);
  auto head = [&](const ConvParams& c) {
    const Index co = c.kernel.extent(0);
    return conv2d(x, c.kernel, 1, 0) + reshape(c.bias, {co, 1, 1});
  };

  HeadOutputs out;
  out.heatmap = reshape(sigmoid(head(params.head_heatmap)), {ny, nx});
  out.offset_rot = head(params.head_offset);
  out.zmap = reshape(head(params.head_z), {ny, nx});
  out.bev_mask = bev.mask;
  return out;
}

HeadOutputs model_forward(const PointCloud& tmpl, const PointCloud& search,
                          const ModelParams& params, const ModelConfig& cfg,
                          const ForwardOptions& opts, ModelDiagnostics* diagnostics) {
  const std::vector<LayerTap> taps = one_stream_forward(tmpl, search, params, cfg, opts, diagnostics);
  const LayerTap merged = mfa_forward(taps, cfg.mfa_direction, params.mfa_combine);
  Tensor seg = segment_scores(merged.feats, params);
  Tensor aug = augment_features(seg, merged.coords, merged.feats);
  const BevImage bev = voxelize_bev(merged.coords, aug, cfg.bev_grid);
  HeadOutputs out = bev_head_forward(bev, params);
  out.seg = seg;
  return out;
}

}  // namespace ost
