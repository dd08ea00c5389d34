#pragma once

#include "ost/checkpoint.hpp"
#include "ost/geometry.hpp"
#include "ost/point_ops.hpp"
#include "ost/tensor.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace ost {

// Order of multi-level aggregation across transformer layers. ShallowToDeep
// starts from the sparsest early-layer subset and propagates towards the full
// search set at the last layer; DeepToShallow reverses the tap sizes and
// walks the other way. Both end on the full search point set.
enum class MfaDirection { ShallowToDeep, DeepToShallow };

struct ModelConfig {
  Index n_template = 512;
  Index n_search = 1024;
  Index feature_dim = 64;
  Index n_heads = 4;
  Index n_ttm_layers = 3;
  // Search-subset sizes tapped after each transformer layer except the last
  // (the last tap is always the full search set). Must be ascending and
  // have n_ttm_layers - 1 entries.
  std::vector<Index> mfa_taps = {256, 512};
  MfaDirection mfa_direction = MfaDirection::ShallowToDeep;
  Index gcn_neighbors = 16;
  double gcn_radius = 0.3;
  Index conv_channels = 64;
  BevGrid bev_grid;

  Index head_dim() const { return feature_dim / n_heads; }
  // Tap sizes per layer in trunk order, full search set last (or first for
  // DeepToShallow).
  std::vector<Index> tap_counts() const;
  void validate() const;
};

struct LinearParams {
  Tensor w, b;
};

struct GcnLayerParams {
  LinearParams message, update;
};

struct TtmLayerParams {
  LinearParams pe_hidden, pe_out;
  LinearParams q, k, v, o;
  Tensor ln1_gain, ln1_bias;
  LinearParams ffn_hidden, ffn_out;
  Tensor ln2_gain, ln2_bias;
};

struct ConvParams {
  Tensor kernel, bias;
};

struct ModelParams {
  std::vector<GcnLayerParams> gcn;        // 2 layers
  std::vector<TtmLayerParams> ttm;        // n_ttm_layers
  std::vector<LinearParams> mfa_combine;  // n_ttm_layers - 1
  LinearParams seg_hidden, seg_out;
  std::vector<ConvParams> trunk;          // 3 conv blocks
  ConvParams head_heatmap, head_offset, head_z;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  std::vector<NamedParam> named();  // deterministic order matching init
  std::vector<Tensor> tensors();
  // Fresh leaves with copied values, for per-worker replicas.
  ModelParams clone() const;
};

// Post-softmax attention of one transformer layer, recorded per head, plus
// the values it mixed. Token order is template rows first.
struct AttentionRecord {
  Index n_template = 0;
  Index n_tokens = 0;
  std::vector<MatrixX> attn;      // per head, [n_tokens, n_tokens]
  std::vector<MatrixX> value;     // per head, [n_tokens, head_dim]
  std::vector<MatrixX> context;   // per head, [n_tokens, head_dim]

  MatrixX block(Index head, bool row_template, bool col_template) const;
  MatrixX value_template(Index head) const;
  MatrixX value_search(Index head) const;
  MatrixX context_template(Index head) const;
  MatrixX context_search(Index head) const;
};

// Full lets every token attend everywhere; Isolated removes the
// template-search cross blocks entirely (excluded before the softmax), so
// the search rows compute as if the template tokens did not exist.
enum class AttentionMode { Full, Isolated };

struct ForwardOptions {
  AttentionMode attention = AttentionMode::Full;
  bool record_attention = false;
  Index fps_start = 0;  // start index for the per-layer search subset taps
};

struct LayerTap {
  Points coords;  // subset of search coordinates
  Tensor feats;
};

struct ModelDiagnostics {
  std::vector<AttentionRecord> attention;  // one per transformer layer
};

struct HeadOutputs {
  Tensor heatmap;                   // [ny, nx], probabilities
  Tensor offset_rot;                // [3, ny, nx]: dx, dy, yaw
  Tensor zmap;                      // [ny, nx]
  Tensor seg;                       // [n_search], probabilities
  std::vector<std::uint8_t> bev_mask;  // occupied BEV pixels
};

// Shared two-layer neighborhood encoder; first layer sees relative
// coordinates only, second sees features and relative coordinates.
Tensor local_encode(const Points& pts, const std::vector<GcnLayerParams>& layers,
                    double radius, Index neighbors);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// One transformer layer over the joint token sequence.
Tensor ttm_layer_forward(const Points& coords, const Tensor& feats, const TtmLayerParams& p,
                         Index n_heads, Index n_template, const ForwardOptions& opts,
                         AttentionRecord* record);

// Encoder + transformer trunk; returns per-layer search taps in trunk order.
std::vector<LayerTap> one_stream_forward(const PointCloud& tmpl, const PointCloud& search,
                                         const ModelParams& params, const ModelConfig& cfg,
                                         const ForwardOptions& opts,
                                         ModelDiagnostics* diagnostics = nullptr);

// Feature propagation across taps, combining at each level; returns features
// on the full search set.
LayerTap mfa_forward(const std::vector<LayerTap>& taps, MfaDirection direction,
                     const std::vector<LinearParams>& combine);

Tensor segment_scores(const Tensor& feats, const ModelParams& params);

// [score, xyz, feats] per point.
Tensor augment_features(const Tensor& scores, const Points& coords, const Tensor& feats);

HeadOutputs bev_head_forward(const BevImage& bev, const ModelParams& params);

HeadOutputs model_forward(const PointCloud& tmpl, const PointCloud& search,
                          const ModelParams& params, const ModelConfig& cfg,
                          const ForwardOptions& opts = {},
                          ModelDiagnostics* diagnostics = nullptr);

}  // namespace ost
