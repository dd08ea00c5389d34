#pragma once

#include "ost/data.hpp"
#include "ost/model.hpp"
#include "ost/tracker.hpp"

#include <string>
#include <vector>

namespace ost {

struct SequenceMetrics {
  std::string seq_id;
  Index frames = 0;  // scored frames (the given first frame is excluded)
  double mean_iou = 0.0;
  double mean_distance = 0.0;
};

// One-pass-evaluation metrics. Success averages the fraction of frames whose
// 3D IoU exceeds each of 101 thresholds placed at the midpoints of a uniform
// partition of [0, 1]; Precision does the same for center distance <= the
// midpoints over [0, 2] meters. Both are scaled to [0, 100]. Frames pool
// across sequences; frame 0 of each sequence is excluded.
struct MetricReport {
  double success = 0.0;
  double precision = 0.0;
  Index frames = 0;
  std::vector<SequenceMetrics> per_sequence;
  std::vector<double> iou_thresholds, success_curve;
  std::vector<double> dist_thresholds, precision_curve;
};

MetricReport evaluate(const std::vector<TrackResult>& predictions,
                      const std::vector<Sequence>& ground_truth);

void write_metrics_json(const std::string& path, const MetricReport& report);

// ---------------------------------------------------------------------------
// Cost accounting. FLOPs count multiply-adds of the dense kernels (matmul,
// attention products, convolutions) as 2 operations each; activations,
// softmax normalizers and pointwise ops are not counted.

struct CostReport {
  Index params = 0;
  long long flops_local_encoder = 0;
  long long flops_ttm = 0;  // all transformer layers
  long long flops_mfa = 0;
  long long flops_seg = 0;
  long long flops_bev_head = 0;
  long long flops_total = 0;
  double measured_ms_per_frame = 0.0;  // 0 until a bench fills it in
};

CostReport count_params_flops(const ModelConfig& cfg);

void write_cost_json(const std::string& path, const CostReport& report);

// ---------------------------------------------------------------------------
// Class-agnostic protocol

struct AgnosticReport {
  std::string setting;
  MetricReport observed;  // held-out scenes, training categories
  MetricReport unseen;    // sequences of the held-out categories
};

// Tracks and scores both partitions. `trained_categories` is the manifest of
// what the checkpoint saw in training; any overlap with the setting's unseen
// categories is a hard error.
AgnosticReport run_class_agnostic(const AgnosticSetting& setting,
                                  const std::vector<std::string>& trained_categories,
                                  const ModelParams& params, const ModelConfig& cfg,
                                  const TrackerConfig& tracker,
                                  const std::vector<Sequence>& observed_sequences,
                                  const std::vector<Sequence>& unseen_sequences);

}  // namespace ost
