#include "ost/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace ost {

using nlohmann::json;

namespace {
constexpr Index kThresholds = 101;
constexpr double kMaxDistance = 2.0;
}  // namespace

MetricReport evaluate(const std::vector<TrackResult>& predictions,
                      const std::vector<Sequence>& ground_truth) {
  MetricReport report;
  std::vector<double> ious, dists;

  for (const TrackResult& pred : predictions) {
    const Sequence* gt = nullptr;
    for (const Sequence& s : ground_truth) {
      if (s.id == pred.seq_id) {
        gt = &s;
        break;
      }
    }
    if (!gt) throw std::invalid_argument("no ground truth for sequence '" + pred.seq_id + "'");
    if (gt->frames.size() != pred.frames.size()) {
      throw std::invalid_argument("sequence '" + pred.seq_id + "' has " +
                                  std::to_string(pred.frames.size()) + " predictions for " +
                                  std::to_string(gt->frames.size()) + " frames");
    }

    SequenceMetrics sm;
    sm.seq_id = pred.seq_id;
    for (size_t t = 1; t < pred.frames.size(); ++t) {
      const double iou = iou_3d(pred.frames[t].box, gt->frames[t].gt);
      const double dist = center_distance(pred.frames[t].box, gt->frames[t].gt);
      ious.push_back(iou);
      dists.push_back(dist);
      sm.mean_iou += iou;
      sm.mean_distance += dist;
      ++sm.frames;
    }
    if (sm.frames > 0) {
      sm.mean_iou /= static_cast<double>(sm.frames);
      sm.mean_distance /= static_cast<double>(sm.frames);
    }
    report.per_sequence.push_back(std::move(sm));
  }

  report.frames = static_cast<Index>(ious.size());
  if (report.frames == 0) return report;

  const double n = static_cast<double>(report.frames);
  for (Index i = 0; i < kThresholds; ++i) {
    const double tau = (static_cast<double>(i) + 0.5) / static_cast<double>(kThresholds);
    report.iou_thresholds.push_back(tau);
    Index hits = 0;
    for (double v : ious) hits += v > tau ? 1 : 0;
    report.success_curve.push_back(static_cast<double>(hits) / n);

    const double td = tau * kMaxDistance;
    report.dist_thresholds.push_back(td);
    hits = 0;
    for (double v : dists) hits += v <= td ? 1 : 0;
    report.precision_curve.push_back(static_cast<double>(hits) / n);
  }

  double s = 0.0, p = 0.0;
  for (Index i = 0; i < kThresholds; ++i) {
    s += report.success_curve[i];
    p += report.precision_curve[i];
  }
  report.success = 100.0 * s / static_cast<double>(kThresholds);
  report.precision = 100.0 * p / static_cast<double>(kThresholds);
  return report;
}

void write_metrics_json(const std::string& path, const MetricReport& report) {
  json j;
  j["success"] = report.success;
  j["precision"] = report.precision;
  j["frames"] = report.frames;
  j["per_sequence"] = json::array();
  for (const SequenceMetrics& sm : report.per_sequence) {
    j["per_sequence"].push_back({{"seq", sm.seq_id},
                                 {"frames", sm.frames},
                                 {"mean_iou", sm.mean_iou},
                                 {"mean_distance", sm.mean_distance}});
  }
  j["iou_thresholds"] = report.iou_thresholds;
  j["success_curve"] = report.success_curve;
  j["dist_thresholds"] = report.dist_thresholds;
  j["precision_curve"] = report.precision_curve;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Cost accounting

CostReport count_params_flops(const ModelConfig& cfg) {
  cfg.validate();
  const long long d = cfg.feature_dim;
  const long long nt = cfg.n_template, ns = cfg.n_search;
  const long long n = nt + ns;
  const long long k = cfg.gcn_neighbors;
  const long long c = cfg.conv_channels;
  const long long ny = cfg.bev_grid.ny(), nx = cfg.bev_grid.nx();
  const long long aug = 4 + d;
  const long long tau = cfg.n_ttm_layers;

  CostReport r;

  auto linear_params = [](long long din, long long dout) { return din * dout + dout; };
  auto conv_params = [](long long co, long long ci, long long kk) {
    return co * ci * kk * kk + co;
  };

  // parameters
  long long params = 0;
  params += linear_params(3, d) + linear_params(d, d);      // gcn layer 1
  params += linear_params(d + 3, d) + linear_params(d, d);  // gcn layer 2
  const long long ttm_layer_params = linear_params(3, d) + linear_params(d, d)  // pe
                                     + 4 * linear_params(d, d)                  // q k v o
                                     + 2 * d                                    // ln1
                                     + linear_params(d, 2 * d) + linear_params(2 * d, d)
                                     + 2 * d;  // ln2
  params += tau * ttm_layer_params;
  params += (tau - 1) * linear_params(2 * d, d);          // mfa combine
  params += linear_params(d, d) + linear_params(d, 1);    // seg
  params += conv_params(c, aug, 3) + 2 * conv_params(c, c, 3);
  params += conv_params(1, c, 1) + conv_params(3, c, 1) + conv_params(1, c, 1);
  r.params = static_cast<Index>(params);

  // local encoder, both clouds
  auto gcn_flops = [&](long long pts) {
    long long f = 0;
    f += 2 * pts * k * 3 * d + 2 * pts * d * d;        // layer 1 message + update
    f += 2 * pts * k * (d + 3) * d + 2 * pts * d * d;  // layer 2
    return f;
  };
  r.flops_local_encoder = gcn_flops(nt) + gcn_flops(ns);

  // transformer layers
  const long long per_layer = 2 * n * 3 * d + 2 * n * d * d  // positional mlp
                              + 4 * (2 * n * d * d)          // q k v o projections
                              + 2 * n * n * d                // scores
                              + 2 * n * n * d                // attention * values
                              + 2 * (2 * n * d * 2 * d);     // ffn
  r.flops_ttm = tau * per_layer;

  // feature propagation and combine stages
  const std::vector<Index> counts = cfg.tap_counts();
  std::vector<Index> order(counts.size());
  for (size_t i = 0; i < counts.size(); ++i) order[i] = counts[i];
  if (cfg.mfa_direction == MfaDirection::DeepToShallow) {
    std::reverse(order.begin(), order.end());
  }
  long long mfa = 0;
  for (size_t s = 1; s < order.size(); ++s) {
    const long long m = order[s];  // targets of this stage
    mfa += 2 * m * 3 * d;          // 3-neighbor weighted blend
    mfa += 2 * m * (2 * d) * d;    // combine projection
  }
  r.flops_mfa = mfa;

  r.flops_seg = 2 * ns * d * d + 2 * ns * d * 1;

  long long bev = 0;
  bev += 2 * aug * 9 * c * ny * nx;   // trunk conv 1 (3x3, same size)
  bev += 2 * c * 9 * c * ny * nx * 2;  // trunk convs 2 and 3
  bev += 2 * c * 1 * ny * nx;          // heatmap 1x1
  bev += 2 * c * 3 * ny * nx;          // offset 1x1
  bev += 2 * c * 1 * ny * nx;          // z 1x1
  r.flops_bev_head = bev;

  r.flops_total =
      r.flops_local_encoder + r.flops_ttm + r.flops_mfa + r.flops_seg + r.flops_bev_head;
  return r;
}

void write_cost_json(const std::string& path, const CostReport& report) {
  json j;
  j["params"] = report.params;
  j["flops"] = {{"local_encoder", report.flops_local_encoder},
                {"ttm", report.flops_ttm},
                {"mfa", report.flops_mfa},
                {"seg", report.flops_seg},
                {"bev_head", report.flops_bev_head},
                {"total", report.flops_total}};
  j["measured_ms_per_frame"] = report.measured_ms_per_frame;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Class-agnostic protocol

AgnosticReport run_class_agnostic(const AgnosticSetting& setting,
                                  const std::vector<std::string>& trained_categories,
                                  const ModelParams& params, const ModelConfig& cfg,
                                  const TrackerConfig& tracker,
                                  const std::vector<Sequence>& observed_sequences,
                                  const std::vector<Sequence>& unseen_sequences) {
  for (const std::string& trained : trained_categories) {
    for (const std::string& held_out : setting.unseen_categories) {
      if (trained == held_out) {
        throw std::runtime_error("checkpoint was trained on '" + trained +
                                 "', which " + setting.name + " holds out");
      }
    }
  }
  for (const Sequence& s : unseen_sequences) {
    if (std::find(setting.unseen_categories.begin(), setting.unseen_categories.end(),
                  s.category) == setting.unseen_categories.end()) {
      throw std::runtime_error("sequence '" + s.id + "' has category '" + s.category +
                               "', which is not held out by " + setting.name);
    }
  }

  auto run = [&](const std::vector<Sequence>& seqs) {
    std::vector<TrackResult> results;
    results.reserve(seqs.size());
    for (const Sequence& s : seqs) results.push_back(track_sequence(params, cfg, s, tracker));
    return evaluate(results, seqs);
  };

  AgnosticReport report;
  report.setting = setting.name;
  report.observed = run(observed_sequences);
  report.unseen = run(unseen_sequences);
  return report;
}

}  // namespace ost
