#pragma once

#include "ost/data.hpp"
#include "ost/losses.hpp"
#include "ost/model.hpp"

#include <string>
#include <vector>

namespace ost {

struct TrainConfig {
  Index steps = 2000;
  Index batch = 4;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index workers = 0;  // 0: hardware count, capped by the OST_THREADS env var
  std::uint64_t seed = 0;
  Index log_every = 10;
  Index checkpoint_every = 0;  // 0: final checkpoint only
  Index bev_window_radius = 2;
  SampleOptions sample;
  LossWeights weights;
};

struct TrainOutcome {
  Index steps_done = 0;
  double final_total_loss = 0.0;
};

Index resolve_worker_count(Index requested);

// Optimizes `params` in place on batches drawn from `data`. Writes into
// out_dir: train_log.csv (per-step loss terms), checkpoint files under the
// "ckpt" prefix (params plus a .state.bin with the optimizer state and step
// counter for exact resume), and train_manifest.json (sequence ids and
// categories seen). Pass resume_prefix to continue from an earlier run;
// given the same seed the continued run reproduces an unbroken one exactly.
// A non-finite loss aborts with the failing step in the message.
TrainOutcome train_model(ModelParams& params, const ModelConfig& cfg,
                         const std::vector<Sequence>& data, const TrainConfig& tc,
                         const std::string& out_dir, const std::string& resume_prefix = "");

void write_train_manifest(const std::string& path, const std::vector<Sequence>& data);
std::vector<std::string> read_train_manifest_categories(const std::string& path);

}  // namespace ost
