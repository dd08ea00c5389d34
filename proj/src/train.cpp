#include "ost/train.hpp"

#include "ost/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace ost {

namespace fs = std::filesystem;
using nlohmann::json;

Index resolve_worker_count(Index requested) {
  Index n = requested;
  if (n <= 0) n = static_cast<Index>(std::thread::hardware_concurrency());
  if (n <= 0) n = 1;
  if (const char* env = std::getenv("OST_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) n = std::min<Index>(n, static_cast<Index>(cap));
  }
  return n;
}

namespace {

// Deterministic per-sample stream regardless of worker count or resume point.
std::uint64_t sample_seed(std::uint64_t base, Index step, Index sample) {
  std::uint64_t x = base ^ (0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(step) * 0xbf58476d1ce4e5b9ull +
                            static_cast<std::uint64_t>(sample) * 0x94d049bb133111ebull);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

struct BatchTerms {
  double seg = 0.0, center = 0.0, offset = 0.0, z = 0.0, total = 0.0;
  Index counted = 0;
};

// Losses for a span of batch samples on one parameter replica; gradients
// stay on the replica until the caller folds them into the master.
BatchTerms run_shard(ModelParams& replica, const ModelConfig& cfg,
                     const std::vector<Sequence>& data, const TrainConfig& tc,
                     std::uint64_t base_seed, Index step, Index first, Index count) {
  BatchTerms terms;
  for (Index s = first; s < first + count; ++s) {
    std::mt19937_64 rng(sample_seed(base_seed, step, s));
    const Index seq_idx = static_cast<Index>(rng() % data.size());
    const Sequence& seq = data[seq_idx];
    const Index frame = 1 + static_cast<Index>(rng() % (seq.frames.size() - 1));

    const TrainingSample sample = sample_training_pair(seq, frame, tc.sample, rng);
    if (!sample.valid) continue;

    const HeadOutputs out = model_forward(sample.tmpl, sample.search, replica, cfg);
    const BevTargets targets = make_bev_targets(sample.gt, cfg.bev_grid, tc.bev_window_radius);
    const TrackingLoss loss = tracking_loss(out.seg, out.heatmap, out.offset_rot, out.zmap,
                                            targets, sample.seg_labels, tc.weights);
    backward(loss.total);

    terms.seg += loss.seg.value_at();
    terms.center += loss.center.value_at();
    terms.offset += loss.offset.value_at();
    terms.z += loss.z.value_at();
    terms.total += loss.total.value_at();
    ++terms.counted;
  }
  return terms;
}

void copy_values(std::vector<Tensor>& dst, const std::vector<Tensor>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i].leaf_values() = src[i].values();
}

std::vector<double> load_state_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::streamoff bytes = in.tellg();
  if (bytes % sizeof(double) != 0) throw std::runtime_error(path + " is not a float64 array");
  std::vector<double> out(static_cast<size_t>(bytes) / sizeof(double));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()), bytes);
  if (!in) throw std::runtime_error("failed reading " + path);
  return out;
}

void save_state_file(const std::string& path, const std::vector<double>& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(state.data()),
            static_cast<std::streamsize>(state.size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing " + path);
}

void save_snapshot(const std::string& prefix, ModelParams& params, const Adam& opt,
                   Index steps_done) {
  save_checkpoint(prefix, params.named());
  std::vector<double> state = opt.state();
  state.insert(state.begin(), static_cast<double>(steps_done));
  save_state_file(prefix + ".state.bin", state);
}

}  // namespace

void write_train_manifest(const std::string& path, const std::vector<Sequence>& data) {
  json j;
  j["sequences"] = json::array();
  std::vector<std::string> categories;
  for (const Sequence& s : data) {
    j["sequences"].push_back({{"id", s.id}, {"category", s.category}, {"scene", s.scene}});
    if (std::find(categories.begin(), categories.end(), s.category) == categories.end()) {
      categories.push_back(s.category);
    }
  }
  j["categories"] = categories;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
}

std::vector<std::string> read_train_manifest_categories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + path + ": " + e.what());
  }
  std::vector<std::string> out;
  for (const json& c : j.at("categories")) out.push_back(c.get<std::string>());
  return out;
}

TrainOutcome train_model(ModelParams& params, const ModelConfig& cfg,
                         const std::vector<Sequence>& data, const TrainConfig& tc,
                         const std::string& out_dir, const std::string& resume_prefix) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("no training sequences");
  for (const Sequence& s : data) {
    if (s.frames.size() < 2) {
      throw std::invalid_argument("sequence '" + s.id + "' is too short to train on");
    }
  }
  if (tc.batch <= 0 || tc.steps < 0) throw std::invalid_argument("bad batch size or step count");

  fs::create_directories(out_dir);
  const std::string ckpt_prefix = (fs::path(out_dir) / "ckpt").string();

  std::vector<Tensor> master = params.tensors();
  Adam opt(master, tc.lr, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);

  Index start_step = 0;
  if (!resume_prefix.empty()) {
    auto named = params.named();
    load_checkpoint(resume_prefix, named);
    std::vector<double> state = load_state_file(resume_prefix + ".state.bin");
    if (state.empty()) throw std::runtime_error("empty optimizer state");
    start_step = static_cast<Index>(state.front());
    opt.restore({state.begin() + 1, state.end()});
  }

  const Index workers = std::min<Index>(resolve_worker_count(tc.workers), tc.batch);
  std::vector<ModelParams> replicas;
  std::vector<std::vector<Tensor>> replica_tensors;
  for (Index w = 0; w < workers; ++w) {
    replicas.push_back(params.clone());
    replica_tensors.push_back(replicas.back().tensors());
  }

  const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
  std::ofstream log(log_path, start_step == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open " + log_path + " for writing");
  if (start_step == 0) log << "step,seg,center,offset,z,total\n";

  write_train_manifest((fs::path(out_dir) / "train_manifest.json").string(), data);

  TrainOutcome outcome;
  outcome.steps_done = start_step;
  for (Index step = start_step; step < tc.steps; ++step) {
    for (Index w = 0; w < workers; ++w) copy_values(replica_tensors[w], master);

    // static shard split: worker w takes samples [w * per, ...)
    const Index per = tc.batch / workers;
    const Index extra = tc.batch % workers;
    std::vector<BatchTerms> terms(workers);
    {
      std::vector<std::thread> pool;
      Index first = 0;
      for (Index w = 0; w < workers; ++w) {
        const Index count = per + (w < extra ? 1 : 0);
        pool.emplace_back([&, w, first, count]() {
          terms[w] = run_shard(replicas[w], cfg, data, tc, tc.seed, step, first, count);
        });
        first += count;
      }
      for (std::thread& t : pool) t.join();
    }

    BatchTerms batch;
    for (const BatchTerms& t : terms) {
      batch.seg += t.seg;
      batch.center += t.center;
      batch.offset += t.offset;
      batch.z += t.z;
      batch.total += t.total;
      batch.counted += t.counted;
    }
    if (batch.counted == 0) {  // every sample in the batch was degenerate
      outcome.steps_done = step + 1;
      continue;
    }
    const double inv = 1.0 / static_cast<double>(batch.counted);

    // fold replica gradients into the master in worker order
    for (Index w = 0; w < workers; ++w) {
      for (size_t i = 0; i < master.size(); ++i) {
        if (replica_tensors[w][i].has_grad()) {
          master[i].accumulate_grad(inv * replica_tensors[w][i].grad());
        }
        replica_tensors[w][i].zero_grad();
      }
    }
    for (Tensor& m : master) {
      if (!m.has_grad()) m.accumulate_grad(ArrayX::Zero(m.numel()));
    }

    batch.seg *= inv;
    batch.center *= inv;
    batch.offset *= inv;
    batch.z *= inv;
    batch.total *= inv;
    if (!std::isfinite(batch.total)) {
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                               " (seg=" + std::to_string(batch.seg) +
                               ", center=" + std::to_string(batch.center) +
                               ", offset=" + std::to_string(batch.offset) +
                               ", z=" + std::to_string(batch.z) + ")");
    }

    opt.step();
    outcome.steps_done = step + 1;
    outcome.final_total_loss = batch.total;

    if (tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == tc.steps)) {
      log << step << ',' << batch.seg << ',' << batch.center << ',' << batch.offset << ','
          << batch.z << ',' << batch.total << '\n';
      log.flush();
    }
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 &&
        step + 1 != tc.steps) {
      save_snapshot(ckpt_prefix, params, opt, step + 1);
    }
  }

  save_snapshot(ckpt_prefix, params, opt, outcome.steps_done);
  return outcome;
}

}  // namespace ost
