#include "ost/checkpoint.hpp"
#include "ost/config.hpp"
#include "ost/data.hpp"
#include "ost/eval.hpp"
#include "ost/model.hpp"
#include "ost/tensor.hpp"
#include "ost/tracker.hpp"
#include "ost/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::string data;
  std::string out;
  std::string checkpoint;
  int setting = 1;
  std::string split = "class-specific";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "config file (TOML-style)");
  cmd->add_option("--seed", args.seed, "random seed");
  cmd->add_option("--data", args.data, "dataset directory");
  cmd->add_option("--out", args.out, "output path");
  cmd->add_option("--checkpoint", args.checkpoint, "checkpoint prefix");
  cmd->add_option("--setting", args.setting, "class-agnostic setting (1 or 2)")
      ->check(CLI::IsMember({1, 2}));
  cmd->add_option("--split", args.split, "evaluation split")
      ->check(CLI::IsMember({"class-specific", "class-agnostic"}));
}

ost::ConfigFile load_config(const CommonArgs& args) {
  if (args.config.empty()) return ost::ConfigFile::parse_string("");
  return ost::ConfigFile::parse_file(args.config);
}

ost::ModelParams load_or_init_params(const ost::ModelConfig& cfg, const CommonArgs& args) {
  ost::ModelParams params = ost::ModelParams::init(cfg, args.seed);
  if (!args.checkpoint.empty()) {
    auto named = params.named();
    ost::load_checkpoint(args.checkpoint, named);
  }
  return params;
}

std::string manifest_next_to(const std::string& checkpoint_prefix) {
  return (fs::path(checkpoint_prefix).parent_path() / "train_manifest.json").string();
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const CommonArgs& args) {
  std::mt19937_64 rng(args.seed);
  auto random_tensor = [&](ost::Shape shape) {
    std::normal_distribution<double> dist(0.0, 1.0);
    ost::ArrayX v(ost::shape_numel(shape));
    for (ost::Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
    return ost::Tensor::from_array(std::move(shape), std::move(v));
  };

  std::vector<ost::GradCheckReport> reports;
  reports.push_back(ost::grad_check(
      "matmul", [&](const ost::Tensor& x) { return ost::sum_all(ost::matmul(x, x)); },
      random_tensor({4, 4})));
  reports.push_back(ost::grad_check(
      "softmax", [](const ost::Tensor& x) {
        return ost::sum_all(ost::mul(ost::softmax(x, 1), x));
      },
      random_tensor({3, 5})));
  reports.push_back(ost::grad_check(
      "conv2d", [&](const ost::Tensor& x) {
        ost::Tensor k = ost::Tensor::full({2, 2, 3, 3}, 0.1);
        return ost::sum_all(ost::conv2d(x, k, 1, 1));
      },
      random_tensor({2, 5, 5})));
  reports.push_back(ost::grad_check(
      "layer_norm", [&](const ost::Tensor& x) {
        ost::Tensor g = ost::Tensor::full({6}, 1.2);
        ost::Tensor b = ost::Tensor::full({6}, 0.1);
        return ost::sum_all(ost::mul(ost::layer_norm(x, g, b), x));
      },
      random_tensor({4, 6})));
  reports.push_back(ost::grad_check(
      "sigmoid_bce", [](const ost::Tensor& x) {
        std::vector<std::uint8_t> labels(x.numel());
        for (size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2;
        return ost::bce_loss(ost::sigmoid(ost::reshape(x, {x.numel()})), labels);
      },
      random_tensor({8})));

  bool all_ok = true;
  std::printf("%-12s  %-12s  %s\n", "op", "max rel err", "status");
  for (const auto& r : reports) {
    std::printf("%-12s  %-12.3e  %s\n", r.name.c_str(), r.max_rel_error,
                r.passed ? "ok" : "FAIL");
    all_ok = all_ok && r.passed;
  }
  return all_ok ? 0 : 1;
}

int cmd_synth(const CommonArgs& args, ost::Index n_sequences, ost::Index n_frames,
              std::string category, ost::Index scene_base) {
  if (args.out.empty()) throw CLI::ValidationError("--out", "output directory required");
  const ost::ConfigFile cfg = load_config(args);
  ost::SynthConfig synth;
  ost::apply_config(cfg, synth);
  if (n_frames > 0) synth.n_frames = n_frames;

  std::vector<ost::Sequence> seqs;
  std::mt19937_64 size_rng(args.seed);
  for (ost::Index i = 0; i < n_sequences; ++i) {
    ost::SynthConfig one = synth;
    one.seed = args.seed + static_cast<std::uint64_t>(i) * 1000003ull;
    if (!category.empty()) one.target_size = ost::sample_category_size(category, size_rng);
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%04lld", static_cast<long long>(i));
    seqs.push_back(ost::synth_sequence(one, name, category, scene_base + i));
  }
  ost::save_sequences(args.out, seqs);
  std::printf("wrote %lld sequences to %s\n", static_cast<long long>(n_sequences),
              args.out.c_str());
  return 0;
}

int cmd_train(const CommonArgs& args) {
  if (args.data.empty()) throw CLI::ValidationError("--data", "dataset directory required");
  if (args.out.empty()) throw CLI::ValidationError("--out", "output directory required");
  const ost::ConfigFile cfg = load_config(args);
  ost::ModelConfig model_cfg;
  ost::apply_config(cfg, model_cfg);
  ost::TrainConfig train_cfg;
  ost::apply_config(cfg, train_cfg);
  train_cfg.seed = args.seed;
  train_cfg.sample.n_template = model_cfg.n_template;
  train_cfg.sample.n_search = model_cfg.n_search;

  std::vector<ost::Sequence> data = ost::load_sequences(args.data);
  if (args.split == "class-agnostic") {
    const ost::AgnosticSetting setting = ost::agnostic_setting(args.setting);
    data = ost::filter_by_category(data, setting.train_categories);
    if (data.empty()) {
      throw std::runtime_error("no sequences left after filtering to " + setting.name +
                               " training categories");
    }
  }

  ost::ModelParams params = ost::ModelParams::init(model_cfg, args.seed);
  const ost::TrainOutcome outcome =
      ost::train_model(params, model_cfg, data, train_cfg, args.out, args.checkpoint);
  std::printf("trained %lld steps, final loss %.6f\n",
              static_cast<long long>(outcome.steps_done), outcome.final_total_loss);
  std::printf("checkpoint: %s\n", (fs::path(args.out) / "ckpt").string().c_str());
  return 0;
}

int cmd_track(const CommonArgs& args) {
  if (args.data.empty()) throw CLI::ValidationError("--data", "dataset directory required");
  if (args.out.empty()) throw CLI::ValidationError("--out", "output path required");
  if (args.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "checkpoint required");
  const ost::ConfigFile cfg = load_config(args);
  ost::ModelConfig model_cfg;
  ost::apply_config(cfg, model_cfg);
  ost::TrackerConfig tracker;
  ost::apply_config(cfg, tracker);
  tracker.seed = args.seed;

  const ost::ModelParams params = load_or_init_params(model_cfg, args);
  const std::vector<ost::Sequence> data = ost::load_sequences(args.data);

  std::vector<ost::TrackResult> results;
  for (const ost::Sequence& seq : data) {
    results.push_back(ost::track_sequence(params, model_cfg, seq, tracker));
  }
  ost::write_track_results(args.out, results);
  std::printf("tracked %zu sequences -> %s\n", results.size(), args.out.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& results_path) {
  if (args.data.empty()) throw CLI::ValidationError("--data", "dataset directory required");
  const ost::ConfigFile cfg = load_config(args);
  ost::ModelConfig model_cfg;
  ost::apply_config(cfg, model_cfg);
  ost::TrackerConfig tracker;
  ost::apply_config(cfg, tracker);
  tracker.seed = args.seed;

  const std::vector<ost::Sequence> data = ost::load_sequences(args.data);

  if (args.split == "class-agnostic") {
    if (args.checkpoint.empty()) {
      throw CLI::ValidationError("--checkpoint", "class-agnostic evaluation needs a checkpoint");
    }
    const ost::AgnosticSetting setting = ost::agnostic_setting(args.setting);
    const ost::ModelParams params = load_or_init_params(model_cfg, args);
    const std::vector<std::string> trained =
        ost::read_train_manifest_categories(manifest_next_to(args.checkpoint));
    const std::vector<ost::Sequence> observed =
        ost::filter_by_category(data, setting.train_categories);
    const std::vector<ost::Sequence> unseen =
        ost::filter_by_category(data, setting.unseen_categories);
    const ost::AgnosticReport report = ost::run_class_agnostic(
        setting, trained, params, model_cfg, tracker, observed, unseen);

    std::printf("%s observed: success %.2f precision %.2f (%lld frames)\n",
                report.setting.c_str(), report.observed.success, report.observed.precision,
                static_cast<long long>(report.observed.frames));
    std::printf("%s unseen:   success %.2f precision %.2f (%lld frames)\n",
                report.setting.c_str(), report.unseen.success, report.unseen.precision,
                static_cast<long long>(report.unseen.frames));
    if (!args.out.empty()) {
      ost::write_metrics_json(args.out + ".observed.json", report.observed);
      ost::write_metrics_json(args.out + ".unseen.json", report.unseen);
    }
    return 0;
  }

  std::vector<ost::TrackResult> results;
  if (!results_path.empty()) {
    results = ost::read_track_results(results_path);
  } else if (!args.checkpoint.empty()) {
    const ost::ModelParams params = load_or_init_params(model_cfg, args);
    for (const ost::Sequence& seq : data) {
      results.push_back(ost::track_sequence(params, model_cfg, seq, tracker));
    }
  } else {
    throw CLI::ValidationError("--preds", "need tracking results or a checkpoint");
  }

  const ost::MetricReport report = ost::evaluate(results, data);
  std::printf("success %.2f precision %.2f over %lld frames\n", report.success, report.precision,
              static_cast<long long>(report.frames));
  if (!args.out.empty()) ost::write_metrics_json(args.out, report);
  return 0;
}

int cmd_bench(const CommonArgs& args, ost::Index frames) {
  const ost::ConfigFile cfg = load_config(args);
  ost::ModelConfig model_cfg;
  ost::apply_config(cfg, model_cfg);

  ost::CostReport report = ost::count_params_flops(model_cfg);
  const ost::ModelParams params = load_or_init_params(model_cfg, args);

  // timed forward passes over synthetic crops
  ost::SynthConfig synth;
  synth.seed = args.seed;
  synth.n_frames = 2;
  const ost::Sequence seq = ost::synth_sequence(synth, "bench", "Car", 0);
  std::mt19937_64 rng(args.seed);
  const ost::CropResult tmpl =
      ost::crop_and_sample(seq.frames[0].cloud, seq.frames[0].gt, model_cfg.n_template, rng);
  ost::Box3D region = ost::inflate_box(seq.frames[1].gt, 2.0, 0.0);
  region.size.z() = model_cfg.bev_grid.z_max - model_cfg.bev_grid.z_min;
  const ost::CropResult search =
      ost::crop_and_sample(seq.frames[1].cloud, region, model_cfg.n_search, rng);

  ost::NoGradGuard ng;
  ost::model_forward(tmpl.cloud, search.cloud, params, model_cfg);  // warm up
  const auto started = std::chrono::steady_clock::now();
  for (ost::Index i = 0; i < frames; ++i) {
    ost::model_forward(tmpl.cloud, search.cloud, params, model_cfg);
  }
  const auto finished = std::chrono::steady_clock::now();
  report.measured_ms_per_frame =
      std::chrono::duration<double, std::milli>(finished - started).count() /
      static_cast<double>(frames);

  std::printf("params %lld, flops/frame %lld, measured %.2f ms/frame\n",
              static_cast<long long>(report.params), report.flops_total,
              report.measured_ms_per_frame);
  if (!args.out.empty()) ost::write_cost_json(args.out, report);
  return 0;
}

int cmd_splits(const CommonArgs& args) {
  if (args.data.empty()) throw CLI::ValidationError("--data", "dataset directory required");
  const std::vector<ost::Sequence> data = ost::load_sequences(args.data);
  const ost::SplitConfig scenes = ost::default_kitti_split();
  const ost::AgnosticSetting setting = ost::agnostic_setting(args.setting);

  json j;
  j["scene_split"] = {{"train", scenes.train_scenes},
                      {"val", scenes.val_scenes},
                      {"test", scenes.test_scenes}};
  j["setting"] = setting.name;
  j["train_categories"] = setting.train_categories;
  j["unseen_categories"] = setting.unseen_categories;
  auto ids = [](const std::vector<ost::Sequence>& seqs) {
    std::vector<std::string> out;
    for (const auto& s : seqs) out.push_back(s.id);
    return out;
  };
  j["sequences"] = {{"all", ids(data)},
                    {"observed", ids(ost::filter_by_category(data, setting.train_categories))},
                    {"unseen", ids(ost::filter_by_category(data, setting.unseen_categories))}};

  const std::string text = j.dump(2);
  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + args.out + " for writing");
    out << text << '\n';
  } else {
    std::printf("%s\n", text.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-object lidar tracker"};
  app.require_subcommand(1);

  CommonArgs args;
  ost::Index synth_sequences = 8;
  ost::Index synth_frames = 0;
  std::string synth_category = "Car";
  ost::Index synth_scene_base = 0;
  std::string eval_results;
  ost::Index bench_frames = 20;

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "verify analytic gradients");
  add_common(gradcheck, args);

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, args);
  synth->add_option("--sequences", synth_sequences, "number of sequences");
  synth->add_option("--frames", synth_frames, "frames per sequence (overrides config)");
  synth->add_option("--category", synth_category, "target category (empty keeps config size)");
  synth->add_option("--scene-base", synth_scene_base, "first scene id");

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train, args);

  CLI::App* track = app.add_subcommand("track", "run the tracker over a dataset");
  add_common(track, args);

  CLI::App* eval = app.add_subcommand("eval", "score tracking results");
  add_common(eval, args);
  eval->add_option("--preds", eval_results, "tracking results (.jsonl)");

  CLI::App* bench = app.add_subcommand("bench", "count parameters and flops, time the model");
  add_common(bench, args);
  bench->add_option("--frames", bench_frames, "timed forward passes");

  CLI::App* splits = app.add_subcommand("splits", "print dataset splits");
  add_common(splits, args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(args);
    if (synth->parsed())
      return cmd_synth(args, synth_sequences, synth_frames, synth_category, synth_scene_base);
    if (train->parsed()) return cmd_train(args);
    if (track->parsed()) return cmd_track(args);
    if (eval->parsed()) return cmd_eval(args, eval_results);
    if (bench->parsed()) return cmd_bench(args, bench_frames);
    if (splits->parsed()) return cmd_splits(args);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
