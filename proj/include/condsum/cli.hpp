#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "condsum/core.hpp"
#include "condsum/dataset.hpp"
#include "condsum/evaluation.hpp"
#include "condsum/intervention.hpp"
#include "condsum/plot.hpp"
#include "condsum/training.hpp"

namespace condsum::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Global {
  std::uint64_t seed = 0;
  std::string config;
  std::string out_dir;
};

struct BuildArgs {
  std::string dataset = "synthetic";
  std::string manifest;
  int n_videos = 10;
  int n_frames = 32;
  int image_size = kFrameSize;
  bool with_query = true;
  double pair_fraction = 0.5;
  double frame_fraction = 0.3;
  InterventionStrengths strengths;
  int splits = 5;
  double train_fraction = 0.8;
};

struct TrainArgs {
  std::string data;
  int split = -1;  // -1 trains every split
  double validation_fraction = 0.2;
  std::string encoder = "spatiotemporal";
  TrainConfig config;
};

struct EvalArgs {
  std::string data;
  std::string runs;
  std::string checkpoint = "best";
  double budget_fraction = 0.15;
  std::string aggregation;  // empty picks the dataset default
};

struct SummarizeArgs {
  std::string data;
  std::string checkpoint;
  std::string video;
  double budget_fraction = 0.15;
};

struct PlotArgs {
  std::string csv;
  std::string out = "plot.png";
};

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("cannot parse " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Turns a JSON config object into "--key=value" tokens. Keys may use either
/// snake_case or kebab-case; a nested object named after the subcommand is
/// flattened on top of the shared keys.
inline std::vector<std::string> config_tokens(const nlohmann::json& j, const std::string& command) {
  std::vector<std::string> out;
  const auto emit = [&](const std::string& key, const nlohmann::json& v) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    flag = "--" + flag;
    if (v.is_string()) out.push_back(flag + "=" + v.get<std::string>());
    else if (v.is_boolean()) out.push_back(flag + "=" + (v.get<bool>() ? "true" : "false"));
    else if (v.is_number_integer()) out.push_back(flag + "=" + std::to_string(v.get<long long>()));
    else if (v.is_number()) out.push_back(flag + "=" + v.dump());
    else throw ArgumentError("config key '" + key + "' must be a scalar");
  };
  if (!j.is_object()) throw ArgumentError("config file must hold a JSON object");
  for (const auto& [key, v] : j.items())
    if (!v.is_object()) emit(key, v);
  if (j.contains(command) && j[command].is_object())
    for (const auto& [key, v] : j[command].items()) emit(key, v);
  return out;
}

inline DatasetSpec dataset_spec_for(const std::string& name, const nlohmann::json& manifest) {
  bool has_query = false;
  for (const auto& v : manifest.value("videos", nlohmann::json::array()))
    if (v.contains("query") && !v["query"].is_null()) has_query = true;
  return DatasetSpec::for_name(parse_dataset_name(name), has_query);
}

/// Dataset directory written by build-dataset.
struct DataDir {
  DatasetSpec spec;
  std::vector<VideoRecord> records;
  std::vector<InterventionAssignment> assignments;
  SplitPlan plan;
};

inline DataDir load_data_dir(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw LoadError("no manifest.json in " + dir.string());
  const nlohmann::json manifest = read_json(manifest_path);
  DataDir d;
  d.spec = dataset_spec_for(manifest.value("dataset", std::string("synthetic")), manifest);
  d.records = load_dataset(manifest_path, d.spec);
  if (fs::exists(dir / "interventions.json")) d.assignments = load_assignments(dir / "interventions.json");
  if (!fs::exists(dir / "splits.json")) throw LoadError("no splits.json in " + dir.string());
  d.plan = split_plan_from_json(read_json(dir / "splits.json"));
  return d;
}

inline std::vector<VideoRecord> subset(const std::vector<VideoRecord>& records, const std::vector<std::string>& ids) {
  std::vector<VideoRecord> out;
  for (const auto& id : ids) {
    auto it = std::find_if(records.begin(), records.end(), [&](const VideoRecord& r) { return r.video_id == id; });
    if (it == records.end()) throw ValidationError("split names unknown video " + id);
    out.push_back(*it);
  }
  return out;
}

// ------------------------------------------------------------- commands

inline int cmd_build(const Global& g, const BuildArgs& a) {
  const fs::path out = g.out_dir;
  std::vector<VideoRecord> records;
  DatasetSpec spec;
  if (a.dataset == "synthetic") {
    records = generate_synthetic(a.n_videos, a.n_frames, a.with_query, g.seed, a.image_size);
    spec = DatasetSpec::synthetic(a.with_query);
  } else {
    if (a.manifest.empty()) throw ArgumentError("--manifest is required for dataset " + a.dataset);
    spec = DatasetSpec::for_name(parse_dataset_name(a.dataset));
    records = load_dataset(a.manifest, spec);
  }
  const ConditionalDataset cd =
      build_conditional_dataset(records, spec, a.pair_fraction, a.frame_fraction, g.seed, a.strengths);
  fs::create_directories(out);
  save_dataset(cd.records, spec, out);
  save_assignments(out / "interventions.json", cd.assignments);
  std::vector<std::string> ids;
  for (const auto& r : cd.records) ids.push_back(r.video_id);
  write_json(out / "splits.json", to_json(make_splits(ids, a.splits, a.train_fraction, g.seed)));
  std::cout << "wrote " << cd.records.size() << " videos to " << out.string() << '\n';
  return kOk;
}

inline int cmd_train(const Global& g, TrainArgs a) {
  const DataDir d = load_data_dir(a.data);
  TrainConfig& c = a.config;
  c.seed = g.seed;
  c.model.encoder = parse_encoder_kind(a.encoder);
  c.model.n_classes = d.spec.n_classes;
  c.validate();
  if (a.validation_fraction < 0 || a.validation_fraction >= 1) throw ArgumentError("--validation-fraction must be in [0, 1)");

  const auto prepared = prepare_videos(d.records, d.assignments, d.spec, c.model, c.segment_labels);
  const auto pick = [&](const std::vector<std::string>& ids) {
    std::vector<PreparedVideo> out;
    for (const auto& id : ids) {
      auto it = std::find_if(prepared.begin(), prepared.end(), [&](const PreparedVideo& v) { return v.video_id == id; });
      if (it == prepared.end()) throw ValidationError("split names unknown video " + id);
      out.push_back(*it);
    }
    return out;
  };

  const fs::path out = g.out_dir;
  fs::create_directories(out);
  write_json(out / "train_config.json", to_json(c));
  const int n_splits = static_cast<int>(d.plan.splits.size());
  if (a.split >= n_splits) throw ArgumentError("--split out of range");
  for (int s = 0; s < n_splits; ++s) {
    if (a.split >= 0 && s != a.split) continue;
    const auto& ids = d.plan.splits[s].train_ids;
    const auto n_val = std::min<std::size_t>(ids.size() - 1, static_cast<std::size_t>(round_half_up(a.validation_fraction * ids.size())));
    const std::vector<std::string> train_ids(ids.begin(), ids.end() - static_cast<long>(n_val));
    const std::vector<std::string> val_ids(ids.end() - static_cast<long>(n_val), ids.end());
    const fs::path dir = out / ("split_" + std::to_string(s));
    fs::create_directories(dir);
    TrainConfig split_config = c;
    split_config.seed = mix_seed(g.seed, static_cast<std::uint64_t>(s));
    try {
      const TrainResult r = train(pick(train_ids), pick(val_ids), split_config,
                                  CheckpointPaths{dir / "checkpoint.bin", dir / "best.bin"});
      write_loss_csv(dir / "loss.csv", r.history);
      std::cout << "split " << s << ": " << r.history.size() << " steps";
      if (!r.history.empty()) std::cout << ", final loss " << r.history.back().total;
      std::cout << '\n';
    } catch (const NumericalError&) {
      std::cerr << "split " << s << ": training diverged; last good parameters kept in " << (dir / "checkpoint.bin").string()
                << '\n';
      throw;
    }
  }
  return kOk;
}

inline fs::path checkpoint_path(const fs::path& runs, int split, const std::string& which) {
  if (which != "best" && which != "final") throw ArgumentError("--checkpoint must be best or final");
  return runs / ("split_" + std::to_string(split)) / (which == "best" ? "best.bin" : "checkpoint.bin");
}

inline std::vector<ScoreRow> score_rows(const std::vector<double>& scores, const VideoRecord& r, double budget_fraction) {
  const int budget = budget_for(static_cast<int>(scores.size()), budget_fraction);
  const SummaryMask pred = generate_summary(scores, budget);
  const SummaryMask truth = generate_summary(r.mean_scores(), budget);
  std::vector<ScoreRow> rows;
  for (std::size_t i = 0; i < scores.size(); ++i)
    rows.push_back({static_cast<int>(i), scores[i], pred.mask[i], truth.mask[i]});
  return rows;
}

inline int cmd_eval(const Global& g, const EvalArgs& a) {
  const DataDir d = load_data_dir(a.data);
  const fs::path runs = a.runs.empty() ? fs::path(g.out_dir) : fs::path(a.runs);
  const Aggregation agg = a.aggregation.empty() ? default_aggregation(d.spec.name) : parse_aggregation(a.aggregation);
  std::vector<Model> models;
  for (std::size_t s = 0; s < d.plan.splits.size(); ++s)
    models.push_back(load_checkpoint(checkpoint_path(runs, static_cast<int>(s), a.checkpoint)).model);

  const fs::path out = g.out_dir;
  const fs::path score_dir = out / "scores";
  fs::create_directories(score_dir);
  const SplitScorer scorer = [&](const VideoRecord& r, int split) {
    const auto pred = predict_frame_scores(models[static_cast<std::size_t>(split)], r);
    std::vector<double> scores(pred.importance.data(), pred.importance.data() + pred.importance.size());
    write_score_csv(score_dir / ("split_" + std::to_string(split) + "_" + r.video_id + ".csv"),
                    score_rows(scores, r, a.budget_fraction));
    return scores;
  };
  const EvalReport report = evaluate_protocol(scorer, d.records, d.plan, a.budget_fraction, agg);
  write_json(out / "eval_report.json", to_json(report));
  std::printf("mean F1 %.4f over %zu splits\n", report.mean_f1, report.split_f1.size());
  return kOk;
}

inline int cmd_summarize(const Global& g, const SummarizeArgs& a) {
  const DataDir d = load_data_dir(a.data);
  auto it = std::find_if(d.records.begin(), d.records.end(), [&](const VideoRecord& r) { return r.video_id == a.video; });
  if (it == d.records.end()) throw ValidationError("unknown video " + a.video);
  const Model m = load_checkpoint(a.checkpoint).model;
  const auto pred = predict_frame_scores(m, *it);
  std::vector<double> scores(pred.importance.data(), pred.importance.data() + pred.importance.size());
  const SummaryMask mask = generate_summary(scores, budget_for(static_cast<int>(scores.size()), a.budget_fraction));
  const fs::path out = g.out_dir;
  fs::create_directories(out);
  write_json(out / ("summary_" + a.video + ".json"), {{"video_id", a.video},
                                                       {"budget", mask.budget},
                                                       {"mask", mask.mask},
                                                       {"selected", mask.indices()},
                                                       {"scores", scores}});
  write_score_csv(out / ("scores_" + a.video + ".csv"), score_rows(scores, *it, a.budget_fraction));
  for (int i : mask.indices()) std::cout << i << '\n';
  return kOk;
}

inline int cmd_plot(const Global& g, const PlotArgs& a) {
  fs::path out = a.out;
  if (out.is_relative()) out = fs::path(g.out_dir) / out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  plot_scores(a.csv, out);
  std::cout << "wrote " << out.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- parser

inline void add_bool(CLI::App* app, const std::string& name, bool& target, const std::string& help) {
  app->add_option(name, target, help)->default_val(target ? "true" : "false")->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

template <typename T>
CLI::Option* add_value(CLI::App* app, const std::string& name, T& target, const std::string& help) {
  return app->add_option(name, target, help)->capture_default_str()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

inline int run(std::vector<std::string> args, std::ostream& err = std::cerr) {
  CLI::App app{"Conditional query-focused video summarization", "condsum"};
  app.require_subcommand(1);
  Global g;
  if (const char* env = std::getenv("CONDSUM_OUT_DIR")) g.out_dir = env;
  if (g.out_dir.empty()) g.out_dir = ".";

  const auto add_global = [&](CLI::App* sub) {
    add_value(sub, "--seed", g.seed, "Random seed");
    sub->add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
    add_value(sub, "--out-dir", g.out_dir, "Output directory (default $CONDSUM_OUT_DIR)");
  };

  BuildArgs b;
  auto* build = app.add_subcommand("build-dataset", "Write a perturbed dataset, intervention sidecar and split plan");
  add_global(build);
  add_value(build, "--dataset", b.dataset, "synthetic | tvsum | queryvs | summe")
      ->check(CLI::IsMember({"synthetic", "tvsum", "queryvs", "summe"}));
  add_value(build, "--manifest", b.manifest, "Source manifest for non-synthetic datasets");
  add_value(build, "--n-videos", b.n_videos, "Synthetic video count")->check(CLI::PositiveNumber);
  add_value(build, "--n-frames", b.n_frames, "Synthetic frames per video")->check(CLI::PositiveNumber);
  add_value(build, "--image-size", b.image_size, "Synthetic frame side")->check(CLI::PositiveNumber);
  add_bool(build, "--with-query", b.with_query, "Attach text queries to synthetic videos");
  add_value(build, "--pair-fraction", b.pair_fraction, "Fraction of video-query pairs perturbed")->check(CLI::Range(0.0, 1.0));
  add_value(build, "--frame-fraction", b.frame_fraction, "Fraction of frames perturbed per selected pair")->check(CLI::Range(0.0, 1.0));
  add_value(build, "--salt-pepper-density", b.strengths.salt_pepper_density, "Salt-and-pepper density")->check(CLI::Range(0.0, 1.0));
  add_value(build, "--blur-sigma", b.strengths.blur_sigma, "Gaussian blur sigma")->check(CLI::NonNegativeNumber);
  add_value(build, "--word-drop-prob", b.strengths.word_drop_prob, "Query word drop probability")->check(CLI::Range(0.0, 1.0));
  add_value(build, "--splits", b.splits, "Number of random splits")->check(CLI::PositiveNumber);
  add_value(build, "--train-fraction", b.train_fraction, "Training share of each split")->check(CLI::Range(0.0, 1.0));

  TrainArgs t;
  t.config.learning_rate = 1e-3;
  auto* trn = app.add_subcommand("train", "Train one model per split");
  add_global(trn);
  add_value(trn, "--data", t.data, "Dataset directory from build-dataset")->required();
  add_value(trn, "--split", t.split, "Train only this split (-1 for all)");
  add_value(trn, "--validation-fraction", t.validation_fraction, "Share of training videos held out for checkpoint selection");
  add_value(trn, "--epochs", t.config.epochs, "Epochs")->check(CLI::NonNegativeNumber);
  add_value(trn, "--lr", t.config.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
  add_value(trn, "--beta1", t.config.beta1, "Adam beta1");
  add_value(trn, "--beta2", t.config.beta2, "Adam beta2");
  add_value(trn, "--adam-eps", t.config.epsilon, "Adam epsilon");
  add_value(trn, "--batch-size", t.config.batch_size, "Videos per step")->check(CLI::PositiveNumber);
  add_value(trn, "--max-steps", t.config.max_steps, "Step cap (0 = none)")->check(CLI::NonNegativeNumber);
  add_value(trn, "--mc-samples", t.config.mc_samples, "Latent samples per step")->check(CLI::PositiveNumber);
  add_bool(trn, "--segment-labels", t.config.segment_labels, "Train on 2-second segment means");
  add_value(trn, "--budget-fraction", t.config.budget_fraction, "Summary budget for validation F1");
  add_value(trn, "--encoder", t.encoder, "spatiotemporal | per_frame_2d | toy")
      ->check(CLI::IsMember({"spatiotemporal", "per_frame_2d", "toy"}));
  add_value(trn, "--encoder-seed", t.config.model.encoder_seed, "Seed of the frozen visual encoder");
  add_value(trn, "--d-model", t.config.model.attention.d_m, "Token and attention width")->check(CLI::PositiveNumber);
  add_value(trn, "--d-x", t.config.model.attention.d_x, "Fused feature width")->check(CLI::PositiveNumber);
  add_value(trn, "--d-v", t.config.model.attention.d_v, "Visual feature width")->check(CLI::PositiveNumber);
  add_value(trn, "--d-z", t.config.model.d_z, "Latent width")->check(CLI::PositiveNumber);
  add_value(trn, "--hidden", t.config.model.hidden, "MLP hidden width")->check(CLI::PositiveNumber);
  add_value(trn, "--kappa", t.config.model.attention.kappa, "Top-kappa size (0 = ceil(n/2))")->check(CLI::NonNegativeNumber);
  auto& ab = t.config.model.ablation;
  add_bool(trn, "--use-conditional-model", ab.use_conditional_model, "Conditional model (false: plain classifier)");
  add_bool(trn, "--use-helpers", ab.use_helpers, "Helper distributions");
  add_bool(trn, "--use-cam", ab.use_cam, "Conditional attention module");
  add_bool(trn, "--use-3d-encoder", ab.use_3d_encoder, "Spatio-temporal encoder (false: per-frame 2D)");
  add_bool(trn, "--use-bow", ab.use_bow, "Bag-of-words query instead of token attention");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Score every split and write an evaluation report");
  add_global(ev);
  add_value(ev, "--data", e.data, "Dataset directory")->required();
  add_value(ev, "--runs", e.runs, "Training output directory (default --out-dir)");
  add_value(ev, "--checkpoint", e.checkpoint, "best | final")->check(CLI::IsMember({"best", "final"}));
  add_value(ev, "--budget-fraction", e.budget_fraction, "Summary budget fraction")->check(CLI::Range(0.0, 1.0));
  add_value(ev, "--aggregation", e.aggregation, "mean | max (default per dataset)");

  SummarizeArgs s;
  auto* sum = app.add_subcommand("summarize", "Select summary frames for one video");
  add_global(sum);
  add_value(sum, "--data", s.data, "Dataset directory")->required();
  add_value(sum, "--checkpoint", s.checkpoint, "Checkpoint file")->required();
  add_value(sum, "--video", s.video, "Video id")->required();
  add_value(sum, "--budget-fraction", s.budget_fraction, "Summary budget fraction")->check(CLI::Range(0.0, 1.0));

  PlotArgs p;
  auto* plot = app.add_subcommand("plot-scores", "Bar chart of frame scores from a score CSV");
  add_global(plot);
  plot->add_option("csv", p.csv, "Score CSV")->required();
  add_value(plot, "--out", p.out, "Image path (relative paths go under --out-dir)");

  // Config values go in front of the command-line flags so explicit flags win.
  if (!args.empty()) {
    std::optional<std::string> config_path;
    for (std::size_t i = 1; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (config_path && args.size() > 1) {
      try {
        const auto tokens = config_tokens(read_json(*config_path), args[1]);
        args.insert(args.begin() + 2, tokens.begin(), tokens.end());
      } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kUsage;
      }
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << ex.what() << "\n\n" << app.help();
    return ex.get_exit_code() == 0 ? kOk : kUsage;
  }

  try {
    if (build->parsed()) return cmd_build(g, b);
    if (trn->parsed()) return cmd_train(g, t);
    if (ev->parsed()) return cmd_eval(g, e);
    if (sum->parsed()) return cmd_summarize(g, s);
    if (plot->parsed()) return cmd_plot(g, p);
  } catch (const ArgumentError& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumerical;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kData;
  }
  err << app.help();
  return kUsage;
}

inline int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace condsum::cli
