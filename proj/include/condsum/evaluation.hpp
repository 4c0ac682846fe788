#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condsum/core.hpp"
#include "condsum/dataset.hpp"

namespace condsum {

struct SummaryMask {
  std::vector<int> mask;
  int budget = 0;

  int selected() const { return std::accumulate(mask.begin(), mask.end(), 0); }
  std::vector<int> indices() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(static_cast<int>(i));
    return out;
  }
};

/// floor(fraction * n_frames), the per-video budget N_Y.
inline int budget_for(int n_frames, double fraction) {
  if (!(fraction >= 0.0)) throw ArgumentError("budget fraction must be non-negative");
  return static_cast<int>(std::floor(fraction * n_frames + 1e-9));
}

/// Keeps the budget highest-scoring frames; equal scores prefer the lower index.
inline SummaryMask generate_summary(const std::vector<double>& scores, int budget) {
  if (budget < 0) throw ArgumentError("generate_summary: negative budget");
  for (double s : scores)
    if (!std::isfinite(s)) throw ArgumentError("generate_summary: non-finite score");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  SummaryMask out{std::vector<int>(scores.size(), 0), budget};
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(budget), scores.size());
  for (std::size_t i = 0; i < take; ++i) out.mask[order[i]] = 1;
  return out;
}

struct PRF {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

/// Overlap metrics of a generated summary against a ground-truth summary:
/// P = |S & G| / |S|, R = |S & G| / |G|, F1 = 2PR / (P + R); each is 0 when
/// its denominator is 0.
inline PRF f1_score(const SummaryMask& pred, const SummaryMask& truth) {
  if (pred.mask.size() != truth.mask.size()) throw ArgumentError("f1_score: mask lengths differ");
  long overlap = 0, n_pred = 0, n_truth = 0;
  for (std::size_t i = 0; i < pred.mask.size(); ++i) {
    const bool p = pred.mask[i] != 0, t = truth.mask[i] != 0;
    overlap += p && t;
    n_pred += p;
    n_truth += t;
  }
  PRF r;
  r.precision = n_pred ? static_cast<double>(overlap) / n_pred : 0.0;
  r.recall = n_truth ? static_cast<double>(overlap) / n_truth : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

enum class Aggregation { mean, max };

inline std::string to_string(Aggregation a) { return a == Aggregation::mean ? "mean" : "max"; }
inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "max") return Aggregation::max;
  throw ArgumentError("unknown aggregation '" + s + "'");
}
/// Mean for TVSum/QueryVS-style multi-annotator sets, max for SumMe.
inline Aggregation default_aggregation(DatasetName n) { return n == DatasetName::summe ? Aggregation::max : Aggregation::mean; }

struct VideoScore {
  std::string video_id;
  int split = 0;
  PRF metrics;
};

struct EvalReport {
  std::vector<double> split_f1;
  double mean_f1 = 0;
  std::vector<VideoScore> videos;
  Aggregation aggregation = Aggregation::mean;
  double budget_fraction = 0.15;
};

/// Per-video metrics against every annotator's budgeted summary, combined
/// by the aggregation rule (max keeps the P/R of the best-F1 annotator).
inline PRF score_against_annotators(const std::vector<double>& predicted, const std::vector<AnnotationTrack>& tracks,
                                    double budget_fraction, Aggregation aggregation) {
  if (tracks.empty()) throw ArgumentError("score_against_annotators: no annotations");
  const int budget = budget_for(static_cast<int>(predicted.size()), budget_fraction);
  const SummaryMask pred = generate_summary(predicted, budget);
  PRF acc, best;
  bool first = true;
  for (const auto& track : tracks) {
    if (track.frame_scores.size() != predicted.size()) throw ArgumentError("annotation length differs from prediction");
    const PRF r = f1_score(pred, generate_summary(track.frame_scores, budget));
    acc.precision += r.precision;
    acc.recall += r.recall;
    acc.f1 += r.f1;
    if (first || r.f1 > best.f1) best = r;
    first = false;
  }
  if (aggregation == Aggregation::max) return best;
  const double n = static_cast<double>(tracks.size());
  return {acc.precision / n, acc.recall / n, acc.f1 / n};
}

/// Frame scores for one evaluation video under the model of one split.
using SplitScorer = std::function<std::vector<double>(const VideoRecord& video, int split)>;

/// Runs every split: per-video F1 against annotators, per-split mean over
/// evaluation videos, then the mean over splits.
inline EvalReport evaluate_protocol(const SplitScorer& scorer, const std::vector<VideoRecord>& records,
                                    const SplitPlan& plan, double budget_fraction = 0.15,
                                    Aggregation aggregation = Aggregation::mean) {
  if (plan.splits.empty()) throw ArgumentError("evaluate_protocol: empty split plan");
  EvalReport report;
  report.aggregation = aggregation;
  report.budget_fraction = budget_fraction;
  for (std::size_t s = 0; s < plan.splits.size(); ++s) {
    double total = 0.0;
    for (const auto& id : plan.splits[s].eval_ids) {
      auto it = std::find_if(records.begin(), records.end(), [&](const VideoRecord& r) { return r.video_id == id; });
      if (it == records.end()) throw ValidationError("split " + std::to_string(s) + " names unknown video " + id);
      const auto scores = scorer(*it, static_cast<int>(s));
      const PRF r = score_against_annotators(scores, it->annotations, budget_fraction, aggregation);
      report.videos.push_back({id, static_cast<int>(s), r});
      total += r.f1;
    }
    report.split_f1.push_back(plan.splits[s].eval_ids.empty() ? 0.0 : total / plan.splits[s].eval_ids.size());
  }
  report.mean_f1 = std::accumulate(report.split_f1.begin(), report.split_f1.end(), 0.0) / report.split_f1.size();
  return report;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& v : r.videos)
    videos.push_back({{"video_id", v.video_id},
                      {"split", v.split},
                      {"precision", v.metrics.precision},
                      {"recall", v.metrics.recall},
                      {"f1", v.metrics.f1}});
  return {{"split_f1", r.split_f1},
          {"mean_f1", r.mean_f1},
          {"videos", videos},
          {"protocol", {{"aggregation", to_string(r.aggregation)}, {"budget_fraction", r.budget_fraction}}}};
}

// ------------------------------------------------------------ score dumps

struct ScoreRow {
  int frame_index = 0;
  double score = 0;
  int selected = 0;
  int ground_truth = 0;
};

inline void write_score_csv(const std::filesystem::path& path, const std::vector<ScoreRow>& rows) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "frame_index,score,selected,ground_truth\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%d,%d\n", r.frame_index, r.score, r.selected, r.ground_truth);
    out << buf;
  }
}

inline std::vector<ScoreRow> read_score_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open score file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty score file " + path.string());
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) header.push_back(cell);
  }
  const auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ValidationError("score file lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_idx = col("frame_index"), c_score = col("score"), c_sel = col("selected"), c_gt = col("ground_truth");
  std::vector<ScoreRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != header.size()) throw ValidationError("malformed row in " + path.string() + ": " + line);
    try {
      rows.push_back({std::stoi(cells[c_idx]), std::stod(cells[c_score]), std::stoi(cells[c_sel]), std::stoi(cells[c_gt])});
    } catch (const std::exception&) {
      throw ValidationError("malformed row in " + path.string() + ": " + line);
    }
  }
  return rows;
}

}  // namespace condsum
