#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condsum/binary_io.hpp"
#include "condsum/core.hpp"
#include "condsum/image.hpp"

namespace condsum {

enum class DatasetName { tvsum, queryvs, summe, synthetic };

/// How per-frame annotator scores become outcome classes.
enum class LabelRule {
  round_to_level,   // nearest integer level, class = level - score_min
  threshold_bins,   // C equal-width bins over [score_min, score_max]
};

inline std::string to_string(DatasetName n) {
  switch (n) {
    case DatasetName::tvsum: return "tvsum";
    case DatasetName::queryvs: return "queryvs";
    case DatasetName::summe: return "summe";
    case DatasetName::synthetic: return "synthetic";
  }
  return "unknown";
}

inline DatasetName parse_dataset_name(const std::string& s) {
  if (s == "tvsum") return DatasetName::tvsum;
  if (s == "queryvs") return DatasetName::queryvs;
  if (s == "summe") return DatasetName::summe;
  if (s == "synthetic") return DatasetName::synthetic;
  throw ArgumentError("unknown dataset name '" + s + "'");
}

struct DatasetSpec {
  DatasetName name = DatasetName::synthetic;
  double score_min = 0.0;
  double score_max = 1.0;
  int n_classes = 2;
  bool has_query = true;
  LabelRule label_rule = LabelRule::threshold_bins;
  ChannelStats channels{{0.4280, 0.4106, 0.3589}, {0.2737, 0.2631, 0.2601}};

  void validate() const {
    if (!(score_min < score_max)) throw ArgumentError("DatasetSpec: score_min must be below score_max");
    if (n_classes < 2) throw ArgumentError("DatasetSpec: need at least two classes");
    for (double s : channels.std)
      if (!(s > 0)) throw ArgumentError("DatasetSpec: channel std must be positive");
  }

  /// Outcome class of a (possibly annotator-averaged) frame score.
  int class_of(double score) const {
    const double s = std::clamp(score, score_min, score_max);
    int c = 0;
    if (label_rule == LabelRule::round_to_level) {
      c = static_cast<int>(round_half_up(s) - round_half_up(score_min));
    } else {
      c = static_cast<int>(std::floor((s - score_min) / (score_max - score_min) * n_classes));
    }
    return std::clamp(c, 0, n_classes - 1);
  }

  static DatasetSpec tvsum() {
    DatasetSpec s;
    s.name = DatasetName::tvsum;
    s.score_min = 1.0;
    s.score_max = 5.0;
    s.n_classes = 5;
    s.has_query = true;
    s.label_rule = LabelRule::round_to_level;
    return s;
  }
  static DatasetSpec queryvs() {
    DatasetSpec s;
    s.name = DatasetName::queryvs;
    s.score_min = 0.0;
    s.score_max = 3.0;
    s.n_classes = 4;
    s.has_query = true;
    s.label_rule = LabelRule::round_to_level;
    return s;
  }
  /// Continuous [0, 1] scores split at 0.5.
  static DatasetSpec summe() {
    DatasetSpec s;
    s.name = DatasetName::summe;
    s.score_min = 0.0;
    s.score_max = 1.0;
    s.n_classes = 2;
    s.has_query = false;
    s.label_rule = LabelRule::threshold_bins;
    return s;
  }
  static DatasetSpec synthetic(bool with_query = true) {
    DatasetSpec s = summe();
    s.name = DatasetName::synthetic;
    s.has_query = with_query;
    return s;
  }
  static DatasetSpec for_name(DatasetName n, bool synthetic_query = true) {
    switch (n) {
      case DatasetName::tvsum: return tvsum();
      case DatasetName::queryvs: return queryvs();
      case DatasetName::summe: return summe();
      case DatasetName::synthetic: return synthetic(synthetic_query);
    }
    return synthetic();
  }
};

struct AnnotationTrack {
  std::string annotator_id;
  std::vector<double> frame_scores;
  friend bool operator==(const AnnotationTrack&, const AnnotationTrack&) = default;
};

struct VideoRecord {
  std::string video_id;
  std::vector<Image> frames;            // normalized; empty when only features are cached
  std::optional<Matrix> features;       // cached rows, n_frames x d_v
  std::string features_encoder;
  double fps = 1.0;
  std::optional<std::string> query;
  std::vector<AnnotationTrack> annotations;
  int n_frames = 0;

  bool has_frames() const { return !frames.empty(); }

  /// Annotator-averaged score per frame.
  std::vector<double> mean_scores() const {
    std::vector<double> out(static_cast<std::size_t>(n_frames), 0.0);
    if (annotations.empty()) return out;
    for (const auto& track : annotations)
      for (int i = 0; i < n_frames; ++i) out[i] += track.frame_scores[i];
    for (double& v : out) v /= static_cast<double>(annotations.size());
    return out;
  }

  friend bool operator==(const VideoRecord& a, const VideoRecord& b) {
    const bool same_features = a.features.has_value() == b.features.has_value() &&
                               (!a.features || *a.features == *b.features);
    return a.video_id == b.video_id && a.frames == b.frames && same_features &&
           a.features_encoder == b.features_encoder && a.fps == b.fps && a.query == b.query &&
           a.annotations == b.annotations && a.n_frames == b.n_frames;
  }
};

inline void validate_record(const VideoRecord& r, const DatasetSpec& spec) {
  if (r.n_frames < 1) throw ValidationError("video " + r.video_id + ": n_frames must be >= 1");
  if (!(r.fps > 0)) throw ValidationError("video " + r.video_id + ": fps must be positive");
  if (r.has_frames() && static_cast<int>(r.frames.size()) != r.n_frames)
    throw ValidationError("video " + r.video_id + ": frame count mismatch");
  if (r.features && r.features->rows() != r.n_frames)
    throw ValidationError("video " + r.video_id + ": feature row count mismatch");
  for (const auto& track : r.annotations) {
    if (static_cast<int>(track.frame_scores.size()) != r.n_frames)
      throw ValidationError("video " + r.video_id + ", annotator " + track.annotator_id + ": expected " +
                            std::to_string(r.n_frames) + " scores, got " +
                            std::to_string(track.frame_scores.size()));
    for (double s : track.frame_scores)
      if (!(s >= spec.score_min && s <= spec.score_max))
        throw ValidationError("video " + r.video_id + ", annotator " + track.annotator_id + ": score " +
                              std::to_string(s) + " outside [" + std::to_string(spec.score_min) + ", " +
                              std::to_string(spec.score_max) + "]");
  }
}

/// Per-frame outcome classes from annotator-averaged scores.
inline std::vector<int> frame_classes(const VideoRecord& r, const DatasetSpec& spec) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(r.n_frames));
  for (double s : r.mean_scores()) out.push_back(spec.class_of(s));
  return out;
}

// ------------------------------------------------------------- manifests

inline std::vector<VideoRecord> load_dataset(const std::filesystem::path& manifest_path, const DatasetSpec& spec) {
  spec.validate();
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("cannot parse manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto base = manifest_path.parent_path();
  if (manifest.contains("dataset") && manifest["dataset"].get<std::string>() != to_string(spec.name))
    throw ValidationError("manifest declares dataset '" + manifest["dataset"].get<std::string>() +
                          "' but '" + to_string(spec.name) + "' was requested");

  std::vector<VideoRecord> records;
  for (const auto& v : manifest.value("videos", nlohmann::json::array())) {
    VideoRecord r;
    try {
      r.video_id = v.at("id").get<std::string>();
      r.fps = v.value("fps", 1.0);
      if (spec.has_query && v.contains("query") && !v["query"].is_null()) r.query = v["query"].get<std::string>();
      for (const auto& a : v.value("annotations", nlohmann::json::array()))
        r.annotations.push_back({a.at("annotator").get<std::string>(), a.at("scores").get<std::vector<double>>()});
      if (v.contains("frames")) {
        for (const auto& p : v["frames"]) {
          const auto path = base / p.get<std::string>();
          if (!std::filesystem::exists(path)) throw LoadError("missing frame file " + path.string());
          r.frames.push_back(normalize(read_image(path), spec.channels));
        }
        r.n_frames = static_cast<int>(r.frames.size());
      } else if (v.contains("features")) {
        const auto path = base / v["features"].get<std::string>();
        if (!std::filesystem::exists(path)) throw LoadError("missing feature file " + path.string());
        auto cache = io::read_feature_cache(path);
        r.n_frames = static_cast<int>(cache.features.rows());
        r.features = std::move(cache.features);
        r.features_encoder = cache.encoder_id;
      } else {
        throw ValidationError("video " + r.video_id + " has neither frames nor features");
      }
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed manifest entry in " + manifest_path.string() + ": " + e.what());
    }
    validate_record(r, spec);
    records.push_back(std::move(r));
  }
  return records;
}

/// Writes records in manifest form under out_dir (frames as 8-bit PNG,
/// cached features as feature containers). Returns the manifest path.
inline std::filesystem::path save_dataset(const std::vector<VideoRecord>& records, const DatasetSpec& spec,
                                          const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json v;
    v["id"] = r.video_id;
    v["fps"] = r.fps;
    v["query"] = r.query ? nlohmann::json(*r.query) : nlohmann::json(nullptr);
    if (r.has_frames()) {
      const fs::path rel = fs::path("frames") / r.video_id;
      fs::create_directories(out_dir / rel);
      nlohmann::json paths = nlohmann::json::array();
      for (std::size_t i = 0; i < r.frames.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.png", i);
        write_png(out_dir / rel / name, denormalize(r.frames[i], spec.channels));
        paths.push_back((rel / name).generic_string());
      }
      v["frames"] = paths;
    } else if (r.features) {
      const fs::path rel = fs::path("features") / (r.video_id + ".feat");
      fs::create_directories(out_dir / "features");
      io::write_feature_cache(out_dir / rel, {*r.features, r.features_encoder, 0});
      v["features"] = rel.generic_string();
    }
    nlohmann::json tracks = nlohmann::json::array();
    for (const auto& t : r.annotations) tracks.push_back({{"annotator", t.annotator_id}, {"scores", t.frame_scores}});
    v["annotations"] = tracks;
    videos.push_back(v);
  }
  const nlohmann::json manifest = {{"dataset", to_string(spec.name)}, {"videos", videos}};
  const auto path = out_dir / "manifest.json";
  std::ofstream(path) << manifest.dump(2) << '\n';
  return path;
}

// ------------------------------------------------------ segment labels

/// Frames per segment; fractional products are rounded to whole frames.
inline std::size_t segment_length(double fps, double segment_seconds) {
  if (!(fps > 0) || !(segment_seconds > 0)) throw ArgumentError("fps and segment length must be positive");
  return static_cast<std::size_t>(std::max(1L, round_half_up(fps * segment_seconds)));
}

/// Mean frame score over consecutive segments. The trailing partial segment is kept.
inline std::vector<double> derive_segment_scores(const std::vector<double>& frame_scores, double fps,
                                                 double segment_seconds = 2.0) {
  if (frame_scores.empty()) throw ArgumentError("derive_segment_scores: empty input");
  const std::size_t len = segment_length(fps, segment_seconds);
  std::vector<double> out;
  for (std::size_t start = 0; start < frame_scores.size(); start += len) {
    const std::size_t stop = std::min(frame_scores.size(), start + len);
    double total = 0.0;
    for (std::size_t i = start; i < stop; ++i) total += frame_scores[i];
    out.push_back(total / static_cast<double>(stop - start));
  }
  return out;
}

/// Broadcasts segment scores back onto their member frames.
inline std::vector<double> expand_segment_scores(const std::vector<double>& segment_scores, std::size_t n_frames,
                                                 double fps, double segment_seconds = 2.0) {
  const std::size_t len = segment_length(fps, segment_seconds);
  if (segment_scores.size() != (n_frames + len - 1) / len)
    throw ArgumentError("expand_segment_scores: segment count does not match frame count");
  std::vector<double> out(n_frames);
  for (std::size_t i = 0; i < n_frames; ++i) out[i] = segment_scores[i / len];
  return out;
}

// ---------------------------------------------------------------- splits

struct Split {
  std::vector<std::string> train_ids;
  std::vector<std::string> eval_ids;
  friend bool operator==(const Split&, const Split&) = default;
};

struct SplitPlan {
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<Split> splits;

  friend bool operator==(const SplitPlan& a, const SplitPlan& b) {
    return a.k == b.k && a.seed == b.seed && a.splits == b.splits;
  }
};

/// k independent random train/eval partitions. Within a split the ids keep
/// their input order.
inline SplitPlan make_splits(const std::vector<std::string>& video_ids, int k = 5, double train_frac = 0.8,
                             std::uint64_t seed = 0) {
  if (k < 1) throw ArgumentError("make_splits: k must be positive");
  if (!(train_frac >= 0.0 && train_frac <= 1.0)) throw ArgumentError("make_splits: train_frac outside [0, 1]");
  const auto n = static_cast<long>(video_ids.size());
  const long n_train = round_half_up(train_frac * static_cast<double>(n));
  if (n - n_train < 1)
    throw ArgumentError("make_splits: " + std::to_string(n) + " ids leave no evaluation video at train_frac " +
                        std::to_string(train_frac));
  SplitPlan plan;
  plan.k = k;
  plan.seed = seed;
  for (int s = 0; s < k; ++s) {
    std::vector<std::size_t> order(video_ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(s)));
    rng.shuffle(order);
    std::vector<bool> in_train(video_ids.size(), false);
    for (long i = 0; i < n_train; ++i) in_train[order[i]] = true;
    Split split;
    for (std::size_t i = 0; i < video_ids.size(); ++i)
      (in_train[i] ? split.train_ids : split.eval_ids).push_back(video_ids[i]);
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

inline nlohmann::json to_json(const SplitPlan& plan) {
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& s : plan.splits) splits.push_back({{"train", s.train_ids}, {"eval", s.eval_ids}});
  return {{"k", plan.k}, {"seed", plan.seed}, {"splits", splits}};
}

inline SplitPlan split_plan_from_json(const nlohmann::json& j) {
  SplitPlan plan;
  plan.k = j.at("k").get<int>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& s : j.at("splits"))
    plan.splits.push_back({s.at("train").get<std::vector<std::string>>(), s.at("eval").get<std::vector<std::string>>()});
  return plan;
}

// ------------------------------------------------------------- synthetic

namespace detail {
inline const std::vector<std::string>& synthetic_words() {
  static const std::vector<std::string> words = {
      "dog", "park", "beach", "city", "night", "cooking", "pasta", "bike", "repair", "mountain",
      "hike", "concert", "crowd", "parade", "river", "boat", "snow", "skiing", "kitchen", "market"};
  return words;
}
}  // namespace detail

/// Deterministic toy dataset. Every video has one contiguous planted block
/// of n_frames/4 frames: bright, striped, and scored 1 by the single
/// annotator; all other frames are dark, smooth, and scored 0. Pixel values
/// are multiples of 1/255 so PNG round trips are exact.
inline std::vector<VideoRecord> generate_synthetic(int n_videos, int n_frames, bool with_query, std::uint64_t seed,
                                                   int image_size = kFrameSize) {
  if (n_videos < 1) throw ArgumentError("generate_synthetic: n_videos must be >= 1");
  if (n_frames < 4) throw ArgumentError("generate_synthetic: n_frames must be >= 4");
  if (image_size < 8) throw ArgumentError("generate_synthetic: image_size must be >= 8");
  const DatasetSpec spec = DatasetSpec::synthetic(with_query);
  const int block = n_frames / 4;
  const auto quantize = [](double v) {
    return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
  };

  std::vector<VideoRecord> out;
  for (int v = 0; v < n_videos; ++v) {
    char id[32];
    std::snprintf(id, sizeof id, "synthetic_%03d", v);
    Rng rng(mix_seed(seed, std::string_view(id)));
    VideoRecord r;
    r.video_id = id;
    r.n_frames = n_frames;
    const int start = static_cast<int>(rng.index(static_cast<std::size_t>(n_frames - block + 1)));
    std::vector<double> scores(static_cast<std::size_t>(n_frames), 0.0);
    for (int f = 0; f < n_frames; ++f) {
      const bool planted = f >= start && f < start + block;
      scores[f] = planted ? 1.0 : 0.0;
      Image raw(image_size, image_size);
      std::array<double, 3> base;
      for (double& b : base) b = planted ? rng.uniform(0.60, 0.90) : rng.uniform(0.10, 0.40);
      const int period = 8 + static_cast<int>(rng.index(8));
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
          const double stripe = planted ? (((x + y) / period) % 2 == 0 ? 0.08 : -0.08) : 0.0;
          for (int c = 0; c < kChannels; ++c) raw.at(y, x, c) = quantize(base[c] + stripe + rng.uniform(-0.03, 0.03));
        }
      r.frames.push_back(normalize(raw, spec.channels));
    }
    r.annotations.push_back({"synthetic_0", scores});
    if (with_query) {
      const auto& words = detail::synthetic_words();
      const int n_words = 3 + static_cast<int>(rng.index(3));
      std::ostringstream q;
      for (int w = 0; w < n_words; ++w) q << (w ? " " : "") << words[rng.index(words.size())];
      r.query = q.str();
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace condsum
