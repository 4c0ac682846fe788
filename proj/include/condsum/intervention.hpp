#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condsum/core.hpp"
#include "condsum/dataset.hpp"
#include "condsum/image.hpp"

namespace condsum {

enum class VisualKind { salt_pepper, blur };
enum class TextualKind { word_drop };

inline std::string to_string(VisualKind k) { return k == VisualKind::salt_pepper ? "salt_pepper" : "blur"; }

inline VisualKind parse_visual_kind(const std::string& s) {
  if (s == "salt_pepper") return VisualKind::salt_pepper;
  if (s == "blur") return VisualKind::blur;
  throw ArgumentError("unknown visual intervention kind '" + s + "'");
}

struct InterventionAssignment {
  std::string video_id;
  bool pair_selected = false;
  std::vector<int> frame_flags;
  bool query_flag = false;
  std::map<int, VisualKind> kinds;
  std::optional<TextualKind> query_kind;

  /// Per-frame intervention label: frame flag OR query flag.
  std::vector<int> labels() const {
    std::vector<int> t(frame_flags.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (frame_flags[i] || query_flag) ? 1 : 0;
    return t;
  }

  friend bool operator==(const InterventionAssignment&, const InterventionAssignment&) = default;
};

struct InterventionStrengths {
  double salt_pepper_density = 0.05;
  double blur_sigma = 2.0;
  double word_drop_prob = 0.3;
};

// --------------------------------------------------------------- visual

namespace detail {

// Mirror without repeating the edge sample (d c b | a b c d | c b a).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += k[i + radius];
  }
  for (double& v : k) v /= total;
  return k;
}

inline Image gaussian_blur(const Image& in, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  Image tmp(in.height, in.width), out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < kChannels; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * in.at(y, reflect_index(x + k, in.width), c);
        tmp.at(y, x, c) = static_cast<float>(acc);
      }
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < kChannels; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(reflect_index(y + k, in.height), x, c);
        out.at(y, x, c) = static_cast<float>(acc);
      }
  return out;
}

}  // namespace detail

/// Perturbs one normalized image.
///   salt_pepper: strength is the fraction of pixel positions replaced by the
///                channel minimum or maximum (equiprobable);
///   blur:        strength is the Gaussian standard deviation in pixels,
///                with reflect padding at the borders.
inline Image apply_visual_intervention(const Image& image, VisualKind kind, double strength, std::uint64_t seed,
                                       const ChannelStats& channels) {
  switch (kind) {
    case VisualKind::salt_pepper: {
      if (!(strength >= 0.0 && strength <= 1.0)) throw ArgumentError("salt_pepper density must lie in [0, 1]");
      Image out = image;
      const std::size_t n_pixels = static_cast<std::size_t>(image.height) * image.width;
      const auto n_hit = static_cast<std::size_t>(round_half_up(strength * static_cast<double>(n_pixels)));
      if (n_hit == 0) return out;
      Rng rng(seed);
      std::vector<std::size_t> positions(n_pixels);
      for (std::size_t i = 0; i < n_pixels; ++i) positions[i] = i;
      // Partial Fisher-Yates: the first n_hit entries are a uniform sample.
      for (std::size_t i = 0; i < n_hit; ++i) std::swap(positions[i], positions[i + rng.index(n_pixels - i)]);
      for (std::size_t i = 0; i < n_hit; ++i) {
        const bool salt = rng.bernoulli(0.5);
        for (int c = 0; c < kChannels; ++c)
          out.pixels[positions[i] * kChannels + c] = salt ? channel_max(channels, c) : channel_min(channels, c);
      }
      return out;
    }
    case VisualKind::blur:
      if (!(strength >= 0.0)) throw ArgumentError("blur sigma must be non-negative");
      if (strength == 0.0) return image;
      return detail::gaussian_blur(image, strength);
  }
  throw ArgumentError("unknown visual intervention kind");
}

// -------------------------------------------------------------- textual

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

/// Drops each word independently with probability drop_prob. At least one
/// word always survives.
inline std::string apply_textual_intervention(const std::string& query, double drop_prob, std::uint64_t seed) {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ArgumentError("drop_prob must lie in [0, 1]");
  const auto words = split_words(query);
  if (words.empty()) throw ArgumentError("apply_textual_intervention: empty query");
  Rng rng(seed);
  std::vector<bool> keep(words.size());
  bool any = false;
  for (std::size_t i = 0; i < words.size(); ++i) {
    keep[i] = !rng.bernoulli(drop_prob);
    any = any || keep[i];
  }
  if (!any) keep[rng.index(words.size())] = true;
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i)
    if (keep[i]) out += (out.empty() ? "" : " ") + words[i];
  return out;
}

// -------------------------------------------------------------- dataset

struct ConditionalDataset {
  std::vector<VideoRecord> records;
  std::vector<InterventionAssignment> assignments;
};

/// Selects round(pair_fraction * N) videos; in each, flags round(frame_fraction
/// * n_frames) frames with a visual perturbation and flags the query with
/// probability frame_fraction. Inputs are copied, never modified.
inline ConditionalDataset build_conditional_dataset(const std::vector<VideoRecord>& records, const DatasetSpec& spec,
                                                    double pair_fraction = 0.5, double frame_fraction = 0.3,
                                                    std::uint64_t seed = 0, InterventionStrengths strengths = {}) {
  if (!(pair_fraction >= 0.0 && pair_fraction <= 1.0)) throw ArgumentError("pair_fraction outside [0, 1]");
  if (!(frame_fraction >= 0.0 && frame_fraction <= 1.0)) throw ArgumentError("frame_fraction outside [0, 1]");

  ConditionalDataset out;
  out.records = records;
  const long n_selected = round_half_up(pair_fraction * static_cast<double>(records.size()));
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng pick(mix_seed(seed, "pair-selection"));
  pick.shuffle(order);
  std::vector<bool> selected(records.size(), false);
  for (long i = 0; i < n_selected; ++i) selected[order[i]] = true;

  for (std::size_t r = 0; r < records.size(); ++r) {
    VideoRecord& rec = out.records[r];
    InterventionAssignment a;
    a.video_id = rec.video_id;
    a.pair_selected = selected[r];
    a.frame_flags.assign(static_cast<std::size_t>(rec.n_frames), 0);
    if (a.pair_selected) {
      const std::uint64_t video_seed = mix_seed(seed, rec.video_id);
      Rng rng(video_seed);
      std::vector<int> frames(static_cast<std::size_t>(rec.n_frames));
      for (int i = 0; i < rec.n_frames; ++i) frames[i] = i;
      rng.shuffle(frames);
      const long n_flag = round_half_up(frame_fraction * rec.n_frames);
      for (long i = 0; i < n_flag; ++i) {
        const int f = frames[i];
        a.frame_flags[f] = 1;
        a.kinds[f] = rng.bernoulli(0.5) ? VisualKind::salt_pepper : VisualKind::blur;
      }
      if (rec.query && rng.bernoulli(frame_fraction)) {
        a.query_flag = true;
        a.query_kind = TextualKind::word_drop;
        rec.query = apply_textual_intervention(*rec.query, strengths.word_drop_prob, mix_seed(video_seed, "query"));
      }
      if (rec.has_frames()) {
        for (const auto& [f, kind] : a.kinds) {
          const double strength = kind == VisualKind::salt_pepper ? strengths.salt_pepper_density : strengths.blur_sigma;
          rec.frames[f] = apply_visual_intervention(rec.frames[f], kind, strength,
                                                    mix_seed(video_seed, static_cast<std::uint64_t>(f)), spec.channels);
        }
      }
    }
    out.assignments.push_back(std::move(a));
  }
  return out;
}

// -------------------------------------------------------------- sidecar

inline nlohmann::json to_json(const std::vector<InterventionAssignment>& assignments) {
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& a : assignments) {
    nlohmann::json kinds = nlohmann::json::array();
    for (const auto& [f, k] : a.kinds) kinds.push_back({{"frame", f}, {"kind", to_string(k)}});
    videos.push_back({{"video_id", a.video_id},
                      {"pair_selected", a.pair_selected},
                      {"frame_flags", a.frame_flags},
                      {"query_flag", a.query_flag},
                      {"kinds", kinds},
                      {"query_kind", a.query_kind ? nlohmann::json("word_drop") : nlohmann::json(nullptr)}});
  }
  return {{"videos", videos}};
}

inline std::vector<InterventionAssignment> assignments_from_json(const nlohmann::json& j) {
  std::vector<InterventionAssignment> out;
  for (const auto& v : j.at("videos")) {
    InterventionAssignment a;
    a.video_id = v.at("video_id").get<std::string>();
    a.pair_selected = v.at("pair_selected").get<bool>();
    a.frame_flags = v.at("frame_flags").get<std::vector<int>>();
    a.query_flag = v.at("query_flag").get<bool>();
    for (const auto& k : v.at("kinds")) a.kinds[k.at("frame").get<int>()] = parse_visual_kind(k.at("kind").get<std::string>());
    if (!v.at("query_kind").is_null()) {
      if (v["query_kind"].get<std::string>() != "word_drop") throw ValidationError("unknown query intervention kind");
      a.query_kind = TextualKind::word_drop;
    }
    out.push_back(std::move(a));
  }
  return out;
}

inline void save_assignments(const std::filesystem::path& path, const std::vector<InterventionAssignment>& a) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << to_json(a).dump(2) << '\n';
}

inline std::vector<InterventionAssignment> load_assignments(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open intervention sidecar " + path.string());
  try {
    return assignments_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed intervention sidecar " + path.string() + ": " + e.what());
  }
}

}  // namespace condsum
