#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "condsum/autodiff.hpp"
#include "condsum/binary_io.hpp"
#include "condsum/core.hpp"
#include "condsum/dataset.hpp"
#include "condsum/image.hpp"
#include "condsum/intervention.hpp"

namespace condsum {

enum class EncoderKind { spatiotemporal, per_frame_2d, toy };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::spatiotemporal: return "spatiotemporal";
    case EncoderKind::per_frame_2d: return "per_frame_2d";
    case EncoderKind::toy: return "toy";
  }
  return "unknown";
}

inline EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "spatiotemporal") return EncoderKind::spatiotemporal;
  if (s == "per_frame_2d") return EncoderKind::per_frame_2d;
  if (s == "toy") return EncoderKind::toy;
  throw ArgumentError("unknown encoder '" + s + "'");
}

struct FrameFeatures {
  Matrix features;  // n_frames x d_v
  std::string encoder_id;
};

// ------------------------------------------------------------- encoders

namespace detail {

/// Channel-major planar tensor (c x h x w), used inside the conv stacks.
struct Planar {
  int channels = 0, height = 0, width = 0;
  std::vector<double> data;
  Planar() = default;
  Planar(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0) {}
  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Area-average downsampling to size x size planar.
inline Planar downsample(const Image& img, int size) {
  Planar out(kChannels, size, size);
  Planar count(1, size, size);
  for (int y = 0; y < img.height; ++y) {
    const int oy = y * size / img.height;
    for (int x = 0; x < img.width; ++x) {
      const int ox = x * size / img.width;
      for (int c = 0; c < kChannels; ++c) out.at(c, oy, ox) += img.at(y, x, c);
      count.at(0, oy, ox) += 1.0;
    }
  }
  for (int c = 0; c < kChannels; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(c, y, x) /= std::max(1.0, count.at(0, y, x));
  return out;
}

/// Frozen 3x3 stride-2 convolution with zero padding and tanh.
/// Weights are laid out [out][in][time][ky][kx]; time taps span inputs.size().
struct Conv {
  int in_channels = 0, out_channels = 0, time = 1;
  std::vector<double> weights;
  std::vector<double> bias;

  Conv(int in, int out, int t, Rng& rng) : in_channels(in), out_channels(out), time(t) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(in * t * 9));
    weights.resize(static_cast<std::size_t>(out) * in * t * 9);
    for (double& w : weights) w = rng.normal() * scale;
    bias.resize(static_cast<std::size_t>(out));
    for (double& b : bias) b = rng.normal() * 0.1;
  }

  double w(int o, int i, int t, int ky, int kx) const {
    return weights[((((static_cast<std::size_t>(o) * in_channels + i) * time + t) * 3 + ky) * 3 + kx)];
  }

  /// inputs.size() == time; output has ceil(h/2) x ceil(w/2) spatial size.
  Planar apply(const std::vector<const Planar*>& inputs) const {
    const int h = inputs[0]->height, wd = inputs[0]->width;
    Planar out(out_channels, (h + 1) / 2, (wd + 1) / 2);
    for (int o = 0; o < out_channels; ++o)
      for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox) {
          double acc = bias[o];
          for (int t = 0; t < time; ++t)
            for (int i = 0; i < in_channels; ++i)
              for (int ky = 0; ky < 3; ++ky) {
                const int y = 2 * oy + ky - 1;
                if (y < 0 || y >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int x = 2 * ox + kx - 1;
                  if (x < 0 || x >= wd) continue;
                  acc += w(o, i, t, ky, kx) * inputs[t]->at(i, y, x);
                }
              }
          out.at(o, oy, ox) = std::tanh(acc);
        }
    return out;
  }
};

/// 2x2 average pooling, flattened.
inline RowVector pool_flatten(const Planar& p) {
  const int h = p.height / 2, w = p.width / 2;
  RowVector out(p.channels * h * w);
  Eigen::Index k = 0;
  for (int c = 0; c < p.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out(k++) = 0.25 * (p.at(c, 2 * y, 2 * x) + p.at(c, 2 * y + 1, 2 * x) + p.at(c, 2 * y, 2 * x + 1) +
                           p.at(c, 2 * y + 1, 2 * x + 1));
  return out;
}

inline RowVector flatten(const Planar& p) {
  RowVector out(static_cast<Eigen::Index>(p.data.size()));
  for (std::size_t i = 0; i < p.data.size(); ++i) out(static_cast<Eigen::Index>(i)) = p.data[i];
  return out;
}

}  // namespace detail

/// Training-free visual encoder with seeded frozen weights.
///   toy:            random projection of 8x8 area-downsampled pixels;
///   per_frame_2d:   two 3x3 conv layers per frame on a 32x32 thumbnail;
///   spatiotemporal: two 3x3x3 conv layers over a reflect-padded temporal
///                   window centered on each frame.
class VideoEncoder {
 public:
  static constexpr int kThumb = 32;
  static constexpr int kToyThumb = 8;

  VideoEncoder(EncoderKind kind, int d_v = 64, std::uint64_t seed = 0, int window = 5)
      : kind_(kind), d_v_(d_v), seed_(seed), window_(window) {
    if (d_v < 1) throw ArgumentError("VideoEncoder: d_v must be positive");
    if (window < 3 || window % 2 == 0) throw ArgumentError("VideoEncoder: window must be odd and >= 3");
    Rng rng(mix_seed(seed, to_string(kind)));
    switch (kind) {
      case EncoderKind::toy:
        projection_ = rng.normal_matrix(kToyThumb * kToyThumb * kChannels, d_v) /
                      std::sqrt(static_cast<double>(kToyThumb * kToyThumb * kChannels));
        break;
      case EncoderKind::per_frame_2d:
        convs_.emplace_back(kChannels, 8, 1, rng);
        convs_.emplace_back(8, 16, 1, rng);
        break;
      case EncoderKind::spatiotemporal:
        // First layer spans window - 2 frames so that the second 3-tap layer
        // covers the full window.
        convs_.emplace_back(kChannels, 8, window - 2, rng);
        convs_.emplace_back(8, 16, 3, rng);
        break;
    }
    if (kind != EncoderKind::toy) {
      const int pooled = 16 * (kThumb / 8) * (kThumb / 8);
      projection_ = rng.normal_matrix(pooled, d_v) / std::sqrt(static_cast<double>(pooled));
    }
  }

  EncoderKind kind() const { return kind_; }
  int width() const { return d_v_; }
  std::string id() const { return to_string(kind_) + "-d" + std::to_string(d_v_) + "-s" + std::to_string(seed_); }

  FrameFeatures encode(const VideoRecord& record) const {
    if (!record.has_frames()) {
      if (!record.features) throw ArgumentError("encode_video: video " + record.video_id + " has no frames");
      if (record.features->rows() != record.n_frames || record.features->cols() != d_v_)
        throw ValidationError("encode_video: cached features of " + record.video_id + " have shape " +
                              std::to_string(record.features->rows()) + "x" +
                              std::to_string(record.features->cols()) + ", expected " +
                              std::to_string(record.n_frames) + "x" + std::to_string(d_v_));
      return {*record.features, record.features_encoder};
    }
    const int n = static_cast<int>(record.frames.size());
    Matrix out(n, d_v_);
    if (kind_ == EncoderKind::toy) {
      for (int f = 0; f < n; ++f) out.row(f) = detail::flatten(detail::downsample(record.frames[f], kToyThumb)) * projection_;
    } else {
      std::vector<detail::Planar> thumbs;
      thumbs.reserve(static_cast<std::size_t>(n));
      for (const auto& img : record.frames) thumbs.push_back(detail::downsample(img, kThumb));
      for (int f = 0; f < n; ++f) out.row(f) = encode_frame(thumbs, f) * projection_;
    }
    if (!out.allFinite()) throw NumericalError("encode_video: non-finite features for " + record.video_id);
    return {std::move(out), id()};
  }

 private:
  RowVector encode_frame(const std::vector<detail::Planar>& thumbs, int f) const {
    const int n = static_cast<int>(thumbs.size());
    if (kind_ == EncoderKind::per_frame_2d) {
      detail::Planar a = convs_[0].apply({&thumbs[f]});
      detail::Planar b = convs_[1].apply({&a});
      return detail::pool_flatten(b);
    }
    const int half = window_ / 2;
    std::vector<const detail::Planar*> window;
    for (int k = -half; k <= half; ++k) window.push_back(&thumbs[detail::reflect_index(f + k, n)]);
    // Three overlapping first-layer outputs feed the 3-tap second layer.
    std::vector<detail::Planar> mid;
    const int span = window_ - 2;
    for (int s = 0; s < 3; ++s)
      mid.push_back(convs_[0].apply(std::vector<const detail::Planar*>(window.begin() + s, window.begin() + s + span)));
    detail::Planar out = convs_[1].apply({&mid[0], &mid[1], &mid[2]});
    return detail::pool_flatten(out);
  }

  EncoderKind kind_;
  int d_v_;
  std::uint64_t seed_;
  int window_;
  Matrix projection_;
  std::vector<detail::Conv> convs_;
};

inline FrameFeatures encode_video(const VideoRecord& record, EncoderKind kind, std::uint64_t seed, int d_v = 64) {
  if (!record.has_frames() && !record.features) throw ArgumentError("encode_video: empty frames");
  return VideoEncoder(kind, d_v, seed).encode(record);
}

inline void save_features(const std::filesystem::path& path, const FrameFeatures& f, std::uint64_t seed) {
  io::write_feature_cache(path, {f.features, f.encoder_id, seed});
}

inline FrameFeatures load_features(const std::filesystem::path& path) {
  auto cache = io::read_feature_cache(path);
  return {std::move(cache.features), std::move(cache.encoder_id)};
}

// ----------------------------------------------------------- text tokens

inline std::vector<std::string> tokenize(const std::string& text) {
  auto words = split_words(text);
  for (auto& w : words)
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return words;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary() : tokens_{"<pad>", "<unk>"} {}

  explicit Vocabulary(const std::vector<std::string>& queries) : Vocabulary() {
    std::set<std::string> words;
    for (const auto& q : queries)
      for (auto& w : tokenize(q)) words.insert(w);
    for (const auto& w : words) add(w);
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>")
      throw ValidationError("vocabulary must start with <pad>, <unk>");
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

  int lookup(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const std::string& query) const {
    std::vector<int> ids;
    for (const auto& w : tokenize(query)) ids.push_back(lookup(w));
    return ids;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string id() const {
    std::string joined;
    for (const auto& t : tokens_) joined += t + '\n';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(joined)));
    return "vocab-" + std::to_string(size()) + "-" + buf;
  }

 private:
  void add(const std::string& w) {
    index_.emplace(w, static_cast<int>(tokens_.size()));
    tokens_.push_back(w);
  }
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

/// Sinusoidal positional encoding, n x d_m.
inline Matrix positional_encoding(Eigen::Index n, Eigen::Index d_m) {
  Matrix pe(n, d_m);
  for (Eigen::Index pos = 0; pos < n; ++pos)
    for (Eigen::Index i = 0; i < d_m; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_m));
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

struct TokenMatrix {
  Matrix tokens;  // n_tokens x d_m
  std::string vocabulary_id;
};

/// Differentiable token embedding: table rows plus positional encoding.
inline ad::Var embed_tokens(const ad::Var& table, const std::vector<int>& ids) {
  return ad::add(ad::gather_rows(table, ids), ad::constant(positional_encoding(static_cast<Eigen::Index>(ids.size()), table.cols())));
}

inline TokenMatrix embed_query(const std::string& query, const Vocabulary& vocab, const Matrix& table) {
  const auto ids = vocab.encode(query);
  if (ids.empty()) throw ArgumentError("embed_query: empty query");
  if (table.rows() != vocab.size()) throw ArgumentError("embed_query: table rows must match vocabulary size");
  return {embed_tokens(ad::constant(table), ids).value(), vocab.id()};
}

/// Bag-of-words alternative: token counts hashed into d_m buckets by
/// vocabulary index, normalized to sum to one. Order-free by construction.
inline TokenMatrix embed_query_bow(const std::string& query, const Vocabulary& vocab, int d_m) {
  if (d_m < 1) throw ArgumentError("embed_query_bow: d_m must be positive");
  const auto ids = vocab.encode(query);
  if (ids.empty()) throw ArgumentError("embed_query_bow: empty query");
  Matrix row = Matrix::Zero(1, d_m);
  for (int id : ids) row(0, id % d_m) += 1.0;
  row /= static_cast<double>(ids.size());
  return {row, vocab.id()};
}

/// Seeded embedding table, uniform in +-sqrt(3 / d_m).
inline Matrix init_embedding_table(int vocab_size, int d_m, std::uint64_t seed) {
  Rng rng(mix_seed(seed, "embedding"));
  const double a = std::sqrt(3.0 / d_m);
  Matrix table = rng.uniform_matrix(vocab_size, d_m, -a, a);
  table.row(Vocabulary::kPad).setZero();
  return table;
}

}  // namespace condsum
