#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "condsum/core.hpp"

namespace condsum {

inline constexpr int kFrameSize = 224;
inline constexpr int kChannels = 3;

/// Interleaved RGB image (row-major, HWC). Pixel values are either raw
/// intensities in [0, 1] or per-channel normalized values, depending on
/// where in the pipeline the image sits.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * kChannels, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c]; }
  bool empty() const { return pixels.empty(); }
  friend bool operator==(const Image&, const Image&) = default;
};

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

inline Image normalize(const Image& raw, const ChannelStats& stats) {
  Image out = raw;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const int c = static_cast<int>(i % kChannels);
    out.pixels[i] = static_cast<float>((raw.pixels[i] - stats.mean[c]) / stats.std[c]);
  }
  return out;
}

inline Image denormalize(const Image& normalized, const ChannelStats& stats) {
  Image out = normalized;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const int c = static_cast<int>(i % kChannels);
    out.pixels[i] = static_cast<float>(normalized.pixels[i] * stats.std[c] + stats.mean[c]);
  }
  return out;
}

/// Normalized values of raw intensities 0 and 1 for channel c.
inline float channel_min(const ChannelStats& s, int c) { return static_cast<float>(-s.mean[c] / s.std[c]); }
inline float channel_max(const ChannelStats& s, int c) { return static_cast<float>((1.0 - s.mean[c]) / s.std[c]); }

/// Reads PNG/JPEG as raw RGB in [0, 1], resized to size x size.
inline Image read_image(const std::filesystem::path& path, int size = kFrameSize) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot read image " + path.string());
  if (bgr.rows != size || bgr.cols != size)
    cv::resize(bgr, bgr, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image img(size, size);
  for (int y = 0; y < size; ++y) {
    const auto* row = rgb.ptr<unsigned char>(y);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < kChannels; ++c) img.at(y, x, c) = static_cast<float>(row[x * kChannels + c] / 255.0);
  }
  return img;
}

/// Writes a raw [0, 1] RGB image as 8-bit PNG.
inline void write_png(const std::filesystem::path& path, const Image& raw) {
  cv::Mat bgr(raw.height, raw.width, CV_8UC3);
  for (int y = 0; y < raw.height; ++y) {
    auto* row = bgr.ptr<unsigned char>(y);
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < kChannels; ++c) {
        const double v = std::clamp(static_cast<double>(raw.at(y, x, c)), 0.0, 1.0);
        row[x * kChannels + (2 - c)] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  }
  if (!cv::imwrite(path.string(), bgr)) throw LoadError("cannot write image " + path.string());
}

}  // namespace condsum
