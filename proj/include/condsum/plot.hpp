#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "condsum/core.hpp"
#include "condsum/evaluation.hpp"

namespace condsum {

struct BarChartStyle {
  int bar_width = 3;
  int gap = 1;
  int plot_height = 200;
  int margin_left = 40;
  int margin_right = 20;
  int margin_top = 20;
  int margin_bottom = 40;
  int tick_every = 20;  // frame indices between labelled ticks
  cv::Scalar selected{160, 160, 160};  // BGR grey
  cv::Scalar discarded{0, 0, 255};     // BGR red
  cv::Scalar axis{0, 0, 0};
  cv::Scalar background{255, 255, 255};
};

/// Row y of the chart just above the x-axis; every bar covers it.
inline int bar_baseline_row(const BarChartStyle& s) { return s.margin_top + s.plot_height - 1; }

/// One bar per frame, height proportional to score, coloured by selection.
inline cv::Mat render_score_bars(const std::vector<ScoreRow>& rows, const BarChartStyle& s = {}) {
  if (rows.empty()) throw ValidationError("plot: no score rows");
  const int n = static_cast<int>(rows.size());
  const int width = s.margin_left + n * (s.bar_width + s.gap) + s.margin_right;
  const int height = s.margin_top + s.plot_height + s.margin_bottom;
  cv::Mat img(height, width, CV_8UC3, s.background);

  double hi = 0.0;
  for (const auto& r : rows) {
    if (!std::isfinite(r.score)) throw ValidationError("plot: non-finite score at frame " + std::to_string(r.frame_index));
    hi = std::max(hi, r.score);
  }
  const int base = bar_baseline_row(s);
  for (int i = 0; i < n; ++i) {
    const double frac = hi > 0 ? std::max(0.0, rows[i].score) / hi : 0.0;
    const int h = std::max(1, static_cast<int>(std::lround(frac * s.plot_height)));
    const int x0 = s.margin_left + i * (s.bar_width + s.gap);
    cv::rectangle(img, cv::Point(x0, base - h + 1), cv::Point(x0 + s.bar_width - 1, base),
                  rows[i].selected ? s.selected : s.discarded, cv::FILLED);
  }
  const int axis_y = base + 1;
  cv::line(img, cv::Point(s.margin_left - 1, axis_y), cv::Point(width - s.margin_right, axis_y), s.axis, 1);
  for (int i = 0; i < n; ++i) {
    if (rows[i].frame_index % s.tick_every != 0) continue;
    const int x = s.margin_left + i * (s.bar_width + s.gap) + s.bar_width / 2;
    cv::line(img, cv::Point(x, axis_y), cv::Point(x, axis_y + 4), s.axis, 1);
    cv::putText(img, std::to_string(rows[i].frame_index), cv::Point(x - 6, axis_y + 18), cv::FONT_HERSHEY_PLAIN, 0.8,
                s.axis, 1, cv::LINE_8);
  }
  cv::putText(img, "frame", cv::Point(width / 2 - 15, height - 6), cv::FONT_HERSHEY_PLAIN, 0.9, s.axis, 1, cv::LINE_8);
  return img;
}

inline void plot_scores(const std::filesystem::path& csv, const std::filesystem::path& out, const BarChartStyle& s = {}) {
  const cv::Mat img = render_score_bars(read_score_csv(csv), s);
  if (!cv::imwrite(out.string(), img)) throw LoadError("cannot write image " + out.string());
}

/// Counts maximal runs of bar-coloured pixels along the baseline row.
inline int count_bars(const cv::Mat& img, const BarChartStyle& s = {}) {
  const int y = bar_baseline_row(s);
  int runs = 0;
  bool inside = false;
  for (int x = 0; x < img.cols; ++x) {
    const cv::Vec3b px = img.at<cv::Vec3b>(y, x);
    const bool bar = px != cv::Vec3b(static_cast<uchar>(s.background[0]), static_cast<uchar>(s.background[1]),
                                     static_cast<uchar>(s.background[2])) &&
                     px != cv::Vec3b(static_cast<uchar>(s.axis[0]), static_cast<uchar>(s.axis[1]),
                                     static_cast<uchar>(s.axis[2]));
    if (bar && !inside) ++runs;
    inside = bar;
  }
  return runs;
}

}  // namespace condsum
