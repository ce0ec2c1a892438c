#ifndef LIRR_GEOMETRY_HPP
#define LIRR_GEOMETRY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lirr {

// Corner-format box in pixel coordinates.
template <std::floating_point T>
struct Box {
  T x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  T width() const { return x2 - x1; }
  T height() const { return y2 - y1; }
  T area() const { return std::max(T(0), width()) * std::max(T(0), height()); }
  T cx() const { return T(0.5) * (x1 + x2); }
  T cy() const { return T(0.5) * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 <= x2 &&
           y1 <= y2;
  }

  template <std::floating_point U>
  Box<U> as() const {
    return {static_cast<U>(x1), static_cast<U>(y1), static_cast<U>(x2), static_cast<U>(y2)};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

using BBox = Box<double>;

struct Detection {
  BBox bbox;
  int class_id = 0;  // foreground class, 0-based
  double score = 0;  // in [0, 1]
};

// Intersection over union, computed in double; 0 when the union is empty.
template <std::floating_point T>
double iou(const Box<T>& a, const Box<T>& b) {
  const double iw = std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1);
  const double ih = std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------- anchors

struct AnchorLevel {
  std::size_t stride = 8;
  std::vector<double> scales{16.0};
  std::vector<double> aspects{1.0};  // width / height

  std::size_t per_cell() const { return scales.size() * aspects.size(); }
};

struct AnchorConfig {
  std::size_t image_width = 64;
  std::size_t image_height = 64;
  std::vector<AnchorLevel> levels;
};

struct AnchorInfo {
  std::size_t level;
  double scale;
  double aspect;
};

struct AnchorGrid {
  std::vector<BBox> anchors;
  std::vector<AnchorInfo> info;
  std::vector<std::size_t> grid_h, grid_w;  // per level
  std::vector<std::size_t> level_offset;    // first anchor index of each level
  AnchorConfig config;

  std::size_t size() const { return anchors.size(); }
};

// Anchors ordered level, row, column, scale, aspect; centre of cell (i, j) is
// ((j + 0.5) * stride, (i + 0.5) * stride), size scale*sqrt(a) x scale/sqrt(a).
inline AnchorGrid generate_anchors(const AnchorConfig& cfg) {
  if (cfg.levels.empty()) throw std::invalid_argument("anchor config has no levels");
  AnchorGrid grid;
  grid.config = cfg;
  for (std::size_t l = 0; l < cfg.levels.size(); ++l) {
    const auto& lv = cfg.levels[l];
    if (lv.stride == 0 || cfg.image_width % lv.stride || cfg.image_height % lv.stride) {
      throw std::invalid_argument("anchor level " + std::to_string(l) + ": stride " +
                                  std::to_string(lv.stride) + " does not divide image size " +
                                  std::to_string(cfg.image_width) + "x" + std::to_string(cfg.image_height));
    }
    if (lv.scales.empty() || lv.aspects.empty()) throw std::invalid_argument("anchor level without scales/aspects");
    const std::size_t gh = cfg.image_height / lv.stride, gw = cfg.image_width / lv.stride;
    grid.grid_h.push_back(gh);
    grid.grid_w.push_back(gw);
    grid.level_offset.push_back(grid.anchors.size());
    const double s = static_cast<double>(lv.stride);
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j)
        for (double scale : lv.scales)
          for (double aspect : lv.aspects) {
            const double cx = (static_cast<double>(j) + 0.5) * s;
            const double cy = (static_cast<double>(i) + 0.5) * s;
            const double w = scale * std::sqrt(aspect), h = scale / std::sqrt(aspect);
            grid.anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
            grid.info.push_back({l, scale, aspect});
          }
  }
  return grid;
}

// ---------------------------------------------------------------- box coding

inline constexpr std::array<double, 4> kBoxVariances{0.1, 0.1, 0.2, 0.2};

template <std::floating_point T>
std::array<T, 4> encode_box(const Box<T>& gt, const Box<T>& anchor) {
  if (!(anchor.width() > 0 && anchor.height() > 0)) throw std::invalid_argument("encode_box: degenerate anchor");
  if (!(gt.width() > 0 && gt.height() > 0)) throw std::invalid_argument("encode_box: non-positive box size");
  const T wa = anchor.width(), ha = anchor.height();
  return {(gt.cx() - anchor.cx()) / wa / static_cast<T>(kBoxVariances[0]),
          (gt.cy() - anchor.cy()) / ha / static_cast<T>(kBoxVariances[1]),
          std::log(gt.width() / wa) / static_cast<T>(kBoxVariances[2]),
          std::log(gt.height() / ha) / static_cast<T>(kBoxVariances[3])};
}

template <std::floating_point T>
Box<T> decode_box(const std::array<T, 4>& t, const Box<T>& anchor) {
  const T wa = anchor.width(), ha = anchor.height();
  const T cx = anchor.cx() + t[0] * static_cast<T>(kBoxVariances[0]) * wa;
  const T cy = anchor.cy() + t[1] * static_cast<T>(kBoxVariances[1]) * ha;
  const T w = wa * std::exp(t[2] * static_cast<T>(kBoxVariances[2]));
  const T h = ha * std::exp(t[3] * static_cast<T>(kBoxVariances[3]));
  return {cx - T(0.5) * w, cy - T(0.5) * h, cx + T(0.5) * w, cy + T(0.5) * h};
}

template <std::floating_point T>
Box<T> clamp_box(Box<T> b, T width, T height) {
  b.x1 = std::clamp(b.x1, T(0), width);
  b.x2 = std::clamp(b.x2, T(0), width);
  b.y1 = std::clamp(b.y1, T(0), height);
  b.y2 = std::clamp(b.y2, T(0), height);
  return b;
}

// ---------------------------------------------------------------- matching

struct MatchResult {
  static constexpr int kNegative = -1;
  static constexpr int kIgnore = -2;

  std::vector<int> assignment;      // gt index, kNegative or kIgnore
  std::vector<int> labels;          // class of the assigned gt, -1 otherwise
  std::vector<std::array<double, 4>> targets;  // zero unless positive

  std::size_t num_positive() const {
    return static_cast<std::size_t>(std::count_if(assignment.begin(), assignment.end(), [](int a) { return a >= 0; }));
  }
};

struct MatchThresholds {
  double positive = 0.5;
  double negative = 0.4;
};

// SSD-style assignment:
//  1. each gt, in order, claims its highest-IoU anchor not claimed by an
//     earlier gt (ties: lowest anchor index), provided that IoU > 0;
//  2. other anchors with best IoU >= positive go to their argmax gt
//     (ties: lowest gt index);
//  3. best IoU < negative is background, anything in between is ignored.
inline MatchResult match_anchors(const std::vector<BBox>& gts, const std::vector<int>& classes,
                                 const AnchorGrid& grid, MatchThresholds thr = {}) {
  if (grid.anchors.empty()) throw std::invalid_argument("match_anchors: empty anchor set");
  if (thr.positive < thr.negative) throw std::invalid_argument("match_anchors: positive threshold below negative");
  if (classes.size() != gts.size()) throw std::invalid_argument("match_anchors: boxes/classes size mismatch");
  const std::size_t na = grid.anchors.size(), ng = gts.size();
  MatchResult m;
  m.assignment.assign(na, MatchResult::kNegative);
  m.labels.assign(na, -1);
  m.targets.assign(na, {0, 0, 0, 0});
  if (ng == 0) return m;

  std::vector<double> ious(na * ng);
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t g = 0; g < ng; ++g) ious[a * ng + g] = iou(grid.anchors[a], gts[g]);

  for (std::size_t a = 0; a < na; ++a) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < ng; ++g)
      if (ious[a * ng + g] > ious[a * ng + best]) best = g;
    const double v = ious[a * ng + best];
    if (v >= thr.positive) m.assignment[a] = static_cast<int>(best);
    else if (v >= thr.negative) m.assignment[a] = MatchResult::kIgnore;
  }

  std::vector<char> claimed(na, 0);
  for (std::size_t g = 0; g < ng; ++g) {
    std::size_t best = na;
    for (std::size_t a = 0; a < na; ++a) {
      if (claimed[a]) continue;
      if (best == na || ious[a * ng + g] > ious[best * ng + g]) best = a;
    }
    if (best == na || ious[best * ng + g] <= 0) continue;
    claimed[best] = 1;
    m.assignment[best] = static_cast<int>(g);
  }

  for (std::size_t a = 0; a < na; ++a) {
    const int g = m.assignment[a];
    if (g < 0) continue;
    m.labels[a] = classes[g];
    m.targets[a] = encode_box(gts[g], grid.anchors[a]);
  }
  return m;
}

// ---------------------------------------------------------------- NMS

// Greedy per-class suppression. Output is in keep order: score descending,
// ties by lower input index.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr) {
  if (!(iou_thr >= 0.0 && iou_thr <= 1.0)) throw std::invalid_argument("nms: iou threshold outside [0, 1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<char> suppressed(dets.size(), 0);
  std::vector<Detection> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t a = order[i];
    if (suppressed[a]) continue;
    keep.push_back(dets[a]);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t b = order[j];
      if (!suppressed[b] && dets[b].class_id == dets[a].class_id && iou(dets[a].bbox, dets[b].bbox) > iou_thr)
        suppressed[b] = 1;
    }
  }
  return keep;
}

}  // namespace lirr

#endif  // LIRR_GEOMETRY_HPP
