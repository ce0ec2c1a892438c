#ifndef LIRR_COCO_EVAL_HPP
#define LIRR_COCO_EVAL_HPP

// COCO-style box AP: greedy score-ordered matching, 101-point interpolated
// precision, averaged over IoU thresholds 0.50:0.05:0.95 and over classes.
// One area range, at most max_dets detections per image.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "lirr/geometry.hpp"

namespace lirr {

struct ImageRecord {
  std::int64_t image_id = 0;
  std::vector<BBox> gt_boxes;
  std::vector<int> gt_classes;
  std::vector<Detection> detections;
};

using EvalInput = std::vector<ImageRecord>;

inline constexpr std::size_t kRecallPoints = 101;
inline constexpr double kApUndefined = -1.0;

// Recall grid i / 100 and thresholds (50 + 5 i) / 100, each the double
// nearest its decimal value.
inline std::vector<double> recall_grid() {
  std::vector<double> r(kRecallPoints);
  for (std::size_t i = 0; i < kRecallPoints; ++i) r[i] = static_cast<double>(i) / 100.0;
  return r;
}

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t(10);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(50 + 5 * i) / 100.0;
  return t;
}

// Indices of `dets` by descending score, ties in input order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// TP flag per detection (input order). In score order, each detection takes
// the unmatched same-class GT with the highest IoU >= iou_thr (lowest index on
// ties).
inline std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<BBox>& gt_boxes,
                                          const std::vector<int>& gt_classes, double iou_thr) {
  if (!(iou_thr > 0.0 && iou_thr <= 1.0)) throw std::invalid_argument("match_detections: iou threshold outside (0, 1]");
  if (gt_boxes.size() != gt_classes.size()) throw std::invalid_argument("match_detections: boxes/classes size mismatch");
  std::vector<bool> tp(dets.size(), false);
  std::vector<char> used(gt_boxes.size(), 0);
  for (std::size_t d : score_order(dets)) {
    double best = iou_thr;
    std::ptrdiff_t hit = -1;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      if (used[g] || gt_classes[g] != dets[d].class_id) continue;
      const double v = iou(dets[d].bbox, gt_boxes[g]);
      if (v > best || (hit < 0 && v >= best)) {
        best = v;
        hit = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (hit >= 0) {
      used[static_cast<std::size_t>(hit)] = 1;
      tp[d] = true;
    }
  }
  return tp;
}

struct PRCurve {
  double iou_threshold = 0;
  std::vector<double> recall;     // the 101-point grid
  std::vector<double> precision;  // interpolated, non-increasing
};

// Interpolated precision on the recall grid for flags already in global
// score order.
inline PRCurve precision_recall(const std::vector<bool>& flags_sorted, std::size_t num_gt, double iou_thr = 0) {
  PRCurve c;
  c.iou_threshold = iou_thr;
  c.recall = recall_grid();
  c.precision.assign(kRecallPoints, 0.0);
  if (num_gt == 0) return c;
  const std::size_t n = flags_sorted.size();
  std::vector<double> rec(n), prec(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += flags_sorted[i] ? 1 : 0;
    rec[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  for (std::size_t r = 0; r < kRecallPoints; ++r) {
    const auto it = std::lower_bound(rec.begin(), rec.end(), c.recall[r]);
    if (it == rec.end()) break;
    c.precision[r] = prec[static_cast<std::size_t>(it - rec.begin())];
  }
  return c;
}

// 0 when num_gt == 0 but detections exist, kApUndefined when both are empty.
inline double average_precision(const std::vector<bool>& flags_sorted, std::size_t num_gt) {
  if (num_gt == 0) return flags_sorted.empty() ? kApUndefined : 0.0;
  const auto c = precision_recall(flags_sorted, num_gt);
  return std::accumulate(c.precision.begin(), c.precision.end(), 0.0) / static_cast<double>(kRecallPoints);
}

struct APReport {
  double ap = kApUndefined;
  double ap50 = kApUndefined;
  double ap75 = kApUndefined;
  std::vector<double> thresholds;
  std::vector<double> per_threshold;
  std::size_t num_images = 0, num_gt = 0, num_detections = 0;

  friend bool operator==(const APReport&, const APReport&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(APReport, ap, ap50, ap75, thresholds, per_threshold, num_images, num_gt,
                                                num_detections)

namespace detail {

struct Scored {
  double score;
  std::size_t image, det;  // tie order: image position, then detection position
};

inline double mean_defined(const std::vector<double>& v) {
  double s = 0;
  std::size_t n = 0;
  for (double x : v)
    if (x != kApUndefined) s += x, ++n;
  return n ? s / static_cast<double>(n) : kApUndefined;
}

}  // namespace detail

struct EvalOptions {
  std::vector<double> iou_thresholds = coco_iou_thresholds();
  std::size_t max_dets = 100;
};

// AP per threshold = mean over classes of per-class AP (undefined classes
// excluded); ap = mean over thresholds. Optional curves are per
// (threshold, class) in class order.
inline APReport evaluate(const EvalInput& input, const EvalOptions& opt = {}, std::vector<PRCurve>* curves = nullptr) {
  std::unordered_set<std::int64_t> ids;
  std::set<int> classes;
  APReport rep;
  rep.thresholds = opt.iou_thresholds;
  rep.num_images = input.size();
  // Per image: detections kept after the max_dets cap, in score order.
  std::vector<std::vector<std::size_t>> kept(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto& im = input[i];
    if (!ids.insert(im.image_id).second) throw std::invalid_argument("evaluate: duplicate image id " + std::to_string(im.image_id));
    if (im.gt_boxes.size() != im.gt_classes.size()) throw std::invalid_argument("evaluate: boxes/classes size mismatch");
    classes.insert(im.gt_classes.begin(), im.gt_classes.end());
    kept[i] = score_order(im.detections);
    if (kept[i].size() > opt.max_dets) kept[i].resize(opt.max_dets);
    for (std::size_t d : kept[i]) classes.insert(im.detections[d].class_id);
    rep.num_gt += im.gt_boxes.size();
    rep.num_detections += kept[i].size();
  }

  for (double thr : opt.iou_thresholds) {
    std::vector<double> class_ap;
    for (int cls : classes) {
      std::vector<detail::Scored> all;
      std::vector<std::vector<bool>> flags(input.size());
      std::size_t num_gt = 0;
      for (std::size_t i = 0; i < input.size(); ++i) {
        const auto& im = input[i];
        std::vector<BBox> gb;
        for (std::size_t g = 0; g < im.gt_boxes.size(); ++g)
          if (im.gt_classes[g] == cls) gb.push_back(im.gt_boxes[g]);
        num_gt += gb.size();
        std::vector<Detection> dets;
        for (std::size_t d : kept[i])
          if (im.detections[d].class_id == cls) dets.push_back(im.detections[d]);
        flags[i] = match_detections(dets, gb, std::vector<int>(gb.size(), cls), thr);
        for (std::size_t d = 0; d < dets.size(); ++d) all.push_back({dets[d].score, i, d});
      }
      std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
      std::vector<bool> sorted;
      sorted.reserve(all.size());
      for (const auto& s : all) sorted.push_back(flags[s.image][s.det]);
      class_ap.push_back(average_precision(sorted, num_gt));
      if (curves) curves->push_back(precision_recall(sorted, num_gt, thr));
    }
    rep.per_threshold.push_back(detail::mean_defined(class_ap));
  }
  rep.ap = detail::mean_defined(rep.per_threshold);
  for (std::size_t i = 0; i < rep.thresholds.size(); ++i) {
    if (rep.thresholds[i] == 0.5) rep.ap50 = rep.per_threshold[i];
    if (rep.thresholds[i] == 0.75) rep.ap75 = rep.per_threshold[i];
  }
  return rep;
}

// ---------------------------------------------------------------- detection dump

inline nlohmann::json detection_json(std::int64_t image_id, const Detection& d) {
  return {{"image_id", image_id}, {"class_id", d.class_id}, {"score", d.score},
          {"bbox", {d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2}}};
}

using DetectionsById = std::map<std::int64_t, std::vector<Detection>>;

inline void write_detections(const std::string& path, const std::vector<std::pair<std::int64_t, std::vector<Detection>>>& per_image) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write detections: " + path);
  for (const auto& [id, dets] : per_image)
    for (const auto& d : dets) os << detection_json(id, d).dump() << '\n';
  if (!os) throw std::runtime_error("failed writing detections: " + path);
}

inline DetectionsById read_detections(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read detections: " + path);
  DetectionsById out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto& b = j.at("bbox");
      if (b.size() != 4) throw std::runtime_error("bbox needs 4 values");
      Detection d;
      d.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      d.class_id = j.at("class_id").get<int>();
      d.score = j.at("score").get<double>();
      out[j.at("image_id").get<std::int64_t>()].push_back(d);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Fixed-width table, AP values in points.
inline std::string format_report(const APReport& r) {
  std::ostringstream os;
  auto pts = [](double v) {
    std::ostringstream s;
    if (v == kApUndefined) s << "n/a";
    else s << std::fixed << std::setprecision(1) << 100.0 * v;
    return s.str();
  };
  os << std::left << std::setw(10) << "IoU" << std::right << std::setw(8) << "AP" << '\n';
  for (std::size_t i = 0; i < r.thresholds.size(); ++i)
    os << std::left << std::setw(10) << std::fixed << std::setprecision(2) << r.thresholds[i] << std::right << std::setw(8)
       << pts(r.per_threshold[i]) << '\n';
  os << std::left << std::setw(10) << "AP" << std::right << std::setw(8) << pts(r.ap) << '\n';
  os << std::left << std::setw(10) << "AP50" << std::right << std::setw(8) << pts(r.ap50) << '\n';
  os << std::left << std::setw(10) << "AP75" << std::right << std::setw(8) << pts(r.ap75) << '\n';
  return os.str();
}

}  // namespace lirr

#endif  // LIRR_COCO_EVAL_HPP
