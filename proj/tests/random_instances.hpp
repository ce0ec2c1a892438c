#ifndef LIRR_TESTS_RANDOM_INSTANCES_HPP
#define LIRR_TESTS_RANDOM_INSTANCES_HPP

// Seeded random problem instances for matching, NMS and COCO evaluation.
// Anchor/GT coordinates are snapped to a half-pixel lattice and scores to a
// coarse grid so that ties actually occur.

#include <cmath>
#include <random>
#include <vector>

#include "lirr/coco_eval.hpp"
#include "lirr/geometry.hpp"

namespace instances {

using lirr::BBox;
using lirr::Detection;

inline double snap(double v, double q) { return std::round(v / q) * q; }

inline BBox random_box(std::mt19937_64& rng, double extent, double min_size = 2.0, double lattice = 0.0) {
  std::uniform_real_distribution<double> size(min_size, extent * 0.6), pos(0, 1);
  double w = size(rng), h = size(rng);
  double x = pos(rng) * (extent - w), y = pos(rng) * (extent - h);
  if (lattice > 0) {
    x = snap(x, lattice), y = snap(y, lattice);
    w = std::max(lattice, snap(w, lattice)), h = std::max(lattice, snap(h, lattice));
  }
  return {x, y, x + w, y + h};
}

// At most 72 anchors on a 32x32 image.
inline lirr::AnchorConfig random_anchor_config(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> scale(3, 20), coin(0, 1);
  lirr::AnchorConfig cfg{32, 32, {}};
  for (std::size_t stride : {8u, 16u}) {
    if (!cfg.levels.empty() && coin(rng)) continue;
    lirr::AnchorLevel lv;
    lv.stride = stride;
    lv.scales.clear();
    lv.aspects.clear();
    const int ns = stride == 8 ? 1 : 1 + coin(rng);
    for (int s = 0; s < ns; ++s) lv.scales.push_back(static_cast<double>(scale(rng)));
    for (double a : {1.0, 2.0, 0.5})
      if (lv.aspects.empty() || coin(rng)) lv.aspects.push_back(a);
    cfg.levels.push_back(lv);
  }
  return cfg;
}

struct MatchInstance {
  lirr::AnchorGrid grid;
  std::vector<BBox> gts;
  std::vector<int> classes;
  lirr::MatchThresholds thr;
};

inline MatchInstance match_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MatchInstance m;
  m.grid = lirr::generate_anchors(random_anchor_config(rng));
  std::uniform_int_distribution<std::size_t> ng(0, 10), pick(0, m.grid.size() - 1);
  std::uniform_int_distribution<int> cls(0, 2);
  std::bernoulli_distribution copy_anchor(0.25), dup(0.1);
  const std::size_t n = ng(rng);
  for (std::size_t g = 0; g < n; ++g) {
    if (g > 0 && dup(rng)) m.gts.push_back(m.gts[g - 1]);
    else if (copy_anchor(rng)) m.gts.push_back(m.grid.anchors[pick(rng)]);
    else m.gts.push_back(random_box(rng, 32, 2, 0.5));
    m.classes.push_back(cls(rng));
  }
  std::uniform_int_distribution<int> p(4, 6), gap(0, 1);
  m.thr.positive = p(rng) / 10.0;
  m.thr.negative = m.thr.positive - gap(rng) / 10.0;
  return m;
}

// 20 boxes in two classes, clustered so suppression happens, tied scores.
inline std::vector<Detection> nms_instance(std::uint64_t seed, std::size_t n = 20) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cls(0, 1), score(1, 10);
  std::normal_distribution<double> jitter(0, 2);
  std::vector<BBox> centers{random_box(rng, 64, 8), random_box(rng, 64, 8), random_box(rng, 64, 8)};
  std::uniform_int_distribution<std::size_t> which(0, centers.size() - 1);
  std::vector<Detection> d;
  for (std::size_t i = 0; i < n; ++i) {
    BBox b = centers[which(rng)];
    b.x1 += jitter(rng), b.y1 += jitter(rng), b.x2 += jitter(rng), b.y2 += jitter(rng);
    if (b.x2 < b.x1) std::swap(b.x1, b.x2);
    if (b.y2 < b.y1) std::swap(b.y1, b.y2);
    d.push_back({b, cls(rng), score(rng) / 10.0});
  }
  return d;
}

// Detections scattered around the GTs plus pure noise, with score ties and
// images that have GT but no detections (and vice versa).
inline lirr::EvalInput eval_instance(std::uint64_t seed, std::size_t images = 50, int classes = 2,
                                     std::size_t max_dets_per_image = 12) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> ngt(0, 3), cls(0, classes - 1), score(0, 40);
  std::uniform_int_distribution<std::size_t> ndet(0, max_dets_per_image);
  std::normal_distribution<double> jitter(0, 3);
  std::bernoulli_distribution near(0.7), wrong_class(0.1);
  lirr::EvalInput in;
  for (std::size_t i = 0; i < images; ++i) {
    lirr::ImageRecord r;
    r.image_id = static_cast<std::int64_t>(1000 + 7 * i);
    const int g = ngt(rng);
    for (int k = 0; k < g; ++k) {
      r.gt_boxes.push_back(random_box(rng, 64, 6));
      r.gt_classes.push_back(cls(rng));
    }
    const std::size_t nd = ndet(rng);
    for (std::size_t k = 0; k < nd; ++k) {
      Detection d;
      if (!r.gt_boxes.empty() && near(rng)) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, r.gt_boxes.size() - 1)(rng);
        d.bbox = r.gt_boxes[j];
        d.bbox.x1 += jitter(rng), d.bbox.y1 += jitter(rng), d.bbox.x2 += jitter(rng), d.bbox.y2 += jitter(rng);
        if (d.bbox.x2 < d.bbox.x1) std::swap(d.bbox.x1, d.bbox.x2);
        if (d.bbox.y2 < d.bbox.y1) std::swap(d.bbox.y1, d.bbox.y2);
        d.class_id = wrong_class(rng) ? cls(rng) : r.gt_classes[j];
      } else {
        d.bbox = random_box(rng, 64, 4);
        d.class_id = cls(rng);
      }
      d.score = score(rng) / 40.0;
      r.detections.push_back(d);
    }
    in.push_back(std::move(r));
  }
  return in;
}

}  // namespace instances

#endif  // LIRR_TESTS_RANDOM_INSTANCES_HPP
