#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "lirr/coco_eval.hpp"
#include "oracles.hpp"
#include "random_instances.hpp"

using namespace lirr;

namespace {

void expect_reports_equal(const APReport& got, const APReport& want, double tol, const std::string& what) {
  ASSERT_EQ(got.per_threshold.size(), want.per_threshold.size()) << what;
  for (std::size_t t = 0; t < got.per_threshold.size(); ++t) EXPECT_NEAR(got.per_threshold[t], want.per_threshold[t], tol) << what;
  EXPECT_NEAR(got.ap, want.ap, tol) << what;
  EXPECT_NEAR(got.ap50, want.ap50, tol) << what;
  EXPECT_NEAR(got.ap75, want.ap75, tol) << what;
}

// Every AP value of `a` is <= the matching value of `b` (up to rounding).
void expect_not_above(const APReport& a, const APReport& b, const std::string& what) {
  for (std::size_t t = 0; t < a.per_threshold.size(); ++t) EXPECT_LE(a.per_threshold[t], b.per_threshold[t] + 1e-12) << what;
  EXPECT_LE(a.ap, b.ap + 1e-12) << what;
}

}  // namespace

TEST(CocoGrid, ThresholdsAndRecallPoints) {
  const auto t = coco_iou_thresholds();
  ASSERT_EQ(t.size(), 10u);
  EXPECT_EQ(t.front(), 0.5);
  EXPECT_EQ(t[5], 0.75);
  EXPECT_EQ(t.back(), 0.95);
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_NEAR(t[i] - t[i - 1], 0.05, 1e-12);
  const auto r = recall_grid();
  ASSERT_EQ(r.size(), 101u);
  EXPECT_EQ(r[1], 0.01);
  EXPECT_EQ(r[100], 1.0);
}

TEST(CocoMatch, Examples) {
  const BBox g{0, 0, 10, 10};
  EXPECT_EQ(match_detections({{g, 0, 0.5}}, {g}, {0}, 0.5), std::vector<bool>{true});
  // Two detections on one GT: the higher score wins regardless of order.
  EXPECT_EQ(match_detections({{g, 0, 0.3}, {g, 0, 0.9}}, {g}, {0}, 0.5), (std::vector<bool>{false, true}));
  // Wrong class never matches.
  EXPECT_EQ(match_detections({{g, 1, 0.9}}, {g}, {0}, 0.5), std::vector<bool>{false});
  EXPECT_THROW(match_detections({}, {}, {}, 0.0), std::invalid_argument);
}

TEST(CocoMatch, EqualsExhaustiveReference) {
  std::mt19937_64 rng(2);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto in = instances::eval_instance(seed, 1, 2, 10);
    auto im = in[0];
    // Pad to a 10 x 10 instance.
    while (im.gt_boxes.size() < 10) {
      im.gt_boxes.push_back(instances::random_box(rng, 64, 6));
      im.gt_classes.push_back(static_cast<int>(rng() % 2));
    }
    while (im.detections.size() < 10) {
      auto d = im.detections.empty() ? Detection{im.gt_boxes[0], im.gt_classes[0], 0.5} : im.detections.back();
      d.bbox.x1 += 1;
      d.score = static_cast<double>(rng() % 5) / 4.0;
      im.detections.push_back(d);
    }
    for (double thr : coco_iou_thresholds())
      ASSERT_EQ(match_detections(im.detections, im.gt_boxes, im.gt_classes, thr),
                oracle::match_flags(im.detections, im.gt_boxes, im.gt_classes, thr))
          << "seed " << seed << " thr " << thr;
  }
}

TEST(CocoAp, Examples) {
  EXPECT_EQ(average_precision({true}, 1), 1.0);
  EXPECT_EQ(average_precision({}, 3), 0.0);
  EXPECT_EQ(average_precision({false}, 0), 0.0);
  EXPECT_EQ(average_precision({}, 0), kApUndefined);
  // [TP, FP, TP], 2 GTs: precision 1 up to recall .5, then 2/3 up to 1.
  const double want = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101.0;
  EXPECT_NEAR(average_precision({true, false, true}, 2), want, 1e-15);
  EXPECT_NEAR(average_precision({true, false, true}, 2), oracle::average_precision({true, false, true}, 2), 1e-15);
}

TEST(CocoAp, EqualsDefinitionOnRandomFlags) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = rng() % 30, gt = rng() % 12;
    std::vector<bool> flags(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
      flags[k] = tp < gt && rng() % 2;
      tp += flags[k];
    }
    EXPECT_NEAR(average_precision(flags, gt), oracle::average_precision(flags, gt), 1e-12);
  }
}

TEST(CocoAp, EnvelopeIsNonIncreasing) {
  std::vector<PRCurve> curves;
  evaluate(instances::eval_instance(3), {}, &curves);
  ASSERT_FALSE(curves.empty());
  for (const auto& c : curves)
    for (std::size_t r = 1; r < c.precision.size(); ++r) EXPECT_LE(c.precision[r], c.precision[r - 1]);
}

TEST(CocoEvaluate, PerfectDetectorScoresOne) {
  EvalInput in;
  for (int i = 0; i < 5; ++i) {
    ImageRecord r;
    r.image_id = i;
    r.gt_boxes = {BBox{1.0 * i, 2, 20, 30}};
    r.gt_classes = {0};
    r.detections = {{r.gt_boxes[0], 0, 1.0}};
    in.push_back(r);
  }
  const auto rep = evaluate(in);
  EXPECT_EQ(rep.ap, 1.0);
  EXPECT_EQ(rep.ap50, 1.0);
  EXPECT_EQ(rep.ap75, 1.0);
  EXPECT_EQ(rep.thresholds.size(), 10u);
  EXPECT_EQ(rep.num_gt, 5u);
}

TEST(CocoEvaluate, EmptyClassIsExcludedFromAverage) {
  // Class 1 has neither GT nor detections anywhere: not in the average.
  // Class 2 has a detection but no GT: AP 0 and averaged in.
  ImageRecord r;
  r.image_id = 1;
  r.gt_boxes = {BBox{0, 0, 10, 10}};
  r.gt_classes = {0};
  r.detections = {{r.gt_boxes[0], 0, 0.9}};
  EXPECT_EQ(evaluate({r}).ap, 1.0);
  r.detections.push_back({BBox{20, 20, 30, 30}, 2, 0.1});
  EXPECT_EQ(evaluate({r}).ap, 0.5);
  const auto empty = evaluate({});
  EXPECT_EQ(empty.ap, kApUndefined);
}

TEST(CocoEvaluate, DuplicateImageIdIsAnError) {
  ImageRecord r;
  r.image_id = 4;
  EXPECT_THROW(evaluate({r, r}), std::invalid_argument);
}

TEST(CocoEvaluate, MaxDetsCapsEachImage) {
  ImageRecord r;
  r.image_id = 0;
  r.gt_boxes = {BBox{0, 0, 10, 10}};
  r.gt_classes = {0};
  for (int k = 0; k < 3; ++k) r.detections.push_back({BBox{30, 30, 40, 40}, 0, 0.9});
  r.detections.push_back({r.gt_boxes[0], 0, 0.5});
  EvalOptions opt;
  opt.max_dets = 3;
  EXPECT_EQ(evaluate({r}, opt).ap, 0.0);
  opt.max_dets = 4;
  EXPECT_NEAR(evaluate({r}, opt).ap, 0.25, 1e-15);
  EXPECT_NEAR(oracle::evaluate({r}, 4).ap, 0.25, 1e-15);
}

TEST(CocoEvaluate, EqualsBruteForceReport) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto in = instances::eval_instance(seed, 50, 1 + static_cast<int>(seed % 3));
    const auto got = evaluate(in);
    expect_reports_equal(got, oracle::evaluate(in), 1e-9, "seed " + std::to_string(seed));
    double mean = 0;
    for (double v : got.per_threshold) mean += v;
    EXPECT_NEAR(got.ap, mean / 10.0, 1e-9);
    for (double v : got.per_threshold) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(CocoEvaluate, BruteForceAgreesUnderATightCap) {
  EvalOptions opt;
  opt.max_dets = 3;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto in = instances::eval_instance(seed, 20, 2);
    expect_reports_equal(evaluate(in, opt), oracle::evaluate(in, 3), 1e-9, "seed " + std::to_string(seed));
  }
}

TEST(CocoProperties, DuplicateOfTruePositiveNeverHelps) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto in = instances::eval_instance(seed, 30);
    const auto base = evaluate(in);
    // Duplicate, at a lower score, a TP that overlaps no other GT of its
    // class enough to be matched there instead.
    for (auto& im : in) {
      const auto flags = match_detections(im.detections, im.gt_boxes, im.gt_classes, 0.5);
      for (std::size_t d = 0; d < flags.size(); ++d) {
        int overlapping = 0;
        for (std::size_t g = 0; g < im.gt_boxes.size(); ++g)
          overlapping += im.gt_classes[g] == im.detections[d].class_id && iou(im.gt_boxes[g], im.detections[d].bbox) >= 0.5;
        if (flags[d] && overlapping == 1) {
          auto dup = im.detections[d];
          dup.score *= 0.5;
          im.detections.push_back(dup);
          break;
        }
      }
    }
    expect_not_above(evaluate(in), base, "seed " + std::to_string(seed));
  }
}

TEST(CocoProperties, RemovingFalsePositivesNeverHurts) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto in = instances::eval_instance(seed, 30);
    for (const double thr : coco_iou_thresholds()) {
      EvalOptions opt;
      opt.iou_thresholds = {thr};
      auto pruned = in;
      for (auto& im : pruned) {
        const auto flags = match_detections(im.detections, im.gt_boxes, im.gt_classes, thr);
        std::vector<Detection> keep;
        for (std::size_t d = 0; d < flags.size(); ++d)
          if (flags[d]) keep.push_back(im.detections[d]);
        im.detections = keep;
      }
      const auto before = evaluate(in, opt), after = evaluate(pruned, opt);
      EXPECT_LE(before.per_threshold[0], after.per_threshold[0] + 1e-12) << "seed " << seed << " thr " << thr;
    }
  }
}

TEST(CocoProperties, MonotoneScoreTransformLeavesApUnchanged) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto in = instances::eval_instance(seed, 30);
    const auto base = evaluate(in);
    for (auto& im : in)
      for (auto& d : im.detections) d.score = 1.0 / (1.0 + std::exp(-7.0 * d.score + 2.0));
    EXPECT_EQ(evaluate(in).per_threshold, base.per_threshold) << "seed " << seed;
  }
}

TEST(CocoProperties, PermutationInvariantWithoutScoreTies) {
  std::mt19937_64 rng(1);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto in = instances::eval_instance(seed, 30);
    // Break score ties so no tie-breaking rule is involved.
    std::uniform_real_distribution<double> u(0, 1e-6);
    for (auto& im : in)
      for (auto& d : im.detections) d.score = 0.999 * d.score + u(rng);
    const auto base = evaluate(in);
    std::shuffle(in.begin(), in.end(), rng);
    for (auto& im : in) std::shuffle(im.detections.begin(), im.detections.end(), rng);
    const auto perm = evaluate(in);
    for (std::size_t t = 0; t < 10; ++t) EXPECT_NEAR(perm.per_threshold[t], base.per_threshold[t], 1e-12) << "seed " << seed;
  }
}

TEST(CocoIo, DetectionDumpRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "lirr_test_coco";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "dets.jsonl").string();
  const std::vector<std::pair<std::int64_t, std::vector<Detection>>> dets{
      {7, {{BBox{1.25, 2, 3, 4.5}, 0, 0.123456789012345678}, {BBox{0, 0, 1, 1}, 1, 1.0}}}, {9, {}}, {1000003, {{BBox{5, 5, 9, 9}, 0, 0.5}}}};
  write_detections(path, dets);
  const auto back = read_detections(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at(7)[0].score, 0.123456789012345678);
  EXPECT_EQ(back.at(7)[0].bbox, (BBox{1.25, 2, 3, 4.5}));
  EXPECT_EQ(back.at(7)[1].class_id, 1);
  EXPECT_EQ(back.at(1000003).size(), 1u);
  {
    std::ofstream os(path, std::ios::app);
    os << "{\"image_id\": 1, \"score\": 0.5}\n";
  }
  EXPECT_THROW(read_detections(path), std::runtime_error);
}

TEST(CocoIo, ReportTableFormatting) {
  APReport r;
  r.thresholds = coco_iou_thresholds();
  r.per_threshold.assign(10, 0.5);
  r.per_threshold[9] = kApUndefined;
  r.ap = 0.5, r.ap50 = 0.5, r.ap75 = 0.5;
  const auto s = format_report(r);
  EXPECT_NE(s.find("AP50"), std::string::npos);
  EXPECT_NE(s.find("50.0"), std::string::npos);
  EXPECT_NE(s.find("n/a"), std::string::npos);
  const nlohmann::json j = r;
  EXPECT_EQ(j.get<APReport>(), r);
}
