#ifndef LIRR_LIRR_HPP
#define LIRR_LIRR_HPP

// Joint invariant-representation / invariant-risk objective for detection.
//
//   L_rep   = E_src[log C(g(x))] + E_tgt[log(1 - C(g(x)))]
//   L_i     = mean detection loss of the shared head f_i over both domains
//   L_d     = mean detection loss of f_d(., d), the head selected by domain
//   L_risk  = L_i + lambda_risk * (L_i - L_d)
//   L_total = L_risk + lambda_rep * L_rep
//
// min over (g, f_i), max over (C, f_d), realized with one optimizer:
//
//  * C sits behind a gradient reversal layer on the pooled backbone features.
//    The descended term is -lambda_rep * L_rep (the domain classifier's
//    binary cross-entropy), so C descends its BCE while g receives the
//    reversed gradient and moves to confuse it.
//  * f_d's parameters pass through grad_reverse before use. Inside L_risk the
//    -lambda_risk * L_d term would push f_d uphill on L_d; the reversal turns
//    that into descent on L_d, which is the max over f_d of L_risk. g still
//    sees the unreversed -lambda_risk * dL_d.
//  * f_d has f_i's architecture, so max over f_d of (L_i - L_d) is never
//    below zero. A negative batch gap only means f_d lags behind f_i; with
//    clamp_gap the L_d path into g is then cut for that step (the bound's
//    gradient is zero), which keeps g from drifting features to exploit the
//    lag. Values are unaffected.
//
// LossBreakdown reports the terms as written above; `objective` is the scalar
// actually back-propagated, L_risk - lambda_rep * L_rep.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lirr/detector.hpp"
#include "lirr/nn.hpp"
#include "lirr/ops.hpp"
#include "lirr/sample.hpp"

namespace lirr {

struct LirrConfig {
  double lambda_rep = 0.1;
  double lambda_risk = 1.0;
  double grl_lambda = 1.0;
  bool clamp_gap = true;

  void validate() const {
    if (!(lambda_rep >= 0 && lambda_risk >= 0 && grl_lambda >= 0))
      throw std::invalid_argument("LIRR weights must be >= 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LirrConfig, lambda_rep, lambda_risk, grl_lambda, clamp_gap)

struct LossBreakdown {
  double l_rep = 0, l_i = 0, l_d = 0, l_risk = 0, l_total = 0;
  double objective = 0;
  double l_i_cls = 0, l_i_loc = 0, l_d_cls = 0, l_d_loc = 0;
  bool gap_clamped = false;

  bool finite() const {
    for (double v : {l_rep, l_i, l_d, l_risk, l_total, objective})
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline nlohmann::json to_json_line(std::size_t step, const LossBreakdown& b) {
  return {{"step", step}, {"l_rep", b.l_rep}, {"l_i", b.l_i}, {"l_d", b.l_d}, {"l_risk", b.l_risk}, {"l_total", b.l_total}};
}

// Two-layer MLP on pooled features -> one logit per image.
template <std::floating_point T>
class DomainClassifier {
 public:
  DomainClassifier(ParameterStore<T>& store, std::size_t in_features, std::size_t hidden, std::mt19937_64& rng)
      : w1_(store.add("domain_clf.fc1.weight", he_normal<T>({in_features, hidden}, in_features, rng))),
        b1_(store.add("domain_clf.fc1.bias", Tensor<T>::zeros({hidden}, true))),
        w2_(store.add("domain_clf.fc2.weight", he_normal<T>({hidden, 1}, hidden, rng))),
        b2_(store.add("domain_clf.fc2.bias", Tensor<T>::zeros({1}, true))) {}

  Tensor<T> logits(Tape<T>& tape, const Tensor<T>& pooled) const {
    auto h = relu(tape, add_channel_bias(tape, matmul(tape, pooled, w1_), b1_));
    return add_channel_bias(tape, matmul(tape, h, w2_), b2_);
  }

 private:
  Tensor<T> w1_, b1_, w2_, b2_;
};

// Parameters of g, f_i, f_d and C in one store (checkpoint order).
template <std::floating_point T>
class LirrModel {
 public:
  LirrModel(const ModelSpec& spec, std::uint64_t seed) : rng_(seed), detector_(store_, spec, rng_),
        classifier_(store_, spec.backbone_channels.back(), spec.domain_hidden, rng_) {}

  LirrModel(const LirrModel&) = delete;
  LirrModel& operator=(const LirrModel&) = delete;

  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const Detector<T>& detector() const { return detector_; }
  const DomainClassifier<T>& classifier() const { return classifier_; }

 private:
  ParameterStore<T> store_;
  std::mt19937_64 rng_;
  Detector<T> detector_;
  DomainClassifier<T> classifier_;
};

// Samples of one domain with their anchor assignments.
struct DomainBatch {
  std::vector<const Sample*> samples;
  std::vector<const MatchResult*> matches;

  std::size_t size() const { return samples.size(); }
};

namespace detail {

inline void check_labeled(const DomainBatch& b, const char* what) {
  if (b.samples.size() != b.matches.size()) throw std::invalid_argument(std::string(what) + ": samples/matches mismatch");
  for (const auto* s : b.samples)
    if (!s->labeled()) throw std::invalid_argument(std::string(what) + ": sample " + std::to_string(s->image_id) + " is unlabeled");
}

}  // namespace detail

// Value of L_rep on pooled features of each domain. With `reversal`, the
// features pass through grad_reverse(grl_lambda) before C.
template <std::floating_point T>
Tensor<T> rep_loss(Tape<T>& tape, const Tensor<T>& feat_src, const Tensor<T>& feat_tgt, const DomainClassifier<T>& clf,
                   T grl_lambda, bool reversal = true) {
  if (feat_src.rank() != 2 || feat_tgt.rank() != 2 || feat_src.dim(0) == 0 || feat_tgt.dim(0) == 0)
    throw std::invalid_argument("rep_loss: both domain batches must be non-empty");
  auto side = [&](const Tensor<T>& f, T label) {
    Tensor<T> x = reversal ? grad_reverse(tape, f, grl_lambda) : f;
    const std::vector<T> t(f.dim(0), label);
    return binary_cross_entropy_logit(tape, clf.logits(tape, x), std::span<const T>(t));
  };
  // log s(z) = -BCE(z, 1), log(1 - s(z)) = -BCE(z, 0)
  return neg(tape, add(tape, side(feat_src, T(1)), side(feat_tgt, T(0))));
}

// L_i on a mixed batch whose head outputs come from f_i.
template <std::floating_point T>
DetectionLossTerms<T> invariant_risk_terms(Tape<T>& tape, const Detector<T>& det, const std::vector<Tensor<T>>& levels,
                                           const std::vector<const MatchResult*>& matches) {
  return detection_losses(tape, det.head(tape, levels, HeadSet::Invariant), matches, det.spec().neg_ratio);
}

// L_d: each contiguous run of same-domain samples is scored by that domain's
// head; per-sample losses keep batch order.
template <std::floating_point T>
DetectionLossTerms<T> domain_risk_terms(Tape<T>& tape, const Detector<T>& det, const std::vector<Tensor<T>>& levels,
                                        const std::vector<const MatchResult*>& matches, const std::vector<Domain>& domains,
                                        std::optional<T> reverse_params = std::nullopt) {
  const std::size_t n = domains.size();
  if (n == 0 || matches.size() != n) throw std::invalid_argument("domain_risk: batch/domain size mismatch");
  std::vector<Tensor<T>> parts;
  DetectionLossTerms<T> all;
  for (std::size_t begin = 0; begin < n;) {
    std::size_t end = begin;
    while (end < n && domains[end] == domains[begin]) ++end;
    std::vector<Tensor<T>> sliced;
    for (const auto& lv : levels) sliced.push_back(begin == 0 && end == n ? lv : slice_rows(tape, lv, begin, end));
    const std::vector<const MatchResult*> m(matches.begin() + static_cast<std::ptrdiff_t>(begin),
                                            matches.begin() + static_cast<std::ptrdiff_t>(end));
    auto terms = detection_losses(tape, det.head(tape, sliced, domain_head(domains[begin]), reverse_params), m,
                                  det.spec().neg_ratio);
    parts.push_back(terms.per_sample);
    all.cls_part.insert(all.cls_part.end(), terms.cls_part.begin(), terms.cls_part.end());
    all.loc_part.insert(all.loc_part.end(), terms.loc_part.begin(), terms.loc_part.end());
    begin = end;
  }
  all.per_sample = parts.size() == 1 ? parts[0] : concat_rows(tape, parts);
  return all;
}

// L_i over the concatenation [src; tgt].
template <std::floating_point T>
Tensor<T> invariant_risk(Tape<T>& tape, const Detector<T>& det, const DomainBatch& batch) {
  detail::check_labeled(batch, "invariant_risk");
  const auto f = det.backbone(tape, images_tensor<T>(batch.samples));
  return mean(tape, invariant_risk_terms(tape, det, f.levels, batch.matches).per_sample);
}

template <std::floating_point T>
Tensor<T> domain_risk(Tape<T>& tape, const Detector<T>& det, const DomainBatch& batch) {
  detail::check_labeled(batch, "domain_risk");
  const auto f = det.backbone(tape, images_tensor<T>(batch.samples));
  std::vector<Domain> domains;
  for (const auto* s : batch.samples) domains.push_back(s->domain);
  return mean(tape, domain_risk_terms(tape, det, f.levels, batch.matches, domains).per_sample);
}

// L_i + lambda_risk * (L_i - L_d)
template <std::floating_point T>
Tensor<T> risk_loss(Tape<T>& tape, const Tensor<T>& l_i, const Tensor<T>& l_d, T lambda_risk) {
  return add(tape, l_i, scale(tape, sub(tape, l_i, l_d), lambda_risk));
}

template <std::floating_point T>
struct LirrForward {
  LossBreakdown breakdown;
  Tensor<T> objective;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline DomainBatch concat_batches(const DomainBatch& a, const DomainBatch& b) {
  DomainBatch m = a;
  m.samples.insert(m.samples.end(), b.samples.begin(), b.samples.end());
  m.matches.insert(m.matches.end(), b.matches.begin(), b.matches.end());
  return m;
}

}  // namespace detail

// Full objective on one source and one target batch (both labeled).
template <std::floating_point T>
LirrForward<T> lirr_loss(Tape<T>& tape, const LirrModel<T>& model, const DomainBatch& src, const DomainBatch& tgt,
                         const LirrConfig& cfg) {
  cfg.validate();
  if (src.size() == 0 || tgt.size() == 0) throw std::invalid_argument("lirr_loss: both domain batches must be non-empty");
  detail::check_labeled(src, "lirr_loss");
  detail::check_labeled(tgt, "lirr_loss");
  const auto& det = model.detector();
  const DomainBatch mixed = detail::concat_batches(src, tgt);
  std::vector<Domain> domains(src.size(), Domain::Source);
  domains.insert(domains.end(), tgt.size(), Domain::Target);

  const auto f = det.backbone(tape, images_tensor<T>(mixed.samples));
  const auto gate = std::make_shared<T>(T(1));
  std::vector<Tensor<T>> gated;
  for (const auto& lv : f.levels) gated.push_back(gradient_gate(tape, lv, std::shared_ptr<const T>(gate)));
  const auto li_terms = invariant_risk_terms(tape, det, f.levels, mixed.matches);
  const auto ld_terms = domain_risk_terms(tape, det, gated, mixed.matches, domains, std::optional<T>(T(1)));
  const Tensor<T> l_i = mean(tape, li_terms.per_sample);
  const Tensor<T> l_d = mean(tape, ld_terms.per_sample);
  const bool clamped = cfg.clamp_gap && l_i.item() < l_d.item();
  if (clamped) *gate = T(0);
  const Tensor<T> l_risk = risk_loss(tape, l_i, l_d, static_cast<T>(cfg.lambda_risk));

  const Tensor<T> pooled = global_avg_pool(tape, f.last);
  const Tensor<T> l_rep = rep_loss(tape, slice_rows(tape, pooled, 0, src.size()),
                                   slice_rows(tape, pooled, src.size(), mixed.size()), model.classifier(),
                                   static_cast<T>(cfg.grl_lambda));
  const Tensor<T> objective = sub(tape, l_risk, scale(tape, l_rep, static_cast<T>(cfg.lambda_rep)));

  LirrForward<T> out;
  auto& b = out.breakdown;
  b.l_i = static_cast<double>(l_i.item());
  b.l_d = static_cast<double>(l_d.item());
  b.l_risk = static_cast<double>(l_risk.item());
  b.l_rep = static_cast<double>(l_rep.item());
  b.l_total = b.l_risk + cfg.lambda_rep * b.l_rep;
  b.objective = static_cast<double>(objective.item());
  b.l_i_cls = detail::mean_of(li_terms.cls_part);
  b.l_i_loc = detail::mean_of(li_terms.loc_part);
  b.l_d_cls = detail::mean_of(ld_terms.cls_part);
  b.l_d_loc = detail::mean_of(ld_terms.loc_part);
  b.gap_clamped = clamped;
  out.objective = objective;
  return out;
}

// One simultaneous update of g, f_i, f_d and C. Returns the pre-step losses.
template <std::floating_point T>
LossBreakdown train_step(LirrModel<T>& model, const DomainBatch& src, const DomainBatch& tgt, SgdMomentum<T>& opt,
                         const LirrConfig& cfg) {
  model.params().zero_grad();
  Tape<T> tape;
  auto fwd = lirr_loss(tape, model, src, tgt, cfg);
  tape.backward(fwd.objective);
  opt.step(model.params());
  return fwd.breakdown;
}

// Plain supervised step on L_i only (source-only and oracle baselines, or
// joint training when `batch` mixes both domains). Only the terms of L_i are
// reported; C and f_d receive no gradient.
template <std::floating_point T>
LossBreakdown supervised_step(LirrModel<T>& model, const DomainBatch& batch, SgdMomentum<T>& opt) {
  detail::check_labeled(batch, "supervised_step");
  model.params().zero_grad();
  Tape<T> tape;
  const auto& det = model.detector();
  const auto f = det.backbone(tape, images_tensor<T>(batch.samples));
  const auto terms = invariant_risk_terms(tape, det, f.levels, batch.matches);
  const Tensor<T> l_i = mean(tape, terms.per_sample);
  tape.backward(l_i);
  opt.step(model.params());
  LossBreakdown b;
  b.l_i = b.l_risk = b.l_total = b.objective = static_cast<double>(l_i.item());
  b.l_i_cls = detail::mean_of(terms.cls_part);
  b.l_i_loc = detail::mean_of(terms.loc_part);
  return b;
}

}  // namespace lirr

#endif  // LIRR_LIRR_HPP
