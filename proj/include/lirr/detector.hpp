#ifndef LIRR_DETECTOR_HPP
#define LIRR_DETECTOR_HPP

// Single-shot anchor detector: a strided conv backbone g, a domain-invariant
// head f_i and a domain-dependent head f_d made of one parameter set per
// domain. Heads run a 3x3 conv on each feature level and emit, per anchor,
// K+1 class logits (index 0 is background) and 4 box offsets.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "lirr/geometry.hpp"
#include "lirr/nn.hpp"
#include "lirr/ops.hpp"
#include "lirr/sample.hpp"

namespace lirr {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AnchorLevel, stride, scales, aspects)

struct ModelSpec {
  std::size_t image_size = 64;
  std::size_t in_channels = 1;
  std::size_t num_classes = 1;  // foreground classes
  // One 3x3 stride-2 conv + leaky ReLU per stage.
  std::vector<std::size_t> backbone_channels{8, 16, 32, 32};
  double leaky_slope = 0.1;
  // Stages whose outputs feed the heads, one anchor level each.
  std::vector<std::size_t> head_stages{2, 3};
  std::vector<AnchorLevel> anchor_levels{{8, {12.0, 20.0}, {1.0, 2.0, 0.5}}, {16, {28.0, 40.0}, {1.0, 2.0, 0.5}}};
  double pos_iou = 0.5;
  double neg_iou = 0.4;
  std::size_t neg_ratio = 3;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
  std::size_t domain_hidden = 16;  // width of the domain classifier MLP

  void validate() const {
    if (backbone_channels.empty()) throw std::invalid_argument("model: empty backbone");
    if (head_stages.size() != anchor_levels.size()) throw std::invalid_argument("model: one anchor level per head stage");
    for (std::size_t i = 0; i < head_stages.size(); ++i) {
      if (head_stages[i] >= backbone_channels.size()) throw std::invalid_argument("model: head stage out of range");
      const std::size_t stride = std::size_t{2} << head_stages[i];
      if (anchor_levels[i].stride != stride)
        throw std::invalid_argument("model: anchor level " + std::to_string(i) + " stride " +
                                    std::to_string(anchor_levels[i].stride) + " != feature stride " + std::to_string(stride));
    }
    if (num_classes < 1) throw std::invalid_argument("model: need at least one class");
    if (!(leaky_slope >= 0 && leaky_slope < 1)) throw std::invalid_argument("model: leaky_slope outside [0, 1)");
    if (pos_iou < neg_iou) throw std::invalid_argument("model: pos_iou < neg_iou");
  }

  AnchorConfig anchor_config() const { return {image_size, image_size, anchor_levels}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelSpec, image_size, in_channels, num_classes, backbone_channels,
                                                leaky_slope, head_stages, anchor_levels, pos_iou, neg_iou, neg_ratio,
                                                score_threshold, nms_iou, max_detections, domain_hidden)

enum class HeadSet { Invariant, DomainSource, DomainTarget };

inline HeadSet domain_head(Domain d) { return d == Domain::Source ? HeadSet::DomainSource : HeadSet::DomainTarget; }

template <std::floating_point T>
struct HeadOutput {
  Tensor<T> cls;  // [N, anchors, K+1]
  Tensor<T> box;  // [N, anchors, 4]
};

template <std::floating_point T>
struct Features {
  std::vector<Tensor<T>> levels;  // inputs to the heads
  Tensor<T> last;                 // final backbone stage
};

// Stacks sample images into an [N, C, H, W] constant tensor.
template <std::floating_point T>
Tensor<T> images_tensor(const std::vector<const Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("images_tensor: empty batch");
  const auto& f = *batch.front();
  std::vector<T> data;
  data.reserve(batch.size() * f.image.size());
  for (const auto* s : batch) {
    if (s->channels != f.channels || s->height != f.height || s->width != f.width)
      throw DimensionError("images_tensor: mixed image sizes in batch");
    for (float v : s->image) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>({batch.size(), f.channels, f.height, f.width}, std::move(data));
}

// Reorders per-level head maps [N, A*D, H, W] into anchor-major class and
// box tensors, following the anchor grid order (level, row, col, anchor).
template <std::floating_point T>
HeadOutput<T> gather_anchor_outputs(Tape<T>& tape, const std::vector<Tensor<T>>& maps, const AnchorGrid& grid,
                                    std::size_t num_logits) {
  const std::size_t d = num_logits + 4;
  const std::size_t n = maps.at(0).dim(0);
  const std::size_t total = grid.size();
  std::vector<T> cls(n * total * num_logits), box(n * total * 4);
  struct LevelGeom {
    std::size_t per_cell, h, w, offset;
  };
  std::vector<LevelGeom> geo;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const std::size_t a = grid.config.levels[l].per_cell();
    LevelGeom g{a, grid.grid_h[l], grid.grid_w[l], grid.level_offset[l]};
    if (maps[l].shape() != Shape{n, a * d, g.h, g.w})
      throw DimensionError("head map " + shape_str(maps[l].shape()) + " does not match anchor level " + std::to_string(l));
    geo.push_back(g);
  }
  // Visits (map index, anchor-major index) pairs for both directions.
  auto visit = [geo, n, total, d, num_logits](auto&& fn) {
    for (std::size_t l = 0; l < geo.size(); ++l) {
      const auto& g = geo[l];
      const std::size_t plane = g.h * g.w;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < g.h; ++y)
          for (std::size_t x = 0; x < g.w; ++x)
            for (std::size_t a = 0; a < g.per_cell; ++a) {
              const std::size_t anchor = g.offset + (y * g.w + x) * g.per_cell + a;
              const std::size_t src = ((b * g.per_cell * d + a * d) * plane) + y * g.w + x;
              for (std::size_t k = 0; k < d; ++k) {
                const std::size_t map_idx = src + k * plane;
                if (k < num_logits) fn(l, map_idx, true, (b * total + anchor) * num_logits + k);
                else fn(l, map_idx, false, (b * total + anchor) * 4 + (k - num_logits));
              }
            }
    }
  };
  visit([&](std::size_t l, std::size_t mi, bool is_cls, std::size_t oi) {
    (is_cls ? cls : box)[oi] = maps[l].values()[mi];
  });
  std::vector<const Tensor<T>*> inputs;
  std::vector<typename Tape<T>::NodePtr> nodes;
  for (const auto& m : maps) inputs.push_back(&m), nodes.push_back(m.node());

  // Two tape entries over the same maps: one routes class gradients back, the
  // other box gradients.
  auto cls_t = tape.record({n, total, num_logits}, std::move(cls), inputs, [nodes, visit](std::span<const T> g) {
    visit([&](std::size_t l, std::size_t mi, bool is_cls, std::size_t oi) {
      if (is_cls && nodes[l]->requires_grad) {
        nodes[l]->ensure_grad();
        nodes[l]->grad[mi] += g[oi];
      }
    });
  });
  auto box_t = tape.record({n, total, 4}, std::move(box), inputs, [nodes, visit](std::span<const T> g) {
    visit([&](std::size_t l, std::size_t mi, bool is_cls, std::size_t oi) {
      if (!is_cls && nodes[l]->requires_grad) {
        nodes[l]->ensure_grad();
        nodes[l]->grad[mi] += g[oi];
      }
    });
  });
  return {cls_t, box_t};
}

// Per-sample values of the detection loss L and their parts.
template <std::floating_point T>
struct DetectionLossTerms {
  Tensor<T> per_sample;  // [N]
  std::vector<double> cls_part, loc_part;
};

namespace detail {

// Indices of the negatives kept by hard-negative mining: highest background
// loss first, ties by lower anchor index.
template <class T>
std::vector<std::size_t> mine_negatives(const std::vector<int>& assignment, const std::vector<T>& bg_loss,
                                        std::size_t keep) {
  std::vector<std::size_t> neg;
  for (std::size_t a = 0; a < assignment.size(); ++a)
    if (assignment[a] == MatchResult::kNegative) neg.push_back(a);
  keep = std::min(keep, neg.size());
  std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(keep), neg.end(),
                    [&](std::size_t x, std::size_t y) { return bg_loss[x] > bg_loss[y] || (bg_loss[x] == bg_loss[y] && x < y); });
  neg.resize(keep);
  return neg;
}

}  // namespace detail

// L per sample: cross entropy over positives plus hard-mined negatives
// (neg_ratio per positive, at least neg_ratio) plus smooth-L1 summed over the
// positives' four offsets, divided by max(1, #positives).
template <std::floating_point T>
DetectionLossTerms<T> detection_losses(Tape<T>& tape, const HeadOutput<T>& out, const std::vector<const MatchResult*>& matches,
                                       std::size_t neg_ratio) {
  const std::size_t n = out.cls.dim(0), na = out.cls.dim(1), k = out.cls.dim(2);
  if (matches.size() != n) throw DimensionError("detection_losses: " + std::to_string(matches.size()) + " matches for batch of " + std::to_string(n));
  struct Selected {
    std::size_t anchor;
    int label;
  };
  std::vector<std::vector<Selected>> selected(n);
  std::vector<std::vector<T>> probs(n);  // softmax of selected anchors, row-major
  std::vector<std::vector<std::size_t>> positives(n);
  std::vector<T> norm(n);
  DetectionLossTerms<T> terms;
  terms.cls_part.resize(n);
  terms.loc_part.resize(n);
  std::vector<T> losses(n);
  const auto& z = out.cls.values();
  const auto& bx = out.box.values();
  for (std::size_t b = 0; b < n; ++b) {
    const auto& m = *matches[b];
    if (m.assignment.size() != na) throw DimensionError("detection_losses: match built for a different anchor grid");
    std::vector<T> lse(na), bg_loss(na);
    for (std::size_t a = 0; a < na; ++a) {
      const T* row = z.data() + (b * na + a) * k;
      const T mx = *std::max_element(row, row + k);
      T s = T(0);
      for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
      lse[a] = mx + std::log(s);
      bg_loss[a] = lse[a] - row[0];
    }
    std::size_t npos = 0;
    for (std::size_t a = 0; a < na; ++a)
      if (m.assignment[a] >= 0) {
        if (m.labels[a] < 0 || static_cast<std::size_t>(m.labels[a]) + 1 >= k)
          throw std::out_of_range("detection_losses: class label outside head range");
        selected[b].push_back({a, m.labels[a] + 1});
        positives[b].push_back(a);
        ++npos;
      }
    for (std::size_t a : detail::mine_negatives(m.assignment, bg_loss, neg_ratio * std::max<std::size_t>(npos, 1)))
      selected[b].push_back({a, 0});
    norm[b] = static_cast<T>(std::max<std::size_t>(npos, 1));
    T cls_sum = T(0), loc_sum = T(0);
    for (const auto& s : selected[b]) {
      const T* row = z.data() + (b * na + s.anchor) * k;
      cls_sum += lse[s.anchor] - row[s.label];
      for (std::size_t j = 0; j < k; ++j) probs[b].push_back(std::exp(row[j] - lse[s.anchor]));
    }
    for (std::size_t a : positives[b])
      for (std::size_t j = 0; j < 4; ++j)
        loc_sum += detail::smooth_l1_value(bx[(b * na + a) * 4 + j] - static_cast<T>(m.targets[a][j]));
    terms.cls_part[b] = static_cast<double>(cls_sum / norm[b]);
    terms.loc_part[b] = static_cast<double>(loc_sum / norm[b]);
    losses[b] = (cls_sum + loc_sum) / norm[b];
  }
  std::vector<std::vector<std::array<T, 4>>> targets(n);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t a : positives[b]) {
      const auto& t = matches[b]->targets[a];
      targets[b].push_back({static_cast<T>(t[0]), static_cast<T>(t[1]), static_cast<T>(t[2]), static_cast<T>(t[3])});
    }
  auto cn = out.cls.node();
  auto bn = out.box.node();
  terms.per_sample = tape.record(
      {n}, std::move(losses), {&out.cls, &out.box},
      [cn, bn, n, na, k, selected = std::move(selected), probs = std::move(probs), positives = std::move(positives),
       targets = std::move(targets), norm = std::move(norm)](std::span<const T> g) {
        for (std::size_t b = 0; b < n; ++b) {
          const T w = g[b] / norm[b];
          if (cn->requires_grad) {
            cn->ensure_grad();
            for (std::size_t i = 0; i < selected[b].size(); ++i) {
              const auto& s = selected[b][i];
              T* dz = cn->grad.data() + (b * na + s.anchor) * k;
              for (std::size_t j = 0; j < k; ++j)
                dz[j] += w * (probs[b][i * k + j] - (static_cast<int>(j) == s.label ? T(1) : T(0)));
            }
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < positives[b].size(); ++i) {
              const std::size_t a = positives[b][i];
              for (std::size_t j = 0; j < 4; ++j) {
                const std::size_t idx = (b * na + a) * 4 + j;
                bn->grad[idx] += w * detail::smooth_l1_slope(bn->data[idx] - targets[b][i][j]);
              }
            }
          }
        }
      });
  return terms;
}

// Mean of detection_losses over the batch.
template <std::floating_point T>
Tensor<T> detection_loss(Tape<T>& tape, const HeadOutput<T>& out, const std::vector<const MatchResult*>& matches,
                         std::size_t neg_ratio) {
  return mean(tape, detection_losses(tape, out, matches, neg_ratio).per_sample);
}

template <std::floating_point T>
class Detector {
 public:
  Detector(ParameterStore<T>& store, ModelSpec spec, std::mt19937_64& rng)
      : spec_(std::move(spec)), anchors_(generate_anchors((spec_.validate(), spec_.anchor_config()))) {
    std::size_t in = spec_.in_channels;
    for (std::size_t s = 0; s < spec_.backbone_channels.size(); ++s) {
      const std::size_t out = spec_.backbone_channels[s];
      const std::string p = "backbone.conv" + std::to_string(s + 1);
      conv_w_.push_back(store.add(p + ".weight", he_normal<T>({out, in, 3, 3}, in * 9, rng)));
      conv_b_.push_back(store.add(p + ".bias", Tensor<T>::zeros({out}, true)));
      in = out;
    }
    for (HeadSet set : {HeadSet::Invariant, HeadSet::DomainSource, HeadSet::DomainTarget}) {
      auto& hp = heads_[static_cast<std::size_t>(set)];
      for (std::size_t l = 0; l < spec_.head_stages.size(); ++l) {
        const std::size_t c = spec_.backbone_channels[spec_.head_stages[l]];
        const std::size_t out = spec_.anchor_levels[l].per_cell() * (spec_.num_classes + 1 + 4);
        const std::string p = head_prefix(set) + ".l" + std::to_string(l);
        hp.weight.push_back(store.add(p + ".weight", he_normal<T>({out, c, 3, 3}, c * 9, rng)));
        hp.bias.push_back(store.add(p + ".bias", Tensor<T>::zeros({out}, true)));
      }
    }
  }

  static std::string head_prefix(HeadSet set) {
    switch (set) {
      case HeadSet::Invariant: return "head_inv";
      case HeadSet::DomainSource: return "head_dom.source";
      case HeadSet::DomainTarget: return "head_dom.target";
    }
    return {};
  }

  const ModelSpec& spec() const { return spec_; }
  const AnchorGrid& anchors() const { return anchors_; }
  std::size_t feature_channels() const { return spec_.backbone_channels.back(); }
  std::size_t num_logits() const { return spec_.num_classes + 1; }

  Features<T> backbone(Tape<T>& tape, const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != spec_.in_channels || images.dim(2) != spec_.image_size ||
        images.dim(3) != spec_.image_size)
      throw DimensionError("detector expects [N, " + std::to_string(spec_.in_channels) + ", " +
                           std::to_string(spec_.image_size) + ", " + std::to_string(spec_.image_size) + "] input, got " +
                           shape_str(images.shape()));
    Features<T> f;
    Tensor<T> x = images;
    for (std::size_t s = 0; s < conv_w_.size(); ++s) {
      x = leaky_relu(tape, add_channel_bias(tape, conv2d(tape, x, conv_w_[s], 2, 1), conv_b_[s]), static_cast<T>(spec_.leaky_slope));
      if (std::find(spec_.head_stages.begin(), spec_.head_stages.end(), s) != spec_.head_stages.end()) f.levels.push_back(x);
    }
    f.last = x;
    return f;
  }

  // With `reverse_params` set, the head's parameters pass through
  // grad_reverse first: the forward value is unchanged and the parameters
  // receive the negated (scaled) gradient.
  HeadOutput<T> head(Tape<T>& tape, const std::vector<Tensor<T>>& levels, HeadSet set,
                     std::optional<T> reverse_params = std::nullopt) const {
    const auto& hp = heads_[static_cast<std::size_t>(set)];
    std::vector<Tensor<T>> maps;
    for (std::size_t l = 0; l < levels.size(); ++l) {
      Tensor<T> w = hp.weight[l], b = hp.bias[l];
      if (reverse_params) {
        w = grad_reverse(tape, w, *reverse_params);
        b = grad_reverse(tape, b, *reverse_params);
      }
      maps.push_back(add_channel_bias(tape, conv2d(tape, levels[l], w, 1, 1), b));
    }
    return gather_anchor_outputs(tape, maps, anchors_, num_logits());
  }

  MatchResult match(const Sample& s) const {
    return match_anchors(s.boxes, s.classes, anchors_, {spec_.pos_iou, spec_.neg_iou});
  }

  // Inference with f_i: softmax per anchor, score threshold, decode and clamp,
  // per-class NMS, top max_detections.
  std::vector<std::vector<Detection>> detect(const Tensor<T>& images) const {
    Tape<T> tape(false);
    const auto out = head(tape, backbone(tape, images).levels, HeadSet::Invariant);
    return postprocess(out);
  }

  std::vector<std::vector<Detection>> postprocess(const HeadOutput<T>& out) const {
    const std::size_t n = out.cls.dim(0), na = out.cls.dim(1), k = out.cls.dim(2);
    const T size = static_cast<T>(spec_.image_size);
    std::vector<std::vector<Detection>> result(n);
    std::vector<T> p(k);
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<Detection> cand;
      for (std::size_t a = 0; a < na; ++a) {
        const T* row = out.cls.values().data() + (b * na + a) * k;
        const T mx = *std::max_element(row, row + k);
        T s = T(0);
        for (std::size_t j = 0; j < k; ++j) s += (p[j] = std::exp(row[j] - mx));
        for (std::size_t c = 1; c < k; ++c) {
          const double score = static_cast<double>(p[c] / s);
          if (!(score > spec_.score_threshold)) continue;
          const T* t = out.box.values().data() + (b * na + a) * 4;
          const Box<T> decoded = clamp_box(decode_box<T>({t[0], t[1], t[2], t[3]}, anchors_.anchors[a].as<T>()), size, size);
          cand.push_back({decoded.template as<double>(), static_cast<int>(c - 1), std::clamp(score, 0.0, 1.0)});
        }
      }
      auto kept = nms(cand, spec_.nms_iou);
      if (kept.size() > spec_.max_detections) kept.resize(spec_.max_detections);
      result[b] = std::move(kept);
    }
    return result;
  }

 private:
  struct HeadParams {
    std::vector<Tensor<T>> weight, bias;
  };
  ModelSpec spec_;
  AnchorGrid anchors_;
  std::vector<Tensor<T>> conv_w_, conv_b_;
  std::array<HeadParams, 3> heads_;
};

}  // namespace lirr

#endif  // LIRR_DETECTOR_HPP
