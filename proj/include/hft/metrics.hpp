#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hft/tensor.hpp"

namespace hft {

// Occupancy binarization per the rendering rule: strictly greater than the
// threshold, so p == 0.5 maps to unoccupied.
template <class T>
Tensor<std::uint8_t> binarize(const Tensor<T>& scores, double threshold = 0.5) {
  Tensor<std::uint8_t> out;
  out.shape = scores.shape;
  out.data.resize(scores.data.size());
  for (size_t i = 0; i < scores.data.size(); ++i)
    out.data[i] = scores.data[i] > static_cast<T>(threshold) ? 1 : 0;
  return out;
}

// Per-class intersection-over-union on valid cells. Classes whose valid union
// is empty report iou = 0 and evaluated = false, and are excluded from means.
struct IouResult {
  std::vector<double> iou;
  std::vector<std::uint8_t> evaluated;
  std::vector<std::int64_t> tp, fp, fn;
};

inline IouResult iou_per_class(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
                               const Tensor<std::uint8_t>& validity) {
  if (!pred.same_shape(gt)) throw ContractError("iou_per_class: pred/gt shape mismatch");
  if (pred.ndim() != 3 || validity.numel() * pred.dim(0) != pred.numel())
    throw ContractError("iou_per_class: validity shape mismatch");
  const int classes = pred.dim(0);
  const std::int64_t cells = validity.numel();
  IouResult r;
  r.iou.assign(static_cast<size_t>(classes), 0.0);
  r.evaluated.assign(static_cast<size_t>(classes), 0);
  r.tp.assign(static_cast<size_t>(classes), 0);
  r.fp.assign(static_cast<size_t>(classes), 0);
  r.fn.assign(static_cast<size_t>(classes), 0);
  for (int c = 0; c < classes; ++c) {
    const std::uint8_t* pp = pred.ptr() + static_cast<std::int64_t>(c) * cells;
    const std::uint8_t* gp = gt.ptr() + static_cast<std::int64_t>(c) * cells;
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::int64_t k = 0; k < cells; ++k) {
      if (!validity[k]) continue;
      if (pp[k] && gp[k]) ++tp;
      else if (pp[k]) ++fp;
      else if (gp[k]) ++fn;
    }
    r.tp[static_cast<size_t>(c)] = tp;
    r.fp[static_cast<size_t>(c)] = fp;
    r.fn[static_cast<size_t>(c)] = fn;
    const std::int64_t uni = tp + fp + fn;
    if (uni > 0) {
      r.iou[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(uni);
      r.evaluated[static_cast<size_t>(c)] = 1;
    }
  }
  return r;
}

// Area under the pixelwise precision-recall curve with the monotone
// (right-to-left max) precision envelope. Thresholds sweep the distinct score
// values; a cell is predicted positive when score >= threshold.
inline double average_precision_single(const std::vector<double>& scores,
                                       const std::vector<std::uint8_t>& labels) {
  std::int64_t total_pos = 0;
  for (auto y : labels) total_pos += y;
  if (total_pos == 0) return -1.0;  // excluded

  std::vector<std::int64_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
      return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    return a < b;
  });

  // One PR point per distinct threshold (tied scores enter together).
  std::vector<double> precision, recall;
  std::int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double thr = scores[static_cast<size_t>(order[i])];
    while (i < order.size() && scores[static_cast<size_t>(order[i])] == thr) {
      if (labels[static_cast<size_t>(order[i])]) ++tp;
      else ++fp;
      ++i;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_pos));
  }
  // Monotone envelope from the right, then integrate over recall increments.
  for (size_t k = precision.size(); k-- > 1;)
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_r = 0.0;
  for (size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_r) * precision[k];
    prev_r = recall[k];
  }
  return ap;
}

struct ApResult {
  std::vector<double> ap;
  std::vector<std::uint8_t> evaluated;
};

template <class T>
ApResult average_precision(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt,
                           const Tensor<std::uint8_t>& validity) {
  if (scores.shape != gt.shape) throw ContractError("average_precision: shape mismatch");
  const int classes = scores.dim(0);
  const std::int64_t cells = validity.numel();
  ApResult r;
  r.ap.assign(static_cast<size_t>(classes), 0.0);
  r.evaluated.assign(static_cast<size_t>(classes), 0);
  for (int c = 0; c < classes; ++c) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (std::int64_t k = 0; k < cells; ++k) {
      if (!validity[k]) continue;
      s.push_back(static_cast<double>(scores[static_cast<std::int64_t>(c) * cells + k]));
      y.push_back(gt[static_cast<std::int64_t>(c) * cells + k]);
    }
    const double ap = average_precision_single(s, y);
    if (ap >= 0.0) {
      r.ap[static_cast<size_t>(c)] = ap;
      r.evaluated[static_cast<size_t>(c)] = 1;
    }
  }
  return r;
}

struct BamIouResult {
  double iou_st = 0.0;
  double iou_dy = 0.0;
  double bamiou = 0.0;
};

// BamIoU = sum_i w_i IoU_st_i + sum_j w_j IoU_dy_j with per-group weights
// normalized to one. Group weights default to uniform when empty.
inline BamIouResult bamiou(const std::vector<double>& per_class_iou,
                           const std::vector<int>& static_ids, const std::vector<int>& dynamic_ids,
                           std::vector<double> static_weights = {},
                           std::vector<double> dynamic_weights = {}) {
  auto check_group = [&](const std::vector<int>& ids, std::vector<double>& w, const char* name) {
    if (w.empty()) w.assign(ids.size(), ids.empty() ? 0.0 : 1.0 / static_cast<double>(ids.size()));
    if (w.size() != ids.size()) throw ContractError("bamiou: weight count mismatch");
    double sum = 0.0;
    for (double x : w) sum += x;
    if (!ids.empty() && std::abs(sum - 1.0) > 1e-9)
      throw ContractError(std::string("bamiou: ") + name + " weights must sum to one");
  };
  for (int id : static_ids)
    for (int jd : dynamic_ids)
      if (id == jd) throw ContractError("bamiou: static/dynamic groups must be disjoint");
  check_group(static_ids, static_weights, "static");
  check_group(dynamic_ids, dynamic_weights, "dynamic");

  BamIouResult r;
  for (size_t i = 0; i < static_ids.size(); ++i)
    r.iou_st += static_weights[i] * per_class_iou[static_cast<size_t>(static_ids[i])];
  for (size_t j = 0; j < dynamic_ids.size(); ++j)
    r.iou_dy += dynamic_weights[j] * per_class_iou[static_cast<size_t>(dynamic_ids[j])];
  r.bamiou = r.iou_st + r.iou_dy;
  return r;
}

struct MetricReport {
  std::vector<double> per_class_iou;
  std::vector<std::uint8_t> iou_evaluated;
  double miou = 0.0;
  std::vector<double> per_class_ap;
  std::vector<std::uint8_t> ap_evaluated;
  double map = 0.0;
  double iou_st = 0.0;
  double iou_dy = 0.0;
  double bamiou = 0.0;
  std::vector<std::int64_t> tp, fp, fn;
  std::int64_t evaluated_cells = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto masked = [](const std::vector<double>& v, const std::vector<std::uint8_t>& ok) {
      nlohmann::json arr = nlohmann::json::array();
      for (size_t i = 0; i < v.size(); ++i) {
        if (ok[i]) arr.push_back(v[i]);
        else arr.push_back(nullptr);
      }
      return arr;
    };
    j["per_class_iou"] = masked(per_class_iou, iou_evaluated);
    j["miou"] = miou;
    j["per_class_ap"] = masked(per_class_ap, ap_evaluated);
    j["map"] = map;
    j["iou_st"] = iou_st;
    j["iou_dy"] = iou_dy;
    j["bamiou"] = bamiou;
    j["counts"] = {{"tp", tp}, {"fp", fp}, {"fn", fn}};
    j["evaluated_cells"] = evaluated_cells;
    return j;
  }
};

// Streaming evaluation over samples: accumulates global TP/FP/FN and pools
// scored cells for AP, then takes ratios. Order-independent by construction.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(int classes) : classes_(classes) {
    tp_.assign(static_cast<size_t>(classes), 0);
    fp_.assign(static_cast<size_t>(classes), 0);
    fn_.assign(static_cast<size_t>(classes), 0);
    scores_.resize(static_cast<size_t>(classes));
    labels_.resize(static_cast<size_t>(classes));
  }

  template <class T>
  void add_sample(const Tensor<T>& scores, const Tensor<std::uint8_t>& gt,
                  const Tensor<std::uint8_t>& validity) {
    if (scores.dim(0) != classes_) throw ContractError("metrics: class count mismatch");
    const auto pred = binarize(scores);
    const auto iou = iou_per_class(pred, gt, validity);
    const std::int64_t cells = validity.numel();
    for (int c = 0; c < classes_; ++c) {
      tp_[static_cast<size_t>(c)] += iou.tp[static_cast<size_t>(c)];
      fp_[static_cast<size_t>(c)] += iou.fp[static_cast<size_t>(c)];
      fn_[static_cast<size_t>(c)] += iou.fn[static_cast<size_t>(c)];
    }
    for (std::int64_t k = 0; k < cells; ++k) {
      if (!validity[k]) continue;
      ++evaluated_cells_;
      for (int c = 0; c < classes_; ++c) {
        scores_[static_cast<size_t>(c)].push_back(
            static_cast<double>(scores[static_cast<std::int64_t>(c) * cells + k]));
        labels_[static_cast<size_t>(c)].push_back(gt[static_cast<std::int64_t>(c) * cells + k]);
      }
    }
  }

  MetricReport report(const std::vector<int>& static_ids, const std::vector<int>& dynamic_ids) const {
    MetricReport r;
    r.per_class_iou.assign(static_cast<size_t>(classes_), 0.0);
    r.iou_evaluated.assign(static_cast<size_t>(classes_), 0);
    r.per_class_ap.assign(static_cast<size_t>(classes_), 0.0);
    r.ap_evaluated.assign(static_cast<size_t>(classes_), 0);
    r.tp = tp_;
    r.fp = fp_;
    r.fn = fn_;
    r.evaluated_cells = evaluated_cells_;
    int n_iou = 0, n_ap = 0;
    for (int c = 0; c < classes_; ++c) {
      const std::int64_t uni = tp_[static_cast<size_t>(c)] + fp_[static_cast<size_t>(c)] +
                               fn_[static_cast<size_t>(c)];
      if (uni > 0) {
        r.per_class_iou[static_cast<size_t>(c)] =
            static_cast<double>(tp_[static_cast<size_t>(c)]) / static_cast<double>(uni);
        r.iou_evaluated[static_cast<size_t>(c)] = 1;
        r.miou += r.per_class_iou[static_cast<size_t>(c)];
        ++n_iou;
      }
      const double ap = average_precision_single(scores_[static_cast<size_t>(c)],
                                                 labels_[static_cast<size_t>(c)]);
      if (ap >= 0.0) {
        r.per_class_ap[static_cast<size_t>(c)] = ap;
        r.ap_evaluated[static_cast<size_t>(c)] = 1;
        r.map += ap;
        ++n_ap;
      }
    }
    if (n_iou > 0) r.miou /= n_iou;
    if (n_ap > 0) r.map /= n_ap;
    const auto b = bamiou(r.per_class_iou, static_ids, dynamic_ids);
    r.iou_st = b.iou_st;
    r.iou_dy = b.iou_dy;
    r.bamiou = b.bamiou;
    return r;
  }

 private:
  int classes_;
  std::vector<std::int64_t> tp_, fp_, fn_;
  std::vector<std::vector<double>> scores_;
  std::vector<std::vector<std::uint8_t>> labels_;
  std::int64_t evaluated_cells_ = 0;
};

}  // namespace hft
